//! Logistic and least-squares fitters, plain and lasso-penalized.


use crate::error::{Error, Result};
use crate::linalg::{dot, solve_spd, weighted_gram, weighted_sum, Design};

/// Newton stopping rule shared by the iterative fitters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NewtonOptions {
    /// Bound on the Euclidean norm of the mean score at the solution.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        NewtonOptions {
            tol: 1e-10,
            max_iter: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlmFit {
    pub coef: Vec<f64>,
    pub iterations: usize,
    /// Norm of the mean (unpenalized) score, or of the last coordinate change for lasso fits.
    pub criterion: f64,
}

/// `|coef|_inf` beyond which a logistic fit is treated as separated.
const SEPARATION_BOUND: f64 = 50.0;

#[inline]
pub fn expit(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^t)` without overflow.
#[inline]
fn softplus(t: f64) -> f64 {
    t.max(0.0) + (-t.abs()).exp().ln_1p()
}

fn check_labels(labels: &[f64], n: usize) -> Result<()> {
    if labels.len() != n {
        return Err(Error::Schema(format!(
            "{} labels for a design with {n} rows",
            labels.len()
        )));
    }
    if labels.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::Schema("logistic labels must be 0 or 1".into()));
    }
    Ok(())
}

fn resolve_weights(weights: Option<&[f64]>, n: usize) -> Result<Vec<f64>> {
    match weights {
        None => Ok(vec![1.0; n]),
        Some(w) if w.len() != n => Err(Error::Schema(format!(
            "{} weights for a design with {n} rows",
            w.len()
        ))),
        Some(w) if w.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) => {
            Err(Error::Schema("weights must be finite and nonnegative".into()))
        }
        Some(w) => Ok(w.to_vec()),
    }
}

fn logistic_loglik(d: &Design, y: &[f64], w: &[f64], beta: &[f64]) -> f64 {
    (0..d.nrows())
        .map(|i| {
            let t = dot(d.row(i), beta);
            w[i] * (y[i] * t - softplus(t))
        })
        .sum()
}

/// Logistic regression of `labels` on the columns of `design` (which must
/// contain the intercept as column 0).
///
/// Without a penalty this is the maximum-likelihood fit by Newton-Raphson with
/// step halving; with `penalty = Some(lambda)` it is the lasso fit described
/// at [`fit_lasso`].
/// Converged fits with a fitted probability this close to 0 or 1 are
/// reported as separated.
const FITTED_FLOOR: f64 = 1e-8;

pub fn fit_logistic(
    design: &Design,
    labels: &[f64],
    weights: Option<&[f64]>,
    penalty: Option<f64>,
    opts: &NewtonOptions,
) -> Result<GlmFit> {
    let n = design.nrows();
    check_labels(labels, n)?;
    let w = resolve_weights(weights, n)?;
    if let Some(lambda) = penalty {
        return fit_lasso(design, labels, Some(&w), Family::Binomial, lambda, opts);
    }
    let wsum: f64 = w.iter().sum();
    if wsum <= 0.0 {
        return Err(Error::Precondition("logistic fit on zero total weight".into()));
    }
    let k = design.ncols();
    let mut beta = vec![0.0; k];
    let mut ll = logistic_loglik(design, labels, &w, &beta);
    let mut score = vec![0.0; n];
    let mut hw = vec![0.0; n];
    let mut crit = f64::INFINITY;
    let mut polished = false;

    for iter in 0..=opts.max_iter {
        for i in 0..n {
            let p = expit(dot(design.row(i), &beta));
            score[i] = w[i] * (labels[i] - p) / wsum;
            hw[i] = w[i] * p * (1.0 - p) / wsum;
        }
        let g = weighted_sum(design, &score);
        crit = g.norm();
        if crit <= opts.tol && crit > 0.0 && !polished {
            // One undamped polishing step, kept only if it does not lose ground.
            polished = true;
            if let Ok(step) = solve_spd(weighted_gram(design, &hw), &g, "logistic information matrix") {
                let cand: Vec<f64> = beta.iter().zip(step.iter()).map(|(b, s)| b + s).collect();
                let sc: Vec<f64> = (0..n)
                    .map(|i| w[i] * (labels[i] - expit(dot(design.row(i), &cand))) / wsum)
                    .collect();
                let c2 = weighted_sum(design, &sc).norm();
                if c2 <= crit {
                    beta = cand;
                    crit = c2;
                }
            }
        }
        if crit <= opts.tol {
            let saturated = (0..n).any(|i| {
                let p = expit(dot(design.row(i), &beta));
                w[i] > 0.0 && !(FITTED_FLOOR..=1.0 - FITTED_FLOOR).contains(&p)
            });
            if saturated {
                return Err(Error::Separation("logistic regression"));
            }
            return Ok(GlmFit {
                coef: beta,
                iterations: iter,
                criterion: crit,
            });
        }
        if iter == opts.max_iter {
            break;
        }
        let h = weighted_gram(design, &hw);
        let step = match solve_spd(h, &g, "logistic information matrix") {
            Ok(s) => s,
            Err(_) if beta.iter().any(|b| b.abs() > SEPARATION_BOUND / 5.0) => {
                return Err(Error::Separation("logistic regression"))
            }
            Err(e) => return Err(e),
        };
        let mut t = 1.0;
        loop {
            let cand: Vec<f64> = beta.iter().zip(step.iter()).map(|(b, s)| b + t * s).collect();
            let ll_new = logistic_loglik(design, labels, &w, &cand);
            if ll_new >= ll - 1e-12 * (1.0 + ll.abs()) || t < 1e-10 {
                beta = cand;
                ll = ll_new;
                break;
            }
            t *= 0.5;
        }
        if beta.iter().any(|b| b.abs() > SEPARATION_BOUND) {
            return Err(Error::Separation("logistic regression"));
        }
    }
    Err(Error::Convergence {
        solver: "logistic Newton-Raphson",
        iterations: opts.max_iter,
        criterion: crit,
        last: beta,
    })
}

/// Weighted least squares through the normal equations.
pub fn fit_ols(design: &Design, response: &[f64], weights: Option<&[f64]>) -> Result<Vec<f64>> {
    let n = design.nrows();
    if response.len() != n {
        return Err(Error::Schema(format!(
            "{} responses for a design with {n} rows",
            response.len()
        )));
    }
    let w = resolve_weights(weights, n)?;
    let wy: Vec<f64> = w.iter().zip(response).map(|(a, b)| a * b).collect();
    let gram = weighted_gram(design, &w);
    let rhs = weighted_sum(design, &wy);
    let beta = solve_spd(gram, &rhs, "least-squares normal equations")?;
    Ok(beta.iter().copied().collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Family {
    Gaussian,
    Binomial,
}

struct Standardized {
    center: Vec<f64>,
    scale: Vec<f64>,
}

fn standardize(d: &Design, w: &[f64]) -> Standardized {
    let k = d.ncols();
    let wsum: f64 = w.iter().sum();
    let mut center = vec![0.0; k];
    let mut scale = vec![1.0; k];
    for j in 1..k {
        let m = (0..d.nrows()).map(|i| w[i] * d.row(i)[j]).sum::<f64>() / wsum;
        let v = (0..d.nrows())
            .map(|i| w[i] * (d.row(i)[j] - m).powi(2))
            .sum::<f64>()
            / wsum;
        center[j] = m;
        scale[j] = v.sqrt();
    }
    Standardized { center, scale }
}

#[inline]
fn soft_threshold(z: f64, g: f64) -> f64 {
    if z > g {
        z - g
    } else if z < -g {
        z + g
    } else {
        0.0
    }
}

/// Smallest penalty at which every non-intercept coefficient is zero.
pub fn lambda_max(design: &Design, y: &[f64], weights: Option<&[f64]>) -> Result<f64> {
    let n = design.nrows();
    let w = resolve_weights(weights, n)?;
    let st = standardize(design, &w);
    let wsum: f64 = w.iter().sum();
    let ybar = w.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / wsum;
    let mut best: f64 = 0.0;
    for j in 1..design.ncols() {
        if st.scale[j] == 0.0 {
            continue;
        }
        let g = (0..n)
            .map(|i| w[i] * (y[i] - ybar) * (design.row(i)[j] - st.center[j]) / st.scale[j])
            .sum::<f64>()
            / wsum;
        best = best.max(g.abs());
    }
    Ok(best)
}

/// Lasso fit by coordinate descent on standardized non-intercept columns.
///
/// Minimizes `-(1/W) sum_i w_i l_i(beta) + lambda * sum_{j>=1} |b_j|` where
/// `l_i` is the Gaussian (half squared error) or Bernoulli log-likelihood and
/// `b_j` are the coefficients on standardized columns. The intercept is not
/// penalized. Binomial fits use an outer IRLS loop. Returned coefficients are
/// on the original column scale.
pub fn fit_lasso(
    design: &Design,
    y: &[f64],
    weights: Option<&[f64]>,
    family: Family,
    lambda: f64,
    opts: &NewtonOptions,
) -> Result<GlmFit> {
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::Config(format!("lasso penalty must be >= 0, got {lambda}")));
    }
    let n = design.nrows();
    let k = design.ncols();
    if y.len() != n {
        return Err(Error::Schema("response length does not match design".into()));
    }
    let w = resolve_weights(weights, n)?;
    let wsum: f64 = w.iter().sum();
    let st = standardize(design, &w);
    let active: Vec<bool> = (0..k).map(|j| j == 0 || st.scale[j] > 0.0).collect();
    // Standardized design columns, column-major for the coordinate sweeps.
    let cols: Vec<Vec<f64>> = (0..k)
        .map(|j| {
            (0..n)
                .map(|i| {
                    if j == 0 {
                        1.0
                    } else if active[j] {
                        (design.row(i)[j] - st.center[j]) / st.scale[j]
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect();

    let mut b = vec![0.0; k];
    let ybar = w.iter().zip(y).map(|(a, v)| a * v).sum::<f64>() / wsum;
    b[0] = match family {
        Family::Gaussian => ybar,
        Family::Binomial => {
            let p = ybar.clamp(1e-6, 1.0 - 1e-6);
            (p / (1.0 - p)).ln()
        }
    };

    let inner_tol = opts.tol.max(1e-12);
    let max_sweeps = 10_000;
    let outer_max = match family {
        Family::Gaussian => 1,
        Family::Binomial => opts.max_iter.max(1),
    };

    let mut eta = vec![0.0; n];
    let mut iterations = 0;
    let mut last_change = f64::INFINITY;
    for outer in 0..outer_max {
        for i in 0..n {
            eta[i] = (0..k).map(|j| cols[j][i] * b[j]).sum();
        }
        // Working response and weights of the quadratic approximation.
        let (z, ww): (Vec<f64>, Vec<f64>) = match family {
            Family::Gaussian => (y.to_vec(), w.iter().map(|v| v / wsum).collect()),
            Family::Binomial => (0..n)
                .map(|i| {
                    let p = expit(eta[i]);
                    let v = (p * (1.0 - p)).max(1e-5);
                    (eta[i] + (y[i] - p) / v, w[i] * v / wsum)
                })
                .unzip(),
        };
        let mut r: Vec<f64> = (0..n).map(|i| z[i] - eta[i]).collect();
        let xwx: Vec<f64> = (0..k)
            .map(|j| (0..n).map(|i| ww[i] * cols[j][i] * cols[j][i]).sum())
            .collect();
        let b_start = b.clone();
        let mut converged = false;
        for _ in 0..max_sweeps {
            iterations += 1;
            let mut max_delta: f64 = 0.0;
            for j in 0..k {
                if !active[j] || xwx[j] == 0.0 {
                    continue;
                }
                let col = &cols[j];
                let grad: f64 = (0..n).map(|i| ww[i] * col[i] * r[i]).sum();
                let raw = grad + xwx[j] * b[j];
                let new = if j == 0 {
                    raw / xwx[j]
                } else {
                    soft_threshold(raw, lambda) / xwx[j]
                };
                let delta = new - b[j];
                if delta != 0.0 {
                    for i in 0..n {
                        r[i] -= delta * col[i];
                    }
                    b[j] = new;
                    max_delta = max_delta.max(delta.abs() * xwx[j].sqrt());
                }
            }
            if max_delta < inner_tol {
                converged = true;
                break;
            }
        }
        if !converged {
            return Err(Error::Convergence {
                solver: "lasso coordinate descent",
                iterations,
                criterion: f64::NAN,
                last: b,
            });
        }
        last_change = b
            .iter()
            .zip(&b_start)
            .map(|(a, c)| (a - c).abs())
            .fold(0.0, f64::max);
        if family == Family::Gaussian || (outer > 0 && last_change < 1e-9) {
            break;
        }
        if b.iter().any(|v| v.abs() > SEPARATION_BOUND * 10.0) {
            return Err(Error::Separation("penalized logistic regression"));
        }
    }
    if family == Family::Binomial && last_change >= 1e-9 {
        return Err(Error::Convergence {
            solver: "penalized logistic IRLS",
            iterations,
            criterion: last_change,
            last: b,
        });
    }

    // Back to the original column scale.
    let mut coef = vec![0.0; k];
    coef[0] = b[0];
    for j in 1..k {
        if active[j] {
            coef[j] = b[j] / st.scale[j];
            coef[0] -= coef[j] * st.center[j];
        }
    }
    Ok(GlmFit {
        coef,
        iterations,
        criterion: last_change,
    })
}

/// Prediction on the response scale (probability for binomial).
fn predict(family: Family, coef: &[f64], x: &[f64]) -> f64 {
    let t = dot(coef, x);
    match family {
        Family::Gaussian => t,
        Family::Binomial => expit(t),
    }
}

fn holdout_loss(family: Family, y: f64, yhat: f64) -> f64 {
    match family {
        Family::Gaussian => (y - yhat).powi(2),
        Family::Binomial => {
            let p = yhat.clamp(1e-12, 1.0 - 1e-12);
            -2.0 * (y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        }
    }
}

/// Number of penalties on the cross-validation path.
pub const CV_GRID_SIZE: usize = 30;

/// Selects the lasso penalty by `folds`-fold cross-validation over a
/// log-spaced path from `lambda_max` down to `1e-3 * lambda_max`. Row `i`
/// belongs to fold `i mod folds`. Returns the penalty minimizing mean held-out
/// loss (squared error or binomial deviance).
pub fn cv_lambda(
    design: &Design,
    y: &[f64],
    family: Family,
    folds: usize,
    opts: &NewtonOptions,
) -> Result<f64> {
    let n = design.nrows();
    if folds < 2 || folds > n {
        return Err(Error::Config(format!(
            "cross-validation needs 2 <= folds <= n, got {folds}"
        )));
    }
    let lmax = lambda_max(design, y, None)?;
    if lmax == 0.0 {
        return Ok(0.0);
    }
    let grid: Vec<f64> = (0..CV_GRID_SIZE)
        .map(|g| lmax * 10f64.powf(-3.0 * g as f64 / (CV_GRID_SIZE - 1) as f64))
        .collect();
    let mut loss = vec![0.0; grid.len()];
    for f in 0..folds {
        let train = design.filter(|i| i % folds != f);
        let y_train: Vec<f64> = (0..n).filter(|i| i % folds != f).map(|i| y[i]).collect();
        for (g, &lam) in grid.iter().enumerate() {
            let fit = fit_lasso(&train, &y_train, None, family, lam, opts)?;
            for i in (0..n).filter(|i| i % folds == f) {
                loss[g] += holdout_loss(family, y[i], predict(family, &fit.coef, design.row(i)));
            }
        }
    }
    let (best, _) = loss
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |(bi, bv), (i, &v)| if v < bv { (i, v) } else { (bi, bv) });
    Ok(grid[best])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sim_logistic(n: usize, beta: &[f64], seed: u64) -> (Design, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data = Vec::with_capacity(n * 3);
        let mut y = Vec::with_capacity(n);
        for _ in 0..n {
            let x1: f64 = rng.random_range(-1.0..1.0);
            let x2: f64 = rng.random_range(-1.0..1.0);
            let p = expit(beta[0] + beta[1] * x1 + beta[2] * x2);
            y.push(if rng.random::<f64>() < p { 1.0 } else { 0.0 });
            data.extend_from_slice(&[1.0, x1, x2]);
        }
        (Design::new(n, 3, data).unwrap(), y)
    }

    #[test]
    fn balanced_intercept_only_is_zero() {
        let d = Design::new(4, 1, vec![1.0; 4]).unwrap();
        let fit = fit_logistic(&d, &[0.0, 1.0, 0.0, 1.0], None, None, &NewtonOptions::default()).unwrap();
        assert_eq!(fit.coef, vec![0.0]);
        assert!((expit(fit.coef[0]) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn score_at_mle_below_tolerance() {
        let (d, y) = sim_logistic(3000, &[0.3, -0.5, 1.0], 3);
        let fit = fit_logistic(&d, &y, None, None, &NewtonOptions::default()).unwrap();
        let score: Vec<f64> = (0..d.nrows())
            .map(|i| (y[i] - expit(dot(d.row(i), &fit.coef))) / d.nrows() as f64)
            .collect();
        assert!(weighted_sum(&d, &score).norm() <= 1e-10);
    }

    #[test]
    fn separation_detected() {
        let d = Design::new(6, 2, vec![1.0, -3.0, 1.0, -2.0, 1.0, -1.0, 1.0, 1.0, 1.0, 2.0, 1.0, 3.0]).unwrap();
        let y = [0.0, 0.0, 0.0, 1.0, 1.0, 1.0];
        let r = fit_logistic(&d, &y, None, None, &NewtonOptions::default());
        assert!(matches!(r, Err(Error::Separation(_))), "{r:?}");
    }

    #[test]
    fn max_iter_reports_last_iterate() {
        let (d, y) = sim_logistic(500, &[0.3, -0.5, 1.0], 4);
        let opts = NewtonOptions { tol: 1e-10, max_iter: 1 };
        match fit_logistic(&d, &y, None, None, &opts) {
            Err(Error::Convergence { last, iterations, .. }) => {
                assert_eq!(iterations, 1);
                assert_eq!(last.len(), 3);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn lasso_saturates_at_lambda_max() {
        let (d, y) = sim_logistic(800, &[0.0, 1.0, -1.0], 5);
        let lmax = lambda_max(&d, &y, None).unwrap();
        let opts = NewtonOptions::default();
        let fit = fit_logistic(&d, &y, None, Some(lmax * 1.0001), &opts).unwrap();
        assert_eq!(fit.coef[1], 0.0);
        assert_eq!(fit.coef[2], 0.0);
        let ybar = y.iter().sum::<f64>() / y.len() as f64;
        assert!((expit(fit.coef[0]) - ybar).abs() < 1e-8);
        let fit = fit_logistic(&d, &y, None, Some(lmax * 0.5), &opts).unwrap();
        assert!(fit.coef[1] != 0.0 || fit.coef[2] != 0.0);
    }

    #[test]
    fn lasso_at_zero_penalty_matches_mle() {
        let (d, y) = sim_logistic(800, &[0.2, 1.0, -1.0], 6);
        let opts = NewtonOptions::default();
        let mle = fit_logistic(&d, &y, None, None, &opts).unwrap();
        let las = fit_logistic(&d, &y, None, Some(0.0), &opts).unwrap();
        for (a, b) in mle.coef.iter().zip(&las.coef) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn gaussian_lasso_zero_penalty_is_ols() {
        let (d, _) = sim_logistic(200, &[0.0, 0.0, 0.0], 7);
        let y: Vec<f64> = (0..200).map(|i| 1.0 + 2.0 * d.row(i)[1] - d.row(i)[2] + (i as f64 * 0.37).sin()).collect();
        let ols = fit_ols(&d, &y, None).unwrap();
        let las = fit_lasso(&d, &y, None, Family::Gaussian, 0.0, &NewtonOptions::default()).unwrap();
        for (a, b) in ols.iter().zip(&las.coef) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn ols_exact_fit_and_projection() {
        let (d, _) = sim_logistic(50, &[0.0, 0.0, 0.0], 8);
        let y: Vec<f64> = (0..50).map(|i| 0.5 - d.row(i)[1] + 3.0 * d.row(i)[2]).collect();
        let b = fit_ols(&d, &y, None).unwrap();
        assert!((b[0] - 0.5).abs() < 1e-12 && (b[1] + 1.0).abs() < 1e-12 && (b[2] - 3.0).abs() < 1e-12);
        let one = Design::new(3, 1, vec![1.0; 3]).unwrap();
        let b = fit_ols(&one, &[1.0, 2.0, 6.0], None).unwrap();
        assert!((b[0] - 3.0).abs() < 1e-14);
    }

    #[test]
    fn ols_rank_deficient() {
        let d = Design::new(3, 2, vec![1.0, 1.0, 1.0, 1.0, 1.0, 1.0]).unwrap();
        assert!(matches!(fit_ols(&d, &[1.0, 2.0, 3.0], None), Err(Error::Singular(_))));
    }

    #[test]
    fn cv_picks_a_grid_value() {
        let (d, y) = sim_logistic(400, &[0.0, 1.5, 0.0], 9);
        let lam = cv_lambda(&d, &y, Family::Binomial, 5, &NewtonOptions::default()).unwrap();
        let lmax = lambda_max(&d, &y, None).unwrap();
        assert!(lam <= lmax && lam >= lmax * 1e-3 * 0.999);
    }
}
