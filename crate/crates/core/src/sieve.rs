//! Sieve calibration estimator.
//!
//! Weights are obtained from two globally concave programs over a polynomial
//! basis `v(x)`:
//!
//! * `H2(beta, gamma) = P_n{Z1 m1(beta'v) - beta'v} + P_n{(1-Z1) m1(gamma'v) - gamma'v}`
//!   with `m1(t) = t - exp(-t)`, giving `psi = Z1 m1'(beta'v) + (1-Z1) m1'(gamma'v)`,
//!   a calibrated version of `1/pi(Z1, x)`;
//! * `H1(alpha) = P_n{m2(alpha'v) - s D1 I psi alpha'v}` with
//!   `m2(t) = -log(e^t + e^-t)`, giving `phi = m2'(alpha'v) = -tanh(alpha'v)`,
//!   a calibrated version of `delta(x)`.
//!
//! The estimate is `P_n{ s I Y1 psi / phi }`. H2 is solved first because H1
//! depends on `psi`.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::data::DyadDataset;
use crate::error::{Error, Result};
use crate::linalg::{dot, solve_spd, weighted_gram, weighted_sum, Design};
use crate::nuisance::Canonical;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BasisKind {
    Polynomial,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BasisSpec {
    pub kind: BasisKind,
    /// Maximum total degree of the monomials.
    pub degree: usize,
    /// Center and scale each covariate before expansion.
    pub standardize: bool,
}

impl Default for BasisSpec {
    fn default() -> Self {
        BasisSpec {
            kind: BasisKind::Polynomial,
            degree: 2,
            standardize: true,
        }
    }
}

impl BasisSpec {
    pub fn intercept_only() -> Self {
        BasisSpec {
            degree: 0,
            ..BasisSpec::default()
        }
    }

    pub fn with_degree(degree: usize) -> Self {
        BasisSpec {
            degree,
            ..BasisSpec::default()
        }
    }

    /// Number of monomials of total degree `<= degree` in `p` variables.
    pub fn size(&self, p: usize) -> usize {
        // C(p + degree, degree)
        (1..=self.degree).fold(1usize, |acc, j| acc * (p + j) / j)
    }
}

/// Evaluable basis with frozen standardization constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Basis {
    pub spec: BasisSpec,
    /// Exponent vectors in graded lexicographic order; the first is all zeros.
    pub exponents: Vec<Vec<u32>>,
    pub center: Vec<f64>,
    pub scale: Vec<f64>,
    pub warnings: Vec<String>,
}

fn monomials(p: usize, degree: usize) -> Vec<Vec<u32>> {
    fn rec(p: usize, left: u32, prefix: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
        if prefix.len() == p - 1 {
            prefix.push(left);
            out.push(prefix.clone());
            prefix.pop();
            return;
        }
        for e in (0..=left).rev() {
            prefix.push(e);
            rec(p, left - e, prefix, out);
            prefix.pop();
        }
    }
    let mut out = vec![vec![0; p]];
    if p == 0 {
        return out;
    }
    for t in 1..=degree as u32 {
        rec(p, t, &mut Vec::with_capacity(p), &mut out);
    }
    out
}

/// Builds the basis for `ds`. Fails when the basis size reaches `n/4`.
pub fn build_basis(ds: &DyadDataset, spec: &BasisSpec) -> Result<Basis> {
    let p = ds.covariate_dim();
    let n = ds.n();
    let k = spec.size(p);
    if 4 * k >= n {
        return Err(Error::Config(format!(
            "sieve basis has K = {k} terms for n = {n}; need K < n/4 (lower the degree)"
        )));
    }
    let mut center = vec![0.0; p];
    let mut scale = vec![1.0; p];
    let mut warnings = Vec::new();
    for j in 0..p {
        let col: Vec<f64> = (0..n).map(|i| ds.x_row(i)[j]).collect();
        if spec.standardize {
            let m = col.iter().sum::<f64>() / n as f64;
            let sd = (col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n as f64).sqrt();
            center[j] = m;
            scale[j] = if sd > 0.0 { sd } else { 1.0 };
        } else if col.iter().any(|v| v.abs() > 10.0) {
            warnings.push(format!(
                "covariate x{} leaves [-10, 10] and standardization is off",
                j + 1
            ));
        }
    }
    Ok(Basis {
        spec: *spec,
        exponents: monomials(p, spec.degree),
        center,
        scale,
        warnings,
    })
}

impl Basis {
    pub fn len(&self) -> usize {
        self.exponents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.exponents.is_empty()
    }

    pub fn eval_into(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        let xs: Vec<f64> = x
            .iter()
            .enumerate()
            .map(|(j, v)| (v - self.center[j]) / self.scale[j])
            .collect();
        for e in &self.exponents {
            out.push(
                e.iter()
                    .zip(&xs)
                    .map(|(&k, &v)| v.powi(k as i32))
                    .product(),
            );
        }
    }

    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        self.eval_into(x, &mut out);
        out
    }

    pub fn design(&self, ds: &DyadDataset) -> Design {
        let k = self.len();
        let mut data = Vec::with_capacity(ds.n() * k);
        let mut row = Vec::with_capacity(k);
        for i in 0..ds.n() {
            self.eval_into(ds.x_row(i), &mut row);
            data.extend_from_slice(&row);
        }
        Design::new(ds.n(), k, data).expect("basis design dimensions")
    }
}

#[inline]
fn m1(t: f64) -> f64 {
    t - (-t).exp()
}

#[inline]
fn m1_dot(t: f64) -> f64 {
    1.0 + (-t).exp()
}

#[inline]
fn m2(t: f64) -> f64 {
    let a = t.abs();
    -(a + (-2.0 * a).exp().ln_1p())
}

#[inline]
fn m2_dot(t: f64) -> f64 {
    -t.tanh()
}

fn column_means(v: &Design) -> Vec<f64> {
    let n = v.nrows() as f64;
    let ones = vec![1.0 / n; v.nrows()];
    weighted_sum(v, &ones).iter().copied().collect()
}

/// One arm of H2: `P_n{ a m1(b'v) - b'v }` where `a` is the arm indicator.
fn h2_arm_objective(v: &Design, arm: &[f64], vbar: &[f64], b: &[f64]) -> f64 {
    let n = v.nrows() as f64;
    let s: f64 = (0..v.nrows())
        .filter(|&i| arm[i] != 0.0)
        .map(|i| arm[i] * m1(dot(v.row(i), b)))
        .sum();
    s / n - dot(b, vbar)
}

fn h2_arm_gradient(v: &Design, arm: &[f64], vbar: &[f64], b: &[f64]) -> Vec<f64> {
    let n = v.nrows() as f64;
    let w: Vec<f64> = (0..v.nrows())
        .map(|i| if arm[i] != 0.0 { arm[i] * m1_dot(dot(v.row(i), b)) / n } else { 0.0 })
        .collect();
    let g = weighted_sum(v, &w);
    g.iter().zip(vbar).map(|(a, m)| a - m).collect()
}

/// Sample `H2(beta, gamma)` on basis matrix `v`.
pub fn h2_objective(v: &Design, z1: &[f64], beta: &[f64], gamma: &[f64]) -> f64 {
    let vbar = column_means(v);
    let z0: Vec<f64> = z1.iter().map(|z| 1.0 - z).collect();
    h2_arm_objective(v, z1, &vbar, beta) + h2_arm_objective(v, &z0, &vbar, gamma)
}

/// Analytic gradient of [`h2_objective`] with respect to `(beta, gamma)`.
pub fn h2_gradient(v: &Design, z1: &[f64], beta: &[f64], gamma: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let vbar = column_means(v);
    let z0: Vec<f64> = z1.iter().map(|z| 1.0 - z).collect();
    (
        h2_arm_gradient(v, z1, &vbar, beta),
        h2_arm_gradient(v, &z0, &vbar, gamma),
    )
}

/// Sample `H1(alpha) = P_n{ m2(alpha'v) - target alpha'v }`, `target = s D1 I psi`.
pub fn h1_objective(v: &Design, target: &[f64], alpha: &[f64]) -> f64 {
    let n = v.nrows() as f64;
    (0..v.nrows())
        .map(|i| {
            let t = dot(v.row(i), alpha);
            m2(t) - target[i] * t
        })
        .sum::<f64>()
        / n
}

pub fn h1_gradient(v: &Design, target: &[f64], alpha: &[f64]) -> Vec<f64> {
    let n = v.nrows() as f64;
    let w: Vec<f64> = (0..v.nrows())
        .map(|i| (m2_dot(dot(v.row(i), alpha)) - target[i]) / n)
        .collect();
    weighted_sum(v, &w).iter().copied().collect()
}

/// Outcome of one concave maximization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AscentTrace {
    pub iterations: usize,
    pub gradient_norm: f64,
    /// Objective value at the start and after every accepted step.
    pub objective: Vec<f64>,
}

/// Gradient sup-norm at which the calibration programs stop.
pub const SIEVE_TOL: f64 = 1e-10;
const SIEVE_MAX_ITER: usize = 200;
const COEF_LIMIT: f64 = 50.0;

fn sup_norm(g: &[f64]) -> f64 {
    g.iter().fold(0.0, |m: f64, x| m.max(x.abs()))
}

/// Newton ascent with Armijo backtracking from zero for a concave objective
/// whose negated Hessian is `sum_i curv_i v_i v_i'`.
fn newton_ascent(
    name: &'static str,
    v: &Design,
    objective: &dyn Fn(&[f64]) -> f64,
    gradient: &dyn Fn(&[f64]) -> Vec<f64>,
    curvature: &dyn Fn(&[f64]) -> Vec<f64>,
) -> Result<(Vec<f64>, AscentTrace)> {
    let k = v.ncols();
    let mut b = vec![0.0; k];
    let mut f = objective(&b);
    let mut trace = vec![f];
    let mut gnorm = f64::INFINITY;
    for iter in 0..=SIEVE_MAX_ITER {
        let g = gradient(&b);
        gnorm = sup_norm(&g);
        if gnorm <= SIEVE_TOL {
            // One undamped polishing step, kept only if it does not lose ground.
            if gnorm > 0.0 {
                let h = weighted_gram(v, &curvature(&b));
                if let Ok(dir) = solve_spd(h, &DVector::from_vec(g), name) {
                    let cand: Vec<f64> = b.iter().zip(dir.iter()).map(|(x, d)| x + d).collect();
                    let g2 = sup_norm(&gradient(&cand));
                    if g2 <= gnorm {
                        b = cand;
                        gnorm = g2;
                        f = objective(&b);
                        trace.push(f);
                    }
                }
            }
            return Ok((
                b,
                AscentTrace {
                    iterations: iter,
                    gradient_norm: gnorm,
                    objective: trace,
                },
            ));
        }
        if iter == SIEVE_MAX_ITER {
            break;
        }
        let h = weighted_gram(v, &curvature(&b));
        let gv = DVector::from_vec(g);
        let dir = solve_spd(h, &gv, name).map_err(|e| match e {
            Error::Singular(m) => Error::Singular(format!("{m}; use a smaller sieve basis")),
            other => other,
        })?;
        let slope = gv.dot(&dir);
        // Predicted gain below the rounding of f: line search cannot resolve it.
        if slope <= 1e-12 * (1.0 + f.abs()) {
            b.iter_mut().zip(dir.iter()).for_each(|(x, d)| *x += d);
            f = objective(&b);
            trace.push(f);
            continue;
        }
        let mut t = 1.0;
        loop {
            let cand: Vec<f64> = b.iter().zip(dir.iter()).map(|(x, d)| x + t * d).collect();
            let fc = objective(&cand);
            if fc.is_finite() && fc >= f + 1e-4 * t * slope {
                b = cand;
                f = fc;
                break;
            }
            if t < 1e-12 {
                return Err(Error::Convergence {
                    solver: name,
                    iterations: iter,
                    criterion: gnorm,
                    last: b,
                });
            }
            t *= 0.5;
        }
        trace.push(f);
        if b.iter().any(|x| x.abs() > COEF_LIMIT) {
            return Err(Error::Convergence {
                solver: name,
                iterations: iter + 1,
                criterion: gnorm,
                last: b,
            });
        }
    }
    Err(Error::Convergence {
        solver: name,
        iterations: SIEVE_MAX_ITER,
        criterion: gnorm,
        last: b,
    })
}

fn solve_h2_arm(v: &Design, arm: &[f64], name: &'static str) -> Result<(Vec<f64>, AscentTrace)> {
    let vbar = column_means(v);
    let n = v.nrows() as f64;
    let obj = |b: &[f64]| h2_arm_objective(v, arm, &vbar, b);
    let grad = |b: &[f64]| h2_arm_gradient(v, arm, &vbar, b);
    let curv = |b: &[f64]| -> Vec<f64> {
        (0..v.nrows())
            .map(|i| if arm[i] != 0.0 { arm[i] * (-dot(v.row(i), b)).exp() / n } else { 0.0 })
            .collect()
    };
    newton_ascent(name, v, &obj, &grad, &curv)
}

/// Maximizes sample H2. The two arms are independent problems.
pub fn solve_h2(v: &Design, z1: &[f64]) -> Result<(Vec<f64>, Vec<f64>, AscentTrace, AscentTrace)> {
    if !z1.contains(&1.0) || !z1.contains(&0.0) {
        return Err(Error::Precondition(
            "sieve calibration needs both instrument arms".into(),
        ));
    }
    let z0: Vec<f64> = z1.iter().map(|z| 1.0 - z).collect();
    let (beta, tb) = solve_h2_arm(v, z1, "sieve H2 (z1 = 1 arm)")?;
    let (gamma, tg) = solve_h2_arm(v, &z0, "sieve H2 (z1 = 0 arm)")?;
    Ok((beta, gamma, tb, tg))
}

/// Maximizes sample H1 for the given `target = s D1 I psi`.
pub fn solve_h1(v: &Design, target: &[f64]) -> Result<(Vec<f64>, AscentTrace)> {
    let n = v.nrows() as f64;
    let obj = |a: &[f64]| h1_objective(v, target, a);
    let grad = |a: &[f64]| h1_gradient(v, target, a);
    let curv = |a: &[f64]| -> Vec<f64> {
        (0..v.nrows())
            .map(|i| {
                let th = dot(v.row(i), a).tanh();
                (1.0 - th * th) / n
            })
            .collect()
    };
    newton_ascent("sieve H1", v, &obj, &grad, &curv)
}

/// Sup-norms of the three calibration identities at the solution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResiduals {
    /// `|P_n{Z1 psi v} - P_n{v}|_inf`.
    pub treated_arm: f64,
    /// `|P_n{(1-Z1) psi v} - P_n{v}|_inf`.
    pub control_arm: f64,
    /// `|P_n{phi v} - P_n{s D1 I psi v}|_inf`.
    pub phi: f64,
}

impl CalibrationResiduals {
    pub fn max(&self) -> f64 {
        self.treated_arm.max(self.control_arm).max(self.phi)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SieveFit {
    pub basis: Basis,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub gamma: Vec<f64>,
    pub residuals: CalibrationResiduals,
    pub traces: [AscentTrace; 3],
}

impl SieveFit {
    /// Calibrated inverse instrument propensity, always `> 1`.
    pub fn psi(&self, z1: u8, x: &[f64]) -> f64 {
        let v = self.basis.eval(x);
        let coef = if z1 == 1 { &self.beta } else { &self.gamma };
        m1_dot(dot(&v, coef))
    }

    /// Calibrated instrument strength, in `(-1, 1)`.
    pub fn phi(&self, x: &[f64]) -> f64 {
        m2_dot(dot(&self.basis.eval(x), &self.alpha))
    }
}

/// Calibrates `psi` and `phi` on a canonical dataset at level `level`.
pub fn fit_sieve(ds: &DyadDataset, level: u8, spec: &BasisSpec) -> Result<SieveFit> {
    ds.check_overlap()?;
    let basis = build_basis(ds, spec)?;
    let v = basis.design(ds);
    let can = Canonical::new(ds, level);
    fit_sieve_on(basis, &v, &can)
}

fn arm_residual(v: &Design, weights: &[f64], vbar: &[f64]) -> f64 {
    weighted_sum(v, weights)
        .iter()
        .zip(vbar)
        .fold(0.0, |m: f64, (a, b)| m.max((a - b).abs()))
}

fn fit_sieve_on(basis: Basis, v: &Design, can: &Canonical) -> Result<SieveFit> {
    let n = v.nrows();
    let nf = n as f64;
    let (beta, gamma, tb, tg) = solve_h2(v, &can.z1)?;
    let psi: Vec<f64> = (0..n)
        .map(|i| {
            let coef = if can.z1[i] == 1.0 { &beta } else { &gamma };
            m1_dot(dot(v.row(i), coef))
        })
        .collect();
    let target: Vec<f64> = (0..n).map(|i| can.s[i] * can.d1i[i] * psi[i]).collect();
    let (alpha, ta) = solve_h1(v, &target)?;

    let vbar = column_means(v);
    let treated: Vec<f64> = (0..n).map(|i| can.z1[i] * psi[i] / nf).collect();
    let control: Vec<f64> = (0..n).map(|i| (1.0 - can.z1[i]) * psi[i] / nf).collect();
    let phi_gap: Vec<f64> = (0..n)
        .map(|i| (m2_dot(dot(v.row(i), &alpha)) - target[i]) / nf)
        .collect();
    let residuals = CalibrationResiduals {
        treated_arm: arm_residual(v, &treated, &vbar),
        control_arm: arm_residual(v, &control, &vbar),
        phi: arm_residual(v, &phi_gap, &vec![0.0; v.ncols()]),
    };
    Ok(SieveFit {
        basis,
        alpha,
        beta,
        gamma,
        residuals,
        traces: [tb, tg, ta],
    })
}

/// Diagnostics attached to a sieve estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SieveDiagnostics {
    pub basis_size: usize,
    pub degree: usize,
    pub residuals: CalibrationResiduals,
    pub iterations: [usize; 3],
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SieveEstimate {
    pub point: f64,
    pub min_abs_phi: f64,
    pub fit: SieveFit,
    pub diagnostics: SieveDiagnostics,
}

/// Floor on `min |phi(x_i)|` below which the ratio is not formed.
pub const PHI_FLOOR: f64 = 1e-3;

/// `P_n{ s I Y1 psi / phi }` on a canonical dataset.
pub fn estimate_sieve_canonical(ds: &DyadDataset, level: u8, spec: &BasisSpec) -> Result<SieveEstimate> {
    ds.check_overlap()?;
    let basis = build_basis(ds, spec)?;
    let v = basis.design(ds);
    let can = Canonical::new(ds, level);
    let fit = fit_sieve_on(basis, &v, &can)?;
    let n = ds.n();
    let mut min_abs_phi = f64::INFINITY;
    let mut total = 0.0;
    for i in 0..n {
        let coef = if can.z1[i] == 1.0 { &fit.beta } else { &fit.gamma };
        let psi = m1_dot(dot(v.row(i), coef));
        let phi = m2_dot(dot(v.row(i), &fit.alpha));
        min_abs_phi = min_abs_phi.min(phi.abs());
        total += can.s[i] * can.yi[i] * psi / phi;
    }
    if !(min_abs_phi >= PHI_FLOOR) {
        return Err(Error::WeakInstrument(format!(
            "calibrated instrument strength reaches |phi| = {min_abs_phi:.2e} (floor {PHI_FLOOR})"
        )));
    }
    let diagnostics = SieveDiagnostics {
        basis_size: fit.basis.len(),
        degree: fit.basis.spec.degree,
        residuals: fit.residuals,
        iterations: [
            fit.traces[0].iterations,
            fit.traces[1].iterations,
            fit.traces[2].iterations,
        ],
        warnings: fit.basis.warnings.clone(),
    };
    Ok(SieveEstimate {
        point: total / n as f64,
        min_abs_phi,
        fit,
        diagnostics,
    })
}
