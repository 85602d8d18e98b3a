//! The five nuisance functions `(pi, mu, eta, delta, omega)` of a canonical
//! direct-effect problem: effect of `d1` on `y1` with `d2` held at level `d`.
//!
//! Writing `I = 1{d2 = d}` and `s = (-1)^(1 - z1)`:
//!
//! * `pi(z1, x) = P(Z1 = z1 | x)`
//! * `mu(x)     = E[D1 I | Z1 = 0, x]`
//! * `eta(x)    = E[Y1 I | Z1 = 0, x]`
//! * `delta(x)  = E[D1 I | Z1 = 1, x] - E[D1 I | Z1 = 0, x]`
//! * `omega(x)  = E[Y1(1, d) - Y1(0, d) | x]`
//!
//! The parametric learner fits them in order: logistic `pi`, logistic `mu`
//! and least-squares `eta` on the `z1 = 0` arm, then `delta = tanh(xi4' x~)`
//! and the linear `omega = xi5' x~` from their weighted estimating equations.

pub mod glm;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{DyadDataset, EstimandSpec, Target};
use crate::error::{Error, Result};
use crate::linalg::{dot, index_value, solve_general, weighted_gram, weighted_sum, Design, IndexBasis};
pub use glm::{cv_lambda, expit, fit_lasso, fit_logistic, fit_ols, lambda_max, Family, GlmFit, NewtonOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Learner {
    Parametric,
    /// L1-penalized `pi`, `mu`, `eta`; `delta` and `omega` as in the parametric learner.
    Lasso,
    /// Per-row values supplied from outside; see [`NuisanceSet::load_precomputed`].
    Precomputed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LassoLambda {
    Fixed(f64),
    /// Cross-validated with this many folds.
    Cv(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NuisanceConfig {
    pub learner: Learner,
    pub trim_eps: f64,
    pub newton_tol: f64,
    pub newton_max_iter: usize,
    pub lasso_lambda: LassoLambda,
    /// Regressors of every index function, and the instrument functions of the
    /// `delta` and `omega` estimating equations.
    pub basis: IndexBasis,
}

impl Default for NuisanceConfig {
    fn default() -> Self {
        NuisanceConfig {
            learner: Learner::Parametric,
            trim_eps: 0.01,
            newton_tol: 1e-10,
            newton_max_iter: 100,
            lasso_lambda: LassoLambda::Cv(5),
            basis: IndexBasis::InterceptPlusX,
        }
    }
}

impl NuisanceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.trim_eps > 0.0 && self.trim_eps < 0.5) {
            return Err(Error::Config(format!(
                "trim_eps must lie in (0, 0.5), got {}",
                self.trim_eps
            )));
        }
        if !(self.newton_tol > 0.0) {
            return Err(Error::Config("newton_tol must be positive".into()));
        }
        if self.newton_max_iter == 0 {
            return Err(Error::Config("newton_max_iter must be at least 1".into()));
        }
        match self.lasso_lambda {
            LassoLambda::Fixed(l) if !(l >= 0.0) || !l.is_finite() => {
                Err(Error::Config(format!("lasso lambda must be >= 0, got {l}")))
            }
            LassoLambda::Cv(k) if k < 2 => Err(Error::Config("lasso CV needs >= 2 folds".into())),
            _ => Ok(()),
        }
    }

    fn newton(&self) -> NewtonOptions {
        NewtonOptions {
            tol: self.newton_tol,
            max_iter: self.newton_max_iter,
        }
    }
}

/// A fitted nuisance function.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "form", content = "coef")]
pub enum NuisanceFn {
    /// `expit(coef' x~)`.
    Logistic(Vec<f64>),
    /// `coef' x~`.
    Linear(Vec<f64>),
    /// `tanh(coef' x~)`.
    Tanh(Vec<f64>),
    /// Values attached to the rows of one particular dataset.
    PerRow(Vec<f64>),
}

impl NuisanceFn {
    /// Value at covariate vector `x`. Coefficients act on the leading entries of `(1, x)`.
    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        Ok(match self {
            NuisanceFn::Logistic(c) => expit(index_value(c, x)),
            NuisanceFn::Linear(c) => index_value(c, x),
            NuisanceFn::Tanh(c) => index_value(c, x).tanh(),
            NuisanceFn::PerRow(_) => {
                return Err(Error::Precondition(
                    "per-row nuisance values cannot be evaluated at new covariates".into(),
                ))
            }
        })
    }

    pub fn values(&self, ds: &DyadDataset) -> Result<Vec<f64>> {
        match self {
            NuisanceFn::PerRow(v) if v.len() != ds.n() => Err(Error::Schema(format!(
                "{} precomputed nuisance values for {} rows",
                v.len(),
                ds.n()
            ))),
            NuisanceFn::PerRow(v) => Ok(v.clone()),
            f => (0..ds.n()).map(|i| f.predict(ds.x_row(i))).collect(),
        }
    }

    pub fn coef(&self) -> Option<&[f64]> {
        match self {
            NuisanceFn::Logistic(c) | NuisanceFn::Linear(c) | NuisanceFn::Tanh(c) => Some(c),
            NuisanceFn::PerRow(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMeta {
    pub step: String,
    pub iterations: usize,
    /// Final score / moment norm (0 for closed-form steps).
    pub criterion: f64,
    pub converged: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NuisanceMeta {
    pub learner: Learner,
    pub steps: Vec<StepMeta>,
}

impl NuisanceMeta {
    pub fn all_converged(&self) -> bool {
        self.steps.iter().all(|s| s.converged)
    }
}

/// Fitted `theta = (pi, mu, eta, delta, omega)` for one canonical problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NuisanceSet {
    /// `P(Z1 = 1 | x)` before trimming.
    pub pi1: NuisanceFn,
    pub mu: NuisanceFn,
    pub eta: NuisanceFn,
    pub delta: NuisanceFn,
    pub omega: NuisanceFn,
    pub trim_eps: f64,
    pub meta: NuisanceMeta,
}

/// Per-row nuisance values on a canonical dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct NuisanceValues {
    /// Trimmed `P(Z1 = 1 | x_i)`.
    pub pi1: Vec<f64>,
    /// Trimmed `P(Z1 = z1_i | x_i)`.
    pub pi_z: Vec<f64>,
    pub mu: Vec<f64>,
    pub eta: Vec<f64>,
    pub delta: Vec<f64>,
    pub omega: Vec<f64>,
    /// Rows whose `pi1` was clipped.
    pub n_trimmed: usize,
}

impl NuisanceSet {
    /// `pi(z1, x)` after trimming to `[eps, 1 - eps]`.
    pub fn pi(&self, z1: u8, x: &[f64]) -> Result<f64> {
        let p1 = self.pi1.predict(x)?.clamp(self.trim_eps, 1.0 - self.trim_eps);
        Ok(if z1 == 1 { p1 } else { 1.0 - p1 })
    }

    pub fn values(&self, ds: &DyadDataset) -> Result<NuisanceValues> {
        let raw = self.pi1.values(ds)?;
        let eps = self.trim_eps;
        let n_trimmed = raw.iter().filter(|&&p| p < eps || p > 1.0 - eps).count();
        let pi1: Vec<f64> = raw.iter().map(|p| p.clamp(eps, 1.0 - eps)).collect();
        let pi_z = pi1
            .iter()
            .zip(ds.z1())
            .map(|(&p, &z)| if z == 1 { p } else { 1.0 - p })
            .collect();
        Ok(NuisanceValues {
            pi1,
            pi_z,
            mu: self.mu.values(ds)?,
            eta: self.eta.values(ds)?,
            delta: self.delta.values(ds)?,
            omega: self.omega.values(ds)?,
            n_trimmed,
        })
    }

    /// Wraps externally computed per-row values (in dataset row order).
    pub fn from_values(
        pi1: Vec<f64>,
        mu: Vec<f64>,
        eta: Vec<f64>,
        delta: Vec<f64>,
        omega: Vec<f64>,
        trim_eps: f64,
    ) -> Result<Self> {
        let n = pi1.len();
        for (name, v) in [("mu", &mu), ("eta", &eta), ("delta", &delta), ("omega", &omega)] {
            if v.len() != n {
                return Err(Error::Schema(format!("{name} has {} values, pi1 has {n}", v.len())));
            }
        }
        if pi1.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Schema("pi1 values must lie in [0, 1]".into()));
        }
        if [&pi1, &mu, &eta, &delta, &omega]
            .iter()
            .any(|v| v.iter().any(|x| !x.is_finite()))
        {
            return Err(Error::Schema("precomputed nuisances must be finite".into()));
        }
        Ok(NuisanceSet {
            pi1: NuisanceFn::PerRow(pi1),
            mu: NuisanceFn::PerRow(mu),
            eta: NuisanceFn::PerRow(eta),
            delta: NuisanceFn::PerRow(delta),
            omega: NuisanceFn::PerRow(omega),
            trim_eps,
            meta: NuisanceMeta {
                learner: Learner::Precomputed,
                steps: Vec::new(),
            },
        })
    }

    /// Reads a CSV with columns `pi1,mu,eta,delta,omega`, one line per dataset row.
    pub fn load_precomputed(path: impl AsRef<Path>, n: usize, trim_eps: f64) -> Result<Self> {
        #[derive(Deserialize)]
        struct Rec {
            pi1: f64,
            mu: f64,
            eta: f64,
            delta: f64,
            omega: f64,
        }
        let mut rdr = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_path(path)?;
        let mut cols: [Vec<f64>; 5] = Default::default();
        for (line, rec) in rdr.deserialize::<Rec>().enumerate() {
            let r = rec.map_err(|e| Error::Parse {
                line: line as u64 + 2,
                msg: e.to_string(),
            })?;
            for (c, v) in cols.iter_mut().zip([r.pi1, r.mu, r.eta, r.delta, r.omega]) {
                c.push(v);
            }
        }
        if cols[0].len() != n {
            return Err(Error::Schema(format!(
                "precomputed nuisance file has {} rows, dataset has {n}",
                cols[0].len()
            )));
        }
        let [pi1, mu, eta, delta, omega] = cols;
        Self::from_values(pi1, mu, eta, delta, omega, trim_eps)
    }
}

/// Per-row ingredients of the canonical moment functions at level `d`.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Canonical {
    /// `(-1)^(1 - z1)`.
    pub s: Vec<f64>,
    pub z1: Vec<f64>,
    /// `1{d2 = d}`.
    pub ind: Vec<f64>,
    /// `d1 * 1{d2 = d}`.
    pub d1i: Vec<f64>,
    /// `y1 * 1{d2 = d}`.
    pub yi: Vec<f64>,
}

impl Canonical {
    pub fn new(ds: &DyadDataset, level: u8) -> Self {
        let n = ds.n();
        let mut c = Canonical {
            s: Vec::with_capacity(n),
            z1: Vec::with_capacity(n),
            ind: Vec::with_capacity(n),
            d1i: Vec::with_capacity(n),
            yi: Vec::with_capacity(n),
        };
        for i in 0..n {
            let ind = if ds.d2()[i] == level { 1.0 } else { 0.0 };
            c.s.push(if ds.z1()[i] == 1 { 1.0 } else { -1.0 });
            c.z1.push(f64::from(ds.z1()[i]));
            c.ind.push(ind);
            c.d1i.push(f64::from(ds.d1()[i]) * ind);
            c.yi.push(ds.y1()[i] * ind);
        }
        c
    }
}

/// Result of a linear-index estimating equation solve.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct IndexSolve {
    pub coef: Vec<f64>,
    /// `|P_n{c x~ (r - q xi' x~)}|_2` at the solution.
    pub residual: f64,
    /// Scale the residual is compared against.
    pub scale: f64,
}

/// Solves `P_n{ c_i x~_i (r_i - q_i xi' x~_i) } = 0` for `xi`.
///
/// The equation is linear: `[P_n c q x~ x~'] xi = P_n c r x~`. One round of
/// iterative refinement is applied, and the final residual must be within
/// `1e-8` of the problem scale.
pub(crate) fn solve_linear_index(
    design: &Design,
    c: &[f64],
    r: &[f64],
    q: &[f64],
    what: &str,
) -> Result<IndexSolve> {
    let n = design.nrows() as f64;
    let cq: Vec<f64> = c.iter().zip(q).map(|(a, b)| a * b / n).collect();
    let cr: Vec<f64> = c.iter().zip(r).map(|(a, b)| a * b / n).collect();
    let a = weighted_gram(design, &cq);
    let b = weighted_sum(design, &cr);
    let mut xi = solve_general(a.clone(), &b, what)?;
    let resid = &a * &xi - &b;
    if let Ok(corr) = solve_general(a.clone(), &resid, what) {
        xi -= corr;
    }
    let resid = (&a * &xi - &b).norm();
    let scale = 1.0_f64.max(b.amax()).max(a.amax() * xi.amax());
    if !(resid <= 1e-8 * scale) {
        return Err(Error::Singular(format!(
            "{what}: residual {resid:.3e} exceeds tolerance at scale {scale:.3e}"
        )));
    }
    Ok(IndexSolve {
        coef: xi.iter().copied().collect(),
        residual: resid,
        scale,
    })
}

/// `log cosh t` without overflow.
#[inline]
fn log_cosh(t: f64) -> f64 {
    let a = t.abs();
    a + (-2.0 * a).exp().ln_1p() - std::f64::consts::LN_2
}

/// Coefficient bound beyond which the tanh index is declared divergent.
const DELTA_DIVERGENCE: f64 = 20.0;

/// `delta(x) = tanh(xi4' x~)` from its weighted estimating equation.
///
/// Solves `P_n{ x~ (s / pi_z) (D1 I - delta(x) Z1 - mu) } = 0`, which is the
/// gradient of the concave `Q(xi) = P_n{ (s/pi_z) [ (D1 I - mu) t - Z1 log cosh t ] }`
/// with `t = xi' x~`, by Newton steps with Armijo backtracking on `Q`.
/// `ds` must be in canonical form; only `spec.level` is read.
pub fn fit_delta(
    ds: &DyadDataset,
    spec: &EstimandSpec,
    pi_z: &[f64],
    mu: &[f64],
    cfg: &NuisanceConfig,
) -> Result<(NuisanceFn, StepMeta)> {
    let design = Design::index(ds, cfg.basis);
    let can = Canonical::new(ds, spec.level);
    fit_delta_on(&design, &can, pi_z, mu, cfg)
}

pub(crate) fn fit_delta_on(
    design: &Design,
    can: &Canonical,
    pi_z: &[f64],
    mu: &[f64],
    cfg: &NuisanceConfig,
) -> Result<(NuisanceFn, StepMeta)> {
    let n = design.nrows();
    let nf = n as f64;
    let k = design.ncols();
    let w: Vec<f64> = (0..n).map(|i| can.s[i] / pi_z[i]).collect();
    let a: Vec<f64> = (0..n).map(|i| can.d1i[i] - mu[i]).collect();
    // Only z1 = 1 rows carry the tanh term; their weight is positive.
    let wz: Vec<f64> = (0..n).map(|i| w[i] * can.z1[i]).collect();

    let objective = |xi: &[f64]| -> f64 {
        (0..n)
            .map(|i| {
                let t = dot(design.row(i), xi);
                w[i] * a[i] * t - wz[i] * log_cosh(t)
            })
            .sum::<f64>()
            / nf
    };
    let moment = |xi: &[f64], curv: &mut Vec<f64>| -> nalgebra::DVector<f64> {
        let mut m = vec![0.0; n];
        for i in 0..n {
            let th = dot(design.row(i), xi).tanh();
            m[i] = (w[i] * a[i] - wz[i] * th) / nf;
            curv[i] = wz[i] * (1.0 - th * th) / nf;
        }
        weighted_sum(design, &m)
    };

    let mut xi = vec![0.0; k];
    let mut q = objective(&xi);
    let mut curv = vec![0.0; n];
    let mut crit = f64::INFINITY;
    for iter in 0..=cfg.newton_max_iter {
        let g = moment(&xi, &mut curv);
        crit = g.norm();
        if crit <= cfg.newton_tol {
            // One undamped polishing step, kept only if it does not lose ground.
            if crit > 0.0 {
                if let Ok(dir) = solve_general(weighted_gram(design, &curv), &g, "delta moment Jacobian") {
                    let cand: Vec<f64> = xi.iter().zip(dir.iter()).map(|(x, d)| x + d).collect();
                    let c2 = moment(&cand, &mut curv).norm();
                    if c2 <= crit {
                        xi = cand;
                        crit = c2;
                    }
                }
            }
            return Ok((
                NuisanceFn::Tanh(xi),
                StepMeta {
                    step: "delta".into(),
                    iterations: iter,
                    criterion: crit,
                    converged: true,
                    lambda: None,
                },
            ));
        }
        if iter == cfg.newton_max_iter {
            break;
        }
        let h = weighted_gram(design, &curv);
        let dir = solve_general(h, &g, "delta moment Jacobian").map_err(|e| match e {
            Error::Singular(m) => Error::Singular(format!("{m}; try a weaker delta basis")),
            other => other,
        })?;
        let slope = g.dot(&dir);
        let mut t = 1.0;
        loop {
            let cand: Vec<f64> = xi.iter().zip(dir.iter()).map(|(x, d)| x + t * d).collect();
            let q_new = objective(&cand);
            if q_new >= q + 1e-4 * t * slope - 1e-14 * (1.0 + q.abs()) || t < 1e-10 {
                xi = cand;
                q = q_new;
                break;
            }
            t *= 0.5;
        }
        if xi.iter().any(|v| v.abs() > DELTA_DIVERGENCE) {
            return Err(Error::Convergence {
                solver: "delta damped Newton (diverging)",
                iterations: iter + 1,
                criterion: crit,
                last: xi,
            });
        }
    }
    Err(Error::Convergence {
        solver: "delta damped Newton",
        iterations: cfg.newton_max_iter,
        criterion: crit,
        last: xi,
    })
}

/// `omega(x) = xi5' x~` from its weighted estimating equation
/// `P_n{ x~ (s/pi_z) (Y1 I - omega D1 I - eta + mu omega) } = 0`, a linear system.
pub fn fit_omega(
    ds: &DyadDataset,
    spec: &EstimandSpec,
    pi_z: &[f64],
    mu: &[f64],
    eta: &[f64],
    cfg: &NuisanceConfig,
) -> Result<(NuisanceFn, StepMeta)> {
    let design = Design::index(ds, cfg.basis);
    let can = Canonical::new(ds, spec.level);
    fit_omega_on(&design, &can, pi_z, mu, eta)
}

pub(crate) fn fit_omega_on(
    design: &Design,
    can: &Canonical,
    pi_z: &[f64],
    mu: &[f64],
    eta: &[f64],
) -> Result<(NuisanceFn, StepMeta)> {
    let n = design.nrows();
    let c: Vec<f64> = (0..n).map(|i| can.s[i] / pi_z[i]).collect();
    let r: Vec<f64> = (0..n).map(|i| can.yi[i] - eta[i]).collect();
    let q: Vec<f64> = (0..n).map(|i| can.d1i[i] - mu[i]).collect();
    let sol = solve_linear_index(design, &c, &r, &q, "omega estimating equation")?;
    Ok((
        NuisanceFn::Linear(sol.coef),
        StepMeta {
            step: "omega".into(),
            iterations: 1,
            criterion: sol.residual,
            converged: true,
            lambda: None,
        },
    ))
}

fn penalty_for(
    cfg: &NuisanceConfig,
    design: &Design,
    y: &[f64],
    family: Family,
) -> Result<Option<f64>> {
    match (cfg.learner, cfg.lasso_lambda) {
        (Learner::Lasso, _) if design.ncols() == 1 => Ok(Some(0.0)),
        (Learner::Lasso, LassoLambda::Fixed(l)) => Ok(Some(l)),
        (Learner::Lasso, LassoLambda::Cv(k)) => {
            cv_lambda(design, y, family, k, &cfg.newton()).map(Some)
        }
        _ => Ok(None),
    }
}

fn logistic_step(
    name: &str,
    design: &Design,
    y: &[f64],
    cfg: &NuisanceConfig,
) -> Result<(Vec<f64>, StepMeta)> {
    let lambda = penalty_for(cfg, design, y, Family::Binomial)?;
    let fit = fit_logistic(design, y, None, lambda, &cfg.newton())?;
    Ok((
        fit.coef,
        StepMeta {
            step: name.into(),
            iterations: fit.iterations,
            criterion: fit.criterion,
            converged: true,
            lambda,
        },
    ))
}

/// Fits all five nuisances for `spec`. Spillover and ego-2 estimands are
/// oriented first, so the returned functions refer to `spec.orient(ds)`.
pub fn fit_all(ds: &DyadDataset, spec: &EstimandSpec, cfg: &NuisanceConfig) -> Result<NuisanceSet> {
    if spec.target == Target::Ite {
        return Err(Error::Config(
            "interaction effects use one nuisance set per direct-effect level".into(),
        ));
    }
    let canon = spec.orient(ds)?;
    fit_canonical(&canon, spec.level, cfg)
}

/// Fits the nuisances of the direct effect of `d1` on `y1` at `d2 = level`.
pub fn fit_canonical(ds: &DyadDataset, level: u8, cfg: &NuisanceConfig) -> Result<NuisanceSet> {
    cfg.validate()?;
    if cfg.learner == Learner::Precomputed {
        return Err(Error::Config(
            "precomputed nuisances are loaded, not fitted".into(),
        ));
    }
    ds.check_overlap()?;
    let design = Design::index(ds, cfg.basis);
    let can = Canonical::new(ds, level);
    let n = ds.n();
    let mut steps = Vec::with_capacity(5);

    let (pi_coef, meta) =
        logistic_step("pi", &design, &can.z1, cfg).map_err(|e| e.at_step("step 1 (pi)"))?;
    steps.push(meta);

    let arm0 = |i: usize| ds.z1()[i] == 0;
    let design0 = design.filter(arm0);
    let d1i0: Vec<f64> = (0..n).filter(|&i| arm0(i)).map(|i| can.d1i[i]).collect();
    let yi0: Vec<f64> = (0..n).filter(|&i| arm0(i)).map(|i| can.yi[i]).collect();

    let (mu_coef, meta) =
        logistic_step("mu", &design0, &d1i0, cfg).map_err(|e| e.at_step("step 2 (mu)"))?;
    steps.push(meta);

    let (eta_coef, meta) = (|| -> Result<_> {
        let lambda = penalty_for(cfg, &design0, &yi0, Family::Gaussian)?;
        let coef = match lambda {
            Some(l) => fit_lasso(&design0, &yi0, None, Family::Gaussian, l, &cfg.newton())?.coef,
            None => fit_ols(&design0, &yi0, None)?,
        };
        Ok((
            coef,
            StepMeta {
                step: "eta".into(),
                iterations: 1,
                criterion: 0.0,
                converged: true,
                lambda,
            },
        ))
    })()
    .map_err(|e| e.at_step("step 3 (eta)"))?;
    steps.push(meta);

    let mut set = NuisanceSet {
        pi1: NuisanceFn::Logistic(pi_coef),
        mu: NuisanceFn::Logistic(mu_coef),
        eta: NuisanceFn::Linear(eta_coef),
        delta: NuisanceFn::Linear(vec![0.0]),
        omega: NuisanceFn::Linear(vec![0.0]),
        trim_eps: cfg.trim_eps,
        meta: NuisanceMeta {
            learner: cfg.learner,
            steps: Vec::new(),
        },
    };
    let vals = set.values(ds)?;

    let (delta, meta) = fit_delta_on(&design, &can, &vals.pi_z, &vals.mu, cfg)
        .map_err(|e| e.at_step("step 4 (delta)"))?;
    steps.push(meta);
    let (omega, meta) = fit_omega_on(&design, &can, &vals.pi_z, &vals.mu, &vals.eta)
        .map_err(|e| e.at_step("step 5 (omega)"))?;
    steps.push(meta);

    set.delta = delta;
    set.omega = omega;
    set.meta.steps = steps;
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::DyadRow;

    /// The eight-row instance: four rows per instrument arm, no covariates.
    pub(crate) fn hand_dataset() -> DyadDataset {
        let rows = [
            (1, 1, 1, 2.0),
            (1, 1, 1, 2.0),
            (1, 0, 1, 1.0),
            (1, 1, 0, 3.0),
            (0, 1, 1, 2.0),
            (0, 0, 1, 1.0),
            (0, 0, 1, 1.0),
            (0, 0, 0, 0.5),
        ];
        DyadDataset::from_rows(
            rows.iter()
                .enumerate()
                .map(|(i, &(z1, d1, d2, y1))| DyadRow {
                    x: vec![],
                    z1,
                    z2: (i % 2 == 0) as u8,
                    d1,
                    d2,
                    y1,
                    y2: None,
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn hand_dataset_closed_form_nuisances() {
        let ds = hand_dataset();
        let set = fit_canonical(&ds, 1, &NuisanceConfig::default()).unwrap();
        let v = set.values(&ds).unwrap();
        let close = |a: &[f64], b: f64| a.iter().all(|x| (x - b).abs() < 1e-12);
        assert!(close(&v.pi1, 0.5));
        assert!(close(&v.mu, 0.25));
        assert!(close(&v.eta, 1.0));
        // delta comes from an iterative solve stopped at a 1e-10 moment norm
        assert!(v.delta.iter().all(|d| (d - 0.25).abs() < 1e-9));
        assert!(close(&v.omega, 1.0));
        assert!(set.meta.all_converged());
        assert_eq!(set.meta.steps.len(), 5);
    }

    #[test]
    fn all_z1_equal_is_overlap_error() {
        let rows: Vec<DyadRow> = (0..10)
            .map(|i| DyadRow {
                x: vec![i as f64],
                z1: 1,
                z2: (i % 2) as u8,
                d1: (i % 3 == 0) as u8,
                d2: 1,
                y1: 1.0,
                y2: None,
            })
            .collect();
        let ds = DyadDataset::from_rows(rows).unwrap();
        let err = fit_all(&ds, &EstimandSpec::dte(1), &NuisanceConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Precondition(_)));
    }

    #[test]
    fn config_validation() {
        let mut c = NuisanceConfig {
            trim_eps: 0.5,
            ..NuisanceConfig::default()
        };
        assert!(c.validate().is_err());
        c.trim_eps = 0.01;
        c.newton_tol = 0.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn omega_exact_structure_recovers_constant() {
        // y1 = c * d1 on indicator rows, eta = mu * c: every row satisfies the moment with omega = c.
        let c = 2.5;
        let mut rows = Vec::new();
        for i in 0..200 {
            let x = (i as f64 / 200.0) - 0.5;
            let z1 = (i % 2) as u8;
            let d1 = ((i / 2) % 3 == 0 || z1 == 1 && i % 5 != 0) as u8;
            rows.push(DyadRow {
                x: vec![x],
                z1,
                z2: ((i / 7) % 2) as u8,
                d1,
                d2: 1,
                y1: c * f64::from(d1),
                y2: None,
            });
        }
        let ds = DyadDataset::from_rows(rows).unwrap();
        let n = ds.n();
        let can = Canonical::new(&ds, 1);
        let design = Design::index(&ds, IndexBasis::InterceptPlusX);
        let pi_z = vec![0.5; n];
        let mu = vec![0.3; n];
        let eta: Vec<f64> = mu.iter().map(|m| m * c).collect();
        let (omega, meta) = fit_omega_on(&design, &can, &pi_z, &mu, &eta).unwrap();
        let coef = omega.coef().unwrap();
        assert!((coef[0] - c).abs() < 1e-10 && coef[1].abs() < 1e-10, "{coef:?}");
        assert!(meta.criterion <= 1e-12);
    }

    #[test]
    fn log_cosh_stable() {
        assert!((log_cosh(0.3) - 0.3f64.cosh().ln()).abs() < 1e-15);
        assert!((log_cosh(800.0) - (800.0 - std::f64::consts::LN_2)).abs() < 1e-9);
    }

    #[test]
    fn precomputed_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nuis.csv");
        std::fs::write(&path, "pi1,mu,eta,delta,omega\n0.5,0.2,1,0.3,2\n0.001,0.2,1,0.3,2\n").unwrap();
        let set = NuisanceSet::load_precomputed(&path, 2, 0.01).unwrap();
        let ds = DyadDataset::from_rows(vec![
            DyadRow { x: vec![], z1: 1, z2: 0, d1: 1, d2: 1, y1: 1.0, y2: None },
            DyadRow { x: vec![], z1: 0, z2: 1, d1: 0, d2: 1, y1: 0.0, y2: None },
        ])
        .unwrap();
        let v = set.values(&ds).unwrap();
        assert_eq!(v.pi1, vec![0.5, 0.01]);
        assert_eq!(v.pi_z, vec![0.5, 0.99]);
        assert_eq!(v.n_trimmed, 1);
        assert!(NuisanceSet::load_precomputed(&path, 3, 0.01).is_err());
    }
}
