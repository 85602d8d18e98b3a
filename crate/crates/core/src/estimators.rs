//! Point estimators of direct, spillover and interaction effects.
//!
//! All formulas are written for the canonical problem (effect of `d1` on `y1`
//! with `d2` held at `d`); other estimands are oriented onto it first. With
//! `s = (-1)^(1 - z1)` and `I = 1{d2 = d}`:
//!
//! | method | point |
//! |--------|-------|
//! | wald   | `P_n omega(X)` |
//! | ipw    | `P_n{ s I Y1 / (pi delta) }` |
//! | g      | `P_n omega_g(X)`, `omega_g` solving `P_n{ (s/pi) I (Y1 - D1 omega) x~ } = 0` |
//! | reg    | `P_n omega_r(X)`, `omega_r` solving `P_n{ s (I Y1 - eta - omega (D1 I - mu)) x~ } = 0` |
//! | mr     | `P_n[ s/(pi delta) {I Y1 - eta - D1 I omega + mu omega} + omega ]` |
//! | sieve  | `P_n{ s I Y1 psi / phi }` with calibrated `psi, phi` |

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{DyadDataset, EstimandSpec, Target};
use crate::error::{Error, Result};
use crate::inference::{self, BootstrapResult};
use crate::linalg::{dot, Design};
use crate::nuisance::{
    fit_canonical, solve_linear_index, Canonical, NuisanceConfig, NuisanceMeta, NuisanceSet,
    NuisanceValues,
};
use crate::sieve::{self, BasisSpec, SieveDiagnostics};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Wald,
    Ipw,
    G,
    Reg,
    Mr,
    Sieve,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Wald,
        Method::Ipw,
        Method::G,
        Method::Reg,
        Method::Mr,
        Method::Sieve,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Wald => "wald",
            Method::Ipw => "ipw",
            Method::G => "g",
            Method::Reg => "reg",
            Method::Mr => "mr",
            Method::Sieve => "sieve",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s.trim().to_ascii_lowercase())
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown method `{s}` (expected wald|ipw|g|reg|mr|sieve)"
                ))
            })
    }
}

/// Abort rule for weighting by `1/delta`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeakIvGuard {
    /// Minimum `|P_n delta(X)|`.
    pub mean_floor: f64,
    /// Minimum `|delta(x_i)|` over rows.
    pub row_floor: f64,
}

impl Default for WeakIvGuard {
    fn default() -> Self {
        WeakIvGuard {
            mean_floor: 0.02,
            row_floor: 1e-3,
        }
    }
}

impl WeakIvGuard {
    /// `(mean delta, min |delta|, violated)`.
    pub fn inspect(&self, delta: &[f64]) -> (f64, f64, bool) {
        let mean = delta.iter().sum::<f64>() / delta.len() as f64;
        let min_abs = delta.iter().fold(f64::INFINITY, |m, d| m.min(d.abs()));
        let bad = !(mean.abs() >= self.mean_floor) || !(min_abs >= self.row_floor);
        (mean, min_abs, bad)
    }

    pub fn check(&self, delta: &[f64]) -> Result<(f64, f64)> {
        let (mean, min_abs, bad) = self.inspect(delta);
        if bad {
            return Err(Error::WeakInstrument(format!(
                "mean delta = {mean:.4} (floor {}), min |delta| = {min_abs:.2e} (floor {}); \
                 try a method that does not divide by delta, such as g or reg",
                self.mean_floor, self.row_floor
            )));
        }
        Ok((mean, min_abs))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IteMode {
    /// Difference of the two direct-effect estimates.
    #[default]
    Difference,
    /// Nuisances conditioned on `(z2, x)` at both levels.
    Conditional,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EstimationConfig {
    pub nuisance: NuisanceConfig,
    pub sieve: BasisSpec,
    pub guard: WeakIvGuard,
    pub ite_mode: IteMode,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Diagnostics {
    pub weak_iv: bool,
    pub mean_delta: Option<f64>,
    pub min_abs_delta: Option<f64>,
    pub n_trimmed: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nuisance: Option<NuisanceMeta>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sieve: Option<SieveDiagnostics>,
    /// `(dte1, dte0)` components of an interaction estimate.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ite_components: Option<[f64; 2]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ite_mode: Option<IteMode>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateReport {
    #[serde(serialize_with = "ser_spec", deserialize_with = "de_spec")]
    pub estimand: EstimandSpec,
    pub method: Method,
    pub point: f64,
    /// Centered influence-function values, one per row (multiply robust only).
    #[serde(skip)]
    pub eif_values: Vec<f64>,
    pub se_plugin: Option<f64>,
    /// 95% plug-in interval when available, otherwise the bootstrap interval.
    pub ci: Option<[f64; 2]>,
    pub n: usize,
    pub diagnostics: Diagnostics,
    pub bootstrap: Option<BootstrapResult>,
}

fn ser_spec<S: serde::Serializer>(spec: &EstimandSpec, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_str(&spec.to_string())
}

fn de_spec<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<EstimandSpec, D::Error> {
    let raw = String::deserialize(d)?;
    let base = raw.split('@').next().unwrap_or_default();
    let mut spec: EstimandSpec = base.parse().map_err(serde::de::Error::custom)?;
    if raw.ends_with("@ego2") {
        spec = spec.with_ego(crate::data::Ego::Unit2);
    }
    Ok(spec)
}

impl EstimateReport {
    fn new(spec: EstimandSpec, method: Method, point: f64, n: usize) -> Self {
        EstimateReport {
            estimand: spec,
            method,
            point,
            eif_values: Vec::new(),
            se_plugin: None,
            ci: None,
            n,
            diagnostics: Diagnostics::default(),
            bootstrap: None,
        }
    }

    /// Attaches a bootstrap result; the bootstrap interval becomes `ci` when
    /// no plug-in interval exists.
    pub fn with_bootstrap(mut self, b: BootstrapResult) -> Self {
        if self.ci.is_none() {
            self.ci = Some([b.ci_lower, b.ci_upper]);
        }
        self.bootstrap = Some(b);
        self
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    fn set_eif(&mut self, eif: Vec<f64>) {
        let n = eif.len() as f64;
        let var = eif.iter().map(|v| v * v).sum::<f64>() / (n - 1.0);
        let se = (var / n).sqrt();
        self.se_plugin = Some(se);
        self.eif_values = eif;
        self.ci = inference::plugin_ci(self, 0.95).ok().map(|(l, u)| [l, u]);
    }
}

/// Per-row ingredients shared by the nuisance-based estimators.
struct Prepared<'a> {
    design: Design,
    can: Canonical,
    vals: &'a NuisanceValues,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn refit_mean(design: &Design, coef: &[f64]) -> f64 {
    (0..design.nrows())
        .map(|i| dot(coef, design.row(i)))
        .sum::<f64>()
        / design.nrows() as f64
}

/// Point estimate (and centered EIF for `mr`) on a canonical dataset.
fn point_from_values(
    p: &Prepared,
    method: Method,
    guard: &WeakIvGuard,
) -> Result<(f64, Option<Vec<f64>>)> {
    let n = p.can.s.len();
    let v = p.vals;
    match method {
        Method::Wald => Ok((mean(&v.omega), None)),
        Method::Ipw => {
            guard.check(&v.delta)?;
            let terms: Vec<f64> = (0..n)
                .map(|i| p.can.s[i] * p.can.yi[i] / (v.pi_z[i] * v.delta[i]))
                .collect();
            Ok((mean(&terms), None))
        }
        Method::G => {
            let c: Vec<f64> = (0..n).map(|i| p.can.s[i] / v.pi_z[i]).collect();
            let sol = solve_linear_index(&p.design, &c, &p.can.yi, &p.can.d1i, "g estimating equation")?;
            Ok((refit_mean(&p.design, &sol.coef), None))
        }
        Method::Reg => {
            let r: Vec<f64> = (0..n).map(|i| p.can.yi[i] - v.eta[i]).collect();
            let q: Vec<f64> = (0..n).map(|i| p.can.d1i[i] - v.mu[i]).collect();
            let sol = solve_linear_index(&p.design, &p.can.s, &r, &q, "reg estimating equation")?;
            Ok((refit_mean(&p.design, &sol.coef), None))
        }
        Method::Mr => {
            guard.check(&v.delta)?;
            let phi: Vec<f64> = (0..n)
                .map(|i| {
                    let w = p.can.s[i] / (v.pi_z[i] * v.delta[i]);
                    w * (p.can.yi[i] - v.eta[i] - p.can.d1i[i] * v.omega[i] + v.mu[i] * v.omega[i])
                        + v.omega[i]
                })
                .collect();
            let point = mean(&phi);
            Ok((point, Some(phi.iter().map(|f| f - point).collect())))
        }
        Method::Sieve => Err(Error::Config(
            "the sieve estimator does not use fitted nuisances".into(),
        )),
    }
}

/// Estimates a direct or spillover effect from an already fitted nuisance set.
///
/// `nuis` must refer to `spec.orient(ds)`, which is what [`crate::nuisance::fit_all`]
/// returns and what precomputed values must be aligned with.
pub fn estimate_with_nuisances(
    ds: &DyadDataset,
    spec: &EstimandSpec,
    method: Method,
    nuis: &NuisanceSet,
    cfg: &EstimationConfig,
) -> Result<EstimateReport> {
    if spec.target == Target::Ite {
        return Err(Error::Config(
            "interaction effects are estimated with estimate_ite".into(),
        ));
    }
    let canon = spec.orient(ds)?;
    estimate_canonical_with(&canon, *spec, method, nuis, cfg)
}

fn estimate_canonical_with(
    canon: &DyadDataset,
    spec: EstimandSpec,
    method: Method,
    nuis: &NuisanceSet,
    cfg: &EstimationConfig,
) -> Result<EstimateReport> {
    let vals = nuis.values(canon)?;
    let prepared = Prepared {
        design: Design::index(canon, cfg.nuisance.basis),
        can: Canonical::new(canon, spec.level),
        vals: &vals,
    };
    let (point, eif) = point_from_values(&prepared, method, &cfg.guard)?;
    let (mean_delta, min_abs, weak) = cfg.guard.inspect(&vals.delta);
    let mut rep = EstimateReport::new(spec, method, point, canon.n());
    rep.diagnostics = Diagnostics {
        weak_iv: weak,
        mean_delta: Some(mean_delta),
        min_abs_delta: Some(min_abs),
        n_trimmed: vals.n_trimmed,
        nuisance: Some(nuis.meta.clone()),
        ..Diagnostics::default()
    };
    if let Some(eif) = eif {
        rep.set_eif(eif);
    }
    Ok(rep)
}

fn estimate_canonical(
    canon: &DyadDataset,
    spec: EstimandSpec,
    method: Method,
    cfg: &EstimationConfig,
) -> Result<EstimateReport> {
    if method == Method::Sieve {
        let fit = sieve::estimate_sieve_canonical(canon, spec.level, &cfg.sieve)?;
        let mut rep = EstimateReport::new(spec, method, fit.point, canon.n());
        rep.diagnostics.sieve = Some(fit.diagnostics);
        rep.diagnostics.min_abs_delta = Some(fit.min_abs_phi);
        return Ok(rep);
    }
    let nuis = fit_canonical(canon, spec.level, &cfg.nuisance)?;
    estimate_canonical_with(canon, spec, method, &nuis, cfg)
}

/// Fits whatever `method` needs and estimates `spec` on `ds`.
pub fn estimate(
    ds: &DyadDataset,
    spec: &EstimandSpec,
    method: Method,
    cfg: &EstimationConfig,
) -> Result<EstimateReport> {
    if spec.target == Target::Ite {
        return estimate_ite(ds, spec, method, cfg);
    }
    let canon = spec.orient(ds)?;
    estimate_canonical(&canon, *spec, method, cfg)
}

/// Interaction effect `dte1 - dte0` with the same method at both levels.
///
/// In [`IteMode::Conditional`] the peer instrument joins the covariates, so
/// every nuisance (and the effect index) is a function of `(z2, x)`.
/// For `mr` the reported influence values are the row-wise difference of the
/// two direct-effect influence values.
pub fn estimate_ite(
    ds: &DyadDataset,
    spec: &EstimandSpec,
    method: Method,
    cfg: &EstimationConfig,
) -> Result<EstimateReport> {
    let base = spec.orient(ds)?;
    let canon = match cfg.ite_mode {
        IteMode::Difference => base,
        IteMode::Conditional => base.with_z2_as_covariate(),
    };
    let r1 = estimate_canonical(&canon, spec.as_direct(1), method, cfg)?;
    let r0 = estimate_canonical(&canon, spec.as_direct(0), method, cfg)?;
    Ok(combine_ite(*spec, cfg.ite_mode, &r1, &r0))
}

/// Difference report from two direct-effect reports on the same rows.
pub fn combine_ite(spec: EstimandSpec, mode: IteMode, r1: &EstimateReport, r0: &EstimateReport) -> EstimateReport {
    let mut rep = EstimateReport::new(spec, r1.method, r1.point - r0.point, r1.n);
    rep.diagnostics = Diagnostics {
        weak_iv: r1.diagnostics.weak_iv || r0.diagnostics.weak_iv,
        mean_delta: None,
        min_abs_delta: match (r1.diagnostics.min_abs_delta, r0.diagnostics.min_abs_delta) {
            (Some(a), Some(b)) => Some(a.min(b)),
            _ => None,
        },
        n_trimmed: r1.diagnostics.n_trimmed.max(r0.diagnostics.n_trimmed),
        ite_components: Some([r1.point, r0.point]),
        ite_mode: Some(mode),
        ..Diagnostics::default()
    };
    if !r1.eif_values.is_empty() && r1.eif_values.len() == r0.eif_values.len() {
        let eif = r1.eif_values.iter().zip(&r0.eif_values).map(|(a, b)| a - b).collect();
        rep.set_eif(eif);
    }
    rep
}
