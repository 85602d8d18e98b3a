//! Monte Carlo harness: repeated draws from the simulation design, bias / SD /
//! coverage per (estimand, method, n).

use std::fmt::Write as _;
use std::io::Write;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{DyadDataset, EstimandSpec, Target};
use crate::error::{Error, Result};
use crate::estimators::{estimate, estimate_with_nuisances, EstimationConfig, Method};
use crate::inference::{bootstrap, bootstrap_with, coverage, plugin_ci, sample_sd, BootstrapConfig};
use crate::nuisance::{Learner, NuisanceSet};
use crate::rng::derive_seed;
use crate::sim::dgp::{generate, true_values, DgpConfig, MisspecPattern};
use crate::sim::oracle::true_nuisance_set;

/// Estimator columns of a simulation table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum McMethod {
    /// Multiply robust estimator with parametric nuisances.
    Parametric,
    /// Multiply robust estimator with lasso nuisances.
    Lasso,
    Sieve,
    Wald,
    Ipw,
    G,
    Reg,
}

impl McMethod {
    pub const ALL: [McMethod; 7] = [
        McMethod::Parametric,
        McMethod::Lasso,
        McMethod::Sieve,
        McMethod::Wald,
        McMethod::Ipw,
        McMethod::G,
        McMethod::Reg,
    ];

    pub fn name(self) -> &'static str {
        match self {
            McMethod::Parametric => "parametric",
            McMethod::Lasso => "lasso",
            McMethod::Sieve => "sieve",
            McMethod::Wald => "wald",
            McMethod::Ipw => "ipw",
            McMethod::G => "g",
            McMethod::Reg => "reg",
        }
    }

    pub fn method(self) -> Method {
        match self {
            McMethod::Parametric | McMethod::Lasso => Method::Mr,
            McMethod::Sieve => Method::Sieve,
            McMethod::Wald => Method::Wald,
            McMethod::Ipw => Method::Ipw,
            McMethod::G => Method::G,
            McMethod::Reg => Method::Reg,
        }
    }

    fn learner(self) -> Learner {
        match self {
            McMethod::Lasso => Learner::Lasso,
            _ => Learner::Parametric,
        }
    }
}

impl FromStr for McMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        McMethod::ALL
            .into_iter()
            .find(|m| m.name() == s || (s == "mr" && *m == McMethod::Parametric))
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown simulation method `{s}` (expected parametric|lasso|sieve|wald|ipw|g|reg)"
                ))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CiKind {
    /// Percentile bootstrap per replicate.
    Bootstrap,
    /// Influence-function normal interval (multiply robust columns only).
    Plugin,
    /// No intervals; coverage is not reported.
    None,
}

#[derive(Debug, Clone, PartialEq)]
pub struct McConfig {
    pub reps: usize,
    pub ns: Vec<usize>,
    pub methods: Vec<McMethod>,
    pub estimands: Vec<EstimandSpec>,
    pub seed: u64,
    pub bootstrap_b: usize,
    pub ci: CiKind,
    pub misspec: MisspecPattern,
    pub estimation: EstimationConfig,
}

impl McConfig {
    pub fn new(reps: usize, ns: Vec<usize>, methods: Vec<McMethod>, seed: u64) -> Self {
        McConfig {
            reps,
            ns,
            methods,
            estimands: EstimandSpec::all_four().to_vec(),
            seed,
            bootstrap_b: 200,
            ci: CiKind::Bootstrap,
            misspec: MisspecPattern::None,
            estimation: EstimationConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.reps < 2 {
            return Err(Error::Config(format!("reps must be at least 2, got {}", self.reps)));
        }
        if self.ns.is_empty() || self.methods.is_empty() || self.estimands.is_empty() {
            return Err(Error::Config("ns, methods and estimands must be non-empty".into()));
        }
        for &n in &self.ns {
            DgpConfig::new(n, 0).validate()?;
        }
        if self.ci == CiKind::Bootstrap && self.bootstrap_b < 2 {
            return Err(Error::Config("bootstrap B must be at least 2".into()));
        }
        if self.misspec != MisspecPattern::None {
            if let Some(m) = self
                .methods
                .iter()
                .find(|m| matches!(m, McMethod::Lasso | McMethod::Sieve))
            {
                return Err(Error::Config(format!(
                    "misspecification patterns corrupt precomputed nuisances; `{}` does not use them",
                    m.name()
                )));
            }
        }
        self.estimation.nuisance.validate()
    }

    /// Replicate count below which tables carry a warning.
    pub const LOW_REPS: usize = 20;
}

/// Seed of the dataset used by replicate `r` at sample size `n`.
pub fn replicate_seed(seed: u64, n: usize, r: usize) -> u64 {
    derive_seed(seed, &[n as u64, r as u64])
}

/// Truth for an estimand of the simulation design.
pub fn truth_for(spec: &EstimandSpec) -> f64 {
    let (t1, t0, s1, s0, ite) = true_values();
    match (spec.target, spec.level) {
        (Target::Dte, 1) => t1,
        (Target::Dte, _) => t0,
        (Target::Ste, 1) => s1,
        (Target::Ste, _) => s0,
        (Target::Ite, _) => ite,
    }
}

/// Fixed wrong values used for corrupted nuisances.
pub const CORRUPT_PI1: f64 = 0.8;
pub const CORRUPT_DELTA: f64 = 0.5;

/// True nuisances perturbed by `n^(-1/2)` (the error of a root-n consistent
/// fit) for the components `pattern` keeps, fixed wrong values for the rest:
/// `pi1 = 0.8`, `delta = 0.5`, `mu = eta = omega = 0`.
pub fn misspecified_nuisances(
    ds: &DyadDataset,
    spec: &EstimandSpec,
    pattern: MisspecPattern,
    trim_eps: f64,
) -> Result<NuisanceSet> {
    let kappa = 1.0 / (ds.n() as f64).sqrt();
    misspecified_nuisances_with(ds, spec, pattern, trim_eps, kappa)
}

/// [`misspecified_nuisances`] with an explicit shift `kappa` of the kept
/// components; `kappa = 0` keeps them exact.
pub fn misspecified_nuisances_with(
    ds: &DyadDataset,
    spec: &EstimandSpec,
    pattern: MisspecPattern,
    trim_eps: f64,
    kappa: f64,
) -> Result<NuisanceSet> {
    let truth = true_nuisance_set(ds, spec, trim_eps)?;
    let canon = spec.orient(ds)?;
    let v = truth.values(&canon)?;
    let ok = |keep: bool, col: &[f64], wrong: f64| -> Vec<f64> {
        if keep {
            col.iter().map(|x| x + kappa).collect()
        } else {
            vec![wrong; col.len()]
        }
    };
    use MisspecPattern::*;
    let (pi, mu, eta, delta, omega) = match pattern {
        None => (true, true, true, true, true),
        OnlyIpwCorrect => (true, false, false, true, false),
        OnlyGCorrect => (true, false, false, false, true),
        OnlyRegCorrect => (false, true, true, false, true),
    };
    NuisanceSet::from_values(
        ok(pi, &v.pi1, CORRUPT_PI1),
        ok(mu, &v.mu, 0.0),
        ok(eta, &v.eta, 0.0),
        ok(delta, &v.delta, CORRUPT_DELTA),
        ok(omega, &v.omega, 0.0),
        trim_eps,
    )
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Cell {
    point: Option<f64>,
    ci: Option<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McRow {
    pub estimand: String,
    pub method: String,
    pub n: usize,
    pub truth: f64,
    /// Replicates with a point estimate.
    pub reps: usize,
    pub mean: f64,
    pub bias: f64,
    pub sd: f64,
    /// Monte Carlo standard error of the bias, `sd / sqrt(reps)`.
    pub mc_se: f64,
    pub cp: Option<f64>,
    /// Replicates whose estimate or interval failed.
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McTable {
    pub rows: Vec<McRow>,
    pub reps: usize,
    pub seed: u64,
    pub low_rep_warning: bool,
}

fn est_cfg_for(base: &EstimationConfig, m: McMethod) -> EstimationConfig {
    let mut c = *base;
    c.nuisance.learner = m.learner();
    c
}

fn run_cell(
    ds: &DyadDataset,
    spec: &EstimandSpec,
    m: McMethod,
    cfg: &McConfig,
    boot_seed: u64,
    corrupted: Option<&Result<NuisanceSet>>,
) -> Cell {
    let est = est_cfg_for(&cfg.estimation, m);
    let method = m.method();
    let trim = est.nuisance.trim_eps;
    let report = match corrupted {
        None => estimate(ds, spec, method, &est),
        Some(Ok(nuis)) => estimate_with_nuisances(ds, spec, method, nuis, &est),
        Some(Err(_)) => return Cell { point: None, ci: None },
    };
    let Ok(report) = report else {
        return Cell { point: None, ci: None };
    };
    let ci = match cfg.ci {
        CiKind::None => None,
        CiKind::Plugin => plugin_ci(&report, 0.95).ok(),
        CiKind::Bootstrap => {
            let bc = BootstrapConfig::new(cfg.bootstrap_b, boot_seed);
            let res = if cfg.misspec == MisspecPattern::None {
                bootstrap(ds, spec, method, &est, &bc)
            } else {
                let limit = bc.exclusion_factor * spec.orient(ds).map(|c| c.outcome_range()).unwrap_or(f64::INFINITY);
                bootstrap_with(ds, &bc, Some(limit), |b| {
                    let nuis = misspecified_nuisances(b, spec, cfg.misspec, trim)?;
                    estimate_with_nuisances(b, spec, method, &nuis, &est).map(|r| r.point)
                })
            };
            res.ok().map(|b| (b.ci_lower, b.ci_upper))
        }
    };
    Cell {
        point: Some(report.point),
        ci,
    }
}

/// Runs every (n, replicate) draw and summarizes each (estimand, method, n).
///
/// Replicates run in parallel; each owns a dataset seed derived from
/// `(seed, n, r)` and bootstrap seeds derived from that, so the table does
/// not depend on the thread count.
pub fn run_mc(cfg: &McConfig) -> Result<McTable> {
    cfg.validate()?;
    let mut rows = Vec::new();
    for &n in &cfg.ns {
        let cells: Vec<Vec<Cell>> = (0..cfg.reps)
            .into_par_iter()
            .map(|r| {
                let seed = replicate_seed(cfg.seed, n, r);
                let ds = generate(&DgpConfig::new(n, seed)).expect("validated sample size");
                let mut out = Vec::with_capacity(cfg.estimands.len() * cfg.methods.len());
                for (ei, spec) in cfg.estimands.iter().enumerate() {
                    let corrupted = (cfg.misspec != MisspecPattern::None).then(|| {
                        misspecified_nuisances(&ds, spec, cfg.misspec, cfg.estimation.nuisance.trim_eps)
                    });
                    for (mi, &m) in cfg.methods.iter().enumerate() {
                        let boot_seed = derive_seed(seed, &[ei as u64, mi as u64]);
                        out.push(run_cell(&ds, spec, m, cfg, boot_seed, corrupted.as_ref()));
                    }
                }
                out
            })
            .collect();
        for (ei, spec) in cfg.estimands.iter().enumerate() {
            for (mi, &m) in cfg.methods.iter().enumerate() {
                let k = ei * cfg.methods.len() + mi;
                let column: Vec<Cell> = cells.iter().map(|c| c[k]).collect();
                rows.push(summarize(spec, m, n, &column, cfg.ci != CiKind::None));
            }
        }
    }
    Ok(McTable {
        rows,
        reps: cfg.reps,
        seed: cfg.seed,
        low_rep_warning: cfg.reps < McConfig::LOW_REPS,
    })
}

fn summarize(spec: &EstimandSpec, m: McMethod, n: usize, column: &[Cell], with_ci: bool) -> McRow {
    let truth = truth_for(spec);
    let points: Vec<f64> = column.iter().filter_map(|c| c.point).collect();
    let with: Vec<(f64, (f64, f64))> = column
        .iter()
        .filter_map(|c| Some((c.point?, c.ci?)))
        .collect();
    let failures = column
        .iter()
        .filter(|c| c.point.is_none() || (with_ci && c.ci.is_none()))
        .count();
    let k = points.len();
    let mean = if k > 0 { points.iter().sum::<f64>() / k as f64 } else { f64::NAN };
    let sd = if k > 1 { sample_sd(&points) } else { f64::NAN };
    McRow {
        estimand: spec.to_string(),
        method: m.name().to_string(),
        n,
        truth,
        reps: k,
        mean,
        bias: mean - truth,
        sd,
        mc_se: sd / (k as f64).sqrt(),
        cp: (with_ci && !with.is_empty()).then(|| coverage(&with, truth)),
        failures,
    }
}

impl McTable {
    pub fn get(&self, estimand: &str, method: &str, n: usize) -> Option<&McRow> {
        self.rows
            .iter()
            .find(|r| r.estimand == estimand && r.method == method && r.n == n)
    }

    /// CSV with columns `estimand,method,n,bias,sd,cp,failures`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "estimand,method,n,bias,sd,cp,failures")?;
        for r in &self.rows {
            let cp = r.cp.map(|c| c.to_string()).unwrap_or_default();
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.estimand, r.method, r.n, r.bias, r.sd, cp, r.failures
            )?;
        }
        Ok(())
    }

    /// One block per estimand; rows are sample sizes, and each method gets
    /// Bias / SD / CP columns.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut estimands: Vec<&str> = Vec::new();
        let mut methods: Vec<&str> = Vec::new();
        let mut ns: Vec<usize> = Vec::new();
        for r in &self.rows {
            if !estimands.contains(&r.estimand.as_str()) {
                estimands.push(&r.estimand);
            }
            if !methods.contains(&r.method.as_str()) {
                methods.push(&r.method);
            }
            if !ns.contains(&r.n) {
                ns.push(r.n);
            }
        }
        if self.low_rep_warning {
            let _ = writeln!(out, "# low-rep warning: only {} replications", self.reps);
        }
        for e in estimands {
            let _ = write!(out, "{e:<8}");
            for m in &methods {
                let _ = write!(out, " | {m:^22}");
            }
            let _ = writeln!(out);
            let _ = write!(out, "{:<8}", "n");
            for _ in &methods {
                let _ = write!(out, " | {:>6} {:>6} {:>6}", "Bias", "SD", "CP");
            }
            let _ = writeln!(out);
            for &n in &ns {
                let _ = write!(out, "{n:<8}");
                for m in &methods {
                    match self.get(e, m, n) {
                        Some(r) => {
                            let cp = r.cp.map_or("-".to_string(), |c| format!("{c:.2}"));
                            let _ = write!(out, " | {:>6.2} {:>6.2} {:>6}", r.bias, r.sd, cp);
                        }
                        None => {
                            let _ = write!(out, " | {:>22}", "");
                        }
                    }
                }
                let _ = writeln!(out);
            }
            let _ = writeln!(out);
        }
        out
    }

    /// One line per row: `estimand method n: bias sd cp failures`.
    pub fn summary_lines(&self) -> Vec<String> {
        self.rows
            .iter()
            .map(|r| {
                format!(
                    "{} {} n={}: bias={:+.4} sd={:.4} cp={} failures={}",
                    r.estimand,
                    r.method,
                    r.n,
                    r.bias,
                    r.sd,
                    r.cp.map_or("-".to_string(), |c| format!("{c:.3}")),
                    r.failures
                )
            })
            .collect()
    }
}
