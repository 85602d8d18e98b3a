//! Bootstrap over dyads, influence-function intervals and coverage.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::data::DyadDataset;
use crate::data::EstimandSpec;
use crate::error::{Error, Result};
use crate::estimators::{estimate, EstimateReport, EstimationConfig, Method};
use crate::rng::{stream_rng, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapConfig {
    /// Number of resamples.
    pub b: usize,
    pub seed: u64,
    /// Two-sided level of the percentile interval.
    pub level: f64,
    /// Replicates with `|point| > exclusion_factor * outcome range` are excluded.
    pub exclusion_factor: f64,
    /// Largest tolerated share of failed plus excluded replicates.
    pub max_failure_share: f64,
}

impl BootstrapConfig {
    pub fn new(b: usize, seed: u64) -> Self {
        BootstrapConfig {
            b,
            seed,
            level: 0.95,
            exclusion_factor: 10.0,
            max_failure_share: 0.2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.b < 2 {
            return Err(Error::Config(format!("bootstrap needs B >= 2, got {}", self.b)));
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(Error::Config(format!("level must lie in (0, 1), got {}", self.level)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapResult {
    /// Kept replicate estimates, in replicate order.
    pub replicates: Vec<f64>,
    pub se: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
    pub level: f64,
    pub b: usize,
    /// Replicates whose estimator returned an error.
    pub n_failed: usize,
    /// Replicates dropped by the outcome-range rule.
    pub n_excluded: usize,
}

/// Sample quantile, linear interpolation between order statistics (type 7).
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Sample standard deviation with the `n - 1` divisor.
pub fn sample_sd(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

/// Row indices of resample `r`: `n` draws with replacement.
pub fn resample_indices(n: usize, seed: u64, r: usize) -> Vec<usize> {
    let mut rng = stream_rng(seed, Stream::Bootstrap, r as u64);
    (0..n).map(|_| rng.random_range(0..n)).collect()
}

/// Generic dyad bootstrap of a scalar statistic.
///
/// Replicate `r` resamples with its own random stream, so results do not
/// depend on scheduling. `exclude_above` drops replicates with a larger
/// absolute value; they are counted, as are failures.
pub fn bootstrap_with<F>(
    ds: &DyadDataset,
    cfg: &BootstrapConfig,
    exclude_above: Option<f64>,
    stat: F,
) -> Result<BootstrapResult>
where
    F: Fn(&DyadDataset) -> Result<f64> + Sync,
{
    cfg.validate()?;
    let n = ds.n();
    let outcomes: Vec<Option<f64>> = (0..cfg.b)
        .into_par_iter()
        .map(|r| {
            let idx = resample_indices(n, cfg.seed, r);
            stat(&ds.select(&idx)).ok().filter(|v| v.is_finite())
        })
        .collect();
    let n_failed = outcomes.iter().filter(|o| o.is_none()).count();
    let limit = exclude_above.unwrap_or(f64::INFINITY);
    let replicates: Vec<f64> = outcomes
        .iter()
        .flatten()
        .copied()
        .filter(|v| v.abs() <= limit)
        .collect();
    let n_excluded = cfg.b - n_failed - replicates.len();
    let lost = (n_failed + n_excluded) as f64 / cfg.b as f64;
    if lost > cfg.max_failure_share || replicates.len() < 2 {
        return Err(Error::Inference(format!(
            "{n_failed} of {} bootstrap replicates failed and {n_excluded} were excluded \
             (limit {:.0}%); consider a method that does not divide by delta, such as g or reg",
            cfg.b,
            cfg.max_failure_share * 100.0
        )));
    }
    let mut sorted = replicates.clone();
    sorted.sort_by(f64::total_cmp);
    let a = (1.0 - cfg.level) / 2.0;
    Ok(BootstrapResult {
        se: sample_sd(&replicates),
        ci_lower: quantile_sorted(&sorted, a),
        ci_upper: quantile_sorted(&sorted, 1.0 - a),
        level: cfg.level,
        b: cfg.b,
        n_failed,
        n_excluded,
        replicates,
    })
}

/// Bootstrap of `estimate(ds, spec, method, est_cfg)`; every resample refits
/// all nuisances.
pub fn bootstrap(
    ds: &DyadDataset,
    spec: &EstimandSpec,
    method: Method,
    est_cfg: &EstimationConfig,
    cfg: &BootstrapConfig,
) -> Result<BootstrapResult> {
    let range = spec.orient(ds)?.outcome_range();
    let limit = cfg.exclusion_factor * range;
    bootstrap_with(ds, cfg, Some(limit), |b| {
        estimate(b, spec, method, est_cfg).map(|r| r.point)
    })
}

/// Normal interval `point +- z se_plugin`.
pub fn plugin_ci(report: &EstimateReport, level: f64) -> Result<(f64, f64)> {
    let se = match (report.se_plugin, report.eif_values.is_empty()) {
        (Some(se), false) => se,
        _ => {
            return Err(Error::Precondition(
                "plug-in interval needs influence-function values".into(),
            ))
        }
    };
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Config(format!("level must lie in (0, 1), got {level}")));
    }
    let z = Normal::standard().inverse_cdf((1.0 + level) / 2.0);
    Ok((report.point - z * se, report.point + z * se))
}

/// Share of intervals containing `truth`. NaN for an empty list.
pub fn coverage(replications: &[(f64, (f64, f64))], truth: f64) -> f64 {
    let hits = replications
        .iter()
        .filter(|(_, (lo, hi))| *lo <= truth && truth <= *hi)
        .count();
    hits as f64 / replications.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::DyadRow;

    fn small() -> DyadDataset {
        DyadDataset::from_rows(
            (0..50)
                .map(|i| DyadRow {
                    x: vec![i as f64],
                    z1: (i % 2) as u8,
                    z2: 0,
                    d1: 0,
                    d2: 0,
                    y1: i as f64,
                    y2: None,
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn constant_statistic_degenerate() {
        let r = bootstrap_with(&small(), &BootstrapConfig::new(20, 1), None, |_| Ok(3.5)).unwrap();
        assert_eq!(r.se, 0.0);
        assert_eq!((r.ci_lower, r.ci_upper), (3.5, 3.5));
    }

    #[test]
    fn deterministic_under_seed() {
        let f = |d: &DyadDataset| Ok(d.y1().iter().sum::<f64>() / d.n() as f64);
        let a = bootstrap_with(&small(), &BootstrapConfig::new(30, 9), None, f).unwrap();
        let b = bootstrap_with(&small(), &BootstrapConfig::new(30, 9), None, f).unwrap();
        assert_eq!(a, b);
        let c = bootstrap_with(&small(), &BootstrapConfig::new(30, 10), None, f).unwrap();
        assert_ne!(a.replicates, c.replicates);
    }

    #[test]
    fn failures_counted_and_ceiling_enforced() {
        let cfg = BootstrapConfig::new(40, 2);
        let flaky = |d: &DyadDataset| {
            if d.y1()[0] < 5.0 { Err(Error::WeakInstrument("x".into())) } else { Ok(1.0) }
        };
        match bootstrap_with(&small(), &cfg, None, flaky) {
            Ok(r) => assert!(r.n_failed as f64 <= 8.0),
            Err(e) => assert!(matches!(e, Error::Inference(_))),
        }
        let always = |_: &DyadDataset| -> Result<f64> { Err(Error::WeakInstrument("x".into())) };
        assert!(matches!(bootstrap_with(&small(), &cfg, None, always), Err(Error::Inference(_))));
    }

    #[test]
    fn exclusion_rule() {
        let cfg = BootstrapConfig::new(10, 2);
        let r = bootstrap_with(&small(), &cfg, Some(100.0), |_| Ok(1000.0));
        assert!(matches!(r, Err(Error::Inference(_))));
    }

    #[test]
    fn quantile_type7() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile_sorted(&v, 0.0), 1.0);
        assert_eq!(quantile_sorted(&v, 1.0), 4.0);
        assert!((quantile_sorted(&v, 0.5) - 2.5).abs() < 1e-15);
        assert!((quantile_sorted(&v, 0.25) - 1.75).abs() < 1e-15);
    }

    #[test]
    fn coverage_extremes() {
        let all = vec![(0.0, (4.0, 6.0)); 5];
        assert_eq!(coverage(&all, 5.0), 1.0);
        assert_eq!(coverage(&all, 7.0), 0.0);
    }

    #[test]
    fn b_below_two_rejected() {
        assert!(BootstrapConfig::new(1, 0).validate().is_err());
    }
}
