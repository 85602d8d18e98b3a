//! Data-generating process with latent confounders.
//!
//! * `X ~ U[-1, 1]^2`, latent `U ~ U(0, 0.5]^2`
//! * `Zj ~ Bernoulli(expit(0.25 X1 + 0.25 X2))`, independently for j = 1, 2
//! * `P(Dj = 1 | Zj, X, U) = m(Zj) = expit(-1 + 2 Zj - 0.25 X1 - 0.25 X2 + 0.05 U1 - 0.05 U2)`,
//!   `D1, D2` conditionally independent
//! * `Y1 = f(D1, D2, X, U) + e1`, `Y2 = f(D2, D1, X, U) + e2`, `e ~ N(0, 1)`
//!
//! where `f(d1, d2, ·)` is one of four linear outcome surfaces
//! (see [`outcome_mean`]). The average effects are 7, 5, 3, 1 for the direct
//! effects at `d = 1, 0` and the spillover effects at `d = 1, 0`.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{DyadDataset, DyadRow};
use crate::error::{Error, Result};
use crate::nuisance::expit;
use crate::rng::{stream_rng, Stream};

/// Which precomputed nuisances stay correct in a robustness study; the rest
/// are replaced by fixed wrong values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MisspecPattern {
    #[default]
    None,
    /// `pi` and `delta` correct.
    OnlyIpwCorrect,
    /// `pi` and `omega` correct.
    OnlyGCorrect,
    /// `mu`, `eta` and `omega` correct.
    OnlyRegCorrect,
}

impl MisspecPattern {
    pub const CORRUPTING: [MisspecPattern; 3] = [
        MisspecPattern::OnlyIpwCorrect,
        MisspecPattern::OnlyGCorrect,
        MisspecPattern::OnlyRegCorrect,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MisspecPattern::None => "none",
            MisspecPattern::OnlyIpwCorrect => "only_ipw_correct",
            MisspecPattern::OnlyGCorrect => "only_g_correct",
            MisspecPattern::OnlyRegCorrect => "only_reg_correct",
        }
    }
}

impl std::str::FromStr for MisspecPattern {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [MisspecPattern::None]
            .into_iter()
            .chain(MisspecPattern::CORRUPTING)
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown misspecification pattern `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DgpConfig {
    pub n: usize,
    pub seed: u64,
    pub misspec: MisspecPattern,
}

pub const MIN_N: usize = 100;

impl DgpConfig {
    pub fn new(n: usize, seed: u64) -> Self {
        DgpConfig {
            n,
            seed,
            misspec: MisspecPattern::None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < MIN_N {
            return Err(Error::Config(format!("n must be at least {MIN_N}, got {}", self.n)));
        }
        Ok(())
    }
}

/// Instrument propensity `P(Zj = 1 | x)`.
#[inline]
pub fn instrument_prob(x: &[f64]) -> f64 {
    expit(0.25 * x[0] + 0.25 * x[1])
}

/// `P(Dj = 1 | Zj = z, x, u)`.
#[inline]
pub fn treatment_prob(z: u8, x: &[f64], u: &[f64; 2]) -> f64 {
    expit(-1.0 + 2.0 * f64::from(z) - 0.25 * x[0] - 0.25 * x[1] + 0.05 * u[0] - 0.05 * u[1])
}

/// `E[Y(own, other) | x, u]` for either unit.
#[inline]
pub fn outcome_mean(own: u8, other: u8, x: &[f64], u: &[f64; 2]) -> f64 {
    let base = match (own, other) {
        (1, 1) => 6.0 + 6.0 * x[0] + 5.0 * x[1],
        (1, 0) => 3.0 + 4.0 * x[0] + 2.0 * x[1],
        (0, 1) => -1.0 + 2.0 * x[0] + 1.5 * x[1],
        _ => -2.0 + x[0] + 0.5 * x[1],
    };
    base + 2.0 * u[0] + 2.0 * u[1]
}

/// Effects `(dte1, dte0, ste1, ste0, ite)`.
pub fn true_values() -> (f64, f64, f64, f64, f64) {
    (7.0, 5.0, 3.0, 1.0, 2.0)
}

/// A draw together with its latent confounders and treatment cell probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentDraw {
    pub data: DyadDataset,
    pub u: Vec<[f64; 2]>,
    /// `(p11, p10, p01, p00)` per row.
    pub cells: Vec<[f64; 4]>,
}

pub fn generate(cfg: &DgpConfig) -> Result<DyadDataset> {
    generate_with_latent(cfg).map(|d| d.data)
}

pub fn generate_with_latent(cfg: &DgpConfig) -> Result<LatentDraw> {
    cfg.validate()?;
    let mut rng = stream_rng(cfg.seed, Stream::Dataset, 0);
    let mut err = stream_rng(cfg.seed, Stream::Errors, 0);
    let mut rows = Vec::with_capacity(cfg.n);
    let mut us = Vec::with_capacity(cfg.n);
    let mut cells = Vec::with_capacity(cfg.n);
    for _ in 0..cfg.n {
        let x = vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        // 1 - U[0,1) lies in (0, 1]
        let u = [
            0.5 * (1.0 - rng.random::<f64>()),
            0.5 * (1.0 - rng.random::<f64>()),
        ];
        let pz = instrument_prob(&x);
        let z1 = u8::from(rng.random::<f64>() < pz);
        let z2 = u8::from(rng.random::<f64>() < pz);
        let m1 = treatment_prob(z1, &x, &u);
        let m2 = treatment_prob(z2, &x, &u);
        let cell = [m1 * m2, m1 * (1.0 - m2), (1.0 - m1) * m2, (1.0 - m1) * (1.0 - m2)];
        let total: f64 = cell.iter().sum();
        assert!((total - 1.0).abs() < 1e-12, "treatment cell probabilities sum to {total}");
        let draw: f64 = rng.random();
        let (d1, d2) = if draw < cell[0] {
            (1, 1)
        } else if draw < cell[0] + cell[1] {
            (1, 0)
        } else if draw < cell[0] + cell[1] + cell[2] {
            (0, 1)
        } else {
            (0, 0)
        };
        let e1: f64 = err.sample(StandardNormal);
        let e2: f64 = err.sample(StandardNormal);
        let y1 = outcome_mean(d1, d2, &x, &u) + e1;
        let y2 = outcome_mean(d2, d1, &x, &u) + e2;
        rows.push(DyadRow {
            x,
            z1,
            z2,
            d1,
            d2,
            y1,
            y2: Some(y2),
        });
        us.push(u);
        cells.push(cell);
    }
    Ok(LatentDraw {
        data: DyadDataset::from_rows(rows)?,
        u: us,
        cells,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_n_rejected() {
        assert!(generate(&DgpConfig::new(50, 1)).is_err());
        assert!(generate(&DgpConfig::new(100, 1)).is_ok());
    }

    #[test]
    fn same_seed_same_data() {
        let a = generate(&DgpConfig::new(300, 42)).unwrap();
        let b = generate(&DgpConfig::new(300, 42)).unwrap();
        let c = generate(&DgpConfig::new(300, 43)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn latent_ranges_and_cells() {
        let d = generate_with_latent(&DgpConfig::new(2000, 3)).unwrap();
        assert!(d.u.iter().all(|u| u.iter().all(|&v| v > 0.0 && v <= 0.5)));
        for c in &d.cells {
            assert!((c.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert!(d.data.rows().all(|r| r.x.iter().all(|v| (-1.0..1.0).contains(v))));
    }

    #[test]
    fn instrument_mean_near_half() {
        let d = generate(&DgpConfig::new(100_000, 5)).unwrap();
        let m = d.z1().iter().map(|&z| f64::from(z)).sum::<f64>() / d.n() as f64;
        assert!((m - 0.5).abs() < 0.01, "{m}");
    }

    #[test]
    fn observed_outcome_is_selected_potential_outcome() {
        // Errors are drawn from their own stream: regenerate and subtract means.
        let d = generate_with_latent(&DgpConfig::new(500, 8)).unwrap();
        let mut err = stream_rng(8, Stream::Errors, 0);
        for (i, r) in d.data.rows().enumerate() {
            let e1: f64 = err.sample(StandardNormal);
            let e2: f64 = err.sample(StandardNormal);
            assert_eq!(r.y1, outcome_mean(r.d1, r.d2, &r.x, &d.u[i]) + e1);
            assert_eq!(r.y2.unwrap(), outcome_mean(r.d2, r.d1, &r.x, &d.u[i]) + e2);
        }
    }

    #[test]
    fn brute_force_truths() {
        // Average potential-outcome contrasts over many (X, U) draws.
        let mut rng = stream_rng(77, Stream::Dataset, 9);
        let m = 10_000_000;
        let mut acc = [0.0; 4];
        for _ in 0..m {
            let x = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            let u = [0.5 * (1.0 - rng.random::<f64>()), 0.5 * (1.0 - rng.random::<f64>())];
            acc[0] += outcome_mean(1, 1, &x, &u) - outcome_mean(0, 1, &x, &u);
            acc[1] += outcome_mean(1, 0, &x, &u) - outcome_mean(0, 0, &x, &u);
            acc[2] += outcome_mean(1, 1, &x, &u) - outcome_mean(1, 0, &x, &u);
            acc[3] += outcome_mean(0, 1, &x, &u) - outcome_mean(0, 0, &x, &u);
        }
        let (t1, t0, s1, s0, ite) = true_values();
        for (a, t) in acc.iter().zip([t1, t0, s1, s0]) {
            assert!((a / m as f64 - t).abs() < 0.01, "{} vs {t}", a / m as f64);
        }
        assert_eq!(ite, t1 - t0);
    }

    #[test]
    fn peer_treatment_margin_ignores_own_instrument() {
        // Within narrow (X, U) strata, D2 should not move with Z1.
        let d = generate_with_latent(&DgpConfig::new(200_000, 12)).unwrap();
        let mut cells = std::collections::HashMap::<(i32, i32, i32), [f64; 4]>::new();
        for (i, r) in d.data.rows().enumerate() {
            let key = (
                ((r.x[0] + 1.0) * 2.0) as i32,
                ((r.x[1] + 1.0) * 2.0) as i32,
                ((d.u[i][0] - d.u[i][1] + 0.5) * 2.0) as i32,
            );
            let c = cells.entry(key).or_default();
            let z = r.z1 as usize;
            c[2 * z] += f64::from(r.d2);
            c[2 * z + 1] += 1.0;
        }
        let mut num = 0.0;
        let mut var = 0.0;
        for c in cells.values() {
            if c[1] < 50.0 || c[3] < 50.0 {
                continue;
            }
            let (p0, p1) = (c[0] / c[1], c[2] / c[3]);
            num += p1 - p0;
            var += p0 * (1.0 - p0) / c[1] + p1 * (1.0 - p1) / c[3];
        }
        assert!(num.abs() < 4.0 * var.sqrt(), "{num} vs {}", var.sqrt());
    }
}
