//! Exact nuisance functions of the simulation design.
//!
//! Conditional expectations over the latent `U ~ U(0, 0.5]^2` are computed by
//! tensor Gauss-Legendre quadrature; the integrands are smooth in `U`, so a
//! 12-point rule per axis is accurate to rounding.

use crate::data::{DyadDataset, EstimandSpec, Target};
use crate::error::{Error, Result};
use crate::nuisance::NuisanceSet;
use crate::sim::dgp::{instrument_prob, outcome_mean, treatment_prob};

/// Nodes and weights of the `m`-point Gauss-Legendre rule on `[-1, 1]`.
pub fn gauss_legendre(m: usize) -> Vec<(f64, f64)> {
    let mut out = Vec::with_capacity(m);
    for i in 0..m {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (m as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            // Legendre recurrence for P_m(x) and its derivative.
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=m {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            dp = m as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        out.push((x, 2.0 / ((1.0 - x * x) * dp * dp)));
    }
    out
}

/// Quadrature rule for the expectation over `U`.
#[derive(Debug, Clone)]
pub struct LatentRule {
    nodes: Vec<([f64; 2], f64)>,
}

impl LatentRule {
    pub fn new(m: usize) -> Self {
        let gl = gauss_legendre(m);
        let mut nodes = Vec::with_capacity(m * m);
        for &(a, wa) in &gl {
            for &(b, wb) in &gl {
                // map [-1, 1] to (0, 0.5]; density of U is 4 on the square
                nodes.push(([0.25 * (a + 1.0), 0.25 * (b + 1.0)], wa * wb / 4.0));
            }
        }
        LatentRule { nodes }
    }

    pub fn expect(&self, f: impl Fn(&[f64; 2]) -> f64) -> f64 {
        self.nodes.iter().map(|(u, w)| w * f(u)).sum()
    }
}

impl Default for LatentRule {
    fn default() -> Self {
        LatentRule::new(12)
    }
}

/// True nuisance values at one covariate point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrueNuisance {
    pub pi1: f64,
    pub mu: f64,
    pub eta: f64,
    pub delta: f64,
    pub omega: f64,
    /// `E[Y1 I | Z1 = 1, x]`, for checking the Wald-ratio identity.
    pub eta_treated: f64,
}

/// Nuisances of the canonical problem obtained by orienting `spec`.
///
/// The design is symmetric in the two units, so the ego choice does not
/// matter; for spillover effects the canonical treatment is the peer's and
/// the outcome surface has its arguments exchanged.
pub fn true_nuisance(spec: &EstimandSpec, x: &[f64], rule: &LatentRule) -> Result<TrueNuisance> {
    let d = spec.level;
    let h = |a: u8, b: u8, u: &[f64; 2]| match spec.target {
        Target::Dte | Target::Ite => outcome_mean(a, b, x, u),
        Target::Ste => outcome_mean(b, a, x, u),
    };
    if spec.target == Target::Ite {
        return Err(Error::Config("interaction effects have one nuisance set per level".into()));
    }
    let pz = instrument_prob(x);
    // One pass over the nodes: [mu1, eta1, mu0, eta0, omega].
    let mut acc = [0.0; 5];
    for (u, w) in &rule.nodes {
        let m1 = treatment_prob(1, x, u);
        let m0 = treatment_prob(0, x, u);
        // P(canonical d2 = d | x, u), marginal over the peer instrument.
        let p = pz * m1 + (1.0 - pz) * m0;
        let q = if d == 1 { p } else { 1.0 - p };
        let (h1, h0) = (h(1, d, u), h(0, d, u));
        acc[0] += w * m1 * q;
        acc[1] += w * q * (m1 * h1 + (1.0 - m1) * h0);
        acc[2] += w * m0 * q;
        acc[3] += w * q * (m0 * h1 + (1.0 - m0) * h0);
        acc[4] += w * (h1 - h0);
    }
    let [mu1, eta1, mu0, eta0, omega] = acc;
    Ok(TrueNuisance {
        pi1: pz,
        mu: mu0,
        eta: eta0,
        delta: mu1 - mu0,
        omega,
        eta_treated: eta1,
    })
}

/// Per-row true nuisances for `spec` on a dataset drawn from the design,
/// aligned with `spec.orient(ds)`.
pub fn true_nuisance_set(ds: &DyadDataset, spec: &EstimandSpec, trim_eps: f64) -> Result<NuisanceSet> {
    let rule = LatentRule::default();
    let n = ds.n();
    let mut cols: [Vec<f64>; 5] = Default::default();
    for i in 0..n {
        let t = true_nuisance(spec, ds.x_row(i), &rule)?;
        for (c, v) in cols.iter_mut().zip([t.pi1, t.mu, t.eta, t.delta, t.omega]) {
            c.push(v);
        }
    }
    let [pi1, mu, eta, delta, omega] = cols;
    NuisanceSet::from_values(pi1, mu, eta, delta, omega, trim_eps)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gauss_legendre_integrates_polynomials() {
        let gl = gauss_legendre(12);
        let w: f64 = gl.iter().map(|(_, w)| w).sum();
        assert!((w - 2.0).abs() < 1e-14);
        let x22: f64 = gl.iter().map(|(x, w)| w * x.powi(22)).sum();
        assert!((x22 - 2.0 / 23.0).abs() < 1e-14);
    }

    #[test]
    fn latent_mean() {
        let r = LatentRule::default();
        assert!((r.expect(|_| 1.0) - 1.0).abs() < 1e-14);
        assert!((r.expect(|u| u[0]) - 0.25).abs() < 1e-14);
    }

    #[test]
    fn omega_is_linear_effect_surface() {
        let r = LatentRule::default();
        for x in [[0.3, -0.7], [-1.0, 1.0], [0.0, 0.0]] {
            let t = true_nuisance(&EstimandSpec::dte(1), &x, &r).unwrap();
            assert!((t.omega - (7.0 + 4.0 * x[0] + 3.5 * x[1])).abs() < 1e-12);
            let t = true_nuisance(&EstimandSpec::ste(0), &x, &r).unwrap();
            assert!((t.omega - (1.0 + x[0] + x[1])).abs() < 1e-12);
        }
    }

    #[test]
    fn conditional_wald_ratio_equals_effect() {
        // The design satisfies the identifying conditions: the conditional
        // Wald ratio equals the conditional effect at every x.
        let r = LatentRule::default();
        for spec in EstimandSpec::all_four() {
            for x in [[0.5, 0.5], [-0.8, 0.1], [0.9, -0.9]] {
                let t = true_nuisance(&spec, &x, &r).unwrap();
                let ratio = (t.eta_treated - t.eta) / t.delta;
                assert!((ratio - t.omega).abs() < 1e-10, "{spec} {x:?}: {ratio} vs {}", t.omega);
            }
        }
    }
}
