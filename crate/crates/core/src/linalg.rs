//! Row-major design matrices and the small dense solves used by the fitters.

use nalgebra::{DMatrix, DVector};

use crate::data::DyadDataset;
use crate::error::{Error, Result};

/// Which regressors enter the parametric index `xi' x~`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IndexBasis {
    /// `x~ = 1`: every index function is a constant.
    InterceptOnly,
    /// `x~ = (1, x)`.
    #[default]
    InterceptPlusX,
}

impl IndexBasis {
    pub fn dim(self, p: usize) -> usize {
        match self {
            IndexBasis::InterceptOnly => 1,
            IndexBasis::InterceptPlusX => p + 1,
        }
    }
}

/// Dense `n x k` matrix stored row by row.
#[derive(Debug, Clone, PartialEq)]
pub struct Design {
    n: usize,
    k: usize,
    data: Vec<f64>,
}

impl Design {
    pub fn new(n: usize, k: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * k {
            return Err(Error::Schema(format!(
                "design data has {} entries, expected {n} x {k}",
                data.len()
            )));
        }
        Ok(Design { n, k, data })
    }

    /// Index regressors for every row of `ds`.
    pub fn index(ds: &DyadDataset, basis: IndexBasis) -> Design {
        let n = ds.n();
        let k = basis.dim(ds.covariate_dim());
        let mut data = Vec::with_capacity(n * k);
        for i in 0..n {
            data.push(1.0);
            if k > 1 {
                data.extend_from_slice(ds.x_row(i));
            }
        }
        Design { n, k, data }
    }

    pub fn nrows(&self) -> usize {
        self.n
    }

    pub fn ncols(&self) -> usize {
        self.k
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.k..(i + 1) * self.k]
    }

    /// Rows for which `keep` is true, in order.
    pub fn filter(&self, keep: impl Fn(usize) -> bool) -> Design {
        let mut data = Vec::new();
        let mut n = 0;
        for i in 0..self.n {
            if keep(i) {
                data.extend_from_slice(self.row(i));
                n += 1;
            }
        }
        Design { n, k: self.k, data }
    }

    pub fn to_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.n, self.k, &self.data)
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Linear index `coef' x` using the leading `coef.len()` entries of `(1, x)`.
#[inline]
pub(crate) fn index_value(coef: &[f64], x: &[f64]) -> f64 {
    let mut v = coef[0];
    for (c, xv) in coef[1..].iter().zip(x) {
        v += c * xv;
    }
    v
}

/// `sum_i w_i x_i x_i'` over the rows of `d`.
pub(crate) fn weighted_gram(d: &Design, w: &[f64]) -> DMatrix<f64> {
    let k = d.k;
    let mut acc = vec![0.0; k * k];
    if k == 0 {
        return DMatrix::zeros(0, 0);
    }
    for (r, &wi) in d.data.chunks_exact(k).zip(w) {
        if wi == 0.0 {
            continue;
        }
        for (a, &xa) in r.iter().enumerate() {
            let ra = wi * xa;
            for (dst, &xb) in acc[a * k + a..(a + 1) * k].iter_mut().zip(&r[a..]) {
                *dst += ra * xb;
            }
        }
    }
    for a in 0..k {
        for b in 0..a {
            acc[a * k + b] = acc[b * k + a];
        }
    }
    DMatrix::from_row_slice(k, k, &acc)
}

/// `sum_i v_i x_i` over the rows of `d`.
pub(crate) fn weighted_sum(d: &Design, v: &[f64]) -> DVector<f64> {
    let mut acc = vec![0.0; d.k];
    if d.k > 0 {
        for (r, &vi) in d.data.chunks_exact(d.k).zip(v) {
            if vi == 0.0 {
                continue;
            }
            for (dst, x) in acc.iter_mut().zip(r) {
                *dst += vi * x;
            }
        }
    }
    DVector::from_vec(acc)
}

const COND_LIMIT: f64 = 1e-13;

fn check_conditioning(a: &DMatrix<f64>, what: &str) -> Result<()> {
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::Singular(format!("{what}: non-finite entries")));
    }
    let sv = a.singular_values();
    let max = sv.max();
    let min = sv.min();
    if max == 0.0 || min / max < COND_LIMIT {
        return Err(Error::Singular(format!(
            "{what}: reciprocal condition number {:.2e}; use a smaller basis",
            if max == 0.0 { 0.0 } else { min / max }
        )));
    }
    Ok(())
}

/// Solves `a x = b` for symmetric positive definite `a`.
pub(crate) fn solve_spd(a: DMatrix<f64>, b: &DVector<f64>, what: &str) -> Result<DVector<f64>> {
    check_conditioning(&a, what)?;
    match a.clone().cholesky() {
        Some(ch) => Ok(ch.solve(b)),
        None => solve_general(a, b, what),
    }
}

/// Solves a square system by partial-pivot LU after a conditioning check.
pub(crate) fn solve_general(a: DMatrix<f64>, b: &DVector<f64>, what: &str) -> Result<DVector<f64>> {
    check_conditioning(&a, what)?;
    a.lu()
        .solve(b)
        .ok_or_else(|| Error::Singular(what.to_string()))
}
