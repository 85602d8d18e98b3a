//! Observed dyadic data, estimand specification and the ego/peer role swap.
//!
//! A dataset stores one row per dyad: covariates `x`, the two binary
//! instruments `z1, z2`, the two binary treatments `d1, d2`, the ego outcome
//! `y1` and (optionally) the peer outcome `y2`. Storage is columnar; a
//! constructed [`DyadDataset`] is never mutated.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One observed dyad.
#[derive(Debug, Clone, PartialEq)]
pub struct DyadRow {
    pub x: Vec<f64>,
    pub z1: u8,
    pub z2: u8,
    pub d1: u8,
    pub d2: u8,
    pub y1: f64,
    pub y2: Option<f64>,
}

/// Immutable collection of dyads sharing one covariate dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct DyadDataset {
    p: usize,
    x: Vec<f64>,
    z1: Vec<u8>,
    z2: Vec<u8>,
    d1: Vec<u8>,
    d2: Vec<u8>,
    y1: Vec<f64>,
    y2: Option<Vec<f64>>,
}

fn check_binary(v: u8, name: &str, row: usize) -> Result<()> {
    if v > 1 {
        return Err(Error::Schema(format!(
            "row {row}: `{name}` must be 0 or 1, found {v}"
        )));
    }
    Ok(())
}

impl DyadDataset {
    /// Builds a dataset from rows. Either every row carries `y2` or none does.
    pub fn from_rows(rows: Vec<DyadRow>) -> Result<Self> {
        let Some(first) = rows.first() else {
            return Err(Error::Schema("dataset has no rows".into()));
        };
        let p = first.x.len();
        let with_y2 = first.y2.is_some();
        let n = rows.len();
        let mut ds = DyadDataset {
            p,
            x: Vec::with_capacity(n * p),
            z1: Vec::with_capacity(n),
            z2: Vec::with_capacity(n),
            d1: Vec::with_capacity(n),
            d2: Vec::with_capacity(n),
            y1: Vec::with_capacity(n),
            y2: with_y2.then(|| Vec::with_capacity(n)),
        };
        for (i, r) in rows.into_iter().enumerate() {
            if r.x.len() != p {
                return Err(Error::Schema(format!(
                    "row {i}: expected {p} covariates, found {}",
                    r.x.len()
                )));
            }
            check_binary(r.z1, "z1", i)?;
            check_binary(r.z2, "z2", i)?;
            check_binary(r.d1, "d1", i)?;
            check_binary(r.d2, "d2", i)?;
            if !r.y1.is_finite() || r.x.iter().any(|v| !v.is_finite()) {
                return Err(Error::Schema(format!("row {i}: non-finite value")));
            }
            match (&mut ds.y2, r.y2) {
                (Some(col), Some(v)) if v.is_finite() => col.push(v),
                (Some(_), Some(_)) => {
                    return Err(Error::Schema(format!("row {i}: non-finite y2")))
                }
                (None, None) => {}
                _ => {
                    return Err(Error::Schema(format!(
                        "row {i}: y2 must be present on every row or on none"
                    )))
                }
            }
            ds.x.extend_from_slice(&r.x);
            ds.z1.push(r.z1);
            ds.z2.push(r.z2);
            ds.d1.push(r.d1);
            ds.d2.push(r.d2);
            ds.y1.push(r.y1);
        }
        Ok(ds)
    }

    pub fn n(&self) -> usize {
        self.y1.len()
    }

    pub fn covariate_dim(&self) -> usize {
        self.p
    }

    pub fn x_row(&self, i: usize) -> &[f64] {
        &self.x[i * self.p..(i + 1) * self.p]
    }

    pub fn z1(&self) -> &[u8] {
        &self.z1
    }

    pub fn z2(&self) -> &[u8] {
        &self.z2
    }

    pub fn d1(&self) -> &[u8] {
        &self.d1
    }

    pub fn d2(&self) -> &[u8] {
        &self.d2
    }

    pub fn y1(&self) -> &[f64] {
        &self.y1
    }

    pub fn y2(&self) -> Option<&[f64]> {
        self.y2.as_deref()
    }

    pub fn has_y2(&self) -> bool {
        self.y2.is_some()
    }

    pub fn row(&self, i: usize) -> DyadRow {
        DyadRow {
            x: self.x_row(i).to_vec(),
            z1: self.z1[i],
            z2: self.z2[i],
            d1: self.d1[i],
            d2: self.d2[i],
            y1: self.y1[i],
            y2: self.y2.as_ref().map(|c| c[i]),
        }
    }

    pub fn rows(&self) -> impl Iterator<Item = DyadRow> + '_ {
        (0..self.n()).map(|i| self.row(i))
    }

    /// New dataset made of the rows at `idx` (repeats allowed), in that order.
    pub fn select(&self, idx: &[usize]) -> DyadDataset {
        let p = self.p;
        let mut x = Vec::with_capacity(idx.len() * p);
        for &i in idx {
            x.extend_from_slice(self.x_row(i));
        }
        let pick_u8 = |c: &[u8]| idx.iter().map(|&i| c[i]).collect::<Vec<_>>();
        let pick_f = |c: &[f64]| idx.iter().map(|&i| c[i]).collect::<Vec<_>>();
        DyadDataset {
            p,
            x,
            z1: pick_u8(&self.z1),
            z2: pick_u8(&self.z2),
            d1: pick_u8(&self.d1),
            d2: pick_u8(&self.d2),
            y1: pick_f(&self.y1),
            y2: self.y2.as_deref().map(pick_f),
        }
    }

    /// Copy with `z2` appended as an extra covariate column.
    pub fn with_z2_as_covariate(&self) -> DyadDataset {
        let p = self.p + 1;
        let mut x = Vec::with_capacity(self.n() * p);
        for i in 0..self.n() {
            x.extend_from_slice(self.x_row(i));
            x.push(f64::from(self.z2[i]));
        }
        DyadDataset {
            p,
            x,
            ..self.clone()
        }
    }

    /// Copy with the ego outcome multiplied by `c` (and the peer outcome, if present).
    pub fn with_scaled_outcomes(&self, c: f64) -> DyadDataset {
        DyadDataset {
            y1: self.y1.iter().map(|v| v * c).collect(),
            y2: self.y2.as_ref().map(|col| col.iter().map(|v| v * c).collect()),
            ..self.clone()
        }
    }

    /// Copy with `y1` and `y2` exchanged, treatments and instruments untouched.
    fn with_outcomes_exchanged(&self) -> Result<DyadDataset> {
        let y2 = self.y2.clone().ok_or_else(missing_y2)?;
        Ok(DyadDataset {
            y1: y2,
            y2: Some(self.y1.clone()),
            ..self.clone()
        })
    }

    /// Empirical overlap: both arms of each instrument must be observed.
    pub fn check_overlap(&self) -> Result<()> {
        let n = self.n() as f64;
        for (name, col) in [("z1", &self.z1), ("z2", &self.z2)] {
            let m = col.iter().map(|&v| f64::from(v)).sum::<f64>() / n;
            if m <= 0.0 || m >= 1.0 {
                return Err(Error::Precondition(format!(
                    "overlap violated: mean({name}) = {m}, both instrument arms must be non-empty"
                )));
            }
        }
        Ok(())
    }

    /// Range (max - min) of the ego outcome.
    pub fn outcome_range(&self) -> f64 {
        let (lo, hi) = self
            .y1
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            });
        hi - lo
    }
}

fn missing_y2() -> Error {
    Error::Precondition("peer outcome y2 is required for a role swap but is absent".into())
}

/// Exchanges the ego and peer roles on every row: `(z1, d1, y1) <-> (z2, d2, y2)`.
pub fn swap_roles(ds: &DyadDataset) -> Result<DyadDataset> {
    let y2 = ds.y2.clone().ok_or_else(missing_y2)?;
    Ok(DyadDataset {
        p: ds.p,
        x: ds.x.clone(),
        z1: ds.z2.clone(),
        z2: ds.z1.clone(),
        d1: ds.d2.clone(),
        d2: ds.d1.clone(),
        y1: y2,
        y2: Some(ds.y1.clone()),
    })
}

/// Which causal contrast is targeted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Target {
    /// Effect of the ego's treatment on the ego's outcome, peer treatment held at `d`.
    Dte,
    /// Effect of the peer's treatment on the ego's outcome, ego treatment held at `d`.
    Ste,
    /// Difference of the two direct effects.
    Ite,
}

/// Which unit of the dyad plays the ego.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Ego {
    Unit1,
    Unit2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct EstimandSpec {
    pub target: Target,
    /// Level `d` at which the other treatment is held. Ignored for ITE.
    pub level: u8,
    pub ego: Ego,
}

impl EstimandSpec {
    pub fn dte(level: u8) -> Self {
        Self {
            target: Target::Dte,
            level,
            ego: Ego::Unit1,
        }
    }

    pub fn ste(level: u8) -> Self {
        Self {
            target: Target::Ste,
            level,
            ego: Ego::Unit1,
        }
    }

    pub fn ite() -> Self {
        Self {
            target: Target::Ite,
            level: 1,
            ego: Ego::Unit1,
        }
    }

    pub fn with_ego(self, ego: Ego) -> Self {
        Self { ego, ..self }
    }

    /// The four dyadic estimands with unit 1 as ego, in reporting order.
    pub fn all_four() -> [EstimandSpec; 4] {
        [
            EstimandSpec::dte(1),
            EstimandSpec::dte(0),
            EstimandSpec::ste(1),
            EstimandSpec::ste(0),
        ]
    }

    /// Canonical direct-effect problem for this estimand.
    ///
    /// The returned dataset is arranged so the contrast of interest is the
    /// effect of `d1` on `y1` with `d2` held at `level`:
    ///
    /// | target | ego | construction |
    /// |--------|-----|--------------|
    /// | DTE    | 1   | unchanged |
    /// | DTE    | 2   | `swap_roles(ds)` |
    /// | STE    | 1   | `swap_roles(ds)` scored on the original ego's outcome |
    /// | STE    | 2   | outcomes exchanged only |
    ///
    /// ITE resolves like DTE (both levels are then estimated on the same view).
    pub fn orient(&self, ds: &DyadDataset) -> Result<DyadDataset> {
        if self.level > 1 {
            return Err(Error::Config(format!("level must be 0 or 1, got {}", self.level)));
        }
        match (self.target, self.ego) {
            (Target::Dte | Target::Ite, Ego::Unit1) => Ok(ds.clone()),
            (Target::Dte | Target::Ite, Ego::Unit2) => swap_roles(ds),
            (Target::Ste, Ego::Unit1) => swap_roles(ds)?.with_outcomes_exchanged(),
            (Target::Ste, Ego::Unit2) => ds.with_outcomes_exchanged(),
        }
    }

    /// The direct-effect estimand at `level` that this spec resolves to after `orient`.
    pub fn as_direct(&self, level: u8) -> EstimandSpec {
        EstimandSpec {
            target: Target::Dte,
            level,
            ego: Ego::Unit1,
        }
    }
}

impl fmt::Display for EstimandSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let base = match self.target {
            Target::Dte => format!("dte{}", self.level),
            Target::Ste => format!("ste{}", self.level),
            Target::Ite => "ite".to_string(),
        };
        match self.ego {
            Ego::Unit1 => f.write_str(&base),
            Ego::Unit2 => write!(f, "{base}@ego2"),
        }
    }
}

impl FromStr for EstimandSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "dte1" => Ok(EstimandSpec::dte(1)),
            "dte0" => Ok(EstimandSpec::dte(0)),
            "ste1" => Ok(EstimandSpec::ste(1)),
            "ste0" => Ok(EstimandSpec::ste(0)),
            "ite" => Ok(EstimandSpec::ite()),
            other => Err(Error::Config(format!(
                "unknown estimand `{other}` (expected dte1|dte0|ste1|ste0|ite)"
            ))),
        }
    }
}

/// Per-row sign and weight terms of the direct-effect moment at `spec.level`.
///
/// Returns `(s, w_num, w_den)` with `s = (-1)^(1 - z1)`, `w_num = I(d2 = d) * y1`
/// and `w_den = d1 * I(d2 = d)`. The row must already be in canonical
/// (ego = unit 1, direct effect) form.
pub fn signed_indicator_terms(row: &DyadRow, spec: &EstimandSpec) -> (f64, f64, f64) {
    let s = if row.z1 == 1 { 1.0 } else { -1.0 };
    let ind = if row.d2 == spec.level { 1.0 } else { 0.0 };
    (s, ind * row.y1, f64::from(row.d1) * ind)
}

// ---------------------------------------------------------------------------
// CSV
// ---------------------------------------------------------------------------

const FIXED_COLUMNS: [&str; 5] = ["z1", "z2", "d1", "d2", "y1"];

fn parse_header(headers: &csv::StringRecord, has_y2: Option<bool>) -> Result<(usize, bool)> {
    let names: Vec<&str> = headers.iter().map(str::trim).collect();
    let p = names
        .iter()
        .take_while(|n| n.starts_with('x') && n[1..].parse::<usize>().is_ok())
        .count();
    for (j, name) in names.iter().take(p).enumerate() {
        if *name != format!("x{}", j + 1) {
            return Err(Error::Schema(format!(
                "covariate columns must be x1..xp in order; column {} is `{name}`",
                j + 1
            )));
        }
    }
    let rest = &names[p..];
    let with_y2 = match rest {
        r if r == FIXED_COLUMNS => false,
        [a @ .., "y2"] if a == FIXED_COLUMNS => true,
        _ => {
            return Err(Error::Schema(format!(
                "header must be x1..xp,z1,z2,d1,d2,y1[,y2]; found `{}`",
                names.join(",")
            )))
        }
    };
    match has_y2 {
        Some(true) if !with_y2 => Err(Error::Schema("expected a y2 column".into())),
        Some(false) if with_y2 => Err(Error::Schema("unexpected y2 column".into())),
        _ => Ok((p, with_y2)),
    }
}

/// Reads a dataset from CSV. `has_y2 = None` accepts either layout.
pub fn read_csv<R: Read>(reader: R, has_y2: Option<bool>) -> Result<DyadDataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let (p, with_y2) = parse_header(&headers, has_y2)?;
    let width = p + 5 + usize::from(with_y2);

    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |pos| pos.line());
            Error::Parse {
                line,
                msg: e.to_string(),
            }
        })?;
        let line = rec.position().map_or(0, |pos| pos.line());
        if rec.len() != width {
            return Err(Error::Schema(format!(
                "line {line}: expected {width} fields, found {}",
                rec.len()
            )));
        }
        let real = |j: usize| -> Result<f64> {
            let raw = &rec[j];
            raw.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::Parse {
                    line,
                    msg: format!("column `{}`: cannot parse `{raw}` as a finite number", &headers[j]),
                })
        };
        let binary = |j: usize| -> Result<u8> {
            let v = real(j)?;
            if v == 0.0 {
                Ok(0)
            } else if v == 1.0 {
                Ok(1)
            } else {
                Err(Error::Domain {
                    line,
                    column: headers[j].trim().to_string(),
                    value: rec[j].to_string(),
                })
            }
        };
        let x = (0..p).map(real).collect::<Result<Vec<_>>>()?;
        rows.push(DyadRow {
            x,
            z1: binary(p)?,
            z2: binary(p + 1)?,
            d1: binary(p + 2)?,
            d2: binary(p + 3)?,
            y1: real(p + 4)?,
            y2: if with_y2 { Some(real(p + 5)?) } else { None },
        });
    }
    if rows.is_empty() {
        return Err(Error::Schema("CSV has a header but no data rows".into()));
    }
    DyadDataset::from_rows(rows)
}

/// Loads and validates a dataset file.
pub fn load_csv(path: impl AsRef<Path>, has_y2: bool) -> Result<DyadDataset> {
    let f = std::fs::File::open(path)?;
    read_csv(std::io::BufReader::new(f), Some(has_y2))
}

/// Loads a dataset file, accepting it with or without a `y2` column.
pub fn load_csv_any(path: impl AsRef<Path>) -> Result<DyadDataset> {
    let f = std::fs::File::open(path)?;
    read_csv(std::io::BufReader::new(f), None)
}

/// Writes the dataset in the same layout `read_csv` accepts. Floats use the
/// shortest representation that round-trips exactly.
pub fn write_csv<W: Write>(ds: &DyadDataset, mut out: W) -> Result<()> {
    let mut header: Vec<String> = (1..=ds.p).map(|j| format!("x{j}")).collect();
    header.extend(FIXED_COLUMNS.iter().map(|s| s.to_string()));
    if ds.has_y2() {
        header.push("y2".into());
    }
    writeln!(out, "{}", header.join(","))?;
    let mut line = String::new();
    for i in 0..ds.n() {
        line.clear();
        for v in ds.x_row(i) {
            line.push_str(&format!("{v},"));
        }
        line.push_str(&format!(
            "{},{},{},{},{}",
            ds.z1[i], ds.z2[i], ds.d1[i], ds.d2[i], ds.y1[i]
        ));
        if let Some(y2) = &ds.y2 {
            line.push_str(&format!(",{}", y2[i]));
        }
        writeln!(out, "{line}")?;
    }
    Ok(())
}
