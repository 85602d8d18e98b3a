//! Causal peer effects from dyadic data with two instruments.
//!
//! Each dyad contributes covariates `X`, instruments `(Z1, Z2)`, binary
//! treatments `(D1, D2)` and outcomes `(Y1, Y2)`. The crate estimates
//!
//! * direct effects `E{Y1(1,d) - Y1(0,d)}`,
//! * spillover effects `E{Y1(d,1) - Y1(d,0)}`,
//! * the interaction effect (difference of the two direct effects),
//!
//! with Wald, IPW, g, regression, multiply robust and sieve-calibration
//! estimators. Spillover problems are reduced to direct-effect problems by
//! swapping the roles of the two units (see [`data::EstimandSpec::orient`]).
//!
//! ```
//! use dyadiv::prelude::*;
//!
//! let ds = generate(&DgpConfig::new(2000, 11)).unwrap();
//! let cfg = EstimationConfig::default();
//! let rep = estimate(&ds, &EstimandSpec::dte(1), Method::Mr, &cfg).unwrap();
//! assert!((rep.point - 7.0).abs() < 1.0);
//! ```

// NaN inputs must fail the range checks, which `!(x > 0.0)` expresses directly
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod error;
pub mod estimators;
pub mod inference;
pub mod linalg;
pub mod nuisance;
pub mod rng;
pub mod sieve;
pub mod sim;

pub use error::{Error, Result};

pub mod prelude {
    pub use crate::data::{
        load_csv, load_csv_any, swap_roles, write_csv, DyadDataset, DyadRow, Ego, EstimandSpec,
        Target,
    };
    pub use crate::error::{Error, Result};
    pub use crate::estimators::{estimate, estimate_ite, EstimateReport, EstimationConfig, IteMode, Method};
    pub use crate::inference::{bootstrap, plugin_ci, BootstrapConfig, BootstrapResult};
    pub use crate::nuisance::{fit_all, Learner, NuisanceConfig, NuisanceSet};
    pub use crate::sieve::BasisSpec;
    pub use crate::sim::dgp::{generate, true_values, DgpConfig};
}
