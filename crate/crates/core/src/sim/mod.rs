//! Simulation design with known effects, its exact nuisance functions, and
//! the Monte Carlo harness.

pub mod dgp;
pub mod mc;
pub mod oracle;
