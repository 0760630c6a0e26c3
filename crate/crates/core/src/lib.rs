#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analytic;
pub mod diagnostics;
pub mod ensemble;
pub mod error;
pub mod family;
pub mod flow;
pub mod grid;
pub mod hjb;
pub mod mfg;
pub mod velocity;

pub use ensemble::{law_distance, wasserstein_1d, Ensemble, PairedEnsemble};
pub use error::{MfgError, Result};
pub use family::{HamiltonianFamily, LawFunction};
pub use velocity::solve_velocity;
