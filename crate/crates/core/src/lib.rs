//! Two-type Galton-Watson processes with immigration: exact laws via truncated
//! generating functions, seeded Monte Carlo, and decay-rate fits for deviation
//! probabilities.

#![allow(clippy::needless_range_loop, clippy::too_many_arguments, clippy::neg_cmp_op_on_partial_ord)]

pub mod devlab;
pub mod error;
pub mod events;
pub mod fixtures;
pub mod model;
pub mod pgf;
pub mod series;
pub mod simulate;
pub mod spectral;

pub use error::{Error, Result};
pub use events::Statistic;
pub use model::{ModelSpec, Pmf2};
pub use spectral::SpectralData;
