//! Random-matrix predictions for backdoor poisoning of high-dimensional ridge
//! regression, together with the Monte Carlo machinery used to check them.
//!
//! The crate is organised bottom-up:
//!
//! - [`mp`]: Marčenko–Pastur Stieltjes transforms on the negative real axis.
//! - [`theory`]: closed-form mean, variance, efficacy and alignment of the
//!   poisoned score, plus the auxiliary spike scalars and population moments.
//! - [`simulator`]: synthetic poisoned datasets and the exact centred ridge solve.
//! - [`resolvent`]: numerical checks of the spiked-resolvent deterministic
//!   equivalents, and [`woodbury`] for low-rank inverse updates.
//! - [`sweep`]: parameter grids, trial scheduling, aggregation and CSV output.
//! - [`mnist`]: IDX parsing and the 0-vs-1 backdoor experiment.
//! - [`report`]: SVG figures from sweep output.

pub mod error;
pub mod linalg;
pub mod mnist;
pub mod mp;
pub mod report;
pub mod resolvent;
pub mod rng;
pub mod simulator;
pub mod sweep;
pub mod theory;
pub mod woodbury;

pub use error::{Error, Result};
pub use mp::{AspectRatio, SpectralPoint, TransformValues};
pub use simulator::{Centering, RidgeSolution, SimShape};
pub use sweep::{AggregateRow, SweepGrid, SweepRecord};
pub use theory::{ModelParams, PopulationMoments, SpikeAuxiliary, TheoryPrediction};
