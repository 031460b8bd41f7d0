//! Desk-scale testbed for randomized patch-wise purification defenses.
//!
//! The crate provides, in dependency order:
//!
//! - a small tensor library with tape-based reverse-mode differentiation,
//! - toy image classifiers and datasets,
//! - white-box attacks used to manufacture purifier training data,
//! - purifier models, purifier pools and the randomized patch-wise and
//!   ensemble inference schemes,
//! - a query-counting defended oracle plus five query-based black-box
//!   attacks,
//! - estimation tools for smoothed losses, Lipschitz constants and the
//!   convergence/sign-flip bounds that motivate the defense.

pub mod attacks;
pub mod dataset;
pub mod error;
pub mod models;
pub mod oracle;
pub mod params;
pub mod purify;
pub mod rng;
pub mod tensor;
pub mod theory;
pub mod whitebox;

pub use error::{Error, Result};
pub use rng::Stream;
pub use tensor::{Gradients, Op, Tape, Tensor, TensorId};
