//! Dense tensors with reverse-mode differentiation, finite-difference
//! checking and a momentum SGD optimizer.

mod gradcheck;
mod params;
mod real;
mod sgd;
pub mod suite;
mod tape;
mod tensor;

pub use gradcheck::{gradient_check, relative_error, GradCheckOptions, GradCheckReport, Worst};
pub use params::{ParamId, ParamStore};
pub use real::Real;
pub use sgd::{Sgd, SgdConfig};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
