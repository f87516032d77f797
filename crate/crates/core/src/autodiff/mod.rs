//! Tensor algebra with reverse-mode differentiation.

mod gradcheck;
mod graph;
mod kernels;
mod params;

pub use gradcheck::{finite_difference_check, relative_error, GradCheckOptions, GradCheckReport, ParamCheck};
pub use graph::{Graph, Var, LEAKY_SLOPE};
pub use kernels::{conv2d, conv_transpose2d, dense};
pub use params::{ParamEntry, ParamStore};
