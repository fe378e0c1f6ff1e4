//! Dense tensors, reverse-mode differentiation, parameters and seeded randomness.

mod array;
mod gradcheck;
mod params;
mod rng;
mod tape;

pub use array::Tensor;
pub use gradcheck::{check_all_ops, grad_check, grad_check_params, relative_error, GradCheckReport, REL_ERR_FLOOR};
pub use params::{Graph, Param, ParamGrads, ParamGroup, ParamId, ParamStore};
pub use rng::{Rng, RngState};
pub use tape::{sigmoid, Tape, Var, PROB_EPS};
