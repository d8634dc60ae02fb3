//! Dense tensors, reverse-mode autodiff, optimization and seeded randomness.

mod gradcheck;
mod graph;
mod linalg;
mod optim;
mod params;
mod rng;
mod tensor;

pub use gradcheck::{check_gradients, GradCheckConfig, GradCheckReport, Mismatch};
pub use graph::{Graph, Var};
pub use optim::{adamw_step, cosine_lr, AdamWConfig, OptimState};
pub use params::{Grads, ParamId, ParamStore};
pub use rng::Rng;
pub use tensor::Tensor;
