//! Small reverse-mode autodiff engine for the markupdm models.
//!
//! Everything runs on the CPU, single-threaded and in a fixed reduction
//! order, so results are reproducible bit-for-bit for a given input. Tensors
//! are generic over [`Float`]: models train in `f32`, gradient checks run the
//! same code in `f64`.

mod float;
mod graph;
mod optim;
mod params;
mod tensor;

pub mod gradcheck;
pub mod kernels;
pub mod layers;

pub use float::Float;
pub use graph::{Grads, Graph, Segment, Var};
pub use optim::{global_norm, Adam, AdamConfig};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;
