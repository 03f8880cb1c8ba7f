//! Reverse-mode differentiation over dense row-major arrays, with the
//! optimizer, schedule and clipping primitives used by training.

pub mod attention;
mod graph;
pub mod optim;
mod real;
mod tensor;

pub use attention::AttnSegment;
pub use graph::{softmax_in_place, Graph, Reduction, Var};
pub use optim::{clip_global_norm, global_norm, AdamWConfig, LrSchedule, OptimizerState};
pub use real::{gemm, MatMut, MatRef, Real};
pub use tensor::Tensor;
