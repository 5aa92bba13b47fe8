//! Dense tensors, a reverse-mode tape, parameter storage and the layer library the
//! decoder is built from.

pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod optim;
pub mod params;
pub mod tensor;

pub use gradcheck::{grad_check, GradCheckOptions, GradReport};
pub use graph::{Graph, Var, Window};
pub use optim::AdamW;
pub use params::{Param, ParamStore};
pub use tensor::Tensor;
