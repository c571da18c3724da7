//! Dense f64 tensors, reverse-mode differentiation, and optimization.

pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;

pub use optim::AdamW;
pub use params::{ParamId, ParameterStore};
pub use tape::{NodeId, Tape};
pub use tensor::Tensor;
