//! Dense tensors, the kernels every architecture needs, and reverse-mode
//! differentiation over them.

pub mod gradcheck;
pub mod kernels;
pub mod param;
pub mod tape;
pub mod tensor;

pub use kernels::{Activation, ChannelLayout, Pads};
pub use param::{ParamId, ParamKind, ParamStore, Parameter};
pub use tape::{Grads, Padding, Tape, Var};
pub use tensor::{DType, Real, Tensor};
