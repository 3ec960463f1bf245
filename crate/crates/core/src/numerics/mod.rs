//! Dense tensors, reverse-mode differentiation and the training primitives
//! built on them.

mod gradcheck;
mod nn;
mod optim;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{
    grad_check, grad_check_named, grad_check_store, grad_check_surrogate, GradCheckOptions,
    GradCheckReport,
};
pub(crate) use nn::uniform;
pub use nn::{Activation, LayerNorm, Linear, Mlp};
pub use optim::Adam;
pub use params::{Bound, Dropout, ParamId, ParamStore};
pub use tape::{huber, Gradients, OpKind, Tape, Var};
pub use tensor::{broadcast_shape, Tensor};
