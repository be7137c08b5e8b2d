//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records each forward operation together with the information
//! its backward rule needs, then replays the record in reverse to accumulate
//! gradients into every `requires_grad` leaf. The op vocabulary is small but
//! sufficient for a fully-connected encoder, normalized-prototype cosine
//! heads, stabilized softmax/BCE losses, and a gradient reversal layer.

mod gradcheck;
mod tape;

pub use gradcheck::{
    finite_difference_check, finite_difference_check_with_oracle, FdCheckConfig, FdParamReport,
    FdReport,
};
pub use tape::{OpKind, Parameter, Precision, Tape, Tensor, TensorId};
