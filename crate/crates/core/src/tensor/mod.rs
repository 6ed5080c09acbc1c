//! Dense tensors, trainable parameters, and reverse-mode differentiation.

pub mod check;
mod dense;
mod param;
mod tape;

pub use dense::Tensor;
pub use param::{ParamId, ParamStore, Parameter};
pub use tape::{BackwardReport, Gradients, Tape, Var};

/// Zeroes every gradient in `store`.
pub fn zero_gradients(store: &mut ParamStore) {
    store.zero_gradients();
}
