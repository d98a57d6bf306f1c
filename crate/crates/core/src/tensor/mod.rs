//! Dense tensors with a reverse-mode gradient tape.
//!
//! Values live on a [`Tape`]; a [`Tensor`] is a cheap handle to one of them.
//! Build a fresh tape per forward pass, call [`Tape::backward`] once on a
//! scalar loss, then read leaf gradients with [`Tape::grad`].

mod array;
mod kernels;
mod recurrent;
mod tape;

pub use array::Array;
pub use recurrent::{bilstm, lstm, LstmWeights};
pub use tape::{sigmoid, Tape, Tensor, PROB_EPS};
