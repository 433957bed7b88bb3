//! Dense `f64` tensors, a reverse-mode tape with segment checkpointing, and
//! the small MLPs used as denoisers and classifiers.

mod dense;
mod mlp;
mod tape;

pub use dense::Tensor;
pub use mlp::{argmax_rows, Activation, Architecture, BoundMlp, Mlp};
pub use tape::{per_row_cross_entropy, Gradients, Segment, Tape, TapeMode, Var};
