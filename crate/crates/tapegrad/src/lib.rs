//! Dense f64 tensors with a recorded-operation tape for reverse-mode
//! differentiation. Gradients can be taken with respect to any leaf marked
//! `requires_grad`, which covers both model parameters and inputs that are
//! themselves being optimized.
//!
//! Storage is row-major and shapes are explicit; there is no implicit
//! broadcasting beyond the dedicated `add_row_bias` / `repeat_rows` ops.

mod gradcheck;
mod optim;
mod params;
mod tape;

pub use gradcheck::{grad_check, GradCheckReport};
pub use optim::{Adam, AdamState, AdamW, CosineAnnealing};
pub use params::{load_named_tensors, save_named_tensors, NdArray, ParamSet};
pub use tape::{GruParams, Tape, TensorError, TensorId};
