//! Dense arrays, reverse-mode differentiation, layers and optimization.

mod array;
pub mod gradcheck;
pub mod layers;
pub mod optim;
mod params;
pub mod tape;

pub use array::{linear_forward, softmax_rows, Array, Real};
pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use layers::{Linear, Lstm};
pub use optim::{Adam, AdamConfig, AdamState, PlateauScheduler};
pub use params::{ParamId, ParamStore, Parameter};
pub use tape::{Gradients, Tape, Var};
