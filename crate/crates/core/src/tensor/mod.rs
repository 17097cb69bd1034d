//! Dense arrays with reverse-mode automatic differentiation.
//!
//! Only the ops the denoiser and its auxiliary losses need are provided.
//! Broadcasting is limited to adding a bias row over the last dimension;
//! anything else goes through an explicit op such as [`repeat_row`].

mod adam;
mod array;
mod params;
mod tape;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use array::NdArray;
pub use params::{repeat_row, Bound, Init, Linear, ParamId, ParamSet};
pub use tape::{Gradients, Tape, Var};
