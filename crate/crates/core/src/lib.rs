//! Audio-conditioned hand-motion diffusion: autodiff, kinematics, the DiT
//! denoiser, conditioning, data formats, metrics and signal preparation.

pub mod conditioning;
pub mod data;
pub mod diffusion;
pub mod dit;
pub mod error;
pub mod kinematics;
pub mod metrics;
pub mod stage2;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
