//! Numerical core for weakly supervised anomaly detection with deterministic
//! diffusion encoding and classifier-guided denoising.
//!
//! An input image is encoded into noise by integrating the reversed DDIM ODE
//! up to a noise level `L`, decoded back under the gradient of a
//! noise-conditional classifier that favours the healthy class, and the
//! channel-summed absolute difference between input and reconstruction is the
//! anomaly map.
//!
//! The crate is `no_std` (with `alloc`). All transcendental functions go
//! through `libm`, so results do not depend on the host's math library.
//! File formats, dataset IO and the command line live in the companion
//! `ddim-anomaly` crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod analytic;
pub mod error;
pub mod forward;
pub mod metrics;
pub mod nn;
pub mod phantom;
pub mod pipeline;
pub mod sampler;
pub mod schedule;
pub mod tensor;

pub use error::{Error, Result};
pub use sampler::{ClassGradModel, EpsilonModel, Guide, GuidanceConfig};
pub use schedule::Schedule;
pub use tensor::{ImageTensor, Shape};

/// Class index of healthy images in datasets, checkpoints and guidance.
pub const HEALTHY: usize = 0;
/// Class index of diseased images.
pub const DISEASED: usize = 1;
