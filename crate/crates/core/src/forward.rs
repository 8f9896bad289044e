//! The forward noising process.
//!
//! Noise is always passed in by the caller, so both operations are pure.

use crate::error::Result;
use crate::schedule::Schedule;
use crate::tensor::ImageTensor;

/// Closed-form jump `x_t = sqrt(ab_t) x0 + sqrt(1 - ab_t) eps`.
pub fn q_sample(x0: &ImageTensor, t: usize, eps: &ImageTensor, schedule: &Schedule) -> Result<ImageTensor> {
    schedule.require_step(t)?;
    let ab = schedule.alpha_bar(t);
    let (signal, noise) = (libm::sqrt(ab), libm::sqrt(1.0 - ab));
    x0.zip_map(eps, |x, e| signal * x + noise * e)
}

/// One step of the recursion, `x_t = sqrt(1 - beta_t) x_{t-1} + sqrt(beta_t) eps`.
pub fn q_step(x_prev: &ImageTensor, t: usize, eps: &ImageTensor, schedule: &Schedule) -> Result<ImageTensor> {
    schedule.require_step(t)?;
    let beta = schedule.beta(t);
    let (signal, noise) = (libm::sqrt(1.0 - beta), libm::sqrt(beta));
    x_prev.zip_map(eps, |x, e| signal * x + noise * e)
}
