//! Variance schedule and the per-timestep constants derived from it.

use alloc::vec::Vec;

use crate::error::{Error, Result};

pub const DEFAULT_STEPS: usize = 1000;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;

/// Diffusion schedule with `T` steps.
///
/// Timesteps are 1-based: `beta(t)` and `alpha(t)` accept `1..=T`, while
/// `alpha_bar(t)` also accepts `t = 0`, where it is exactly 1.
#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    // alpha_bars[0] is the t = 0 entry.
    alpha_bars: Vec<f64>,
}

impl Schedule {
    /// Linear ramp from `beta_start` at `t = 1` to `beta_end` at `t = T`.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidSchedule("step count must be at least 1"));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::InvalidSchedule("need 0 < beta_start <= beta_end < 1"));
        }
        let betas = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        Self::from_betas(betas)
    }

    /// The default 1000-step linear schedule.
    pub fn default_linear() -> Self {
        Self::linear(DEFAULT_STEPS, DEFAULT_BETA_START, DEFAULT_BETA_END)
            .expect("default schedule parameters are valid")
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::InvalidSchedule("step count must be at least 1"));
        }
        if betas.iter().any(|&b| !(b > 0.0 && b < 1.0)) {
            return Err(Error::InvalidSchedule("every beta must lie in (0, 1)"));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(betas.len() + 1);
        alpha_bars.push(1.0);
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        if acc <= 0.0 {
            return Err(Error::InvalidSchedule("alpha_bar underflows to zero"));
        }
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
        })
    }

    /// Number of diffusion steps `T`.
    #[inline]
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    /// `alpha_bar` for `t = 0..=T`.
    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    #[inline]
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[self.check_step(t)]
    }

    #[inline]
    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[self.check_step(t)]
    }

    #[inline]
    pub fn alpha_bar(&self, t: usize) -> f64 {
        assert!(t <= self.steps(), "timestep {t} outside 0..={}", self.steps());
        self.alpha_bars[t]
    }

    #[inline]
    fn check_step(&self, t: usize) -> usize {
        assert!(
            (1..=self.steps()).contains(&t),
            "timestep {t} outside 1..={}",
            self.steps()
        );
        t - 1
    }

    pub fn require_step(&self, t: usize) -> Result<()> {
        if (1..=self.steps()).contains(&t) {
            Ok(())
        } else {
            Err(Error::TimestepOutOfRange {
                t,
                min: 1,
                max: self.steps(),
            })
        }
    }

    pub fn require_time(&self, t: usize) -> Result<()> {
        if t <= self.steps() {
            Ok(())
        } else {
            Err(Error::TimestepOutOfRange {
                t,
                min: 0,
                max: self.steps(),
            })
        }
    }

    /// Stochastic reverse-step scale
    /// `sqrt((1 - ab[t-1]) / (1 - ab[t])) * sqrt(1 - ab[t] / ab[t-1])`.
    ///
    /// Zero at `t = 1` because `ab[0] = 1`.
    pub fn sigma_ddpm(&self, t: usize) -> Result<f64> {
        self.require_step(t)?;
        let ab_prev = self.alpha_bars[t - 1];
        let ab = self.alpha_bars[t];
        let ratio = (1.0 - ab / ab_prev).max(0.0);
        Ok(libm::sqrt((1.0 - ab_prev) / (1.0 - ab)) * libm::sqrt(ratio))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * b.abs().max(1e-300)
    }

    #[test]
    fn single_step() {
        let s = Schedule::linear(1, 0.5, 0.5).unwrap();
        assert_eq!(s.betas(), &[0.5]);
        assert_eq!(s.alphas(), &[0.5]);
        assert_eq!(s.alpha_bar(1), 0.5);
        assert_eq!(s.alpha_bar(0), 1.0);
    }

    #[test]
    fn two_steps() {
        let s = Schedule::linear(2, 0.1, 0.2).unwrap();
        assert!(close(s.alpha_bar(1), 0.9, 1e-15));
        assert!(close(s.alpha_bar(2), 0.72, 1e-15));
    }

    #[test]
    fn default_schedule_reaches_near_zero_signal() {
        let s = Schedule::default_linear();
        // Independent evaluation of the product.
        let mut prod = 1.0f64;
        for i in 0..1000 {
            prod *= 1.0 - (1e-4 + (0.02 - 1e-4) * i as f64 / 999.0);
        }
        assert!(close(s.alpha_bar(1000), prod, 1e-12));
        assert!(s.alpha_bar(1000) < 1e-4);
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(Schedule::linear(0, 0.1, 0.2).is_err());
        assert!(Schedule::linear(10, 0.0, 0.2).is_err());
        assert!(Schedule::linear(10, 0.3, 0.2).is_err());
        assert!(Schedule::linear(10, 0.1, 1.0).is_err());
        assert!(Schedule::from_betas(vec![]).is_err());
    }

    #[test]
    fn sigma_examples() {
        let s = Schedule::linear(2, 0.1, 0.2).unwrap();
        assert!(close(s.sigma_ddpm(2).unwrap(), 0.267_261_241_912_424_4, 1e-12));
        assert_eq!(s.sigma_ddpm(1).unwrap(), 0.0);
        assert!(s.sigma_ddpm(0).is_err());
        assert!(s.sigma_ddpm(3).is_err());
    }

    #[test]
    fn sigma_vanishes_when_alpha_bar_flat() {
        // A beta so small the cumulative product does not move in f64.
        let s = Schedule::from_betas(vec![0.5, 1e-300]).unwrap();
        assert_eq!(s.alpha_bar(1), s.alpha_bar(2));
        assert_eq!(s.sigma_ddpm(2).unwrap(), 0.0);
    }

    #[test]
    fn default_schedule_invariants() {
        let s = Schedule::default_linear();
        for t in 1..=s.steps() {
            let b = s.beta(t);
            assert!(b > 0.0 && b < 1.0);
            assert_eq!(s.alpha(t), 1.0 - b);
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            assert!(s.alpha_bar(t) > 0.0 && s.alpha_bar(t) < 1.0);
            assert!(close(s.alpha_bar(t) / s.alpha_bar(t - 1), s.alpha(t), 1e-12));
            let sigma = s.sigma_ddpm(t).unwrap();
            assert!(sigma >= 0.0);
            // Every radicand used by the stochastic reverse step is nonnegative.
            assert!(1.0 - s.alpha_bar(t - 1) - sigma * sigma >= -1e-15);
            if t > 1 {
                let g = |u: usize| libm::sqrt(1.0 / s.alpha_bar(u) - 1.0);
                assert!(g(t) > g(t - 1));
            }
        }
    }
}
