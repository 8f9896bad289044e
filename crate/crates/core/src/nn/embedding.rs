use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Sinusoidal timestep features: `sin(t w_k)` then `cos(t w_k)` for
/// `w_k = max_period^(-k / half)`, `k = 0..half`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeEmbedding {
    dim: usize,
}

impl TimeEmbedding {
    pub const MAX_PERIOD: f64 = 10_000.0;

    /// `dim` must be even and non-zero.
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 || dim % 2 != 0 {
            return Err(Error::InvalidParameter(alloc::format!(
                "embedding width must be even and > 0, got {dim}"
            )));
        }
        Ok(Self { dim })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn write(&self, t: usize, out: &mut Vec<f64>) {
        let half = self.dim / 2;
        let start = out.len();
        out.resize(start + self.dim, 0.0);
        for k in 0..half {
            let freq = libm::pow(Self::MAX_PERIOD, -(k as f64) / half as f64);
            let (s, c) = libm::sincos(t as f64 * freq);
            out[start + k] = s;
            out[start + half + k] = c;
        }
    }

    pub fn embed(&self, t: usize) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.dim);
        self.write(t, &mut v);
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bounded_and_injective() {
        let emb = TimeEmbedding::new(16).unwrap();
        let all: Vec<Vec<f64>> = (0..=1000).map(|t| emb.embed(t)).collect();
        for v in &all {
            let norm2: f64 = v.iter().map(|x| x * x).sum();
            // Each sin/cos pair contributes exactly 1.
            assert!((norm2 - 8.0).abs() < 1e-9);
        }
        for a in 0..all.len() {
            for b in a + 1..all.len() {
                let d: f64 = all[a].iter().zip(&all[b]).map(|(x, y)| (x - y).abs()).sum();
                assert!(d > 1e-6, "t={a} and t={b} collide");
            }
        }
    }

    #[test]
    fn rejects_odd_width() {
        assert!(TimeEmbedding::new(7).is_err());
        assert!(TimeEmbedding::new(0).is_err());
    }
}
