//! Fully connected network with SiLU hidden activations and a linear output.
//!
//! Parameters live in one flat buffer, layer by layer, weights (row-major,
//! `outputs x inputs`) followed by biases. Batches are row-major
//! `batch x features` matrices.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// `x * sigmoid(x)`. Smooth everywhere and finite for finite input.
#[inline]
pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

#[inline]
fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseNet {
    dims: Vec<usize>,
    params: Vec<f64>,
}

/// Per-layer inputs and pre-activations of the last forward pass.
#[derive(Debug, Clone, Default)]
pub struct Activations {
    batch: usize,
    inputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
}

impl Activations {
    /// Output of the last forward pass, `batch x output_dim`.
    pub fn output(&self) -> &[f64] {
        self.pre.last().map(Vec::as_slice).unwrap_or(&[])
    }
}

impl DenseNet {
    /// Network with all parameters zero.
    pub fn zeros(dims: &[usize]) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::InvalidParameter(
                "a dense net needs at least two non-zero layer widths".into(),
            ));
        }
        let count = dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        Ok(Self {
            dims: dims.to_vec(),
            params: vec![0.0; count],
        })
    }

    /// Weights drawn from `N(0, 1 / fan_in)`, biases zero.
    pub fn init<R: Rng + ?Sized>(dims: &[usize], rng: &mut R) -> Result<Self> {
        let mut net = Self::zeros(dims)?;
        for l in 0..net.num_layers() {
            let std = libm::sqrt(1.0 / net.dims[l] as f64);
            let (w, _) = net.layer_range(l);
            for p in &mut net.params[w] {
                *p = std * rng.sample::<f64, _>(StandardNormal);
            }
        }
        Ok(net)
    }

    pub fn from_params(dims: &[usize], params: Vec<f64>) -> Result<Self> {
        let mut net = Self::zeros(dims)?;
        if params.len() != net.params.len() {
            return Err(Error::LengthMismatch {
                expected: net.params.len(),
                found: params.len(),
            });
        }
        net.params = params;
        Ok(net)
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn num_layers(&self) -> usize {
        self.dims.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().expect("at least two dims")
    }

    pub fn parameter_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Index ranges of layer `l`'s weights and biases in the flat buffer.
    pub fn layer_range(&self, l: usize) -> (core::ops::Range<usize>, core::ops::Range<usize>) {
        let mut off = 0;
        for w in self.dims.windows(2).take(l) {
            off += w[0] * w[1] + w[1];
        }
        let (i, o) = (self.dims[l], self.dims[l + 1]);
        (off..off + i * o, off + i * o..off + i * o + o)
    }

    /// Forward pass over a `batch x input_dim` matrix, recording what
    /// `backward` needs.
    pub fn forward<'a>(&self, input: &[f64], batch: usize, acts: &'a mut Activations) -> Result<&'a [f64]> {
        if batch == 0 || input.len() != batch * self.input_dim() {
            return Err(Error::LengthMismatch {
                expected: batch * self.input_dim(),
                found: input.len(),
            });
        }
        let layers = self.num_layers();
        acts.batch = batch;
        acts.inputs.resize_with(layers, Vec::new);
        acts.pre.resize_with(layers, Vec::new);
        acts.inputs[0].clear();
        acts.inputs[0].extend_from_slice(input);
        for l in 0..layers {
            let (i, o) = (self.dims[l], self.dims[l + 1]);
            let (wr, br) = self.layer_range(l);
            let (w, b) = (&self.params[wr], &self.params[br]);
            let z = &mut acts.pre[l];
            z.clear();
            for _ in 0..batch {
                z.extend_from_slice(b);
            }
            // z (batch x o) += X (batch x i) * W^T
            unsafe {
                matrixmultiply::dgemm(
                    batch,
                    i,
                    o,
                    1.0,
                    acts.inputs[l].as_ptr(),
                    i as isize,
                    1,
                    w.as_ptr(),
                    1,
                    i as isize,
                    1.0,
                    z.as_mut_ptr(),
                    o as isize,
                    1,
                );
            }
            if l + 1 < layers {
                let next: Vec<f64> = acts.pre[l].iter().map(|&v| silu(v)).collect();
                acts.inputs[l + 1] = next;
            }
        }
        Ok(acts.output())
    }

    /// Backpropagates `d_output` (gradient of a scalar loss with respect to the
    /// last forward output). Parameter gradients are accumulated into `grads`;
    /// the input gradient is written to `d_input` when given.
    pub fn backward(
        &self,
        acts: &Activations,
        d_output: &[f64],
        grads: &mut [f64],
        mut d_input: Option<&mut Vec<f64>>,
    ) -> Result<()> {
        let batch = acts.batch;
        if d_output.len() != batch * self.output_dim() {
            return Err(Error::LengthMismatch {
                expected: batch * self.output_dim(),
                found: d_output.len(),
            });
        }
        if grads.len() != self.params.len() {
            return Err(Error::LengthMismatch {
                expected: self.params.len(),
                found: grads.len(),
            });
        }
        let mut delta = d_output.to_vec();
        for l in (0..self.num_layers()).rev() {
            let (i, o) = (self.dims[l], self.dims[l + 1]);
            let (wr, br) = self.layer_range(l);
            if l + 1 < self.num_layers() {
                for (d, &z) in delta.iter_mut().zip(&acts.pre[l]) {
                    *d *= silu_grad(z);
                }
            }
            for row in delta.chunks_exact(o) {
                for (g, d) in grads[br.clone()].iter_mut().zip(row) {
                    *g += d;
                }
            }
            // dW (o x i) += delta^T (o x batch) * X (batch x i)
            unsafe {
                matrixmultiply::dgemm(
                    o,
                    batch,
                    i,
                    1.0,
                    delta.as_ptr(),
                    1,
                    o as isize,
                    acts.inputs[l].as_ptr(),
                    i as isize,
                    1,
                    1.0,
                    grads[wr.clone()].as_mut_ptr(),
                    i as isize,
                    1,
                );
            }
            if l == 0 && d_input.is_none() {
                break;
            }
            // d_prev (batch x i) = delta (batch x o) * W (o x i)
            let mut prev = vec![0.0; batch * i];
            unsafe {
                matrixmultiply::dgemm(
                    batch,
                    o,
                    i,
                    1.0,
                    delta.as_ptr(),
                    o as isize,
                    1,
                    self.params[wr].as_ptr(),
                    i as isize,
                    1,
                    0.0,
                    prev.as_mut_ptr(),
                    i as isize,
                    1,
                );
            }
            delta = prev;
        }
        if let Some(out) = d_input.as_deref_mut() {
            *out = delta;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Straightforward per-sample evaluation used to cross-check the GEMM path.
    fn naive_forward(net: &DenseNet, x: &[f64]) -> Vec<f64> {
        let mut a = x.to_vec();
        for l in 0..net.num_layers() {
            let (i, o) = (net.dims[l], net.dims[l + 1]);
            let (wr, br) = net.layer_range(l);
            let (w, b) = (&net.params[wr], &net.params[br]);
            let mut z = vec![0.0; o];
            for r in 0..o {
                z[r] = b[r] + (0..i).map(|c| w[r * i + c] * a[c]).sum::<f64>();
            }
            a = if l + 1 < net.num_layers() { z.iter().map(|&v| silu(v)).collect() } else { z };
        }
        a
    }

    #[test]
    fn batched_forward_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = DenseNet::init(&[5, 7, 4, 3], &mut rng).unwrap();
        let x: Vec<f64> = (0..10).map(|k| (k as f64 * 0.37).sin()).collect();
        let mut acts = Activations::default();
        let out = net.forward(&x, 2, &mut acts).unwrap().to_vec();
        for b in 0..2 {
            let naive = naive_forward(&net, &x[b * 5..(b + 1) * 5]);
            for (u, v) in out[b * 3..(b + 1) * 3].iter().zip(&naive) {
                assert!((u - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_net_outputs_zero() {
        let net = DenseNet::zeros(&[4, 6, 2]).unwrap();
        let mut acts = Activations::default();
        let out = net.forward(&[1.0, -2.0, 3.0, 0.5], 1, &mut acts).unwrap();
        assert_eq!(out, &[0.0, 0.0]);
    }

    #[test]
    fn parameter_count_and_ranges() {
        let net = DenseNet::zeros(&[3, 4, 2]).unwrap();
        assert_eq!(net.parameter_count(), 3 * 4 + 4 + 4 * 2 + 2);
        assert_eq!(net.layer_range(1), (16..24, 24..26));
        assert!(DenseNet::zeros(&[3]).is_err());
        assert!(DenseNet::zeros(&[3, 0, 2]).is_err());
    }

    #[test]
    fn silu_derivative_matches_finite_difference() {
        for x in [-6.0, -1.3, 0.0, 0.4, 2.5, 30.0] {
            let h = 1e-6;
            let fd = (silu(x + h) - silu(x - h)) / (2.0 * h);
            assert!((fd - silu_grad(x)).abs() < 1e-8);
        }
        assert!(silu(-1000.0).is_finite() && silu(1000.0).is_finite());
    }
}
