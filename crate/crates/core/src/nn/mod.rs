//! Trainable noise predictor and noisy-image classifier.
//!
//! Both are dense networks over the flattened image concatenated with a
//! sinusoidal embedding of the timestep. Gradients are computed by reverse
//! mode, to the parameters for training and to the input pixels for guidance.

mod adam;
mod dense;
mod embedding;
mod train;

pub use adam::Adam;
pub use dense::{silu, Activations, DenseNet};
pub use embedding::TimeEmbedding;
pub use train::{loss_eps_mse, train_classifier, train_denoiser, TrainConfig, TrainReport};

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::sampler::{ClassGradModel, EpsilonModel};
use crate::schedule::Schedule;
use crate::tensor::ImageTensor;

/// A dense network whose input is `[pixels..., embedding(t)...]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionedNet {
    net: DenseNet,
    embedding: TimeEmbedding,
}

impl ConditionedNet {
    pub fn new(net: DenseNet, embedding: TimeEmbedding) -> Result<Self> {
        if net.input_dim() <= embedding.dim() {
            return Err(Error::InvalidParameter(
                "first layer must be wider than the time embedding".into(),
            ));
        }
        Ok(Self { net, embedding })
    }

    pub fn net(&self) -> &DenseNet {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut DenseNet {
        &mut self.net
    }

    pub fn embedding(&self) -> TimeEmbedding {
        self.embedding
    }

    /// Number of image values the network consumes.
    pub fn pixel_dim(&self) -> usize {
        self.net.input_dim() - self.embedding.dim()
    }

    fn check_input(&self, x: &ImageTensor) -> Result<()> {
        if x.len() != self.pixel_dim() {
            return Err(Error::LengthMismatch {
                expected: self.pixel_dim(),
                found: x.len(),
            });
        }
        Ok(())
    }

    /// Appends one input row for `(x, t)` to `rows`.
    fn push_row(&self, x: &ImageTensor, t: usize, rows: &mut Vec<f64>) {
        rows.extend_from_slice(x.data());
        self.embedding.write(t, rows);
    }

    fn forward_one<'a>(&self, x: &ImageTensor, t: usize, acts: &'a mut Activations) -> Result<&'a [f64]> {
        self.check_input(x)?;
        let mut row = Vec::with_capacity(self.net.input_dim());
        self.push_row(x, t, &mut row);
        self.net.forward(&row, 1, acts)
    }
}

fn layer_dims(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    let mut dims = Vec::with_capacity(hidden.len() + 2);
    dims.push(input);
    dims.extend_from_slice(hidden);
    dims.push(output);
    dims
}

/// Noise predictor `eps_theta(x_t, t)`; output has the input's shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Denoiser {
    inner: ConditionedNet,
}

impl Denoiser {
    pub fn init<R: Rng + ?Sized>(pixels: usize, hidden: &[usize], embed_dim: usize, rng: &mut R) -> Result<Self> {
        let embedding = TimeEmbedding::new(embed_dim)?;
        let net = DenseNet::init(&layer_dims(pixels + embed_dim, hidden, pixels), rng)?;
        Self::from_net(ConditionedNet::new(net, embedding)?)
    }

    pub fn from_net(inner: ConditionedNet) -> Result<Self> {
        if inner.net.output_dim() != inner.pixel_dim() {
            return Err(Error::InvalidParameter(
                "denoiser output width must equal its pixel input width".into(),
            ));
        }
        Ok(Self { inner })
    }

    pub fn conditioned(&self) -> &ConditionedNet {
        &self.inner
    }

    pub fn conditioned_mut(&mut self) -> &mut ConditionedNet {
        &mut self.inner
    }

    pub fn into_conditioned(self) -> ConditionedNet {
        self.inner
    }

    pub fn forward(&self, x_t: &ImageTensor, t: usize) -> Result<ImageTensor> {
        let mut acts = Activations::default();
        let out = self.inner.forward_one(x_t, t, &mut acts)?;
        ImageTensor::new(x_t.shape(), out.to_vec())
    }

    /// Mean-squared noise-prediction loss on a fixed batch and its parameter
    /// gradient.
    pub fn batch_loss_grad(&self, x_t: &[ImageTensor], ts: &[usize], eps: &[ImageTensor]) -> Result<(f64, Vec<f64>)> {
        let mut grads = vec![0.0; self.inner.net.parameter_count()];
        let loss = self.accumulate_loss_grad(x_t, ts, eps, &mut grads)?;
        Ok((loss, grads))
    }

    fn accumulate_loss_grad(
        &self,
        x_t: &[ImageTensor],
        ts: &[usize],
        eps: &[ImageTensor],
        grads: &mut [f64],
    ) -> Result<f64> {
        if x_t.len() != ts.len() || x_t.len() != eps.len() || x_t.is_empty() {
            return Err(Error::LengthMismatch {
                expected: x_t.len(),
                found: ts.len().min(eps.len()),
            });
        }
        let mut rows = Vec::with_capacity(x_t.len() * self.inner.net.input_dim());
        let mut target = Vec::with_capacity(x_t.len() * self.inner.pixel_dim());
        for ((x, &t), e) in x_t.iter().zip(ts).zip(eps) {
            self.inner.check_input(x)?;
            e.ensure_shape(x.shape())?;
            self.inner.push_row(x, t, &mut rows);
            target.extend_from_slice(e.data());
        }
        let mut acts = Activations::default();
        let out = self.inner.net.forward(&rows, x_t.len(), &mut acts)?;
        let n = target.len() as f64;
        let mut loss = 0.0;
        let d_out: Vec<f64> = out
            .iter()
            .zip(&target)
            .map(|(o, e)| {
                let d = o - e;
                loss += d * d;
                2.0 * d / n
            })
            .collect();
        self.inner.net.backward(&acts, &d_out, grads, None)?;
        Ok(loss / n)
    }
}

impl EpsilonModel for Denoiser {
    fn predict_noise(&self, x_t: &ImageTensor, t: usize, _schedule: &Schedule) -> Result<ImageTensor> {
        self.forward(x_t, t)
    }
}

/// Two-class noisy-image classifier `C(class | x_t, t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    inner: ConditionedNet,
}

impl Classifier {
    pub const CLASSES: usize = 2;

    pub fn init<R: Rng + ?Sized>(pixels: usize, hidden: &[usize], embed_dim: usize, rng: &mut R) -> Result<Self> {
        let embedding = TimeEmbedding::new(embed_dim)?;
        let net = DenseNet::init(&layer_dims(pixels + embed_dim, hidden, Self::CLASSES), rng)?;
        Self::from_net(ConditionedNet::new(net, embedding)?)
    }

    pub fn from_net(inner: ConditionedNet) -> Result<Self> {
        if inner.net.output_dim() != Self::CLASSES {
            return Err(Error::InvalidParameter("classifier must have two outputs".into()));
        }
        Ok(Self { inner })
    }

    pub fn conditioned(&self) -> &ConditionedNet {
        &self.inner
    }

    pub fn conditioned_mut(&mut self) -> &mut ConditionedNet {
        &mut self.inner
    }

    pub fn into_conditioned(self) -> ConditionedNet {
        self.inner
    }

    /// Class log-probabilities (log-softmax of the logits).
    pub fn log_probs(&self, x_t: &ImageTensor, t: usize) -> Result<[f64; 2]> {
        let mut acts = Activations::default();
        let logits = self.inner.forward_one(x_t, t, &mut acts)?;
        Ok(log_softmax2(logits[0], logits[1]))
    }

    /// Exact `grad_x log C(class | x_t, t)`.
    pub fn input_grad(&self, x_t: &ImageTensor, t: usize, class: usize) -> Result<ImageTensor> {
        if class >= Self::CLASSES {
            return Err(Error::InvalidParameter(alloc::format!("class {class} is not 0 or 1")));
        }
        let mut acts = Activations::default();
        let logits = self.inner.forward_one(x_t, t, &mut acts)?;
        let lp = log_softmax2(logits[0], logits[1]);
        // d log p_class / d logit_k = [k == class] - p_k
        let d_logits: Vec<f64> = (0..Self::CLASSES)
            .map(|k| (k == class) as u8 as f64 - libm::exp(lp[k]))
            .collect();
        let mut scratch = vec![0.0; self.inner.net.parameter_count()];
        let mut d_input = Vec::new();
        self.inner.net.backward(&acts, &d_logits, &mut scratch, Some(&mut d_input))?;
        d_input.truncate(self.inner.pixel_dim());
        ImageTensor::new(x_t.shape(), d_input)
    }

    /// Mean cross-entropy on a fixed batch and its parameter gradient.
    pub fn batch_loss_grad(&self, x_t: &[ImageTensor], ts: &[usize], labels: &[usize]) -> Result<(f64, Vec<f64>)> {
        let mut grads = vec![0.0; self.inner.net.parameter_count()];
        let loss = self.accumulate_loss_grad(x_t, ts, labels, &mut grads)?;
        Ok((loss, grads))
    }

    fn accumulate_loss_grad(
        &self,
        x_t: &[ImageTensor],
        ts: &[usize],
        labels: &[usize],
        grads: &mut [f64],
    ) -> Result<f64> {
        if x_t.len() != ts.len() || x_t.len() != labels.len() || x_t.is_empty() {
            return Err(Error::LengthMismatch {
                expected: x_t.len(),
                found: ts.len().min(labels.len()),
            });
        }
        let mut rows = Vec::with_capacity(x_t.len() * self.inner.net.input_dim());
        for (x, &t) in x_t.iter().zip(ts) {
            self.inner.check_input(x)?;
            self.inner.push_row(x, t, &mut rows);
        }
        let mut acts = Activations::default();
        let logits = self.inner.net.forward(&rows, x_t.len(), &mut acts)?;
        let n = x_t.len() as f64;
        let mut loss = 0.0;
        let mut d_logits = Vec::with_capacity(logits.len());
        for (row, &label) in logits.chunks_exact(Self::CLASSES).zip(labels) {
            if label >= Self::CLASSES {
                return Err(Error::InvalidParameter(alloc::format!("label {label} is not 0 or 1")));
            }
            let lp = log_softmax2(row[0], row[1]);
            loss -= lp[label];
            for k in 0..Self::CLASSES {
                d_logits.push((libm::exp(lp[k]) - (k == label) as u8 as f64) / n);
            }
        }
        self.inner.net.backward(&acts, &d_logits, grads, None)?;
        Ok(loss / n)
    }
}

impl ClassGradModel for Classifier {
    fn class_log_prob_grad(
        &self,
        x_t: &ImageTensor,
        t: usize,
        class: usize,
        _schedule: &Schedule,
    ) -> Result<ImageTensor> {
        self.input_grad(x_t, t, class)
    }
}

fn log_softmax2(a: f64, b: f64) -> [f64; 2] {
    let m = a.max(b);
    let lse = m + libm::log(libm::exp(a - m) + libm::exp(b - m));
    [a - lse, b - lse]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn zeroed_classifier(pixels: usize) -> Classifier {
        let net = DenseNet::zeros(&[pixels + 8, 6, 2]).unwrap();
        Classifier::from_net(ConditionedNet::new(net, TimeEmbedding::new(8).unwrap()).unwrap()).unwrap()
    }

    #[test]
    fn zero_denoiser_outputs_zero() {
        let net = DenseNet::zeros(&[4 + 8, 5, 4]).unwrap();
        let d = Denoiser::from_net(ConditionedNet::new(net, TimeEmbedding::new(8).unwrap()).unwrap()).unwrap();
        let x = ImageTensor::filled(Shape::new(1, 2, 2), 0.7);
        assert!(d.forward(&x, 10).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn denoiser_keeps_multichannel_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = Denoiser::init(4 * 3 * 3, &[16], 8, &mut rng).unwrap();
        let x = ImageTensor::filled(Shape::new(4, 3, 3), 0.2);
        assert_eq!(d.forward(&x, 3).unwrap().shape(), x.shape());
        assert!(d.forward(&ImageTensor::zeros(Shape::new(1, 3, 3)), 3).is_err());
    }

    #[test]
    fn zero_classifier_is_uniform_with_zero_gradient() {
        let c = zeroed_classifier(4);
        let x = ImageTensor::filled(Shape::new(1, 2, 2), 0.3);
        let lp = c.log_probs(&x, 5).unwrap();
        assert_eq!(lp, [libm::log(0.5), libm::log(0.5)]);
        assert!(c.input_grad(&x, 5, 0).unwrap().data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn posterior_weighted_gradients_cancel() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let c = Classifier::init(9, &[12, 7], 8, &mut rng).unwrap();
        let x = ImageTensor::from_fn(Shape::new(1, 3, 3), |_, y, x| libm::cos((y * 3 + x) as f64));
        let lp = c.log_probs(&x, 40).unwrap();
        assert!((libm::exp(lp[0]) + libm::exp(lp[1]) - 1.0).abs() < 1e-9);
        let g0 = c.input_grad(&x, 40, 0).unwrap();
        let g1 = c.input_grad(&x, 40, 1).unwrap();
        for (a, b) in g0.data().iter().zip(g1.data()) {
            assert!((libm::exp(lp[0]) * a + libm::exp(lp[1]) * b).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_bad_labels() {
        let c = zeroed_classifier(1);
        let x = [ImageTensor::zeros(Shape::new(1, 1, 1))];
        assert!(c.batch_loss_grad(&x, &[1], &[2]).is_err());
        assert!(c.input_grad(&x[0], 1, 2).is_err());
    }
}
