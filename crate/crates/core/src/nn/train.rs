use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Adam, Classifier, Denoiser};
use crate::error::{Error, Result};
use crate::forward::q_sample;
use crate::sampler::standard_normal_image;
use crate::schedule::Schedule;
use crate::tensor::ImageTensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub iterations: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 10,
            iterations: 0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::InvalidParameter("learning rate must be > 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidParameter("batch size must be > 0".into()));
        }
        Ok(())
    }
}

/// Trained model and its per-iteration loss.
#[derive(Debug, Clone)]
pub struct TrainReport<M> {
    pub model: M,
    pub losses: Vec<f64>,
}

/// Mean over elements of `(eps_true - eps_pred)^2`.
pub fn loss_eps_mse(eps_true: &ImageTensor, eps_pred: &ImageTensor) -> Result<f64> {
    eps_pred.ensure_shape(eps_true.shape())?;
    let sum: f64 = eps_true
        .data()
        .iter()
        .zip(eps_pred.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(sum / eps_true.len() as f64)
}

/// One minibatch of noised images: `(x_t, t, eps, source index)` per row.
struct NoisedBatch {
    x_t: Vec<ImageTensor>,
    ts: Vec<usize>,
    eps: Vec<ImageTensor>,
    indices: Vec<usize>,
}

fn noised_batch(images: &[ImageTensor], schedule: &Schedule, batch: usize, rng: &mut ChaCha8Rng) -> Result<NoisedBatch> {
    let mut out = NoisedBatch {
        x_t: Vec::with_capacity(batch),
        ts: Vec::with_capacity(batch),
        eps: Vec::with_capacity(batch),
        indices: Vec::with_capacity(batch),
    };
    for _ in 0..batch {
        let i = rng.random_range(0..images.len());
        let t = rng.random_range(1..=schedule.steps());
        let eps = standard_normal_image(images[i].shape(), rng);
        out.x_t.push(q_sample(&images[i], t, &eps, schedule)?);
        out.ts.push(t);
        out.eps.push(eps);
        out.indices.push(i);
    }
    Ok(out)
}

fn check_loss(loss: f64, iteration: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteLoss { iteration, loss })
    }
}

/// Trains `model` on the noise-prediction objective: each iteration draws a
/// batch of images with replacement, a uniform `t` in `1..=T` and standard
/// normal noise per image, and takes one Adam step.
pub fn train_denoiser(
    mut model: Denoiser,
    images: &[ImageTensor],
    schedule: &Schedule,
    cfg: &TrainConfig,
) -> Result<TrainReport<Denoiser>> {
    cfg.validate()?;
    if images.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let count = model.conditioned().net().parameter_count();
    let mut adam = Adam::new(cfg.learning_rate, count);
    let mut grads = vec![0.0; count];
    let mut losses = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        let b = noised_batch(images, schedule, cfg.batch_size, &mut rng)?;
        grads.iter_mut().for_each(|g| *g = 0.0);
        let loss = model.accumulate_loss_grad(&b.x_t, &b.ts, &b.eps, &mut grads)?;
        check_loss(loss, it)?;
        adam.step(model.conditioned_mut().net_mut().params_mut(), &grads);
        losses.push(loss);
    }
    Ok(TrainReport { model, losses })
}

/// Trains `model` with cross-entropy on noised images under the same noise
/// protocol as [`train_denoiser`]. `labels[i]` is the class of `images[i]`.
pub fn train_classifier(
    mut model: Classifier,
    images: &[ImageTensor],
    labels: &[usize],
    schedule: &Schedule,
    cfg: &TrainConfig,
) -> Result<TrainReport<Classifier>> {
    cfg.validate()?;
    if images.is_empty() {
        return Err(Error::EmptyInput);
    }
    if labels.len() != images.len() {
        return Err(Error::LengthMismatch {
            expected: images.len(),
            found: labels.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let count = model.conditioned().net().parameter_count();
    let mut adam = Adam::new(cfg.learning_rate, count);
    let mut grads = vec![0.0; count];
    let mut losses = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        let b = noised_batch(images, schedule, cfg.batch_size, &mut rng)?;
        let batch_labels: Vec<usize> = b.indices.iter().map(|&i| labels[i]).collect();
        grads.iter_mut().for_each(|g| *g = 0.0);
        let loss = model.accumulate_loss_grad(&b.x_t, &b.ts, &batch_labels, &mut grads)?;
        check_loss(loss, it)?;
        adam.step(model.conditioned_mut().net_mut().params_mut(), &grads);
        losses.push(loss);
    }
    Ok(TrainReport { model, losses })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    #[test]
    fn mse_cases() {
        let a = ImageTensor::from_fn(Shape::new(2, 2, 2), |c, y, x| (c + y * x) as f64);
        assert_eq!(loss_eps_mse(&a, &a).unwrap(), 0.0);
        let b = a.map(|v| v + 0.1);
        assert!((loss_eps_mse(&a, &b).unwrap() - 0.01).abs() < 1e-15);
        assert!(loss_eps_mse(&a, &ImageTensor::zeros(Shape::new(1, 2, 2))).is_err());
    }

    #[test]
    fn zero_iterations_returns_initialization() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let d = Denoiser::init(4, &[8], 4, &mut rng).unwrap();
        let imgs = [ImageTensor::filled(Shape::new(1, 2, 2), 0.5)];
        let s = Schedule::linear(10, 0.01, 0.2).unwrap();
        let report = train_denoiser(d.clone(), &imgs, &s, &TrainConfig::default()).unwrap();
        assert_eq!(report.model, d);
        assert!(report.losses.is_empty());

        let c = Classifier::init(4, &[8], 4, &mut rng).unwrap();
        let report = train_classifier(c.clone(), &imgs, &[0], &s, &TrainConfig::default()).unwrap();
        assert_eq!(report.model, c);
    }

    #[test]
    fn divergence_is_reported() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let d = Denoiser::init(4, &[8], 4, &mut rng).unwrap();
        let imgs = [ImageTensor::filled(Shape::new(1, 2, 2), f64::NAN)];
        let s = Schedule::linear(10, 0.01, 0.2).unwrap();
        let cfg = TrainConfig {
            iterations: 3,
            ..TrainConfig::default()
        };
        let err = train_denoiser(d, &imgs, &s, &cfg).unwrap_err();
        assert!(matches!(err, Error::NonFiniteLoss { iteration: 0, .. }));
    }

    #[test]
    fn empty_dataset_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let d = Denoiser::init(4, &[8], 4, &mut rng).unwrap();
        let s = Schedule::linear(10, 0.01, 0.2).unwrap();
        assert_eq!(train_denoiser(d, &[], &s, &TrainConfig::default()).unwrap_err(), Error::EmptyInput);
    }
}
