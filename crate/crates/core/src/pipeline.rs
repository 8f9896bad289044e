//! Encode, guided decode, difference.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::forward::q_sample;
use crate::sampler::{
    decode_stochastic, decode_with_hook, encode, standard_normal_image, ClassGradModel, EpsilonModel, Guide,
    GuidanceConfig,
};
use crate::schedule::Schedule;
use crate::tensor::{ImageTensor, Shape};

pub const DEFAULT_SCALE: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectionParams {
    /// Gradient scale `s`.
    pub scale: f64,
    /// Noise level `L` in `1..=T`.
    pub noise_level: usize,
    /// Class the reconstruction is steered towards.
    pub healthy_class: usize,
}

impl DetectionParams {
    /// `s = 100`, `L = T / 2`, healthy class 0.
    pub fn defaults_for(schedule: &Schedule) -> Self {
        Self {
            scale: DEFAULT_SCALE,
            noise_level: (schedule.steps() / 2).max(1),
            healthy_class: crate::HEALTHY,
        }
    }

    pub fn validate(&self, schedule: &Schedule) -> Result<()> {
        if !(1..=schedule.steps()).contains(&self.noise_level) {
            return Err(Error::NoiseLevelOutOfRange {
                level: self.noise_level,
                max: schedule.steps(),
            });
        }
        GuidanceConfig::new(self.scale, self.healthy_class)?;
        Ok(())
    }

    fn guidance(&self) -> Result<GuidanceConfig> {
        GuidanceConfig::new(self.scale, self.healthy_class)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionResult {
    pub input: ImageTensor,
    pub synthetic: ImageTensor,
    /// Single-channel `|x - x0|` summed over channels.
    pub anomaly_map: ImageTensor,
    /// Mean of `anomaly_map`.
    pub score: f64,
    pub params: DetectionParams,
}

impl DetectionResult {
    fn assemble(input: &ImageTensor, synthetic: ImageTensor, params: DetectionParams) -> Result<Self> {
        let anomaly_map = anomaly_map(input, &synthetic)?;
        let score = anomaly_map.mean();
        Ok(Self {
            input: input.clone(),
            synthetic,
            anomaly_map,
            score,
            params,
        })
    }
}

/// Per-pixel sum over channels of `|x - x0|`.
pub fn anomaly_map(x: &ImageTensor, x0: &ImageTensor) -> Result<ImageTensor> {
    x0.ensure_shape(x.shape())?;
    let shape = x.shape();
    let mut out = ImageTensor::zeros(Shape::new(1, shape.height, shape.width));
    for c in 0..shape.channels {
        for ((a, u), v) in out.data_mut().iter_mut().zip(x.channel(c)).zip(x0.channel(c)) {
            *a += (u - v).abs();
        }
    }
    Ok(out)
}

/// Encodes `x` to level `L`, decodes under classifier guidance towards the
/// healthy class, and returns the reconstruction and anomaly map.
pub fn detect<E, C>(
    x: &ImageTensor,
    params: DetectionParams,
    eps_model: &E,
    class_model: &C,
    schedule: &Schedule,
) -> Result<DetectionResult>
where
    E: EpsilonModel + ?Sized,
    C: ClassGradModel + ?Sized,
{
    params.validate(schedule)?;
    let x_level = encode(x, params.noise_level, eps_model, schedule)?;
    detect_from_encoded(x, &x_level, params, eps_model, class_model, schedule)
}

/// The decoding half of [`detect`], for callers that reuse one encoding
/// across several gradient scales.
pub fn detect_from_encoded<E, C>(
    x: &ImageTensor,
    x_level: &ImageTensor,
    params: DetectionParams,
    eps_model: &E,
    class_model: &C,
    schedule: &Schedule,
) -> Result<DetectionResult>
where
    E: EpsilonModel + ?Sized,
    C: ClassGradModel + ?Sized,
{
    detect_from_encoded_with_hook(x, x_level, params, eps_model, class_model, schedule, |_, _| {})
}

/// [`detect_from_encoded`] reporting each decoded `x_{t-1}` to `hook`.
pub fn detect_from_encoded_with_hook<E, C, F>(
    x: &ImageTensor,
    x_level: &ImageTensor,
    params: DetectionParams,
    eps_model: &E,
    class_model: &C,
    schedule: &Schedule,
    hook: F,
) -> Result<DetectionResult>
where
    E: EpsilonModel + ?Sized,
    C: ClassGradModel + ?Sized,
    F: FnMut(usize, &ImageTensor),
{
    params.validate(schedule)?;
    x_level.ensure_shape(x.shape())?;
    let guide = Guide::new(&class_model, params.guidance()?);
    let synthetic = decode_with_hook(x_level, params.noise_level, eps_model, Some(&guide), schedule, hook)?;
    DetectionResult::assemble(x, synthetic, params)
}

/// Ablation: jump to level `L` with random noise in closed form and decode
/// with the stochastic reverse step, still guided.
pub fn detect_stochastic_ablation<E, C>(
    x: &ImageTensor,
    params: DetectionParams,
    eps_model: &E,
    class_model: &C,
    schedule: &Schedule,
    seed: u64,
) -> Result<DetectionResult>
where
    E: EpsilonModel + ?Sized,
    C: ClassGradModel + ?Sized,
{
    params.validate(schedule)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eps = standard_normal_image(x.shape(), &mut rng);
    let x_level = q_sample(x, params.noise_level, &eps, schedule)?;
    let guide = Guide::new(&class_model, params.guidance()?);
    let synthetic = decode_stochastic(&x_level, params.noise_level, eps_model, Some(&guide), schedule, &mut rng)?;
    DetectionResult::assemble(x, synthetic, params)
}
