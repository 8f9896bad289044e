//! Reverse steps, reversed-ODE encoding and classifier guidance.
//!
//! `encode` integrates the reversed DDIM ODE from `t = 0` up to a noise level
//! `L` with explicit Euler steps; `decode` walks back from `L` to `0` with the
//! deterministic (`sigma = 0`) reverse step, optionally perturbing the noise
//! prediction with the gradient of a noise-conditional classifier.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::schedule::Schedule;
use crate::tensor::{ImageTensor, Shape};

/// A noise predictor `eps(x_t, t)`.
pub trait EpsilonModel {
    fn predict_noise(&self, x_t: &ImageTensor, t: usize, schedule: &Schedule) -> Result<ImageTensor>;
}

/// Input gradient of a noise-conditional classifier, `grad_x log C(class | x_t, t)`.
pub trait ClassGradModel {
    fn class_log_prob_grad(
        &self,
        x_t: &ImageTensor,
        t: usize,
        class: usize,
        schedule: &Schedule,
    ) -> Result<ImageTensor>;
}

impl<M: EpsilonModel + ?Sized> EpsilonModel for &M {
    fn predict_noise(&self, x_t: &ImageTensor, t: usize, schedule: &Schedule) -> Result<ImageTensor> {
        (**self).predict_noise(x_t, t, schedule)
    }
}

impl<M: ClassGradModel + ?Sized> ClassGradModel for &M {
    fn class_log_prob_grad(
        &self,
        x_t: &ImageTensor,
        t: usize,
        class: usize,
        schedule: &Schedule,
    ) -> Result<ImageTensor> {
        (**self).class_log_prob_grad(x_t, t, class, schedule)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GuidanceConfig {
    /// Gradient scale `s >= 0`.
    pub scale: f64,
    /// Class the decode is steered towards.
    pub target_class: usize,
    pub enabled: bool,
}

impl GuidanceConfig {
    pub fn new(scale: f64, target_class: usize) -> Result<Self> {
        if !(scale.is_finite() && scale >= 0.0) {
            return Err(Error::InvalidScale(scale));
        }
        Ok(Self {
            scale,
            target_class,
            enabled: true,
        })
    }

    /// True when guidance would change the noise prediction at all.
    pub fn is_active(&self) -> bool {
        self.enabled && self.scale != 0.0
    }
}

/// A classifier paired with its guidance settings.
#[derive(Clone, Copy)]
pub struct Guide<'a> {
    pub model: &'a dyn ClassGradModel,
    pub config: GuidanceConfig,
}

impl<'a> Guide<'a> {
    pub fn new(model: &'a dyn ClassGradModel, config: GuidanceConfig) -> Self {
        Self { model, config }
    }
}

/// Generalized reverse step from `x_t` to `x_{t-1}`:
///
/// `sqrt(ab[t-1]) (x_t - sqrt(1-ab[t]) eps) / sqrt(ab[t]) + sqrt(1 - ab[t-1] - sigma^2) eps + sigma z`
///
/// `noise` is ignored when `sigma == 0` and required otherwise.
pub fn reverse_step(
    x_t: &ImageTensor,
    eps_hat: &ImageTensor,
    t: usize,
    sigma: f64,
    noise: Option<&ImageTensor>,
    schedule: &Schedule,
) -> Result<ImageTensor> {
    schedule.require_step(t)?;
    if !(sigma.is_finite() && sigma >= 0.0) {
        return Err(Error::InvalidParameter(alloc::format!("sigma must be >= 0, got {sigma}")));
    }
    let ab = schedule.alpha_bar(t);
    let ab_prev = schedule.alpha_bar(t - 1);
    let radicand = 1.0 - ab_prev - sigma * sigma;
    if radicand < 0.0 {
        return Err(Error::NegativeRadicand { t, sigma });
    }
    let sqrt_ab = libm::sqrt(ab);
    let sqrt_1m_ab = libm::sqrt(1.0 - ab);
    let sqrt_ab_prev = libm::sqrt(ab_prev);
    let dir = libm::sqrt(radicand);

    let mut out = x_t.zip_map(eps_hat, |x, e| sqrt_ab_prev * ((x - sqrt_1m_ab * e) / sqrt_ab) + dir * e)?;
    if sigma != 0.0 {
        let z = noise.ok_or_else(|| Error::InvalidParameter("sigma > 0 requires a noise image".into()))?;
        z.ensure_shape(x_t.shape())?;
        for (o, n) in out.data_mut().iter_mut().zip(z.data()) {
            *o += sigma * n;
        }
    }
    Ok(out)
}

/// One Euler step of the reversed ODE, `x_t -> x_{t+1}`, for `t` in `0..T`.
pub fn encode_step(x_t: &ImageTensor, eps_pred: &ImageTensor, t: usize, schedule: &Schedule) -> Result<ImageTensor> {
    if t >= schedule.steps() {
        return Err(Error::TimestepOutOfRange {
            t,
            min: 0,
            max: schedule.steps() - 1,
        });
    }
    let ab = schedule.alpha_bar(t);
    let ab_next = schedule.alpha_bar(t + 1);
    let scale = libm::sqrt(ab_next);
    let x_coef = libm::sqrt(1.0 / ab) - libm::sqrt(1.0 / ab_next);
    let eps_coef = libm::sqrt(1.0 / ab_next - 1.0) - libm::sqrt(1.0 / ab - 1.0);
    x_t.zip_map(eps_pred, |x, e| x + scale * (x_coef * x + eps_coef * e))
}

/// `eps - s sqrt(1 - ab[t]) grad`. Returns `eps_pred` unchanged when `s == 0`.
pub fn guided_epsilon(
    eps_pred: &ImageTensor,
    class_grad: &ImageTensor,
    scale: f64,
    t: usize,
    schedule: &Schedule,
) -> Result<ImageTensor> {
    if !(scale.is_finite() && scale >= 0.0) {
        return Err(Error::InvalidScale(scale));
    }
    schedule.require_time(t)?;
    if scale == 0.0 {
        class_grad.ensure_shape(eps_pred.shape())?;
        return Ok(eps_pred.clone());
    }
    let k = scale * libm::sqrt(1.0 - schedule.alpha_bar(t));
    eps_pred.zip_map(class_grad, |e, g| e - k * g)
}

fn check_level(level: usize, schedule: &Schedule) -> Result<()> {
    if level > schedule.steps() {
        return Err(Error::NoiseLevelOutOfRange {
            level,
            max: schedule.steps(),
        });
    }
    Ok(())
}

/// Encodes `x0` to noise level `level` by applying `encode_step` for
/// `t = 0..level`. `level = 0` returns the input.
pub fn encode<M: EpsilonModel + ?Sized>(
    x0: &ImageTensor,
    level: usize,
    model: &M,
    schedule: &Schedule,
) -> Result<ImageTensor> {
    check_level(level, schedule)?;
    let mut x = x0.clone();
    for t in 0..level {
        let eps = model.predict_noise(&x, t, schedule)?;
        x = encode_step(&x, &eps, t, schedule)?;
    }
    Ok(x)
}

/// Deterministic decode from level `level` down to `t = 0`.
pub fn decode<M: EpsilonModel + ?Sized>(
    x_level: &ImageTensor,
    level: usize,
    model: &M,
    guide: Option<&Guide<'_>>,
    schedule: &Schedule,
) -> Result<ImageTensor> {
    decode_with_hook(x_level, level, model, guide, schedule, |_, _| {})
}

/// [`decode`] that reports every intermediate `x_{t-1}` to `hook` as it is
/// produced (the callback receives `t - 1` and the image).
pub fn decode_with_hook<M, F>(
    x_level: &ImageTensor,
    level: usize,
    model: &M,
    guide: Option<&Guide<'_>>,
    schedule: &Schedule,
    hook: F,
) -> Result<ImageTensor>
where
    M: EpsilonModel + ?Sized,
    F: FnMut(usize, &ImageTensor),
{
    reverse_loop(x_level, level, model, guide, schedule, |_, _| Ok(None), hook)
}

/// Stochastic decode with `sigma = sigma_ddpm(t)` and fresh standard-normal
/// noise at every step.
pub fn decode_stochastic<M, R>(
    x_level: &ImageTensor,
    level: usize,
    model: &M,
    guide: Option<&Guide<'_>>,
    schedule: &Schedule,
    rng: &mut R,
) -> Result<ImageTensor>
where
    M: EpsilonModel + ?Sized,
    R: Rng + ?Sized,
{
    reverse_loop(
        x_level,
        level,
        model,
        guide,
        schedule,
        |t, shape| {
            let sigma = schedule.sigma_ddpm(t)?;
            if sigma == 0.0 {
                return Ok(None);
            }
            Ok(Some((sigma, standard_normal_image(shape, rng))))
        },
        |_, _| {},
    )
}

fn reverse_loop<M, N, F>(
    x_level: &ImageTensor,
    level: usize,
    model: &M,
    guide: Option<&Guide<'_>>,
    schedule: &Schedule,
    mut noise: N,
    mut hook: F,
) -> Result<ImageTensor>
where
    M: EpsilonModel + ?Sized,
    N: FnMut(usize, Shape) -> Result<Option<(f64, ImageTensor)>>,
    F: FnMut(usize, &ImageTensor),
{
    check_level(level, schedule)?;
    let mut x = x_level.clone();
    for t in (1..=level).rev() {
        let mut eps = model.predict_noise(&x, t, schedule)?;
        if let Some(g) = guide.filter(|g| g.config.is_active()) {
            // Gradient taken at the current x_t, before the step.
            let grad = g.model.class_log_prob_grad(&x, t, g.config.target_class, schedule)?;
            eps = guided_epsilon(&eps, &grad, g.config.scale, t, schedule)?;
        }
        x = match noise(t, x.shape())? {
            Some((sigma, z)) => reverse_step(&x, &eps, t, sigma, Some(&z), schedule)?,
            None => reverse_step(&x, &eps, t, 0.0, None, schedule)?,
        };
        hook(t - 1, &x);
    }
    Ok(x)
}

/// Image of i.i.d. standard-normal draws.
pub fn standard_normal_image<R: Rng + ?Sized>(shape: Shape, rng: &mut R) -> ImageTensor {
    ImageTensor::from_fn(shape, |_, _, _| rng.sample(StandardNormal))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn px(v: f64) -> ImageTensor {
        ImageTensor::new(Shape::new(1, 1, 1), vec![v]).unwrap()
    }

    fn two_step() -> Schedule {
        Schedule::linear(2, 0.1, 0.2).unwrap()
    }

    #[test]
    fn reverse_step_example() {
        let s = two_step();
        let x_t = crate::forward::q_sample(&px(1.0), 2, &px(1.0), &s).unwrap();
        let out = reverse_step(&x_t, &px(1.0), 2, 0.0, None, &s).unwrap();
        assert!((out.data()[0] - 1.264_911).abs() < 1e-6);
        let expected = libm::sqrt(0.9) + libm::sqrt(0.1);
        assert!((out.data()[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn reverse_step_noise_is_additive() {
        let s = two_step();
        let sigma = s.sigma_ddpm(2).unwrap();
        let x = px(0.3);
        let e = px(-0.7);
        let z = px(1.9);
        let a = reverse_step(&x, &e, 2, sigma, Some(&px(0.0)), &s).unwrap();
        let b = reverse_step(&x, &e, 2, sigma, Some(&z), &s).unwrap();
        assert!((b.data()[0] - a.data()[0] - sigma * 1.9).abs() < 1e-15);
    }

    #[test]
    fn reverse_step_rejects_large_sigma() {
        let s = two_step();
        let err = reverse_step(&px(0.0), &px(0.0), 2, 0.5, Some(&px(0.0)), &s).unwrap_err();
        assert!(matches!(err, Error::NegativeRadicand { t: 2, .. }));
        assert!(reverse_step(&px(0.0), &px(0.0), 2, 0.1, None, &s).is_err());
    }

    #[test]
    fn encode_step_example() {
        let s = two_step();
        let out = encode_step(&px(1.0), &px(0.0), 1, &s).unwrap();
        assert!((out.data()[0] - 0.894_427).abs() < 1e-6);
        assert!((out.data()[0] - libm::sqrt(0.8)).abs() < 1e-12);
        assert!(encode_step(&px(1.0), &px(0.0), 2, &s).is_err());
    }

    #[test]
    fn encode_step_is_identity_on_flat_alpha_bar() {
        let s = Schedule::from_betas(vec![0.5, 1e-300]).unwrap();
        let out = encode_step(&px(0.37), &px(2.0), 1, &s).unwrap();
        assert_eq!(out.data()[0], 0.37);
    }

    #[test]
    fn encode_then_reverse_with_frozen_eps() {
        let s = Schedule::default_linear();
        for t in [0usize, 1, 17, 499, 998] {
            let x = ImageTensor::from_fn(Shape::new(2, 3, 3), |c, y, x| (c as f64 - 0.5) * (y as f64 + 0.1 * x as f64));
            let e = ImageTensor::from_fn(x.shape(), |c, y, x| libm::sin((c * 9 + y * 3 + x) as f64));
            let up = encode_step(&x, &e, t, &s).unwrap();
            let back = reverse_step(&up, &e, t + 1, 0.0, None, &s).unwrap();
            let rel = back.l2_distance(&x).unwrap() / x.l2_norm();
            assert!(rel < 1e-9, "t={t} rel={rel}");
        }
    }

    #[test]
    fn guided_epsilon_examples() {
        let s = two_step();
        let out = guided_epsilon(&px(0.5), &px(0.2), 100.0, 2, &s).unwrap();
        assert!((out.data()[0] + 10.083_005).abs() < 1e-6);
        assert_eq!(guided_epsilon(&px(0.5), &px(0.2), 0.0, 2, &s).unwrap(), px(0.5));
        assert_eq!(guided_epsilon(&px(0.5), &px(0.0), 7.0, 2, &s).unwrap(), px(0.5));
        assert!(guided_epsilon(&px(0.5), &px(0.0), -1.0, 2, &s).is_err());
    }

    struct Zero;
    impl EpsilonModel for Zero {
        fn predict_noise(&self, x_t: &ImageTensor, _: usize, _: &Schedule) -> Result<ImageTensor> {
            Ok(ImageTensor::zeros(x_t.shape()))
        }
    }

    #[test]
    fn encode_level_zero_is_identity() {
        let s = two_step();
        let x = px(0.42);
        assert_eq!(encode(&x, 0, &Zero, &s).unwrap(), x);
        assert!(matches!(encode(&x, 3, &Zero, &s), Err(Error::NoiseLevelOutOfRange { .. })));
    }

    #[test]
    fn hook_sees_every_step() {
        let s = Schedule::linear(10, 0.01, 0.1).unwrap();
        let mut seen = vec![];
        decode_with_hook(&px(1.0), 6, &Zero, None, &s, |t, _| seen.push(t)).unwrap();
        assert_eq!(seen, vec![5, 4, 3, 2, 1, 0]);
    }
}
