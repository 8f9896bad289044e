//! Closed-form noise predictor and classifier gradient for diagonal Gaussian
//! data.
//!
//! If `x0 ~ N(mu, diag(v))`, the marginal at level `t` is
//! `N(sqrt(ab) mu, ab v + 1 - ab)` per pixel, so the minimum-MSE noise
//! prediction and every class score are available exactly. These models make
//! the sampling and guidance equations testable without any training.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::sampler::{ClassGradModel, EpsilonModel};
use crate::schedule::Schedule;
use crate::tensor::{ImageTensor, Shape};
use crate::{DISEASED, HEALTHY};

/// Diagonal Gaussian over images.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianDataModel {
    mean: ImageTensor,
    variance: Vec<f64>,
}

impl GaussianDataModel {
    pub fn new(mean: ImageTensor, variance: Vec<f64>) -> Result<Self> {
        if variance.len() != mean.len() {
            return Err(Error::LengthMismatch {
                expected: mean.len(),
                found: variance.len(),
            });
        }
        if variance.iter().any(|&v| !(v.is_finite() && v > 0.0)) {
            return Err(Error::InvalidParameter("variances must be finite and > 0".into()));
        }
        if !mean.is_finite() {
            return Err(Error::InvalidParameter("mean must be finite".into()));
        }
        Ok(Self { mean, variance })
    }

    pub fn standard_normal(shape: Shape) -> Self {
        Self {
            mean: ImageTensor::zeros(shape),
            variance: alloc::vec![1.0; shape.len()],
        }
    }

    /// Constant mean and variance over every pixel.
    pub fn isotropic(shape: Shape, mean: f64, variance: f64) -> Result<Self> {
        Self::new(ImageTensor::filled(shape, mean), alloc::vec![variance; shape.len()])
    }

    /// Per-pixel sample moments of `images`, with `floor` added to each
    /// variance so constant pixels stay valid.
    pub fn fit(images: &[&ImageTensor], floor: f64) -> Result<Self> {
        let first = images.first().ok_or(Error::EmptyInput)?;
        let shape = first.shape();
        let n = images.len() as f64;
        let mut mean = alloc::vec![0.0; shape.len()];
        for img in images {
            img.ensure_shape(shape)?;
            for (m, v) in mean.iter_mut().zip(img.data()) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = alloc::vec![0.0; shape.len()];
        for img in images {
            for ((s, v), m) in var.iter_mut().zip(img.data()).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        var.iter_mut().for_each(|s| *s = *s / n + floor);
        Self::new(ImageTensor::new(shape, mean)?, var)
    }

    pub fn mean(&self) -> &ImageTensor {
        &self.mean
    }

    pub fn variance(&self) -> &[f64] {
        &self.variance
    }

    pub fn shape(&self) -> Shape {
        self.mean.shape()
    }

    /// Per-pixel marginal mean scale `sqrt(ab)` and variance `ab v + 1 - ab`
    /// at level `t`, passed pixel-by-pixel to `f(index, mean, variance)`.
    fn for_each_marginal(&self, t: usize, schedule: &Schedule, mut f: impl FnMut(usize, f64, f64)) {
        let ab = schedule.alpha_bar(t);
        let sqrt_ab = libm::sqrt(ab);
        for (i, (&mu, &v)) in self.mean.data().iter().zip(&self.variance).enumerate() {
            f(i, sqrt_ab * mu, ab * v + 1.0 - ab);
        }
    }

    /// Log-density of the level-`t` marginal at `x_t`, and its gradient.
    pub fn marginal_log_density(&self, x_t: &ImageTensor, t: usize, schedule: &Schedule) -> Result<(f64, ImageTensor)> {
        x_t.ensure_shape(self.shape())?;
        schedule.require_time(t)?;
        let mut grad = ImageTensor::zeros(x_t.shape());
        let mut logp = 0.0;
        let x = x_t.data();
        let g = grad.data_mut();
        self.for_each_marginal(t, schedule, |i, m, s| {
            let d = x[i] - m;
            logp -= 0.5 * (libm::log(2.0 * core::f64::consts::PI * s) + d * d / s);
            g[i] = -d / s;
        });
        Ok((logp, grad))
    }
}

/// Exact minimum-MSE noise prediction
/// `sqrt(1 - ab) (x_t - sqrt(ab) mu) / (ab v + 1 - ab)`, defined as exactly 0
/// at `t = 0`.
pub fn gaussian_epsilon(
    x_t: &ImageTensor,
    t: usize,
    model: &GaussianDataModel,
    schedule: &Schedule,
) -> Result<ImageTensor> {
    x_t.ensure_shape(model.shape())?;
    schedule.require_time(t)?;
    let mut out = ImageTensor::zeros(x_t.shape());
    if t == 0 {
        return Ok(out);
    }
    let k = libm::sqrt(1.0 - schedule.alpha_bar(t));
    let x = x_t.data();
    let o = out.data_mut();
    model.for_each_marginal(t, schedule, |i, m, s| o[i] = k * (x[i] - m) / s);
    Ok(out)
}

impl EpsilonModel for GaussianDataModel {
    fn predict_noise(&self, x_t: &ImageTensor, t: usize, schedule: &Schedule) -> Result<ImageTensor> {
        gaussian_epsilon(x_t, t, self, schedule)
    }
}

/// Healthy and diseased Gaussian classes with a healthy prior.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoClassModel {
    healthy: GaussianDataModel,
    diseased: GaussianDataModel,
    prior_healthy: f64,
}

impl TwoClassModel {
    pub fn new(healthy: GaussianDataModel, diseased: GaussianDataModel, prior_healthy: f64) -> Result<Self> {
        if healthy.shape() != diseased.shape() {
            return Err(Error::ShapeMismatch {
                expected: healthy.shape(),
                found: diseased.shape(),
            });
        }
        if !(prior_healthy > 0.0 && prior_healthy < 1.0) {
            return Err(Error::InvalidParameter("prior must lie in (0, 1)".into()));
        }
        Ok(Self {
            healthy,
            diseased,
            prior_healthy,
        })
    }

    pub fn healthy(&self) -> &GaussianDataModel {
        &self.healthy
    }

    pub fn diseased(&self) -> &GaussianDataModel {
        &self.diseased
    }

    pub fn prior_healthy(&self) -> f64 {
        self.prior_healthy
    }

    /// Component for a class index.
    pub fn class(&self, class: usize) -> Result<&GaussianDataModel> {
        match class {
            HEALTHY => Ok(&self.healthy),
            DISEASED => Ok(&self.diseased),
            _ => Err(Error::InvalidParameter(alloc::format!("class {class} is not 0 or 1"))),
        }
    }

    fn log_joint(&self, x_t: &ImageTensor, t: usize, schedule: &Schedule) -> Result<[(f64, ImageTensor); 2]> {
        let (lh, gh) = self.healthy.marginal_log_density(x_t, t, schedule)?;
        let (ld, gd) = self.diseased.marginal_log_density(x_t, t, schedule)?;
        Ok([
            (lh + libm::log(self.prior_healthy), gh),
            (ld + libm::log(1.0 - self.prior_healthy), gd),
        ])
    }

    /// Bayes posterior `log C(class | x_t, t)`.
    pub fn log_posterior(&self, x_t: &ImageTensor, t: usize, class: usize, schedule: &Schedule) -> Result<f64> {
        self.class(class)?;
        let [(lh, _), (ld, _)] = self.log_joint(x_t, t, schedule)?;
        let (own, other) = if class == HEALTHY { (lh, ld) } else { (ld, lh) };
        // log sigmoid(own - other)
        Ok(-log1p_exp(other - own))
    }
}

/// `ln(1 + e^x)` without overflow.
fn log1p_exp(x: f64) -> f64 {
    if x > 0.0 {
        x + libm::log1p(libm::exp(-x))
    } else {
        libm::log1p(libm::exp(x))
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

/// Exact `grad_x log C(class | x_t, t)` for the Bayes classifier of `model`.
///
/// Equals `P(other | x_t) * (grad log p_class - grad log p_other)`.
pub fn analytic_class_grad(
    x_t: &ImageTensor,
    t: usize,
    model: &TwoClassModel,
    class: usize,
    schedule: &Schedule,
) -> Result<ImageTensor> {
    model.class(class)?;
    let [(lh, gh), (ld, gd)] = model.log_joint(x_t, t, schedule)?;
    let (own, own_grad, other, other_grad) = if class == HEALTHY {
        (lh, gh, ld, gd)
    } else {
        (ld, gd, lh, gh)
    };
    let p_other = sigmoid(other - own);
    own_grad.zip_map(&other_grad, |a, b| p_other * (a - b))
}

impl ClassGradModel for TwoClassModel {
    fn class_log_prob_grad(
        &self,
        x_t: &ImageTensor,
        t: usize,
        class: usize,
        schedule: &Schedule,
    ) -> Result<ImageTensor> {
        analytic_class_grad(x_t, t, self, class, schedule)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn centered_input_has_zero_noise() {
        let s = Schedule::default_linear();
        let model = GaussianDataModel::new(
            ImageTensor::from_fn(Shape::new(1, 2, 2), |_, y, x| 0.2 + (y + x) as f64 * 0.1),
            vec![0.5, 1.0, 2.0, 0.1],
        )
        .unwrap();
        let k = libm::sqrt(s.alpha_bar(300));
        let x = model.mean().map(|m| k * m);
        let eps = gaussian_epsilon(&x, 300, &model, &s).unwrap();
        assert!(eps.data().iter().all(|e| e.abs() < 1e-15));
    }

    #[test]
    fn standard_normal_example() {
        let s = Schedule::linear(2, 0.1, 0.2).unwrap();
        let model = GaussianDataModel::standard_normal(Shape::new(1, 1, 1));
        let x = ImageTensor::new(Shape::new(1, 1, 1), vec![2.0]).unwrap();
        let eps = gaussian_epsilon(&x, 2, &model, &s).unwrap();
        assert!((eps.data()[0] - 1.058_300).abs() < 1e-6);
    }

    #[test]
    fn t_zero_is_exactly_zero() {
        let s = Schedule::default_linear();
        let model = GaussianDataModel::isotropic(Shape::new(1, 2, 2), 0.5, 0.01).unwrap();
        let x = ImageTensor::filled(Shape::new(1, 2, 2), 3.0);
        assert!(gaussian_epsilon(&x, 0, &model, &s).unwrap().data().iter().all(|&e| e == 0.0));
    }

    #[test]
    fn rejects_bad_parameters() {
        let shape = Shape::new(1, 1, 2);
        assert!(GaussianDataModel::new(ImageTensor::zeros(shape), vec![1.0, 0.0]).is_err());
        assert!(GaussianDataModel::new(ImageTensor::zeros(shape), vec![1.0]).is_err());
        let g = GaussianDataModel::standard_normal(shape);
        assert!(TwoClassModel::new(g.clone(), g.clone(), 1.0).is_err());
        assert!(TwoClassModel::new(g.clone(), GaussianDataModel::standard_normal(Shape::new(1, 2, 2)), 0.5).is_err());
    }

    #[test]
    fn identical_classes_give_zero_gradient() {
        let s = Schedule::default_linear();
        let g = GaussianDataModel::isotropic(Shape::new(1, 3, 3), 0.4, 0.2).unwrap();
        let m = TwoClassModel::new(g.clone(), g, 0.3).unwrap();
        let x = ImageTensor::from_fn(Shape::new(1, 3, 3), |_, y, x| (y as f64 - x as f64) * 0.7);
        let grad = analytic_class_grad(&x, 100, &m, HEALTHY, &s).unwrap();
        assert!(grad.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn saturated_prior_gives_vanishing_gradient() {
        let s = Schedule::default_linear();
        let shape = Shape::new(1, 2, 2);
        let h = GaussianDataModel::isotropic(shape, 0.2, 0.05).unwrap();
        let d = GaussianDataModel::isotropic(shape, 0.8, 0.05).unwrap();
        let m = TwoClassModel::new(h, d, 1.0 - 1e-9).unwrap();
        let x = ImageTensor::filled(shape, 0.45);
        let grad = analytic_class_grad(&x, 10, &m, HEALTHY, &s).unwrap();
        assert!(grad.data().iter().all(|v| v.abs() < 1e-6), "{grad:?}");
    }

    #[test]
    fn posteriors_normalize() {
        let s = Schedule::default_linear();
        let shape = Shape::new(1, 2, 2);
        let h = GaussianDataModel::isotropic(shape, 0.2, 0.05).unwrap();
        let d = GaussianDataModel::isotropic(shape, 0.8, 0.3).unwrap();
        let m = TwoClassModel::new(h, d, 0.4).unwrap();
        let x = ImageTensor::from_fn(shape, |_, y, x| 0.1 + 0.3 * (y * 2 + x) as f64);
        for t in [0, 1, 250, 1000] {
            let ph = libm::exp(m.log_posterior(&x, t, HEALTHY, &s).unwrap());
            let pd = libm::exp(m.log_posterior(&x, t, DISEASED, &s).unwrap());
            assert!((ph + pd - 1.0).abs() < 1e-12);
        }
        assert!(m.log_posterior(&x, 1, 2, &s).is_err());
    }
}
