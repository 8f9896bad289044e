//! Synthetic phantoms: a textured ellipse on a dark background, optionally
//! with a bright compact lesion inside it.

use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::metrics::BinaryMask;
use crate::tensor::{ImageTensor, Shape};
use crate::{DISEASED, HEALTHY};

/// Ellipse semi-axes are drawn from this range, as fractions of the image side.
const MIN_AXIS: f64 = 0.32;
const MAX_AXIS: f64 = 0.42;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhantomConfig {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Intensity added inside the lesion.
    pub lesion_offset: f64,
    /// Lesion radius range in pixels (half side length for squares).
    pub lesion_radius: (f64, f64),
    /// Base intensity range of the ellipse interior.
    pub intensity: (f64, f64),
    /// Peak amplitude of the smooth interior texture.
    pub texture_amplitude: f64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            channels: 1,
            height: 32,
            width: 32,
            lesion_offset: 0.4,
            lesion_radius: (2.5, 4.0),
            intensity: (0.35, 0.5),
            texture_amplitude: 0.04,
        }
    }
}

impl PhantomConfig {
    pub fn shape(&self) -> Shape {
        Shape::new(self.channels, self.height, self.width)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParameter(m.into()));
        if self.channels == 0 || self.height < 8 || self.width < 8 {
            return bad("phantoms need at least one channel and 8x8 pixels");
        }
        if !(self.lesion_offset > 0.0) {
            return bad("lesion offset must be > 0");
        }
        let (r0, r1) = self.lesion_radius;
        if !(r0 >= 1.0 && r0 <= r1) {
            return bad("lesion radius range must satisfy 1 <= min <= max");
        }
        let (i0, i1) = self.intensity;
        if !(i0 > 0.0 && i0 <= i1) {
            return bad("intensity range must satisfy 0 < min <= max");
        }
        if !(self.texture_amplitude >= 0.0) {
            return bad("texture amplitude must be >= 0");
        }
        if i1 + self.texture_amplitude + self.lesion_offset > 1.0 {
            return bad("intensity + texture + lesion offset must stay within 1");
        }
        // The smallest ellipse semi-axis must hold a rotated square lesion
        // plus its margin.
        let min_axis = MIN_AXIS * self.height.min(self.width) as f64;
        if r1 * core::f64::consts::SQRT_2 + 1.0 >= min_axis {
            return bad("lesions must fit well inside the ellipse");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToySample {
    pub image: ImageTensor,
    /// [`HEALTHY`] or [`DISEASED`].
    pub label: usize,
    /// Lesion pixels; empty for healthy samples.
    pub mask: BinaryMask,
    /// Ellipse interior.
    pub foreground: BinaryMask,
}

/// Draws one phantom. Pixel values are rounded to `f32` so the sample
/// survives a 32-bit float file round trip unchanged.
pub fn generate_sample<R: Rng + ?Sized>(cfg: &PhantomConfig, diseased: bool, rng: &mut R) -> Result<ToySample> {
    cfg.validate()?;
    let (h, w) = (cfg.height as f64, cfg.width as f64);
    let cy = h / 2.0 + rng.random_range(-0.08..0.08) * h;
    let cx = w / 2.0 + rng.random_range(-0.08..0.08) * w;
    let ay = rng.random_range(MIN_AXIS..MAX_AXIS) * h;
    let ax = rng.random_range(MIN_AXIS..MAX_AXIS) * w;
    let inside = |y: f64, x: f64| {
        let (dy, dx) = ((y - cy) / ay, (x - cx) / ax);
        dy * dy + dx * dx <= 1.0
    };

    let intensities: Vec<f64> = (0..cfg.channels)
        .map(|_| rng.random_range(cfg.intensity.0..=cfg.intensity.1))
        .collect();
    // Texture: a sum of two low-frequency plane waves.
    let waves: Vec<(f64, f64, f64)> = (0..2)
        .map(|_| {
            let theta = rng.random_range(0.0..core::f64::consts::TAU);
            let freq = rng.random_range(0.15..0.35);
            let phase = rng.random_range(0.0..core::f64::consts::TAU);
            (freq * libm::cos(theta), freq * libm::sin(theta), phase)
        })
        .collect();
    let texture = |y: f64, x: f64| {
        let s: f64 = waves.iter().map(|&(fy, fx, p)| libm::sin(fy * y + fx * x + p)).sum();
        cfg.texture_amplitude * s / waves.len() as f64
    };

    let lesion = if diseased {
        let r = rng.random_range(cfg.lesion_radius.0..=cfg.lesion_radius.1);
        let square = rng.random_bool(0.5);
        // Keep the whole lesion (plus a one-pixel margin) inside the ellipse.
        let reach = if square { r * core::f64::consts::SQRT_2 } else { r } + 1.0;
        let mut centre = None;
        for _ in 0..1000 {
            let ly = rng.random_range(cy - ay..cy + ay);
            let lx = rng.random_range(cx - ax..cx + ax);
            let (ny, nx) = ((ly - cy) / (ay - reach), (lx - cx) / (ax - reach));
            if ay > reach && ax > reach && ny * ny + nx * nx <= 1.0 {
                centre = Some((ly, lx));
                break;
            }
        }
        let (ly, lx) = centre.ok_or_else(|| Error::InvalidParameter("lesion does not fit".into()))?;
        Some((ly, lx, r, square))
    } else {
        None
    };
    let in_lesion = |y: f64, x: f64| match lesion {
        Some((ly, lx, r, true)) => (y - ly).abs() <= r && (x - lx).abs() <= r,
        Some((ly, lx, r, false)) => (y - ly) * (y - ly) + (x - lx) * (x - lx) <= r * r,
        None => false,
    };

    let shape = cfg.shape();
    let mut mask_bits = Vec::with_capacity(shape.pixels());
    let mut fg_bits = Vec::with_capacity(shape.pixels());
    for y in 0..cfg.height {
        for x in 0..cfg.width {
            let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
            fg_bits.push(inside(py, px));
            mask_bits.push(inside(py, px) && in_lesion(py, px));
        }
    }
    let image = ImageTensor::from_fn(shape, |c, y, x| {
        let i = y * cfg.width + x;
        if !fg_bits[i] {
            return 0.0;
        }
        let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
        let mut v = intensities[c] + texture(py, px);
        if mask_bits[i] {
            v += cfg.lesion_offset;
        }
        v.clamp(0.0, 1.0) as f32 as f64
    });
    let mask = BinaryMask::new(cfg.height, cfg.width, mask_bits)?;
    if diseased && mask.is_empty() {
        return Err(Error::InvalidParameter("lesion covers no pixel".into()));
    }
    Ok(ToySample {
        image,
        label: if diseased { DISEASED } else { HEALTHY },
        mask,
        foreground: BinaryMask::new(cfg.height, cfg.width, fg_bits)?,
    })
}

/// `healthy` healthy samples followed by `diseased` diseased ones.
pub fn generate_split<R: Rng + ?Sized>(
    cfg: &PhantomConfig,
    healthy: usize,
    diseased: usize,
    rng: &mut R,
) -> Result<Vec<ToySample>> {
    (0..healthy + diseased)
        .map(|i| generate_sample(cfg, i >= healthy, rng))
        .collect()
}
