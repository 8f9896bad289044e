//! Otsu thresholding, Dice overlap and AUROC.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::ImageTensor;

/// Histogram resolution used by [`otsu_threshold`].
pub const OTSU_BINS: usize = 256;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::LengthMismatch {
                expected: height * width,
                found: bits.len(),
            });
        }
        Ok(Self { height, width, bits })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![false; height * width],
        }
    }

    /// Pixels of a single-channel map strictly above `threshold`.
    pub fn from_threshold(map: &ImageTensor, threshold: f64) -> Result<Self> {
        if map.channels() != 1 {
            return Err(Error::InvalidParameter("thresholding needs a single-channel map".into()));
        }
        Ok(Self {
            height: map.height(),
            width: map.width(),
            bits: map.data().iter().map(|&v| v > threshold).collect(),
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    fn check_same_shape(&self, other: &BinaryMask) -> Result<()> {
        if (self.height, self.width) != (other.height, other.width) {
            return Err(Error::LengthMismatch {
                expected: self.bits.len(),
                found: other.bits.len(),
            });
        }
        Ok(())
    }
}

/// Otsu threshold with [`OTSU_BINS`] bins.
pub fn otsu_threshold(values: &[f64]) -> Result<f64> {
    otsu_threshold_with_bins(values, OTSU_BINS)
}

/// Histograms `values` into `bins` equal bins over `[min, max]` and returns
/// the bin edge that maximizes the between-class variance. The first of
/// several equal maxima wins. Constant input returns the constant.
pub fn otsu_threshold_with_bins(values: &[f64], bins: usize) -> Result<f64> {
    let (lo, hi, hist) = histogram(values, bins)?;
    if lo == hi {
        return Ok(lo);
    }
    let width = (hi - lo) / bins as f64;
    let total = values.len() as f64;
    // Bin centres stand in for the values in each bin.
    let centre = |k: usize| lo + (k as f64 + 0.5) * width;
    let sum_total: f64 = hist.iter().enumerate().map(|(k, &n)| centre(k) * n as f64).sum();
    let (mut w0, mut sum0) = (0.0, 0.0);
    let mut best = (f64::NEG_INFINITY, 0usize);
    for (k, &n) in hist.iter().enumerate().take(bins - 1) {
        w0 += n as f64;
        sum0 += centre(k) * n as f64;
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let diff = sum0 / w0 - (sum_total - sum0) / w1;
        let between = w0 * w1 * diff * diff;
        if between > best.0 {
            best = (between, k);
        }
    }
    Ok(lo + (best.1 + 1) as f64 * width)
}

/// `(min, max, counts)` of `values` over `bins` equal-width bins.
pub fn histogram(values: &[f64], bins: usize) -> Result<(f64, f64, Vec<usize>)> {
    if values.is_empty() {
        return Err(Error::EmptyInput);
    }
    if bins < 2 {
        return Err(Error::InvalidParameter("need at least two histogram bins".into()));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter("values must be finite".into()));
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut hist = vec![0usize; bins];
    if lo == hi {
        hist[0] = values.len();
        return Ok((lo, hi, hist));
    }
    let width = (hi - lo) / bins as f64;
    for &v in values {
        let k = (((v - lo) / width) as usize).min(bins - 1);
        hist[k] += 1;
    }
    Ok((lo, hi, hist))
}

/// `2 |A n B| / (|A| + |B|)`, with two empty masks scoring 1.
pub fn dice(pred: &BinaryMask, truth: &BinaryMask) -> Result<f64> {
    pred.check_same_shape(truth)?;
    let (a, b) = (pred.count(), truth.count());
    if a + b == 0 {
        return Ok(1.0);
    }
    let both = pred.bits.iter().zip(&truth.bits).filter(|(p, t)| **p && **t).count();
    Ok(2.0 * both as f64 / (a + b) as f64)
}

/// Probability that a random positive outranks a random negative, ties
/// counting one half. Computed from midranks in `O(n log n)`.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::LengthMismatch {
            expected: scores.len(),
            found: labels.len(),
        });
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::InvalidParameter("scores must not be NaN".into()));
    }
    let positives = labels.iter().filter(|&&l| l).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1..=j+1 share their mean.
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid * order[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let (p, n) = (positives as f64, negatives as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// How anomaly maps are binarized before Dice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ThresholdMode {
    /// Otsu threshold computed for every image separately.
    #[default]
    PerImage,
    /// One threshold, the mean of the per-image Otsu thresholds.
    MeanOfThresholds,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalSummary {
    /// Mean Dice over diseased images; `None` without masks or diseased images.
    pub mean_dice: Option<f64>,
    /// AUROC over the pooled pixels of all diseased images.
    pub pixel_auroc: Option<f64>,
    /// AUROC of per-image scores against image labels, when both classes occur.
    pub image_auroc: Option<f64>,
    pub n_images: usize,
    pub n_diseased: usize,
}

/// One evaluated image.
#[derive(Debug, Clone, Copy)]
pub struct EvalItem<'a> {
    pub anomaly_map: &'a ImageTensor,
    pub score: f64,
    pub diseased: bool,
    pub mask: Option<&'a BinaryMask>,
}

/// Aggregates per-image results into the summary metrics.
///
/// Dice and pixel AUROC cover diseased images that carry a mask; image-level
/// AUROC uses every image's score.
pub fn evaluate_set(items: &[EvalItem<'_>], mode: ThresholdMode) -> Result<EvalSummary> {
    evaluate_set_with_bins(items, mode, OTSU_BINS)
}

/// [`evaluate_set`] with an explicit Otsu histogram size.
pub fn evaluate_set_with_bins(items: &[EvalItem<'_>], mode: ThresholdMode, bins: usize) -> Result<EvalSummary> {
    let mut diseased = Vec::new();
    for item in items {
        if item.anomaly_map.channels() != 1 {
            return Err(Error::InvalidParameter("anomaly maps must be single-channel".into()));
        }
        if let Some(mask) = item.mask {
            if (mask.height, mask.width) != (item.anomaly_map.height(), item.anomaly_map.width()) {
                return Err(Error::LengthMismatch {
                    expected: item.anomaly_map.len(),
                    found: mask.bits.len(),
                });
            }
            if item.diseased {
                diseased.push((item.anomaly_map, mask));
            }
        }
    }

    let (mut mean_dice, mut pixel_auroc) = (None, None);
    if !diseased.is_empty() {
        let thresholds = diseased
            .iter()
            .map(|(map, _)| otsu_threshold_with_bins(map.data(), bins))
            .collect::<Result<Vec<_>>>()?;
        let shared = thresholds.iter().sum::<f64>() / thresholds.len() as f64;
        let mut dice_sum = 0.0;
        let (mut pooled, mut truth) = (Vec::new(), Vec::new());
        for ((map, mask), &own) in diseased.iter().zip(&thresholds) {
            let threshold = match mode {
                ThresholdMode::PerImage => own,
                ThresholdMode::MeanOfThresholds => shared,
            };
            dice_sum += dice(&BinaryMask::from_threshold(map, threshold)?, mask)?;
            pooled.extend_from_slice(map.data());
            truth.extend_from_slice(&mask.bits);
        }
        mean_dice = Some(dice_sum / diseased.len() as f64);
        pixel_auroc = match auroc(&pooled, &truth) {
            Ok(v) => Some(v),
            Err(Error::SingleClass) => None,
            Err(e) => return Err(e),
        };
    }

    let scores: Vec<f64> = items.iter().map(|i| i.score).collect();
    let labels: Vec<bool> = items.iter().map(|i| i.diseased).collect();
    let image_auroc = match auroc(&scores, &labels) {
        Ok(v) => Some(v),
        Err(Error::SingleClass) => None,
        Err(e) => return Err(e),
    };

    Ok(EvalSummary {
        mean_dice,
        pixel_auroc,
        image_auroc,
        n_images: items.len(),
        n_diseased: labels.iter().filter(|&&d| d).count(),
    })
}
