//! Run configuration.
//!
//! A TOML file with a fixed key set; every key is optional and unknown keys
//! are rejected. Command-line overrides are applied as `section.key=value`
//! assignments on top of the file before deserializing, so the resolved
//! snapshot written by each command is the merged result.

use std::fs;
use std::path::{Path, PathBuf};

use ddim_anomaly_core::metrics::{ThresholdMode, OTSU_BINS};
use ddim_anomaly_core::nn::TrainConfig;
use ddim_anomaly_core::pipeline::{DetectionParams, DEFAULT_SCALE};
use ddim_anomaly_core::schedule::{DEFAULT_BETA_END, DEFAULT_BETA_START, DEFAULT_STEPS};
use ddim_anomaly_core::{Schedule, HEALTHY};
use serde::{Deserialize, Serialize};

use crate::dataset::{GenerationParams, Manifest, Split, SplitCounts, MANIFEST_VERSION};
use crate::error::{Error, Result};

pub const DEFAULT_SCALES: [f64; 8] = [5.0, 10.0, 20.0, 50.0, 100.0, 250.0, 500.0, 750.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Backend {
    /// Closed-form Gaussian models fitted to the training split.
    Analytic,
    /// Dense networks loaded from checkpoints written by `train`.
    #[default]
    Trained,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub dataset: PathBuf,
    pub output: PathBuf,
    pub backend: Backend,
    pub schedule: ScheduleConfig,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainSection,
    pub detect: DetectConfig,
    pub sweep: SweepConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            dataset: PathBuf::from("data"),
            output: PathBuf::from("runs"),
            backend: Backend::default(),
            schedule: ScheduleConfig::default(),
            data: DataConfig::default(),
            model: ModelConfig::default(),
            train: TrainSection::default(),
            detect: DetectConfig::default(),
            sweep: SweepConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: DEFAULT_STEPS,
            beta_start: DEFAULT_BETA_START,
            beta_end: DEFAULT_BETA_END,
        }
    }
}

/// Toy dataset generation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub train_healthy: usize,
    pub train_diseased: usize,
    pub test_healthy: usize,
    pub test_diseased: usize,
    pub lesion_offset: f64,
    pub lesion_radius_min: f64,
    pub lesion_radius_max: f64,
    pub intensity_min: f64,
    pub intensity_max: f64,
    pub texture_amplitude: f64,
}

impl Default for DataConfig {
    /// 16x16 phantoms: at 32x32 the dense classifier stays near chance
    /// within a desk-scale training budget.
    fn default() -> Self {
        let g = GenerationParams::default();
        Self {
            channels: 1,
            height: 16,
            width: 16,
            train_healthy: 2000,
            train_diseased: 2000,
            test_healthy: 50,
            test_diseased: 50,
            lesion_offset: g.lesion_offset,
            lesion_radius_min: 2.0,
            lesion_radius_max: 2.8,
            intensity_min: g.intensity_min,
            intensity_max: g.intensity_max,
            texture_amplitude: g.texture_amplitude,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub denoiser_hidden: Vec<usize>,
    pub classifier_hidden: Vec<usize>,
    pub embed_dim: usize,
    /// Directory holding `denoiser.ckpt` and `classifier.ckpt`; defaults to
    /// the output directory.
    pub checkpoints: Option<PathBuf>,
    /// Lower bound on fitted per-pixel variances (analytic backend).
    pub variance_floor: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            denoiser_hidden: vec![512, 512],
            classifier_hidden: vec![128],
            embed_dim: 32,
            checkpoints: None,
            variance_floor: 1e-4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainParams {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub iterations: usize,
}

impl Default for TrainParams {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 32,
            iterations: 20_000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub denoiser: TrainParams,
    pub classifier: TrainParams,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            denoiser: TrainParams::default(),
            classifier: TrainParams {
                iterations: 50_000,
                ..TrainParams::default()
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum SplitName {
    Train,
    #[default]
    Test,
}

impl From<SplitName> for Split {
    fn from(s: SplitName) -> Self {
        match s {
            SplitName::Train => Split::Train,
            SplitName::Test => Split::Test,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectConfig {
    pub scale: f64,
    /// Defaults to `T / 2`.
    pub noise_level: Option<usize>,
    pub healthy_class: usize,
    pub split: SplitName,
    /// Write input, reconstruction and anomaly map for every image.
    pub save_images: bool,
    /// Write every n-th decoding state of each trajectory; 0 disables.
    pub trajectory_every: usize,
    /// Replace the deterministic encoding with a random jump to level `L`
    /// and decode stochastically.
    pub ablation: bool,
}

impl Default for DetectConfig {
    fn default() -> Self {
        Self {
            scale: DEFAULT_SCALE,
            noise_level: None,
            healthy_class: HEALTHY,
            split: SplitName::Test,
            save_images: true,
            trajectory_every: 0,
            ablation: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub scales: Vec<f64>,
    /// Defaults to `T/4, T/2, 3T/4`.
    pub noise_levels: Option<Vec<usize>>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            scales: DEFAULT_SCALES.to_vec(),
            noise_levels: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ThresholdModeName {
    #[default]
    PerImage,
    MeanOfThresholds,
}

impl From<ThresholdModeName> for ThresholdMode {
    fn from(m: ThresholdModeName) -> Self {
        match m {
            ThresholdModeName::PerImage => ThresholdMode::PerImage,
            ThresholdModeName::MeanOfThresholds => ThresholdMode::MeanOfThresholds,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub threshold_mode: ThresholdModeName,
    pub otsu_bins: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            threshold_mode: ThresholdModeName::PerImage,
            otsu_bins: OTSU_BINS,
        }
    }
}

impl RunConfig {
    /// Reads `path` (if given), applies `overrides` and validates.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                text.parse::<toml::Table>()
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for assignment in overrides {
            apply_override(&mut table, assignment)?;
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string().trim().replace('\n', " ")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string().trim().replace('\n', " ")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let schedule = self.schedule()?;
        self.phantom_manifest().phantom_config().validate()?;
        if self.model.embed_dim == 0 || self.model.embed_dim % 2 != 0 {
            return Err(Error::Config("model.embed_dim must be even and > 0".into()));
        }
        if self.model.denoiser_hidden.contains(&0) || self.model.classifier_hidden.contains(&0) {
            return Err(Error::Config("hidden layer widths must be > 0".into()));
        }
        if !(self.model.variance_floor > 0.0) {
            return Err(Error::Config("model.variance_floor must be > 0".into()));
        }
        self.denoiser_train().validate()?;
        self.classifier_train().validate()?;
        self.detection_params(&schedule).validate(&schedule)?;
        if self.sweep.scales.is_empty() || self.sweep.noise_levels.as_ref().is_some_and(|l| l.is_empty()) {
            return Err(Error::Config("sweep grids must be nonempty".into()));
        }
        for &s in &self.sweep.scales {
            if !(s.is_finite() && s >= 0.0) {
                return Err(Error::Config(format!("sweep scale {s} must be finite and >= 0")));
            }
        }
        for l in self.sweep_levels() {
            schedule.require_step(l).map_err(|_| {
                Error::Config(format!("sweep noise level {l} outside 1..={}", schedule.steps()))
            })?;
        }
        if self.eval.otsu_bins < 2 {
            return Err(Error::Config("eval.otsu_bins must be >= 2".into()));
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<Schedule> {
        let s = &self.schedule;
        Ok(Schedule::linear(s.steps, s.beta_start, s.beta_end)?)
    }

    /// Manifest the `gen-data` command writes.
    pub fn phantom_manifest(&self) -> Manifest {
        let d = &self.data;
        Manifest {
            format_version: MANIFEST_VERSION,
            seed: self.seed,
            healthy_class: HEALTHY,
            channels: d.channels,
            height: d.height,
            width: d.width,
            counts: SplitCounts {
                train_healthy: d.train_healthy,
                train_diseased: d.train_diseased,
                test_healthy: d.test_healthy,
                test_diseased: d.test_diseased,
            },
            generation: GenerationParams {
                lesion_offset: d.lesion_offset,
                lesion_radius_min: d.lesion_radius_min,
                lesion_radius_max: d.lesion_radius_max,
                intensity_min: d.intensity_min,
                intensity_max: d.intensity_max,
                texture_amplitude: d.texture_amplitude,
            },
        }
    }

    pub fn denoiser_train(&self) -> TrainConfig {
        let p = self.train.denoiser;
        TrainConfig {
            learning_rate: p.learning_rate,
            batch_size: p.batch_size,
            iterations: p.iterations,
            seed: derive_seed(self.seed, SeedStream::DenoiserTrain),
        }
    }

    pub fn classifier_train(&self) -> TrainConfig {
        let p = self.train.classifier;
        TrainConfig {
            learning_rate: p.learning_rate,
            batch_size: p.batch_size,
            iterations: p.iterations,
            seed: derive_seed(self.seed, SeedStream::ClassifierTrain),
        }
    }

    pub fn detection_params(&self, schedule: &Schedule) -> DetectionParams {
        let mut p = DetectionParams::defaults_for(schedule);
        p.scale = self.detect.scale;
        p.healthy_class = self.detect.healthy_class;
        if let Some(l) = self.detect.noise_level {
            p.noise_level = l;
        }
        p
    }

    pub fn sweep_levels(&self) -> Vec<usize> {
        match &self.sweep.noise_levels {
            Some(l) => l.clone(),
            None => {
                let t = self.schedule.steps;
                vec![(t / 4).max(1), (t / 2).max(1), (3 * t / 4).max(1)]
            }
        }
    }

    pub fn checkpoint_dir(&self) -> &Path {
        self.model.checkpoints.as_deref().unwrap_or(&self.output)
    }
}

/// Independent RNG streams derived from the run seed.
#[derive(Debug, Clone, Copy)]
pub enum SeedStream {
    DenoiserInit = 1,
    ClassifierInit = 2,
    DenoiserTrain = 3,
    ClassifierTrain = 4,
    Ablation = 5,
}

/// SplitMix64 finalizer over `seed` and the stream index.
pub fn derive_seed(seed: u64, stream: SeedStream) -> u64 {
    let mut z = seed ^ (stream as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Applies `a.b.c=value` to `table`. The value is parsed as a TOML value and
/// falls back to a bare string.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("override key `{key}` is malformed")));
    }
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));

    let mut node = table;
    for part in &path[..path.len() - 1] {
        let entry = node
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override key `{key}`: `{part}` is not a section")))?;
    }
    node.insert(path[path.len() - 1].to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = RunConfig::from_toml("[detect]\nscal = 3.0\n").unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
        let err = RunConfig::load(None, &["detect.scal=3".into()]).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
    }

    #[test]
    fn overrides_beat_file_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        fs::write(&path, "seed = 4\n[detect]\nscale = 7.0\nnoise_level = 30\n").unwrap();
        let cfg = RunConfig::load(
            Some(&path),
            &["detect.scale=12.5".into(), "backend=analytic".into(), "sweep.scales=[1, 2.5]".into()],
        )
        .unwrap();
        assert_eq!(cfg.seed, 4);
        assert_eq!(cfg.detect.scale, 12.5);
        assert_eq!(cfg.detect.noise_level, Some(30));
        assert_eq!(cfg.backend, Backend::Analytic);
        assert_eq!(cfg.sweep.scales, vec![1.0, 2.5]);
    }

    #[test]
    fn invalid_ranges_rejected() {
        assert!(RunConfig::load(None, &["detect.noise_level=1001".into()]).is_err());
        assert!(RunConfig::load(None, &["detect.scale=-1".into()]).is_err());
        assert!(RunConfig::load(None, &["sweep.noise_levels=[0]".into()]).is_err());
        assert!(RunConfig::load(None, &["model.embed_dim=3".into()]).is_err());
        assert!(RunConfig::load(None, &["nokey".into()]).is_err());
    }

    #[test]
    fn default_levels_follow_steps() {
        let cfg = RunConfig::load(None, &["schedule.steps=100".into()]).unwrap();
        assert_eq!(cfg.sweep_levels(), vec![25, 50, 75]);
        let s = cfg.schedule().unwrap();
        assert_eq!(cfg.detection_params(&s).noise_level, 50);
    }

    #[test]
    fn seed_streams_differ() {
        let a = derive_seed(0, SeedStream::DenoiserTrain);
        let b = derive_seed(0, SeedStream::ClassifierTrain);
        let c = derive_seed(1, SeedStream::DenoiserTrain);
        assert!(a != b && a != c && b != c);
    }
}
