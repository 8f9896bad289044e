//! Toy dataset on disk.
//!
//! Layout under the dataset root:
//!
//! ```text
//! manifest.toml
//! train/healthy_00000.img   train/healthy_00000_mask.img
//! train/diseased_00000.img  train/diseased_00000_mask.img
//! test/...
//! ```
//!
//! Masks are single-channel images holding 0 or 1.

use std::fs;
use std::path::{Path, PathBuf};

use ddim_anomaly_core::metrics::BinaryMask;
use ddim_anomaly_core::phantom::{generate_split, PhantomConfig};
use ddim_anomaly_core::{ImageTensor, Shape, DISEASED, HEALTHY};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::format::{load_image, save_image, write_file};

pub const MANIFEST_FILE: &str = "manifest.toml";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitCounts {
    pub train_healthy: usize,
    pub train_diseased: usize,
    pub test_healthy: usize,
    pub test_diseased: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerationParams {
    pub lesion_offset: f64,
    pub lesion_radius_min: f64,
    pub lesion_radius_max: f64,
    pub intensity_min: f64,
    pub intensity_max: f64,
    pub texture_amplitude: f64,
}

impl Default for GenerationParams {
    fn default() -> Self {
        let p = PhantomConfig::default();
        Self {
            lesion_offset: p.lesion_offset,
            lesion_radius_min: p.lesion_radius.0,
            lesion_radius_max: p.lesion_radius.1,
            intensity_min: p.intensity.0,
            intensity_max: p.intensity.1,
            texture_amplitude: p.texture_amplitude,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub seed: u64,
    pub healthy_class: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub counts: SplitCounts,
    pub generation: GenerationParams,
}

impl Manifest {
    pub fn shape(&self) -> Shape {
        Shape::new(self.channels, self.height, self.width)
    }

    pub fn phantom_config(&self) -> PhantomConfig {
        let g = &self.generation;
        PhantomConfig {
            channels: self.channels,
            height: self.height,
            width: self.width,
            lesion_offset: g.lesion_offset,
            lesion_radius: (g.lesion_radius_min, g.lesion_radius_max),
            intensity: (g.intensity_min, g.intensity_max),
            texture_amplitude: g.texture_amplitude,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// One stored sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// File stem, e.g. `diseased_00003`.
    pub name: String,
    pub image: ImageTensor,
    pub label: usize,
    pub mask: BinaryMask,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: Manifest,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[Sample] {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }
}

fn class_name(label: usize) -> &'static str {
    if label == HEALTHY {
        "healthy"
    } else {
        "diseased"
    }
}

fn mask_image(mask: &BinaryMask) -> ImageTensor {
    let shape = Shape::new(1, mask.height(), mask.width());
    ImageTensor::new(shape, mask.bits().iter().map(|&b| b as u8 as f64).collect()).expect("mask shape")
}

/// Generates train and test splits from `seed` and writes them under `root`.
pub fn generate_toy_dataset(root: &Path, manifest: &Manifest) -> Result<Dataset> {
    let cfg = manifest.phantom_config();
    let mut rng = ChaCha8Rng::seed_from_u64(manifest.seed);
    let c = manifest.counts;
    let mut dataset = Dataset {
        manifest: manifest.clone(),
        train: Vec::new(),
        test: Vec::new(),
    };
    for (split, healthy, diseased) in [
        (Split::Train, c.train_healthy, c.train_diseased),
        (Split::Test, c.test_healthy, c.test_diseased),
    ] {
        let samples = generate_split(&cfg, healthy, diseased, &mut rng)?;
        let mut counters = [0usize; 2];
        let out = match split {
            Split::Train => &mut dataset.train,
            Split::Test => &mut dataset.test,
        };
        for s in samples {
            let name = format!("{}_{:05}", class_name(s.label), counters[s.label]);
            counters[s.label] += 1;
            out.push(Sample {
                name,
                image: s.image,
                label: s.label,
                mask: s.mask,
            });
        }
    }

    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    for split in [Split::Train, Split::Test] {
        let dir = root.join(split.dir_name());
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        for s in dataset.split(split) {
            save_image(&dir.join(format!("{}.img", s.name)), &s.image)?;
            save_image(&dir.join(format!("{}_mask.img", s.name)), &mask_image(&s.mask))?;
        }
    }
    let text = toml::to_string(manifest).map_err(|e| Error::Config(e.to_string()))?;
    write_file(&root.join(MANIFEST_FILE), text.as_bytes())?;
    Ok(dataset)
}

pub fn load_manifest(root: &Path) -> Result<Manifest> {
    let path = root.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: Manifest =
        toml::from_str(&text).map_err(|e| Error::ManifestMismatch(format!("{}: {e}", path.display())))?;
    if m.format_version != MANIFEST_VERSION {
        return Err(Error::UnsupportedVersion {
            found: m.format_version,
            expected: MANIFEST_VERSION,
        });
    }
    if m.healthy_class != HEALTHY {
        return Err(Error::ManifestMismatch(format!(
            "healthy class index {} (this build uses {HEALTHY})",
            m.healthy_class
        )));
    }
    Ok(m)
}

/// Stems of the sample images in `dir` for one class, sorted.
fn stems(dir: &Path, class: &str) -> Result<Vec<String>> {
    let mut out = Vec::new();
    let entries = match fs::read_dir(dir) {
        Ok(e) => e,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(out),
        Err(e) => return Err(Error::io(dir, e)),
    };
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(stem) = name.strip_suffix(".img") {
            if stem.starts_with(class) && !stem.ends_with("_mask") {
                out.push(stem.to_string());
            }
        }
    }
    out.sort();
    Ok(out)
}

/// Loads and validates every sample listed by the manifest.
pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let manifest = load_manifest(root)?;
    let c = manifest.counts;
    let shape = manifest.shape();
    let mut dataset = Dataset {
        manifest,
        train: Vec::new(),
        test: Vec::new(),
    };
    for (split, healthy, diseased) in [
        (Split::Train, c.train_healthy, c.train_diseased),
        (Split::Test, c.test_healthy, c.test_diseased),
    ] {
        let dir = root.join(split.dir_name());
        let mut samples = Vec::new();
        for (label, expected) in [(HEALTHY, healthy), (DISEASED, diseased)] {
            let names = stems(&dir, class_name(label))?;
            if names.len() != expected {
                return Err(Error::ManifestMismatch(format!(
                    "{}: manifest lists {expected} {} images, found {}",
                    dir.display(),
                    class_name(label),
                    names.len()
                )));
            }
            for name in names {
                samples.push(load_sample(&dir, name, label, shape)?);
            }
        }
        match split {
            Split::Train => dataset.train = samples,
            Split::Test => dataset.test = samples,
        }
    }
    Ok(dataset)
}

fn load_sample(dir: &Path, name: String, label: usize, shape: Shape) -> Result<Sample> {
    let image_path = dir.join(format!("{name}.img"));
    let image = load_image(&image_path)?;
    if image.shape() != shape {
        return Err(Error::ManifestMismatch(format!(
            "{}: shape {}, manifest says {shape}",
            image_path.display(),
            image.shape()
        )));
    }
    if image.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::ManifestMismatch(format!("{}: values outside [0, 1]", image_path.display())));
    }
    let mask_path = dir.join(format!("{name}_mask.img"));
    let mask_img = load_image(&mask_path)?;
    if mask_img.shape() != Shape::new(1, shape.height, shape.width) {
        return Err(Error::ManifestMismatch(format!("{}: mask shape {}", mask_path.display(), mask_img.shape())));
    }
    let mask = BinaryMask::new(shape.height, shape.width, mask_img.data().iter().map(|&v| v > 0.5).collect())?;
    if (label == DISEASED) == mask.is_empty() {
        return Err(Error::ManifestMismatch(format!(
            "{}: label {} disagrees with mask",
            mask_path.display(),
            class_name(label)
        )));
    }
    Ok(Sample { name, image, label, mask })
}

pub fn split_dir(root: &Path, split: Split) -> PathBuf {
    root.join(split.dir_name())
}
