//! The two model backends behind the commands.

use std::path::{Path, PathBuf};

use ddim_anomaly_core::analytic::{GaussianDataModel, TwoClassModel};
use ddim_anomaly_core::nn::{Classifier, Denoiser};
use ddim_anomaly_core::sampler::{ClassGradModel, EpsilonModel};
use ddim_anomaly_core::{ImageTensor, Shape, DISEASED, HEALTHY};

use crate::config::{Backend, RunConfig};
use crate::dataset::Sample;
use crate::error::{Error, Result};
use crate::format::{load_checkpoint, Checkpoint, CheckpointExpectation};

pub const DENOISER_FILE: &str = "denoiser.ckpt";
pub const CLASSIFIER_FILE: &str = "classifier.ckpt";

pub enum Models {
    Analytic {
        data: GaussianDataModel,
        classes: TwoClassModel,
    },
    Trained {
        denoiser: Denoiser,
        classifier: Classifier,
    },
}

impl Models {
    /// Builds the configured backend. The analytic backend is fitted to
    /// `train`; the trained backend is read from the checkpoint directory.
    pub fn load(cfg: &RunConfig, shape: Shape, train: &[Sample]) -> Result<Self> {
        match cfg.backend {
            Backend::Analytic => Self::fit_analytic(train, cfg.model.variance_floor),
            Backend::Trained => Self::load_trained(cfg, shape),
        }
    }

    /// Fits the noise model to all of `train` and one Gaussian per class,
    /// with the class prior taken from the label frequencies.
    pub fn fit_analytic(train: &[Sample], variance_floor: f64) -> Result<Self> {
        let all: Vec<&ImageTensor> = train.iter().map(|s| &s.image).collect();
        let of = |label| train.iter().filter(|s| s.label == label).map(|s| &s.image).collect::<Vec<_>>();
        let (healthy, diseased) = (of(HEALTHY), of(DISEASED));
        if healthy.is_empty() || diseased.is_empty() {
            return Err(Error::Config("the analytic backend needs both classes in the training split".into()));
        }
        let prior = healthy.len() as f64 / all.len() as f64;
        Ok(Models::Analytic {
            data: GaussianDataModel::fit(&all, variance_floor)?,
            classes: TwoClassModel::new(
                GaussianDataModel::fit(&healthy, variance_floor)?,
                GaussianDataModel::fit(&diseased, variance_floor)?,
                prior,
            )?,
        })
    }

    pub fn load_trained(cfg: &RunConfig, shape: Shape) -> Result<Self> {
        let (den_path, cls_path) = checkpoint_paths(cfg);
        let (den_dims, cls_dims) = expected_dims(cfg, shape);
        let load = |path: &Path, dims: &[usize]| -> Result<Checkpoint> {
            load_checkpoint(
                path,
                &CheckpointExpectation {
                    layer_dims: Some(dims),
                    steps: Some(cfg.schedule.steps),
                },
            )
        };
        let den = load(&den_path, &den_dims)?;
        let cls = load(&cls_path, &cls_dims)?;
        for (ckpt, path) in [(&den, &den_path), (&cls, &cls_path)] {
            if ckpt.net.embedding().dim() != cfg.model.embed_dim {
                return Err(Error::CheckpointMismatch(format!(
                    "time embedding width {}, expected {}",
                    ckpt.net.embedding().dim(),
                    cfg.model.embed_dim
                ))
                .in_file(path));
            }
        }
        Ok(Models::Trained {
            denoiser: Denoiser::from_net(den.net)?,
            classifier: Classifier::from_net(cls.net)?,
        })
    }

    pub fn eps(&self) -> &(dyn EpsilonModel + Sync) {
        match self {
            Models::Analytic { data, .. } => data,
            Models::Trained { denoiser, .. } => denoiser,
        }
    }

    pub fn classes(&self) -> &(dyn ClassGradModel + Sync) {
        match self {
            Models::Analytic { classes, .. } => classes,
            Models::Trained { classifier, .. } => classifier,
        }
    }
}

pub fn checkpoint_paths(cfg: &RunConfig) -> (PathBuf, PathBuf) {
    let dir = cfg.checkpoint_dir();
    (dir.join(DENOISER_FILE), dir.join(CLASSIFIER_FILE))
}

/// Layer widths of the denoiser and classifier for images of `shape`.
pub fn expected_dims(cfg: &RunConfig, shape: Shape) -> (Vec<usize>, Vec<usize>) {
    let input = shape.len() + cfg.model.embed_dim;
    let dims = |hidden: &[usize], out: usize| {
        let mut d = vec![input];
        d.extend_from_slice(hidden);
        d.push(out);
        d
    };
    (
        dims(&cfg.model.denoiser_hidden, shape.len()),
        dims(&cfg.model.classifier_hidden, Classifier::CLASSES),
    )
}
