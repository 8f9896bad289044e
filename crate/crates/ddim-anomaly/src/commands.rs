//! The operator commands. Each writes a resolved configuration snapshot
//! `<output>/<command>.config.toml` next to its results.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ddim_anomaly_core::metrics::{evaluate_set_with_bins, BinaryMask, EvalItem, EvalSummary};
use ddim_anomaly_core::nn::{train_classifier, train_denoiser, Classifier, Denoiser};
use ddim_anomaly_core::pipeline::{
    detect_from_encoded, detect_from_encoded_with_hook, detect_stochastic_ablation, DetectionParams, DetectionResult,
};
use ddim_anomaly_core::sampler::encode;
use ddim_anomaly_core::{ImageTensor, Schedule, Shape, DISEASED, HEALTHY};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backend::{checkpoint_paths, Models};
use crate::config::{derive_seed, RunConfig, SeedStream};
use crate::dataset::{generate_toy_dataset, load_dataset, Dataset, Sample, Split};
use crate::error::{Error, Result};
use crate::format::{load_image, save_checkpoint, save_image, save_pgm, write_file, Checkpoint};
use crate::parallel::{ordered_map, with_pool};
use crate::report::{
    eval_row, opt6, read_csv, sig6, write_csv, DETECTION_HEADER, EVAL_HEADER, LOSS_HEADER, SWEEP_HEADER,
    TIMING_HEADER,
};

pub const DETECTIONS_FILE: &str = "detections.csv";
pub const TIMINGS_FILE: &str = "timings.csv";
pub const SWEEP_FILE: &str = "sweep.csv";
pub const EVAL_FILE: &str = "eval.csv";
pub const LOSSES_FILE: &str = "losses.csv";
pub const IMAGES_DIR: &str = "images";
pub const TRAJECTORIES_DIR: &str = "trajectories";

fn write_snapshot(cfg: &RunConfig, command: &str) -> Result<()> {
    write_file(&cfg.output.join(format!("{command}.config.toml")), cfg.to_toml().as_bytes())
}

pub fn cmd_gen_data(cfg: &RunConfig) -> Result<Dataset> {
    write_snapshot(cfg, "gen-data")?;
    generate_toy_dataset(&cfg.dataset, &cfg.phantom_manifest())
}

pub struct TrainOutcome {
    pub denoiser: Denoiser,
    pub classifier: Classifier,
    pub denoiser_losses: Vec<f64>,
    pub classifier_losses: Vec<f64>,
}

/// Trains the denoiser on every training image, then the classifier on the
/// image labels, and writes both checkpoints and the loss curves.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainOutcome> {
    write_snapshot(cfg, "train")?;
    let data = load_dataset(&cfg.dataset)?;
    let schedule = cfg.schedule()?;
    let pixels = data.manifest.shape().len();
    let images: Vec<ImageTensor> = data.train.iter().map(|s| s.image.clone()).collect();
    let labels: Vec<usize> = data.train.iter().map(|s| s.label).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, SeedStream::DenoiserInit));
    let den = Denoiser::init(pixels, &cfg.model.denoiser_hidden, cfg.model.embed_dim, &mut rng)?;
    let den = train_denoiser(den, &images, &schedule, &cfg.denoiser_train())?;

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, SeedStream::ClassifierInit));
    let cls = Classifier::init(pixels, &cfg.model.classifier_hidden, cfg.model.embed_dim, &mut rng)?;
    let cls = train_classifier(cls, &images, &labels, &schedule, &cfg.classifier_train())?;

    let (den_path, cls_path) = checkpoint_paths(cfg);
    let steps = schedule.steps();
    save_checkpoint(&den_path, &Checkpoint { net: den.model.conditioned().clone(), steps })?;
    save_checkpoint(&cls_path, &Checkpoint { net: cls.model.conditioned().clone(), steps })?;

    let rows = [("denoiser", &den.losses), ("classifier", &cls.losses)]
        .into_iter()
        .flat_map(|(name, losses)| {
            losses
                .iter()
                .enumerate()
                .map(move |(i, l)| [name.to_string(), (i + 1).to_string(), l.to_string()])
        });
    write_csv(&cfg.output.join(LOSSES_FILE), &LOSS_HEADER, rows)?;

    Ok(TrainOutcome {
        denoiser: den.model,
        classifier: cls.model,
        denoiser_losses: den.losses,
        classifier_losses: cls.losses,
    })
}

/// What `detect` runs on.
#[derive(Debug, Clone)]
pub enum DetectInput {
    /// Every sample of the configured split.
    Split,
    /// A single image file; it carries no label.
    Image(PathBuf),
}

#[derive(Debug, Clone)]
pub struct DetectionRecord {
    pub name: String,
    pub label: Option<usize>,
    pub result: DetectionResult,
    pub encode_seconds: f64,
    pub decode_seconds: f64,
}

struct Target {
    name: String,
    label: Option<usize>,
    image: ImageTensor,
}

/// Runs detection on `input` and writes per-image CSV rows, timings and
/// (optionally) the image triplets and trajectories.
pub fn cmd_detect(cfg: &RunConfig, input: &DetectInput, workers: Option<usize>) -> Result<Vec<DetectionRecord>> {
    write_snapshot(cfg, "detect")?;
    let schedule = cfg.schedule()?;
    let params = cfg.detection_params(&schedule);

    let (targets, models) = match input {
        DetectInput::Split => {
            let data = load_dataset(&cfg.dataset)?;
            let targets = data
                .split(cfg.detect.split.into())
                .iter()
                .map(|s| Target {
                    name: s.name.clone(),
                    label: Some(s.label),
                    image: s.image.clone(),
                })
                .collect();
            let models = Models::load(cfg, data.manifest.shape(), &data.train)?;
            (targets, models)
        }
        DetectInput::Image(path) => {
            let image = load_image(path)?;
            let models = match cfg.backend {
                crate::config::Backend::Trained => Models::load_trained(cfg, image.shape())?,
                crate::config::Backend::Analytic => {
                    let data = load_dataset(&cfg.dataset)?;
                    Models::fit_analytic(&data.train, cfg.model.variance_floor)?
                }
            };
            let name = path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "image".into());
            (vec![Target { name, label: None, image }], models)
        }
    };

    let records = with_pool(workers, || {
        ordered_map(&targets, |index, target| run_one(cfg, &schedule, params, &models, index, target))
    })??;

    let detection_rows = records.iter().enumerate().map(|(i, r)| {
        [
            i.to_string(),
            r.name.clone(),
            r.label.map(|l| l.to_string()).unwrap_or_default(),
            r.result.params.scale.to_string(),
            r.result.params.noise_level.to_string(),
            r.result.params.healthy_class.to_string(),
            r.result.score.to_string(),
        ]
    });
    write_csv(&cfg.output.join(DETECTIONS_FILE), &DETECTION_HEADER, detection_rows)?;
    let timing_rows = records.iter().enumerate().map(|(i, r)| {
        [
            i.to_string(),
            r.name.clone(),
            format!("{:.6}", r.encode_seconds),
            format!("{:.6}", r.decode_seconds),
        ]
    });
    write_csv(&cfg.output.join(TIMINGS_FILE), &TIMING_HEADER, timing_rows)?;
    Ok(records)
}

fn run_one(
    cfg: &RunConfig,
    schedule: &Schedule,
    params: DetectionParams,
    models: &Models,
    index: usize,
    target: &Target,
) -> Result<DetectionRecord> {
    let x = &target.image;
    let traj_dir = cfg.output.join(TRAJECTORIES_DIR).join(&target.name);
    let every = cfg.detect.trajectory_every;

    let start = Instant::now();
    let (result, encode_seconds) = if cfg.detect.ablation {
        let seed = derive_seed(cfg.seed, SeedStream::Ablation).wrapping_add(index as u64);
        let r = detect_stochastic_ablation(x, params, models.eps(), models.classes(), schedule, seed)?;
        (r, 0.0)
    } else {
        let x_level = encode(x, params.noise_level, models.eps(), schedule)?;
        let encode_seconds = start.elapsed().as_secs_f64();
        let r = if every > 0 {
            save_image(&traj_dir.join(format!("x_{:05}.img", params.noise_level)), &x_level)?;
            let mut saved = Ok(());
            let r = detect_from_encoded_with_hook(x, &x_level, params, models.eps(), models.classes(), schedule, |t, state| {
                if saved.is_ok() && (t % every == 0) {
                    saved = save_image(&traj_dir.join(format!("x_{t:05}.img")), state);
                }
            })?;
            saved?;
            r
        } else {
            detect_from_encoded(x, &x_level, params, models.eps(), models.classes(), schedule)?
        };
        (r, encode_seconds)
    };
    let decode_seconds = start.elapsed().as_secs_f64() - encode_seconds;

    if cfg.detect.save_images {
        let dir = cfg.output.join(IMAGES_DIR);
        let stem = |suffix: &str, ext: &str| dir.join(format!("{}_{suffix}.{ext}", target.name));
        save_image(&stem("input", "img"), &result.input)?;
        save_image(&stem("synthetic", "img"), &result.synthetic)?;
        save_image(&stem("anomaly", "img"), &result.anomaly_map)?;
        save_pgm(&stem("input", "pgm"), &result.input, 0, None)?;
        save_pgm(&stem("synthetic", "pgm"), &result.synthetic, 0, None)?;
        let peak = result.anomaly_map.data().iter().copied().fold(0.0, f64::max);
        save_pgm(&stem("anomaly", "pgm"), &result.anomaly_map, 0, Some(peak))?;
    }

    Ok(DetectionRecord {
        name: target.name.clone(),
        label: target.label,
        result,
        encode_seconds,
        decode_seconds,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepRow {
    pub scale: f64,
    pub noise_level: usize,
    pub summary: EvalSummary,
}

/// Evaluates every `(s, L)` grid point on the configured split. Encodings
/// are shared across scales; rows come out in grid order, scales outermost.
pub fn cmd_sweep(cfg: &RunConfig, workers: Option<usize>) -> Result<Vec<SweepRow>> {
    write_snapshot(cfg, "sweep")?;
    let schedule = cfg.schedule()?;
    let data = load_dataset(&cfg.dataset)?;
    let models = Models::load(cfg, data.manifest.shape(), &data.train)?;
    let samples = data.split(cfg.detect.split.into());
    let rows = with_pool(workers, || sweep_grid(cfg, &schedule, &models, samples))??;

    let csv_rows = rows.iter().map(|r| {
        [
            sig6(r.scale),
            r.noise_level.to_string(),
            opt6(r.summary.mean_dice),
            opt6(r.summary.pixel_auroc),
            opt6(r.summary.image_auroc),
            r.summary.n_images.to_string(),
        ]
    });
    write_csv(&cfg.output.join(SWEEP_FILE), &SWEEP_HEADER, csv_rows)?;
    Ok(rows)
}

/// The sweep computation without file output.
pub fn sweep_grid(cfg: &RunConfig, schedule: &Schedule, models: &Models, samples: &[Sample]) -> Result<Vec<SweepRow>> {
    let levels = cfg.sweep_levels();
    let scales = &cfg.sweep.scales;
    let base = cfg.detection_params(schedule);

    let encode_jobs: Vec<(usize, usize)> = (0..levels.len())
        .flat_map(|l| (0..samples.len()).map(move |i| (l, i)))
        .collect();
    let encoded = ordered_map(&encode_jobs, |_, &(l, i)| Ok(encode(&samples[i].image, levels[l], models.eps(), schedule)?))?;

    let decode_jobs: Vec<(usize, usize, usize)> = (0..scales.len())
        .flat_map(|s| (0..levels.len()).flat_map(move |l| (0..samples.len()).map(move |i| (s, l, i))))
        .collect();
    let results = ordered_map(&decode_jobs, |_, &(s, l, i)| {
        let params = DetectionParams {
            scale: scales[s],
            noise_level: levels[l],
            ..base
        };
        let x_level = &encoded[l * samples.len() + i];
        Ok(detect_from_encoded(&samples[i].image, x_level, params, models.eps(), models.classes(), schedule)?)
    })?;

    let mut rows = Vec::with_capacity(scales.len() * levels.len());
    for (cell, chunk) in results.chunks(samples.len().max(1)).enumerate() {
        let (s, l) = (cell / levels.len(), cell % levels.len());
        let items: Vec<EvalItem<'_>> = chunk
            .iter()
            .zip(samples)
            .map(|(r, sample)| EvalItem {
                anomaly_map: &r.anomaly_map,
                score: r.score,
                diseased: sample.label == DISEASED,
                mask: Some(&sample.mask),
            })
            .collect();
        rows.push(SweepRow {
            scale: scales[s],
            noise_level: levels[l],
            summary: evaluate_set_with_bins(&items, cfg.eval.threshold_mode.into(), cfg.eval.otsu_bins)?,
        });
    }
    Ok(rows)
}

/// Scores the anomaly maps saved by `detect` in `results` against the
/// dataset masks of the configured split.
pub fn cmd_eval(cfg: &RunConfig, results: &Path) -> Result<EvalSummary> {
    write_snapshot(cfg, "eval")?;
    let data = load_dataset(&cfg.dataset)?;
    let by_name: HashMap<&str, &Sample> = data
        .split(Split::from(cfg.detect.split))
        .iter()
        .map(|s| (s.name.as_str(), s))
        .collect();
    let rows = read_csv(&results.join(DETECTIONS_FILE), &DETECTION_HEADER)?;
    if rows.is_empty() {
        return Err(Error::Core(ddim_anomaly_core::Error::EmptyInput));
    }

    let mut loaded: Vec<(ImageTensor, f64, bool, &BinaryMask)> = Vec::with_capacity(rows.len());
    for row in &rows {
        let name = &row[1];
        let sample = by_name.get(name).ok_or_else(|| {
            Error::ManifestMismatch(format!("detection `{name}` is not in the {} split", Split::from(cfg.detect.split).dir_name()))
        })?;
        let label: usize = row[2]
            .parse()
            .map_err(|_| Error::Config(format!("detection `{name}` has no label")))?;
        if label != sample.label {
            return Err(Error::ManifestMismatch(format!("detection `{name}` labelled {label}, dataset says {}", sample.label)));
        }
        let score: f64 = row[6]
            .parse()
            .map_err(|_| Error::Config(format!("detection `{name}` has a malformed score")))?;
        let map = load_image(&results.join(IMAGES_DIR).join(format!("{name}_anomaly.img")))?;
        let expected = Shape::new(1, sample.mask.height(), sample.mask.width());
        if map.shape() != expected {
            return Err(Error::Core(ddim_anomaly_core::Error::ShapeMismatch {
                expected,
                found: map.shape(),
            }));
        }
        loaded.push((map, score, label != HEALTHY, &sample.mask));
    }
    let items: Vec<EvalItem<'_>> = loaded
        .iter()
        .map(|(map, score, diseased, mask)| EvalItem {
            anomaly_map: map,
            score: *score,
            diseased: *diseased,
            mask: Some(*mask),
        })
        .collect();
    let summary = evaluate_set_with_bins(&items, cfg.eval.threshold_mode.into(), cfg.eval.otsu_bins)?;
    write_csv(&cfg.output.join(EVAL_FILE), &EVAL_HEADER, [eval_row(&summary)])?;
    Ok(summary)
}
