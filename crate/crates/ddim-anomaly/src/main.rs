use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ddim_anomaly::commands::{cmd_detect, cmd_eval, cmd_gen_data, cmd_sweep, cmd_train, DetectInput};
use ddim_anomaly::parallel::worker_count;
use ddim_anomaly::report::opt6;
use ddim_anomaly::{Error, Result, RunConfig};

/// Weakly supervised anomaly detection with DDIM encoding and
/// classifier-guided decoding, on synthetic phantoms.
#[derive(Parser)]
#[command(name = "ddim-anomaly", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the toy dataset.
    GenData(Common),
    /// Train the denoiser and classifier and write checkpoints.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        denoiser_iterations: Option<usize>,
        #[arg(long)]
        classifier_iterations: Option<usize>,
    },
    /// Run detection on a split or a single image.
    Detect {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        detect: DetectFlags,
        /// Image file to process instead of a dataset split.
        #[arg(long)]
        image: Option<PathBuf>,
        /// Write every n-th decoding state.
        #[arg(long)]
        trajectory_every: Option<usize>,
        /// Use the stochastic ablation instead of deterministic encoding.
        #[arg(long)]
        ablation: bool,
    },
    /// Evaluate a grid of gradient scales and noise levels.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Comma-separated gradient scales.
        #[arg(long, value_delimiter = ',')]
        scales: Option<Vec<f64>>,
        /// Comma-separated noise levels.
        #[arg(long, value_delimiter = ',')]
        noise_levels: Option<Vec<usize>>,
        #[arg(long)]
        split: Option<String>,
    },
    /// Score saved detections against the dataset masks.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Directory holding `detections.csv` and `images/`; defaults to the
        /// output directory.
        #[arg(long)]
        results: Option<PathBuf>,
        /// `per-image` or `mean-of-thresholds`.
        #[arg(long)]
        threshold_mode: Option<String>,
        #[arg(long)]
        split: Option<String>,
    },
}

#[derive(Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set detect.scale=50`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    output: Option<PathBuf>,
    /// `analytic` or `trained`.
    #[arg(long)]
    backend: Option<String>,
    /// Worker threads; defaults to $DDIM_ANOMALY_WORKERS, then all cores.
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args)]
struct DetectFlags {
    #[arg(long)]
    scale: Option<f64>,
    #[arg(long)]
    noise_level: Option<usize>,
    #[arg(long)]
    split: Option<String>,
}

fn quote(s: &str) -> String {
    format!("\"{}\"", s.replace('\\', "\\\\").replace('"', "\\\""))
}

impl Common {
    /// Resolves the configuration; explicit flags are applied after `--set`.
    fn resolve(&self, extra: Vec<String>) -> Result<(RunConfig, Option<usize>)> {
        let mut overrides = self.set.clone();
        if let Some(v) = self.seed {
            overrides.push(format!("seed={v}"));
        }
        if let Some(p) = &self.dataset {
            overrides.push(format!("dataset={}", quote(&p.to_string_lossy())));
        }
        if let Some(p) = &self.output {
            overrides.push(format!("output={}", quote(&p.to_string_lossy())));
        }
        if let Some(b) = &self.backend {
            overrides.push(format!("backend={}", quote(b)));
        }
        overrides.extend(extra);
        let cfg = RunConfig::load(self.config.as_deref(), &overrides)?;
        Ok((cfg, worker_count(self.workers)?))
    }
}

fn list<T: ToString>(values: &[T]) -> String {
    format!("[{}]", values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(", "))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(common) => {
            let (cfg, _) = common.resolve(Vec::new())?;
            let data = cmd_gen_data(&cfg)?;
            println!(
                "wrote {} training and {} test samples to {}",
                data.train.len(),
                data.test.len(),
                cfg.dataset.display()
            );
        }
        Command::Train {
            common,
            denoiser_iterations,
            classifier_iterations,
        } => {
            let mut extra = Vec::new();
            if let Some(n) = denoiser_iterations {
                extra.push(format!("train.denoiser.iterations={n}"));
            }
            if let Some(n) = classifier_iterations {
                extra.push(format!("train.classifier.iterations={n}"));
            }
            let (cfg, _) = common.resolve(extra)?;
            let out = cmd_train(&cfg)?;
            let last = |l: &[f64]| l.last().map(|v| format!("{v:.6}")).unwrap_or_else(|| "NA".into());
            println!(
                "trained denoiser (final loss {}) and classifier (final loss {}); checkpoints in {}",
                last(&out.denoiser_losses),
                last(&out.classifier_losses),
                cfg.checkpoint_dir().display()
            );
        }
        Command::Detect {
            common,
            detect,
            image,
            trajectory_every,
            ablation,
        } => {
            let mut extra = Vec::new();
            if let Some(s) = detect.scale {
                extra.push(format!("detect.scale={s:?}"));
            }
            if let Some(l) = detect.noise_level {
                extra.push(format!("detect.noise_level={l}"));
            }
            if let Some(s) = &detect.split {
                extra.push(format!("detect.split={}", quote(s)));
            }
            if let Some(n) = trajectory_every {
                extra.push(format!("detect.trajectory_every={n}"));
            }
            if ablation {
                extra.push("detect.ablation=true".into());
            }
            let (cfg, workers) = common.resolve(extra)?;
            let input = match image {
                Some(p) => DetectInput::Image(p),
                None => DetectInput::Split,
            };
            let records = cmd_detect(&cfg, &input, workers)?;
            let mean = records.iter().map(|r| r.result.score).sum::<f64>() / records.len().max(1) as f64;
            println!(
                "detected {} images, mean score {mean:.6}; results in {}",
                records.len(),
                cfg.output.display()
            );
        }
        Command::Sweep {
            common,
            scales,
            noise_levels,
            split,
        } => {
            let mut extra = Vec::new();
            if let Some(s) = scales {
                extra.push(format!("sweep.scales={}", list(&s.iter().map(|v| format!("{v:?}")).collect::<Vec<_>>())));
            }
            if let Some(l) = noise_levels {
                extra.push(format!("sweep.noise_levels={}", list(&l)));
            }
            if let Some(s) = split {
                extra.push(format!("detect.split={}", quote(&s)));
            }
            let (cfg, workers) = common.resolve(extra)?;
            let rows = cmd_sweep(&cfg, workers)?;
            for r in &rows {
                println!(
                    "s={} L={} dice={} pixel_auroc={} image_auroc={}",
                    r.scale,
                    r.noise_level,
                    opt6(r.summary.mean_dice),
                    opt6(r.summary.pixel_auroc),
                    opt6(r.summary.image_auroc)
                );
            }
        }
        Command::Eval {
            common,
            results,
            threshold_mode,
            split,
        } => {
            let mut extra = Vec::new();
            if let Some(m) = threshold_mode {
                extra.push(format!("eval.threshold_mode={}", quote(&m)));
            }
            if let Some(s) = split {
                extra.push(format!("detect.split={}", quote(&s)));
            }
            let (cfg, _) = common.resolve(extra)?;
            let results = results.unwrap_or_else(|| cfg.output.clone());
            let s = cmd_eval(&cfg, &results)?;
            println!(
                "mean_dice={} pixel_auroc={} image_auroc={} n_images={} n_diseased={}",
                opt6(s.mean_dice),
                opt6(s.pixel_auroc),
                opt6(s.image_auroc),
                s.n_images,
                s.n_diseased
            );
        }
    }
    Ok(())
}

/// One line, `error: <kind>: <message>`, with the full cause chain.
fn error_line(e: &Error) -> String {
    let mut msg = e.to_string();
    let mut source = std::error::Error::source(e);
    while let Some(s) = source {
        let text = s.to_string();
        if !msg.contains(&text) {
            msg.push_str(": ");
            msg.push_str(&text);
        }
        source = s.source();
    }
    format!("error: {}: {}", e.kind(), msg.replace('\n', " "))
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_line(&e));
            ExitCode::FAILURE
        }
    }
}
