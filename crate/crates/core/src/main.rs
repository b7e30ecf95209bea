use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use ript::config::RunConfig;
use ript::eval::{kmeans_nmi, label_prior_baseline, linear_probe, macro_map, FeatureTable, ProbeConfig};
use ript::pipeline::{check_invariance, load_normalized, train, AnyEncoder};
use ript::synth::{write_dataset, Shape, SynthSpec};
use ript::{Error, Result};

/// Exit code for a completed check whose result is below its threshold.
const CHECK_FAILED: u8 = 1;

#[derive(Parser, Debug)]
#[command(name = "ript", version, about = "Rotation-invariant point-set features: synthesis, training, extraction, evaluation")]
struct Cli {
    /// Overrides the seed of every random consumer (config seed otherwise, 0 without a config).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Upper bound on worker threads.
    #[arg(long, global = true, env = "RIPT_WORKERS", default_value_t = 1)]
    workers: usize,

    /// More log output (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Sample a synthetic dataset of analytic shapes and write its manifest.
    Synth {
        /// Comma-separated shape names.
        #[arg(long, value_delimiter = ',', default_value = "sphere,box,cylinder,torus")]
        classes: Vec<String>,
        #[arg(long, default_value_t = 50)]
        per_class: usize,
        #[arg(long, default_value_t = 256)]
        points: usize,
        /// Apply an independent random rotation to each sample.
        #[arg(long)]
        rotate: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train with self-distillation; writes checkpoints and metrics.csv.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Write the latent features of a manifest's samples.
    Extract {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Defaults to the config's manifest.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Rotation::Nr)]
        rotation: Rotation,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compute retrieval, probe or clustering metrics from feature files.
    Eval {
        #[arg(long, value_enum)]
        task: Task,
        /// Features of the evaluated (test) split.
        #[arg(long)]
        test: PathBuf,
        /// Features of the training split (probe only).
        #[arg(long)]
        train: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        restarts: usize,
        /// Metrics CSV to write.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare latents of each sample against latents of rotated copies.
    CheckInvariance {
        #[arg(long)]
        config: PathBuf,
        /// Omit to check a freshly initialized model.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        trials: usize,
        /// Overrides the config's invariance threshold.
        #[arg(long)]
        threshold: Option<f64>,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Rotation {
    /// No rotation.
    Nr,
    /// Independent random rotation per sample.
    Rr,
}

#[derive(Clone, Copy, Debug, ValueEnum, PartialEq)]
enum Task {
    Retrieval,
    Probe,
    Cluster,
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn write_metrics(path: &Path, rows: &[(&str, &str, f64)]) -> Result<()> {
    let to_err = |e: csv::Error| match e.into_kind() {
        csv::ErrorKind::Io(e) => Error::io(path, e),
        other => Error::argument(format!("{}: {other:?}", path.display())),
    };
    let mut w = csv::Writer::from_path(path).map_err(to_err)?;
    w.write_record(["task", "metric", "value"]).map_err(to_err)?;
    for (task, metric, value) in rows {
        w.write_record([*task, *metric, &value.to_string()]).map_err(to_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn run(cli: Cli) -> Result<u8> {
    if cli.workers == 0 {
        return Err(Error::argument("--workers must be at least 1"));
    }
    log::debug!("worker cap {}", cli.workers);
    match cli.command {
        Command::Synth { classes, per_class, points, rotate, out } => {
            let classes = classes.iter().map(|c| c.parse::<Shape>()).collect::<Result<Vec<_>>>()?;
            let spec = SynthSpec { classes, per_class, points, seed: cli.seed.unwrap_or(0), rotate };
            let manifest = write_dataset(&spec, &out)?;
            println!("wrote {} samples; manifest {}", spec.classes.len() * per_class, manifest.display());
        }
        Command::Train { config, resume } => {
            let cfg = load_config(&config, cli.seed)?;
            let report = train(&cfg, resume.as_deref())?;
            if let Some(last) = report.metrics.last() {
                println!("epoch {} loss {:.6} teacher entropy {:.6}", last.epoch, last.loss, last.teacher_entropy);
            }
            println!("final checkpoint {}", report.final_checkpoint.display());
        }
        Command::Extract { config, checkpoint, manifest, rotation, out } => {
            let cfg = load_config(&config, cli.seed)?;
            let encoder = AnyEncoder::load(&cfg, &checkpoint)?;
            let manifest = manifest.unwrap_or_else(|| cfg.manifest.clone());
            let sets = load_normalized(&manifest, cfg.mesh_points, cfg.seed)?;
            let table = encoder.extract(&sets, matches!(rotation, Rotation::Rr), cfg.seed)?;
            table.write(&out)?;
            println!("wrote {} × {} features to {}", table.len(), table.dim(), out.display());
        }
        Command::Eval { task, test, train, restarts, out } => {
            let test_t = FeatureTable::read(&test)?;
            let seed = cli.seed.unwrap_or(0);
            let rows: Vec<(&str, &str, f64)> = match task {
                Task::Retrieval => vec![
                    ("retrieval", "macro_map", macro_map(&test_t)?),
                    ("retrieval", "label_prior_baseline", label_prior_baseline(&test_t.labels)?),
                ],
                Task::Probe => {
                    let train = train.ok_or_else(|| Error::argument("--train is required for the probe task"))?;
                    let train_t = FeatureTable::read(&train)?;
                    let acc = linear_probe(&train_t, &test_t, &ProbeConfig { seed, ..Default::default() })?;
                    vec![("probe", "macro_accuracy", acc)]
                }
                Task::Cluster => vec![("cluster", "nmi", kmeans_nmi(&test_t, restarts, seed)?)],
            };
            for (task, metric, value) in &rows {
                println!("{task} {metric} {value:.4}");
            }
            if let Some(out) = out {
                write_metrics(&out, &rows)?;
            }
        }
        Command::CheckInvariance { config, checkpoint, manifest, trials, threshold } => {
            let cfg = load_config(&config, cli.seed)?;
            if trials == 0 {
                return Err(Error::argument("--trials must be at least 1"));
            }
            let encoder = match &checkpoint {
                Some(path) => AnyEncoder::load(&cfg, path)?,
                None => AnyEncoder::init(&cfg)?,
            };
            let manifest = manifest.unwrap_or_else(|| cfg.manifest.clone());
            let sets = load_normalized(&manifest, cfg.mesh_points, cfg.seed)?;
            let report = check_invariance(&encoder, &sets, trials, cfg.seed)?;
            let threshold = threshold.unwrap_or(cfg.invariance_threshold);
            println!(
                "samples {} trials {} min cosine {:.9} mean cosine {:.9} threshold {}",
                sets.len(),
                trials,
                report.min,
                report.mean,
                threshold
            );
            if !report.passes(threshold) {
                let worst = report
                    .per_sample_min
                    .iter()
                    .enumerate()
                    .fold((0, f64::INFINITY), |b, (i, &c)| if c < b.1 { (i, c) } else { b });
                println!("FAIL: sample {} reaches cosine {:.9} < {threshold}", worst.0, worst.1);
                return Ok(CHECK_FAILED);
            }
            println!("PASS");
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
