//! End-to-end operations behind the CLI: training runs with checkpoints and
//! metrics, feature extraction from checkpoints, and invariance checks.

use std::fs::OpenOptions;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::archive::{read_archive, write_archive};
use crate::autodiff::{Real, Tensor};
use crate::config::{Precision, RunConfig};
use crate::error::{Error, Result};
use crate::eval::{extract_features, FeatureTable};
use crate::geometry::{apply_rotation, io::load_dataset, normalize_pose, random_rotation, OrientedPointSet};
use crate::sdmm::{train_epoch, DistillState, EpochMetrics};
use crate::transformer::Encoder;

pub const METRICS_FILE: &str = "metrics.csv";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const NONFINITE_SNAPSHOT: &str = "nonfinite-snapshot.ckpt";

/// One row of `metrics.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub epoch: usize,
    pub loss: f64,
    pub teacher_entropy: f64,
    pub lr: f64,
    pub lambda: f64,
}

impl From<&EpochMetrics> for MetricsRow {
    fn from(m: &EpochMetrics) -> Self {
        Self { epoch: m.epoch, loss: m.loss, teacher_entropy: m.teacher_entropy, lr: m.lr, lambda: m.lambda }
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| csv_error(path, e))).collect()
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Format { path: path.display().to_string(), line: 0, msg: format!("{other:?}") },
    }
}

/// Pose-normalized samples of a manifest.
pub fn load_normalized(manifest: &Path, mesh_points: usize, seed: u64) -> Result<Vec<OrientedPointSet>> {
    load_dataset(manifest, mesh_points, seed)?.iter().map(normalize_pose).collect()
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    /// Metrics of the epochs run by this call.
    pub metrics: Vec<EpochMetrics>,
    pub final_checkpoint: PathBuf,
}

/// Trains per `cfg`, writing periodic checkpoints, `metrics.csv` and
/// `final.ckpt` under `cfg.checkpoint_dir`. With `resume`, training continues
/// from that checkpoint and metrics rows are appended.
pub fn train(cfg: &RunConfig, resume: Option<&Path>) -> Result<TrainReport> {
    cfg.validate()?;
    let data = load_normalized(&cfg.manifest, cfg.mesh_points, cfg.seed)?;
    match cfg.precision {
        Precision::F64 => train_with::<f64>(cfg, &data, resume),
        Precision::F32 => train_with::<f32>(cfg, &data, resume),
    }
}

/// Same as [`train`] on an already loaded (and pose-normalized) dataset.
pub fn train_on(cfg: &RunConfig, data: &[OrientedPointSet], resume: Option<&Path>) -> Result<TrainReport> {
    cfg.validate()?;
    match cfg.precision {
        Precision::F64 => train_with::<f64>(cfg, data, resume),
        Precision::F32 => train_with::<f32>(cfg, data, resume),
    }
}

fn save<T: Real>(state: &DistillState<T>, path: &Path) -> Result<()> {
    let entries = state.archive_entries();
    let refs: Vec<(String, &Tensor<T>)> = entries.iter().map(|(n, t)| (n.clone(), t)).collect();
    write_archive(path, &refs)
}

fn train_with<T: Real>(cfg: &RunConfig, data: &[OrientedPointSet], resume: Option<&Path>) -> Result<TrainReport> {
    if data.len() < cfg.distill.batch_size {
        return Err(Error::argument(format!(
            "dataset has {} samples, fewer than the minibatch size {}",
            data.len(),
            cfg.distill.batch_size
        )));
    }
    let mut state = match resume {
        Some(path) => {
            let entries = read_archive(path)?;
            DistillState::<T>::from_archive(&cfg.tokenizer, &cfg.transformer, &cfg.distill, &entries)?
        }
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            DistillState::<T>::new(&cfg.tokenizer, &cfg.transformer, &cfg.distill, &mut rng)?
        }
    };
    let dir = &cfg.checkpoint_dir;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let metrics_path = dir.join(METRICS_FILE);
    let mut writer = if resume.is_some() && metrics_path.exists() {
        let f = OpenOptions::new().append(true).open(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
        csv::WriterBuilder::new().has_headers(false).from_writer(f)
    } else {
        let f = std::fs::File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
        csv::Writer::from_writer(f)
    };

    let mut metrics = Vec::new();
    while state.epoch < cfg.distill.epochs {
        let m = match train_epoch(&mut state, data, cfg.seed) {
            Ok(m) => m,
            Err(Error::Numeric(msg)) => {
                let snap = dir.join(NONFINITE_SNAPSHOT);
                save(&state, &snap)?;
                return Err(Error::Numeric(format!("{msg}; last good state saved to {}", snap.display())));
            }
            Err(e) => return Err(e),
        };
        log::info!(
            "epoch {} loss {:.4} teacher entropy {:.4} lr {:.3e} lambda {:.6}",
            m.epoch,
            m.loss,
            m.teacher_entropy,
            m.lr,
            m.lambda
        );
        writer.serialize(MetricsRow::from(&m)).map_err(|e| csv_error(&metrics_path, e))?;
        writer.flush().map_err(|e| Error::io(&metrics_path, e))?;
        if cfg.checkpoint_every > 0 && state.epoch % cfg.checkpoint_every == 0 {
            save(&state, &dir.join(format!("epoch-{:04}.ckpt", state.epoch)))?;
        }
        metrics.push(m);
    }
    let final_checkpoint = dir.join(FINAL_CHECKPOINT);
    save(&state, &final_checkpoint)?;
    Ok(TrainReport { metrics, final_checkpoint })
}

/// An encoder in the precision chosen by the run config.
#[derive(Debug, Clone)]
pub enum AnyEncoder {
    F64(Encoder<f64>),
    F32(Encoder<f32>),
}

/// Prefix of the teacher encoder inside a training checkpoint.
pub const TEACHER_PREFIX: &str = "teacher.enc.";

impl AnyEncoder {
    /// Freshly initialized encoder, seeded like a training run.
    pub fn init(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let enc = Encoder::<f64>::init(&cfg.tokenizer, &cfg.transformer, &mut rng)?;
        Ok(Self::from_f64(enc, cfg.precision))
    }

    pub fn from_f64(enc: Encoder<f64>, precision: Precision) -> Self {
        match precision {
            Precision::F64 => Self::F64(enc),
            Precision::F32 => Self::F32(enc.cast()),
        }
    }

    /// Loads the teacher encoder of a training checkpoint, or the bare
    /// encoder tensors of an archive without prefixes.
    pub fn load(cfg: &RunConfig, checkpoint: &Path) -> Result<Self> {
        cfg.validate()?;
        let entries = read_archive(checkpoint)?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut enc = Encoder::<f64>::init(&cfg.tokenizer, &cfg.transformer, &mut rng)?;
        let prefix = if entries.iter().any(|(n, _)| n.starts_with(TEACHER_PREFIX)) { TEACHER_PREFIX } else { "" };
        enc.load_tensors(&entries, prefix).map_err(|e| match e {
            Error::Argument(msg) => Error::argument(format!("{}: {msg}", checkpoint.display())),
            other => other,
        })?;
        Ok(Self::from_f64(enc, cfg.precision))
    }

    pub fn latent_dim(&self) -> usize {
        match self {
            Self::F64(e) => e.tr.latent_width,
            Self::F32(e) => e.tr.latent_width,
        }
    }

    /// Latents of pose-normalized point sets; see [`extract_features`].
    pub fn extract(&self, sets: &[OrientedPointSet], rotate: bool, seed: u64) -> Result<FeatureTable> {
        match self {
            Self::F64(e) => extract_features(e, sets, rotate, seed),
            Self::F32(e) => extract_features(e, sets, rotate, seed),
        }
    }

    /// Eval-mode latent of one point set (no pose normalization).
    pub fn embed(&self, ps: &OrientedPointSet) -> Result<Vec<f64>> {
        match self {
            Self::F64(e) => e.embed(ps),
            Self::F32(e) => Ok(e.embed(ps)?.iter().map(|v| v.as_f64()).collect()),
        }
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

#[derive(Debug, Clone, PartialEq)]
pub struct InvarianceReport {
    /// Worst cosine per sample over its trials.
    pub per_sample_min: Vec<f64>,
    pub min: f64,
    pub mean: f64,
}

impl InvarianceReport {
    pub fn passes(&self, threshold: f64) -> bool {
        self.min >= threshold
    }
}

/// Cosine between the latent of each (pose-normalized) sample and the latents
/// of `trials` random rotations of it. Sample `i` draws its rotations from
/// stream `i` of `seed`.
pub fn check_invariance(
    encoder: &AnyEncoder,
    sets: &[OrientedPointSet],
    trials: usize,
    seed: u64,
) -> Result<InvarianceReport> {
    if trials == 0 {
        return Err(Error::argument("trials must be at least 1"));
    }
    if sets.is_empty() {
        return Err(Error::argument("no samples to check"));
    }
    let mut per_sample_min = Vec::with_capacity(sets.len());
    let mut sum = 0.0;
    for (i, ps) in sets.iter().enumerate() {
        let ps = normalize_pose(ps)?;
        let base = encoder.embed(&ps)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let mut worst = f64::INFINITY;
        for _ in 0..trials {
            let rotated = apply_rotation(&ps, &random_rotation(&mut rng));
            let c = cosine(&base, &encoder.embed(&rotated)?);
            worst = worst.min(c);
            sum += c;
        }
        per_sample_min.push(worst);
    }
    let min = per_sample_min.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(InvarianceReport { per_sample_min, min, mean: sum / (sets.len() * trials) as f64 })
}
