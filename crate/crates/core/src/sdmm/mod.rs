//! Self-distillation with multi-crop and cut-mix views.
//!
//! A student network is trained to match the sharpened, centered outputs of
//! an EMA teacher across several views of each sample, plus a cut-mix view
//! supervised by linearly mixed teacher labels.

mod train;
pub mod views;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use train::{
    build_bundle, train_epoch, DistillState, EpochMetrics, Network, Projector, ViewBundle, CHECKPOINT_SCALARS,
};
pub use views::{aniso_scale, cut_mix, multi_crop};

/// Log-probabilities are clamped below at this value inside cross-entropies.
pub const LOG_FLOOR: f64 = -30.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ViewSet {
    /// Two globals, two locals and the cut-mix view.
    #[default]
    Full,
    /// The two global views only.
    GlobalOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CenterSource {
    /// Raw teacher logits.
    #[default]
    Logits,
    /// Teacher probabilities after the sharpened softmax.
    Probabilities,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    /// Samples per minibatch (E).
    pub batch_size: usize,
    /// Projector output width (H).
    pub out_dim: usize,
    pub projector_hidden: usize,
    pub projector_bottleneck: usize,
    pub student_temp: f64,
    pub teacher_temp: f64,
    pub center_momentum: f64,
    pub center_source: CenterSource,
    pub ema_start: f64,
    pub epochs: usize,
    pub warmup_epochs: f64,
    pub lr_base: f64,
    pub lr_peak: f64,
    pub global_points: usize,
    pub local_points: usize,
    pub global_crop: (f64, f64),
    pub local_crop: (f64, f64),
    pub scale_range: (f64, f64),
    pub views: ViewSet,
    /// Rotate each training sample (all of its views alike) by a fresh random rotation.
    pub rotate_training: bool,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            out_dim: 1024,
            projector_hidden: 1024,
            projector_bottleneck: 128,
            student_temp: 0.4,
            teacher_temp: 0.1,
            center_momentum: 0.9,
            center_source: CenterSource::Logits,
            ema_start: 0.996,
            epochs: 200,
            warmup_epochs: 20.0,
            lr_base: 1e-4,
            lr_peak: 5e-4,
            global_points: 1024,
            local_points: 512,
            global_crop: (0.6, 1.0),
            local_crop: (0.4, 0.6),
            scale_range: (0.67, 1.5),
            views: ViewSet::Full,
            rotate_training: false,
        }
    }
}

fn check_range(field: &str, r: (f64, f64), lo: f64, hi: f64) -> Result<()> {
    if !(r.0 >= lo && r.0 <= r.1 && r.1 <= hi) {
        return Err(Error::config(field, format!("must satisfy {lo} ≤ min ≤ max ≤ {hi}, got {r:?}")));
    }
    Ok(())
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("distill.batch_size", self.batch_size),
            ("distill.out_dim", self.out_dim),
            ("distill.projector_hidden", self.projector_hidden),
            ("distill.projector_bottleneck", self.projector_bottleneck),
            ("distill.global_points", self.global_points),
            ("distill.local_points", self.local_points),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be at least 1"));
            }
        }
        if self.batch_size < 2 {
            return Err(Error::config("distill.batch_size", "needs at least 2 samples for a cut-mix partner"));
        }
        for (field, v) in [("distill.student_temp", self.student_temp), ("distill.teacher_temp", self.teacher_temp)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if !(0.0..=1.0).contains(&self.center_momentum) {
            return Err(Error::config("distill.center_momentum", "must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.ema_start) {
            return Err(Error::config("distill.ema_start", "must lie in [0, 1]"));
        }
        if !(self.warmup_epochs >= 0.0 && self.warmup_epochs <= self.epochs as f64) {
            return Err(Error::config("distill.warmup_epochs", "must lie in [0, epochs]"));
        }
        if !(self.lr_base > 0.0 && self.lr_peak > 0.0) {
            return Err(Error::config("distill.lr_base", "learning rates must be positive"));
        }
        check_range("distill.global_crop", self.global_crop, f64::MIN_POSITIVE, 1.0)?;
        check_range("distill.local_crop", self.local_crop, f64::MIN_POSITIVE, 1.0)?;
        check_range("distill.scale_range", self.scale_range, f64::MIN_POSITIVE, f64::MAX)?;
        Ok(())
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            warmup: self.warmup_epochs,
            total: self.epochs as f64,
            base: self.lr_base,
            peak: self.lr_peak,
        }
    }
}

/// Linear warmup from `base` to `peak`, then cosine decay back to `base`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub warmup: f64,
    pub total: f64,
    pub base: f64,
    pub peak: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            warmup: 20.0,
            total: 200.0,
            base: 1e-4,
            peak: 5e-4,
        }
    }
}

impl LrSchedule {
    /// Learning rate at a (fractional) epoch.
    pub fn at(&self, epoch: f64) -> f64 {
        let span = self.peak - self.base;
        if epoch < self.warmup {
            return self.base + span * epoch / self.warmup;
        }
        let decay = self.total - self.warmup;
        if decay <= 0.0 {
            return self.peak;
        }
        let t = ((epoch - self.warmup) / decay).clamp(0.0, 1.0);
        self.base + span * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

/// Learning rate with the default 20-epoch warmup over 200 epochs.
pub fn lr_schedule(epoch: f64) -> f64 {
    LrSchedule::default().at(epoch)
}

/// EMA coefficient at a training step, rising from `start` to 1 on a cosine.
pub fn ema_lambda(step: u64, total_steps: u64, start: f64) -> f64 {
    let t = if total_steps == 0 { 1.0 } else { (step as f64 / total_steps as f64).min(1.0) };
    1.0 - (1.0 - start) * ((std::f64::consts::PI * t).cos() + 1.0) / 2.0
}

/// `θ_t ← λ·θ_t + (1 − λ)·θ_s`.
pub fn ema_update(teacher: &mut [f64], student: &[f64], lambda: f64) {
    for (t, &s) in teacher.iter_mut().zip(student) {
        *t = lambda * *t + (1.0 - lambda) * s;
    }
}

fn check_finite(name: &str, v: &[f64]) -> Result<()> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric(format!("{name}: non-finite input")));
    }
    Ok(())
}

/// Softmax of `logits / temp`.
pub fn tempered_softmax(logits: &[f64], temp: f64) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| ((z - max) / temp).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub fn student_dist(logits: &[f64], temp: f64) -> Result<Vec<f64>> {
    check_finite("student_dist", logits)?;
    Ok(tempered_softmax(logits, temp))
}

pub fn teacher_dist(logits: &[f64], center: &[f64], temp: f64) -> Result<Vec<f64>> {
    check_finite("teacher_dist", logits)?;
    check_finite("teacher_dist", center)?;
    if logits.len() != center.len() {
        return Err(Error::argument("teacher_dist: center width differs from logits"));
    }
    let centered: Vec<f64> = logits.iter().zip(center).map(|(z, c)| z - c).collect();
    Ok(tempered_softmax(&centered, temp))
}

/// `μ ← momentum·μ + (1 − momentum)·mean(batch)`.
pub fn update_center(center: &mut [f64], batch: &[Vec<f64>], momentum: f64) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::argument("update_center: empty batch"));
    }
    let inv = 1.0 / batch.len() as f64;
    for (j, c) in center.iter_mut().enumerate() {
        let mean: f64 = batch.iter().map(|row| row[j]).sum::<f64>() * inv;
        *c = momentum * *c + (1.0 - momentum) * mean;
    }
    Ok(())
}

pub fn mix_labels(da: &[f64], db: &[f64], m: f64) -> Vec<f64> {
    da.iter().zip(db).map(|(a, b)| m * a + (1.0 - m) * b).collect()
}

/// `H(q, p) = −Σ q·log p` with the log clamped at [`LOG_FLOOR`].
pub fn cross_entropy(q: &[f64], p: &[f64]) -> f64 {
    -q.iter().zip(p).map(|(qi, pi)| qi * pi.ln().max(LOG_FLOOR)).sum::<f64>()
}

pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>()
}

/// Teacher-side views.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TeacherView {
    G1,
    G2,
}

/// Student-side views, in the order they are stacked per sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StudentView {
    G1,
    G2,
    L1,
    L2,
    Mixed,
}

impl ViewSet {
    pub fn student_views(self) -> &'static [StudentView] {
        match self {
            ViewSet::Full => &[StudentView::G1, StudentView::G2, StudentView::L1, StudentView::L2, StudentView::Mixed],
            ViewSet::GlobalOnly => &[StudentView::G1, StudentView::G2],
        }
    }

    /// `(teacher, student)` pairs of the multi-view loss: every teacher
    /// global against every other non-mixed student view.
    pub fn multi_pairs(self) -> Vec<(TeacherView, StudentView)> {
        let mut out = Vec::new();
        for (t, same) in [(TeacherView::G1, StudentView::G1), (TeacherView::G2, StudentView::G2)] {
            for &s in self.student_views() {
                if s != same && s != StudentView::Mixed {
                    out.push((t, s));
                }
            }
        }
        out
    }

    pub fn has_mixed(self) -> bool {
        self == ViewSet::Full
    }
}

/// Teacher distributions for one sample: its two globals and the partner's first global.
#[derive(Debug, Clone, Copy)]
pub struct TeacherLabels<'a> {
    pub g1: &'a [f64],
    pub g2: &'a [f64],
    pub partner_g1: &'a [f64],
}

/// Individual cross-entropy terms of one sample's loss.
#[derive(Debug, Clone, PartialEq)]
pub struct LossTerms {
    pub multi: Vec<f64>,
    pub mix: Option<f64>,
}

impl LossTerms {
    pub fn total(&self) -> f64 {
        self.multi.iter().sum::<f64>() + self.mix.unwrap_or(0.0)
    }

    pub fn count(&self) -> usize {
        self.multi.len() + usize::from(self.mix.is_some())
    }
}

/// Per-sample loss from teacher labels and student distributions (indexed like
/// [`ViewSet::student_views`]), with cut-mix ratio `m`.
pub fn sample_loss(teacher: &TeacherLabels<'_>, student: &[&[f64]], m: f64, set: ViewSet) -> Result<LossTerms> {
    let views = set.student_views();
    if student.len() != views.len() {
        return Err(Error::argument(format!(
            "sample_loss: {} student distributions for {} views",
            student.len(),
            views.len()
        )));
    }
    let find = |v: StudentView| student[views.iter().position(|&x| x == v).expect("view in set")];
    let multi = set
        .multi_pairs()
        .into_iter()
        .map(|(t, s)| {
            let q = match t {
                TeacherView::G1 => teacher.g1,
                TeacherView::G2 => teacher.g2,
            };
            cross_entropy(q, find(s))
        })
        .collect();
    let mix = set
        .has_mixed()
        .then(|| cross_entropy(&mix_labels(teacher.g1, teacher.partner_g1, m), find(StudentView::Mixed)));
    Ok(LossTerms { multi, mix })
}
