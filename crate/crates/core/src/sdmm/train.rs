use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::views::{aniso_scale, cut_mix, multi_crop, resample};
use super::{
    ema_lambda, entropy, mix_labels, tempered_softmax, update_center, CenterSource, DistillConfig, StudentView,
    TeacherView, LOG_FLOOR,
};
use crate::autodiff::{adam_step, AdamConfig, AdamState, BnMode, Graph, ParamSet, Real, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::{apply_rotation, random_rotation, OrientedPointSet};
use crate::tokenizer::{TokenGeometry, TokenStart, TokenizerConfig};
use crate::transformer::{Affine, Encoder, EncoderOutput, TransformerConfig};

/// Weight standard deviation of the projector's first layer.
const FIRST_LAYER_STD: f64 = 0.5;

/// Three affine layers (GELU after the first two) mapping latents to logits.
#[derive(Debug, Clone)]
pub struct Projector<T> {
    pub params: ParamSet<T>,
    layers: [Affine; 3],
}

impl<T: Real> Projector<T> {
    pub fn init<R: Rng + ?Sized>(latent: usize, cfg: &DistillConfig, rng: &mut R) -> Self {
        let mut params = ParamSet::new();
        let widths = [latent, cfg.projector_hidden, cfg.projector_bottleneck, cfg.out_dim];
        // The latent is unit-norm, so a first layer scaled by 1/sqrt(fan_in)
        // would leave logits nearly identical across samples; its weights get
        // a fixed standard deviation instead. GELU layers use a He-style bound.
        let gains = [FIRST_LAYER_STD * (widths[0] as f64).sqrt(), 2f64.sqrt(), 2f64.sqrt()];
        let layers = [0, 1, 2].map(|i| {
            Affine::push_scaled(&mut params, &format!("fc{}", i + 1), widths[i], widths[i + 1], gains[i], rng)
        });
        Self { params, layers }
    }

    pub fn forward(&self, g: &mut Graph<T>, vars: &[Var], z: Var) -> Result<Var> {
        let mut h = z;
        for (i, layer) in self.layers.iter().enumerate() {
            let (w, b) = layer.bind(vars);
            h = g.linear(h, w, b)?;
            if i < 2 {
                h = g.gelu(h);
            }
        }
        Ok(h)
    }
}

/// Encoder followed by the projector head.
#[derive(Debug, Clone)]
pub struct Network<T> {
    pub encoder: Encoder<T>,
    pub projector: Projector<T>,
}

impl<T: Real> Network<T> {
    pub fn init<R: Rng + ?Sized>(
        tok: &TokenizerConfig,
        tr: &TransformerConfig,
        cfg: &DistillConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let encoder = Encoder::init(tok, tr, rng)?;
        let projector = Projector::init(tr.latent_width, cfg, rng);
        Ok(Self { encoder, projector })
    }

    /// Binds both parameter sets, returning `(encoder vars, projector vars)`.
    pub fn bind(&self, g: &mut Graph<T>, requires_grad: bool) -> (Vec<Var>, Vec<Var>) {
        (self.encoder.params.bind(g, requires_grad), self.projector.params.bind(g, requires_grad))
    }

    /// Logits `[B, H]` for a batch of tokenized views.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        vars: &(Vec<Var>, Vec<Var>),
        geoms: &[&TokenGeometry],
        mode: BnMode,
    ) -> Result<(Var, EncoderOutput)> {
        let out = self.encoder.forward(g, &vars.0, geoms, mode)?;
        let logits = self.projector.forward(g, &vars.1, out.latent)?;
        Ok((logits, out))
    }
}

/// Student views of one sample, in [`super::ViewSet::student_views`] order.
#[derive(Debug, Clone)]
pub struct ViewBundle {
    pub views: Vec<OrientedPointSet>,
    /// Cut-mix ratio (1 when there is no mixed view).
    pub m: f64,
    /// Minibatch index of the cut-mix partner `B`.
    pub partner: usize,
}

/// Builds the views of minibatch member `a`.
pub fn build_bundle<R: Rng + ?Sized>(
    batch: &[OrientedPointSet],
    a: usize,
    cfg: &DistillConfig,
    rng: &mut R,
) -> Result<ViewBundle> {
    let sample = &batch[a];
    let [g1, g2, l1, l2] = multi_crop(
        sample,
        (cfg.global_crop, cfg.global_points),
        (cfg.local_crop, cfg.local_points),
        rng,
    )?;
    let mut raw = vec![g1, g2];
    let (mut m, mut partner) = (1.0, a);
    if cfg.views.has_mixed() {
        raw.push(l1);
        raw.push(l2);
        partner = rng.random_range(0..batch.len() - 1);
        if partner >= a {
            partner += 1;
        }
        let b = &batch[partner];
        let b = if b.len() == sample.len() { b.clone() } else { resample(b, sample.len(), rng) };
        let (mixed, ratio) = cut_mix(sample, &b, rng)?;
        raw.push(resample(&mixed, cfg.global_points, rng));
        m = ratio;
    }
    let views = raw
        .iter()
        .map(|v| aniso_scale(v, cfg.scale_range, rng))
        .collect::<Result<Vec<_>>>()?;
    Ok(ViewBundle { views, m, partner })
}

/// Per-epoch training record.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean minibatch loss.
    pub loss: f64,
    /// Mean entropy of the teacher distributions.
    pub teacher_entropy: f64,
    /// Lowest per-minibatch mean teacher entropy.
    pub min_teacher_entropy: f64,
    /// Learning rate of the first step.
    pub lr: f64,
    /// EMA coefficient of the first step.
    pub lambda: f64,
    pub steps: usize,
}

/// Student, EMA teacher, center and optimizer state.
#[derive(Debug, Clone)]
pub struct DistillState<T> {
    pub cfg: DistillConfig,
    pub student: Network<T>,
    pub teacher: Network<T>,
    pub center: Vec<f64>,
    pub adam_enc: AdamState<T>,
    pub adam_proj: AdamState<T>,
    /// Optimizer steps taken so far.
    pub step: u64,
    /// Completed epochs.
    pub epoch: usize,
}

/// Names of the scalar entries stored alongside the tensors in a checkpoint.
pub const CHECKPOINT_SCALARS: [&str; 2] = ["state.step", "state.epoch"];

impl<T: Real> DistillState<T> {
    /// Fresh state; the teacher starts as a copy of the student.
    pub fn new<R: Rng + ?Sized>(
        tok: &TokenizerConfig,
        tr: &TransformerConfig,
        cfg: &DistillConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let student = Network::init(tok, tr, cfg, rng)?;
        Ok(Self {
            cfg: cfg.clone(),
            teacher: student.clone(),
            center: vec![0.0; cfg.out_dim],
            adam_enc: AdamState::new(&student.encoder.params),
            adam_proj: AdamState::new(&student.projector.params),
            student,
            step: 0,
            epoch: 0,
        })
    }

    pub fn steps_per_epoch(&self, dataset_len: usize) -> usize {
        dataset_len / self.cfg.batch_size
    }

    /// Every tensor of the state under a stable name. The teacher encoder is
    /// stored as `teacher.enc.*`.
    pub fn archive_entries(&self) -> Vec<(String, Tensor<T>)> {
        let mut out: Vec<(String, Tensor<T>)> = Vec::new();
        let mut add = |ps: &ParamSet<T>, prefix: &str| {
            out.extend(ps.named(prefix).into_iter().map(|(n, t)| (n, t.clone())));
        };
        add(&self.student.encoder.params, "student.enc.");
        add(&self.student.projector.params, "student.proj.");
        add(&self.teacher.encoder.params, "teacher.enc.");
        add(&self.teacher.projector.params, "teacher.proj.");
        for (state, params, tag) in [
            (&self.adam_enc, &self.student.encoder.params, "enc"),
            (&self.adam_proj, &self.student.projector.params, "proj"),
        ] {
            for (i, p) in params.iter().enumerate() {
                let shape = p.value.shape().to_vec();
                out.push((format!("adam.{tag}.m.{}", p.name), Tensor::new(shape.clone(), state.m[i].clone()).expect("moment shape")));
                out.push((format!("adam.{tag}.v.{}", p.name), Tensor::new(shape, state.v[i].clone()).expect("moment shape")));
            }
        }
        out.push((
            "center".into(),
            Tensor::new(vec![self.center.len()], self.center.iter().map(|&c| T::from_f64(c)).collect()).expect("center"),
        ));
        // Counters are stored as f64 → f32; exact well beyond realistic step counts.
        out.push((CHECKPOINT_SCALARS[0].into(), Tensor::scalar(T::from_f64(self.adam_enc.step as f64))));
        out.push((CHECKPOINT_SCALARS[1].into(), Tensor::scalar(T::from_f64(self.epoch as f64))));
        out
    }

    /// Restores a state written by [`Self::archive_entries`].
    pub fn from_archive(
        tok: &TokenizerConfig,
        tr: &TransformerConfig,
        cfg: &DistillConfig,
        entries: &[(String, Tensor<f32>)],
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut s = Self::new(tok, tr, cfg, &mut rng)?;
        s.student.encoder.load_tensors(entries, "student.enc.")?;
        s.student.projector.params.load_named(entries, "student.proj.")?;
        s.teacher.encoder.load_tensors(entries, "teacher.enc.")?;
        s.teacher.projector.params.load_named(entries, "teacher.proj.")?;
        let scalar = |name: &str| -> Result<f64> {
            entries
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t.data()[0] as f64)
                .ok_or_else(|| Error::argument(format!("checkpoint lacks `{name}`")))
        };
        let find = |name: &str, len: usize| -> Result<Vec<T>> {
            let (_, t) = entries
                .iter()
                .find(|(n, _)| n == name)
                .ok_or_else(|| Error::argument(format!("checkpoint lacks `{name}`")))?;
            if t.len() != len {
                return Err(Error::argument(format!("checkpoint tensor `{name}` has {} values, expected {len}", t.len())));
            }
            Ok(t.data().iter().map(|&v| T::from_f64(v as f64)).collect())
        };
        for (state, params, tag) in [
            (&mut s.adam_enc, &s.student.encoder.params, "enc"),
            (&mut s.adam_proj, &s.student.projector.params, "proj"),
        ] {
            for (i, p) in params.iter().enumerate() {
                state.m[i] = find(&format!("adam.{tag}.m.{}", p.name), p.value.len())?;
                state.v[i] = find(&format!("adam.{tag}.v.{}", p.name), p.value.len())?;
            }
            state.step = scalar(CHECKPOINT_SCALARS[0])? as u64;
        }
        s.center = find("center", cfg.out_dim)?.iter().map(|v| v.as_f64()).collect();
        s.step = scalar(CHECKPOINT_SCALARS[0])? as u64;
        s.epoch = scalar(CHECKPOINT_SCALARS[1])? as usize;
        Ok(s)
    }
}

/// High bit marking the per-epoch streams used for training rotations.
const ROTATION_STREAM: u64 = 1 << 63;

/// Generator for one epoch: the same `(seed, epoch)` always yields the same stream.
pub(crate) fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

struct StepOutcome {
    loss: f64,
    teacher_entropy: f64,
}

fn train_step<T: Real>(
    state: &mut DistillState<T>,
    batch: &[OrientedPointSet],
    lr: f64,
    lambda: f64,
    rng: &mut ChaCha8Rng,
    rot_rng: Option<&mut ChaCha8Rng>,
) -> Result<StepOutcome> {
    let cfg = state.cfg.clone();
    let e = batch.len();
    let views = cfg.views.student_views();
    let nv = views.len();
    let mut bundles = (0..e).map(|a| build_bundle(batch, a, &cfg, rng)).collect::<Result<Vec<_>>>()?;
    if let Some(r) = rot_rng {
        // One rotation per sample, shared by all of its views.
        for b in bundles.iter_mut() {
            let rot = random_rotation(r);
            for v in b.views.iter_mut() {
                *v = apply_rotation(v, &rot);
            }
        }
    }
    let tok = state.student.encoder.tok.clone();
    let geoms = bundles
        .iter()
        .flat_map(|b| b.views.iter())
        .map(|v| crate::tokenizer::token_geometry(v, &tok, TokenStart::Random, rng))
        .collect::<Result<Vec<_>>>()?;

    // Teacher: global views only, no gradient. Normalization uses the
    // statistics of its own batch, which also feed its running buffers.
    let teacher_geoms: Vec<&TokenGeometry> = (0..e).flat_map(|a| [&geoms[a * nv], &geoms[a * nv + 1]]).collect();
    let teacher_logits = {
        let mut g = Graph::<T>::new();
        let vars = state.teacher.bind(&mut g, false);
        let (logits, out) = state.teacher.forward(&mut g, &vars, &teacher_geoms, BnMode::Train)?;
        let v = g.value(logits);
        let rows = (0..2 * e).map(|r| v.row(r).iter().map(|x| x.as_f64()).collect::<Vec<f64>>()).collect::<Vec<_>>();
        state.teacher.encoder.update_running_stats(&g, &out);
        rows
    };
    if teacher_logits.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("non-finite teacher output at step {}", state.step)));
    }
    let teacher_dists: Vec<Vec<f64>> = teacher_logits
        .iter()
        .map(|z| {
            let centered: Vec<f64> = z.iter().zip(&state.center).map(|(a, c)| a - c).collect();
            tempered_softmax(&centered, cfg.teacher_temp)
        })
        .collect();
    let teacher_entropy = teacher_dists.iter().map(|d| entropy(d)).sum::<f64>() / teacher_dists.len() as f64;

    // Targets: each student row accumulates every teacher distribution aimed at it.
    let h = cfg.out_dim;
    let mut targets = vec![0.0; e * nv * h];
    let row_of = |a: usize, s: StudentView| a * nv + views.iter().position(|&v| v == s).expect("view in set");
    for (a, bundle) in bundles.iter().enumerate() {
        let q = |t: TeacherView| -> &[f64] {
            match t {
                TeacherView::G1 => &teacher_dists[2 * a],
                TeacherView::G2 => &teacher_dists[2 * a + 1],
            }
        };
        let mut add = |row: usize, dist: &[f64]| {
            for (dst, &v) in targets[row * h..(row + 1) * h].iter_mut().zip(dist) {
                *dst += v;
            }
        };
        for (t, s) in cfg.views.multi_pairs() {
            add(row_of(a, s), q(t));
        }
        if cfg.views.has_mixed() {
            let mixed = mix_labels(q(TeacherView::G1), &teacher_dists[2 * bundle.partner], bundle.m);
            add(row_of(a, StudentView::Mixed), &mixed);
        }
    }

    // Student: one training-mode forward per view group (globals, locals,
    // mixed), so each group is normalized with its own batch statistics.
    // Rows are stacked group by group; `order` maps them back to targets.
    let groups: Vec<Vec<usize>> = [&[StudentView::G1, StudentView::G2][..], &[StudentView::L1, StudentView::L2], &[StudentView::Mixed]]
        .iter()
        .map(|kinds| {
            let cols: Vec<usize> = views.iter().enumerate().filter(|(_, v)| kinds.contains(v)).map(|(i, _)| i).collect();
            (0..e).flat_map(|a| cols.iter().map(move |&c| a * nv + c)).collect::<Vec<usize>>()
        })
        .filter(|rows| !rows.is_empty())
        .collect();
    let order: Vec<usize> = groups.concat();
    let targets: Vec<f64> = order.iter().flat_map(|&r| targets[r * h..(r + 1) * h].iter().copied()).collect();
    let mut g = Graph::<T>::new();
    let vars = state.student.bind(&mut g, true);
    let mut parts = Vec::with_capacity(groups.len());
    let mut global_out = None;
    for rows in &groups {
        let group_geoms: Vec<&TokenGeometry> = rows.iter().map(|&r| &geoms[r]).collect();
        let (logits, out) = state.student.forward(&mut g, &vars, &group_geoms, BnMode::Train)?;
        parts.push(logits);
        global_out.get_or_insert(out);
    }
    let logits = g.concat(&parts)?;
    let scaled = g.scale(logits, T::from_f64(1.0 / cfg.student_temp));
    let probs = g.softmax(scaled, 1)?;
    let logp = g.log(probs, T::from_f64(LOG_FLOOR));
    let q = g.constant(Tensor::new(vec![e * nv, h], targets.iter().map(|&v| T::from_f64(v)).collect())?);
    let prod = g.mul(q, logp)?;
    let total = g.sum_all(prod);
    let loss = g.scale(total, T::from_f64(-1.0 / e as f64));
    let loss_value = g.value(loss).data()[0].as_f64();
    if !loss_value.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss at step {}", state.step)));
    }
    if let Some(out) = &global_out {
        state.student.encoder.update_running_stats(&g, out);
    }
    let mut grads = g.backward(loss)?;
    let enc_grads: Vec<Option<Vec<T>>> = vars.0.iter().map(|&v| grads.take(v)).collect();
    let proj_grads: Vec<Option<Vec<T>>> = vars.1.iter().map(|&v| grads.take(v)).collect();
    let adam = AdamConfig::default();
    adam_step(&mut state.student.encoder.params, &enc_grads, &mut state.adam_enc, lr, &adam)?;
    adam_step(&mut state.student.projector.params, &proj_grads, &mut state.adam_proj, lr, &adam)?;

    state.teacher.encoder.params.ema_toward(&state.student.encoder.params, lambda)?;
    state.teacher.projector.params.ema_toward(&state.student.projector.params, lambda)?;
    let center_batch = match cfg.center_source {
        CenterSource::Logits => teacher_logits,
        CenterSource::Probabilities => teacher_dists,
    };
    update_center(&mut state.center, &center_batch, cfg.center_momentum)?;
    state.step += 1;
    Ok(StepOutcome {
        loss: loss_value,
        teacher_entropy,
    })
}

/// One pass over `dataset` in shuffled minibatches of `batch_size` samples
/// (a trailing partial minibatch is dropped).
///
/// On a non-finite loss the state is left as it was before the failing step.
pub fn train_epoch<T: Real>(state: &mut DistillState<T>, dataset: &[OrientedPointSet], seed: u64) -> Result<EpochMetrics> {
    let e = state.cfg.batch_size;
    if dataset.len() < e {
        return Err(Error::argument(format!(
            "dataset has {} samples, fewer than the minibatch size {e}",
            dataset.len()
        )));
    }
    let mut rng = epoch_rng(seed, state.epoch);
    // Training rotations come from their own stream so that enabling them
    // leaves every other random draw unchanged.
    let mut rot_rng = state.cfg.rotate_training.then(|| {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        r.set_stream(ROTATION_STREAM | state.epoch as u64);
        r
    });
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
    let batches = dataset.len() / e;
    let total_steps = (state.cfg.epochs * batches) as u64;
    let schedule = state.cfg.schedule();

    let mut metrics = EpochMetrics {
        epoch: state.epoch,
        loss: 0.0,
        teacher_entropy: 0.0,
        min_teacher_entropy: f64::INFINITY,
        lr: schedule.at(state.epoch as f64),
        lambda: ema_lambda(state.step, total_steps, state.cfg.ema_start),
        steps: batches,
    };
    for b in 0..batches {
        let lr = schedule.at(state.epoch as f64 + b as f64 / batches as f64);
        let lambda = ema_lambda(state.step, total_steps, state.cfg.ema_start);
        let batch: Vec<OrientedPointSet> = order[b * e..(b + 1) * e].iter().map(|&i| dataset[i].clone()).collect();
        let snapshot = state.clone();
        let rot = rot_rng.as_mut();
        let out = match train_step(state, &batch, lr, lambda, &mut rng, rot) {
            Ok(o) => o,
            Err(err) => {
                *state = snapshot;
                return Err(err);
            }
        };
        metrics.loss += out.loss / batches as f64;
        metrics.teacher_entropy += out.teacher_entropy / batches as f64;
        metrics.min_teacher_entropy = metrics.min_teacher_entropy.min(out.teacher_entropy);
    }
    state.epoch += 1;
    Ok(metrics)
}
