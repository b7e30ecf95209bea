//! Retrieval, linear-probe and clustering metrics over latent features,
//! plus the rotation-regime harness used to extract them.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Real;
use crate::error::{Error, Result};
use crate::geometry::{apply_rotation, normalize_pose, random_rotation, OrientedPointSet};
use crate::tokenizer::TokenStart;
use crate::transformer::Encoder;

/// Latent features with their category labels, one row per sample.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FeatureTable {
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<String>,
}

impl FeatureTable {
    pub fn new(features: Vec<Vec<f64>>, labels: Vec<String>) -> Result<Self> {
        if features.len() != labels.len() {
            return Err(Error::argument(format!(
                "{} feature rows but {} labels",
                features.len(),
                labels.len()
            )));
        }
        if let Some(d) = features.first().map(Vec::len) {
            if features.iter().any(|f| f.len() != d) {
                return Err(Error::argument("feature rows have differing widths"));
            }
        }
        Ok(Self { features, labels })
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.first().map_or(0, Vec::len)
    }

    /// Sorted distinct labels.
    pub fn categories(&self) -> Vec<String> {
        let mut c: Vec<String> = self.labels.clone();
        c.sort();
        c.dedup();
        c
    }

    /// Little-endian: `u32 count, u32 dim, count·dim f32`, then per row `u32 len` + UTF-8 label.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + self.len() * (self.dim() * 4 + 16));
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim() as u32).to_le_bytes());
        for row in &self.features {
            for &v in row {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        for l in &self.labels {
            out.extend_from_slice(&(l.len() as u32).to_le_bytes());
            out.extend_from_slice(l.as_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], name: &str) -> Result<Self> {
        let bad = |msg: &str| Error::Format { path: name.into(), line: 0, msg: msg.into() };
        let mut pos = 0usize;
        let u32_at = |pos: &mut usize| -> Result<u32> {
            let b = bytes.get(*pos..*pos + 4).ok_or_else(|| bad("truncated feature file"))?;
            *pos += 4;
            Ok(u32::from_le_bytes(b.try_into().unwrap()))
        };
        let count = u32_at(&mut pos)? as usize;
        let dim = u32_at(&mut pos)? as usize;
        let body = count
            .checked_mul(dim)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| bad("feature table size overflows"))?;
        let raw = bytes.get(pos..pos + body).ok_or_else(|| bad("truncated feature rows"))?;
        pos += body;
        let features: Vec<Vec<f64>> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect::<Vec<_>>()
            .chunks(dim.max(1))
            .map(<[f64]>::to_vec)
            .collect();
        let features = if dim == 0 { vec![Vec::new(); count] } else { features };
        let mut labels = Vec::with_capacity(count);
        for _ in 0..count {
            let len = u32_at(&mut pos)? as usize;
            let b = bytes.get(pos..pos + len).ok_or_else(|| bad("truncated label"))?;
            pos += len;
            labels.push(String::from_utf8(b.to_vec()).map_err(|_| bad("label is not UTF-8"))?);
        }
        if pos != bytes.len() {
            return Err(bad("trailing bytes after labels"));
        }
        Self::new(features, labels)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, &path.display().to_string())
    }
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// AP of a ranked relevance list: mean precision at each relevant rank.
pub fn average_precision(relevant: &[bool]) -> f64 {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &r) in relevant.iter().enumerate() {
        if r {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    if hits == 0 {
        0.0
    } else {
        sum / hits as f64
    }
}

/// Per-query AP: every other item ranked by Euclidean distance, ties by index.
pub fn query_ap(table: &FeatureTable, q: usize) -> f64 {
    let mut order: Vec<(f64, usize)> = (0..table.len())
        .filter(|&j| j != q)
        .map(|j| (dist2(&table.features[q], &table.features[j]), j))
        .collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let rel: Vec<bool> = order.iter().map(|&(_, j)| table.labels[j] == table.labels[q]).collect();
    average_precision(&rel)
}

/// Macro-averaged MAP in percent. Categories with a single sample are skipped.
pub fn macro_map(table: &FeatureTable) -> Result<f64> {
    let mut per_cat: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, l) in table.labels.iter().enumerate() {
        per_cat.entry(l).or_default().push(i);
    }
    let mut means = Vec::new();
    for (cat, idx) in &per_cat {
        if idx.len() < 2 {
            log::warn!("category `{cat}` has a single sample; excluded from macroMAP");
            continue;
        }
        let s: f64 = idx.iter().map(|&q| query_ap(table, q)).sum();
        means.push(s / idx.len() as f64);
    }
    if means.len() < 2 {
        return Err(Error::argument("macroMAP needs at least two categories with two or more samples"));
    }
    Ok(100.0 * means.iter().sum::<f64>() / means.len() as f64)
}

/// macroMAP of a ranking that carries no information: all features equal,
/// so every query sees the others in index order.
pub fn label_prior_baseline(labels: &[String]) -> Result<f64> {
    let table = FeatureTable::new(vec![vec![0.0]; labels.len()], labels.to_vec())?;
    macro_map(&table)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeConfig {
    pub epochs: usize,
    /// L2 weight of the regularized hinge objective.
    pub lambda: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { epochs: 200, lambda: 1e-4, seed: 0 }
    }
}

/// One-vs-rest linear classifier trained with hinge loss; returns macro accuracy in percent.
pub fn linear_probe(train: &FeatureTable, test: &FeatureTable, cfg: &ProbeConfig) -> Result<f64> {
    let cats = train.categories();
    if cats.is_empty() {
        return Err(Error::argument("linear probe needs a non-empty training table"));
    }
    if train.dim() != test.dim() {
        return Err(Error::argument(format!(
            "train features have width {} but test features {}",
            train.dim(),
            test.dim()
        )));
    }
    for l in test.categories() {
        if !cats.contains(&l) {
            return Err(Error::argument(format!("test category `{l}` is missing from the training table")));
        }
    }
    let d = train.dim();
    // Bias carried as an extra constant input.
    let aug = |f: &[f64]| -> Vec<f64> { f.iter().copied().chain(std::iter::once(1.0)).collect() };
    let xs: Vec<Vec<f64>> = train.features.iter().map(|f| aug(f)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut weights = Vec::with_capacity(cats.len());
    for cat in &cats {
        let ys: Vec<f64> = train.labels.iter().map(|l| if l == cat { 1.0 } else { -1.0 }).collect();
        let mut w = vec![0.0; d + 1];
        let mut order: Vec<usize> = (0..xs.len()).collect();
        let mut t = 0usize;
        for _ in 0..cfg.epochs {
            order.shuffle(&mut rng);
            for &i in &order {
                t += 1;
                let eta = 1.0 / (1.0 + cfg.lambda * t as f64);
                let margin = ys[i] * xs[i].iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
                for (k, wk) in w.iter_mut().enumerate() {
                    let reg = if k < d { cfg.lambda * *wk } else { 0.0 };
                    let hinge = if margin < 1.0 { -ys[i] * xs[i][k] } else { 0.0 };
                    *wk -= eta * (reg + hinge);
                }
            }
        }
        weights.push(w);
    }
    let mut correct: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    for (f, l) in test.features.iter().zip(&test.labels) {
        let x = aug(f);
        let pred = weights
            .iter()
            .enumerate()
            .map(|(c, w)| (c, x.iter().zip(w).map(|(a, b)| a * b).sum::<f64>()))
            .fold((0, f64::NEG_INFINITY), |best, (c, s)| if s > best.1 { (c, s) } else { best })
            .0;
        let e = correct.entry(l).or_default();
        e.1 += 1;
        if cats[pred] == *l {
            e.0 += 1;
        }
    }
    if correct.is_empty() {
        return Err(Error::argument("linear probe needs a non-empty test table"));
    }
    let acc: f64 = correct.values().map(|&(c, n)| c as f64 / n as f64).sum();
    Ok(100.0 * acc / correct.len() as f64)
}

fn entropy_of(counts: impl Iterator<Item = usize>, n: f64) -> f64 {
    counts
        .filter(|&c| c > 0)
        .map(|c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Normalized mutual information with arithmetic-mean normalization.
/// Two single-cluster labelings agree trivially and score 1.
pub fn nmi<A: Ord, B: Ord>(pred: &[A], truth: &[B]) -> f64 {
    assert_eq!(pred.len(), truth.len(), "labelings must have equal length");
    let n = pred.len() as f64;
    let mut joint: BTreeMap<(&A, &B), usize> = BTreeMap::new();
    let mut pa: BTreeMap<&A, usize> = BTreeMap::new();
    let mut pb: BTreeMap<&B, usize> = BTreeMap::new();
    for (a, b) in pred.iter().zip(truth) {
        *joint.entry((a, b)).or_default() += 1;
        *pa.entry(a).or_default() += 1;
        *pb.entry(b).or_default() += 1;
    }
    let ha = entropy_of(pa.values().copied(), n);
    let hb = entropy_of(pb.values().copied(), n);
    if ha == 0.0 && hb == 0.0 {
        return 1.0;
    }
    let mut mi = 0.0;
    for (&(a, b), &c) in &joint {
        let pxy = c as f64 / n;
        let px = pa[a] as f64 / n;
        let py = pb[b] as f64 / n;
        mi += pxy * (pxy / (px * py)).ln();
    }
    (2.0 * mi / (ha + hb)).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    pub assignments: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub inertia: f64,
}

const KMEANS_MAX_ITERS: usize = 300;

fn kmeans_once<R: Rng + ?Sized>(x: &[Vec<f64>], k: usize, rng: &mut R) -> KMeans {
    let n = x.len();
    // k-means++ seeding.
    let mut centroids = vec![x[rng.random_range(0..n)].clone()];
    let mut d2: Vec<f64> = x.iter().map(|p| dist2(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut r = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if r < w {
                    pick = i;
                    break;
                }
                r -= w;
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        centroids.push(x[next].clone());
        for (i, p) in x.iter().enumerate() {
            d2[i] = d2[i].min(dist2(p, &centroids[centroids.len() - 1]));
        }
    }
    let dim = x[0].len();
    let mut assign = vec![usize::MAX; n];
    for _ in 0..KMEANS_MAX_ITERS {
        let mut changed = false;
        for (i, p) in x.iter().enumerate() {
            let best = (0..k)
                .map(|c| (c, dist2(p, &centroids[c])))
                .fold((0, f64::INFINITY), |b, (c, d)| if d < b.1 { (c, d) } else { b })
                .0;
            if assign[i] != best {
                assign[i] = best;
                changed = true;
            }
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in x.iter().zip(&assign) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(p) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                // Reseed from the point farthest from its own centroid, never
                // emptying the cluster it leaves.
                let far = (0..n)
                    .filter(|&i| counts[assign[i]] > 1)
                    .map(|i| (i, dist2(&x[i], &centroids[assign[i]])))
                    .fold((0, f64::NEG_INFINITY), |b, (i, d)| if d > b.1 { (i, d) } else { b })
                    .0;
                counts[assign[far]] -= 1;
                assign[far] = c;
                counts[c] = 1;
                centroids[c] = x[far].clone();
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    let inertia = x.iter().zip(&assign).map(|(p, &a)| dist2(p, &centroids[a])).sum();
    KMeans { assignments: assign, centroids, inertia }
}

/// Best-inertia k-means over `restarts` k-means++ initializations.
pub fn kmeans(x: &[Vec<f64>], k: usize, restarts: usize, seed: u64) -> Result<KMeans> {
    if k == 0 || k > x.len() {
        return Err(Error::argument(format!("k = {k} must be in 1..={}", x.len())));
    }
    if restarts == 0 {
        return Err(Error::argument("k-means needs at least one restart"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<KMeans> = None;
    for _ in 0..restarts {
        let run = kmeans_once(x, k, &mut rng);
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    Ok(best.unwrap())
}

/// NMI between k-means clusters (k = number of categories) and the labels.
pub fn kmeans_nmi(table: &FeatureTable, restarts: usize, seed: u64) -> Result<f64> {
    let k = table.categories().len();
    let km = kmeans(&table.features, k, restarts, seed)?;
    Ok(nmi(&km.assignments, &table.labels))
}

/// Train/test rotation regime: `N` no rotation, `R` random SO(3) per sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RotationSetting {
    NrNr,
    NrRr,
    RrRr,
}

impl RotationSetting {
    pub fn train_rotated(self) -> bool {
        self == Self::RrRr
    }

    pub fn test_rotated(self) -> bool {
        self != Self::NrNr
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::NrNr => "NrNr",
            Self::NrRr => "NrRr",
            Self::RrRr => "RrRr",
        }
    }
}

impl FromStr for RotationSetting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('/', "").as_str() {
            "nrnr" => Ok(Self::NrNr),
            "nrrr" => Ok(Self::NrRr),
            "rrrr" => Ok(Self::RrRr),
            _ => Err(Error::argument(format!("unknown rotation setting `{s}` (expected NrNr, NrRr or RrRr)"))),
        }
    }
}

const EXTRACT_CHUNK: usize = 16;

/// Eval-mode latents of pose-normalized point sets. With `rotate`, sample `i`
/// gets its own rotation drawn from stream `i` of `seed`.
pub fn extract_features<T: Real>(
    encoder: &Encoder<T>,
    sets: &[OrientedPointSet],
    rotate: bool,
    seed: u64,
) -> Result<FeatureTable> {
    let mut features = Vec::with_capacity(sets.len());
    let mut labels = Vec::with_capacity(sets.len());
    let mut unused = ChaCha8Rng::seed_from_u64(0);
    for (c, chunk) in sets.chunks(EXTRACT_CHUNK).enumerate() {
        let mut geoms = Vec::with_capacity(chunk.len());
        for (j, ps) in chunk.iter().enumerate() {
            let mut ps = normalize_pose(ps)?;
            if rotate {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream((c * EXTRACT_CHUNK + j) as u64);
                ps = apply_rotation(&ps, &random_rotation(&mut rng));
            }
            geoms.push(encoder.geometry(&ps, TokenStart::Fixed(0), &mut unused)?);
            labels.push(ps.label.clone().unwrap_or_default());
        }
        let refs: Vec<_> = geoms.iter().collect();
        for row in encoder.embed_batch(&refs)? {
            features.push(row.iter().map(|v| v.as_f64()).collect());
        }
    }
    FeatureTable::new(features, labels)
}

#[derive(Debug, Clone)]
pub struct HarnessOutput {
    pub setting: RotationSetting,
    pub train: FeatureTable,
    pub test: FeatureTable,
}

/// Extracts train/test features under `setting`. `trained_rotated` states how
/// the model was trained; a mismatch with the setting is reported, not fatal.
pub fn rotation_harness<T: Real>(
    encoder: &Encoder<T>,
    trained_rotated: bool,
    train: &[OrientedPointSet],
    test: &[OrientedPointSet],
    setting: RotationSetting,
    seed: u64,
) -> Result<HarnessOutput> {
    if trained_rotated != setting.train_rotated() {
        log::warn!(
            "model trained {} rotation augmentation but evaluated as {}",
            if trained_rotated { "with" } else { "without" },
            setting.name()
        );
    }
    let train_seed = seed;
    let test_seed = seed ^ 0x9e37_79b9_7f4a_7c15;
    Ok(HarnessOutput {
        setting,
        train: extract_features(encoder, train, setting.train_rotated(), train_seed)?,
        test: extract_features(encoder, test, setting.test_rotated(), test_seed)?,
    })
}
