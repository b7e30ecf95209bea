//! Token-set transformer: stacked localized vector self-attention blocks with
//! token subsampling, followed by mean pooling to an L2-normalized latent.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::autodiff::{BnMode, CsrMatrix, Graph, ParamId, ParamSet, Real, Tensor, Var, BN_MOMENTUM};
use crate::error::{Error, Result};
use crate::geometry::{dist2, fps, knn, norm, sub, OrientedPointSet, Vec3};
use crate::tokenizer::{token_geometry, uniform_tensor, TokenGeometry, TokenStart, TokenizerConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AttentionKind {
    /// Per-channel weights normalized over the k neighbors.
    #[default]
    Vector,
    /// One weight per neighbor; recognized in configs but not implemented.
    Scalar,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransformerConfig {
    pub num_blocks: usize,
    /// Neighbor count for each block.
    pub block_k: Vec<usize>,
    pub latent_width: usize,
    /// Adds an affine encoding of the token-point distance to the attention
    /// logits. Distances keep the encoder rotation invariant.
    pub positional_encoding: bool,
    pub attention: AttentionKind,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self {
            num_blocks: 2,
            block_k: vec![4, 8],
            latent_width: 256,
            positional_encoding: false,
            attention: AttentionKind::Vector,
        }
    }
}

impl TransformerConfig {
    pub fn validate(&self, tok: &TokenizerConfig) -> Result<()> {
        tok.validate()?;
        if self.num_blocks == 0 {
            return Err(Error::config("transformer.num_blocks", "must be at least 1"));
        }
        if self.block_k.len() != self.num_blocks {
            return Err(Error::config(
                "transformer.block_k",
                format!("needs one entry per block ({}), got {}", self.num_blocks, self.block_k.len()),
            ));
        }
        if self.latent_width == 0 {
            return Err(Error::config("transformer.latent_width", "must be at least 1"));
        }
        if self.attention != AttentionKind::Vector {
            return Err(Error::config("transformer.attention", "only `vector` attention is implemented"));
        }
        let div = 1usize.checked_shl(self.num_blocks as u32).unwrap_or(0);
        if div == 0 || tok.token_count % div != 0 {
            return Err(Error::config(
                "tokenizer.token_count",
                format!("{} is not divisible by 2^{}", tok.token_count, self.num_blocks),
            ));
        }
        for (b, &k) in self.block_k.iter().enumerate() {
            let t_in = tok.token_count >> b;
            if k == 0 || k > t_in {
                return Err(Error::config(
                    "transformer.block_k",
                    format!("block {b}: k = {k} must lie in [1, {t_in}]"),
                ));
            }
        }
        Ok(())
    }

    /// Tokens left after the last block.
    pub fn output_tokens(&self, tok: &TokenizerConfig) -> usize {
        tok.token_count >> self.num_blocks
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Affine {
    w: ParamId,
    b: ParamId,
}

impl Affine {
    pub(crate) fn push<T: Real, R: Rng + ?Sized>(ps: &mut ParamSet<T>, name: &str, fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let w = ps.push(format!("{name}.weight"), uniform_tensor(vec![fan_in, fan_out], fan_in, rng), true);
        let b = ps.push(format!("{name}.bias"), uniform_tensor(vec![fan_out], fan_in, rng), true);
        Self { w, b }
    }

    /// Weights uniform in `±gain·sqrt(3 / fan_in)` (standard deviation `gain / sqrt(fan_in)`), zero bias.
    pub(crate) fn push_scaled<T: Real, R: Rng + ?Sized>(
        ps: &mut ParamSet<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        gain: f64,
        rng: &mut R,
    ) -> Self {
        let bound = gain * (3.0 / fan_in.max(1) as f64).sqrt();
        let data = (0..fan_in * fan_out).map(|_| T::from_f64(rng.random_range(-bound..=bound))).collect();
        let w = ps.push(format!("{name}.weight"), Tensor::new(vec![fan_in, fan_out], data).expect("shape"), true);
        let b = ps.push(format!("{name}.bias"), Tensor::zeros(vec![fan_out]), true);
        Self { w, b }
    }

    pub(crate) fn bind(&self, vars: &[Var]) -> (Var, Var) {
        (vars[self.w.0], vars[self.b.0])
    }
}

#[derive(Debug, Clone)]
struct BlockLayout {
    alpha: Affine,
    beta: Affine,
    gamma: Affine,
    pos: Option<Affine>,
    bn_gamma: ParamId,
    bn_beta: ParamId,
    bn_mean: ParamId,
    bn_var: ParamId,
    fc1: Affine,
    fc2: Affine,
    k: usize,
}

/// Graph handles for one SA block's tensors.
#[derive(Debug, Clone, Copy)]
pub struct BlockVars {
    pub k: usize,
    pub alpha: (Var, Var),
    pub beta: (Var, Var),
    pub gamma: (Var, Var),
    pub pos: Option<(Var, Var)>,
    pub bn_gamma: Var,
    pub bn_beta: Var,
    pub bn_mean: Var,
    pub bn_var: Var,
    pub fc1: (Var, Var),
    pub fc2: (Var, Var),
}

impl BlockLayout {
    fn bind(&self, vars: &[Var]) -> BlockVars {
        BlockVars {
            k: self.k,
            alpha: self.alpha.bind(vars),
            beta: self.beta.bind(vars),
            gamma: self.gamma.bind(vars),
            pos: self.pos.map(|p| p.bind(vars)),
            bn_gamma: vars[self.bn_gamma.0],
            bn_beta: vars[self.bn_beta.0],
            bn_mean: vars[self.bn_mean.0],
            bn_var: vars[self.bn_var.0],
            fc1: self.fc1.bind(vars),
            fc2: self.fc2.bind(vars),
        }
    }
}

/// Per-view index plan for one block: FPS survivors and their neighbors.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockPlan {
    pub survivors: Vec<usize>,
    /// `survivors.len() × k` token indices, nearest first.
    pub neighbors: Vec<usize>,
    pub out_points: Vec<Vec3>,
}

/// FPS start used inside blocks: the token nearest the centroid (lowest index on ties).
pub fn centroid_start(points: &[Vec3]) -> usize {
    let inv = 1.0 / points.len().max(1) as f64;
    let mut c = [0.0; 3];
    for p in points {
        for k in 0..3 {
            c[k] += p[k] * inv;
        }
    }
    let mut best = (f64::INFINITY, 0);
    for (i, p) in points.iter().enumerate() {
        let d = dist2(p, &c);
        if d < best.0 {
            best = (d, i);
        }
    }
    best.1
}

pub fn plan_block(points: &[Vec3], k: usize) -> Result<BlockPlan> {
    let t_in = points.len();
    if t_in < 2 || t_in % 2 != 0 {
        return Err(Error::argument(format!("sa_block: token count {t_in} must be even and at least 2")));
    }
    if k == 0 || k > t_in {
        return Err(Error::argument(format!("sa_block: k = {k} must lie in [1, {t_in}]")));
    }
    let survivors = fps(points, t_in / 2, centroid_start(points))?;
    let mut neighbors = Vec::with_capacity(survivors.len() * k);
    for &s in &survivors {
        neighbors.extend(knn(&points[s], points, k)?);
    }
    let out_points = survivors.iter().map(|&i| points[i]).collect();
    Ok(BlockPlan {
        survivors,
        neighbors,
        out_points,
    })
}

/// One self-attention block over a batch of views stacked as `[B·T_in, D]`.
///
/// Returns the `[B·T_out, D]` output, the surviving token points per view and
/// the batchnorm node (for running-statistics updates in training mode).
pub fn sa_block<T: Real>(
    g: &mut Graph<T>,
    bv: &BlockVars,
    x: Var,
    points: &[Vec<Vec3>],
    mode: BnMode,
) -> Result<(Var, Vec<Vec<Vec3>>, Var)> {
    let t_in = points.first().map_or(0, Vec::len);
    if points.iter().any(|p| p.len() != t_in) {
        return Err(Error::argument("sa_block: views must have equal token counts"));
    }
    if g.shape(x).first() != Some(&(points.len() * t_in)) {
        return Err(Error::argument(format!(
            "sa_block: features {:?} do not match {} views of {t_in} tokens",
            g.shape(x),
            points.len()
        )));
    }
    let k = bv.k;
    let mut surv = Vec::new();
    let mut rep = Vec::new();
    let mut nbr = Vec::new();
    let mut dists = Vec::new();
    let mut out_points = Vec::with_capacity(points.len());
    for (v, pts) in points.iter().enumerate() {
        let plan = plan_block(pts, k)?;
        let base = v * t_in;
        for (i, &s) in plan.survivors.iter().enumerate() {
            let row = surv.len();
            surv.push(base + s);
            for &j in &plan.neighbors[i * k..(i + 1) * k] {
                rep.push(row);
                nbr.push(base + j);
                dists.push(T::from_f64(norm(&sub(&pts[s], &pts[j]))));
            }
        }
        out_points.push(plan.out_points);
    }
    let m = surv.len();
    let d = g.shape(x)[1];

    let xs = g.gather(x, Rc::new(surv))?;
    let a = g.linear(xs, bv.alpha.0, bv.alpha.1)?;
    let bfull = g.linear(x, bv.beta.0, bv.beta.1)?;
    let cfull = g.linear(x, bv.gamma.0, bv.gamma.1)?;
    let nbr = Rc::new(nbr);
    let a_rep = g.gather(a, Rc::new(rep))?;
    let b_n = g.gather(bfull, nbr.clone())?;
    let c_n = g.gather(cfull, nbr)?;
    let mut logits = g.sub(a_rep, b_n)?;
    if let Some((pw, pb)) = bv.pos {
        let dcol = g.constant(Tensor::new(vec![m * k, 1], dists)?);
        let enc = g.linear(dcol, pw, pb)?;
        logits = g.add(logits, enc)?;
    }
    let logits = g.reshape(logits, vec![m, k, d])?;
    let rho = g.softmax(logits, 1)?;
    let c_n = g.reshape(c_n, vec![m, k, d])?;
    let weighted = g.mul(rho, c_n)?;
    let y = g.sum(weighted, 1)?;
    let y = g.add(y, xs)?;

    let rm = g.value(bv.bn_mean).data().to_vec();
    let rv = g.value(bv.bn_var).data().to_vec();
    let bn = g.batchnorm(y, bv.bn_gamma, bv.bn_beta, mode, &rm, &rv)?;
    let h = g.linear(bn, bv.fc1.0, bv.fc1.1)?;
    let h = g.relu(h);
    let h = g.linear(h, bv.fc2.0, bv.fc2.1)?;
    let out = g.relu(h);
    Ok((out, out_points, bn))
}

/// Mean-pools `[B·T, D]` token features per view, applies the affine map and
/// L2-normalizes, giving `[B, L]`.
pub fn aggregate<T: Real>(g: &mut Graph<T>, x: Var, views: usize, w: Var, b: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if views == 0 || s.len() != 2 || s[0] == 0 || s[0] % views != 0 {
        return Err(Error::argument(format!("aggregate: cannot split {s:?} into {views} views")));
    }
    let x = g.reshape(x, vec![views, s[0] / views, s[1]])?;
    let pooled = g.mean(x, 1)?;
    let z = g.linear(pooled, w, b)?;
    g.l2_normalize(z)
}

#[derive(Debug, Clone)]
struct EncoderLayout {
    tok: Affine,
    blocks: Vec<BlockLayout>,
    agg: Affine,
}

/// Forward-pass result; keeps the batchnorm nodes for running-stat updates.
#[derive(Debug, Clone)]
pub struct EncoderOutput {
    /// `[B, L]`, unit rows.
    pub latent: Var,
    bn_nodes: Vec<Var>,
}

/// Tokenizer projection plus transformer, with all tensors in one [`ParamSet`].
#[derive(Debug, Clone)]
pub struct Encoder<T> {
    pub tok: TokenizerConfig,
    pub tr: TransformerConfig,
    pub params: ParamSet<T>,
    layout: EncoderLayout,
}

impl<T: Real> Encoder<T> {
    pub fn init<R: Rng + ?Sized>(tok: &TokenizerConfig, tr: &TransformerConfig, rng: &mut R) -> Result<Self> {
        tr.validate(tok)?;
        let mut ps = ParamSet::new();
        let d = tok.feature_width;
        let tok_aff = Affine::push(&mut ps, "tok", tok.descriptor_len(), d, rng);
        let mut blocks = Vec::with_capacity(tr.num_blocks);
        for (b, &k) in tr.block_k.iter().enumerate() {
            let name = |part: &str| format!("block{b}.{part}");
            let alpha = Affine::push(&mut ps, &name("alpha"), d, d, rng);
            let beta = Affine::push(&mut ps, &name("beta"), d, d, rng);
            let gamma = Affine::push(&mut ps, &name("gamma"), d, d, rng);
            let pos = tr
                .positional_encoding
                .then(|| Affine::push(&mut ps, &name("pos"), 1, d, rng));
            let bn_gamma = ps.push(name("bn.gamma"), Tensor::full(vec![d], T::one()), true);
            let bn_beta = ps.push(name("bn.beta"), Tensor::zeros(vec![d]), true);
            let bn_mean = ps.push(name("bn.running_mean"), Tensor::zeros(vec![d]), false);
            let bn_var = ps.push(name("bn.running_var"), Tensor::full(vec![d], T::one()), false);
            let fc1 = Affine::push(&mut ps, &name("fc1"), d, d, rng);
            let fc2 = Affine::push(&mut ps, &name("fc2"), d, d, rng);
            blocks.push(BlockLayout {
                alpha,
                beta,
                gamma,
                pos,
                bn_gamma,
                bn_beta,
                bn_mean,
                bn_var,
                fc1,
                fc2,
                k,
            });
        }
        let agg = Affine::push(&mut ps, "agg", d, tr.latent_width, rng);
        Ok(Self {
            tok: tok.clone(),
            tr: tr.clone(),
            params: ps,
            layout: EncoderLayout {
                tok: tok_aff,
                blocks,
                agg,
            },
        })
    }

    /// Handles for block `b` given the bound parameter vars.
    pub fn block_vars(&self, vars: &[Var], b: usize) -> BlockVars {
        self.layout.blocks[b].bind(vars)
    }

    pub fn projection_vars(&self, vars: &[Var]) -> (Var, Var) {
        self.layout.tok.bind(vars)
    }

    pub fn aggregation_vars(&self, vars: &[Var]) -> (Var, Var) {
        self.layout.agg.bind(vars)
    }

    /// Tokenizes `ps` (geometry only) with this encoder's tokenizer settings.
    pub fn geometry<R: Rng + ?Sized>(&self, ps: &OrientedPointSet, start: TokenStart, rng: &mut R) -> Result<TokenGeometry> {
        token_geometry(ps, &self.tok, start, rng)
    }

    /// Encodes a batch of tokenized views. `vars` come from `self.params.bind`.
    pub fn forward(&self, g: &mut Graph<T>, vars: &[Var], geoms: &[&TokenGeometry], mode: BnMode) -> Result<EncoderOutput> {
        if vars.len() != self.params.len() {
            return Err(Error::argument("encoder: parameter vars do not match the parameter set"));
        }
        if geoms.is_empty() {
            return Err(Error::argument("encoder: empty batch"));
        }
        let t = self.tok.token_count;
        if let Some(bad) = geoms.iter().find(|gm| gm.len() != t) {
            return Err(Error::argument(format!("encoder: view has {} tokens, expected {t}", bad.len())));
        }
        let desc: CsrMatrix<T> = CsrMatrix::vstack(geoms.iter().map(|gm| &gm.descriptors)).cast();
        let (w, b) = self.projection_vars(vars);
        let x = g.sp_matmul(Rc::new(desc), w)?;
        let mut x = g.add_row(x, b)?;
        let mut points: Vec<Vec<Vec3>> = geoms.iter().map(|gm| gm.points.clone()).collect();
        let mut bn_nodes = Vec::with_capacity(self.layout.blocks.len());
        for blk in &self.layout.blocks {
            let (y, pts, bn) = sa_block(g, &blk.bind(vars), x, &points, mode)?;
            x = y;
            points = pts;
            bn_nodes.push(bn);
        }
        let (aw, ab) = self.aggregation_vars(vars);
        let latent = aggregate(g, x, geoms.len(), aw, ab)?;
        Ok(EncoderOutput { latent, bn_nodes })
    }

    /// Folds the batch statistics of a training-mode forward into the running buffers.
    pub fn update_running_stats(&mut self, g: &Graph<T>, out: &EncoderOutput) {
        let m = T::from_f64(BN_MOMENTUM);
        let keep = T::one() - m;
        for (blk, &node) in self.layout.blocks.iter().zip(&out.bn_nodes) {
            let Some(stats) = g.bn_stats(node) else { continue };
            for (id, batch) in [(blk.bn_mean, &stats.mean), (blk.bn_var, &stats.var_unbiased)] {
                for (r, &s) in self.params.get_mut(id).data_mut().iter_mut().zip(batch.iter()) {
                    *r = keep * *r + m * s;
                }
            }
        }
    }

    /// Eval-mode latents for several point sets, without gradient tracking.
    pub fn embed_batch(&self, geoms: &[&TokenGeometry]) -> Result<Vec<Vec<T>>> {
        let mut g = Graph::new();
        let vars = self.params.bind(&mut g, false);
        let out = self.forward(&mut g, &vars, geoms, BnMode::Eval)?;
        let l = g.value(out.latent);
        Ok((0..geoms.len()).map(|i| l.row(i).to_vec()).collect())
    }

    /// Eval-mode latent of one point set. Tokens start FPS at point 0.
    pub fn embed(&self, ps: &OrientedPointSet) -> Result<Vec<T>> {
        let mut unused = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let geom = self.geometry(ps, TokenStart::Fixed(0), &mut unused)?;
        Ok(self.embed_batch(&[&geom])?.remove(0))
    }

    /// Copies tensors named `prefix + name` from an archive; all must be present with matching shapes.
    pub fn load_tensors(&mut self, entries: &[(String, Tensor<f32>)], prefix: &str) -> Result<()> {
        self.params.load_named(entries, prefix)
    }

    pub fn cast<U: Real>(&self) -> Encoder<U> {
        Encoder {
            tok: self.tok.clone(),
            tr: self.tr.clone(),
            params: self.params.cast(),
            layout: self.layout.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{apply_rotation, random_rotation};
    use rand_chacha::ChaCha8Rng;

    fn small_cfg() -> (TokenizerConfig, TransformerConfig) {
        (
            TokenizerConfig {
                token_count: 16,
                grid: 4,
                feature_width: 12,
                ..Default::default()
            },
            TransformerConfig {
                num_blocks: 2,
                block_k: vec![3, 4],
                latent_width: 6,
                ..Default::default()
            },
        )
    }

    fn blob(rng: &mut ChaCha8Rng, n: usize) -> OrientedPointSet {
        let pts = (0..n)
            .map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-0.6..0.6), rng.random_range(-0.3..0.3)])
            .collect();
        let ors = (0..n)
            .map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
            .collect();
        OrientedPointSet::new(pts, ors).unwrap()
    }

    fn cosine(a: &[f64], b: &[f64]) -> f64 {
        let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        d / (a.iter().map(|x| x * x).sum::<f64>().sqrt() * b.iter().map(|x| x * x).sum::<f64>().sqrt())
    }

    #[test]
    fn config_validation() {
        let (tok, mut tr) = small_cfg();
        assert!(tr.validate(&tok).is_ok());
        tr.block_k = vec![3];
        assert!(matches!(tr.validate(&tok), Err(Error::Config { .. })));
        tr.block_k = vec![3, 9];
        assert!(tr.validate(&tok).is_err());
        let odd = TokenizerConfig {
            token_count: 18,
            ..tok.clone()
        };
        assert!(TransformerConfig::default().validate(&odd).is_err());
        let scalar = TransformerConfig {
            attention: AttentionKind::Scalar,
            block_k: vec![3, 4],
            ..Default::default()
        };
        assert!(scalar.validate(&tok).is_err());
    }

    #[test]
    fn plan_rejects_odd_and_large_k() {
        let pts = vec![[0.0; 3], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]];
        assert!(matches!(plan_block(&pts, 1), Err(Error::Argument(_))));
        let pts4 = vec![[0.0; 3], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0], [3.0, 0.0, 0.0]];
        assert!(matches!(plan_block(&pts4, 5), Err(Error::Argument(_))));
        let plan = plan_block(&pts4, 2).unwrap();
        assert_eq!(plan.survivors.len(), 2);
        for p in &plan.out_points {
            assert!(pts4.contains(p));
        }
    }

    #[test]
    fn default_config_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let tok = TokenizerConfig {
            feature_width: 16,
            ..Default::default()
        };
        let tr = TransformerConfig {
            latent_width: 256,
            ..Default::default()
        };
        let enc = Encoder::<f64>::init(&tok, &tr, &mut rng).unwrap();
        assert_eq!(tr.output_tokens(&tok), 64);
        let ps = blob(&mut rng, 1024);
        let z = enc.embed(&ps).unwrap();
        assert_eq!(z.len(), 256);
        assert!((z.iter().map(|v| v * v).sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn k1_block_reduces_to_gamma_residual_mlp() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let tok = TokenizerConfig {
            token_count: 4,
            grid: 2,
            feature_width: 5,
            ..Default::default()
        };
        let tr = TransformerConfig {
            num_blocks: 1,
            block_k: vec![1],
            latent_width: 3,
            ..Default::default()
        };
        let enc = Encoder::<f64>::init(&tok, &tr, &mut rng).unwrap();
        let pts: Vec<Vec3> = vec![[0.0, 0.0, 0.0], [1.0, 0.1, 0.0], [0.0, 1.2, 0.3], [-1.0, 0.0, 0.5]];
        let x = Tensor::new(vec![4, 5], (0..20).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();

        let mut g = Graph::new();
        let vars = enc.params.bind(&mut g, false);
        let bv = enc.block_vars(&vars, 0);
        let xv = g.constant(x.clone());
        let (out, out_pts, _) = sa_block(&mut g, &bv, xv, &[pts.clone()], BnMode::Eval).unwrap();
        let got = g.value(out).clone();

        // Direct evaluation of MLP(BN(γ(x_i) + x_i)) for the survivors.
        let p = &enc.params;
        let get = |n: &str| p.get(p.find(n).unwrap()).data().to_vec();
        let affine = |v: &[f64], w: &[f64], b: &[f64]| -> Vec<f64> {
            let out_w = b.len();
            (0..out_w).map(|o| b[o] + v.iter().enumerate().map(|(i, a)| a * w[i * out_w + o]).sum::<f64>()).collect()
        };
        let relu = |v: Vec<f64>| v.into_iter().map(|a| a.max(0.0)).collect::<Vec<_>>();
        let plan = plan_block(&pts, 1).unwrap();
        assert_eq!(out_pts[0], plan.out_points);
        for (r, &s) in plan.survivors.iter().enumerate() {
            let xi = x.row(s);
            let gm = affine(xi, &get("block0.gamma.weight"), &get("block0.gamma.bias"));
            let y: Vec<f64> = gm.iter().zip(xi).map(|(a, b)| a + b).collect();
            let (rm, rv, bg, bb) = (
                get("block0.bn.running_mean"),
                get("block0.bn.running_var"),
                get("block0.bn.gamma"),
                get("block0.bn.beta"),
            );
            let bn: Vec<f64> = (0..5).map(|j| (y[j] - rm[j]) / (rv[j] + 1e-5).sqrt() * bg[j] + bb[j]).collect();
            let h = relu(affine(&bn, &get("block0.fc1.weight"), &get("block0.fc1.bias")));
            let o = relu(affine(&h, &get("block0.fc2.weight"), &get("block0.fc2.bias")));
            for j in 0..5 {
                assert!((o[j] - got.row(r)[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_weights_sum_to_one() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::new(vec![2, 3, 2], vec![0.1, 5.0, -2.0, 0.3, 7.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap());
        let s = g.softmax(x, 1).unwrap();
        let v = g.value(s).data().to_vec();
        for m in 0..2 {
            for c in 0..2 {
                let total: f64 = (0..3).map(|j| v[m * 6 + j * 2 + c]).sum();
                assert!((total - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn aggregate_identity_slice() {
        let mut g = Graph::<f64>::new();
        let feats: Vec<f64> = (0..3 * 4).map(|i| (i as f64).cos()).collect();
        let x = g.constant(Tensor::new(vec![3, 4], feats.clone()).unwrap());
        let mut w = vec![0.0; 4 * 2];
        w[0] = 1.0;
        w[3] = 1.0;
        let wv = g.constant(Tensor::new(vec![4, 2], w).unwrap());
        let bv = g.constant(Tensor::zeros(vec![2]));
        let z = aggregate(&mut g, x, 1, wv, bv).unwrap();
        let mean: Vec<f64> = (0..2).map(|c| (0..3).map(|r| feats[r * 4 + c]).sum::<f64>() / 3.0).collect();
        let n = (mean[0] * mean[0] + mean[1] * mean[1]).sqrt();
        assert!((g.value(z).data()[0] - mean[0] / n).abs() < 1e-12);
        assert!((g.value(z).data()[1] - mean[1] / n).abs() < 1e-12);
    }

    #[test]
    fn block_output_is_permutation_invariant_as_multiset() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (tok, tr) = small_cfg();
        let enc = Encoder::<f64>::init(&tok, &tr, &mut rng).unwrap();
        let pts: Vec<Vec3> = (0..16)
            .map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
            .collect();
        let feats: Vec<f64> = (0..16 * 12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let run = |perm: &[usize]| -> Vec<Vec<u64>> {
            let mut g = Graph::new();
            let vars = enc.params.bind(&mut g, false);
            let p: Vec<Vec3> = perm.iter().map(|&i| pts[i]).collect();
            let f: Vec<f64> = perm.iter().flat_map(|&i| feats[i * 12..(i + 1) * 12].to_vec()).collect();
            let x = g.constant(Tensor::new(vec![16, 12], f).unwrap());
            let (out, _, _) = sa_block(&mut g, &enc.block_vars(&vars, 0), x, &[p], BnMode::Eval).unwrap();
            let mut rows: Vec<Vec<u64>> = (0..8)
                .map(|r| g.value(out).row(r).iter().map(|v| (v * 1e9).round() as i64 as u64).collect())
                .collect();
            rows.sort();
            rows
        };
        let base = run(&(0..16).collect::<Vec<_>>());
        for _ in 0..5 {
            let mut perm: Vec<usize> = (0..16).collect();
            rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut rng);
            assert_eq!(run(&perm), base);
        }
    }

    #[test]
    fn eval_latent_is_rotation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let (tok, tr) = small_cfg();
        for pos in [false, true] {
            let tr = TransformerConfig {
                positional_encoding: pos,
                ..tr.clone()
            };
            let enc = Encoder::<f64>::init(&tok, &tr, &mut rng).unwrap();
            let ps = blob(&mut rng, 64);
            let base = enc.embed(&ps).unwrap();
            for _ in 0..20 {
                let r = random_rotation(&mut rng);
                let z = enc.embed(&apply_rotation(&ps, &r)).unwrap();
                assert!(cosine(&base, &z) >= 1.0 - 1e-9);
            }
        }
    }

    #[test]
    fn duplicated_points_barely_move_latent() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let (tok, tr) = small_cfg();
        let enc = Encoder::<f64>::init(&tok, &tr, &mut rng).unwrap();
        let ps = blob(&mut rng, 64);
        let doubled = ps.concat(&ps);
        let a = enc.embed(&ps).unwrap();
        let b = enc.embed(&doubled).unwrap();
        assert!(1.0 - cosine(&a, &b) < 1e-3);
    }

    #[test]
    fn running_stats_follow_momentum() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (tok, tr) = small_cfg();
        let mut enc = Encoder::<f64>::init(&tok, &tr, &mut rng).unwrap();
        let geoms: Vec<TokenGeometry> = (0..2)
            .map(|_| {
                let ps = blob(&mut rng, 40);
                enc.geometry(&ps, TokenStart::Fixed(0), &mut rng).unwrap()
            })
            .collect();
        let refs: Vec<&TokenGeometry> = geoms.iter().collect();
        let mut g = Graph::new();
        let vars = enc.params.bind(&mut g, true);
        let out = enc.forward(&mut g, &vars, &refs, BnMode::Train).unwrap();
        let batch_mean = g.bn_stats(out.bn_nodes[0]).unwrap().mean.clone();
        enc.update_running_stats(&g, &out);
        let rm = enc.params.get(enc.params.find("block0.bn.running_mean").unwrap()).data().to_vec();
        for (r, b) in rm.iter().zip(&batch_mean) {
            assert!((r - 0.1 * b).abs() < 1e-15);
        }
    }
}
