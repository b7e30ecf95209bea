//! Rotation-invariant tokenizer.
//!
//! Each token point `c` (chosen by FPS) gets a local reference frame built
//! from its orientation and a distance-weighted covariance of its region.
//! The region, expressed in that frame, is summarized by a POD grid
//! (per-cell point fraction, mean position and orientation second moment)
//! which a shared affine map projects to the token feature.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{CsrMatrix, Real, Tensor};
use crate::error::{Error, Result};
use crate::geometry::{cross, dot, fps, knn, norm, normalized, scale, sub, sym_eigen3, OrientedPointSet, Vec3};

/// Channels per grid cell: fraction, mean xyz, orientation moment (6).
pub const POD_CHANNELS: usize = 10;

/// Grid coordinates closer than this (in cell units) to a cell boundary are
/// snapped onto it, so coplanar points through the token point bin the same
/// way regardless of the input pose.
const BIN_SNAP: f64 = 1e-9;

/// Relative magnitude below which a projection counts as zero for sign votes.
const SIGN_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OrientationMoment {
    /// Mean of `o·oᵀ` over the cell.
    #[default]
    Uncentered,
    /// Covariance `mean(o·oᵀ) − mean(o)·mean(o)ᵀ`.
    Centered,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TokenizerConfig {
    pub token_count: usize,
    pub grid: usize,
    pub feature_width: usize,
    /// Fraction of the N points (nearest to the token point) forming its region.
    pub region_scale: f64,
    pub orientation_moment: OrientationMoment,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self {
            token_count: 256,
            grid: 6,
            feature_width: 512,
            region_scale: 1.0,
            orientation_moment: OrientationMoment::Uncentered,
        }
    }
}

impl TokenizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.token_count == 0 {
            return Err(Error::config("tokenizer.token_count", "must be at least 1"));
        }
        if self.grid == 0 {
            return Err(Error::config("tokenizer.grid", "must be at least 1"));
        }
        if self.feature_width == 0 {
            return Err(Error::config("tokenizer.feature_width", "must be at least 1"));
        }
        if !(self.region_scale > 0.0 && self.region_scale <= 1.0) {
            return Err(Error::config("tokenizer.region_scale", "must lie in (0, 1]"));
        }
        Ok(())
    }

    /// Flattened POD length, `G³·10`.
    pub fn descriptor_len(&self) -> usize {
        self.grid.pow(3) * POD_CHANNELS
    }

    /// Number of points in each token's region for an N-point input (at least 1).
    pub fn region_size(&self, n: usize) -> usize {
        ((self.region_scale * n as f64).floor() as usize).clamp(1, n)
    }
}

/// Local reference frame at a token point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Lrf {
    pub u1: Vec3,
    pub u2: Vec3,
    pub u3: Vec3,
    /// Region radius: largest distance from the token point.
    pub radius: f64,
    /// Set when the covariance did not determine `u2` and a fixed fallback was used.
    pub degenerate: bool,
}

impl Lrf {
    /// Rows `u1, u2, u3`.
    pub fn matrix(&self) -> [[f64; 3]; 3] {
        [self.u1, self.u2, self.u3]
    }

    /// Coordinates of `v` in the frame: `(v·u1, v·u2, v·u3)`.
    #[inline]
    pub fn to_local(&self, v: &Vec3) -> Vec3 {
        [dot(v, &self.u1), dot(v, &self.u2), dot(v, &self.u3)]
    }
}

fn gram_schmidt_fallback(u1: &Vec3) -> Vec3 {
    for axis in [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]] {
        let v = sub(&axis, &scale(u1, dot(&axis, u1)));
        if let Some(v) = normalized(&v, 1e-6) {
            return v;
        }
    }
    // Unreachable for unit u1: it cannot be parallel to both x and y.
    [0.0, 0.0, 1.0]
}

/// Builds the frame at `points[c_index]` from the listed region.
///
/// `u1` is the token orientation; `u2` is the second principal axis of the
/// distance-weighted covariance projected off `u1`, signed toward the side
/// holding more region points; `u3 = u1 × u2`.
pub fn compute_lrf(ps: &OrientedPointSet, region: &[usize], c_index: usize) -> Result<Lrf> {
    if region.is_empty() {
        return Err(Error::argument("compute_lrf: empty region"));
    }
    let pts = ps.points();
    let c = pts[c_index];
    let u1 = ps.orientations()[c_index];

    let offsets: Vec<Vec3> = region.iter().map(|&i| sub(&pts[i], &c)).collect();
    let dists: Vec<f64> = offsets.iter().map(norm).collect();
    let radius = dists.iter().copied().fold(0.0, f64::max);

    let mut cov = [[0.0; 3]; 3];
    let mut wsum = 0.0;
    for (d, &di) in offsets.iter().zip(&dists) {
        let w = radius - di;
        wsum += w;
        for a in 0..3 {
            for b in 0..3 {
                cov[a][b] += w * d[a] * d[b];
            }
        }
    }
    let trace = cov[0][0] + cov[1][1] + cov[2][2];

    let mut degenerate = false;
    let candidate = if radius > 0.0 && wsum > 0.0 && trace > 1e-300 {
        for row in cov.iter_mut() {
            for v in row.iter_mut() {
                *v /= wsum;
            }
        }
        let eig = sym_eigen3(&cov);
        [eig.vectors[1], eig.vectors[0]]
            .iter()
            .find_map(|e| normalized(&sub(e, &scale(&u1, dot(e, &u1))), 1e-9))
    } else {
        None
    };
    let mut u2 = candidate.unwrap_or_else(|| {
        degenerate = true;
        gram_schmidt_fallback(&u1)
    });

    // Majority vote over region points, then mean projection, then a fixed
    // component rule.
    let tol = SIGN_EPS * radius.max(f64::MIN_POSITIVE);
    let projections: Vec<f64> = offsets.iter().map(|d| dot(d, &u2)).collect();
    let votes: i64 = projections
        .iter()
        .map(|&p| if p > tol { 1 } else if p < -tol { -1 } else { 0 })
        .sum();
    let flip = match votes.cmp(&0) {
        std::cmp::Ordering::Less => true,
        std::cmp::Ordering::Greater => false,
        std::cmp::Ordering::Equal => {
            let mean: f64 = projections.iter().sum();
            if mean < -tol {
                true
            } else if mean > tol {
                false
            } else {
                u2.iter().find(|v| v.abs() > 1e-12).is_some_and(|v| *v < 0.0)
            }
        }
    };
    if flip {
        u2 = scale(&u2, -1.0);
    }
    let u3 = cross(&u1, &u2);
    Ok(Lrf {
        u1,
        u2,
        u3,
        radius,
        degenerate,
    })
}

/// POD grid over the cube `[−r, r]³`, flattened cell-major
/// (x slowest, then y, then z, then channel).
#[derive(Debug, Clone, PartialEq)]
pub struct PodGrid {
    pub grid: usize,
    pub values: Vec<f64>,
}

impl PodGrid {
    pub fn cell(&self, ix: usize, iy: usize, iz: usize) -> &[f64] {
        let k = ((ix * self.grid + iy) * self.grid + iz) * POD_CHANNELS;
        &self.values[k..k + POD_CHANNELS]
    }

    pub fn cell_count(&self) -> usize {
        self.grid.pow(3)
    }
}

#[inline]
fn bin(coord: f64, radius: f64, grid: usize) -> usize {
    let g = grid as f64;
    let mut t = coord * (g / (2.0 * radius)) + g * 0.5;
    let nearest = t.round();
    if (t - nearest).abs() < BIN_SNAP {
        t = nearest;
    }
    (t.floor().max(0.0) as usize).min(grid - 1)
}

/// Describes points already expressed in a local frame.
///
/// `points` and `orientations` are local coordinates; the count channel is
/// normalized by the number of points.
pub fn pod_descriptor(
    points: &[Vec3],
    orientations: &[Vec3],
    radius: f64,
    grid: usize,
    moment: OrientationMoment,
) -> Result<PodGrid> {
    if !(radius > 0.0) || !radius.is_finite() {
        return Err(Error::argument(format!("pod_descriptor: radius must be positive, got {radius}")));
    }
    if grid == 0 {
        return Err(Error::argument("pod_descriptor: grid must be at least 1"));
    }
    if points.len() != orientations.len() || points.is_empty() {
        return Err(Error::argument("pod_descriptor: need matching, non-empty points and orientations"));
    }
    let cells = grid.pow(3);
    // Accumulators: count, Σp (3), Σo (3), Σooᵀ upper (6).
    let mut acc = vec![0.0; cells * 13];
    for (p, o) in points.iter().zip(orientations) {
        let cell = (bin(p[0], radius, grid) * grid + bin(p[1], radius, grid)) * grid + bin(p[2], radius, grid);
        let a = &mut acc[cell * 13..(cell + 1) * 13];
        a[0] += 1.0;
        for k in 0..3 {
            a[1 + k] += p[k];
            a[4 + k] += o[k];
        }
        a[7] += o[0] * o[0];
        a[8] += o[0] * o[1];
        a[9] += o[0] * o[2];
        a[10] += o[1] * o[1];
        a[11] += o[1] * o[2];
        a[12] += o[2] * o[2];
    }
    let total = points.len() as f64;
    let mut values = vec![0.0; cells * POD_CHANNELS];
    for cell in 0..cells {
        let a = &acc[cell * 13..(cell + 1) * 13];
        let count = a[0];
        if count == 0.0 {
            continue;
        }
        let out = &mut values[cell * POD_CHANNELS..(cell + 1) * POD_CHANNELS];
        out[0] = count / total;
        for k in 0..3 {
            out[1 + k] = a[1 + k] / count;
        }
        let mo = [a[4] / count, a[5] / count, a[6] / count];
        let pairs = [(0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2)];
        for (j, &(x, y)) in pairs.iter().enumerate() {
            let mut v = a[7 + j] / count;
            if moment == OrientationMoment::Centered {
                v -= mo[x] * mo[y];
            }
            out[4 + j] = v;
        }
    }
    Ok(PodGrid { grid, values })
}

/// Where FPS starts when picking token points.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenStart {
    Fixed(usize),
    /// Uniform index drawn from the generator.
    Random,
}

/// Non-trainable part of tokenization for one point set.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenGeometry {
    pub points: Vec<Vec3>,
    /// One POD row per token, `G³·10` columns, mostly zeros.
    pub descriptors: CsrMatrix<f64>,
    pub degenerate: Vec<bool>,
}

impl TokenGeometry {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Picks token points and computes their frames and POD descriptors.
pub fn token_geometry<R: Rng + ?Sized>(
    ps: &OrientedPointSet,
    cfg: &TokenizerConfig,
    start: TokenStart,
    rng: &mut R,
) -> Result<TokenGeometry> {
    cfg.validate()?;
    let n = ps.len();
    if n < cfg.token_count {
        return Err(Error::argument(format!(
            "tokenize: {n} points cannot yield {} tokens",
            cfg.token_count
        )));
    }
    let start = match start {
        TokenStart::Fixed(i) => i,
        TokenStart::Random => rng.random_range(0..n),
    };
    let centers = fps(ps.points(), cfg.token_count, start)?;
    let region_size = cfg.region_size(n);
    let all: Vec<usize> = (0..n).collect();

    let mut descriptors = CsrMatrix::empty(cfg.descriptor_len());
    let mut degenerate = Vec::with_capacity(centers.len());
    let mut local_p = Vec::with_capacity(region_size);
    let mut local_o = Vec::with_capacity(region_size);
    for &ci in &centers {
        let c = ps.points()[ci];
        let region = if region_size == n {
            all.clone()
        } else {
            knn(&c, ps.points(), region_size)?
        };
        let lrf = compute_lrf(ps, &region, ci)?;
        degenerate.push(lrf.degenerate);
        local_p.clear();
        local_o.clear();
        for &i in &region {
            local_p.push(lrf.to_local(&sub(&ps.points()[i], &c)));
            local_o.push(lrf.to_local(&ps.orientations()[i]));
        }
        // A region collapsed onto c has no extent; any positive radius bins it centrally.
        let radius = if lrf.radius > 0.0 { lrf.radius } else { 1.0 };
        let pod = pod_descriptor(&local_p, &local_o, radius, cfg.grid, cfg.orientation_moment)?;
        descriptors.push_row(pod.values.iter().enumerate().filter(|(_, v)| **v != 0.0).map(|(j, v)| (j, *v)));
    }
    Ok(TokenGeometry {
        points: centers.iter().map(|&i| ps.points()[i]).collect(),
        descriptors,
        degenerate,
    })
}

/// Token points with their feature vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSet<T> {
    pub points: Vec<Vec3>,
    /// `[T, D]`.
    pub features: Tensor<T>,
}

impl<T: Real> TokenSet<T> {
    pub fn new(points: Vec<Vec3>, features: Tensor<T>) -> Result<Self> {
        let s = features.shape();
        if points.is_empty() || s.len() != 2 || s[0] != points.len() {
            return Err(Error::argument(format!(
                "token set: {} points with features of shape {s:?}",
                points.len()
            )));
        }
        Ok(Self { points, features })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn width(&self) -> usize {
        self.features.shape()[1]
    }

    /// Binary record: `T u32, D u32, T·3 coords, T·D features`, all
    /// little-endian, coordinates and features as f32.
    pub fn to_bytes(&self) -> Vec<u8> {
        let (t, d) = (self.len(), self.width());
        let mut out = Vec::with_capacity(8 + 4 * t * (3 + d));
        out.extend_from_slice(&(t as u32).to_le_bytes());
        out.extend_from_slice(&(d as u32).to_le_bytes());
        for p in &self.points {
            for v in p {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        for v in self.features.data() {
            out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Format {
            path: "<token set>".into(),
            line: 0,
            msg: m.to_string(),
        };
        if bytes.len() < 8 {
            return Err(bad("truncated header"));
        }
        let t = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
        let d = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        if bytes.len() != 8 + 4 * t * (3 + d) {
            return Err(bad("length does not match header"));
        }
        let floats: Vec<f32> = bytes[8..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        let points = floats[..3 * t].chunks(3).map(|c| [c[0] as f64, c[1] as f64, c[2] as f64]).collect();
        let features = Tensor::new(vec![t, d], floats[3 * t..].iter().map(|&v| T::from_f64(v as f64)).collect())?;
        Self::new(points, features)
    }
}

/// Shared affine projection `x = pod·W + b` from descriptors to token features.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenProjection<T> {
    /// `[G³·10, D]`.
    pub weight: Tensor<T>,
    /// `[D]`.
    pub bias: Tensor<T>,
}

impl<T: Real> TokenProjection<T> {
    /// Uniform initialization in `±sqrt(1/fan_in)` for weight and bias.
    pub fn init<R: Rng + ?Sized>(cfg: &TokenizerConfig, rng: &mut R) -> Self {
        let fan_in = cfg.descriptor_len();
        Self {
            weight: uniform_tensor(vec![fan_in, cfg.feature_width], fan_in, rng),
            bias: uniform_tensor(vec![cfg.feature_width], fan_in, rng),
        }
    }

    pub fn apply(&self, geom: &TokenGeometry) -> Result<Tensor<T>> {
        let (k, d) = (self.weight.shape()[0], self.weight.shape()[1]);
        if geom.descriptors.cols != k || self.bias.len() != d {
            return Err(Error::argument(format!(
                "token projection expects {} descriptor columns, got {}",
                k, geom.descriptors.cols
            )));
        }
        let w = self.weight.data();
        let mut out = Vec::with_capacity(geom.len() * d);
        let m = &geom.descriptors;
        for r in 0..m.rows {
            let mut row = self.bias.data().to_vec();
            for p in m.indptr[r]..m.indptr[r + 1] {
                let v = T::from_f64(m.values[p]);
                let wr = &w[m.indices[p] * d..(m.indices[p] + 1) * d];
                for (o, &x) in row.iter_mut().zip(wr) {
                    *o = *o + v * x;
                }
            }
            out.extend(row);
        }
        Tensor::new(vec![m.rows, d], out)
    }
}

pub(crate) fn uniform_tensor<T: Real, R: Rng + ?Sized>(shape: Vec<usize>, fan_in: usize, rng: &mut R) -> Tensor<T> {
    let bound = (1.0 / fan_in.max(1) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::from_f64(rng.random_range(-bound..=bound))).collect();
    Tensor::new(shape, data).expect("shape matches length")
}

/// Full tokenizer: FPS, frames, POD and projection.
pub fn tokenize<T: Real, R: Rng + ?Sized>(
    ps: &OrientedPointSet,
    cfg: &TokenizerConfig,
    projection: &TokenProjection<T>,
    start: TokenStart,
    rng: &mut R,
) -> Result<TokenSet<T>> {
    let geom = token_geometry(ps, cfg, start, rng)?;
    let features = projection.apply(&geom)?;
    TokenSet::new(geom.points, features)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{apply_rotation, random_rotation};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_set(rng: &mut ChaCha8Rng, n: usize) -> OrientedPointSet {
        let pts = (0..n)
            .map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-0.7..0.7), rng.random_range(-0.4..0.4)])
            .collect();
        let ors = (0..n)
            .map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
            .collect();
        OrientedPointSet::new(pts, ors).unwrap()
    }

    #[test]
    fn lrf_on_x_axis_region() {
        let pts = vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [-0.5, 0.0, 0.0], [2.0, 0.0, 0.0]];
        let ps = OrientedPointSet::new(pts.clone(), vec![[0.0, 0.0, 1.0]; 4]).unwrap();
        let lrf = compute_lrf(&ps, &[0, 1, 2, 3], 0).unwrap();
        // Closed form: M is diagonal with only an x entry, so the second
        // eigenvector (in index order among the zero eigenvalues) is y.
        let r = 2.0;
        let w: Vec<f64> = pts.iter().map(|p| r - norm(p)).collect();
        let mxx: f64 = pts.iter().zip(&w).map(|(p, w)| w * p[0] * p[0]).sum::<f64>() / w.iter().sum::<f64>();
        assert!(mxx > 0.0);
        assert_eq!(lrf.u1, [0.0, 0.0, 1.0]);
        assert!((lrf.u2[1].abs() - 1.0).abs() < 1e-12);
        assert_eq!(lrf.u3, cross(&lrf.u1, &lrf.u2));
        assert!(!lrf.degenerate);
    }

    #[test]
    fn lrf_is_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ps = random_set(&mut rng, 60);
        let region: Vec<usize> = (0..60).collect();
        for c in [0, 7, 33] {
            let l = compute_lrf(&ps, &region, c).unwrap();
            assert!(dot(&l.u1, &l.u2).abs() < 1e-6);
            assert!(dot(&l.u1, &l.u3).abs() < 1e-6);
            assert!(dot(&l.u2, &l.u3).abs() < 1e-6);
            for u in [l.u1, l.u2, l.u3] {
                assert!((norm(&u) - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn collapsed_region_uses_fallback() {
        let ps = OrientedPointSet::new(vec![[1.0, 1.0, 1.0]; 3], vec![[0.0, 0.0, 1.0]; 3]).unwrap();
        let l = compute_lrf(&ps, &[0, 1, 2], 0).unwrap();
        assert!(l.degenerate);
        assert_eq!(l.radius, 0.0);
        assert!(dot(&l.u1, &l.u2).abs() < 1e-12);
    }

    #[test]
    fn lrf_coordinates_are_rotation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let ps = random_set(&mut rng, 80);
        let region: Vec<usize> = (0..80).collect();
        let base = compute_lrf(&ps, &region, 5).unwrap();
        let c = ps.points()[5];
        for _ in 0..100 {
            let r = random_rotation(&mut rng);
            let rps = apply_rotation(&ps, &r);
            let rl = compute_lrf(&rps, &region, 5).unwrap();
            let rc = rps.points()[5];
            for i in 0..80 {
                let a = base.to_local(&sub(&ps.points()[i], &c));
                let b = rl.to_local(&sub(&rps.points()[i], &rc));
                for k in 0..3 {
                    assert!((a[k] - b[k]).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn pod_single_point_cell() {
        // Cell width 2r/G = 1 for r = 3, G = 6; the center of cell (3,3,3) is 0.5.
        let g = pod_descriptor(&[[0.5, 0.5, 0.5]], &[[0.0, 0.0, 1.0]], 3.0, 6, OrientationMoment::Uncentered).unwrap();
        assert_eq!(g.cell(3, 3, 3), &[1.0, 0.5, 0.5, 0.5, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
        assert_eq!(g.cell(0, 0, 0), &[0.0; 10]);
        assert_eq!(g.values.len(), 2160);
    }

    #[test]
    fn pod_count_channel_is_distribution() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pts: Vec<Vec3> = (0..500)
            .map(|_| [rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0)])
            .collect();
        let ors: Vec<Vec3> = (0..500)
            .map(|_| normalized(&[rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 0.5], 1e-9).unwrap())
            .collect();
        let g = pod_descriptor(&pts, &ors, 1.0, 6, OrientationMoment::Uncentered).unwrap();
        // Histogram oracle: bin by direct floor on the same grid.
        let mut hist = vec![0usize; 216];
        for p in &pts {
            let b = |v: f64| (((v + 1.0) / (2.0 / 6.0)).floor() as i64).clamp(0, 5) as usize;
            hist[(b(p[0]) * 6 + b(p[1])) * 6 + b(p[2])] += 1;
        }
        let mut total = 0.0;
        for cell in 0..216 {
            let frac = g.values[cell * 10];
            assert!((frac - hist[cell] as f64 / 500.0).abs() < 1e-12);
            total += frac;
            // Uncentered moment of unit vectors: symmetric PSD with trace ≤ 1.
            let m = &g.values[cell * 10 + 4..cell * 10 + 10];
            let trace = m[0] + m[3] + m[5];
            assert!(trace <= 1.0 + 1e-12);
            if frac > 0.0 {
                assert!((trace - 1.0).abs() < 1e-12);
                assert!(m[0] >= 0.0 && m[3] >= 0.0 && m[5] >= 0.0);
                assert!(m[0] * m[3] - m[1] * m[1] >= -1e-12);
            }
        }
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn pod_rejects_nonpositive_radius() {
        assert!(pod_descriptor(&[[0.0; 3]], &[[0.0, 0.0, 1.0]], 0.0, 6, OrientationMoment::Uncentered).is_err());
    }

    #[test]
    fn centered_moment_of_single_orientation_is_zero() {
        let g = pod_descriptor(&[[0.1, 0.1, 0.1]; 2], &[[0.0, 0.6, 0.8]; 2], 1.0, 2, OrientationMoment::Centered).unwrap();
        assert!(g.cell(1, 1, 1)[4..].iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn full_scale_tokens_cover_all_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ps = random_set(&mut rng, 40);
        let cfg = TokenizerConfig {
            token_count: 4,
            grid: 3,
            feature_width: 8,
            ..Default::default()
        };
        let geom = token_geometry(&ps, &cfg, TokenStart::Fixed(0), &mut rng).unwrap();
        assert_eq!(geom.len(), 4);
        for r in 0..4 {
            let total: f64 = (geom.descriptors.indptr[r]..geom.descriptors.indptr[r + 1])
                .filter(|&p| geom.descriptors.indices[p] % POD_CHANNELS == 0)
                .map(|p| geom.descriptors.values[p])
                .sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_projection_yields_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ps = random_set(&mut rng, 30);
        let cfg = TokenizerConfig {
            token_count: 5,
            grid: 2,
            feature_width: 3,
            ..Default::default()
        };
        let proj = TokenProjection::<f64> {
            weight: Tensor::zeros(vec![80, 3]),
            bias: Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap(),
        };
        let ts = tokenize(&ps, &cfg, &proj, TokenStart::Fixed(0), &mut rng).unwrap();
        for r in 0..5 {
            assert_eq!(ts.features.row(r), &[0.5, -1.0, 2.0]);
        }
    }

    #[test]
    fn too_few_points_for_tokens() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ps = random_set(&mut rng, 3);
        let cfg = TokenizerConfig {
            token_count: 4,
            ..Default::default()
        };
        assert!(matches!(
            token_geometry(&ps, &cfg, TokenStart::Fixed(0), &mut rng),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn token_set_binary_round_trip() {
        let ts = TokenSet::<f64>::new(
            vec![[1.0, 2.0, 3.0], [-1.0, 0.5, 0.0]],
            Tensor::new(vec![2, 2], vec![0.25, -0.5, 1.0, 2.0]).unwrap(),
        )
        .unwrap();
        let bytes = ts.to_bytes();
        assert_eq!(bytes.len(), 8 + 4 * 2 * 5);
        assert_eq!(&bytes[0..4], &2u32.to_le_bytes());
        assert_eq!(TokenSet::<f64>::from_bytes(&bytes).unwrap(), ts);
    }
}
