//! View generation: multi-crop, cut-mix and anisotropic scaling.

use rand::seq::index::sample;
use rand::Rng;

use crate::error::{Error, Result};
use crate::geometry::{apply_rotation, knn, normalized, random_rotation, sorted_by_distance, OrientedPointSet, Rotation};

/// Random subsample without replacement when `ps` is larger than `target`,
/// otherwise all points plus uniformly drawn duplicates.
pub fn resample<R: Rng + ?Sized>(ps: &OrientedPointSet, target: usize, rng: &mut R) -> OrientedPointSet {
    let n = ps.len();
    let idx: Vec<usize> = if n >= target {
        let mut keep = sample(rng, n, target).into_vec();
        keep.sort_unstable();
        keep
    } else {
        let mut all: Vec<usize> = (0..n).collect();
        all.extend((n..target).map(|_| rng.random_range(0..n)));
        all
    };
    ps.select(&idx)
}

/// Indices of the `⌊ratio·n⌋` points nearest to point `seed` (at least one).
pub fn crop_indices(ps: &OrientedPointSet, seed: usize, ratio: f64) -> Result<Vec<usize>> {
    let n = ps.len();
    let count = ((ratio * n as f64).floor() as usize).clamp(1, n);
    knn(&ps.points()[seed], ps.points(), count)
}

fn crop<R: Rng + ?Sized>(ps: &OrientedPointSet, ratio: (f64, f64), size: usize, rng: &mut R) -> Result<OrientedPointSet> {
    let seed = rng.random_range(0..ps.len());
    let r = rng.random_range(ratio.0..=ratio.1);
    let kept = ps.select(&crop_indices(ps, seed, r)?);
    Ok(resample(&kept, size, rng))
}

/// Two global and two local crops `[G1, G2, L1, L2]`.
pub fn multi_crop<R: Rng + ?Sized>(
    a: &OrientedPointSet,
    global: ((f64, f64), usize),
    local: ((f64, f64), usize),
    rng: &mut R,
) -> Result<[OrientedPointSet; 4]> {
    Ok([
        crop(a, global.0, global.1, rng)?,
        crop(a, global.0, global.1, rng)?,
        crop(a, local.0, local.1, rng)?,
        crop(a, local.0, local.1, rng)?,
    ])
}

/// Cut-mix with a fixed ratio `m`, reference index `p` and already-rotated `b`.
pub fn cut_mix_with(a: &OrientedPointSet, b_rotated: &OrientedPointSet, m: f64, p: usize) -> Result<OrientedPointSet> {
    let n = a.len();
    if b_rotated.len() != n {
        return Err(Error::argument(format!("cut_mix: |A| = {n} but |B| = {}", b_rotated.len())));
    }
    if !(0.0..=1.0).contains(&m) {
        return Err(Error::argument(format!("cut_mix: ratio {m} outside [0, 1]")));
    }
    let take_a = ((m * n as f64).floor() as usize).min(n);
    let reference = a.points()[p];
    let mut idx_a = sorted_by_distance(&reference, a.points());
    idx_a.truncate(take_a);
    let by_dist = sorted_by_distance(&reference, b_rotated.points());
    let idx_b = &by_dist[take_a..];
    Ok(if idx_a.is_empty() {
        b_rotated.select(idx_b)
    } else if idx_b.is_empty() {
        a.select(&idx_a)
    } else {
        a.select(&idx_a).concat(&b_rotated.select(idx_b))
    })
}

/// Mixed view `M_AB` and its ratio `m`. `B` is randomly rotated first.
pub fn cut_mix<R: Rng + ?Sized>(a: &OrientedPointSet, b: &OrientedPointSet, rng: &mut R) -> Result<(OrientedPointSet, f64)> {
    let rot = random_rotation(rng);
    let b_rot = apply_rotation(b, &rot);
    let m: f64 = rng.random();
    let p = rng.random_range(0..a.len());
    Ok((cut_mix_with(a, &b_rot, m, p)?, m))
}

/// Scales coordinates by `factors` along the rows of `axes`; orientations
/// follow the inverse-transpose map and are re-normalized.
pub fn aniso_scale_with(view: &OrientedPointSet, axes: &Rotation, factors: [f64; 3]) -> Result<OrientedPointSet> {
    let map = |v: &[f64; 3], f: &dyn Fn(usize) -> f64| -> [f64; 3] {
        // Coordinates in the axis frame, scaled, mapped back.
        let r = &axes.0;
        let local: Vec<f64> = (0..3).map(|k| (0..3).map(|i| v[i] * r[k][i]).sum::<f64>() * f(k)).collect();
        [0, 1, 2].map(|i| (0..3).map(|k| local[k] * r[k][i]).sum())
    };
    let points = view.points().iter().map(|p| map(p, &|k| factors[k])).collect();
    let orientations = view
        .orientations()
        .iter()
        .map(|o| {
            normalized(&map(o, &|k| 1.0 / factors[k]), 1e-300)
                .ok_or_else(|| Error::Numeric("anisotropic scaling collapsed an orientation".into()))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out = OrientedPointSet::new(points, orientations)?;
    out.label = view.label.clone();
    Ok(out)
}

/// Random orthonormal axes and per-axis factors drawn uniformly from `range`.
pub fn draw_aniso<R: Rng + ?Sized>(range: (f64, f64), rng: &mut R) -> (Rotation, [f64; 3]) {
    let axes = random_rotation(rng);
    (axes, [0; 3].map(|_| rng.random_range(range.0..=range.1)))
}

pub fn aniso_scale<R: Rng + ?Sized>(view: &OrientedPointSet, range: (f64, f64), rng: &mut R) -> Result<OrientedPointSet> {
    let (axes, factors) = draw_aniso(range, rng);
    aniso_scale_with(view, &axes, factors)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{dist2, dot};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cloud(rng: &mut ChaCha8Rng, n: usize) -> OrientedPointSet {
        let pts = (0..n)
            .map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
            .collect();
        let ors = (0..n).map(|_| [rng.random_range(-1.0..1.0), 0.3, rng.random_range(-1.0..1.0)]).collect();
        OrientedPointSet::new(pts, ors).unwrap()
    }

    #[test]
    fn view_sizes_follow_contract() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = cloud(&mut rng, 100);
        for _ in 0..20 {
            let v = multi_crop(&a, ((0.6, 1.0), 100), ((0.4, 0.6), 50), &mut rng).unwrap();
            assert_eq!(v[0].len(), 100);
            assert_eq!(v[1].len(), 100);
            assert_eq!(v[2].len(), 50);
            assert_eq!(v[3].len(), 50);
        }
    }

    #[test]
    fn full_crop_keeps_every_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = cloud(&mut rng, 30);
        let mut idx = crop_indices(&a, 4, 1.0).unwrap();
        idx.sort_unstable();
        assert_eq!(idx, (0..30).collect::<Vec<_>>());
        let r = resample(&a.select(&idx), 30, &mut rng);
        assert_eq!(r, a);
    }

    #[test]
    fn crop_is_contiguous() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = cloud(&mut rng, 200);
        for _ in 0..20 {
            let seed = rng.random_range(0..200);
            let kept = crop_indices(&a, seed, rng.random_range(0.4..1.0)).unwrap();
            let c = a.points()[seed];
            let max_kept = kept.iter().map(|&i| dist2(&a.points()[i], &c)).fold(0.0, f64::max);
            let min_out = (0..200)
                .filter(|i| !kept.contains(i))
                .map(|i| dist2(&a.points()[i], &c))
                .fold(f64::INFINITY, f64::min);
            assert!(max_kept <= min_out);
        }
    }

    #[test]
    fn upsampling_duplicates_existing_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = cloud(&mut rng, 7);
        let r = resample(&a, 20, &mut rng);
        assert_eq!(r.len(), 20);
        assert_eq!(&r.points()[..7], a.points());
        assert!(r.points().iter().all(|p| a.points().contains(p)));
    }

    #[test]
    fn cut_mix_sizes_and_boundaries() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = cloud(&mut rng, 4);
        let b = cloud(&mut rng, 4);
        let m = cut_mix_with(&a, &b, 0.5, 0).unwrap();
        assert_eq!(m.len(), 4);
        assert_eq!(m.points()[0], a.points()[0]);
        let all_b = cut_mix_with(&a, &b, 0.1, 0).unwrap();
        let mut got: Vec<_> = all_b.points().to_vec();
        let mut want: Vec<_> = b.points().to_vec();
        got.sort_by(|x, y| x.partial_cmp(y).unwrap());
        want.sort_by(|x, y| x.partial_cmp(y).unwrap());
        assert_eq!(got, want);
        let all_a = cut_mix_with(&a, &b, 1.0, 2).unwrap();
        assert_eq!(all_a.len(), 4);
        assert!(all_a.points().iter().all(|p| a.points().contains(p)));
        let (mixed, ratio) = cut_mix(&a, &b, &mut rng).unwrap();
        assert_eq!(mixed.len(), 4);
        assert!((0.0..=1.0).contains(&ratio));
    }

    #[test]
    fn b_part_is_farthest_from_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = cloud(&mut rng, 50);
        let b = cloud(&mut rng, 50);
        let m = cut_mix_with(&a, &b, 0.3, 7).unwrap();
        let c = a.points()[7];
        let b_part = &m.points()[15..];
        let min_kept = b_part.iter().map(|p| dist2(p, &c)).fold(f64::INFINITY, f64::min);
        let dropped = b.points().iter().filter(|p| !b_part.contains(p));
        assert!(dropped.map(|p| dist2(p, &c)).all(|d| d <= min_kept));
    }

    #[test]
    fn unit_factors_leave_view_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = cloud(&mut rng, 40);
        let axes = random_rotation(&mut rng);
        let s = aniso_scale_with(&a, &axes, [1.0; 3]).unwrap();
        for (p, q) in a.points().iter().zip(s.points()) {
            assert!(dist2(p, q).sqrt() < 1e-12);
        }
        for (p, q) in a.orientations().iter().zip(s.orientations()) {
            assert!(dist2(p, q).sqrt() < 1e-12);
        }
    }

    #[test]
    fn plane_normals_survive_in_plane_stretch() {
        let pts = vec![[0.0, 0.0, 0.0], [1.0, 2.0, 0.0], [-0.5, 0.3, 0.0]];
        let ps = OrientedPointSet::new(pts, vec![[0.0, 0.0, 1.0]; 3]).unwrap();
        let s = aniso_scale_with(&ps, &Rotation::IDENTITY, [2.0, 1.0, 1.0]).unwrap();
        assert_eq!(s.points()[1], [2.0, 2.0, 0.0]);
        for n in s.orientations() {
            assert!((n[2] - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn factors_stay_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..1000 {
            let (axes, f) = draw_aniso((0.67, 1.5), &mut rng);
            assert!(f.iter().all(|v| (0.67..=1.5).contains(v)));
            assert!((axes.determinant() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn scaled_normals_stay_perpendicular_to_surface() {
        // Tangent directions map with the forward transform, normals with the
        // inverse transpose, so their dot product stays zero.
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let n = normalized(&[0.3, -0.4, 0.85], 1e-9).unwrap();
        let t = normalized(&[0.4, 0.3, 0.0], 1e-9).unwrap();
        let ps = OrientedPointSet::new(vec![[0.0; 3], t], vec![n, n]).unwrap();
        for _ in 0..20 {
            let out = aniso_scale(&ps, (0.67, 1.5), &mut rng).unwrap();
            let tangent = out.points()[1];
            assert!(dot(&tangent, &out.orientations()[0]).abs() < 1e-12);
        }
    }
}
