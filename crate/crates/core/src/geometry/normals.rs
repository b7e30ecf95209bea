use super::{dot, knn, sub, sym_eigen3, Vec3};
use crate::error::{Error, Result};

/// PCA normals over each point and its `k` nearest neighbors.
///
/// The normal is the eigenvector of the smallest covariance eigenvalue. Its
/// sign is chosen so that most neighbor offsets `q − p` have a non-negative
/// projection on it. A tied vote falls back to the sign of the summed
/// projections, and only then orients toward +z (then +y, then +x).
pub fn estimate_normals(points: &[Vec3], k: usize) -> Result<Vec<Vec3>> {
    if points.len() <= k {
        return Err(Error::argument(format!(
            "normal estimation needs more than k = {k} points, got {}",
            points.len()
        )));
    }
    points
        .iter()
        .map(|p| {
            // knn includes p itself, so k + 1 covers the point and k neighbors.
            let hood = knn(p, points, k + 1)?;
            let inv = 1.0 / hood.len() as f64;
            let mut mean = [0.0; 3];
            for &i in &hood {
                for c in 0..3 {
                    mean[c] += points[i][c] * inv;
                }
            }
            let mut cov = [[0.0; 3]; 3];
            for &i in &hood {
                let d = sub(&points[i], &mean);
                for a in 0..3 {
                    for b in 0..3 {
                        cov[a][b] += d[a] * d[b] * inv;
                    }
                }
            }
            let normal = sym_eigen3(&cov).vectors[2];
            let proj: Vec<f64> = hood.iter().map(|&i| dot(&sub(&points[i], p), &normal)).collect();
            let votes: i64 = proj
                .iter()
                .map(|&s| {
                    if s > 0.0 {
                        1
                    } else if s < 0.0 {
                        -1
                    } else {
                        0
                    }
                })
                .sum();
            let flip = match votes.cmp(&0) {
                std::cmp::Ordering::Less => true,
                std::cmp::Ordering::Greater => false,
                std::cmp::Ordering::Equal if proj.iter().sum::<f64>() != 0.0 => proj.iter().sum::<f64>() < 0.0,
                std::cmp::Ordering::Equal => {
                    let lead = [normal[2], normal[1], normal[0]]
                        .into_iter()
                        .find(|v| *v != 0.0)
                        .unwrap_or(1.0);
                    lead < 0.0
                }
            };
            Ok(if flip { [-normal[0], -normal[1], -normal[2]] } else { normal })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{norm, random_rotation};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn planar_points_have_axis_normals() {
        let pts: Vec<Vec3> = (0..20).map(|i| [(i % 5) as f64, (i / 5) as f64 * 0.7, 0.0]).collect();
        for n in estimate_normals(&pts, 16).unwrap() {
            assert!(n[0].abs() < 1e-6 && n[1].abs() < 1e-6);
            assert!((n[2].abs() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn sphere_normals_are_radial() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pts: Vec<Vec3> = (0..500)
            .map(|_| loop {
                let v = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
                let n = norm(&v);
                if n > 0.1 && n <= 1.0 {
                    break [v[0] / n, v[1] / n, v[2] / n];
                }
            })
            .collect();
        let normals = estimate_normals(&pts, 16).unwrap();
        let mean_abs: f64 = pts.iter().zip(&normals).map(|(p, n)| dot(p, n).abs()).sum::<f64>() / 500.0;
        assert!(mean_abs > 0.95, "mean |cos| = {mean_abs}");
    }

    #[test]
    fn too_few_points() {
        let pts = vec![[0.0; 3]; 10];
        assert!(matches!(estimate_normals(&pts, 16), Err(Error::Argument(_))));
    }

    #[test]
    fn normals_are_rotation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        // A curved patch so that the majority vote is never tied.
        let pts: Vec<Vec3> = (0..120)
            .map(|_| {
                let x: f64 = rng.random_range(-1.0..1.0);
                let y: f64 = rng.random_range(-1.0..1.0);
                [x, y, 0.3 * (x * x + y * y)]
            })
            .collect();
        let base = estimate_normals(&pts, 12).unwrap();
        for _ in 0..10 {
            let r = random_rotation(&mut rng);
            let rotated: Vec<Vec3> = pts.iter().map(|p| r.apply(p)).collect();
            let out = estimate_normals(&rotated, 12).unwrap();
            for (a, b) in base.iter().zip(&out) {
                let ra = r.apply(a);
                assert!(norm(&sub(&ra, b)) < 1e-6);
            }
        }
    }
}
