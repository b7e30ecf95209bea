use super::{dist2, Vec3};
use crate::error::{Error, Result};

/// Greedy farthest point sampling.
///
/// Starts at `start`, then repeatedly takes the point whose distance to the
/// selected set is largest; ties go to the smallest index.
pub fn fps(points: &[Vec3], count: usize, start: usize) -> Result<Vec<usize>> {
    let n = points.len();
    if count > n {
        return Err(Error::argument(format!("fps: count {count} exceeds {n} points")));
    }
    if count == 0 {
        return Ok(Vec::new());
    }
    if start >= n {
        return Err(Error::argument(format!("fps: start index {start} out of range for {n} points")));
    }
    let mut selected = Vec::with_capacity(count);
    let mut min_d = vec![f64::INFINITY; n];
    let mut current = start;
    for _ in 0..count {
        selected.push(current);
        min_d[current] = f64::NEG_INFINITY;
        let anchor = points[current];
        let mut best = usize::MAX;
        let mut best_d = f64::NEG_INFINITY;
        for (i, p) in points.iter().enumerate() {
            if min_d[i] == f64::NEG_INFINITY {
                continue;
            }
            let d = dist2(p, &anchor);
            if d < min_d[i] {
                min_d[i] = d;
            }
            if min_d[i] > best_d {
                best_d = min_d[i];
                best = i;
            }
        }
        if best == usize::MAX {
            break;
        }
        current = best;
    }
    Ok(selected)
}

/// All indices ordered by ascending distance to `query`, ties by index.
pub fn sorted_by_distance(query: &Vec3, points: &[Vec3]) -> Vec<usize> {
    let d: Vec<f64> = points.iter().map(|p| dist2(p, query)).collect();
    let mut idx: Vec<usize> = (0..points.len()).collect();
    idx.sort_by(|&a, &b| d[a].total_cmp(&d[b]).then(a.cmp(&b)));
    idx
}

/// The `k` nearest points to `query` in ascending distance, ties by index.
///
/// A stored point coinciding with the query is included.
pub fn knn(query: &Vec3, points: &[Vec3], k: usize) -> Result<Vec<usize>> {
    if k > points.len() {
        return Err(Error::argument(format!("knn: k = {k} exceeds {} points", points.len())));
    }
    let d: Vec<f64> = points.iter().map(|p| dist2(p, query)).collect();
    let mut idx: Vec<usize> = (0..points.len()).collect();
    let cmp = |a: &usize, b: &usize| d[*a].total_cmp(&d[*b]).then(a.cmp(b));
    if k < idx.len() && k > 0 {
        idx.select_nth_unstable_by(k - 1, cmp);
    }
    idx.truncate(k);
    idx.sort_by(cmp);
    Ok(idx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{random_rotation, Rotation};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cloud(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vec3> {
        (0..n)
            .map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
            .collect()
    }

    #[test]
    fn fps_picks_opposite_corner() {
        let sq = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [1.0, 1.0, 0.0]];
        assert_eq!(fps(&sq, 2, 0).unwrap(), vec![0, 3]);
    }

    #[test]
    fn fps_full_count_is_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pts = cloud(&mut rng, 37);
        let mut sel = fps(&pts, 37, 5).unwrap();
        assert_eq!(sel[0], 5);
        sel.sort();
        assert_eq!(sel, (0..37).collect::<Vec<_>>());
    }

    #[test]
    fn fps_with_duplicates_reaches_every_index() {
        let pts = vec![[0.0; 3]; 4];
        let mut sel = fps(&pts, 4, 2).unwrap();
        sel.sort();
        assert_eq!(sel, vec![0, 1, 2, 3]);
    }

    #[test]
    fn fps_rejects_oversized_count() {
        assert!(fps(&[[0.0; 3]], 2, 0).is_err());
    }

    #[test]
    fn knn_orders_by_distance_then_index() {
        let pts = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]];
        assert_eq!(knn(&[0.0; 3], &pts, 2).unwrap(), vec![0, 1]);
        let tie = [[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0], [0.0, 3.0, 0.0]];
        assert_eq!(knn(&[0.0; 3], &tie, 2).unwrap(), vec![0, 1]);
        assert!(knn(&[0.0; 3], &pts, 4).is_err());
    }

    #[test]
    fn knn_matches_brute_force_sort() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pts = cloud(&mut rng, 200);
        for q in cloud(&mut rng, 50) {
            for k in [1, 7, 200] {
                let mut all: Vec<(f64, usize)> = pts
                    .iter()
                    .enumerate()
                    .map(|(i, p)| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2), i))
                    .collect();
                all.sort_by(|a, b| a.partial_cmp(b).unwrap());
                let expected: Vec<usize> = all.iter().take(k).map(|x| x.1).collect();
                assert_eq!(knn(&q, &pts, k).unwrap(), expected);
            }
        }
    }

    #[test]
    fn index_outputs_are_rotation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let pts = cloud(&mut rng, 128);
        let base_fps = fps(&pts, 32, 0).unwrap();
        let base_knn = knn(&pts[3], &pts, 10).unwrap();
        for _ in 0..100 {
            let r: Rotation = random_rotation(&mut rng);
            let rotated: Vec<Vec3> = pts.iter().map(|p| r.apply(p)).collect();
            assert_eq!(fps(&rotated, 32, 0).unwrap(), base_fps);
            assert_eq!(knn(&rotated[3], &rotated, 10).unwrap(), base_knn);
        }
    }
}
