use super::Vec3;

/// Eigen-decomposition of a symmetric 3×3 matrix.
///
/// `values` are sorted in descending order and `vectors[k]` is the unit
/// eigenvector for `values[k]`. Equal eigenvalues keep the order in which
/// the Jacobi sweep produced them, so diagonal input maps to the coordinate
/// axes in index order.
#[derive(Debug, Clone, Copy)]
pub struct SymEigen3 {
    pub values: [f64; 3],
    pub vectors: [Vec3; 3],
}

/// Cyclic Jacobi iteration; converges to machine precision for 3×3 input.
pub fn sym_eigen3(m: &[[f64; 3]; 3]) -> SymEigen3 {
    let mut a = *m;
    // Columns of v accumulate the rotations.
    let mut v = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

    for _sweep in 0..64 {
        let off = a[0][1] * a[0][1] + a[0][2] * a[0][2] + a[1][2] * a[1][2];
        let diag = a[0][0] * a[0][0] + a[1][1] * a[1][1] + a[2][2] * a[2][2];
        if off <= f64::EPSILON * f64::EPSILON * diag || off == 0.0 {
            break;
        }
        for (p, q) in [(0usize, 1usize), (0, 2), (1, 2)] {
            let apq = a[p][q];
            if apq == 0.0 {
                continue;
            }
            let theta = (a[q][q] - a[p][p]) / (2.0 * apq);
            let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
            let t = if theta == 0.0 { 1.0 } else { t };
            let c = 1.0 / (t * t + 1.0).sqrt();
            let s = t * c;

            // A ← JᵀAJ restricted to rows/cols p, q.
            for k in 0..3 {
                let akp = a[k][p];
                let akq = a[k][q];
                a[k][p] = c * akp - s * akq;
                a[k][q] = s * akp + c * akq;
            }
            for k in 0..3 {
                let apk = a[p][k];
                let aqk = a[q][k];
                a[p][k] = c * apk - s * aqk;
                a[q][k] = s * apk + c * aqk;
            }
            a[p][q] = 0.0;
            a[q][p] = 0.0;
            for row in v.iter_mut() {
                let vp = row[p];
                let vq = row[q];
                row[p] = c * vp - s * vq;
                row[q] = s * vp + c * vq;
            }
        }
    }

    let mut order = [0usize, 1, 2];
    order.sort_by(|&i, &j| a[j][j].partial_cmp(&a[i][i]).unwrap_or(std::cmp::Ordering::Equal));
    let column = |k: usize| [v[0][k], v[1][k], v[2][k]];
    SymEigen3 {
        values: [a[order[0]][order[0]], a[order[1]][order[1]], a[order[2]][order[2]]],
        vectors: [column(order[0]), column(order[1]), column(order[2])],
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{dot, norm};

    fn mat_vec(m: &[[f64; 3]; 3], x: &Vec3) -> Vec3 {
        [dot(&m[0], x), dot(&m[1], x), dot(&m[2], x)]
    }

    #[test]
    fn diagonal_input_yields_axes_in_order() {
        let e = sym_eigen3(&[[3.0, 0.0, 0.0], [0.0, 0.0, 0.0], [0.0, 0.0, 0.0]]);
        assert_eq!(e.values, [3.0, 0.0, 0.0]);
        assert_eq!(e.vectors, [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);
    }

    #[test]
    fn agrees_with_nalgebra() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let mut m = [[0.0; 3]; 3];
            for i in 0..3 {
                for j in i..3 {
                    let x: f64 = rng.random_range(-2.0..2.0);
                    m[i][j] = x;
                    m[j][i] = x;
                }
            }
            let e = sym_eigen3(&m);
            let oracle = nalgebra::Matrix3::from_fn(|i, j| m[i][j]).symmetric_eigen();
            let mut expected: Vec<f64> = oracle.eigenvalues.iter().copied().collect();
            expected.sort_by(|a, b| b.partial_cmp(a).unwrap());
            for k in 0..3 {
                assert!((e.values[k] - expected[k]).abs() < 1e-12);
                let v = e.vectors[k];
                assert!((norm(&v) - 1.0).abs() < 1e-12);
                let mv = mat_vec(&m, &v);
                for c in 0..3 {
                    assert!((mv[c] - e.values[k] * v[c]).abs() < 1e-12);
                }
            }
        }
    }
}
