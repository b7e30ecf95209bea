//! Oriented point sets and the rigid-motion / neighborhood primitives the
//! encoder is built on.
//!
//! Points are row vectors: a rotation `R` maps `p` to `p · R`.

mod eigen;
pub mod io;
mod normals;
mod search;

pub use eigen::{sym_eigen3, SymEigen3};
pub use normals::estimate_normals;
pub use search::{fps, knn, sorted_by_distance};

use rand::Rng;

use crate::error::{Error, Result};

pub type Vec3 = [f64; 3];

#[inline]
pub fn dot(a: &Vec3, b: &Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn sub(a: &Vec3, b: &Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn add(a: &Vec3, b: &Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
pub fn scale(a: &Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

#[inline]
pub fn cross(a: &Vec3, b: &Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

#[inline]
pub fn norm(a: &Vec3) -> f64 {
    dot(a, a).sqrt()
}

#[inline]
pub fn dist2(a: &Vec3, b: &Vec3) -> f64 {
    let d = sub(a, b);
    dot(&d, &d)
}

/// Returns `a / |a|`, or `None` when the norm is below `eps`.
pub fn normalized(a: &Vec3, eps: f64) -> Option<Vec3> {
    let n = norm(a);
    (n >= eps && n.is_finite()).then(|| scale(a, 1.0 / n))
}

/// N points paired with unit orientation vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct OrientedPointSet {
    points: Vec<Vec3>,
    orientations: Vec<Vec3>,
    pub label: Option<String>,
}

impl OrientedPointSet {
    /// Builds a point set, re-normalizing every orientation.
    ///
    /// Fails on length mismatch, an empty set, or a zero orientation.
    pub fn new(points: Vec<Vec3>, orientations: Vec<Vec3>) -> Result<Self> {
        if points.len() != orientations.len() {
            return Err(Error::argument(format!(
                "{} points but {} orientations",
                points.len(),
                orientations.len()
            )));
        }
        if points.is_empty() {
            return Err(Error::argument("point set must contain at least one point"));
        }
        let orientations = orientations
            .iter()
            .enumerate()
            .map(|(i, o)| {
                normalized(o, 1e-12).ok_or_else(|| {
                    Error::DegenerateGeometry(format!("orientation {i} has zero length"))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("point coordinates must be finite".into()));
        }
        Ok(Self {
            points,
            orientations,
            label: None,
        })
    }

    /// Assembles a set from parts already known to satisfy the invariants.
    pub(crate) fn from_parts(points: Vec<Vec3>, orientations: Vec<Vec3>, label: Option<String>) -> Self {
        debug_assert_eq!(points.len(), orientations.len());
        debug_assert!(!points.is_empty());
        Self {
            points,
            orientations,
            label,
        }
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = Some(label.into());
        self
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    pub fn orientations(&self) -> &[Vec3] {
        &self.orientations
    }

    /// New set made of the listed indices (repeats allowed).
    pub fn select(&self, indices: &[usize]) -> Self {
        Self::from_parts(
            indices.iter().map(|&i| self.points[i]).collect(),
            indices.iter().map(|&i| self.orientations[i]).collect(),
            self.label.clone(),
        )
    }

    /// Concatenation of two sets; keeps the label of `self`.
    pub fn concat(&self, other: &Self) -> Self {
        let mut points = self.points.clone();
        points.extend_from_slice(&other.points);
        let mut orientations = self.orientations.clone();
        orientations.extend_from_slice(&other.orientations);
        Self::from_parts(points, orientations, self.label.clone())
    }

    pub fn centroid(&self) -> Vec3 {
        let n = self.points.len() as f64;
        let s = self.points.iter().fold([0.0; 3], |acc, p| add(&acc, p));
        scale(&s, 1.0 / n)
    }

    pub fn translated(&self, t: &Vec3) -> Self {
        Self::from_parts(
            self.points.iter().map(|p| add(p, t)).collect(),
            self.orientations.clone(),
            self.label.clone(),
        )
    }
}

/// A proper rotation, stored row-major and applied to row vectors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation(pub [[f64; 3]; 3]);

impl Rotation {
    pub const IDENTITY: Rotation = Rotation([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);

    /// Rotation by `angle` radians, counter-clockwise about +z.
    pub fn about_z(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Rotation([[c, s, 0.0], [-s, c, 0.0], [0.0, 0.0, 1.0]])
    }

    /// Matrix of a unit quaternion `(x, y, z, w)`, transposed for the row-vector convention.
    pub fn from_quaternion(q: [f64; 4]) -> Self {
        let [x, y, z, w] = q;
        let m = [
            [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - z * w), 2.0 * (x * z + y * w)],
            [2.0 * (x * y + z * w), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - x * w)],
            [2.0 * (x * z - y * w), 2.0 * (y * z + x * w), 1.0 - 2.0 * (x * x + y * y)],
        ];
        Rotation(m).transpose()
    }

    pub fn transpose(&self) -> Self {
        let m = &self.0;
        Rotation([
            [m[0][0], m[1][0], m[2][0]],
            [m[0][1], m[1][1], m[2][1]],
            [m[0][2], m[1][2], m[2][2]],
        ])
    }

    /// Matrix product `self · other`.
    pub fn compose(&self, other: &Self) -> Self {
        let mut out = [[0.0; 3]; 3];
        for (i, row) in out.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (0..3).map(|k| self.0[i][k] * other.0[k][j]).sum();
            }
        }
        Rotation(out)
    }

    /// Row vector times matrix: `v · R`.
    #[inline]
    pub fn apply(&self, v: &Vec3) -> Vec3 {
        let m = &self.0;
        [
            v[0] * m[0][0] + v[1] * m[1][0] + v[2] * m[2][0],
            v[0] * m[0][1] + v[1] * m[1][1] + v[2] * m[2][1],
            v[0] * m[0][2] + v[1] * m[1][2] + v[2] * m[2][2],
        ]
    }

    pub fn determinant(&self) -> f64 {
        let m = &self.0;
        dot(&m[0], &cross(&m[1], &m[2]))
    }

    /// Largest absolute entry of `RᵀR − I`.
    pub fn orthonormality_error(&self) -> f64 {
        let rtr = self.transpose().compose(self);
        let mut err: f64 = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let target = if i == j { 1.0 } else { 0.0 };
                err = err.max((rtr.0[i][j] - target).abs());
            }
        }
        err
    }
}

/// Haar-uniform rotation from a uniformly sampled unit quaternion.
pub fn random_rotation<R: Rng + ?Sized>(rng: &mut R) -> Rotation {
    let u1: f64 = rng.random();
    let u2: f64 = rng.random();
    let u3: f64 = rng.random();
    let tau = std::f64::consts::TAU;
    let a = (1.0 - u1).sqrt();
    let b = u1.sqrt();
    Rotation::from_quaternion([
        a * (tau * u2).sin(),
        a * (tau * u2).cos(),
        b * (tau * u3).sin(),
        b * (tau * u3).cos(),
    ])
}

/// Rotates points and orientations by `rot`; labels are kept.
pub fn apply_rotation(ps: &OrientedPointSet, rot: &Rotation) -> OrientedPointSet {
    OrientedPointSet::from_parts(
        ps.points.iter().map(|p| rot.apply(p)).collect(),
        ps.orientations.iter().map(|o| rot.apply(o)).collect(),
        ps.label.clone(),
    )
}

/// Centers the set at the origin and scales it into the unit ball.
pub fn normalize_pose(ps: &OrientedPointSet) -> Result<OrientedPointSet> {
    let c = ps.centroid();
    let centered: Vec<Vec3> = ps.points.iter().map(|p| sub(p, &c)).collect();
    let radius = centered.iter().map(norm).fold(0.0, f64::max);
    if !(radius > 1e-12) {
        return Err(Error::DegenerateGeometry(
            "all points coincide; cannot normalize scale".into(),
        ));
    }
    let inv = 1.0 / radius;
    Ok(OrientedPointSet::from_parts(
        centered.iter().map(|p| scale(p, inv)).collect(),
        ps.orientations.clone(),
        ps.label.clone(),
    ))
}
