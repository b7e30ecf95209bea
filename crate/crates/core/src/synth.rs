//! Synthetic oriented point sets with analytic normals.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::io::{write_manifest, write_xyzn};
use crate::geometry::{add, cross, normalized, random_rotation, scale, OrientedPointSet, Vec3};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Shape {
    Sphere,
    Box,
    Cylinder,
    Cone,
    Torus,
    PlaneCluster,
}

impl Shape {
    pub const ALL: [Shape; 6] = [
        Shape::Sphere,
        Shape::Box,
        Shape::Cylinder,
        Shape::Cone,
        Shape::Torus,
        Shape::PlaneCluster,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Sphere => "sphere",
            Shape::Box => "box",
            Shape::Cylinder => "cylinder",
            Shape::Cone => "cone",
            Shape::Torus => "torus",
            Shape::PlaneCluster => "plane-cluster",
        }
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Shape {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Shape::ALL.into_iter().find(|c| c.name() == s).ok_or_else(|| {
            let known: Vec<&str> = Shape::ALL.iter().map(|c| c.name()).collect();
            Error::argument(format!("unknown shape class `{s}` (known: {})", known.join(", ")))
        })
    }
}

fn unit_dir<R: Rng + ?Sized>(rng: &mut R) -> Vec3 {
    loop {
        let v = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        let n2: f64 = v.iter().map(|a| a * a).sum();
        if n2 > 1e-6 && n2 <= 1.0 {
            return scale(&v, 1.0 / n2.sqrt());
        }
    }
}

/// Picks an index with probability proportional to `weights`.
fn pick<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random_range(0.0..total);
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    weights.len() - 1
}

fn sphere<R: Rng + ?Sized>(n: usize, rng: &mut R) -> (Vec<Vec3>, Vec<Vec3>) {
    let r = rng.random_range(0.8..1.2);
    let normals: Vec<Vec3> = (0..n).map(|_| unit_dir(rng)).collect();
    (normals.iter().map(|d| scale(d, r)).collect(), normals)
}

fn cuboid<R: Rng + ?Sized>(n: usize, rng: &mut R) -> (Vec<Vec3>, Vec<Vec3>) {
    let half = [0; 3].map(|_| rng.random_range(0.3..0.7));
    // Face pairs perpendicular to each axis, weighted by area.
    let areas = [half[1] * half[2], half[0] * half[2], half[0] * half[1]];
    let mut pts = Vec::with_capacity(n);
    let mut nrm = Vec::with_capacity(n);
    for _ in 0..n {
        let axis = pick(&areas, rng);
        let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let mut p = [0.0; 3];
        let mut q = [0.0; 3];
        for k in 0..3 {
            p[k] = if k == axis { sign * half[k] } else { rng.random_range(-half[k]..half[k]) };
        }
        q[axis] = sign;
        pts.push(p);
        nrm.push(q);
    }
    (pts, nrm)
}

fn cylinder<R: Rng + ?Sized>(n: usize, rng: &mut R) -> (Vec<Vec3>, Vec<Vec3>) {
    let r = rng.random_range(0.3..0.6);
    let h = rng.random_range(0.8..1.6);
    let weights = [std::f64::consts::TAU * r * h, std::f64::consts::PI * r * r, std::f64::consts::PI * r * r];
    let mut pts = Vec::with_capacity(n);
    let mut nrm = Vec::with_capacity(n);
    for _ in 0..n {
        let t = rng.random_range(0.0..std::f64::consts::TAU);
        match pick(&weights, rng) {
            0 => {
                pts.push([r * t.cos(), r * t.sin(), rng.random_range(-h / 2.0..h / 2.0)]);
                nrm.push([t.cos(), t.sin(), 0.0]);
            }
            cap => {
                let s = if cap == 1 { 1.0 } else { -1.0 };
                let rho = r * rng.random::<f64>().sqrt();
                pts.push([rho * t.cos(), rho * t.sin(), s * h / 2.0]);
                nrm.push([0.0, 0.0, s]);
            }
        }
    }
    (pts, nrm)
}

fn cone<R: Rng + ?Sized>(n: usize, rng: &mut R) -> (Vec<Vec3>, Vec<Vec3>) {
    let r: f64 = rng.random_range(0.4..0.8);
    let h: f64 = rng.random_range(0.9..1.6);
    let slant = (r * r + h * h).sqrt();
    let weights = [std::f64::consts::PI * r * slant, std::f64::consts::PI * r * r];
    let mut pts = Vec::with_capacity(n);
    let mut nrm = Vec::with_capacity(n);
    for _ in 0..n {
        let t = rng.random_range(0.0..std::f64::consts::TAU);
        // Uniform by area: distance from the apex grows like sqrt(u).
        let s = rng.random::<f64>().sqrt();
        if pick(&weights, rng) == 0 {
            pts.push([s * r * t.cos(), s * r * t.sin(), h * (1.0 - s)]);
            let normal = normalized(&[h * t.cos(), h * t.sin(), r], 1e-12).expect("nonzero");
            nrm.push(normal);
        } else {
            pts.push([s * r * t.cos(), s * r * t.sin(), 0.0]);
            nrm.push([0.0, 0.0, -1.0]);
        }
    }
    (pts, nrm)
}

fn torus<R: Rng + ?Sized>(n: usize, rng: &mut R) -> (Vec<Vec3>, Vec<Vec3>) {
    let big = rng.random_range(0.7..1.0);
    let small = rng.random_range(0.15..0.35);
    let mut pts = Vec::with_capacity(n);
    let mut nrm = Vec::with_capacity(n);
    while pts.len() < n {
        let t = rng.random_range(0.0..std::f64::consts::TAU);
        let phi = rng.random_range(0.0..std::f64::consts::TAU);
        // Area element ∝ (R + r·cos φ); accept proportionally.
        if rng.random_range(0.0..big + small) > big + small * phi.cos() {
            continue;
        }
        let normal = [phi.cos() * t.cos(), phi.cos() * t.sin(), phi.sin()];
        let ring = [big * t.cos(), big * t.sin(), 0.0];
        pts.push(add(&ring, &scale(&normal, small)));
        nrm.push(normal);
    }
    (pts, nrm)
}

fn plane_cluster<R: Rng + ?Sized>(n: usize, rng: &mut R) -> (Vec<Vec3>, Vec<Vec3>) {
    let patches: Vec<(Vec3, Vec3, Vec3, Vec3, f64)> = (0..rng.random_range(3..=5))
        .map(|_| {
            let center = scale(&unit_dir(rng), rng.random_range(0.2..0.8));
            let normal = unit_dir(rng);
            let helper = if normal[0].abs() < 0.9 { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] };
            let u = normalized(&cross(&normal, &helper), 1e-12).expect("nonparallel");
            let v = cross(&normal, &u);
            (center, normal, u, v, rng.random_range(0.2..0.45))
        })
        .collect();
    let areas: Vec<f64> = patches.iter().map(|p| p.4 * p.4).collect();
    let mut pts = Vec::with_capacity(n);
    let mut nrm = Vec::with_capacity(n);
    for _ in 0..n {
        let (c, nv, u, v, half) = &patches[pick(&areas, rng)];
        let a = rng.random_range(-*half..*half);
        let b = rng.random_range(-*half..*half);
        pts.push(add(c, &add(&scale(u, a), &scale(v, b))));
        nrm.push(*nv);
    }
    (pts, nrm)
}

/// Samples `n` surface points of a randomly jittered instance of `shape`.
pub fn sample_shape<R: Rng + ?Sized>(shape: Shape, n: usize, rng: &mut R) -> Result<OrientedPointSet> {
    if n == 0 {
        return Err(Error::argument("synth: point count must be positive"));
    }
    let (pts, nrm) = match shape {
        Shape::Sphere => sphere(n, rng),
        Shape::Box => cuboid(n, rng),
        Shape::Cylinder => cylinder(n, rng),
        Shape::Cone => cone(n, rng),
        Shape::Torus => torus(n, rng),
        Shape::PlaneCluster => plane_cluster(n, rng),
    };
    Ok(OrientedPointSet::new(pts, nrm)?.with_label(shape.name()))
}

/// Options for writing a synthetic dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub classes: Vec<Shape>,
    pub per_class: usize,
    pub points: usize,
    pub seed: u64,
    /// Rotate each sample by an independent random rotation.
    pub rotate: bool,
}

/// Sample `j` of class `c` (index into `spec.classes`); independent of generation order.
pub fn synth_sample(spec: &SynthSpec, c: usize, j: usize) -> Result<OrientedPointSet> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(((c as u64) << 32) | j as u64);
    let ps = sample_shape(spec.classes[c], spec.points, &mut rng)?;
    Ok(if spec.rotate {
        crate::geometry::apply_rotation(&ps, &random_rotation(&mut rng))
    } else {
        ps
    })
}

/// In-memory dataset, ordered sample-major across classes
/// (`c0 s0, c1 s0, …, c0 s1, …`).
pub fn synth_dataset(spec: &SynthSpec) -> Result<Vec<OrientedPointSet>> {
    let mut out = Vec::with_capacity(spec.classes.len() * spec.per_class);
    for j in 0..spec.per_class {
        for c in 0..spec.classes.len() {
            out.push(synth_sample(spec, c, j)?);
        }
    }
    Ok(out)
}

/// Writes one XYZN file per sample under `out_dir/<class>/` plus
/// `out_dir/manifest.tsv`; returns the manifest path.
pub fn write_dataset(spec: &SynthSpec, out_dir: &Path) -> Result<PathBuf> {
    if spec.classes.is_empty() || spec.per_class == 0 {
        return Err(Error::argument("synth: need at least one class and one sample per class"));
    }
    let mut entries = Vec::with_capacity(spec.classes.len() * spec.per_class);
    for c in &spec.classes {
        let dir = out_dir.join(c.name());
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    for j in 0..spec.per_class {
        for (ci, c) in spec.classes.iter().enumerate() {
            let rel = format!("{}/{}_{:04}.xyzn", c.name(), c.name(), j);
            write_xyzn(&out_dir.join(&rel), &synth_sample(spec, ci, j)?)?;
            entries.push((rel, c.name().to_string()));
        }
    }
    let manifest = out_dir.join("manifest.tsv");
    write_manifest(&manifest, &entries)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{dot, norm};

    #[test]
    fn parse_names() {
        for s in Shape::ALL {
            assert_eq!(s.name().parse::<Shape>().unwrap(), s);
        }
        assert!(matches!("pyramid".parse::<Shape>(), Err(Error::Argument(_))));
    }

    #[test]
    fn sphere_normals_are_radial() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ps = sample_shape(Shape::Sphere, 500, &mut rng).unwrap();
        for (p, n) in ps.points().iter().zip(ps.orientations()) {
            assert!(dot(&scale(p, 1.0 / norm(p)), n).abs() > 0.999);
        }
    }

    #[test]
    fn normals_are_unit_and_points_finite() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for s in Shape::ALL {
            let ps = sample_shape(s, 300, &mut rng).unwrap();
            assert_eq!(ps.len(), 300);
            for n in ps.orientations() {
                assert!((norm(n) - 1.0).abs() < 1e-12);
            }
            assert_eq!(ps.label.as_deref(), Some(s.name()));
        }
    }

    #[test]
    fn torus_normals_point_away_from_ring() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ps = sample_shape(Shape::Torus, 300, &mut rng).unwrap();
        // Stepping back along the normal by the tube radius must land on a
        // single circle in the z = 0 plane.
        let mut radii = Vec::new();
        for (p, n) in ps.points().iter().zip(ps.orientations()) {
            if n[2].abs() < 0.2 {
                continue;
            }
            let tube = p[2] / n[2];
            let q = [p[0] - tube * n[0], p[1] - tube * n[1]];
            radii.push((tube, (q[0] * q[0] + q[1] * q[1]).sqrt()));
        }
        assert!(radii.len() > 50);
        for (t, r) in &radii {
            assert!((t - radii[0].0).abs() < 1e-9);
            assert!((r - radii[0].1).abs() < 1e-9);
        }
    }

    #[test]
    fn same_seed_same_samples() {
        let spec = SynthSpec {
            classes: vec![Shape::Box, Shape::Cone],
            per_class: 3,
            points: 50,
            seed: 9,
            rotate: false,
        };
        assert_eq!(synth_dataset(&spec).unwrap(), synth_dataset(&spec).unwrap());
        let other = SynthSpec { seed: 10, ..spec.clone() };
        assert_ne!(synth_dataset(&spec).unwrap(), synth_dataset(&other).unwrap());
        let labels: Vec<_> = synth_dataset(&spec).unwrap().iter().map(|p| p.label.clone().unwrap()).collect();
        assert_eq!(labels[..4], ["box", "cone", "box", "cone"]);
    }
}
