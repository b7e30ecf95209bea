//! Point-set file formats and the dataset manifest.
//!
//! * XYZN: one point per line, `px py pz nx ny nz`, whitespace separated.
//!   Blank lines and lines starting with `#` are skipped.
//! * OFF: polygon mesh; faces are fan-triangulated and sampled by area.
//! * Manifest: one sample per line, `relative/path<TAB>label`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{cross, norm, normalized, sub, OrientedPointSet, Vec3};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PointFormat {
    Xyzn,
    /// Mesh surface sampled with `points` samples from a seeded generator.
    Off { points: usize, seed: u64 },
}

impl PointFormat {
    /// Picks a format from the file extension (`.off` → mesh, otherwise XYZN).
    pub fn from_path(path: &Path, mesh_points: usize, seed: u64) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("off") => PointFormat::Off {
                points: mesh_points,
                seed,
            },
            _ => PointFormat::Xyzn,
        }
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn load_point_set(path: &Path, format: PointFormat) -> Result<OrientedPointSet> {
    let text = read_text(path)?;
    let name = path.display().to_string();
    match format {
        PointFormat::Xyzn => parse_xyzn(&text, &name),
        PointFormat::Off { points, seed } => {
            let mesh = parse_off(&text, &name)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            mesh.sample(points, &mut rng)
        }
    }
}

pub fn parse_xyzn(text: &str, name: &str) -> Result<OrientedPointSet> {
    let mut points = Vec::new();
    let mut orientations = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |msg: String| Error::Format {
            path: name.to_string(),
            line: lineno + 1,
            msg,
        };
        let vals = line
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|_| err(format!("not a number: `{t}`"))))
            .collect::<Result<Vec<_>>>()?;
        if vals.len() != 6 {
            return Err(err(format!("expected 6 values, found {}", vals.len())));
        }
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(err("non-finite value".into()));
        }
        let o = normalized(&[vals[3], vals[4], vals[5]], 1e-12).ok_or_else(|| err("zero-length normal".into()))?;
        points.push([vals[0], vals[1], vals[2]]);
        orientations.push(o);
    }
    if points.is_empty() {
        return Err(Error::Format {
            path: name.to_string(),
            line: 0,
            msg: "no points".into(),
        });
    }
    OrientedPointSet::new(points, orientations)
}

pub fn write_xyzn(path: &Path, ps: &OrientedPointSet) -> Result<()> {
    let mut out = String::with_capacity(ps.len() * 64);
    for (p, o) in ps.points().iter().zip(ps.orientations()) {
        // `{:e}` round-trips f64 exactly.
        let _ = writeln!(out, "{:e} {:e} {:e} {:e} {:e} {:e}", p[0], p[1], p[2], o[0], o[1], o[2]);
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Triangle mesh parsed from OFF.
#[derive(Debug, Clone)]
pub struct TriMesh {
    pub vertices: Vec<Vec3>,
    pub triangles: Vec<[usize; 3]>,
}

pub fn parse_off(text: &str, name: &str) -> Result<TriMesh> {
    // Tokens with their 1-based line numbers, comments stripped.
    let mut tokens = text.lines().enumerate().flat_map(|(i, line)| {
        let content = line.split('#').next().unwrap_or("");
        content.split_whitespace().map(move |t| (i + 1, t))
    });
    let fmt_err = |line: usize, msg: String| Error::Format {
        path: name.to_string(),
        line,
        msg,
    };

    let (line, head) = tokens.next().ok_or_else(|| fmt_err(1, "empty file".into()))?;
    // Some writers glue the counts onto the header ("OFF8 6 0").
    let mut pending: Option<(usize, &str)> = None;
    if head != "OFF" {
        match head.strip_prefix("OFF") {
            Some(rest) if !rest.is_empty() && rest.parse::<usize>().is_ok() => pending = Some((line, rest)),
            _ => return Err(fmt_err(line, format!("expected `OFF` header, found `{head}`"))),
        }
    }
    let mut next = |what: &str| -> Result<(usize, &str)> {
        if let Some(t) = pending.take() {
            return Ok(t);
        }
        tokens.next().ok_or_else(|| fmt_err(0, format!("unexpected end of file while reading {what}")))
    };
    let parse_count = |(line, t): (usize, &str), what: &str| -> Result<usize> {
        t.parse().map_err(|_| fmt_err(line, format!("invalid {what}: `{t}`")))
    };
    let nv = parse_count(next("vertex count")?, "vertex count")?;
    let nf = parse_count(next("face count")?, "face count")?;
    let _ne = parse_count(next("edge count")?, "edge count")?;

    let mut vertices = Vec::with_capacity(nv);
    for _ in 0..nv {
        let mut v = [0.0; 3];
        for c in v.iter_mut() {
            let (line, t) = next("vertex coordinate")?;
            *c = t.parse().map_err(|_| fmt_err(line, format!("invalid coordinate `{t}`")))?;
        }
        vertices.push(v);
    }
    let mut triangles = Vec::with_capacity(nf);
    for _ in 0..nf {
        let k = parse_count(next("face vertex count")?, "face vertex count")?;
        let mut idx = Vec::with_capacity(k);
        for _ in 0..k {
            let (line, t) = next("face index")?;
            let i: usize = t.parse().map_err(|_| fmt_err(line, format!("invalid face index `{t}`")))?;
            if i >= nv {
                return Err(fmt_err(line, format!("face index {i} out of range ({nv} vertices)")));
            }
            idx.push(i);
        }
        for j in 1..k.saturating_sub(1) {
            triangles.push([idx[0], idx[j], idx[j + 1]]);
        }
    }
    Ok(TriMesh { vertices, triangles })
}

impl TriMesh {
    /// Area-proportional surface sampling; each sample takes the normal of its triangle.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<OrientedPointSet> {
        let mut cumulative = Vec::with_capacity(self.triangles.len());
        let mut normals = Vec::with_capacity(self.triangles.len());
        let mut total = 0.0;
        for t in &self.triangles {
            let [a, b, c] = t.map(|i| self.vertices[i]);
            let n = cross(&sub(&b, &a), &sub(&c, &a));
            let area = 0.5 * norm(&n);
            total += area;
            cumulative.push(total);
            normals.push(normalized(&n, 1e-300).unwrap_or([0.0, 0.0, 1.0]));
        }
        if !(total > 1e-12) {
            return Err(Error::DegenerateGeometry("mesh has zero surface area".into()));
        }
        if n == 0 {
            return Err(Error::argument("mesh sampling needs at least one point"));
        }
        let mut points = Vec::with_capacity(n);
        let mut orientations = Vec::with_capacity(n);
        for _ in 0..n {
            let target = rng.random::<f64>() * total;
            let ti = cumulative.partition_point(|&c| c <= target).min(self.triangles.len() - 1);
            let [a, b, c] = self.triangles[ti].map(|i| self.vertices[i]);
            let (mut u, mut v): (f64, f64) = (rng.random(), rng.random());
            if u + v > 1.0 {
                u = 1.0 - u;
                v = 1.0 - v;
            }
            let p = [
                a[0] + u * (b[0] - a[0]) + v * (c[0] - a[0]),
                a[1] + u * (b[1] - a[1]) + v * (c[1] - a[1]),
                a[2] + u * (b[2] - a[2]) + v * (c[2] - a[2]),
            ];
            points.push(p);
            orientations.push(normals[ti]);
        }
        OrientedPointSet::new(points, orientations)
    }

    pub fn area(&self) -> f64 {
        self.triangles
            .iter()
            .map(|t| {
                let [a, b, c] = t.map(|i| self.vertices[i]);
                0.5 * norm(&cross(&sub(&b, &a), &sub(&c, &a)))
            })
            .sum()
    }
}

/// One manifest line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub label: String,
}

/// Reads a manifest; entry paths are resolved relative to the manifest's directory.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = read_text(path)?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (rel, label) = line.split_once('\t').ok_or_else(|| Error::Format {
            path: path.display().to_string(),
            line: lineno + 1,
            msg: "expected `path<TAB>label`".into(),
        })?;
        out.push(ManifestEntry {
            path: base.join(rel.trim()),
            label: label.trim().to_string(),
        });
    }
    Ok(out)
}

/// Writes a manifest with paths relative to `dir` (the manifest's directory).
pub fn write_manifest(path: &Path, entries: &[(String, String)]) -> Result<()> {
    let mut out = String::new();
    for (rel, label) in entries {
        let _ = writeln!(out, "{rel}\t{label}");
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Loads every manifest entry, attaching labels.
pub fn load_dataset(manifest: &Path, mesh_points: usize, seed: u64) -> Result<Vec<OrientedPointSet>> {
    read_manifest(manifest)?
        .into_iter()
        .enumerate()
        .map(|(i, e)| {
            let fmt = PointFormat::from_path(&e.path, mesh_points, seed.wrapping_add(i as u64));
            Ok(load_point_set(&e.path, fmt)?.with_label(e.label))
        })
        .collect()
}
