//! Synthetic articulated shapes with exact ground-truth correspondence.
//!
//! A shape is a random tree of capsules. Every surface point carries a
//! fixed parameterization (segment, height along the axis, angle), so the
//! same parameters placed on a re-posed skeleton give the corresponding
//! point. Re-posing rotates each segment rigidly about its joint, so the
//! deformation is locally rigid and globally non-rigid.
//!
//! All randomness comes from `ChaCha8Rng` (ChaCha with 8 rounds, 64-bit
//! block counter) seeded through `seed_from_u64`, which makes generated
//! datasets identical across platforms.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::{Point3, Rotation3, Unit, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    apply_se3, atomic_write, center, random_se3_with, read_xyz, write_xyz, PointCloud, Se3Transform,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeSpec {
    pub segment_count: usize,
    /// Capsule axis lengths are drawn uniformly from this range.
    pub length_range: (f64, f64),
    pub radius_range: (f64, f64),
    /// Joint rotation angles are drawn from `[-range, range]` radians.
    pub joint_angle_range: f64,
    pub points: usize,
    /// Apply a random rigid motion to every target.
    pub global_transform: bool,
    /// Half-width of a uniform tangential displacement, in arc length,
    /// applied to every target sample. Zero reproduces the source samples
    /// exactly on each segment; positive values make the target a
    /// different sampling of the same surface.
    pub surface_jitter: f64,
}

impl Default for ShapeSpec {
    fn default() -> Self {
        ShapeSpec {
            segment_count: 5,
            length_range: (0.5, 1.0),
            radius_range: (0.06, 0.14),
            joint_angle_range: 0.6,
            points: 128,
            global_transform: true,
            surface_jitter: 0.0,
        }
    }
}

impl ShapeSpec {
    /// Out-of-distribution variant: doubled joint angle range.
    pub fn ood(&self) -> Self {
        ShapeSpec {
            joint_angle_range: 2.0 * self.joint_angle_range,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (l0, l1) = self.length_range;
        let (r0, r1) = self.radius_range;
        if self.segment_count == 0 {
            return Err(Error::Config("segment_count must be >= 1".into()));
        }
        if !(l0 > 0.0 && l0 <= l1 && r0 > 0.0 && r0 <= r1) {
            return Err(Error::Config(
                "lengths and radii need 0 < min <= max".into(),
            ));
        }
        if self.points < 32 {
            return Err(Error::Config(format!("need at least 32 points, got {}", self.points)));
        }
        if !(self.surface_jitter >= 0.0 && self.surface_jitter.is_finite()) {
            return Err(Error::Config("surface_jitter must be finite and >= 0".into()));
        }
        if !(self.joint_angle_range >= 0.0 && self.joint_angle_range.is_finite()) {
            return Err(Error::Config("joint_angle_range must be finite and >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Segment {
    parent: Option<usize>,
    start: Point3<f64>,
    axis: Unit<Vector3<f64>>,
    length: f64,
    radius: f64,
}

impl Segment {
    fn end(&self) -> Point3<f64> {
        self.start + self.axis.into_inner() * self.length
    }

    /// Orthonormal pair perpendicular to the axis.
    fn basis(&self) -> (Vector3<f64>, Vector3<f64>) {
        let a = self.axis.into_inner();
        let helper = if a.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
        let p = a.cross(&helper).normalize();
        (p, a.cross(&p))
    }

    /// Surface point at height `h` in `[-r, L + r]` and angle `theta`.
    /// Uniform `(h, theta)` is uniform in area on the capsule.
    fn surface(&self, h: f64, theta: f64) -> Point3<f64> {
        let r = self.radius;
        let rho = if h < 0.0 {
            (r * r - h * h).max(0.0).sqrt()
        } else if h > self.length {
            let t = h - self.length;
            (r * r - t * t).max(0.0).sqrt()
        } else {
            r
        };
        let (p, q) = self.basis();
        self.start + self.axis.into_inner() * h + (p * theta.cos() + q * theta.sin()) * rho
    }

    fn area(&self) -> f64 {
        std::f64::consts::TAU * self.radius * (self.length + 2.0 * self.radius)
    }

    fn distance_to_axis(&self, x: &Point3<f64>) -> f64 {
        let a = self.axis.into_inner();
        let t = (x - self.start).dot(&a).clamp(0.0, self.length);
        (x - (self.start + a * t)).norm()
    }
}

fn random_unit<R: Rng>(rng: &mut R) -> Unit<Vector3<f64>> {
    loop {
        let v = Vector3::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        );
        let n = v.norm();
        if n > 1e-3 && n <= 1.0 {
            return Unit::new_normalize(v);
        }
    }
}

fn random_skeleton<R: Rng>(spec: &ShapeSpec, rng: &mut R) -> Vec<Segment> {
    let mut segs: Vec<Segment> = Vec::with_capacity(spec.segment_count);
    for s in 0..spec.segment_count {
        let length = rng.gen_range(spec.length_range.0..=spec.length_range.1);
        let radius = rng.gen_range(spec.radius_range.0..=spec.radius_range.1);
        let (parent, start, axis) = if s == 0 {
            (None, Point3::origin(), random_unit(rng))
        } else {
            let p = rng.gen_range(0..s);
            // attach at either end of the parent, pointing away from it
            let at_end = rng.gen_bool(0.5) || p == 0 && s == 1;
            let (start, away) = if at_end {
                (segs[p].end(), segs[p].axis.into_inner())
            } else {
                (segs[p].start, -segs[p].axis.into_inner())
            };
            let axis = loop {
                let a = random_unit(rng);
                if a.dot(&away) > 0.0 {
                    break a;
                }
            };
            (Some(p), start, axis)
        };
        segs.push(Segment {
            parent,
            start,
            axis,
            length,
            radius,
        });
    }
    segs
}

/// Surface parameters `(segment, height, angle)` for `n` points, sampled
/// by area and skipping points buried inside another capsule.
fn sample_parameters<R: Rng>(segs: &[Segment], n: usize, rng: &mut R) -> Vec<(usize, f64, f64)> {
    let areas: Vec<f64> = segs.iter().map(Segment::area).collect();
    let total: f64 = areas.iter().sum();
    let mut out = Vec::with_capacity(n);
    let mut attempts = 0usize;
    while out.len() < n {
        attempts += 1;
        let mut u = rng.gen_range(0.0..total);
        let mut s = 0;
        while s + 1 < segs.len() && u >= areas[s] {
            u -= areas[s];
            s += 1;
        }
        let seg = &segs[s];
        let h = rng.gen_range(-seg.radius..seg.length + seg.radius);
        let theta = rng.gen_range(0.0..std::f64::consts::TAU);
        let x = seg.surface(h, theta);
        let buried = segs
            .iter()
            .enumerate()
            .any(|(o, other)| o != s && other.distance_to_axis(&x) < other.radius * 0.999);
        // give up on rejection for pathological overlaps
        if !buried || attempts > 50 * n {
            out.push((s, h, theta));
        }
    }
    out
}

/// World transform of every segment for random joint rotations.
fn repose<R: Rng>(segs: &[Segment], range: f64, rng: &mut R) -> (Vec<Se3Transform>, f64) {
    let mut transforms: Vec<Se3Transform> = Vec::with_capacity(segs.len());
    let mut magnitude: f64 = 0.0;
    for seg in segs {
        let axis = random_unit(rng);
        let angle = if range > 0.0 { rng.gen_range(-range..=range) } else { 0.0 };
        magnitude = magnitude.max(angle.abs());
        let r = Rotation3::from_axis_angle(&axis, angle).into_inner();
        // rotate about the joint: x -> R (x - j) + j
        let local = Se3Transform {
            rotation: r,
            translation: seg.start.coords - r * seg.start.coords,
        };
        let world = match seg.parent {
            Some(p) => transforms[p].compose(&local),
            None => local,
        };
        transforms.push(world);
    }
    (transforms, magnitude)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairMeta {
    pub seed: u64,
    /// Largest joint rotation applied, in radians.
    pub deformation: f64,
    /// Rigid motion applied to the target after re-posing.
    pub global: Se3Transform,
    /// Segment of every point.
    pub segments: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShapePair {
    pub source: PointCloud,
    pub target: PointCloud,
    /// `gt[i]` is the target index corresponding to source point `i`.
    pub gt: Option<Vec<usize>>,
    pub meta: Option<PairMeta>,
}

impl ShapePair {
    /// The pair with `g` applied to the target.
    pub fn with_target_transform(&self, g: &Se3Transform) -> ShapePair {
        ShapePair {
            target: apply_se3(g, &self.target),
            ..self.clone()
        }
    }
}

/// Generates one source/target pair. Both clouds are centered and share
/// one scale that puts the farthest source point at distance 1.
pub fn generate_pair(spec: &ShapeSpec, seed: u64) -> Result<ShapePair> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let segs = random_skeleton(spec, &mut rng);
    let params = sample_parameters(&segs, spec.points, &mut rng);
    let (transforms, deformation) = repose(&segs, spec.joint_angle_range, &mut rng);
    let global = if spec.global_transform {
        random_se3_with(&mut rng)
    } else {
        Se3Transform::identity()
    };

    let source_pts: Vec<Point3<f64>> = params.iter().map(|&(s, h, t)| segs[s].surface(h, t)).collect();
    let target_pts: Vec<Point3<f64>> = params
        .iter()
        .map(|&(s, h, t)| {
            let seg = &segs[s];
            let (h, t) = if spec.surface_jitter > 0.0 {
                let j = spec.surface_jitter;
                let h = (h + rng.gen_range(-j..=j)).clamp(-seg.radius, seg.length + seg.radius);
                (h, t + rng.gen_range(-j..=j) / seg.radius)
            } else {
                (h, t)
            };
            global.apply_point(&transforms[s].apply_point(&seg.surface(h, t)))
        })
        .collect();
    let source = PointCloud::new(source_pts)?;
    let target = PointCloud::new(target_pts)?;

    let (source, _) = center(&source);
    let (target, _) = center(&target);
    let max_r = source
        .points()
        .iter()
        .map(|p| p.coords.norm())
        .fold(0.0, f64::max);
    let scale = 1.0 / max_r;
    Ok(ShapePair {
        source: source.scaled(scale),
        target: target.scaled(scale),
        gt: Some((0..spec.points).collect()),
        meta: Some(PairMeta {
            seed,
            deformation,
            global,
            segments: params.iter().map(|p| p.0).collect(),
        }),
    })
}

/// Seed of pair `index` within a dataset seeded with `seed` (SplitMix64
/// finalizer over the combined value).
pub fn pair_seed(seed: u64, index: usize) -> u64 {
    let mut z = seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(index as u64 + 1);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn generate_pairs(spec: &ShapeSpec, count: usize, seed: u64) -> Result<Vec<ShapePair>> {
    (0..count)
        .into_par_iter()
        .map(|i| generate_pair(spec, pair_seed(seed, i)))
        .collect()
}

/// One manifest row. Paths are stored relative to the manifest directory
/// when written and resolved against it when read.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub src: PathBuf,
    pub tgt: PathBuf,
    pub gt: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

pub const MANIFEST_NAME: &str = "manifest.tsv";

impl Manifest {
    /// Reads a manifest; returned paths are resolved against its directory.
    pub fn read(path: &Path) -> Result<Manifest> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let mut entries = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 3 {
                return Err(Error::Data(format!(
                    "{}:{}: expected 3 tab-separated fields, found {}",
                    path.display(),
                    lineno + 1,
                    f.len()
                )));
            }
            entries.push(ManifestEntry {
                src: base.join(f[0]),
                tgt: base.join(f[1]),
                gt: (f[2] != "-").then(|| base.join(f[2])),
            });
        }
        Ok(Manifest { entries })
    }

    /// Writes `entries` with paths made relative to the manifest directory
    /// where possible.
    pub fn write(&self, path: &Path) -> Result<()> {
        let base = path.parent().unwrap_or(Path::new("."));
        let rel = |p: &Path| {
            p.strip_prefix(base)
                .unwrap_or(p)
                .to_string_lossy()
                .into_owned()
        };
        let mut out = String::new();
        for e in &self.entries {
            let gt = e.gt.as_deref().map(rel).unwrap_or_else(|| "-".into());
            let _ = writeln!(out, "{}\t{}\t{}", rel(&e.src), rel(&e.tgt), gt);
        }
        atomic_write(path, out.as_bytes())?;
        Ok(())
    }

    pub fn load_pairs(&self) -> Result<Vec<ShapePair>> {
        self.entries
            .par_iter()
            .map(|e| load_pair(&e.src, &e.tgt, e.gt.as_deref()))
            .collect()
    }
}

/// Writes `count` pairs plus `manifest.tsv` into `dir` and returns the
/// manifest path.
pub fn generate_dataset(spec: &ShapeSpec, count: usize, seed: u64, dir: &Path) -> Result<PathBuf> {
    if count == 0 {
        return Err(Error::Config("count must be >= 1".into()));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let entries = (0..count)
        .into_par_iter()
        .map(|i| {
            let pair = generate_pair(spec, pair_seed(seed, i))?;
            let src = dir.join(format!("pair_{i:05}_src.xyz"));
            let tgt = dir.join(format!("pair_{i:05}_tgt.xyz"));
            let gt = dir.join(format!("pair_{i:05}_gt.txt"));
            write_xyz(&src, &pair.source)?;
            write_xyz(&tgt, &pair.target)?;
            write_gt(&gt, pair.gt.as_deref().expect("generated pairs carry gt"))?;
            Ok(ManifestEntry {
                src,
                tgt,
                gt: Some(gt),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let path = dir.join(MANIFEST_NAME);
    Manifest { entries }.write(&path)?;
    Ok(path)
}

pub fn write_gt(path: &Path, gt: &[usize]) -> Result<()> {
    let mut out = String::with_capacity(gt.len() * 5);
    for j in gt {
        let _ = writeln!(out, "{j}");
    }
    atomic_write(path, out.as_bytes())?;
    Ok(())
}

/// Reads a ground-truth file and checks every index against `n_target`.
pub fn read_gt(path: &Path, n_target: usize) -> Result<Vec<usize>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut gt = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let j: usize = line.parse().map_err(|_| {
            Error::Data(format!("{}:{}: malformed index {line:?}", path.display(), lineno + 1))
        })?;
        if j >= n_target {
            return Err(Error::Data(format!(
                "{}:{}: index {j} out of range for {n_target} target points",
                path.display(),
                lineno + 1
            )));
        }
        gt.push(j);
    }
    Ok(gt)
}

pub fn load_pair(src: &Path, tgt: &Path, gt: Option<&Path>) -> Result<ShapePair> {
    let source = read_xyz(src)?;
    let target = read_xyz(tgt)?;
    if source.len() != target.len() {
        return Err(Error::Data(format!(
            "{} has {} points but {} has {}",
            src.display(),
            source.len(),
            tgt.display(),
            target.len()
        )));
    }
    let gt = match gt {
        Some(p) => {
            let g = read_gt(p, target.len())?;
            if g.len() != source.len() {
                return Err(Error::Data(format!(
                    "{} has {} entries for {} source points",
                    p.display(),
                    g.len(),
                    source.len()
                )));
            }
            Some(g)
        }
        None => None,
    };
    Ok(ShapePair {
        source,
        target,
        gt,
        meta: None,
    })
}

/// Deterministic split of `count` items into `(train, validation)` index
/// lists with `round(fraction * count)` validation items (at least one
/// when `count > 1`).
pub fn split_indices(count: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    use rand::seq::SliceRandom;
    let mut idx: Vec<usize> = (0..count).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut n_val = (fraction * count as f64).round() as usize;
    if count > 1 && fraction > 0.0 {
        n_val = n_val.clamp(1, count - 1);
    }
    let val = idx.split_off(count - n_val.min(count));
    let mut train = idx;
    train.sort_unstable();
    let mut val = val;
    val.sort_unstable();
    (train, val)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat_spec() -> ShapeSpec {
        ShapeSpec {
            joint_angle_range: 0.0,
            global_transform: false,
            points: 64,
            ..ShapeSpec::default()
        }
    }

    #[test]
    fn zero_deformation_gives_identical_clouds() {
        let pair = generate_pair(&flat_spec(), 3).unwrap();
        assert!(pair
            .source
            .points()
            .iter()
            .zip(pair.target.points())
            .all(|(a, b)| (a - b).norm() < 1e-12));
    }

    #[test]
    fn same_seed_same_pair() {
        let s = ShapeSpec::default();
        assert_eq!(generate_pair(&s, 9).unwrap(), generate_pair(&s, 9).unwrap());
        assert_ne!(generate_pair(&s, 9).unwrap().source, generate_pair(&s, 10).unwrap().source);
    }

    #[test]
    fn normalized_to_unit_radius() {
        let pair = generate_pair(&ShapeSpec::default(), 1).unwrap();
        let r = pair.source.points().iter().map(|p| p.coords.norm()).fold(0.0, f64::max);
        assert!((r - 1.0).abs() < 1e-12);
        assert_eq!(pair.source.len(), 128);
        assert_eq!(pair.target.len(), 128);
    }

    #[test]
    fn capsule_sampling_is_on_the_surface() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let segs = random_skeleton(&ShapeSpec::default(), &mut rng);
        for &(s, h, t) in &sample_parameters(&segs, 200, &mut rng) {
            let x = segs[s].surface(h, t);
            assert!((segs[s].distance_to_axis(&x) - segs[s].radius).abs() < 1e-12);
        }
    }

    #[test]
    fn split_is_deterministic_and_disjoint() {
        let (t, v) = split_indices(10, 0.2, 3);
        assert_eq!(v.len(), 2);
        assert_eq!(t.len(), 8);
        assert!(v.iter().all(|i| !t.contains(i)));
        assert_eq!(split_indices(10, 0.2, 3), (t, v));
    }
}
