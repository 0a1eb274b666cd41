//! Executable property suites run on fresh random weights.
//!
//! The rigid-motion properties are architectural, so they must hold
//! before any training. Every property reports its worst observed error
//! next to its tolerance.

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data::{generate_pair, ShapeSpec};
use crate::error::{Error, Result};
use crate::geometry::{
    apply_se3, gram_schmidt, random_rotation, random_se3_with, LrfSet, PointCloud,
};
use crate::matcher::{predict, top1_margins, EquiShape, LossConfig, ModelConfig};
use crate::params::Bound;
use crate::tensor::{grad_check_with, op_suite, GradCheckOptions, Tape, Tensor, KINK_TOLERANCE};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PropertyResult {
    pub name: String,
    pub max_err: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub detail: String,
}

impl PropertyResult {
    fn new(name: impl Into<String>, max_err: f64, tolerance: f64, detail: String) -> Self {
        PropertyResult {
            name: name.into(),
            passed: max_err <= tolerance,
            max_err,
            tolerance,
            detail,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    Equivariance,
    Gradients,
    All,
}

impl std::str::FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Suite> {
        match s {
            "equivariance" => Ok(Suite::Equivariance),
            "gradients" => Ok(Suite::Gradients),
            "all" => Ok(Suite::All),
            other => Err(Error::Config(format!(
                "unknown suite {other:?}; expected equivariance, gradients or all"
            ))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct CheckConfig {
    pub seed: u64,
    pub points: usize,
    pub lrf_trials: usize,
    pub invariance_trials: usize,
    pub gram_schmidt_trials: usize,
    /// Random models cycled through the trials.
    pub models: usize,
    pub model: ModelConfig,
}

impl Default for CheckConfig {
    fn default() -> Self {
        CheckConfig {
            seed: 0,
            points: 64,
            lrf_trials: 100,
            invariance_trials: 50,
            gram_schmidt_trials: 1000,
            models: 5,
            model: ModelConfig::default(),
        }
    }
}

fn random_pair(cfg: &CheckConfig, trial: usize) -> Result<(PointCloud, PointCloud)> {
    let spec = ShapeSpec {
        points: cfg.points,
        ..ShapeSpec::default()
    };
    let pair = generate_pair(&spec, cfg.seed.wrapping_mul(1_000_003).wrapping_add(trial as u64))?;
    Ok((pair.source, pair.target))
}

fn models(cfg: &CheckConfig) -> Result<Vec<(EquiShape, crate::params::ParamSet)>> {
    (0..cfg.models.max(1))
        .map(|m| {
            EquiShape::init(ModelConfig {
                seed: cfg.seed.wrapping_add(m as u64),
                ..cfg.model.clone()
            })
        })
        .collect()
}

/// `[u_x, v_x, u_y, v_y]` of the Cross-GVP as `[n, 3]` tensors.
pub fn lrf_vectors(
    model: &EquiShape,
    params: &crate::params::ParamSet,
    x: &PointCloud,
    y: &PointCloud,
) -> Result<[Tensor; 4]> {
    let (gx, gy) = model.graphs(x, y)?;
    let mut tape = Tape::new();
    let p = params.bind(&mut tape, false);
    let v = model.lrf_vectors(&mut tape, &p, (x, &gx), (y, &gy))?;
    Ok([v.u_x, v.v_x, v.u_y, v.v_y].map(|var| tape.value(var).clone()))
}

fn rotate_rows(r: &Matrix3<f64>, t: &Tensor) -> Vec<Vector3<f64>> {
    (0..t.shape()[0])
        .map(|i| {
            let row = t.row(i);
            r * Vector3::new(row[0], row[1], row[2])
        })
        .collect()
}

/// Worst relative error of `R u` against the vectors computed on the
/// moved shapes, each shape with its own motion.
pub fn lrf_equivariance(cfg: &CheckConfig) -> Result<PropertyResult> {
    let models = models(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xA1);
    let mut worst: f64 = 0.0;
    for trial in 0..cfg.lrf_trials {
        let (model, params) = &models[trial % models.len()];
        let (x, y) = random_pair(cfg, trial)?;
        let (g1, g2) = (random_se3_with(&mut rng), random_se3_with(&mut rng));
        let base = lrf_vectors(model, params, &x, &y)?;
        let moved = lrf_vectors(model, params, &apply_se3(&g1, &x), &apply_se3(&g2, &y))?;
        for (k, (b, m)) in base.iter().zip(&moved).enumerate() {
            let r = if k < 2 { &g1.rotation } else { &g2.rotation };
            let expected = rotate_rows(r, b);
            let scale = b.max_abs().max(1e-12);
            for (i, e) in expected.iter().enumerate() {
                let row = m.row(i);
                let err = (Vector3::new(row[0], row[1], row[2]) - e).amax() / scale;
                worst = worst.max(err);
            }
        }
    }
    Ok(PropertyResult::new(
        "lrf vectors transform independently per shape (max rel err)",
        worst,
        1e-5,
        format!("{} trials, n = {}", cfg.lrf_trials, cfg.points),
    ))
}

/// Rotation equivariance, reflection behavior and orthonormality of
/// strict Gram-Schmidt on random vector pairs.
pub fn gram_schmidt_properties(cfg: &CheckConfig) -> Result<Vec<PropertyResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x65);
    let mut rot: f64 = 0.0;
    let mut refl: f64 = 0.0;
    let mut frames = Vec::with_capacity(cfg.gram_schmidt_trials);
    let mirror = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -1.0));
    let mut v3 = || Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
    let mut samples = Vec::with_capacity(cfg.gram_schmidt_trials);
    while samples.len() < cfg.gram_schmidt_trials {
        let (u, v) = (v3(), v3());
        if u.norm() > 0.1 && u.cross(&v).norm() > 0.1 {
            samples.push((u, v));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x66);
    for (u, v) in samples {
        let r = random_rotation(&mut rng);
        let f = gram_schmidt(&u, &v)?;
        let fr = gram_schmidt(&(r * u), &(r * v))?;
        rot = rot.max((fr - r * f).amax());
        let m = mirror * r;
        let fm = gram_schmidt(&(m * u), &(m * v))?;
        let mut expected = m * f;
        expected.set_column(2, &(-(m * f.column(2))));
        refl = refl.max((fm - expected).amax());
        frames.push(f);
    }
    let n = frames.len();
    let ortho = LrfSet::new(frames).max_violation();
    Ok(vec![
        PropertyResult::new("gram-schmidt SO(3) equivariance", rot, 1e-10, format!("{n} pairs")),
        PropertyResult::new(
            "reflection keeps e1, e2 and flips e3 (cross-product identity)",
            refl,
            1e-10,
            format!("{n} pairs"),
        ),
        PropertyResult::new("frames orthonormal with det +1", ortho, 1e-6, format!("{n} frames")),
    ])
}

/// Similarity and hard matches under independent motions of both shapes.
pub fn pipeline_invariance(cfg: &CheckConfig) -> Result<Vec<PropertyResult>> {
    let models = models(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x1F);
    let mut ds: f64 = 0.0;
    let mut disagreements = 0usize;
    let mut confident = 0usize;
    let mut rows = 0usize;
    for trial in 0..cfg.invariance_trials {
        let (model, params) = &models[trial % models.len()];
        let (x, y) = random_pair(cfg, trial)?;
        let (g1, g2) = (random_se3_with(&mut rng), random_se3_with(&mut rng));
        let a = predict(model, params, &x, &y)?;
        let b = predict(model, params, &apply_se3(&g1, &x), &apply_se3(&g2, &y))?;
        ds = ds.max(a.similarity.max_abs_diff(&b.similarity));
        let margins = top1_margins(&a.similarity);
        for (i, m) in margins.iter().enumerate() {
            rows += 1;
            if *m > 1e-4 {
                confident += 1;
                if a.correspondence.matches[i] != b.correspondence.matches[i] {
                    disagreements += 1;
                }
            }
        }
    }
    Ok(vec![
        PropertyResult::new(
            "similarity invariant under (g1, g2) (max abs diff)",
            ds,
            1e-5,
            format!("{} trials, n = {}", cfg.invariance_trials, cfg.points),
        ),
        PropertyResult::new(
            "hard matches identical where top-1 margin > 1e-4 (disagreeing rows)",
            disagreements as f64,
            0.0,
            format!("{confident} of {rows} rows above the margin"),
        ),
    ])
}

/// Forward and backward of every differentiable op against central
/// differences, 20 seeds each.
pub fn op_gradients() -> Result<Vec<PropertyResult>> {
    Ok(op_suite(0..20)?
        .into_iter()
        .map(|(name, r)| {
            let mut p = PropertyResult::new(
                format!("gradient of {name}"),
                r.max_rel_err,
                1e-4,
                format!("{} coordinates", r.checked),
            );
            p.passed &= r.checked > 0;
            p
        })
        .collect())
}

/// Model small enough for exhaustive finite differences on 8 points.
pub fn tiny_model_config(seed: u64) -> ModelConfig {
    ModelConfig {
        k: 4,
        layers: 2,
        scalar_dim: 6,
        vector_dim: 3,
        lrf_dim: 5,
        edge_channels: vec![6, 5],
        seed,
        ..ModelConfig::default()
    }
}

/// Smallest sine between the two Gram-Schmidt input vectors over all rows.
fn min_frame_sine(u: &Tensor, v: &Tensor) -> f64 {
    u.data()
        .chunks(3)
        .zip(v.data().chunks(3))
        .map(|(a, b)| {
            let (a, b) = (Vector3::new(a[0], a[1], a[2]), Vector3::new(b[0], b[1], b[2]));
            a.cross(&b).norm() / (a.norm() * b.norm())
        })
        .fold(f64::INFINITY, f64::min)
}

/// End-to-end total loss against central differences on 8-point pairs,
/// over every parameter.
///
/// Instances are screened like the op suite screens its inputs: the tape's
/// selection and kink gaps must clear the kink tolerance, and the frame
/// vectors must stay away from the collinear configuration where
/// Gram-Schmidt is singular (sine at least 0.1). Near that singularity the
/// frames amplify roundoff a thousandfold and a difference quotient measures
/// noise instead of the derivative.
pub fn end_to_end_gradients(seed: u64) -> Result<PropertyResult> {
    const MIN_SINE: f64 = 0.1;
    const WANTED: usize = 4;
    let loss_cfg = LossConfig {
        k_latent: 3,
        ..LossConfig::default()
    };
    let spec = ShapeSpec {
        points: 32,
        ..ShapeSpec::default()
    };
    let mut worst: f64 = 0.0;
    let mut verified = 0;
    let mut tried = 0;
    for s in seed..seed + 400 {
        tried += 1;
        let (model, params) = EquiShape::init(tiny_model_config(s))?;
        let pair = generate_pair(&spec, s)?;
        let x = PointCloud::new(pair.source.points()[..8].to_vec())?;
        let y = PointCloud::new(pair.target.points()[..8].to_vec())?;

        let mut tape = Tape::new();
        let p = params.bind(&mut tape, false);
        let (out, _) = model.loss(&mut tape, &p, &x, &y, &loss_cfg)?;
        let g = out.vectors.as_ref().expect("learned frames");
        let sine = min_frame_sine(tape.value(g.u_x), tape.value(g.v_x))
            .min(min_frame_sine(tape.value(g.u_y), tape.value(g.v_y)));
        if tape.min_kink_gap() < KINK_TOLERANCE || sine < MIN_SINE {
            continue;
        }

        let report = grad_check_with(
            |tape, vars| {
                let p = Bound::from_vars(vars.to_vec());
                let (_, l) = model
                    .loss(tape, &p, &x, &y, &loss_cfg)
                    .map_err(|e| match e {
                        Error::Tensor(t) => t,
                        other => panic!("unexpected error: {other}"),
                    })?;
                Ok(l.total)
            },
            params.values(),
            &GradCheckOptions::default(),
        )?;
        if !report.skipped {
            worst = worst.max(report.max_rel_err);
            verified += 1;
            if verified >= WANTED {
                break;
            }
        }
    }
    let mut p = PropertyResult::new(
        "end-to-end total_loss gradient, n = 8 (max rel err)",
        worst,
        1e-4,
        format!("{verified} of {tried} seeds well conditioned"),
    );
    p.passed &= verified >= 3;
    Ok(p)
}

pub fn run_suite(suite: Suite, cfg: &CheckConfig) -> Result<Vec<PropertyResult>> {
    let mut out = Vec::new();
    if matches!(suite, Suite::Equivariance | Suite::All) {
        out.push(lrf_equivariance(cfg)?);
        out.extend(gram_schmidt_properties(cfg)?);
        out.extend(pipeline_invariance(cfg)?);
    }
    if matches!(suite, Suite::Gradients | Suite::All) {
        out.extend(op_gradients()?);
        out.push(end_to_end_gradients(cfg.seed)?);
    }
    Ok(out)
}

