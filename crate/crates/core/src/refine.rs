//! Test-time refinement of one pair through a frozen model.
//!
//! [`lrf_refine`] learns residuals added to the Cross-GVP vectors before
//! Gram-Schmidt. Each residual is stored in the coordinates of the point's
//! unrefined frame, so the optimized quantities are invariant and Adam's
//! per-coordinate scaling cannot break the rigid-motion contract. The
//! world-space residual is `R_i a_i`, zero at the start like the plain
//! additive form.
//!
//! [`coord_refine_baseline`] instead moves the constructed target
//! coordinates directly.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::ShapePair;
use crate::error::{Error, Result};
use crate::geometry::{atomic_write, frames_from_vectors, gram_schmidt, KnnGraph, PointCloud};
use crate::matcher::{
    hard_match, loss_terms, LossVars, mapping_regularizer_var, similarity, soft_construct_var, Correspondence,
    EquiShape, FrameSource, LossBreakdown, LossConfig,
};
use crate::params::{Bound, ParamSet};
use crate::tensor::{Tape, Tensor, Var};
use crate::train::{adam_step, AdamConfig, AdamState};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefineConfig {
    pub lr: f64,
    pub steps: usize,
    pub adam: AdamConfig,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self::paper()
    }
}

impl RefineConfig {
    /// Rate published for full-scale human scans.
    pub fn paper() -> Self {
        RefineConfig {
            lr: 1e-8,
            steps: 100,
            adam: AdamConfig::default(),
        }
    }

    /// Rate suited to unit-radius synthetic shapes.
    pub fn tuned() -> Self {
        RefineConfig {
            lr: 1e-5,
            ..Self::paper()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("refine lr must be finite and >= 0, got {}", self.lr)));
        }
        Ok(())
    }
}

/// World-space residuals added to `(u, v)` of both shapes, `[n, 3]` each.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualLrf {
    pub du_x: Tensor,
    pub dv_x: Tensor,
    pub du_y: Tensor,
    pub dv_y: Tensor,
}

impl ResidualLrf {
    pub fn max_abs(&self) -> f64 {
        [&self.du_x, &self.dv_x, &self.du_y, &self.dv_y]
            .iter()
            .map(|t| t.max_abs())
            .fold(0.0, f64::max)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefineStep {
    pub step: usize,
    pub loss: LossBreakdown,
}

pub const TRACE_HEADER: &str = "step,total,cd_cross,cd_self,map";

pub fn trace_csv(trace: &[RefineStep]) -> String {
    let mut out = String::from(TRACE_HEADER);
    out.push('\n');
    for s in trace {
        let l = &s.loss;
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            s.step,
            l.total,
            l.cross(),
            l.self_construction(),
            l.mapping()
        );
    }
    out
}

pub fn write_trace(path: &Path, trace: &[RefineStep]) -> Result<()> {
    Ok(atomic_write(path, trace_csv(trace).as_bytes())?)
}

#[derive(Clone, Debug)]
pub struct RefineOutcome {
    pub residual: ResidualLrf,
    /// Matches of the best iterate.
    pub correspondence: Correspondence,
    /// Loss before every update plus after the last, `steps + 1` rows.
    pub trace: Vec<RefineStep>,
    pub best_step: usize,
    pub warnings: Vec<String>,
}

impl RefineOutcome {
    pub fn initial_loss(&self) -> f64 {
        self.trace[0].loss.total
    }

    pub fn best_loss(&self) -> f64 {
        self.trace[self.best_step].loss.total
    }
}

struct Base {
    x_graph: KnnGraph,
    y_graph: KnnGraph,
    /// `u_x, v_x, u_y, v_y`.
    vectors: [Tensor; 4],
    frames_x: Tensor,
    frames_y: Tensor,
}

fn base_vectors(model: &EquiShape, params: &ParamSet, x: &PointCloud, y: &PointCloud) -> Result<Base> {
    let (gx, gy) = model.graphs(x, y)?;
    let mut tape = Tape::new();
    let p = params.bind(&mut tape, false);
    let v = model.lrf_vectors(&mut tape, &p, (x, &gx), (y, &gy))?;
    let fx = frames_from_vectors(&mut tape, v.u_x, v.v_x)?;
    let fy = frames_from_vectors(&mut tape, v.u_y, v.v_y)?;
    Ok(Base {
        vectors: [v.u_x, v.v_x, v.u_y, v.v_y].map(|var| tape.value(var).clone()),
        frames_x: tape.value(fx).clone(),
        frames_y: tape.value(fy).clone(),
        x_graph: gx,
        y_graph: gy,
    })
}

/// `R_i a_i` on the tape for `[n, 3, 3]` frames and `[n, 3]` coefficients.
fn rotate_rows(tape: &mut Tape, frames: Var, a: Var) -> Result<Var> {
    let n = tape.shape(a)[0];
    let a3 = tape.reshape(a, &[n, 3, 1])?;
    let r = tape.batch_matmul(frames, a3)?;
    Ok(tape.reshape(r, &[n, 3])?)
}

fn rotate_rows_value(frames: &Tensor, a: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let f = tape.constant(frames.clone());
    let a = tape.constant(a.clone());
    let r = rotate_rows(&mut tape, f, a)?;
    Ok(tape.value(r).clone())
}

struct Evaluation {
    loss: LossBreakdown,
    grads: Option<Vec<Tensor>>,
    f_x: Tensor,
    f_y: Tensor,
    y_c: Tensor,
    /// Refined `u_x, v_x, u_y, v_y`.
    vectors: [Tensor; 4],
}

struct ResidualVars {
    loss: LossVars,
    refined: Vec<Var>,
    f_x: Var,
    f_y: Var,
}

/// Loss of the pair with local residual coefficients `leaves` added to the
/// base vectors.
fn residual_loss(
    tape: &mut Tape,
    model: &EquiShape,
    p: &Bound,
    (x, y): (&PointCloud, &PointCloud),
    base: &Base,
    leaves: &[Var],
    cfg: &LossConfig,
) -> Result<ResidualVars> {
    let fx = tape.constant(base.frames_x.clone());
    let fy = tape.constant(base.frames_y.clone());
    let mut refined = Vec::with_capacity(4);
    for (i, (b, &a)) in base.vectors.iter().zip(leaves).enumerate() {
        let frames = if i < 2 { fx } else { fy };
        let d = rotate_rows(tape, frames, a)?;
        let b = tape.constant(b.clone());
        refined.push(tape.add(b, d)?);
    }
    let frames_x = frames_from_vectors(tape, refined[0], refined[1])?;
    let frames_y = frames_from_vectors(tape, refined[2], refined[3])?;
    let f_x = model.describe(tape, p, x, &base.x_graph, frames_x)?;
    let f_y = model.describe(tape, p, y, &base.y_graph, frames_y)?;
    let loss = loss_terms(tape, (x, &base.x_graph, f_x), (y, &base.y_graph, f_y), cfg)?;
    Ok(ResidualVars {
        loss,
        refined,
        f_x,
        f_y,
    })
}

fn evaluate_residual(
    model: &EquiShape,
    params: &ParamSet,
    (x, y): (&PointCloud, &PointCloud),
    base: &Base,
    coeffs: &[Tensor],
    cfg: &LossConfig,
    want_grad: bool,
) -> Result<Evaluation> {
    let mut tape = Tape::new();
    let p = params.bind(&mut tape, false);
    let leaves: Vec<Var> = coeffs.iter().map(|a| tape.leaf(a.clone(), want_grad)).collect();
    let ResidualVars {
        loss: l,
        refined,
        f_x,
        f_y,
    } = residual_loss(&mut tape, model, &p, (x, y), base, &leaves, cfg)?;
    let loss = l.breakdown(&tape);
    let vectors = [0, 1, 2, 3].map(|i| tape.value(refined[i]).clone());
    let (f_x, f_y, y_c) = (
        tape.value(f_x).clone(),
        tape.value(f_y).clone(),
        tape.value(l.y_c).clone(),
    );
    let grads = if want_grad && loss.total.is_finite() {
        let g = tape.backward(l.total)?;
        Some(
            leaves
                .iter()
                .zip(coeffs)
                .map(|(&v, c)| g.get(v).cloned().unwrap_or_else(|| Tensor::zeros(c.shape())))
                .collect(),
        )
    } else {
        None
    };
    Ok(Evaluation {
        loss,
        grads,
        f_x,
        f_y,
        y_c,
        vectors,
    })
}

fn first_degenerate(u: &Tensor, v: &Tensor) -> Option<usize> {
    (0..u.shape()[0]).find(|&i| {
        let (a, b) = (u.row(i), v.row(i));
        gram_schmidt(
            &nalgebra::Vector3::new(a[0], a[1], a[2]),
            &nalgebra::Vector3::new(b[0], b[1], b[2]),
        )
        .is_err()
    })
}

/// Refines the LRF vectors of one pair and returns the best iterate.
///
/// The model must use learned frames; its parameters are only read.
pub fn lrf_refine(
    model: &EquiShape,
    params: &ParamSet,
    x: &PointCloud,
    y: &PointCloud,
    loss_cfg: &LossConfig,
    cfg: &RefineConfig,
) -> Result<RefineOutcome> {
    cfg.validate()?;
    loss_cfg.validate()?;
    if model.config().frames != FrameSource::Learned {
        return Err(Error::Config("LRF refinement needs a model with learned frames".into()));
    }
    let base = base_vectors(model, params, x, y)?;
    let mut coeffs: Vec<Tensor> = base.vectors.iter().map(|t| Tensor::zeros(t.shape())).collect();
    let mut adam = AdamState::new(&coeffs);
    let mut trace = Vec::with_capacity(cfg.steps + 1);
    let mut warnings = Vec::new();
    let mut warned = [false; 2];
    let mut best: Option<(usize, Vec<Tensor>, Evaluation)> = None;

    for step in 0..=cfg.steps {
        let want_grad = step < cfg.steps;
        let ev = evaluate_residual(model, params, (x, y), &base, &coeffs, loss_cfg, want_grad)?;
        trace.push(RefineStep { step, loss: ev.loss });
        for (shape, (u, v)) in [(&ev.vectors[0], &ev.vectors[1]), (&ev.vectors[2], &ev.vectors[3])]
            .into_iter()
            .enumerate()
        {
            if let (false, Some(i)) = (warned[shape], first_degenerate(u, v)) {
                warned[shape] = true;
                warnings.push(format!(
                    "step {step}: degenerate frame at point {i} of the {}; stabilized Gram-Schmidt in use",
                    ["source", "target"][shape]
                ));
            }
        }
        let better = match &best {
            None => true,
            Some((_, _, b)) => ev.loss.total < b.loss.total,
        };
        let grads = ev.grads.clone();
        if better && ev.loss.total.is_finite() {
            best = Some((step, coeffs.clone(), ev));
        }
        if want_grad {
            match grads {
                Some(g) => {
                    if let Err(e) = adam_step(&mut coeffs, &g, &mut adam, cfg.lr, &cfg.adam) {
                        warnings.push(format!("step {step}: {e}; stopping early"));
                        break;
                    }
                }
                None => {
                    warnings.push(format!("step {step}: non-finite loss; stopping early"));
                    break;
                }
            }
        }
    }

    let (best_step, a, ev) =
        best.ok_or_else(|| Error::NonFinite("refinement never produced a finite loss".into()))?;
    let residual = ResidualLrf {
        du_x: rotate_rows_value(&base.frames_x, &a[0])?,
        dv_x: rotate_rows_value(&base.frames_x, &a[1])?,
        du_y: rotate_rows_value(&base.frames_y, &a[2])?,
        dv_y: rotate_rows_value(&base.frames_y, &a[3])?,
    };
    let mut correspondence = hard_match(&similarity(&ev.f_x, &ev.f_y));
    correspondence.constructed = Some(PointCloud::from_tensor(&ev.y_c)?);
    Ok(RefineOutcome {
        residual,
        correspondence,
        trace,
        best_step,
        warnings,
    })
}

/// Refines every pair independently in parallel.
pub fn lrf_refine_pairs(
    model: &EquiShape,
    params: &ParamSet,
    pairs: &[ShapePair],
    loss_cfg: &LossConfig,
    cfg: &RefineConfig,
) -> Result<Vec<RefineOutcome>> {
    pairs
        .par_iter()
        .map(|p| lrf_refine(model, params, &p.source, &p.target, loss_cfg, cfg))
        .collect()
}

#[derive(Clone, Debug)]
pub struct CoordRefineOutcome {
    /// Offsets added to the constructed points of `x` in `y` and of `y` in
    /// `x`, `[n, 3]` each.
    pub offsets: (Tensor, Tensor),
    pub correspondence: Correspondence,
    pub trace: Vec<RefineStep>,
    pub best_step: usize,
}

/// Moves the soft-constructed coordinates directly under the same loss,
/// leaving descriptors and frames alone. Matches of a refined iterate are
/// the target points nearest to the moved constructions; iterate zero
/// reports the plain descriptor matches.
pub fn coord_refine_baseline(
    (x, gx, f_x): (&PointCloud, &KnnGraph, &Tensor),
    (y, gy, f_y): (&PointCloud, &KnnGraph, &Tensor),
    loss_cfg: &LossConfig,
    cfg: &RefineConfig,
) -> Result<CoordRefineOutcome> {
    cfg.validate()?;
    loss_cfg.validate()?;
    // constructions and the self terms do not depend on the offsets
    let (y_c0, x_c0, self_x, self_y) = {
        let mut tape = Tape::new();
        let (fx, fy) = (tape.constant(f_x.clone()), tape.constant(f_y.clone()));
        let (xt, yt) = (tape.constant(x.to_tensor()), tape.constant(y.to_tensor()));
        let fyt = tape.transpose(fy)?;
        let fxt = tape.transpose(fx)?;
        let s_xy = tape.matmul(fx, fyt)?;
        let s_yx = tape.transpose(s_xy)?;
        let s_xx = tape.matmul(fx, fxt)?;
        let s_yy = tape.matmul(fy, fyt)?;
        let kl = loss_cfg.k_latent;
        let y_c = soft_construct_var(&mut tape, s_xy, yt, kl, false)?;
        let x_c = soft_construct_var(&mut tape, s_yx, xt, kl, false)?;
        let x_s = soft_construct_var(&mut tape, s_xx, xt, kl, true)?;
        let y_s = soft_construct_var(&mut tape, s_yy, yt, kl, true)?;
        let cx = tape.chamfer(xt, x_s)?;
        let cy = tape.chamfer(yt, y_s)?;
        (
            tape.value(y_c).clone(),
            tape.value(x_c).clone(),
            tape.value(cx).data()[0],
            tape.value(cy).data()[0],
        )
    };

    let evaluate = |dy: &Tensor, dx: &Tensor, want_grad: bool| -> Result<(LossBreakdown, Option<Vec<Tensor>>, Tensor)> {
        let mut tape = Tape::new();
        let (xt, yt) = (tape.constant(x.to_tensor()), tape.constant(y.to_tensor()));
        let (ly, lx) = (tape.leaf(dy.clone(), want_grad), tape.leaf(dx.clone(), want_grad));
        let (b_y, b_x) = (tape.constant(y_c0.clone()), tape.constant(x_c0.clone()));
        let y_c = tape.add(b_y, ly)?;
        let x_c = tape.add(b_x, lx)?;
        let cd_cross_y = tape.chamfer(yt, y_c)?;
        let cd_cross_x = tape.chamfer(xt, x_c)?;
        let map_x = mapping_regularizer_var(&mut tape, x, y_c, gx, loss_cfg.alpha)?;
        let map_y = mapping_regularizer_var(&mut tape, y, x_c, gy, loss_cfg.alpha)?;
        let cross = tape.add(cd_cross_x, cd_cross_y)?;
        let map = tape.add(map_x, map_y)?;
        let a = tape.scale(cross, loss_cfg.lambda_cc)?;
        let c = tape.scale(map, loss_cfg.lambda_m)?;
        let total = tape.add(a, c)?;
        let v = |var: Var| tape.value(var).data()[0];
        let loss = LossBreakdown {
            cd_cross_x: v(cd_cross_x),
            cd_cross_y: v(cd_cross_y),
            cd_self_x: self_x,
            cd_self_y: self_y,
            map_x: v(map_x),
            map_y: v(map_y),
            total: v(total) + loss_cfg.lambda_sc * (self_x + self_y),
        };
        let y_c = tape.value(y_c).clone();
        let grads = if want_grad && loss.total.is_finite() {
            let g = tape.backward(total)?;
            Some(
                [ly, lx]
                    .iter()
                    .map(|&var| g.get(var).cloned().unwrap_or_else(|| Tensor::zeros(dy.shape())))
                    .collect(),
            )
        } else {
            None
        };
        Ok((loss, grads, y_c))
    };

    let mut offsets = vec![Tensor::zeros(y_c0.shape()), Tensor::zeros(x_c0.shape())];
    let mut adam = AdamState::new(&offsets);
    let mut trace = Vec::with_capacity(cfg.steps + 1);
    let mut best: Option<(usize, Vec<Tensor>, f64, Tensor)> = None;
    for step in 0..=cfg.steps {
        let want_grad = step < cfg.steps;
        let (loss, grads, y_c) = evaluate(&offsets[0], &offsets[1], want_grad)?;
        trace.push(RefineStep { step, loss });
        if loss.total.is_finite() && best.as_ref().map_or(true, |b| loss.total < b.2) {
            best = Some((step, offsets.clone(), loss.total, y_c));
        }
        match (want_grad, grads) {
            (false, _) => {}
            (true, Some(g)) => {
                if adam_step(&mut offsets, &g, &mut adam, cfg.lr, &cfg.adam).is_err() {
                    break;
                }
            }
            (true, None) => break,
        }
    }
    let (best_step, off, _, y_c) =
        best.ok_or_else(|| Error::NonFinite("refinement never produced a finite loss".into()))?;
    let s = similarity(f_x, f_y);
    let mut correspondence = hard_match(&s);
    let constructed = PointCloud::from_tensor(&y_c)?;
    if best_step > 0 {
        let m = y.len();
        for (i, c) in constructed.points().iter().enumerate() {
            let j = (0..m)
                .min_by(|&a, &b| {
                    let da = (y.points()[a] - c).norm_squared();
                    let db = (y.points()[b] - c).norm_squared();
                    da.total_cmp(&db)
                })
                .expect("non-empty target");
            correspondence.matches[i] = j;
            correspondence.scores[i] = s.at(&[i, j]);
        }
    }
    correspondence.constructed = Some(constructed);
    Ok(CoordRefineOutcome {
        offsets: (off[0].clone(), off[1].clone()),
        correspondence,
        trace,
        best_step,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_pair, ShapeSpec};
    use crate::error::tensor_only;
    use crate::matcher::ModelConfig;
    use crate::tensor::{grad_check_with, GradCheckOptions};

    #[test]
    fn residual_gradients_match_finite_differences() {
        let config = ModelConfig {
            k: 4,
            layers: 1,
            scalar_dim: 6,
            vector_dim: 3,
            lrf_dim: 5,
            edge_channels: vec![6, 5],
            ..ModelConfig::default()
        };
        let loss_cfg = LossConfig {
            k_latent: 3,
            ..LossConfig::default()
        };
        let spec = ShapeSpec {
            points: 32,
            ..ShapeSpec::default()
        };
        let mut verified = 0;
        for seed in 0..12 {
            let (model, params) = EquiShape::init(ModelConfig { seed, ..config.clone() }).unwrap();
            let pair = generate_pair(&spec, seed).unwrap();
            let keep: Vec<usize> = (0..8).collect();
            let x = PointCloud::new(keep.iter().map(|&i| pair.source.points()[i]).collect()).unwrap();
            let y = PointCloud::new(keep.iter().map(|&i| pair.target.points()[i]).collect()).unwrap();
            let base = base_vectors(&model, &params, &x, &y).unwrap();
            let init: Vec<Tensor> = base
                .vectors
                .iter()
                .enumerate()
                .map(|(j, t)| Tensor::new(t.shape().to_vec(), (0..t.len()).map(|i| 0.01 * ((i * 7 + j) % 5) as f64 - 0.02).collect()).unwrap())
                .collect();
            let report = grad_check_with(
                |tape, vars| {
                    let p = params.bind(tape, false);
                    let r = tensor_only(residual_loss(tape, &model, &p, (&x, &y), &base, vars, &loss_cfg))?;
                    Ok(r.loss.total)
                },
                &init,
                // residuals are amplified through the frames, so a smaller
                // step keeps both probes on one side of nearby kinks
                &GradCheckOptions {
                    step: 1e-6,
                    ..GradCheckOptions::default()
                },
            )
            .unwrap();
            if !report.skipped {
                assert!(report.checked > 0);
                assert!(report.max_rel_err <= 1e-4, "seed {seed}: {report:?}");
                verified += 1;
            }
        }
        assert!(verified >= 3, "only {verified} seeds away from kinks");
    }
}
