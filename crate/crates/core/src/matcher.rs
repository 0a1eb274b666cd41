//! From local reference frames to correspondences.
//!
//! Neighbor offsets are projected into each point's frame and pooled into
//! invariant features, an EdgeConv stack turns those into descriptors, and
//! cosine similarity between descriptors drives both hard matching and the
//! differentiable constructions used by the unsupervised losses.

use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::equinet::{CrossGvp, CrossGvpConfig, CrossGvpOutput};
use crate::error::{Error, Result};
use crate::geometry::{
    covariance_lrf, frames_from_vectors, knn_graph, knn_rows_with_gap, max_diameter, write_xyz_rgb,
    KnnGraph, LrfSet, PointCloud,
};
use crate::params::{Bound, ParamId, ParamSet};
use crate::tensor::{Tape, Tensor, Var, LEAKY_SLOPE, NORM_EPS};

pub const BATCH_NORM_EPS: f64 = 1e-5;

/// Where per-point frames come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FrameSource {
    /// Gram-Schmidt on the Cross-GVP vectors.
    Learned,
    /// Handcrafted eigenvector frames of the neighborhood scatter.
    Covariance,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Graph degree, shared by the Cross-GVP graphs, the LRF neighborhoods
    /// and the EdgeConv feature graphs.
    pub k: usize,
    pub layers: usize,
    pub scalar_dim: usize,
    pub vector_dim: usize,
    /// Width of the LRF-Transform perceptron.
    pub lrf_dim: usize,
    pub edge_channels: Vec<usize>,
    pub frames: FrameSource,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            k: 27,
            layers: 3,
            scalar_dim: 64,
            vector_dim: 16,
            lrf_dim: 64,
            edge_channels: vec![64, 64, 128, 256, 512],
            frames: FrameSource::Learned,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn gvp(&self) -> CrossGvpConfig {
        CrossGvpConfig {
            layers: self.layers,
            scalar_dim: self.scalar_dim,
            vector_dim: self.vector_dim,
            k: self.k,
            seed: self.seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.gvp().validate()?;
        if self.lrf_dim == 0 || self.edge_channels.is_empty() || self.edge_channels.contains(&0) {
            return Err(Error::Config(
                "lrf_dim and every edge channel count must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn descriptor_dim(&self) -> usize {
        *self.edge_channels.last().expect("validated")
    }
}

/// Loss weights and construction settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda_cc: f64,
    pub lambda_sc: f64,
    pub lambda_m: f64,
    /// Squared-distance scale of the mapping regularizer.
    pub alpha: f64,
    /// Latent neighborhood size of soft construction.
    pub k_latent: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda_cc: 1.0,
            lambda_sc: 10.0,
            lambda_m: 1.0,
            alpha: 0.001,
            k_latent: 10,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if [self.lambda_cc, self.lambda_sc, self.lambda_m]
            .iter()
            .any(|l| !(l.is_finite() && *l >= 0.0))
        {
            return Err(Error::Config("loss weights must be finite and >= 0".into()));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be > 0, got {}", self.alpha)));
        }
        if self.k_latent == 0 {
            return Err(Error::Config("k_latent must be >= 1".into()));
        }
        Ok(())
    }
}

fn perceptron_layer(tape: &mut Tape, p: &Bound, x: Var, w: ParamId, b: ParamId) -> Result<Var> {
    let y = tape.matmul(x, p.var(w))?;
    let y = tape.add(y, p.var(b))?;
    Ok(tape.leaky_relu(y, LEAKY_SLOPE)?)
}

/// Neighbor offsets `x_j - x_i` as an `[n, k, 3]` tensor.
pub fn neighbor_offsets(cloud: &PointCloud, graph: &KnnGraph) -> Tensor {
    let pts = cloud.points();
    let (n, k) = (graph.node_count(), graph.k());
    let mut data = Vec::with_capacity(n * k * 3);
    for i in 0..n {
        for &j in graph.neighbors(i) {
            let d = pts[j] - pts[i];
            data.extend_from_slice(&[d.x, d.y, d.z]);
        }
    }
    Tensor::new(vec![n, k, 3], data).expect("offset shape")
}

/// Projects neighbor offsets into each point's frame, applies a shared
/// two-layer perceptron and max-pools over the neighborhood.
#[derive(Clone, Debug)]
pub struct LrfTransform {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

impl LrfTransform {
    pub fn new(params: &mut ParamSet, dim: usize, rng: &mut ChaCha8Rng) -> Self {
        LrfTransform {
            w1: params.glorot("lrf.w1", 3, dim, rng),
            b1: params.zeros("lrf.b1", &[dim]),
            w2: params.glorot("lrf.w2", dim, dim, rng),
            b2: params.zeros("lrf.b2", &[dim]),
        }
    }

    /// `frames` is `[n, 3, 3]` with frame axes as columns.
    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        frames: Var,
        cloud: &PointCloud,
        graph: &KnnGraph,
    ) -> Result<Var> {
        let (n, k) = (graph.node_count(), graph.k());
        let offsets = tape.constant(neighbor_offsets(cloud, graph));
        let local = tape.batch_matmul(offsets, frames)?;
        let local = tape.reshape(local, &[n * k, 3])?;
        let h = perceptron_layer(tape, p, local, self.w1, self.b1)?;
        let h = perceptron_layer(tape, p, h, self.w2, self.b2)?;
        let d = tape.shape(h)[1];
        let h = tape.reshape(h, &[n, k, d])?;
        Ok(tape.max_axis(h, 1)?)
    }
}

#[derive(Clone, Debug)]
struct EdgeLayer {
    w_center: ParamId,
    w_edge: ParamId,
    gamma: ParamId,
    beta: ParamId,
}

/// Dynamic-graph EdgeConv stack ending in L2-normalized descriptors.
#[derive(Clone, Debug)]
pub struct EdgeConvExtractor {
    layers: Vec<EdgeLayer>,
    k: usize,
}

impl EdgeConvExtractor {
    pub fn new(
        params: &mut ParamSet,
        input_dim: usize,
        channels: &[usize],
        k: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mut c_in = input_dim;
        let layers = channels
            .iter()
            .enumerate()
            .map(|(l, &c)| {
                // the perceptron acts on [h_i | h_j - h_i], split into two blocks
                let a = (6.0 / (2 * c_in + c) as f64).sqrt();
                let mut block = |name: String| {
                    use rand::Rng;
                    let data = (0..c_in * c).map(|_| rng.gen_range(-a..a)).collect();
                    params.add(name, Tensor::new(vec![c_in, c], data).expect("shape"))
                };
                let layer = EdgeLayer {
                    w_center: block(format!("edge{l}.w_center")),
                    w_edge: block(format!("edge{l}.w_edge")),
                    gamma: params.ones(format!("edge{l}.gamma"), &[c]),
                    beta: params.zeros(format!("edge{l}.beta"), &[c]),
                };
                c_in = c;
                layer
            })
            .collect();
        EdgeConvExtractor { layers, k }
    }

    /// `h` is `[n, c_in]`; returns `[n, c_out]` with unit rows.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, h: Var) -> Result<Var> {
        let n = tape.shape(h)[0];
        if self.k >= n {
            return Err(crate::geometry::GeometryError::KOutOfRange { k: self.k, n }.into());
        }
        let mut h = h;
        for layer in &self.layers {
            let c_in = tape.shape(h)[1];
            let (idx, gap) = knn_rows_with_gap(tape.value(h).data(), c_in, self.k);
            tape.note_gap(gap);
            // W [h_i | h_j - h_i] = (W_c - W_e) h_i + W_e h_j
            let pc = tape.matmul(h, p.var(layer.w_center))?;
            let pe = tape.matmul(h, p.var(layer.w_edge))?;
            let center = tape.sub(pc, pe)?;
            h = tape.edge_pool(
                center,
                pe,
                &idx,
                self.k,
                p.var(layer.gamma),
                p.var(layer.beta),
                BATCH_NORM_EPS,
                LEAKY_SLOPE,
            )?;
        }
        normalize_rows(tape, h)
    }
}

/// `x / (|x| + NORM_EPS)` row-wise.
pub fn normalize_rows(tape: &mut Tape, x: Var) -> Result<Var> {
    let n = tape.shape(x)[0];
    let norm = tape.norm_axis(x, 1)?;
    let norm = tape.add_scalar(norm, NORM_EPS)?;
    let norm = tape.reshape(norm, &[n, 1])?;
    Ok(tape.div(x, norm)?)
}

/// Cosine similarity `s_ij = <f_i, g_j> / (|f_i| |g_j| + 1e-12)` between
/// the rows of `f` and `g`.
pub fn similarity(f: &Tensor, g: &Tensor) -> Tensor {
    let (n, c) = (f.shape()[0], f.shape()[1]);
    let m = g.shape()[0];
    assert_eq!(g.shape()[1], c, "descriptor widths differ");
    let norm = |r: &[f64]| r.iter().map(|v| v * v).sum::<f64>().sqrt();
    let gn: Vec<f64> = (0..m).map(|j| norm(g.row(j))).collect();
    let mut out = Vec::with_capacity(n * m);
    for i in 0..n {
        let fi = f.row(i);
        let fnorm = norm(fi);
        for j in 0..m {
            let dot: f64 = fi.iter().zip(g.row(j)).map(|(a, b)| a * b).sum();
            out.push(dot / (fnorm * gn[j] + NORM_EPS));
        }
    }
    Tensor::new(vec![n, m], out).expect("similarity shape")
}

/// Hard correspondence from source to target points.
#[derive(Clone, Debug, PartialEq)]
pub struct Correspondence {
    pub matches: Vec<usize>,
    /// Similarity of each chosen match.
    pub scores: Vec<f64>,
    /// Soft construction of the matched points, when available.
    pub constructed: Option<PointCloud>,
}

/// Row-wise argmax; ties go to the lowest index.
pub fn hard_match(s: &Tensor) -> Correspondence {
    let (n, m) = (s.shape()[0], s.shape()[1]);
    let mut matches = Vec::with_capacity(n);
    let mut scores = Vec::with_capacity(n);
    for i in 0..n {
        let row = &s.data()[i * m..(i + 1) * m];
        let mut best = 0;
        for j in 1..m {
            if row[j] > row[best] {
                best = j;
            }
        }
        matches.push(best);
        scores.push(row[best]);
    }
    Correspondence {
        matches,
        scores,
        constructed: None,
    }
}

/// Gap between the best and second-best similarity of every row.
pub fn top1_margins(s: &Tensor) -> Vec<f64> {
    let m = s.shape()[1];
    (0..s.shape()[0])
        .map(|i| {
            let row = &s.data()[i * m..(i + 1) * m];
            let (mut a, mut b) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
            for &v in row {
                if v > a {
                    b = a;
                    a = v;
                } else if v > b {
                    b = v;
                }
            }
            a - b
        })
        .collect()
}

/// Indices of the `k` largest entries of every row, most similar first,
/// ties to the lowest index. With `exclude_diagonal` entry `(i, i)` is
/// never chosen.
pub fn top_k_rows(s: &Tensor, k: usize, exclude_diagonal: bool) -> Vec<usize> {
    top_k_rows_with_gap(s, k, exclude_diagonal).0
}

/// [`top_k_rows`] plus the smallest margin between the k-th entry and the
/// best excluded one.
pub fn top_k_rows_with_gap(s: &Tensor, k: usize, exclude_diagonal: bool) -> (Vec<usize>, f64) {
    let mut gap = f64::INFINITY;
    let (n, m) = (s.shape()[0], s.shape()[1]);
    let mut out = Vec::with_capacity(n * k);
    let mut cand: Vec<(f64, usize)> = Vec::with_capacity(m);
    let cmp = |a: &(f64, usize), b: &(f64, usize)| {
        b.0.partial_cmp(&a.0)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.1.cmp(&b.1))
    };
    for i in 0..n {
        cand.clear();
        cand.extend(
            s.data()[i * m..(i + 1) * m]
                .iter()
                .enumerate()
                .filter(|&(j, _)| !(exclude_diagonal && j == i))
                .map(|(j, &v)| (v, j)),
        );
        if k < cand.len() {
            cand.select_nth_unstable_by(k, cmp);
            let next = cand[k].0;
            cand.select_nth_unstable_by(k - 1, cmp);
            gap = gap.min(cand[k - 1].0 - next);
        }
        let head = &mut cand[..k];
        head.sort_unstable_by(cmp);
        out.extend(head.iter().map(|c| c.1));
    }
    (out, gap)
}

/// Differentiable soft construction: every source row becomes the
/// softmax-weighted combination of its `k_latent` most similar target
/// points. `s` is `[n, m]`, `target` is `[m, 3]`.
pub fn soft_construct_var(
    tape: &mut Tape,
    s: Var,
    target: Var,
    k_latent: usize,
    exclude_diagonal: bool,
) -> Result<Var> {
    let (n, m) = (tape.shape(s)[0], tape.shape(s)[1]);
    let available = if exclude_diagonal { m - 1 } else { m };
    if k_latent == 0 || k_latent > available {
        return Err(Error::Config(format!(
            "k_latent = {k_latent} must lie in 1..={available}"
        )));
    }
    let (idx, gap) = top_k_rows_with_gap(tape.value(s), k_latent, exclude_diagonal);
    tape.note_gap(gap);
    let logits = tape.take_along_rows(s, &idx, k_latent)?;
    let w = tape.softmax(logits, 1)?;
    let w = tape.reshape(w, &[n, k_latent, 1])?;
    let pts = tape.gather(target, &idx)?;
    let pts = tape.reshape(pts, &[n, k_latent, 3])?;
    let weighted = tape.mul(pts, w)?;
    Ok(tape.sum_axis(weighted, 1)?)
}

pub fn soft_construct(s: &Tensor, target: &PointCloud, k_latent: usize) -> Result<PointCloud> {
    let mut tape = Tape::new();
    let sv = tape.constant(s.clone());
    let t = tape.constant(target.to_tensor());
    let c = soft_construct_var(&mut tape, sv, t, k_latent, false)?;
    Ok(PointCloud::from_tensor(tape.value(c))?)
}

/// Mean squared nearest-neighbor distance from `a` to `b` plus the same
/// from `b` to `a`.
pub fn chamfer(a: &PointCloud, b: &PointCloud) -> f64 {
    let one_way = |a: &PointCloud, b: &PointCloud| {
        a.points()
            .iter()
            .map(|p| {
                b.points()
                    .iter()
                    .map(|q| (p - q).norm_squared())
                    .fold(f64::INFINITY, f64::min)
            })
            .sum::<f64>()
            / a.len() as f64
    };
    one_way(a, b) + one_way(b, a)
}

/// Construction loss from already constructed clouds.
#[allow(clippy::too_many_arguments)]
pub fn construction_loss(
    x: &PointCloud,
    y: &PointCloud,
    x_c: &PointCloud,
    y_c: &PointCloud,
    x_s: &PointCloud,
    y_s: &PointCloud,
    lambda_cc: f64,
    lambda_sc: f64,
) -> f64 {
    lambda_cc * (chamfer(y, y_c) + chamfer(x, x_c)) + lambda_sc * (chamfer(y, y_s) + chamfer(x, x_s))
}

/// Constant per-edge weights `exp(-|x_i - x_l|^2 / alpha)`, aligned with
/// [`KnnGraph::flat`].
fn mapping_weights(x: &PointCloud, graph: &KnnGraph, alpha: f64) -> Tensor {
    let pts = x.points();
    let w: Vec<f64> = graph
        .centers()
        .iter()
        .zip(graph.flat())
        .map(|(&i, &l)| (-(pts[i] - pts[l]).norm_squared() / alpha).exp())
        .collect();
    let e = w.len();
    Tensor::new(vec![e, 1], w).expect("weights")
}

/// Differentiable mapping regularizer over the graph of `x`; `y_c` is the
/// `[n, 3]` construction of `x`'s points in the other shape.
pub fn mapping_regularizer_var(
    tape: &mut Tape,
    x: &PointCloud,
    y_c: Var,
    graph: &KnnGraph,
    alpha: f64,
) -> Result<Var> {
    if !(alpha > 0.0) {
        return Err(Error::Config(format!("alpha must be > 0, got {alpha}")));
    }
    let w = tape.constant(mapping_weights(x, graph, alpha));
    let yi = tape.gather(y_c, &graph.centers())?;
    let yl = tape.gather(y_c, graph.flat())?;
    let d = tape.sub(yi, yl)?;
    let d = tape.square(d)?;
    let d = tape.mul(d, w)?;
    Ok(tape.sum_all(d)?)
}

pub fn mapping_regularizer(
    x: &PointCloud,
    y_c: &PointCloud,
    graph: &KnnGraph,
    alpha: f64,
) -> Result<f64> {
    let mut tape = Tape::new();
    let yc = tape.constant(y_c.to_tensor());
    let v = mapping_regularizer_var(&mut tape, x, yc, graph, alpha)?;
    Ok(tape.value(v).item()?)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cd_cross_x: f64,
    pub cd_cross_y: f64,
    pub cd_self_x: f64,
    pub cd_self_y: f64,
    pub map_x: f64,
    pub map_y: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn cross(&self) -> f64 {
        self.cd_cross_x + self.cd_cross_y
    }

    pub fn self_construction(&self) -> f64 {
        self.cd_self_x + self.cd_self_y
    }

    pub fn mapping(&self) -> f64 {
        self.map_x + self.map_y
    }

    /// Weighted construction part of the total.
    pub fn construction(&self, cfg: &LossConfig) -> f64 {
        cfg.lambda_cc * self.cross() + cfg.lambda_sc * self.self_construction()
    }
}

/// Tape handles of every loss term.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub cd_cross_x: Var,
    pub cd_cross_y: Var,
    pub cd_self_x: Var,
    pub cd_self_y: Var,
    pub map_x: Var,
    pub map_y: Var,
    pub total: Var,
    /// Construction of `x`'s points from `y` (`[n, 3]`).
    pub y_c: Var,
}

impl LossVars {
    pub fn breakdown(&self, tape: &Tape) -> LossBreakdown {
        let v = |var: Var| tape.value(var).data()[0];
        LossBreakdown {
            cd_cross_x: v(self.cd_cross_x),
            cd_cross_y: v(self.cd_cross_y),
            cd_self_x: v(self.cd_self_x),
            cd_self_y: v(self.cd_self_y),
            map_x: v(self.map_x),
            map_y: v(self.map_y),
            total: v(self.total),
        }
    }
}

/// Assembles all loss terms from unit-row descriptors `f_x`, `f_y`.
pub fn loss_terms(
    tape: &mut Tape,
    (x, gx, f_x): (&PointCloud, &KnnGraph, Var),
    (y, gy, f_y): (&PointCloud, &KnnGraph, Var),
    cfg: &LossConfig,
) -> Result<LossVars> {
    let xt = tape.constant(x.to_tensor());
    let yt = tape.constant(y.to_tensor());
    let fyt = tape.transpose(f_y)?;
    let s_xy = tape.matmul(f_x, fyt)?;
    let s_yx = tape.transpose(s_xy)?;
    let fxt = tape.transpose(f_x)?;
    let s_xx = tape.matmul(f_x, fxt)?;
    let s_yy = tape.matmul(f_y, fyt)?;

    let kl = cfg.k_latent;
    // y_c[i]: where x_i lands in y; x_c[j]: where y_j lands in x
    let y_c = soft_construct_var(tape, s_xy, yt, kl, false)?;
    let x_c = soft_construct_var(tape, s_yx, xt, kl, false)?;
    let x_s = soft_construct_var(tape, s_xx, xt, kl, true)?;
    let y_s = soft_construct_var(tape, s_yy, yt, kl, true)?;

    let cd_cross_y = tape.chamfer(yt, y_c)?;
    let cd_cross_x = tape.chamfer(xt, x_c)?;
    let cd_self_x = tape.chamfer(xt, x_s)?;
    let cd_self_y = tape.chamfer(yt, y_s)?;
    let map_x = mapping_regularizer_var(tape, x, y_c, gx, cfg.alpha)?;
    let map_y = mapping_regularizer_var(tape, y, x_c, gy, cfg.alpha)?;

    let cross = tape.add(cd_cross_x, cd_cross_y)?;
    let selfc = tape.add(cd_self_x, cd_self_y)?;
    let map = tape.add(map_x, map_y)?;
    let a = tape.scale(cross, cfg.lambda_cc)?;
    let b = tape.scale(selfc, cfg.lambda_sc)?;
    let c = tape.scale(map, cfg.lambda_m)?;
    let ab = tape.add(a, b)?;
    let total = tape.add(ab, c)?;
    Ok(LossVars {
        cd_cross_x,
        cd_cross_y,
        cd_self_x,
        cd_self_y,
        map_x,
        map_y,
        total,
        y_c,
    })
}

/// Fraction of source points whose match lies within `eps * d` of the
/// true target point, `d` being the target's diameter.
pub fn accuracy(matches: &[usize], gt: &[usize], target: &PointCloud, eps: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&eps) {
        return Err(Error::Config(format!("eps must lie in [0, 1], got {eps}")));
    }
    check_lengths(matches, gt, target)?;
    let d = max_diameter(target)?;
    let pts = target.points();
    let hits = matches
        .iter()
        .zip(gt)
        .filter(|&(&j, &g)| (pts[j] - pts[g]).norm() < eps * d)
        .count();
    Ok(hits as f64 / matches.len() as f64)
}

/// Mean distance between matched and true target points.
pub fn avg_error(matches: &[usize], gt: &[usize], target: &PointCloud) -> Result<f64> {
    check_lengths(matches, gt, target)?;
    let pts = target.points();
    let total: f64 = matches.iter().zip(gt).map(|(&j, &g)| (pts[j] - pts[g]).norm()).sum();
    Ok(total / matches.len() as f64)
}

fn check_lengths(matches: &[usize], gt: &[usize], target: &PointCloud) -> Result<()> {
    if matches.len() != gt.len() || matches.is_empty() {
        return Err(Error::Data(format!(
            "prediction has {} entries but ground truth has {}",
            matches.len(),
            gt.len()
        )));
    }
    let m = target.len();
    if let Some(&bad) = matches.iter().chain(gt).find(|&&j| j >= m) {
        return Err(Error::Data(format!(
            "index {bad} out of range for a target of {m} points"
        )));
    }
    Ok(())
}

/// Forward products kept for losses and refinement.
#[derive(Clone, Debug)]
pub struct ForwardOutputs {
    pub f_x: Var,
    pub f_y: Var,
    pub frames_x: Var,
    pub frames_y: Var,
    /// Cross-GVP outputs; absent for covariance frames.
    pub vectors: Option<CrossGvpOutput>,
    pub graph_x: KnnGraph,
    pub graph_y: KnnGraph,
}

/// The full matching network.
#[derive(Clone, Debug)]
pub struct EquiShape {
    config: ModelConfig,
    gvp: CrossGvp,
    lrf: LrfTransform,
    edge: EdgeConvExtractor,
}

impl EquiShape {
    /// Fresh model with parameters drawn from `config.seed`.
    pub fn init(config: ModelConfig) -> Result<(Self, ParamSet)> {
        config.validate()?;
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let gvp = CrossGvp::new(config.gvp(), &mut params, &mut rng)?;
        let lrf = LrfTransform::new(&mut params, config.lrf_dim, &mut rng);
        let edge =
            EdgeConvExtractor::new(&mut params, config.lrf_dim, &config.edge_channels, config.k, &mut rng);
        Ok((
            EquiShape {
                config,
                gvp,
                lrf,
                edge,
            },
            params,
        ))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn graphs(&self, x: &PointCloud, y: &PointCloud) -> Result<(KnnGraph, KnnGraph)> {
        Ok((knn_graph(x, self.config.k)?, knn_graph(y, self.config.k)?))
    }

    /// Cross-GVP vectors `(u, v)` for both shapes.
    pub fn lrf_vectors(
        &self,
        tape: &mut Tape,
        p: &Bound,
        x: (&PointCloud, &KnnGraph),
        y: (&PointCloud, &KnnGraph),
    ) -> Result<CrossGvpOutput> {
        self.gvp.forward_with_graphs(tape, p, x, y)
    }

    /// Descriptors of one shape from its `[n, 3, 3]` frames.
    pub fn describe(
        &self,
        tape: &mut Tape,
        p: &Bound,
        cloud: &PointCloud,
        graph: &KnnGraph,
        frames: Var,
    ) -> Result<Var> {
        let h = self.lrf.forward(tape, p, frames, cloud, graph)?;
        self.edge.forward(tape, p, h)
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        x: &PointCloud,
        y: &PointCloud,
    ) -> Result<ForwardOutputs> {
        let (gx, gy) = self.graphs(x, y)?;
        let (frames_x, frames_y, vectors) = match self.config.frames {
            FrameSource::Learned => {
                let v = self.lrf_vectors(tape, p, (x, &gx), (y, &gy))?;
                let fx = frames_from_vectors(tape, v.u_x, v.v_x)?;
                let fy = frames_from_vectors(tape, v.u_y, v.v_y)?;
                (fx, fy, Some(v))
            }
            FrameSource::Covariance => {
                let fx = tape.constant(covariance_lrf(x, &gx)?.to_tensor());
                let fy = tape.constant(covariance_lrf(y, &gy)?.to_tensor());
                (fx, fy, None)
            }
        };
        let f_x = self.describe(tape, p, x, &gx, frames_x)?;
        let f_y = self.describe(tape, p, y, &gy, frames_y)?;
        Ok(ForwardOutputs {
            f_x,
            f_y,
            frames_x,
            frames_y,
            vectors,
            graph_x: gx,
            graph_y: gy,
        })
    }

    /// Forward pass plus every loss term on one tape.
    pub fn loss(
        &self,
        tape: &mut Tape,
        p: &Bound,
        x: &PointCloud,
        y: &PointCloud,
        cfg: &LossConfig,
    ) -> Result<(ForwardOutputs, LossVars)> {
        let out = self.forward(tape, p, x, y)?;
        let l = loss_terms(tape, (x, &out.graph_x, out.f_x), (y, &out.graph_y, out.f_y), cfg)?;
        Ok((out, l))
    }
}

/// Result of an inference pass.
#[derive(Clone, Debug)]
pub struct Prediction {
    pub f_x: Tensor,
    pub f_y: Tensor,
    pub frames_x: LrfSet,
    pub frames_y: LrfSet,
    pub similarity: Tensor,
    pub correspondence: Correspondence,
}

/// Descriptors, frames, similarity and hard matches without gradients.
pub fn predict(model: &EquiShape, params: &ParamSet, x: &PointCloud, y: &PointCloud) -> Result<Prediction> {
    let mut tape = Tape::new();
    let p = params.bind(&mut tape, false);
    let out = model.forward(&mut tape, &p, x, y)?;
    let f_x = tape.value(out.f_x).clone();
    let f_y = tape.value(out.f_y).clone();
    let s = similarity(&f_x, &f_y);
    let correspondence = hard_match(&s);
    Ok(Prediction {
        frames_x: LrfSet::from_tensor(tape.value(out.frames_x)),
        frames_y: LrfSet::from_tensor(tape.value(out.frames_y)),
        f_x,
        f_y,
        similarity: s,
        correspondence,
    })
}

/// Loss breakdown of one pair without gradients.
pub fn total_loss(
    model: &EquiShape,
    params: &ParamSet,
    x: &PointCloud,
    y: &PointCloud,
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let p = params.bind(&mut tape, false);
    let (_, l) = model.loss(&mut tape, &p, x, y, cfg)?;
    Ok(l.breakdown(&tape))
}

/// One line per source point: `i j s`.
pub fn write_correspondence(path: &Path, corr: &Correspondence) -> Result<()> {
    let mut out = String::with_capacity(corr.matches.len() * 32);
    for (i, (j, s)) in corr.matches.iter().zip(&corr.scores).enumerate() {
        let _ = writeln!(out, "{i} {j} {s}");
    }
    crate::geometry::atomic_write(path, out.as_bytes())?;
    Ok(())
}

pub fn read_correspondence(path: &Path) -> Result<Correspondence> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut matches = Vec::new();
    let mut scores = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |what: &str| Error::Data(format!("{}:{}: {what}", path.display(), lineno + 1));
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() < 2 {
            return Err(bad("expected `i j [score]`"));
        }
        let i: usize = f[0].parse().map_err(|_| bad("malformed source index"))?;
        if i != matches.len() {
            return Err(bad("source indices must be consecutive from 0"));
        }
        matches.push(f[1].parse().map_err(|_| bad("malformed target index"))?);
        scores.push(match f.get(2) {
            Some(s) => s.parse().map_err(|_| bad("malformed score"))?,
            None => f64::NAN,
        });
    }
    Ok(Correspondence {
        matches,
        scores,
        constructed: None,
    })
}

/// Fully saturated HSV color with hue `300 * t` degrees, `t` in `[0, 1]`.
pub fn hsv_ramp(t: f64) -> [u8; 3] {
    let h = (t.clamp(0.0, 1.0) * 300.0) / 60.0;
    let x = 1.0 - ((h % 2.0) - 1.0).abs();
    let (r, g, b) = match h as u32 {
        0 => (1.0, x, 0.0),
        1 => (x, 1.0, 0.0),
        2 => (0.0, 1.0, x),
        3 => (0.0, x, 1.0),
        4 => (x, 0.0, 1.0),
        _ => (1.0, 0.0, x),
    };
    [r, g, b].map(|c: f64| (c * 255.0).round() as u8)
}

/// Writes the target colored by point index and the source colored by the
/// index of its match, so corresponding regions share a color.
pub fn write_colored(
    src_path: &Path,
    tgt_path: &Path,
    x: &PointCloud,
    y: &PointCloud,
    corr: &Correspondence,
) -> Result<()> {
    let m = y.len();
    let color = |j: usize| hsv_ramp(j as f64 / (m.max(2) - 1) as f64);
    let src: Vec<[u8; 3]> = corr.matches.iter().map(|&j| color(j)).collect();
    let tgt: Vec<[u8; 3]> = (0..m).map(color).collect();
    write_xyz_rgb(src_path, x, &src)?;
    write_xyz_rgb(tgt_path, y, &tgt)?;
    Ok(())
}
