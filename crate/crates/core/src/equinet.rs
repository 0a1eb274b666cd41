//! Cross-GVP: per-shape geometric vector perceptron graph convolutions with
//! cross-attention over invariant channels between the two shapes. The
//! output is one pair of equivariant vectors `(u_i, v_i)` per point.
//!
//! Vector channels are stored as `[n, 3, ν]` tensors. They are only ever
//! mixed linearly across channels and gated by invariant scalars, which is
//! what keeps them rotation-equivariant.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{center, knn_graph, KnnGraph, PointCloud};
use crate::params::{Bound, ParamId, ParamSet};
use crate::tensor::{Tape, Tensor, Var, LEAKY_SLOPE};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossGvpConfig {
    /// Number of GVP-G layers.
    pub layers: usize,
    /// Scalar hidden channels.
    pub scalar_dim: usize,
    /// Vector hidden channels.
    pub vector_dim: usize,
    /// Graph degree.
    pub k: usize,
    pub seed: u64,
}

impl Default for CrossGvpConfig {
    fn default() -> Self {
        CrossGvpConfig {
            layers: 3,
            scalar_dim: 64,
            vector_dim: 16,
            k: 27,
            seed: 0,
        }
    }
}

impl CrossGvpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.scalar_dim == 0 || self.vector_dim < 2 || self.k == 0 {
            return Err(Error::Config(format!(
                "cross-gvp needs layers >= 1, scalar_dim >= 1, vector_dim >= 2, k >= 1 (got {self:?})"
            )));
        }
        Ok(())
    }
}

/// Initial per-node state: zero scalars and the centered coordinates as a
/// single vector channel (`z` has shape `[n, 3, 1]`).
#[derive(Clone, Debug, PartialEq)]
pub struct NodeState {
    pub h: Tensor,
    pub z: Tensor,
}

pub fn init_states(cloud: &PointCloud, scalar_dim: usize) -> NodeState {
    let (centered, _) = center(cloud);
    let n = cloud.len();
    NodeState {
        h: Tensor::zeros(&[n, scalar_dim]),
        z: centered.to_tensor().reshape(&[n, 3, 1]).expect("n x 3"),
    }
}

/// Per-edge inputs, aligned with [`KnnGraph::centers`] and
/// [`KnnGraph::flat`]: `h` is `[E, 1]` holding `|x_j - x_i|` and `z` is
/// `[E, 3, 1]` holding `x_j - x_i`.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeFeatures {
    pub h: Tensor,
    pub z: Tensor,
}

pub fn edge_features(cloud: &PointCloud, graph: &KnnGraph) -> EdgeFeatures {
    let pts = cloud.points();
    let centers = graph.centers();
    let e = centers.len();
    let mut h = Vec::with_capacity(e);
    let mut z = Vec::with_capacity(3 * e);
    for (&i, &j) in centers.iter().zip(graph.flat()) {
        let d = pts[j] - pts[i];
        h.push(d.norm());
        z.extend_from_slice(&[d.x, d.y, d.z]);
    }
    EdgeFeatures {
        h: Tensor::new(vec![e, 1], h).expect("edge scalars"),
        z: Tensor::new(vec![e, 3, 1], z).expect("edge vectors"),
    }
}

/// One geometric vector perceptron.
#[derive(Clone, Debug)]
pub struct Gvp {
    w_h: ParamId,
    w_s: ParamId,
    b_s: ParamId,
    w_mu: ParamId,
    w_g: ParamId,
    b_g: ParamId,
    v_in: usize,
    hidden: usize,
    v_out: usize,
    s_out: usize,
}

impl Gvp {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        (s_in, v_in): (usize, usize),
        (s_out, v_out): (usize, usize),
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let hidden = v_in.max(v_out);
        Gvp {
            w_h: params.glorot(format!("{name}.w_h"), v_in, hidden, rng),
            w_s: params.glorot(format!("{name}.w_s"), s_in + hidden, s_out, rng),
            b_s: params.zeros(format!("{name}.b_s"), &[s_out]),
            w_mu: params.glorot(format!("{name}.w_mu"), hidden, v_out, rng),
            w_g: params.glorot(format!("{name}.w_g"), s_out, v_out, rng),
            b_g: params.zeros(format!("{name}.b_g"), &[v_out]),
            v_in,
            hidden,
            v_out,
            s_out,
        }
    }

    /// `s` is `[r, s_in]`, `z` is `[r, 3, v_in]`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, s: Var, z: Var) -> Result<(Var, Var)> {
        let r = tape.shape(s)[0];
        let zf = tape.reshape(z, &[r * 3, self.v_in])?;
        let vh = tape.matmul(zf, p.var(self.w_h))?;
        let vh3 = tape.reshape(vh, &[r, 3, self.hidden])?;
        let norms = tape.norm_axis(vh3, 1)?;
        let cat = tape.concat(&[s, norms], 1)?;
        let pre = tape.matmul(cat, p.var(self.w_s))?;
        let pre = tape.add(pre, p.var(self.b_s))?;
        let s_out = tape.leaky_relu(pre, LEAKY_SLOPE)?;

        let vmu = tape.matmul(vh, p.var(self.w_mu))?;
        let vmu = tape.reshape(vmu, &[r, 3, self.v_out])?;
        let gate = tape.matmul(s_out, p.var(self.w_g))?;
        let gate = tape.add(gate, p.var(self.b_g))?;
        let gate = tape.sigmoid(gate)?;
        let gate = tape.reshape(gate, &[r, 1, self.v_out])?;
        let z_out = tape.mul(vmu, gate)?;
        debug_assert_eq!(tape.shape(s_out)[1], self.s_out);
        Ok((s_out, z_out))
    }

    /// Message form: evaluates the perceptron on every edge `(i, j)` of
    /// `g` with scalar input `[h_i | h_j | h_ij]` and vector input
    /// `[Z_i ; Z_j ; Z_ij]`, returning `[E, s_out]` and `[E, 3, v_out]`.
    ///
    /// The weights are split by input block so the `i` and `j` products run
    /// per node rather than per edge; the result equals [`Gvp::forward`]
    /// on the concatenated inputs.
    pub fn forward_edges(
        &self,
        tape: &mut Tape,
        p: &Bound,
        h: Var,
        z: Var,
        g: &GraphInputs,
    ) -> Result<(Var, Var)> {
        let (n, d) = (tape.shape(h)[0], tape.shape(h)[1]);
        let nu = tape.shape(z)[2];
        let (k, e, hid) = (g.k, g.neighbors.len(), self.hidden);
        debug_assert_eq!(self.v_in, 2 * nu + 1);

        let w_h = p.var(self.w_h);
        let wa = tape.slice(w_h, 0, 0, nu)?;
        let wb = tape.slice(w_h, 0, nu, 2 * nu)?;
        let wc = tape.slice(w_h, 0, 2 * nu, 2 * nu + 1)?;
        let zf = tape.reshape(z, &[n * 3, nu])?;
        let va = tape.matmul(zf, wa)?;
        let va = tape.reshape(va, &[n, 1, 3, hid])?;
        let vb = tape.matmul(zf, wb)?;
        let vb = tape.reshape(vb, &[n, 3, hid])?;
        let vb = tape.gather(vb, &g.neighbors)?;
        let vb = tape.reshape(vb, &[n, k, 3, hid])?;
        let ez = tape.reshape(g.edge_z, &[e * 3, 1])?;
        let vc = tape.matmul(ez, wc)?;
        let vc = tape.reshape(vc, &[n, k, 3, hid])?;
        let vh = tape.add(vb, vc)?;
        let vh = tape.add(vh, va)?;
        let vh = tape.reshape(vh, &[e, 3, hid])?;
        let norms = tape.norm_axis(vh, 1)?;

        let w_s = p.var(self.w_s);
        let sa = tape.slice(w_s, 0, 0, d)?;
        let sb = tape.slice(w_s, 0, d, 2 * d)?;
        let sc = tape.slice(w_s, 0, 2 * d, 2 * d + 1)?;
        let sd = tape.slice(w_s, 0, 2 * d + 1, 2 * d + 1 + hid)?;
        let s_out_dim = self.s_out;
        let pa = tape.matmul(h, sa)?;
        let pa = tape.add(pa, p.var(self.b_s))?;
        let pa = tape.reshape(pa, &[n, 1, s_out_dim])?;
        let pb = tape.matmul(h, sb)?;
        let pb = tape.gather(pb, &g.neighbors)?;
        let pc = tape.matmul(g.edge_h, sc)?;
        let pd = tape.matmul(norms, sd)?;
        let pre = tape.add(pb, pc)?;
        let pre = tape.add(pre, pd)?;
        let pre = tape.reshape(pre, &[n, k, s_out_dim])?;
        let pre = tape.add(pre, pa)?;
        let pre = tape.reshape(pre, &[e, s_out_dim])?;
        let s_out = tape.leaky_relu(pre, LEAKY_SLOPE)?;

        let vh_flat = tape.reshape(vh, &[e * 3, hid])?;
        let vmu = tape.matmul(vh_flat, p.var(self.w_mu))?;
        let vmu = tape.reshape(vmu, &[e, 3, self.v_out])?;
        let gate = tape.matmul(s_out, p.var(self.w_g))?;
        let gate = tape.add(gate, p.var(self.b_g))?;
        let gate = tape.sigmoid(gate)?;
        let gate = tape.reshape(gate, &[e, 1, self.v_out])?;
        let z_out = tape.mul(vmu, gate)?;
        Ok((s_out, z_out))
    }
}

/// Message passing over a kNN graph followed by a node-wise update, both
/// residual.
#[derive(Clone, Debug)]
pub struct GvpGLayer {
    message: Gvp,
    update: Gvp,
}

/// Graph and edge inputs bound to a tape.
#[derive(Clone, Debug)]
pub struct GraphInputs {
    neighbors: Vec<usize>,
    k: usize,
    edge_h: Var,
    edge_z: Var,
}

impl GraphInputs {
    pub fn new(tape: &mut Tape, graph: &KnnGraph, edges: &EdgeFeatures) -> Self {
        GraphInputs {
            neighbors: graph.flat().to_vec(),
            k: graph.k(),
            edge_h: tape.constant(edges.h.clone()),
            edge_z: tape.constant(edges.z.clone()),
        }
    }
}

impl GvpGLayer {
    pub fn new(params: &mut ParamSet, name: &str, d: usize, nu: usize, rng: &mut ChaCha8Rng) -> Self {
        GvpGLayer {
            message: Gvp::new(params, &format!("{name}.msg"), (2 * d + 1, 2 * nu + 1), (d, nu), rng),
            update: Gvp::new(params, &format!("{name}.upd"), (d, nu), (d, nu), rng),
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        (h, z): (Var, Var),
        g: &GraphInputs,
    ) -> Result<(Var, Var)> {
        let n = tape.shape(h)[0];
        let (d, nu) = (tape.shape(h)[1], tape.shape(z)[2]);
        let (ms, mv) = self.message.forward_edges(tape, p, h, z, g)?;

        let ms = tape.reshape(ms, &[n, g.k, d])?;
        let ms = tape.mean_axis(ms, 1)?;
        let mv = tape.reshape(mv, &[n, g.k, 3, nu])?;
        let mv = tape.mean_axis(mv, 1)?;
        let h = tape.add(h, ms)?;
        let z = tape.add(z, mv)?;

        let (us, uv) = self.update.forward(tape, p, h, z)?;
        Ok((tape.add(h, us)?, tape.add(z, uv)?))
    }
}

/// Two-layer perceptron `d -> d -> d` with a leaky activation in between.
#[derive(Clone, Debug)]
struct Mlp2 {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

impl Mlp2 {
    fn new(params: &mut ParamSet, name: &str, d: usize, rng: &mut ChaCha8Rng) -> Self {
        Mlp2 {
            w1: params.glorot(format!("{name}.w1"), d, d, rng),
            b1: params.zeros(format!("{name}.b1"), &[d]),
            w2: params.glorot(format!("{name}.w2"), d, d, rng),
            b2: params.zeros(format!("{name}.b2"), &[d]),
        }
    }

    fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let a = tape.matmul(x, p.var(self.w1))?;
        let a = tape.add(a, p.var(self.b1))?;
        let a = tape.leaky_relu(a, LEAKY_SLOPE)?;
        let b = tape.matmul(a, p.var(self.w2))?;
        Ok(tape.add(b, p.var(self.b2))?)
    }
}

/// Single-head attention from each shape over the other's scalar channels.
#[derive(Clone, Debug)]
pub struct CrossAttention {
    w: ParamId,
    query: Mlp2,
    key: Mlp2,
}

impl CrossAttention {
    pub fn new(params: &mut ParamSet, name: &str, d: usize, rng: &mut ChaCha8Rng) -> Self {
        CrossAttention {
            w: params.glorot(format!("{name}.w"), d, d, rng),
            query: Mlp2::new(params, &format!("{name}.q"), d, rng),
            key: Mlp2::new(params, &format!("{name}.k"), d, rng),
        }
    }

    /// Attention weights of every row of `h_q` over the rows of `h_k`.
    pub fn weights(&self, tape: &mut Tape, p: &Bound, h_q: Var, h_k: Var) -> Result<Var> {
        let q = self.query.forward(tape, p, h_q)?;
        let k = self.key.forward(tape, p, h_k)?;
        let kt = tape.transpose(k)?;
        let logits = tape.matmul(q, kt)?;
        Ok(tape.softmax(logits, 1)?)
    }

    fn attend(&self, tape: &mut Tape, p: &Bound, h_q: Var, h_k: Var) -> Result<Var> {
        let a = self.weights(tape, p, h_q, h_k)?;
        let values = tape.matmul(h_k, p.var(self.w))?;
        Ok(tape.matmul(a, values)?)
    }

    /// Returns `(mu_x, mu_y)`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, h_x: Var, h_y: Var) -> Result<(Var, Var)> {
        Ok((self.attend(tape, p, h_x, h_y)?, self.attend(tape, p, h_y, h_x)?))
    }
}

/// `leaky_relu([h | mu] P)` with `P` of shape `[2d, d]`.
#[derive(Clone, Debug)]
pub struct Fuse {
    p: ParamId,
}

impl Fuse {
    pub fn new(params: &mut ParamSet, name: &str, d: usize, rng: &mut ChaCha8Rng) -> Self {
        Fuse {
            p: params.glorot(format!("{name}.p"), 2 * d, d, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, h: Var, mu: Var) -> Result<Var> {
        let cat = tape.concat(&[h, mu], 1)?;
        let out = tape.matmul(cat, p.var(self.p))?;
        Ok(tape.leaky_relu(out, LEAKY_SLOPE)?)
    }
}

/// Tape handles produced by [`CrossGvp::forward`]. `u_*` and `v_*` are
/// `[n, 3]`; `scalars` holds `(h_x, h_y)` after every layer.
#[derive(Clone, Debug)]
pub struct CrossGvpOutput {
    pub u_x: Var,
    pub v_x: Var,
    pub u_y: Var,
    pub v_y: Var,
    pub scalars: Vec<(Var, Var)>,
}

#[derive(Clone, Debug)]
pub struct CrossGvp {
    config: CrossGvpConfig,
    w_in: ParamId,
    layers: Vec<GvpGLayer>,
    attention: Vec<CrossAttention>,
    fuse: Vec<Fuse>,
    head: Gvp,
}

impl CrossGvp {
    /// Registers all weights in `params`, drawing from `rng`.
    pub fn new(config: CrossGvpConfig, params: &mut ParamSet, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let (d, nu) = (config.scalar_dim, config.vector_dim);
        let w_in = params.glorot("gvp.w_in", 1, nu, rng);
        let mut layers = Vec::new();
        let mut attention = Vec::new();
        let mut fuse = Vec::new();
        for l in 0..config.layers {
            layers.push(GvpGLayer::new(params, &format!("gvp.layer{l}"), d, nu, rng));
            attention.push(CrossAttention::new(params, &format!("gvp.attn{l}"), d, rng));
            fuse.push(Fuse::new(params, &format!("gvp.fuse{l}"), d, rng));
        }
        let head = Gvp::new(params, "gvp.head", (d, nu), (d, 2), rng);
        Ok(CrossGvp {
            config,
            w_in,
            layers,
            attention,
            fuse,
            head,
        })
    }

    /// Fresh network and parameters seeded from `config.seed`.
    pub fn init(config: CrossGvpConfig) -> Result<(Self, ParamSet)> {
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let net = Self::new(config, &mut params, &mut rng)?;
        Ok((net, params))
    }

    pub fn config(&self) -> &CrossGvpConfig {
        &self.config
    }

    fn embed(&self, tape: &mut Tape, p: &Bound, cloud: &PointCloud) -> Result<(Var, Var)> {
        let n = cloud.len();
        let st = init_states(cloud, self.config.scalar_dim);
        let h = tape.constant(st.h);
        let z = tape.constant(st.z.reshape(&[n * 3, 1])?);
        let z = tape.matmul(z, p.var(self.w_in))?;
        let z = tape.reshape(z, &[n, 3, self.config.vector_dim])?;
        Ok((h, z))
    }

    /// Runs the network on prebuilt graphs (degree must be `config.k`).
    pub fn forward_with_graphs(
        &self,
        tape: &mut Tape,
        p: &Bound,
        (x, gx): (&PointCloud, &KnnGraph),
        (y, gy): (&PointCloud, &KnnGraph),
    ) -> Result<CrossGvpOutput> {
        let ex = edge_features(x, gx);
        let ey = edge_features(y, gy);
        let ix = GraphInputs::new(tape, gx, &ex);
        let iy = GraphInputs::new(tape, gy, &ey);
        let mut sx = self.embed(tape, p, x)?;
        let mut sy = self.embed(tape, p, y)?;
        let mut scalars = Vec::with_capacity(self.layers.len());
        for ((layer, attn), fuse) in self.layers.iter().zip(&self.attention).zip(&self.fuse) {
            sx = layer.forward(tape, p, sx, &ix)?;
            sy = layer.forward(tape, p, sy, &iy)?;
            let (mx, my) = attn.forward(tape, p, sx.0, sy.0)?;
            sx.0 = fuse.forward(tape, p, sx.0, mx)?;
            sy.0 = fuse.forward(tape, p, sy.0, my)?;
            scalars.push((sx.0, sy.0));
        }
        let (_, zx) = self.head.forward(tape, p, sx.0, sx.1)?;
        let (_, zy) = self.head.forward(tape, p, sy.0, sy.1)?;
        let (u_x, v_x) = split_pair(tape, zx)?;
        let (u_y, v_y) = split_pair(tape, zy)?;
        Ok(CrossGvpOutput {
            u_x,
            v_x,
            u_y,
            v_y,
            scalars,
        })
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        x: &PointCloud,
        y: &PointCloud,
    ) -> Result<CrossGvpOutput> {
        let gx = knn_graph(x, self.config.k)?;
        let gy = knn_graph(y, self.config.k)?;
        self.forward_with_graphs(tape, p, (x, &gx), (y, &gy))
    }
}

/// `[n, 3, 2]` -> two `[n, 3]` tensors.
fn split_pair(tape: &mut Tape, z: Var) -> Result<(Var, Var)> {
    let n = tape.shape(z)[0];
    let u = tape.slice(z, 2, 0, 1)?;
    let v = tape.slice(z, 2, 1, 2)?;
    Ok((tape.reshape(u, &[n, 3])?, tape.reshape(v, &[n, 3])?))
}

/// LRF vectors `(u_x, v_x, u_y, v_y)`, each `[n, 3]`, evaluated without
/// gradients.
pub fn cross_gvp(
    net: &CrossGvp,
    params: &ParamSet,
    x: &PointCloud,
    y: &PointCloud,
) -> Result<[Tensor; 4]> {
    let mut tape = Tape::new();
    let p = params.bind(&mut tape, false);
    let out = net.forward(&mut tape, &p, x, y)?;
    Ok([out.u_x, out.v_x, out.u_y, out.v_y].map(|v| tape.value(v).clone()))
}
