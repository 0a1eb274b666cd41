use nalgebra::{Matrix3, SymmetricEigen, Vector3};

use super::{GeometryError, KnnGraph, PointCloud, Result};
use crate::tensor::{self, Tape, Tensor, Var};

/// Denominator stabilizer of the differentiable Gram-Schmidt variant.
pub const GS_EPS: f64 = 1e-8;

/// Minimum norm accepted by the strict Gram-Schmidt variant.
const GS_MIN_NORM: f64 = 1e-8;

/// Minimum eigenvalue separation for an unambiguous covariance frame.
const EIGEN_GAP: f64 = 1e-10;

/// Per-point right-handed orthonormal frames. Column `a` of frame `i` is
/// the axis `e_{a+1}`.
#[derive(Clone, Debug, PartialEq)]
pub struct LrfSet {
    frames: Vec<Matrix3<f64>>,
}

impl LrfSet {
    pub fn new(frames: Vec<Matrix3<f64>>) -> Self {
        LrfSet { frames }
    }

    pub fn frames(&self) -> &[Matrix3<f64>] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// `n x 3 x 3` tensor with `t[i, b, a] = e_a[b]`.
    pub fn to_tensor(&self) -> Tensor {
        let mut data = Vec::with_capacity(self.frames.len() * 9);
        for f in &self.frames {
            for b in 0..3 {
                for a in 0..3 {
                    data.push(f[(b, a)]);
                }
            }
        }
        Tensor::new(vec![self.frames.len(), 3, 3], data).expect("n x 3 x 3")
    }

    pub fn from_tensor(t: &Tensor) -> Self {
        assert!(t.ndim() == 3 && t.shape()[1..] == [3, 3], "expected n x 3 x 3");
        let frames = t
            .data()
            .chunks_exact(9)
            .map(|c| Matrix3::from_row_slice(c))
            .collect();
        LrfSet { frames }
    }

    /// Worst violation of orthonormality, `det = +1` and `e3 = e1 x e2`.
    pub fn max_violation(&self) -> f64 {
        self.frames
            .iter()
            .map(|f| {
                let ortho = (f.transpose() * f - Matrix3::identity()).amax();
                let det = (f.determinant() - 1.0).abs();
                let e3 = f.column(0).cross(&f.column(1));
                let hand = (e3 - f.column(2)).amax();
                ortho.max(det).max(hand)
            })
            .fold(0.0, f64::max)
    }
}

/// Gram-Schmidt frame `[e1 e2 e3]` from two vectors; fails when `u` or the
/// component of `v` orthogonal to `u` is shorter than `1e-8`.
pub fn gram_schmidt(u: &Vector3<f64>, v: &Vector3<f64>) -> Result<Matrix3<f64>> {
    let nu = u.norm();
    if nu < GS_MIN_NORM {
        return Err(GeometryError::DegenerateFrame {
            index: 0,
            reason: "first vector is (nearly) zero",
        });
    }
    let e1 = u / nu;
    let w = v - e1 * v.dot(&e1);
    let nw = w.norm();
    if nw < GS_MIN_NORM {
        return Err(GeometryError::DegenerateFrame {
            index: 0,
            reason: "vectors are (nearly) parallel",
        });
    }
    let e2 = w / nw;
    Ok(Matrix3::from_columns(&[e1, e2, e1.cross(&e2)]))
}

/// Gram-Schmidt with `GS_EPS` added to both denominators; never fails.
pub fn gram_schmidt_stabilized(u: &Vector3<f64>, v: &Vector3<f64>) -> Matrix3<f64> {
    let e1 = u / (u.norm() + GS_EPS);
    let w = v - e1 * v.dot(&e1);
    let e2 = w / (w.norm() + GS_EPS);
    Matrix3::from_columns(&[e1, e2, e1.cross(&e2)])
}

/// Differentiable Gram-Schmidt over `n x 3` vector rows, producing the
/// `n x 3 x 3` frame tensor laid out as in [`LrfSet::to_tensor`].
pub fn frames_from_vectors(tape: &mut Tape, u: Var, v: Var) -> tensor::Result<Var> {
    let n = tape.shape(u)[0];
    let nu = tape.norm_axis(u, 1)?;
    let nu = tape.add_scalar(nu, GS_EPS)?;
    let nu = tape.reshape(nu, &[n, 1])?;
    let e1 = tape.div(u, nu)?;
    let ve = tape.mul(v, e1)?;
    let dot = tape.sum_axis(ve, 1)?;
    let dot = tape.reshape(dot, &[n, 1])?;
    let proj = tape.mul(e1, dot)?;
    let w = tape.sub(v, proj)?;
    let nw = tape.norm_axis(w, 1)?;
    let nw = tape.add_scalar(nw, GS_EPS)?;
    let nw = tape.reshape(nw, &[n, 1])?;
    let e2 = tape.div(w, nw)?;
    let e3 = tape.cross3(e1, e2)?;
    let cols: Vec<Var> = [e1, e2, e3]
        .into_iter()
        .map(|e| tape.reshape(e, &[n, 3, 1]))
        .collect::<tensor::Result<_>>()?;
    tape.concat(&cols, 2)
}

/// Handcrafted frame from the scatter of neighbor offsets `x_j - x_i`.
///
/// Axes are eigenvectors by descending eigenvalue. `e1` and `e3` are
/// flipped toward the side holding the majority of offsets (ties keep the
/// solver's sign) and `e2 = e3 x e1`.
pub fn covariance_lrf(cloud: &PointCloud, graph: &KnnGraph) -> Result<LrfSet> {
    let pts = cloud.points();
    if graph.node_count() != pts.len() {
        return Err(GeometryError::TooFewPoints {
            needed: graph.node_count(),
            got: pts.len(),
        });
    }
    let mut frames = Vec::with_capacity(pts.len());
    for (i, p) in pts.iter().enumerate() {
        let offsets: Vec<Vector3<f64>> = graph.neighbors(i).iter().map(|&j| pts[j] - p).collect();
        let mut cov = Matrix3::zeros();
        for o in &offsets {
            cov += o * o.transpose();
        }
        cov /= offsets.len() as f64;
        let eig = SymmetricEigen::new(cov);
        let mut order = [0usize, 1, 2];
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let vals = order.map(|a| eig.eigenvalues[a]);
        if vals[1] - vals[2] < EIGEN_GAP {
            return Err(GeometryError::DegenerateFrame {
                index: i,
                reason: "two smallest covariance eigenvalues coincide",
            });
        }
        let orient = |axis: Vector3<f64>| {
            let pos = offsets.iter().filter(|o| o.dot(&axis) > 0.0).count();
            let neg = offsets.iter().filter(|o| o.dot(&axis) < 0.0).count();
            if neg > pos {
                -axis
            } else {
                axis
            }
        };
        let e1 = orient(eig.eigenvectors.column(order[0]).into_owned());
        let e3 = orient(eig.eigenvectors.column(order[2]).into_owned());
        let e2 = e3.cross(&e1);
        frames.push(Matrix3::from_columns(&[e1, e2, e3]));
    }
    Ok(LrfSet { frames })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{apply_se3, knn_graph, random_rotation, random_se3};
    use crate::tensor::{grad_check, Tape};
    use nalgebra::Point3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(rng: &mut ChaCha8Rng) -> Vector3<f64> {
        Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn removes_parallel_component() {
        let f = gram_schmidt(&Vector3::new(2.0, 0.0, 0.0), &Vector3::new(1.0, 1.0, 0.0)).unwrap();
        assert!((f - Matrix3::identity()).amax() < 1e-15);
    }

    #[test]
    fn hand_evaluated_frame() {
        let f = gram_schmidt(&Vector3::new(0.0, 0.0, 3.0), &Vector3::new(0.0, 2.0, 0.0)).unwrap();
        let expected = Matrix3::from_columns(&[
            Vector3::new(0.0, 0.0, 1.0),
            Vector3::new(0.0, 1.0, 0.0),
            Vector3::new(-1.0, 0.0, 0.0),
        ]);
        assert!((f - expected).amax() < 1e-15);
    }

    #[test]
    fn strict_variant_rejects_degenerate_inputs() {
        let z = Vector3::zeros();
        let x = Vector3::new(1.0, 0.0, 0.0);
        assert!(gram_schmidt(&z, &x).is_err());
        assert!(gram_schmidt(&x, &(x * 3.0)).is_err());
        let f = gram_schmidt_stabilized(&x, &(x * 3.0));
        assert!(f.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn rotation_equivariance_and_reflection_flip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let (u, v) = (rand_vec(&mut rng), rand_vec(&mut rng));
            let base = gram_schmidt(&u, &v).unwrap();
            let r = random_rotation(&mut rng);
            let rotated = gram_schmidt(&(r * u), &(r * v)).unwrap();
            assert!((rotated - r * base).amax() <= 1e-10);

            let m = r * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -1.0));
            let reflected = gram_schmidt(&(m * u), &(m * v)).unwrap();
            let mb = m * base;
            assert!((reflected.column(0) - mb.column(0)).amax() <= 1e-10);
            assert!((reflected.column(1) - mb.column(1)).amax() <= 1e-10);
            assert!((reflected.column(2) + mb.column(2)).amax() <= 1e-10);
            assert!(LrfSet::new(vec![base]).max_violation() <= 1e-12);
        }
    }

    #[test]
    fn tape_variant_matches_plain_and_has_correct_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 5;
        let u: Vec<Vector3<f64>> = (0..n).map(|_| rand_vec(&mut rng)).collect();
        let v: Vec<Vector3<f64>> = (0..n).map(|_| rand_vec(&mut rng)).collect();
        let ut = Tensor::new(vec![n, 3], u.iter().flat_map(|x| x.iter().copied().collect::<Vec<_>>()).collect()).unwrap();
        let vt = Tensor::new(vec![n, 3], v.iter().flat_map(|x| x.iter().copied().collect::<Vec<_>>()).collect()).unwrap();
        let mut tape = Tape::new();
        let (a, b) = (tape.constant(ut.clone()), tape.constant(vt.clone()));
        let f = frames_from_vectors(&mut tape, a, b).unwrap();
        let frames = LrfSet::from_tensor(tape.value(f));
        for i in 0..n {
            let plain = gram_schmidt_stabilized(&u[i], &v[i]);
            assert!((frames.frames()[i] - plain).amax() <= 1e-14);
        }
        assert!(frames.max_violation() <= 1e-6);

        let w = Tensor::new(vec![n, 3, 3], (0..n * 9).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let report = grad_check(
            |t, v| {
                let f = frames_from_vectors(t, v[0], v[1])?;
                let w = t.mul(f, v[2])?;
                t.sum_all(w)
            },
            &[ut, vt, w],
        )
        .unwrap();
        assert!(report.passes(1e-4), "{report:?}");
    }

    fn patch_cloud(seed: u64) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // anisotropic blob: distinct spreads per axis, then a random pose
        let pts: Vec<Point3<f64>> = (0..60)
            .map(|_| {
                Point3::new(
                    rng.gen_range(-1.0..1.0) * 1.0,
                    rng.gen_range(-1.0..1.0) * 0.5,
                    rng.gen_range(-1.0..1.0) * 0.2,
                )
            })
            .collect();
        PointCloud::new(pts).unwrap()
    }

    #[test]
    fn covariance_frame_follows_dominant_axis() {
        let mut rows = vec![[0.0, 0.0, 0.0]];
        for (i, x) in [1.0, 2.0, 3.0, -1.5, 2.5].iter().enumerate() {
            let t = i as f64;
            rows.push([*x, 1e-3 * (t - 2.0), 3e-4 * (t * t - 2.0)]);
        }
        let c = PointCloud::from_rows(&rows).unwrap();
        let g = knn_graph(&c, 5).unwrap();
        let lrf = covariance_lrf(&c, &g).unwrap();
        let e1 = lrf.frames()[0].column(0);
        assert!((e1.x.abs() - 1.0).abs() < 1e-4);
        // majority of offsets point along +x
        assert!(e1.x > 0.0);
        assert!(lrf.max_violation() <= 1e-6);
    }

    #[test]
    fn covariance_frame_rejects_collinear_neighbors() {
        let c = PointCloud::from_rows(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0], [-1.0, 0.0, 0.0]])
            .unwrap();
        let g = knn_graph(&c, 3).unwrap();
        assert!(matches!(
            covariance_lrf(&c, &g),
            Err(GeometryError::DegenerateFrame { .. })
        ));
    }

    #[test]
    fn covariance_frames_are_rotation_equivariant() {
        for seed in 0..5 {
            let c = patch_cloud(seed);
            let g = knn_graph(&c, 12).unwrap();
            let base = covariance_lrf(&c, &g).unwrap();
            assert!(base.max_violation() <= 1e-6);
            let t = random_se3(seed + 50);
            let moved = apply_se3(&t, &c);
            let rotated = covariance_lrf(&moved, &knn_graph(&moved, 12).unwrap()).unwrap();
            let pts = c.points();
            let mpts = moved.points();
            for i in 0..c.len() {
                if !sign_stable(&c, &g, &base.frames()[i], i) {
                    continue;
                }
                let expected = t.rotation * base.frames()[i];
                assert!((rotated.frames()[i] - expected).amax() <= 1e-8, "point {i}");
                for &j in g.neighbors(i) {
                    let a = base.frames()[i].transpose() * (pts[j] - pts[i]);
                    let b = rotated.frames()[i].transpose() * (mpts[j] - mpts[i]);
                    assert!((a - b).amax() <= 1e-8);
                }
            }
        }
    }

    /// Frame whose sign votes are not tied and whose eigen-gaps are clear.
    fn sign_stable(c: &PointCloud, g: &KnnGraph, f: &Matrix3<f64>, i: usize) -> bool {
        let pts = c.points();
        [0, 2].iter().all(|&a| {
            let axis = f.column(a);
            let pos = g.neighbors(i).iter().filter(|&&j| (pts[j] - pts[i]).dot(&axis) > 1e-9).count();
            let neg = g.neighbors(i).iter().filter(|&&j| (pts[j] - pts[i]).dot(&axis) < -1e-9).count();
            pos != neg && pos + neg == g.k()
        })
    }
}
