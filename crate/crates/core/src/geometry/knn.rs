use std::cmp::Ordering;

use super::{GeometryError, PointCloud, Result};

/// Directed k-nearest-neighbor graph. Neighbor lists are sorted by
/// ascending distance with ties broken by lower index, and never contain
/// the node itself.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KnnGraph {
    k: usize,
    neighbors: Vec<usize>,
}

impl KnnGraph {
    /// Wraps precomputed neighbor lists (`n * k` entries, row-major).
    pub fn from_flat(k: usize, neighbors: Vec<usize>) -> Self {
        assert!(k > 0 && neighbors.len() % k == 0, "neighbor table shape");
        KnnGraph { k, neighbors }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn node_count(&self) -> usize {
        self.neighbors.len() / self.k
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i * self.k..(i + 1) * self.k]
    }

    /// All neighbor lists concatenated, `n * k` entries.
    pub fn flat(&self) -> &[usize] {
        &self.neighbors
    }

    /// Source node of every edge, aligned with [`KnnGraph::flat`].
    pub fn centers(&self) -> Vec<usize> {
        (0..self.node_count())
            .flat_map(|i| std::iter::repeat_n(i, self.k))
            .collect()
    }
}

/// Exact kNN over the Euclidean metric on `rows` (`n` rows of width `dim`).
///
/// Returns `n * k` neighbor indices. Callers guarantee `1 <= k < n`.
pub fn knn_rows(rows: &[f64], dim: usize, k: usize) -> Vec<usize> {
    knn_rows_with_gap(rows, dim, k).0
}

/// [`knn_rows`] plus the smallest margin, over all rows, between the
/// squared distance of the k-th neighbor and the next candidate. The
/// neighbor sets do not change while inputs move by less than this.
pub fn knn_rows_with_gap(rows: &[f64], dim: usize, k: usize) -> (Vec<usize>, f64) {
    let mut gap = f64::INFINITY;
    let n = rows.len() / dim;
    let mut out = Vec::with_capacity(n * k);
    let mut cand: Vec<(f64, usize)> = Vec::with_capacity(n);
    for i in 0..n {
        let ri = &rows[i * dim..(i + 1) * dim];
        cand.clear();
        for j in 0..n {
            if j == i {
                continue;
            }
            let rj = &rows[j * dim..(j + 1) * dim];
            let d: f64 = ri.iter().zip(rj).map(|(a, b)| (a - b) * (a - b)).sum();
            cand.push((d, j));
        }
        let cmp = |a: &(f64, usize), b: &(f64, usize)| {
            a.0.partial_cmp(&b.0)
                .unwrap_or(Ordering::Equal)
                .then(a.1.cmp(&b.1))
        };
        if k < cand.len() {
            cand.select_nth_unstable_by(k, cmp);
            let next = cand[k].0;
            cand.select_nth_unstable_by(k - 1, cmp);
            gap = gap.min(next - cand[k - 1].0);
        }
        let head = &mut cand[..k];
        head.sort_unstable_by(cmp);
        out.extend(head.iter().map(|c| c.1));
    }
    (out, gap)
}

pub fn knn_graph(cloud: &PointCloud, k: usize) -> Result<KnnGraph> {
    let n = cloud.len();
    if k == 0 || k >= n {
        return Err(GeometryError::KOutOfRange { k, n });
    }
    let rows: Vec<f64> = cloud.points().iter().flat_map(|p| [p.x, p.y, p.z]).collect();
    Ok(KnnGraph {
        k,
        neighbors: knn_rows(&rows, 3, k),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{apply_se3, random_se3};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_cloud(n: usize, seed: u64) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows: Vec<[f64; 3]> = (0..n)
            .map(|_| [rng.gen(), rng.gen(), rng.gen()])
            .collect();
        PointCloud::from_rows(&rows).unwrap()
    }

    /// Brute force: full sort of all candidates.
    fn oracle(cloud: &PointCloud, k: usize) -> Vec<Vec<usize>> {
        let p = cloud.points();
        (0..p.len())
            .map(|i| {
                let mut c: Vec<(f64, usize)> = (0..p.len())
                    .filter(|&j| j != i)
                    .map(|j| ((p[i] - p[j]).norm_squared(), j))
                    .collect();
                c.sort_by(|a, b| a.partial_cmp(b).unwrap());
                c.iter().take(k).map(|x| x.1).collect()
            })
            .collect()
    }

    #[test]
    fn collinear_example() {
        let c = PointCloud::from_rows(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [3.0, 0.0, 0.0]]).unwrap();
        let g = knn_graph(&c, 1).unwrap();
        assert_eq!(g.flat(), &[1, 0, 1]);
    }

    #[test]
    fn complete_graph_when_k_is_n_minus_one() {
        let c = random_cloud(6, 1);
        let g = knn_graph(&c, 5).unwrap();
        for i in 0..6 {
            let mut nb = g.neighbors(i).to_vec();
            nb.sort();
            let expected: Vec<usize> = (0..6).filter(|&j| j != i).collect();
            assert_eq!(nb, expected);
        }
    }

    #[test]
    fn k_out_of_range() {
        let c = random_cloud(4, 2);
        assert!(matches!(knn_graph(&c, 0), Err(GeometryError::KOutOfRange { .. })));
        assert!(matches!(knn_graph(&c, 4), Err(GeometryError::KOutOfRange { .. })));
    }

    #[test]
    fn ties_prefer_lower_index() {
        // points 1 and 2 are equidistant from 0
        let c = PointCloud::from_rows(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [-1.0, 0.0, 0.0], [5.0, 0.0, 0.0]])
            .unwrap();
        let g = knn_graph(&c, 2).unwrap();
        assert_eq!(g.neighbors(0), &[1, 2]);
    }

    #[test]
    fn matches_brute_force_and_is_sorted() {
        for seed in 0..5 {
            let c = random_cloud(60, seed);
            let g = knn_graph(&c, 7).unwrap();
            let o = oracle(&c, 7);
            for i in 0..60 {
                assert_eq!(g.neighbors(i), o[i].as_slice());
                assert!(!g.neighbors(i).contains(&i));
                let d: Vec<f64> = g
                    .neighbors(i)
                    .iter()
                    .map(|&j| (c.points()[i] - c.points()[j]).norm())
                    .collect();
                assert!(d.windows(2).all(|w| w[0] <= w[1]));
            }
        }
    }

    #[test]
    fn invariant_under_rigid_motion() {
        let c = random_cloud(80, 11);
        let g = knn_graph(&c, 10).unwrap();
        for seed in 0..10 {
            let moved = apply_se3(&random_se3(seed), &c);
            assert_eq!(knn_graph(&moved, 10).unwrap(), g);
        }
    }
}
