//! Point clouds, rigid motions, kNN graphs and local reference frames.

mod frames;
mod knn;
mod xyz;

pub use frames::{
    covariance_lrf, frames_from_vectors, gram_schmidt, gram_schmidt_stabilized, LrfSet, GS_EPS,
};
pub use knn::{knn_graph, knn_rows, knn_rows_with_gap, KnnGraph};
pub use xyz::{parse_xyz, read_xyz, write_xyz, write_xyz_rgb};
pub(crate) use xyz::atomic_write;

use nalgebra::{Matrix3, Point3, Quaternion, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("point {index} has a non-finite coordinate")]
    NonFinite { index: usize },
    #[error("k = {k} is out of range for {n} points (need 1 <= k < n)")]
    KOutOfRange { k: usize, n: usize },
    #[error("degenerate frame at point {index}: {reason}")]
    DegenerateFrame { index: usize, reason: &'static str },
    #[error("need at least {needed} points, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("rotation is not orthonormal with det +1 (error {error:e})")]
    NotARotation { error: f64 },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, GeometryError>;

/// Unordered set of 3D points.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    points: Vec<Point3<f64>>,
}

impl PointCloud {
    pub fn new(points: Vec<Point3<f64>>) -> Result<Self> {
        if let Some(index) = points
            .iter()
            .position(|p| !p.coords.iter().all(|c| c.is_finite()))
        {
            return Err(GeometryError::NonFinite { index });
        }
        Ok(PointCloud { points })
    }

    pub fn from_rows(rows: &[[f64; 3]]) -> Result<Self> {
        Self::new(rows.iter().map(|r| Point3::new(r[0], r[1], r[2])).collect())
    }

    pub fn points(&self) -> &[Point3<f64>] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// `n x 3` tensor of coordinates.
    pub fn to_tensor(&self) -> Tensor {
        let data = self.points.iter().flat_map(|p| [p.x, p.y, p.z]).collect();
        Tensor::new(vec![self.points.len(), 3], data).expect("n x 3")
    }

    /// Inverse of [`PointCloud::to_tensor`].
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        assert!(
            t.ndim() == 2 && t.shape()[1] == 3,
            "expected an n x 3 tensor"
        );
        Self::new(
            t.data()
                .chunks_exact(3)
                .map(|c| Point3::new(c[0], c[1], c[2]))
                .collect(),
        )
    }

    pub fn permuted(&self, order: &[usize]) -> PointCloud {
        PointCloud {
            points: order.iter().map(|&i| self.points[i]).collect(),
        }
    }

    pub fn scaled(&self, factor: f64) -> PointCloud {
        PointCloud {
            points: self.points.iter().map(|p| p * factor).collect(),
        }
    }
}

/// Rigid motion `p -> R p + t` with `R` in SO(3).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Se3Transform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

const ROTATION_TOL: f64 = 1e-10;

impl Se3Transform {
    pub fn identity() -> Self {
        Se3Transform {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let ortho = (rotation.transpose() * rotation - Matrix3::identity()).amax();
        let det = (rotation.determinant() - 1.0).abs();
        let error = ortho.max(det);
        if error > ROTATION_TOL {
            return Err(GeometryError::NotARotation { error });
        }
        Ok(Se3Transform {
            rotation,
            translation,
        })
    }

    pub fn translation(t: Vector3<f64>) -> Self {
        Se3Transform {
            rotation: Matrix3::identity(),
            translation: t,
        }
    }

    pub fn apply_point(&self, p: &Point3<f64>) -> Point3<f64> {
        Point3::from(self.rotation * p.coords + self.translation)
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Se3Transform) -> Se3Transform {
        Se3Transform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Se3Transform {
        let rt = self.rotation.transpose();
        Se3Transform {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }
}

pub fn apply_se3(g: &Se3Transform, cloud: &PointCloud) -> PointCloud {
    PointCloud {
        points: cloud.points.iter().map(|p| g.apply_point(p)).collect(),
    }
}

/// Rotation drawn uniformly from SO(3) with Shoemake's quaternion method.
pub fn random_rotation<R: Rng + ?Sized>(rng: &mut R) -> Matrix3<f64> {
    let (u1, u2, u3): (f64, f64, f64) = (rng.gen(), rng.gen(), rng.gen());
    let tau = std::f64::consts::TAU;
    let (a, b) = ((1.0 - u1).sqrt(), u1.sqrt());
    let q = Quaternion::new(
        b * (tau * u3).cos(),
        a * (tau * u2).sin(),
        a * (tau * u2).cos(),
        b * (tau * u3).sin(),
    );
    UnitQuaternion::from_quaternion(q).to_rotation_matrix().into_inner()
}

pub fn random_se3_with<R: Rng + ?Sized>(rng: &mut R) -> Se3Transform {
    let rotation = random_rotation(rng);
    let translation = Vector3::new(
        rng.gen_range(-1.0..=1.0),
        rng.gen_range(-1.0..=1.0),
        rng.gen_range(-1.0..=1.0),
    );
    Se3Transform {
        rotation,
        translation,
    }
}

/// Uniform rotation and translation in `[-1, 1]^3`, deterministic per seed.
pub fn random_se3(seed: u64) -> Se3Transform {
    random_se3_with(&mut ChaCha8Rng::seed_from_u64(seed))
}

/// Mean-centered copy of the cloud and the centroid that was removed.
pub fn center(cloud: &PointCloud) -> (PointCloud, Vector3<f64>) {
    let n = cloud.len().max(1) as f64;
    let centroid = cloud
        .points
        .iter()
        .fold(Vector3::zeros(), |acc, p| acc + p.coords)
        / n;
    let points = cloud
        .points
        .iter()
        .map(|p| Point3::from(p.coords - centroid))
        .collect();
    (PointCloud { points }, centroid)
}

/// Centers the cloud and scales it so the farthest point lies at `radius`.
/// Returns the normalized cloud, the centroid and the applied scale.
pub fn normalize_radius(cloud: &PointCloud, radius: f64) -> (PointCloud, Vector3<f64>, f64) {
    let (centered, centroid) = center(cloud);
    let max_r = centered
        .points
        .iter()
        .map(|p| p.coords.norm())
        .fold(0.0, f64::max);
    let scale = if max_r > 0.0 { radius / max_r } else { 1.0 };
    (centered.scaled(scale), centroid, scale)
}

/// Largest pairwise Euclidean distance (exhaustive).
pub fn max_diameter(cloud: &PointCloud) -> Result<f64> {
    if cloud.len() < 2 {
        return Err(GeometryError::TooFewPoints {
            needed: 2,
            got: cloud.len(),
        });
    }
    let pts = &cloud.points;
    let mut best: f64 = 0.0;
    for i in 0..pts.len() {
        for j in i + 1..pts.len() {
            best = best.max((pts[i] - pts[j]).norm_squared());
        }
    }
    Ok(best.sqrt())
}
