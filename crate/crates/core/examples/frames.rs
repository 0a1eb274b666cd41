//! Local reference frames: Gram-Schmidt from two vectors and the
//! covariance baseline, both following rotations of the input.

use equishape::geometry::{
    apply_se3, covariance_lrf, gram_schmidt, knn_graph, random_rotation, random_se3, PointCloud,
};
use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let u = Vector3::new(1.0, 0.2, 0.0);
    let v = Vector3::new(0.3, 1.0, 0.5);
    let frame = gram_schmidt(&u, &v)?;
    println!("frame =\n{frame:.4}det = {:.12}", frame.determinant());

    let r = random_rotation(&mut ChaCha8Rng::seed_from_u64(3));
    let rotated = gram_schmidt(&(r * u), &(r * v))?;
    println!("|GS(Ru, Rv) - R GS(u, v)| = {:.2e}", (rotated - r * frame).abs().max());

    let pair = equishape::data::generate_pair(&Default::default(), 0)?;
    let cloud: &PointCloud = &pair.source;
    let lrf = covariance_lrf(cloud, &knn_graph(cloud, 27)?)?;
    let g = random_se3(5);
    let moved = apply_se3(&g, cloud);
    let lrf_moved = covariance_lrf(&moved, &knn_graph(&moved, 27)?)?;
    let worst = lrf
        .frames()
        .iter()
        .zip(lrf_moved.frames())
        .map(|(a, b)| (g.rotation * a - b).abs().max())
        .fold(0.0, f64::max);
    println!(
        "covariance frames on {} points: orthonormality violation {:.1e}, rotation error {:.1e}",
        lrf.len(),
        lrf.max_violation(),
        worst
    );
    Ok(())
}
