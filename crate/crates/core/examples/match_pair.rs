//! Dense matching with an untrained network, scored against the raw
//! nearest-coordinate baseline on rigidly moved targets.

use equishape::data::{generate_pair, ShapeSpec};
use equishape::matcher::{accuracy, avg_error, predict, EquiShape, ModelConfig};

fn nearest_coordinate(src: &[nalgebra::Point3<f64>], tgt: &[nalgebra::Point3<f64>]) -> Vec<usize> {
    src.iter()
        .map(|p| {
            (0..tgt.len())
                .min_by(|&a, &b| (tgt[a] - p).norm().total_cmp(&(tgt[b] - p).norm()))
                .unwrap()
        })
        .collect()
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let pair = generate_pair(&ShapeSpec::default(), 11)?;
    let gt = pair.gt.as_ref().unwrap();
    let (model, params) = EquiShape::init(ModelConfig { seed: 1, ..ModelConfig::default() })?;
    let pred = predict(&model, &params, &pair.source, &pair.target)?;
    let m = &pred.correspondence.matches;
    println!(
        "network:  acc(0.01) {:.3}  acc(0.05) {:.3}  err {:.4}",
        accuracy(m, gt, &pair.target, 0.01)?,
        accuracy(m, gt, &pair.target, 0.05)?,
        avg_error(m, gt, &pair.target)?
    );
    let raw = nearest_coordinate(pair.source.points(), pair.target.points());
    println!(
        "raw xyz:  acc(0.01) {:.3}  acc(0.05) {:.3}  err {:.4}",
        accuracy(&raw, gt, &pair.target, 0.01)?,
        accuracy(&raw, gt, &pair.target, 0.05)?,
        avg_error(&raw, gt, &pair.target)?
    );
    Ok(())
}
