//! Swapping the learned frames for covariance frames. The handcrafted
//! variant has no Cross-GVP and keeps the rest of the pipeline.

use equishape::data::{generate_pairs, ShapeSpec};
use equishape::matcher::{EquiShape, FrameSource, ModelConfig};
use equishape::train::evaluate;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let pairs = generate_pairs(&ShapeSpec::default(), 8, 5)?;
    for frames in [FrameSource::Learned, FrameSource::Covariance] {
        let (model, params) = EquiShape::init(ModelConfig { frames, ..ModelConfig::default() })?;
        let (a1, a5) = evaluate(&model, &params, &pairs)?;
        println!(
            "{frames:?}: {} parameter tensors, untrained acc(0.01) {a1:.3}, acc(0.05) {a5:.3}",
            params.len()
        );
    }
    Ok(())
}
