//! Test-time refinement of the learned frames on one out-of-distribution
//! pair, next to the coordinate-space baseline.

use equishape::data::{generate_pair, ShapeSpec};
use equishape::matcher::{accuracy, predict, EquiShape, LossConfig, ModelConfig};
use equishape::refine::{coord_refine_baseline, lrf_refine, RefineConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let pair = generate_pair(&ShapeSpec::default().ood(), 21)?;
    let gt = pair.gt.as_ref().unwrap();
    let model_cfg = ModelConfig {
        layers: 2,
        scalar_dim: 32,
        vector_dim: 8,
        lrf_dim: 32,
        edge_channels: vec![64, 64, 128],
        ..ModelConfig::default()
    };
    let (model, params) = EquiShape::init(model_cfg)?;
    let loss = LossConfig::default();
    let cfg = RefineConfig { steps: 30, ..RefineConfig::tuned() };
    let acc = |m: &[usize]| accuracy(m, gt, &pair.target, 0.05);

    let plain = predict(&model, &params, &pair.source, &pair.target)?;
    let lrf = lrf_refine(&model, &params, &pair.source, &pair.target, &loss, &cfg)?;
    println!(
        "LRF-Refine: loss {:.4} -> {:.4} (best step {}), acc(0.05) {:.3} -> {:.3}",
        lrf.initial_loss(),
        lrf.best_loss(),
        lrf.best_step,
        acc(&plain.correspondence.matches)?,
        acc(&lrf.correspondence.matches)?
    );

    let (gx, gy) = model.graphs(&pair.source, &pair.target)?;
    let coord = coord_refine_baseline(
        (&pair.source, &gx, &plain.f_x),
        (&pair.target, &gy, &plain.f_y),
        &loss,
        &cfg,
    )?;
    println!(
        "coordinates: loss {:.4} -> {:.4}, acc(0.05) {:.3}",
        coord.trace[0].loss.total,
        coord.trace[coord.best_step].loss.total,
        acc(&coord.correspondence.matches)?
    );
    Ok(())
}
