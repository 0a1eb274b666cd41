//! Trains a reduced model for a few epochs, saves it and reloads it.

use equishape::data::{generate_pairs, ShapeSpec};
use equishape::matcher::{predict, ModelConfig};
use equishape::train::{load_model_as, save_checkpoint, train, Checkpoint, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let pairs = generate_pairs(&ShapeSpec { points: 64, ..ShapeSpec::default() }, 24, 3)?;
    let cfg = TrainConfig {
        epochs: 3,
        batch_size: 4,
        lr_milestones: vec![],
        model: ModelConfig {
            k: 12,
            layers: 2,
            scalar_dim: 24,
            vector_dim: 8,
            lrf_dim: 24,
            edge_channels: vec![32, 64, 64],
            ..ModelConfig::default()
        },
        ..TrainConfig::default()
    };
    let out = train(&pairs, &cfg, |m| {
        println!(
            "epoch {}  loss {:.4} (cons {:.4}, map {:.4})  val acc(0.05) {:.3}",
            m.epoch, m.loss_total, m.loss_cons, m.loss_map, m.val_acc_005
        )
    })?;

    let path = std::env::temp_dir().join("equishape_example.eqlf");
    save_checkpoint(
        &path,
        &Checkpoint {
            model: cfg.model.clone(),
            train: Some(cfg.clone()),
            params: out.params.clone(),
            optimizer: Some(out.optimizer),
        },
    )?;
    let (model, params) = load_model_as(&path, &cfg.model)?;
    let p = &pairs[0];
    let a = predict(&out.model, &out.params, &p.source, &p.target)?;
    let b = predict(&model, &params, &p.source, &p.target)?;
    println!(
        "saved {}; reloaded descriptors differ by {:.1e}",
        path.display(),
        a.f_x.max_abs_diff(&b.f_x)
    );
    Ok(())
}
