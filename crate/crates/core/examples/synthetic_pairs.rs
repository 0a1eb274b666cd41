//! Generates articulated capsule pairs and writes a small dataset.

use equishape::data::{generate_dataset, generate_pair, Manifest, ShapeSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let spec = ShapeSpec::default();
    let pair = generate_pair(&spec, 7)?;
    let meta = pair.meta.as_ref().unwrap();
    println!(
        "{} points, largest joint rotation {:.3} rad, target moved by |t| = {:.3}",
        pair.source.len(),
        meta.deformation,
        meta.global.translation.norm()
    );

    // doubling the joint range gives the out-of-distribution split
    let ood = generate_pair(&spec.ood(), 7)?;
    println!("ood deformation {:.3} rad", ood.meta.unwrap().deformation);

    let dir = std::env::temp_dir().join("equishape_synthetic_example");
    let manifest = generate_dataset(&spec, 4, 1, &dir)?;
    let loaded = Manifest::read(&manifest)?.load_pairs()?;
    println!("wrote {} pairs under {}", loaded.len(), dir.display());
    Ok(())
}
