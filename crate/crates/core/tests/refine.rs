use equishape::data::{generate_pairs, ShapePair, ShapeSpec};
use equishape::geometry::{apply_se3, random_se3};
use equishape::matcher::{predict, total_loss, EquiShape, FrameSource, LossConfig, ModelConfig};
use equishape::refine::{
    coord_refine_baseline, lrf_refine, lrf_refine_pairs, trace_csv, RefineConfig, TRACE_HEADER,
};
use equishape::Error;

fn small_model() -> ModelConfig {
    ModelConfig {
        k: 8,
        layers: 2,
        scalar_dim: 16,
        vector_dim: 8,
        lrf_dim: 16,
        edge_channels: vec![32, 64],
        seed: 4,
        ..ModelConfig::default()
    }
}

fn pairs(count: usize, seed: u64) -> Vec<ShapePair> {
    generate_pairs(&ShapeSpec { points: 64, ..ShapeSpec::default() }, count, seed).unwrap()
}

fn tuned(steps: usize) -> RefineConfig {
    RefineConfig { steps, ..RefineConfig::tuned() }
}

#[test]
fn zero_steps_reproduce_the_pipeline() {
    let (model, params) = EquiShape::init(small_model()).unwrap();
    let p = &pairs(1, 1)[0];
    let cfg = LossConfig::default();
    let out = lrf_refine(&model, &params, &p.source, &p.target, &cfg, &tuned(0)).unwrap();
    let plain = predict(&model, &params, &p.source, &p.target).unwrap();
    assert_eq!(out.correspondence.matches, plain.correspondence.matches);
    assert_eq!(out.trace.len(), 1);
    assert_eq!(out.best_step, 0);
    assert_eq!(out.residual.max_abs(), 0.0);
    let base = total_loss(&model, &params, &p.source, &p.target, &cfg).unwrap().total;
    assert!((out.initial_loss() - base).abs() <= 1e-9 * base.max(1.0));
}

#[test]
fn parameters_stay_frozen() {
    let (model, params) = EquiShape::init(small_model()).unwrap();
    let before = params.clone();
    let p = &pairs(1, 2)[0];
    lrf_refine(&model, &params, &p.source, &p.target, &LossConfig::default(), &tuned(5)).unwrap();
    assert_eq!(params, before);
}

#[test]
fn best_iterate_never_worse_on_twenty_pairs() {
    let (model, params) = EquiShape::init(small_model()).unwrap();
    let set = pairs(20, 3);
    let outs = lrf_refine_pairs(&model, &params, &set, &LossConfig::default(), &tuned(8)).unwrap();
    for o in &outs {
        assert_eq!(o.trace.len(), 9);
        assert!(o.best_loss() <= o.initial_loss());
        let min = o.trace.iter().map(|s| s.loss.total).fold(f64::INFINITY, f64::min);
        assert_eq!(o.best_loss(), min);
    }
}

#[test]
fn zero_rate_keeps_residuals_at_zero() {
    let (model, params) = EquiShape::init(small_model()).unwrap();
    let p = &pairs(1, 4)[0];
    let cfg = RefineConfig { lr: 0.0, steps: 4, ..RefineConfig::paper() };
    let out = lrf_refine(&model, &params, &p.source, &p.target, &LossConfig::default(), &cfg).unwrap();
    assert_eq!(out.residual.max_abs(), 0.0);
    let first = out.trace[0].loss.total;
    assert!(out.trace.iter().all(|s| s.loss.total == first));
}

#[test]
fn trace_ignores_rigid_motions() {
    let (model, params) = EquiShape::init(small_model()).unwrap();
    let p = &pairs(1, 5)[0];
    let cfg = LossConfig::default();
    let a = lrf_refine(&model, &params, &p.source, &p.target, &cfg, &tuned(10)).unwrap();
    let gx = apply_se3(&random_se3(1), &p.source);
    let gy = apply_se3(&random_se3(2), &p.target);
    let b = lrf_refine(&model, &params, &gx, &gy, &cfg, &tuned(10)).unwrap();
    for (s, t) in a.trace.iter().zip(&b.trace) {
        assert!((s.loss.total - t.loss.total).abs() <= 1e-4, "step {}", s.step);
    }
}

#[test]
fn covariance_models_cannot_be_refined() {
    let cfg = ModelConfig { frames: FrameSource::Covariance, ..small_model() };
    let (model, params) = EquiShape::init(cfg).unwrap();
    let p = &pairs(1, 6)[0];
    let r = lrf_refine(&model, &params, &p.source, &p.target, &LossConfig::default(), &tuned(1));
    assert!(matches!(r, Err(Error::Config(_))));
}

#[test]
fn coordinate_baseline_cases() {
    let (model, params) = EquiShape::init(small_model()).unwrap();
    let p = &pairs(1, 7)[0];
    let cfg = LossConfig::default();
    let plain = predict(&model, &params, &p.source, &p.target).unwrap();
    let (gx, gy) = model.graphs(&p.source, &p.target).unwrap();
    let run = |steps| {
        coord_refine_baseline(
            (&p.source, &gx, &plain.f_x),
            (&p.target, &gy, &plain.f_y),
            &cfg,
            &tuned(steps),
        )
        .unwrap()
    };
    let zero = run(0);
    assert_eq!(zero.correspondence.matches, plain.correspondence.matches);
    let some = run(10);
    assert_eq!(some.trace.len(), 11);
    assert!(some.trace[some.best_step].loss.total <= some.trace[0].loss.total);
    // the offsets start where the descriptors leave the constructions
    assert!((some.trace[0].loss.total - zero.trace[0].loss.total).abs() < 1e-12);
}

#[test]
fn trace_csv_layout() {
    let (model, params) = EquiShape::init(small_model()).unwrap();
    let p = &pairs(1, 8)[0];
    let out = lrf_refine(&model, &params, &p.source, &p.target, &LossConfig::default(), &tuned(2)).unwrap();
    let csv = trace_csv(&out.trace);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], TRACE_HEADER);
    assert_eq!(lines.len(), 4);
    assert!(lines[1].starts_with("0,"));
    assert_eq!(lines[3].split(',').count(), 5);
}

#[test]
fn invalid_configs_rejected() {
    let (model, params) = EquiShape::init(small_model()).unwrap();
    let p = &pairs(1, 9)[0];
    let bad = RefineConfig { lr: f64::NAN, ..RefineConfig::paper() };
    let r = lrf_refine(&model, &params, &p.source, &p.target, &LossConfig::default(), &bad);
    assert!(matches!(r, Err(Error::Config(_))));
}
