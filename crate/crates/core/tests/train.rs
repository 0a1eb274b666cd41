use equishape::checks::tiny_model_config;
use equishape::data::{generate_pair, generate_pairs, ShapePair, ShapeSpec};
use equishape::geometry::{apply_se3, random_se3};
use equishape::matcher::{predict, total_loss, LossConfig, ModelConfig};
use equishape::tensor::Tensor;
use equishape::train::{
    adam_step, batch_gradients, load_checkpoint, load_model_as, save_checkpoint, train_split,
    AdamConfig, AdamState, Checkpoint, TrainConfig, CHECKPOINT_VERSION,
};
use equishape::Error;

fn tiny_config(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 1,
        batch_size: 1,
        model: tiny_model_config(seed),
        loss: LossConfig { k_latent: 3, ..LossConfig::default() },
        seed,
        ..TrainConfig::default()
    }
}

fn small_pairs(count: usize, seed: u64) -> Vec<ShapePair> {
    generate_pairs(&ShapeSpec { points: 32, ..ShapeSpec::default() }, count, seed).unwrap()
}

/// Scalar Adam recurrence written out by hand.
fn adam_oracle(x0: f64, grads: &[f64], lr: f64) -> f64 {
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
    let (mut x, mut m, mut v) = (x0, 0.0, 0.0);
    for (t, g) in grads.iter().enumerate() {
        let t = (t + 1) as i32;
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let mh = m / (1.0 - b1.powi(t));
        let vh = v / (1.0 - b2.powi(t));
        x -= lr * mh / (vh.sqrt() + eps);
    }
    x
}

#[test]
fn adam_matches_scalar_recurrence() {
    let x0 = [0.5, -1.25, 2.0];
    let g1 = [0.3, -2.0, 1e-3];
    let g2 = [-0.7, -1.0, 4.0];
    let mut values = vec![Tensor::from_vec(x0.to_vec())];
    let mut state = AdamState::new(&values);
    let cfg = AdamConfig::default();
    adam_step(&mut values, &[Tensor::from_vec(g1.to_vec())], &mut state, 1e-2, &cfg).unwrap();
    for i in 0..3 {
        let want = adam_oracle(x0[i], &[g1[i]], 1e-2);
        assert!((values[0].data()[i] - want).abs() <= 1e-12);
        // the first step moves by almost exactly lr against the sign
        assert!((values[0].data()[i] - (x0[i] - 1e-2 * g1[i].signum())).abs() < 1e-7);
    }
    adam_step(&mut values, &[Tensor::from_vec(g2.to_vec())], &mut state, 1e-2, &cfg).unwrap();
    for i in 0..3 {
        let want = adam_oracle(x0[i], &[g1[i], g2[i]], 1e-2);
        assert!((values[0].data()[i] - want).abs() <= 1e-12);
    }
}

#[test]
fn adam_zero_gradient_and_nan() {
    let mut values = vec![Tensor::from_vec(vec![1.0, 2.0])];
    let mut state = AdamState::new(&values);
    let cfg = AdamConfig::default();
    adam_step(&mut values, &[Tensor::from_vec(vec![0.0, 0.0])], &mut state, 0.1, &cfg).unwrap();
    assert_eq!(values[0].data(), &[1.0, 2.0]);

    let before = (values.clone(), state.clone());
    let r = adam_step(&mut values, &[Tensor::from_vec(vec![f64::NAN, 1.0])], &mut state, 0.1, &cfg);
    assert!(matches!(r, Err(Error::NonFinite(_))));
    assert_eq!((values, state), before);
}

#[test]
fn milestone_schedule() {
    let cfg = TrainConfig::default();
    assert_eq!(cfg.lr_milestones, vec![6, 9]);
    assert_eq!(cfg.lr_at(0), 3e-4);
    assert!((cfg.lr_at(6) - 3e-5).abs() < 1e-18);
    assert!((cfg.lr_at(10) - 3e-6).abs() < 1e-18);
    let bad = TrainConfig { lr_milestones: vec![9, 6], ..TrainConfig::default() };
    assert!(matches!(bad.validate(), Err(Error::Config(_))));
}

#[test]
fn a_few_epochs_on_one_pair_lower_the_loss() {
    let mut decreased = 0;
    for seed in 0..5 {
        let pair = small_pairs(1, seed).remove(0);
        let cfg = TrainConfig { epochs: 5, lr_milestones: vec![], ..tiny_config(seed) };
        let set = [pair.clone()];
        let fresh = equishape::matcher::EquiShape::init(cfg.model.clone()).unwrap();
        let before = total_loss(&fresh.0, &fresh.1, &pair.source, &pair.target, &cfg.loss).unwrap().total;
        let out = train_split(&set, &set, &cfg, |_| {}).unwrap();
        let after = total_loss(&out.model, &out.params, &pair.source, &pair.target, &cfg.loss).unwrap().total;
        if after < before {
            decreased += 1;
        }
    }
    assert!(decreased >= 4, "{decreased} of 5");
}

#[test]
fn training_is_deterministic() {
    let pairs = small_pairs(6, 3);
    let cfg = TrainConfig { epochs: 2, batch_size: 2, ..tiny_config(3) };
    let a = train_split(&pairs[..4], &pairs[4..], &cfg, |_| {}).unwrap();
    let b = train_split(&pairs[..4], &pairs[4..], &cfg, |_| {}).unwrap();
    assert_eq!(a.metrics, b.metrics);
    assert_eq!(a.params, b.params);
    assert_eq!(a.metrics.len(), 2);
    for m in &a.metrics {
        assert!((m.loss_total - (m.loss_cons + m.loss_map)).abs() < 1e-9);
    }
}

#[test]
fn mismatched_pair_sizes_are_rejected() {
    let mut pairs = small_pairs(2, 1);
    pairs.push(generate_pair(&ShapeSpec { points: 40, ..ShapeSpec::default() }, 9).unwrap());
    let r = train_split(&pairs, &pairs[..1], &tiny_config(1), |_| {});
    assert!(matches!(r, Err(Error::Data(_)) | Err(Error::Config(_))));
}

#[test]
fn batch_loss_and_gradients_ignore_rigid_motions() {
    let pairs = small_pairs(3, 5);
    let moved: Vec<ShapePair> = pairs
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let mut q = p.clone();
            q.source = apply_se3(&random_se3(40 + i as u64), &p.source);
            q.target = apply_se3(&random_se3(80 + i as u64), &p.target);
            q
        })
        .collect();
    let cfg = tiny_config(5);
    let (model, params) = equishape::matcher::EquiShape::init(cfg.model.clone()).unwrap();
    let refs: Vec<&ShapePair> = pairs.iter().collect();
    let mrefs: Vec<&ShapePair> = moved.iter().collect();
    let (la, ga) = batch_gradients(&model, &params, &refs, &cfg.loss).unwrap();
    let (lb, gb) = batch_gradients(&model, &params, &mrefs, &cfg.loss).unwrap();
    let sa: f64 = la.iter().map(|l| l.total).sum();
    let sb: f64 = lb.iter().map(|l| l.total).sum();
    assert!((sa - sb).abs() <= 1e-5);
    let norm = |g: &[Tensor]| g.iter().flat_map(|t| t.data()).map(|v| v * v).sum::<f64>().sqrt();
    let (na, nb) = (norm(&ga), norm(&gb));
    assert!((na - nb).abs() <= 1e-4 * na.max(1.0), "{na} vs {nb}");
}

fn trained_checkpoint() -> (Checkpoint, Vec<ShapePair>) {
    let pairs = small_pairs(3, 8);
    let cfg = TrainConfig { epochs: 1, batch_size: 2, ..tiny_config(8) };
    let out = train_split(&pairs[..2], &pairs[2..], &cfg, |_| {}).unwrap();
    let ck = Checkpoint {
        model: cfg.model.clone(),
        train: Some(cfg),
        params: out.params,
        optimizer: Some(out.optimizer),
    };
    (ck, pairs)
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.eqlf");
    let (ck, pairs) = trained_checkpoint();
    save_checkpoint(&path, &ck).unwrap();
    let loaded = load_checkpoint(&path).unwrap();
    assert_eq!(loaded.model, ck.model);
    assert_eq!(loaded.train, ck.train);
    assert_eq!(loaded.optimizer, ck.optimizer);
    // float32 payload: reloading and saving again is bit-exact
    assert_eq!(loaded.to_bytes().unwrap(), std::fs::read(&path).unwrap());
    for ((_, a), (_, b)) in loaded.params.iter().zip(ck.params.iter()) {
        for (x, y) in a.data().iter().zip(b.data()) {
            assert_eq!(*x, *y as f32 as f64);
        }
    }

    let (m0, p0) = ck.clone().into_model().unwrap();
    let (m1, p1) = load_model_as(&path, &ck.model).unwrap();
    let p = &pairs[0];
    let a = predict(&m0, &p0, &p.source, &p.target).unwrap();
    let b = predict(&m1, &p1, &p.source, &p.target).unwrap();
    assert!(a.f_x.max_abs_diff(&b.f_x) <= 1e-5);
    assert!(a.f_y.max_abs_diff(&b.f_y) <= 1e-5);
}

#[test]
fn corrupted_checkpoints_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.eqlf");
    let (ck, _) = trained_checkpoint();
    let bytes = ck.to_bytes().unwrap();

    let mut bad = bytes.clone();
    bad[0] = b'X';
    std::fs::write(&path, &bad).unwrap();
    let err = load_checkpoint(&path).unwrap_err();
    assert!(matches!(err, Error::Checkpoint(_)));
    assert!(err.to_string().contains("m.eqlf"), "{err}");

    let mut bad = bytes.clone();
    bad[4..8].copy_from_slice(&(CHECKPOINT_VERSION + 1).to_le_bytes());
    assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Checkpoint(_))));

    let err = Checkpoint::from_bytes(&bytes[..bytes.len() - 5]).unwrap_err();
    assert!(err.to_string().contains("truncated"), "{err}");

    save_checkpoint(&path, &ck).unwrap();
    let other = ModelConfig { scalar_dim: ck.model.scalar_dim + 1, ..ck.model.clone() };
    assert!(matches!(load_model_as(&path, &other), Err(Error::Checkpoint(_))));
}
