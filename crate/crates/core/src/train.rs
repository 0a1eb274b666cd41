//! Adam, the step schedule, the training loop and `.eqlf` checkpoints.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{split_indices, ShapePair};
use crate::error::{Error, Result};
use crate::geometry::atomic_write;
use crate::matcher::{accuracy, predict, EquiShape, LossBreakdown, LossConfig, ModelConfig};
use crate::params::ParamSet;
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments for a list of tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(like: &[Tensor]) -> Self {
        let zeros = || like.iter().map(|t| Tensor::zeros(t.shape())).collect();
        AdamState {
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

/// One bias-corrected Adam update. Nothing is modified when any gradient
/// is non-finite.
pub fn adam_step(
    values: &mut [Tensor],
    grads: &[Tensor],
    state: &mut AdamState,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    if values.len() != grads.len() || values.len() != state.m.len() {
        return Err(Error::Config(format!(
            "adam: {} values, {} gradients, {} moments",
            values.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (v, g)) in values.iter().zip(grads).enumerate() {
        if v.shape() != g.shape() {
            return Err(Error::Config(format!(
                "adam: gradient {i} has shape {:?}, value has {:?}",
                g.shape(),
                v.shape()
            )));
        }
        if !g.is_finite() {
            return Err(Error::NonFinite(format!("gradient of parameter {i}; step aborted")));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for i in 0..values.len() {
        let g = grads[i].data();
        let mut m = std::mem::replace(&mut state.m[i], Tensor::scalar(0.0)).into_data();
        let mut s = std::mem::replace(&mut state.v[i], Tensor::scalar(0.0)).into_data();
        let shape = values[i].shape().to_vec();
        let mut xd = std::mem::replace(&mut values[i], Tensor::scalar(0.0)).into_data();
        for j in 0..g.len() {
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
            s[j] = cfg.beta2 * s[j] + (1.0 - cfg.beta2) * g[j] * g[j];
            xd[j] -= lr * (m[j] / c1) / ((s[j] / c2).sqrt() + cfg.eps);
        }
        state.m[i] = Tensor::new(shape.clone(), m)?;
        state.v[i] = Tensor::new(shape.clone(), s)?;
        values[i] = Tensor::new(shape, xd)?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    /// Zero-based epochs at which the rate is multiplied by `lr_factor`.
    pub lr_milestones: Vec<usize>,
    pub lr_factor: f64,
    pub adam: AdamConfig,
    pub loss: LossConfig,
    pub model: ModelConfig,
    /// Shuffling and validation split seed.
    pub seed: u64,
    pub val_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 8,
            epochs: 30,
            lr: 3e-4,
            lr_milestones: vec![6, 9],
            lr_factor: 0.1,
            adam: AdamConfig::default(),
            loss: LossConfig::default(),
            model: ModelConfig::default(),
            seed: 0,
            val_fraction: 0.2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be finite and >= 0, got {}", self.lr)));
        }
        if self.lr_milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("lr_milestones must be strictly increasing".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config("val_fraction must lie in [0, 1)".into()));
        }
        Ok(())
    }

    /// Rate used during zero-based `epoch`: one factor per milestone at or
    /// before it.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let passed = self.lr_milestones.iter().filter(|&&m| m <= epoch).count();
        self.lr * self.lr_factor.powi(passed as i32)
    }
}

/// Means over one epoch. Loss columns are weighted by the lambdas, so
/// `loss_total = loss_cons + loss_map`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    /// One-based.
    pub epoch: usize,
    pub loss_total: f64,
    pub loss_cons: f64,
    pub loss_map: f64,
    pub val_acc_001: f64,
    pub val_acc_005: f64,
    pub lr: f64,
}

pub const METRICS_HEADER: &str = "epoch,loss_total,loss_cons,loss_map,val_acc_001,val_acc_005,lr";

pub fn metrics_csv(rows: &[EpochMetrics]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.epoch, r.loss_total, r.loss_cons, r.loss_map, r.val_acc_001, r.val_acc_005, r.lr
        );
    }
    out
}

pub fn write_metrics(path: &Path, rows: &[EpochMetrics]) -> Result<()> {
    Ok(atomic_write(path, metrics_csv(rows).as_bytes())?)
}

/// Loss breakdown and parameter gradients of one pair. Parameters that do
/// not reach the loss get zero gradients.
pub fn pair_gradients(
    model: &EquiShape,
    params: &ParamSet,
    pair: &ShapePair,
    cfg: &LossConfig,
) -> Result<(LossBreakdown, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let p = params.bind(&mut tape, true);
    let (_, l) = model.loss(&mut tape, &p, &pair.source, &pair.target, cfg)?;
    let breakdown = l.breakdown(&tape);
    if !breakdown.total.is_finite() {
        return Err(Error::NonFinite(format!("loss {}", breakdown.total)));
    }
    let grads = tape.backward(l.total)?;
    let out = p
        .vars()
        .iter()
        .zip(params.values())
        .map(|(&v, t)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    Ok((breakdown, out))
}

/// Summed loss and gradients over a batch. Pairs run in parallel; the
/// reduction runs in batch order so results do not depend on scheduling.
pub fn batch_gradients(
    model: &EquiShape,
    params: &ParamSet,
    batch: &[&ShapePair],
    cfg: &LossConfig,
) -> Result<(Vec<LossBreakdown>, Vec<Tensor>)> {
    let per_pair: Vec<(LossBreakdown, Vec<Tensor>)> = batch
        .par_iter()
        .map(|pair| pair_gradients(model, params, pair, cfg))
        .collect::<Result<_>>()?;
    let mut sums: Vec<Vec<f64>> = params.values().iter().map(|t| vec![0.0; t.len()]).collect();
    let mut losses = Vec::with_capacity(per_pair.len());
    for (l, grads) in per_pair {
        losses.push(l);
        for (s, g) in sums.iter_mut().zip(&grads) {
            for (a, b) in s.iter_mut().zip(g.data()) {
                *a += b;
            }
        }
    }
    let grads = sums
        .into_iter()
        .zip(params.values())
        .map(|(s, t)| Tensor::new(t.shape().to_vec(), s))
        .collect::<std::result::Result<_, _>>()?;
    Ok((losses, grads))
}

/// Mean acc(0.01) and acc(0.05) of hard matches over pairs with ground truth.
pub fn evaluate(model: &EquiShape, params: &ParamSet, pairs: &[ShapePair]) -> Result<(f64, f64)> {
    let scored: Vec<(f64, f64)> = pairs
        .par_iter()
        .filter_map(|pair| pair.gt.as_ref().map(|gt| (pair, gt)))
        .map(|(pair, gt)| {
            let pred = predict(model, params, &pair.source, &pair.target)?;
            let m = &pred.correspondence.matches;
            Ok((
                accuracy(m, gt, &pair.target, 0.01)?,
                accuracy(m, gt, &pair.target, 0.05)?,
            ))
        })
        .collect::<Result<_>>()?;
    if scored.is_empty() {
        return Ok((f64::NAN, f64::NAN));
    }
    let n = scored.len() as f64;
    Ok((
        scored.iter().map(|s| s.0).sum::<f64>() / n,
        scored.iter().map(|s| s.1).sum::<f64>() / n,
    ))
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: EquiShape,
    pub params: ParamSet,
    pub optimizer: AdamState,
    pub metrics: Vec<EpochMetrics>,
}

/// Splits `dataset` by `config.val_fraction` and trains on the rest.
pub fn train(
    dataset: &[ShapePair],
    config: &TrainConfig,
    on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainOutcome> {
    let (tr, va) = split_indices(dataset.len(), config.val_fraction, config.seed);
    let train_set: Vec<ShapePair> = tr.iter().map(|&i| dataset[i].clone()).collect();
    let val_set: Vec<ShapePair> = va.iter().map(|&i| dataset[i].clone()).collect();
    train_split(&train_set, &val_set, config, on_epoch)
}

/// Training with an explicit validation set.
pub fn train_split(
    train_set: &[ShapePair],
    val_set: &[ShapePair],
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainOutcome> {
    config.validate()?;
    let first = train_set
        .first()
        .ok_or_else(|| Error::Data("training set is empty".into()))?;
    let n = first.source.len();
    if let Some(bad) = train_set
        .iter()
        .chain(val_set)
        .position(|p| p.source.len() != n || p.target.len() != n)
    {
        return Err(Error::Data(format!(
            "pair {bad} does not have {n} points in both clouds"
        )));
    }
    if n <= config.model.k {
        return Err(Error::Config(format!("k = {} needs more than {n} points", config.model.k)));
    }

    let (model, mut params) = EquiShape::init(config.model.clone())?;
    let mut optimizer = AdamState::new(params.values());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut metrics = Vec::with_capacity(config.epochs);
    let cfg = &config.loss;

    for epoch in 0..config.epochs {
        let lr = config.lr_at(epoch);
        order.shuffle(&mut rng);
        let mut sum = (0.0, 0.0, 0.0);
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&ShapePair> = chunk.iter().map(|&i| &train_set[i]).collect();
            let (losses, grads) = batch_gradients(&model, &params, &batch, cfg)?;
            for l in &losses {
                sum.0 += l.total;
                sum.1 += l.construction(cfg);
                sum.2 += cfg.lambda_m * l.mapping();
            }
            adam_step(params.values_mut(), &grads, &mut optimizer, lr, &config.adam)?;
        }
        if let Some((i, _)) = params.iter().enumerate().find(|(_, (_, t))| !t.is_finite()) {
            return Err(Error::NonFinite(format!("parameter {i} after epoch {}", epoch + 1)));
        }
        let count = train_set.len() as f64;
        let (a1, a5) = evaluate(&model, &params, val_set)?;
        let row = EpochMetrics {
            epoch: epoch + 1,
            loss_total: sum.0 / count,
            loss_cons: sum.1 / count,
            loss_map: sum.2 / count,
            val_acc_001: a1,
            val_acc_005: a5,
            lr,
        };
        on_epoch(&row);
        metrics.push(row);
    }
    Ok(TrainOutcome {
        model,
        params,
        optimizer,
        metrics,
    })
}

const MAGIC: &[u8; 4] = b"EQLF";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    train: Option<TrainConfig>,
}

/// Contents of an `.eqlf` file.
///
/// Layout, all integers little-endian: `EQLF`, `u32` version, `u32` length
/// and JSON of the configuration, `u32` tensor count, then per tensor a
/// `u32` name length, the UTF-8 name, `u32` rank, `u32` dims and `f32`
/// values. A trailing byte flags optimizer state, stored as `u64` step and
/// `f64` first then second moments in parameter order.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub train: Option<TrainConfig>,
    pub params: ParamSet,
    pub optimizer: Option<AdamState>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut b = Vec::new();
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let header = serde_json::to_vec(&Header {
            model: self.model.clone(),
            train: self.train.clone(),
        })
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
        put_u32(&mut b, header.len());
        b.extend_from_slice(&header);
        put_u32(&mut b, self.params.len());
        for (name, t) in self.params.iter() {
            put_u32(&mut b, name.len());
            b.extend_from_slice(name.as_bytes());
            put_u32(&mut b, t.ndim());
            for &d in t.shape() {
                put_u32(&mut b, d);
            }
            for &x in t.data() {
                b.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
        match &self.optimizer {
            None => b.push(0),
            Some(s) => {
                b.push(1);
                b.extend_from_slice(&s.step.to_le_bytes());
                for t in s.m.iter().chain(&s.v) {
                    for &x in t.data() {
                        b.extend_from_slice(&x.to_le_bytes());
                    }
                }
            }
        }
        Ok(b)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4)?;
        if magic != MAGIC {
            return Err(Error::Checkpoint(format!(
                "bad magic {magic:?}, expected {MAGIC:?}; not an .eqlf checkpoint"
            )));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {version}, this build reads {CHECKPOINT_VERSION}"
            )));
        }
        let len = r.u32()? as usize;
        let header: Header = serde_json::from_slice(r.take(len)?)
            .map_err(|e| Error::Checkpoint(format!("config header: {e}")))?;
        let count = r.u32()? as usize;
        let mut params = ParamSet::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?
                .to_string();
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let size: usize = shape.iter().product();
            let raw = r.take(size.checked_mul(4).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect();
            params.add(name, Tensor::new(shape, data)?);
        }
        let optimizer = match r.take(1)?[0] {
            0 => None,
            1 => {
                let step = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
                let mut read = |t: &Tensor| -> Result<Tensor> {
                    let data = r
                        .take(t.len() * 8)?
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                        .collect();
                    Ok(Tensor::new(t.shape().to_vec(), data)?)
                };
                let m = params.values().iter().map(&mut read).collect::<Result<_>>()?;
                let v = params.values().iter().map(&mut read).collect::<Result<_>>()?;
                Some(AdamState { step, m, v })
            }
            f => return Err(Error::Checkpoint(format!("bad optimizer flag {f}"))),
        };
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes after the payload",
                bytes.len() - r.pos
            )));
        }
        Ok(Checkpoint {
            model: header.model,
            train: header.train,
            params,
            optimizer,
        })
    }

    /// Builds the model and checks every stored tensor against the
    /// parameter layout its configuration implies.
    pub fn into_model(self) -> Result<(EquiShape, ParamSet)> {
        let (model, fresh) = EquiShape::init(self.model.clone())?;
        check_layout(&fresh, &self.params)?;
        Ok((model, self.params))
    }
}

fn check_layout(expected: &ParamSet, got: &ParamSet) -> Result<()> {
    if expected.len() != got.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {} tensors, the configuration needs {}",
            got.len(),
            expected.len()
        )));
    }
    for ((en, et), (gn, gt)) in expected.iter().zip(got.iter()) {
        if en != gn || et.shape() != gt.shape() {
            return Err(Error::Checkpoint(format!(
                "tensor {gn} {:?} does not match {en} {:?} of the configuration",
                gt.shape(),
                et.shape()
            )));
        }
    }
    Ok(())
}

fn put_u32(b: &mut Vec<u8>, x: usize) {
    let x = u32::try_from(x).expect("checkpoint field exceeds u32");
    b.extend_from_slice(&x.to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Checkpoint(format!(
                "truncated file: needed {n} bytes at offset {}, {} remain",
                self.pos,
                self.bytes.len() - self.pos
            ))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn save_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<()> {
    Ok(atomic_write(path, &checkpoint.to_bytes()?)?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes).map_err(|e| match e {
        Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Loads a checkpoint and requires its architecture to equal `expected`.
pub fn load_model_as(path: &Path, expected: &ModelConfig) -> Result<(EquiShape, ParamSet)> {
    let ck = load_checkpoint(path)?;
    let (fresh_model, fresh) = EquiShape::init(expected.clone())?;
    check_layout(&fresh, &ck.params)?;
    if ck.model.frames != expected.frames || ck.model.k != expected.k {
        return Err(Error::Checkpoint(format!(
            "checkpoint was trained with frames {:?} and k {}, expected {:?} and {}",
            ck.model.frames, ck.model.k, expected.frames, expected.k
        )));
    }
    Ok((fresh_model, ck.params))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn milestone_schedule() {
        let c = TrainConfig::default();
        assert_eq!(c.lr_at(0), 3e-4);
        assert_eq!(c.lr_at(5), 3e-4);
        assert!((c.lr_at(6) - 3e-5).abs() < 1e-18);
        assert!((c.lr_at(10) - 3e-6).abs() < 1e-18);
    }

    #[test]
    fn adam_zero_gradient_keeps_values() {
        let mut x = vec![Tensor::from_vec(vec![1.0, -2.0])];
        let mut s = AdamState::new(&x);
        adam_step(&mut x, &[Tensor::zeros(&[2])], &mut s, 0.1, &AdamConfig::default()).unwrap();
        assert_eq!(x[0].data(), &[1.0, -2.0]);
    }

    #[test]
    fn adam_rejects_nan_without_mutation() {
        let mut x = vec![Tensor::from_vec(vec![1.0])];
        let mut s = AdamState::new(&x);
        let r = adam_step(&mut x, &[Tensor::from_vec(vec![f64::NAN])], &mut s, 0.1, &AdamConfig::default());
        assert!(matches!(r, Err(Error::NonFinite(_))));
        assert_eq!(s.step, 0);
        assert_eq!(x[0].data(), &[1.0]);
    }
}
