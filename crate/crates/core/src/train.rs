//! AdamW with warmup + cosine decay, and the supervised, pretraining and
//! fine-tuning loops.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use rftensor::{Graph, Real, Tensor};
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{PoseError, Result};
use crate::matching::{total_loss_graph, LossWeights};
use crate::metrics::{pckh_eval, MetricsReport};
use crate::model::{frame_tensor, Model, Prediction};
use crate::params::{Component, ParamStore};
use crate::seed::{self, streams};
use crate::sim::RfFrame;
use crate::ssl::{make_mask, SslConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Supervised,
    Pretrain,
    Finetune,
}

impl Regime {
    pub fn as_str(self) -> &'static str {
        match self {
            Regime::Supervised => "supervised",
            Regime::Pretrain => "pretrain",
            Regime::Finetune => "finetune",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub regime: Regime,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    pub seed: u64,
    pub lambda_cls: f64,
    pub lambda_pose: f64,
}

impl TrainConfig {
    pub fn for_regime(regime: Regime) -> Self {
        let (base_lr, weight_decay, batch_size, total_epochs) = match regime {
            Regime::Supervised => (4e-4, 1e-4, 64, 30),
            Regime::Pretrain => (4e-5, 5e-2, 128, 90),
            Regime::Finetune => (4e-4, 5e-2, 64, 25),
        };
        let w = LossWeights::default();
        Self {
            regime,
            base_lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size,
            warmup_epochs: 10,
            total_epochs,
            seed: 0,
            lambda_cls: w.lambda_cls,
            lambda_pose: w.lambda_pose,
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            lambda_cls: self.lambda_cls,
            lambda_pose: self.lambda_pose,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(PoseError::Config(m.to_string()));
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return fail("base_lr must be a non-negative number");
        }
        if !(self.weight_decay >= 0.0) {
            return fail("weight_decay must be non-negative");
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return fail("betas must be in [0, 1)");
        }
        if !(self.eps > 0.0) {
            return fail("eps must be positive");
        }
        if self.batch_size == 0 {
            return fail("batch_size must be positive");
        }
        if self.total_epochs == 0 {
            return fail("total_epochs must be positive");
        }
        self.loss_weights().validate()
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::for_regime(Regime::Supervised)
    }
}

/// Learning rate at a (fractional) epoch: linear warmup from zero, then a
/// half-cosine from `base_lr` down to zero at `total_epochs`.
pub fn lr_at(epoch: f64, cfg: &TrainConfig) -> f64 {
    let (warm, total) = (cfg.warmup_epochs as f64, cfg.total_epochs as f64);
    if epoch < warm {
        return cfg.base_lr * epoch / warm;
    }
    let t = if total > warm {
        ((epoch - warm) / (total - warm)).clamp(0.0, 1.0)
    } else {
        1.0
    };
    cfg.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(store: &ParamStore<T>, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        let zeros: Vec<Vec<T>> = store
            .iter()
            .map(|p| vec![T::zero(); p.value.len()])
            .collect();
        Self {
            beta1,
            beta2,
            eps,
            weight_decay,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn from_config(store: &ParamStore<T>, cfg: &TrainConfig) -> Self {
        Self::new(store, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay)
    }

    pub fn moments(&self) -> (&[Vec<T>], &[Vec<T>]) {
        (&self.m, &self.v)
    }

    /// Decays every parameter by `1 - lr * wd`, then applies the
    /// bias-corrected Adam update. `grads` are aligned with the store.
    pub fn update(
        &mut self,
        store: &mut ParamStore<T>,
        grads: &[Tensor<T>],
        lr: f64,
    ) -> Result<()> {
        if grads.len() != store.len() {
            return Err(PoseError::InvalidInput(format!(
                "{} gradients for {} parameters",
                grads.len(),
                store.len()
            )));
        }
        for (param, grad) in store.iter().zip(grads) {
            if grad.shape() != param.value.shape() {
                return Err(PoseError::InvalidInput(format!(
                    "gradient for {} has shape {:?}, parameter is {:?}",
                    param.name,
                    grad.shape(),
                    param.value.shape()
                )));
            }
            if !grad.is_finite() {
                return Err(PoseError::Numerical(format!(
                    "non-finite gradient for {}",
                    param.name
                )));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c = |x: f64| T::from_f64_lossy(x);
        let (b1, b2) = (c(self.beta1), c(self.beta2));
        let (one_b1, one_b2) = (c(1.0 - self.beta1), c(1.0 - self.beta2));
        let bc1 = c(1.0 - self.beta1.powi(t));
        let bc2 = c(1.0 - self.beta2.powi(t));
        let decay = c(1.0 - lr * self.weight_decay);
        let (lr_t, eps) = (c(lr), c(self.eps));
        for (((value, grad), m), v) in store
            .values_mut()
            .zip(grads)
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            let data = value.data_mut();
            for i in 0..data.len() {
                let gi = grad.data()[i];
                data[i] *= decay;
                m[i] = b1 * m[i] + one_b1 * gi;
                v[i] = b2 * v[i] + one_b2 * gi * gi;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                data[i] -= lr_t * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Learning rate at the start of the epoch.
    pub lr: f64,
    pub loss: f64,
}

/// Loss curve as `epoch,lr,loss` CSV.
pub fn loss_csv(epochs: &[EpochLog]) -> String {
    let mut out = String::from("epoch,lr,loss\n");
    for e in epochs {
        out.push_str(&format!("{},{:e},{:e}\n", e.epoch, e.lr, e.loss));
    }
    out
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub epochs: Vec<EpochLog>,
    /// Parameters after the epoch with the lowest mean loss.
    pub best: ParamStore<f32>,
    pub best_epoch: usize,
}

/// Per-sample gradients summed in sample order, then divided by the count.
fn mean_gradients(per_sample: Vec<Vec<Tensor<f32>>>) -> Vec<Tensor<f32>> {
    let n = per_sample.len() as f32;
    let mut iter = per_sample.into_iter();
    let mut acc = iter.next().expect("non-empty batch");
    for sample in iter {
        for (a, g) in acc.iter_mut().zip(sample) {
            for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                *x += *y;
            }
        }
    }
    for a in acc.iter_mut() {
        for x in a.data_mut() {
            *x /= n;
        }
    }
    acc
}

fn collect_grads(
    store: &ParamStore<f32>,
    bound: &crate::params::Bound,
    mut grads: rftensor::Gradients<f32>,
) -> Vec<Tensor<f32>> {
    store
        .iter()
        .zip(bound.vars())
        .map(|(p, &v)| {
            grads
                .take(v)
                .unwrap_or_else(|| Tensor::zeros(p.value.shape()))
        })
        .collect()
}

/// Loss and parameter gradients of the set loss on one frame.
pub fn supervised_gradients(
    model: &Model<f32>,
    input: &Tensor<f32>,
    label: &crate::sim::FrameLabel,
    subgroups: &[usize],
    weights: &LossWeights,
) -> Result<(f64, Vec<Tensor<f32>>)> {
    let mut g = Graph::new();
    let p = model.store.bind(&mut g)?;
    let pred = model.forward(&mut g, &p, input, subgroups)?;
    let (loss, report) = total_loss_graph(&mut g, pred, label, weights)?;
    let grads = g.backward(loss.total)?;
    Ok((report.total, collect_grads(&model.store, &p, grads)))
}

fn shuffled(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed::rng(seed, streams::SHUFFLE, epoch as u64));
    order
}

/// Minibatch AdamW on the set loss. `on_epoch` sees each finished epoch.
pub fn train_supervised(
    model: &mut Model<f32>,
    data: &Dataset,
    cfg: &TrainConfig,
    subgroups: &[usize],
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(PoseError::InvalidInput("training set is empty".into()));
    }
    let subgroups = model.config.normalize_subgroups(subgroups)?;
    let weights = cfg.loss_weights();
    let inputs: Vec<Tensor<f32>> = data.frames.iter().map(frame_tensor).collect();
    let mut opt = AdamW::from_config(&model.store, cfg);
    let steps = data.len().div_ceil(cfg.batch_size);
    let mut epochs = Vec::with_capacity(cfg.total_epochs);
    let mut best = (f64::INFINITY, model.store.clone(), 0);
    for epoch in 0..cfg.total_epochs {
        let order = shuffled(data.len(), cfg.seed, epoch);
        let mut loss_sum = 0.0;
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            let results: Vec<(f64, Vec<Tensor<f32>>)> = batch
                .par_iter()
                .map(|&i| {
                    supervised_gradients(model, &inputs[i], &data.labels[i], &subgroups, &weights)
                })
                .collect::<Result<_>>()?;
            let mut per_sample = Vec::with_capacity(results.len());
            for (loss, grads) in results {
                loss_sum += loss;
                per_sample.push(grads);
            }
            let lr = lr_at(epoch as f64 + step as f64 / steps as f64, cfg);
            opt.update(&mut model.store, &mean_gradients(per_sample), lr)?;
        }
        let log = EpochLog {
            epoch: epoch + 1,
            lr: lr_at(epoch as f64, cfg),
            loss: loss_sum / data.len() as f64,
        };
        if !log.loss.is_finite() {
            return Err(PoseError::Numerical(format!(
                "loss diverged at epoch {}",
                log.epoch
            )));
        }
        if log.loss < best.0 {
            best = (log.loss, model.store.clone(), log.epoch);
        }
        on_epoch(&log);
        epochs.push(log);
    }
    Ok(TrainOutcome {
        epochs,
        best: best.1,
        best_epoch: best.2,
    })
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub epochs: Vec<EpochLog>,
    /// Distinct masked-patch counts seen over the run.
    pub masked_counts: Vec<usize>,
    /// Largest gradient norm reaching the target pass, over every step.
    pub max_target_grad_norm: f64,
    pub steps: usize,
}

struct SslSample {
    loss: f64,
    grads: Vec<Tensor<f32>>,
    masked: usize,
    target_grad_norm: f64,
}

fn ssl_sample(
    model: &Model<f32>,
    input: &Tensor<f32>,
    plan: &crate::ssl::MaskPlan,
) -> Result<SslSample> {
    let mut g = Graph::new();
    let p = model.store.bind(&mut g)?;
    let out = model.ssl_forward(&mut g, &p, input, plan)?;
    let mut grads = g.backward(out.loss)?;
    let target_grad_norm = [out.target_source, Some(out.targets)]
        .into_iter()
        .flatten()
        .filter_map(|v| grads.take(v))
        .map(|t| {
            t.data()
                .iter()
                .map(|&x| (x as f64) * (x as f64))
                .fold(0.0, |a, b| a + b)
        })
        .fold(0.0, |a, b| a + b)
        .sqrt();
    Ok(SslSample {
        loss: g.value(out.loss).item() as f64,
        grads: collect_grads(&model.store, &p, grads),
        masked: out.masked_count,
        target_grad_norm,
    })
}

/// Self-supervised pretraining of the encoder and reconstruction decoder.
/// Each sample gets its own mask plan derived from `(seed, epoch, sample)`.
pub fn pretrain_ssl(
    model: &mut Model<f32>,
    frames: &[RfFrame],
    cfg: &TrainConfig,
    ssl: &SslConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<PretrainOutcome> {
    cfg.validate()?;
    ssl.validate()?;
    if frames.is_empty() {
        return Err(PoseError::InvalidInput("pretraining set is empty".into()));
    }
    if model.config.subgroups() < 2 {
        return Err(PoseError::Config(
            "self-supervised pretraining needs at least two subgroups".into(),
        ));
    }
    let inputs: Vec<Tensor<f32>> = frames.iter().map(frame_tensor).collect();
    let mut opt = AdamW::from_config(&model.store, cfg);
    let steps = frames.len().div_ceil(cfg.batch_size);
    let mut outcome = PretrainOutcome {
        epochs: Vec::with_capacity(cfg.total_epochs),
        masked_counts: Vec::new(),
        max_target_grad_norm: 0.0,
        steps: 0,
    };
    for epoch in 0..cfg.total_epochs {
        let order = shuffled(frames.len(), cfg.seed, epoch);
        let mask_seed = seed::derive(cfg.seed, streams::MASK, epoch as u64);
        let mut loss_sum = 0.0;
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            let results: Vec<SslSample> = batch
                .par_iter()
                .map(|&i| {
                    let plan = make_mask(mask_seed, i as u64, &model.config, ssl.mask_ratio)?;
                    ssl_sample(model, &inputs[i], &plan)
                })
                .collect::<Result<_>>()?;
            let mut per_sample = Vec::with_capacity(results.len());
            for s in results {
                loss_sum += s.loss;
                if !outcome.masked_counts.contains(&s.masked) {
                    outcome.masked_counts.push(s.masked);
                }
                outcome.max_target_grad_norm = outcome.max_target_grad_norm.max(s.target_grad_norm);
                per_sample.push(s.grads);
            }
            let lr = lr_at(epoch as f64 + step as f64 / steps as f64, cfg);
            opt.update(&mut model.store, &mean_gradients(per_sample), lr)?;
            outcome.steps += 1;
        }
        let log = EpochLog {
            epoch: epoch + 1,
            lr: lr_at(epoch as f64, cfg),
            loss: loss_sum / frames.len() as f64,
        };
        if !log.loss.is_finite() {
            return Err(PoseError::Numerical(format!(
                "loss diverged at epoch {}",
                log.epoch
            )));
        }
        on_epoch(&log);
        outcome.epochs.push(log);
    }
    Ok(outcome)
}

/// Fresh pose model whose encoder is copied from `pretrained`.
pub fn finetune_init(
    config: crate::model::ModelConfig,
    pretrained: &ParamStore<f32>,
    seed: u64,
) -> Result<Model<f32>> {
    let mut model = Model::new_os(config, seed)?;
    model.store.load_from(pretrained, &[Component::RfEncoder])?;
    Ok(model)
}

pub fn predict_all(
    model: &Model<f32>,
    frames: &[RfFrame],
    subgroups: &[usize],
) -> Result<Vec<Prediction>> {
    frames
        .par_iter()
        .map(|f| model.predict(f, subgroups))
        .collect()
}

pub fn evaluate(
    model: &Model<f32>,
    data: &Dataset,
    subgroups: &[usize],
    threshold_factor: f64,
) -> Result<MetricsReport> {
    let preds = predict_all(model, &data.frames, subgroups)?;
    pckh_eval(&preds, &data.labels, threshold_factor)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_landmarks() {
        let cfg = TrainConfig::for_regime(Regime::Supervised);
        assert_eq!(lr_at(10.0, &cfg), 4e-4);
        assert_eq!(lr_at(30.0, &cfg), 0.0);
        assert!((lr_at(5.0, &cfg) - 2e-4).abs() < 1e-18);
        assert_eq!(lr_at(0.0, &cfg), 0.0);
    }

    #[test]
    fn regime_defaults() {
        let p = TrainConfig::for_regime(Regime::Pretrain);
        assert_eq!(
            (p.base_lr, p.weight_decay, p.batch_size, p.total_epochs),
            (4e-5, 5e-2, 128, 90)
        );
        let f = TrainConfig::for_regime(Regime::Finetune);
        assert_eq!(
            (f.base_lr, f.weight_decay, f.batch_size, f.total_epochs),
            (4e-4, 5e-2, 64, 25)
        );
        assert_eq!(f.warmup_epochs, 10);
    }

    #[test]
    fn csv_has_header_and_rows() {
        let csv = loss_csv(&[EpochLog {
            epoch: 1,
            lr: 0.5,
            loss: 2.0,
        }]);
        assert_eq!(csv, "epoch,lr,loss\n1,5e-1,2e0\n");
    }
}
