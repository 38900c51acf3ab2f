//! Optimizer, learning-rate schedule, training loop and thresholded evaluation.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::data::augment::{apply_policy, AugmentPolicy};
use crate::data::{self, argmax, mixup, sample_lambda, weighted_sampler, Dataset, Sample};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    /// Hold `base_lr` after warmup.
    #[default]
    Constant,
    /// Half-cosine decay from `base_lr` towards zero after warmup.
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub mixup_alpha: f64,
    pub seed: u64,
    pub schedule: Schedule,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            base_lr: 1e-3,
            warmup_epochs: 5,
            total_epochs: 100,
            batch_size: 8,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            mixup_alpha: 0.2,
            seed: 0,
            schedule: Schedule::Constant,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return fail(format!("base_lr must be positive, got {}", self.base_lr));
        }
        if self.total_epochs == 0 || self.warmup_epochs > self.total_epochs {
            return fail(format!(
                "need 0 ≤ warmup_epochs ≤ total_epochs and total_epochs ≥ 1, got {} and {}",
                self.warmup_epochs, self.total_epochs
            ));
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1".into());
        }
        if !(self.weight_decay >= 0.0) {
            return fail(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return fail(format!("{name} must be in [0, 1), got {b}"));
            }
        }
        if !(self.eps > 0.0) {
            return fail(format!("eps must be positive, got {}", self.eps));
        }
        if !(self.mixup_alpha >= 0.0 && self.mixup_alpha.is_finite()) {
            return fail(format!("mixup_alpha must be non-negative, got {}", self.mixup_alpha));
        }
        Ok(())
    }
}

/// AdamW moments, one tensor per parameter, plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub t: u64,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(params: &[Tensor<T>]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect();
        OptimizerState { m: zeros(), v: zeros(), t: 0 }
    }
}

/// One AdamW update with decoupled weight decay:
/// `θ ← θ − lr·(m̂/(√v̂ + ε) + wd·θ)`.
pub fn adamw_step<T: Scalar>(
    params: &mut [Tensor<T>],
    grads: &[Tensor<T>],
    state: &mut OptimizerState<T>,
    cfg: &TrainConfig,
    lr: f64,
) -> Result<()> {
    if !(lr > 0.0) {
        return Err(Error::InvalidArgument(format!("learning rate must be positive, got {lr}")));
    }
    if grads.len() != params.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::shape(
            "adamw_step",
            format!("{} params, {} grads, {} moments", params.len(), grads.len(), state.m.len()),
        ));
    }
    for (i, ((p, g), (m, v))) in params.iter().zip(grads).zip(state.m.iter().zip(&state.v)).enumerate() {
        if p.shape() != g.shape() || p.shape() != m.shape() || p.shape() != v.shape() {
            return Err(Error::shape("adamw_step", format!("parameter {i}: {:?} vs grad {:?}", p.shape(), g.shape())));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
    let c1 = T::of(1.0 - cfg.beta1.powi(t));
    let c2 = T::of(1.0 - cfg.beta2.powi(t));
    let (lr, wd, eps) = (T::of(lr), T::of(cfg.weight_decay), T::of(cfg.eps));
    for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(state.m.iter_mut().zip(state.v.iter_mut())) {
        let pd = p.data_mut();
        let md = m.data_mut();
        let vd = v.data_mut();
        for (j, &gj) in g.data().iter().enumerate() {
            md[j] = b1 * md[j] + (T::one() - b1) * gj;
            vd[j] = b2 * vd[j] + (T::one() - b2) * gj * gj;
            let mhat = md[j] / c1;
            let vhat = vd[j] / c2;
            pd[j] -= lr * (mhat / (vhat.sqrt() + eps) + wd * pd[j]);
        }
    }
    Ok(())
}

/// Linear warmup to `base_lr` over `warmup_epochs`, then the configured schedule.
pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> f64 {
    let w = cfg.warmup_epochs;
    if epoch + 1 < w {
        return cfg.base_lr * (epoch + 1) as f64 / w as f64;
    }
    if epoch < w {
        return cfg.base_lr;
    }
    match cfg.schedule {
        Schedule::Constant => cfg.base_lr,
        Schedule::Cosine => {
            let span = cfg.total_epochs.saturating_sub(w).max(1) as f64;
            let frac = ((epoch - w) as f64 / span).min(1.0);
            cfg.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub mean_loss: f64,
    /// Fraction of the (augmented, mixed) stream whose argmax matched the
    /// argmax of its target.
    pub train_acc: f64,
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    rng
}

/// The training stream for one epoch: weighted draws, policy augmentation,
/// then mixup over consecutive pairs. Each pair `(a, b)` with coefficient λ
/// yields `mixup(a, b, λ)` and `mixup(b, a, λ)`; an odd last item passes
/// through unmixed.
pub fn epoch_stream<T: Scalar>(
    train: &Dataset<T>,
    cfg: &TrainConfig,
    policy: &AugmentPolicy,
    epoch: usize,
) -> Result<Vec<Sample<T>>> {
    let mut rng = epoch_rng(cfg.seed, epoch);
    let order = weighted_sampler(train, train.len(), rng.next_u64())?;
    let augmented = order
        .iter()
        .map(|&i| apply_policy(&train.samples[i], policy, rng.next_u64()))
        .collect::<Result<Vec<_>>>()?;
    let mut out = Vec::with_capacity(augmented.len());
    for pair in augmented.chunks(2) {
        match pair {
            [a, b] => {
                let lambda = sample_lambda(cfg.mixup_alpha, &mut rng)?;
                out.push(mixup(a, b, lambda)?);
                out.push(mixup(b, a, lambda)?);
            }
            [a] => out.push(a.clone()),
            _ => unreachable!(),
        }
    }
    Ok(out)
}

/// Loss and gradients for one batch. Gradients follow [`Model::params`] order.
pub fn loss_and_grads<T: Scalar>(
    model: &Model<T>,
    images: &Tensor<T>,
    targets: &Tensor<T>,
) -> Result<(T, Tensor<T>, Vec<Tensor<T>>)> {
    let mut g = Graph::new();
    let vars = model.bind(&mut g, true);
    let x = g.constant(images.clone());
    let logits = model.forward_graph(&mut g, &vars, x)?;
    let loss = g.soft_cross_entropy(logits, targets)?;
    g.backward(loss)?;
    let grads = vars
        .iter()
        .zip(model.params())
        .map(|(&v, p)| g.grad(v).unwrap_or_else(|| Tensor::zeros(p.shape().to_vec())))
        .collect();
    Ok((g.value(loss).data()[0], g.value(logits).clone(), grads))
}

/// One pass over an epoch stream, updating `model` and `state` in place.
pub fn train_epoch<T: Scalar>(
    model: &mut Model<T>,
    train: &Dataset<T>,
    cfg: &TrainConfig,
    policy: &AugmentPolicy,
    epoch: usize,
    state: &mut OptimizerState<T>,
) -> Result<EpochMetrics> {
    cfg.validate()?;
    if epoch >= cfg.total_epochs {
        return Err(Error::InvalidArgument(format!("epoch {epoch} ≥ total_epochs {}", cfg.total_epochs)));
    }
    let lr = lr_schedule(epoch, cfg);
    let stream = epoch_stream(train, cfg, policy, epoch)?;
    let k = train.num_classes();
    let (mut loss_sum, mut hits) = (0.0, 0usize);
    for chunk in stream.chunks(cfg.batch_size) {
        let (images, targets) = data::stack(chunk)?;
        let (loss, logits, grads) = loss_and_grads(model, &images, &targets)?;
        adamw_step(model.params_mut(), &grads, state, cfg, lr)?;
        loss_sum += loss.as_f64() * chunk.len() as f64;
        for (row, s) in logits.data().chunks(k).zip(chunk) {
            hits += usize::from(argmax(row) == s.class());
        }
    }
    Ok(EpochMetrics { mean_loss: loss_sum / stream.len() as f64, train_acc: hits as f64 / stream.len() as f64 })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub threshold: f64,
    pub total: usize,
    /// Correct means argmax equals the true class and the top probability is
    /// at least `threshold`.
    pub accuracy: f64,
    /// Argmax accuracy ignoring the threshold.
    pub argmax_accuracy: f64,
    /// `None` for classes absent from the evaluated set.
    pub per_class_accuracy: Vec<Option<f64>>,
    /// Predictions whose top probability fell below `threshold`.
    pub rejected_count: usize,
    /// `confusion[true][predicted]`, by argmax.
    pub confusion: Vec<Vec<usize>>,
    /// Indices of samples not counted correct.
    pub incorrect: Vec<usize>,
}

/// Batch size used for evaluation forwards; results do not depend on it.
const EVAL_BATCH: usize = 32;

/// Softmax probabilities for every sample, without augmentation.
pub fn predict<T: Scalar>(model: &Model<T>, ds: &Dataset<T>) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(ds.len());
    let k = model.config().num_classes;
    for start in (0..ds.len()).step_by(EVAL_BATCH) {
        let idx: Vec<usize> = (start..(start + EVAL_BATCH).min(ds.len())).collect();
        let (images, _) = ds.batch(&idx)?;
        let logits = model.forward(&images)?;
        for row in logits.data().chunks(k) {
            let z: Vec<f64> = row.iter().map(|v| v.as_f64()).collect();
            let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
            let s: f64 = e.iter().sum();
            out.push(e.into_iter().map(|v| v / s).collect());
        }
    }
    Ok(out)
}

pub fn evaluate<T: Scalar>(model: &Model<T>, val: &Dataset<T>, threshold: f64) -> Result<EvalReport> {
    if val.is_empty() {
        return Err(Error::Data("validation set is empty".into()));
    }
    Ok(report_from_probs(&predict(model, val)?, val, threshold)?)
}

/// Scores precomputed probabilities, so several thresholds can share one forward pass.
pub fn report_from_probs<T: Scalar>(probs: &[Vec<f64>], val: &Dataset<T>, threshold: f64) -> Result<EvalReport> {
    if !(0.0..1.0).contains(&threshold) {
        return Err(Error::InvalidArgument(format!("threshold must be in [0, 1), got {threshold}")));
    }
    let k = val.num_classes();
    let mut confusion = vec![vec![0usize; k]; k];
    let (mut correct, mut plain, mut rejected) = (0usize, 0usize, 0usize);
    let mut class_hits = vec![0usize; k];
    let mut incorrect = Vec::new();
    for (i, (p, s)) in probs.iter().zip(&val.samples).enumerate() {
        let (pred, truth) = (argmax(p), s.class());
        confusion[truth][pred] += 1;
        let confident = p[pred] >= threshold;
        if !confident {
            rejected += 1;
        }
        plain += usize::from(pred == truth);
        if pred == truth && confident {
            correct += 1;
            class_hits[truth] += 1;
        } else {
            incorrect.push(i);
        }
    }
    let n = probs.len();
    let per_class_accuracy = (0..k)
        .map(|c| {
            let total: usize = confusion[c].iter().sum();
            (total > 0).then(|| class_hits[c] as f64 / total as f64)
        })
        .collect();
    Ok(EvalReport {
        threshold,
        total: n,
        accuracy: correct as f64 / n as f64,
        argmax_accuracy: plain as f64 / n as f64,
        per_class_accuracy,
        rejected_count: rejected,
        confusion,
        incorrect,
    })
}

/// One JSON-lines metrics record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
    pub rejected: usize,
}

/// Trains for `cfg.total_epochs`, evaluating on `val` after every epoch and
/// handing each record to `on_epoch` together with the updated model.
pub fn fit<T: Scalar>(
    model: &mut Model<T>,
    train: &Dataset<T>,
    val: &Dataset<T>,
    cfg: &TrainConfig,
    policy: &AugmentPolicy,
    threshold: f64,
    mut on_epoch: impl FnMut(&EpochRecord, &Model<T>, &OptimizerState<T>) -> Result<()>,
) -> Result<OptimizerState<T>> {
    cfg.validate()?;
    if train.num_classes() != model.config().num_classes {
        return Err(Error::Config(format!(
            "dataset has {} classes, model outputs {}",
            train.num_classes(),
            model.config().num_classes
        )));
    }
    let mut state = OptimizerState::new(model.params());
    for epoch in 0..cfg.total_epochs {
        let m = train_epoch(model, train, cfg, policy, epoch, &mut state)?;
        let report = evaluate(model, val, threshold)?;
        let record = EpochRecord {
            epoch,
            lr: lr_schedule(epoch, cfg),
            train_loss: m.mean_loss,
            train_acc: m.train_acc,
            val_acc: report.accuracy,
            rejected: report.rejected_count,
        };
        on_epoch(&record, model, &state)?;
    }
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> TrainConfig {
        TrainConfig { weight_decay: 0.0, ..TrainConfig::default() }
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = vec![Tensor::<f64>::zeros([1])];
        let g = vec![Tensor::full([1], 1.0)];
        let mut s = OptimizerState::new(&p);
        adamw_step(&mut p, &g, &mut s, &cfg(), 0.1).unwrap();
        assert_eq!(s.t, 1);
        assert!((p[0].data()[0] + 0.1).abs() < 1e-7);
    }

    #[test]
    fn step_rejects_mismatch_and_bad_lr() {
        let mut p = vec![Tensor::<f64>::zeros([2])];
        let mut s = OptimizerState::new(&p);
        assert!(adamw_step(&mut p, &[Tensor::zeros([3])], &mut s, &cfg(), 0.1).is_err());
        assert!(adamw_step(&mut p, &[Tensor::zeros([2])], &mut s, &cfg(), 0.0).is_err());
        assert_eq!(s.t, 0);
    }

    #[test]
    fn schedule_examples() {
        let c = TrainConfig { base_lr: 1.0, ..TrainConfig::default() };
        assert_eq!(lr_schedule(0, &c), 0.2);
        assert_eq!(lr_schedule(4, &c), 1.0);
        assert_eq!(lr_schedule(50, &c), 1.0);
        let cos = TrainConfig { schedule: Schedule::Cosine, ..c.clone() };
        assert_eq!(lr_schedule(5, &cos), 1.0);
        assert!(lr_schedule(99, &cos) < 0.01);
        let none = TrainConfig { warmup_epochs: 0, ..c };
        assert_eq!(lr_schedule(0, &none), 1.0);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig { base_lr: 0.0, ..TrainConfig::default() },
            TrainConfig { warmup_epochs: 6, total_epochs: 5, ..TrainConfig::default() },
            TrainConfig { batch_size: 0, ..TrainConfig::default() },
            TrainConfig { beta2: 1.0, ..TrainConfig::default() },
            TrainConfig { mixup_alpha: -0.1, ..TrainConfig::default() },
        ] {
            assert!(bad.validate().is_err(), "{bad:?}");
        }
    }
}
