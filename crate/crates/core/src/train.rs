//! Optimizers, the learning-rate range test and the training loop.
//!
//! Everything here is deterministic for a fixed seed: the epoch shuffle comes
//! from one ChaCha8 stream, parameters are visited in name order, and every
//! reduction runs in a fixed order regardless of thread count.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::imgproc::{ImageTensor, Sample, CHANNELS};
use crate::loss::{mask_batch, LossConfig};
use crate::metrics::{self, Aggregation, MetricsReport};
use crate::nn::{BnUpdate, Mode, Model, ParamMap};
use crate::raster::Mask;
use crate::tensor::{sigmoid, Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    /// Heavy-ball SGD: `v = μ v + g`, `θ -= lr v`.
    Sgd { momentum: f64 },
    /// Adam with bias-corrected moments.
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub const ADAM: OptimizerKind = OptimizerKind::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 };

    pub fn name(&self) -> &'static str {
        match self {
            OptimizerKind::Sgd { .. } => "sgd",
            OptimizerKind::Adam { .. } => "adam",
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            OptimizerKind::Sgd { momentum } => (0.0..1.0).contains(&momentum),
            OptimizerKind::Adam { beta1, beta2, eps } => {
                (0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::ADAM
    }
}

/// Optimizer with per-parameter state, keyed by parameter name.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    step: u64,
    /// Velocity (SGD) or first moment (Adam).
    first: BTreeMap<String, Vec<f64>>,
    /// Second moment (Adam only).
    second: BTreeMap<String, Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind) -> Result<Self> {
        kind.validate()?;
        Ok(Optimizer { kind, step: 0, first: BTreeMap::new(), second: BTreeMap::new() })
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update with learning rate `lr`. Parameters without a
    /// gradient are left alone.
    pub fn step(&mut self, params: &mut ParamMap, grads: &BTreeMap<String, Tensor>, lr: f64) -> Result<()> {
        self.step += 1;
        for (name, g) in grads {
            let p = params.get_mut(name).ok_or_else(|| Error::Parameter {
                name: name.clone(),
                msg: "gradient for unknown parameter".into(),
            })?;
            if p.shape() != g.shape() {
                return Err(Error::Parameter {
                    name: name.clone(),
                    msg: format!("gradient shape {:?} != parameter shape {:?}", g.shape(), p.shape()),
                });
            }
            let n = g.numel();
            match self.kind {
                OptimizerKind::Sgd { momentum } => {
                    let v = self.first.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
                    for ((theta, vi), gi) in p.data_mut().iter_mut().zip(v.iter_mut()).zip(g.data()) {
                        *vi = momentum * *vi + gi;
                        *theta -= lr * *vi;
                    }
                }
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let t = self.step as i32;
                    let (c1, c2) = (1.0 - beta1.powi(t), 1.0 - beta2.powi(t));
                    let m = self.first.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
                    let v = self.second.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
                    for (((theta, mi), vi), &gi) in p.data_mut().iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g.data()) {
                        *mi = beta1 * *mi + (1.0 - beta1) * gi;
                        *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                        *theta -= lr * (*mi / c1) / ((*vi / c2).sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }

    /// State as named tensors under `optim.` for checkpoints.
    pub fn state_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = vec![("optim.step".to_string(), Tensor::scalar(self.step as f64))];
        let first = if matches!(self.kind, OptimizerKind::Sgd { .. }) { "velocity" } else { "m" };
        for (label, map) in [(first, &self.first), ("v", &self.second)] {
            for (name, data) in map {
                out.push((format!("optim.{label}.{name}"), Tensor::new(vec![data.len()], data.clone()).expect("1-D")));
            }
        }
        out
    }
}

/// Gradients of every bound parameter after `tape.backward`.
fn collect_grads(tape: &Tape, bound: &crate::nn::Bound) -> BTreeMap<String, Tensor> {
    bound.iter().filter_map(|(name, v)| tape.grad(v).map(|g| (name.to_string(), g))).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct LrRangeResult {
    pub suggested_lr: f64,
    /// Learning rate used at each recorded step.
    pub lrs: Vec<f64>,
    pub losses: Vec<f64>,
    /// Bias-corrected exponential moving average of `losses`.
    pub smoothed: Vec<f64>,
}

/// Smoothing factor of the range-test loss average.
pub const LR_EMA_DECAY: f64 = 0.9;
/// The sweep stops once the smoothed loss exceeds this multiple of its minimum.
pub const LR_DIVERGENCE_FACTOR: f64 = 4.0;

/// Sweeps the learning rate geometrically from `lr_min` to `lr_max` over
/// `steps` optimizer steps and suggests the rate where the smoothed loss
/// falls fastest against `ln(lr)`.
///
/// `loss_and_grad(params, step)` returns the loss and parameter gradients
/// for the step's batch. `params` is restored to its initial value on return,
/// whether or not the sweep succeeds.
pub fn lr_range_test<F>(
    params: &mut ParamMap,
    mut loss_and_grad: F,
    optimizer: OptimizerKind,
    lr_min: f64,
    lr_max: f64,
    steps: usize,
) -> Result<LrRangeResult>
where
    F: FnMut(&ParamMap, usize) -> Result<(f64, BTreeMap<String, Tensor>)>,
{
    if !(lr_min > 0.0 && lr_min < lr_max && lr_max.is_finite()) {
        return Err(Error::Config(format!("need 0 < lr_min < lr_max, got {lr_min} and {lr_max}")));
    }
    if steps < 10 {
        return Err(Error::Config(format!("range test needs at least 10 steps, got {steps}")));
    }
    let initial = params.clone();
    let result = sweep(params, &mut loss_and_grad, optimizer, lr_min, lr_max, steps);
    *params = initial;
    result
}

fn sweep<F>(params: &mut ParamMap, f: &mut F, kind: OptimizerKind, lr_min: f64, lr_max: f64, steps: usize) -> Result<LrRangeResult>
where
    F: FnMut(&ParamMap, usize) -> Result<(f64, BTreeMap<String, Tensor>)>,
{
    let mut opt = Optimizer::new(kind)?;
    let ratio = (lr_max / lr_min).ln() / (steps - 1) as f64;
    let (mut lrs, mut losses, mut smoothed) = (Vec::new(), Vec::new(), Vec::new());
    let (mut avg, mut best) = (0.0, f64::INFINITY);
    for i in 0..steps {
        let lr = lr_min * (ratio * i as f64).exp();
        let (loss, grads) = match f(params, i) {
            Ok(v) if v.0.is_finite() => v,
            Ok(_) | Err(Error::NonFinite(_)) if i == 0 => {
                return Err(Error::NonFiniteLoss { epoch: 0, phase: "range test", batch: 0 });
            }
            Ok(_) | Err(Error::NonFinite(_)) => break,
            Err(e) => return Err(e),
        };
        avg = LR_EMA_DECAY * avg + (1.0 - LR_EMA_DECAY) * loss;
        let s = avg / (1.0 - LR_EMA_DECAY.powi(i as i32 + 1));
        lrs.push(lr);
        losses.push(loss);
        smoothed.push(s);
        best = best.min(s);
        if s > LR_DIVERGENCE_FACTOR * best {
            break;
        }
        opt.step(params, &grads, lr)?;
    }

    // central differences at interior points; ln(lr) is evenly spaced
    let steepest = (1..smoothed.len().saturating_sub(1))
        .map(|i| (i, (smoothed[i + 1] - smoothed[i - 1]) / (2.0 * ratio)))
        .filter(|&(_, slope)| slope < 0.0)
        .min_by(|a, b| a.1.total_cmp(&b.1));
    let Some((idx, _)) = steepest else {
        return Err(Error::Config("range test found no region where the loss decreases".into()));
    };
    Ok(LrRangeResult { suggested_lr: lrs[idx], lrs, losses, smoothed })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
    pub loss: LossConfig,
    pub optimizer: OptimizerKind,
    /// Write a checkpoint after every this many epochs; 0 disables periodic
    /// checkpoints. The final epoch is always checkpointed when an output
    /// directory is given.
    pub checkpoint_every: usize,
    pub threshold: f64,
    pub aggregation: Aggregation,
    /// Fill the `wall_time_s` column of `curves.csv`. Off by default so
    /// that identical runs produce identical files.
    pub record_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 8,
            learning_rate: 1e-4,
            epochs: 100,
            seed: 0,
            loss: LossConfig::default(),
            optimizer: OptimizerKind::ADAM,
            checkpoint_every: 10,
            threshold: metrics::DEFAULT_THRESHOLD,
            aggregation: Aggregation::PerImage,
            record_wall_time: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config(format!("threshold must be in (0, 1), got {}", self.threshold)));
        }
        self.loss.validate()?;
        self.optimizer.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochReport {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_iou: f64,
    pub val_dice: f64,
    pub wall_time_s: Option<f64>,
}

pub const CURVES_HEADER: &str = "epoch,train_loss,val_loss,val_iou,val_dice,wall_time_s";

impl EpochReport {
    pub fn csv_row(&self) -> String {
        let wall = self.wall_time_s.map(|t| format!("{t:.3}")).unwrap_or_default();
        format!("{},{},{},{},{},{}", self.epoch, self.train_loss, self.val_loss, self.val_iou, self.val_dice, wall)
    }
}

/// Stacks images into a `B x 3 x H x W` tensor.
pub fn image_batch(images: &[&ImageTensor]) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| Error::shape("image_batch", "empty batch"))?;
    let (h, w) = (first.height(), first.width());
    let mut data = Vec::with_capacity(images.len() * CHANNELS * h * w);
    for img in images {
        if (img.height(), img.width()) != (h, w) {
            return Err(Error::shape("image_batch", format!("{}x{} vs {h}x{w}", img.height(), img.width())));
        }
        data.extend_from_slice(img.data());
    }
    Tensor::new(vec![images.len(), CHANNELS, h, w], data)
}

fn batch_tensors(samples: &[&Sample]) -> Result<(Tensor, Tensor)> {
    let images: Vec<&ImageTensor> = samples.iter().map(|s| &s.image).collect();
    let masks: Vec<&Mask> = samples.iter().map(|s| &s.mask).collect();
    Ok((image_batch(&images)?, mask_batch(&masks)?))
}

/// Mini-batch trainer holding the model, optimizer and shuffle stream.
pub struct Trainer<'m> {
    model: &'m mut Model,
    cfg: TrainConfig,
    optimizer: Optimizer,
    rng: ChaCha8Rng,
}

impl<'m> Trainer<'m> {
    pub fn new(model: &'m mut Model, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let optimizer = Optimizer::new(cfg.optimizer)?;
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Ok(Trainer { model, cfg, optimizer, rng })
    }

    pub fn model(&self) -> &Model {
        self.model
    }

    pub fn optimizer(&self) -> &Optimizer {
        &self.optimizer
    }

    /// One pass over `data` in a freshly shuffled order. Returns the
    /// sample-weighted mean training loss.
    pub fn train_epoch(&mut self, epoch: usize, data: &[Sample]) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::Config("training split is empty".into()));
        }
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut self.rng);
        let mut total = 0.0;
        for (batch, idx) in order.chunks(self.cfg.batch_size).enumerate() {
            let samples: Vec<&Sample> = idx.iter().map(|&i| &data[i]).collect();
            let loss = self.step(&samples).map_err(|e| non_finite(e, epoch, "train", batch))?;
            total += loss * samples.len() as f64;
        }
        Ok(total / data.len() as f64)
    }

    fn step(&mut self, samples: &[&Sample]) -> Result<f64> {
        let g = batch_gradients(self.model, samples, &self.cfg.loss)?;
        self.optimizer.step(self.model.params_mut(), &g.grads, self.cfg.learning_rate)?;
        if self.model.params().values().any(|p| p.data().iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite("optimizer step"));
        }
        self.model.apply_bn_updates(&g.bn_updates);
        Ok(g.loss)
    }

    /// Mean loss and segmentation scores on `data`, in eval mode.
    pub fn validate(&self, epoch: usize, data: &[Sample]) -> Result<(f64, MetricsReport)> {
        if data.is_empty() {
            return Err(Error::Config("validation split is empty".into()));
        }
        let mut total = 0.0;
        let mut scores = Vec::with_capacity(data.len());
        for (batch, chunk) in data.chunks(self.cfg.batch_size).enumerate() {
            let samples: Vec<&Sample> = chunk.iter().collect();
            let loss = self.eval_batch(&samples, &mut scores).map_err(|e| non_finite(e, epoch, "validation", batch))?;
            total += loss * samples.len() as f64;
        }
        let report = MetricsReport::from_scores(scores, self.cfg.threshold, self.cfg.aggregation)?;
        Ok((total / data.len() as f64, report))
    }

    fn eval_batch(&self, samples: &[&Sample], scores: &mut Vec<metrics::ImageScore>) -> Result<f64> {
        let (x, target) = batch_tensors(samples)?;
        let logits = self.model.infer(&x)?;
        let mut tape = Tape::new();
        let lv = tape.constant(logits.clone());
        let loss = self.cfg.loss.apply(&mut tape, lv, &target)?;
        let plane = logits.numel() / samples.len();
        for (s, z) in samples.iter().zip(logits.data().chunks(plane)) {
            let probs = Tensor::new(vec![1, s.mask.height(), s.mask.width()], z.iter().map(|&v| sigmoid(v)).collect())?;
            scores.push(metrics::score(&s.tile_id, &probs, &s.mask, self.cfg.threshold)?);
        }
        Ok(tape.value(loss).item().expect("scalar loss"))
    }

    /// Trains one epoch, then validates.
    pub fn run_epoch(&mut self, epoch: usize, train: &[Sample], val: &[Sample]) -> Result<EpochReport> {
        let start = Instant::now();
        let train_loss = self.train_epoch(epoch, train)?;
        let (val_loss, report) = self.validate(epoch, val)?;
        let wall_time_s = self.cfg.record_wall_time.then(|| start.elapsed().as_secs_f64());
        Ok(EpochReport { epoch, train_loss, val_loss, val_iou: report.mean_iou, val_dice: report.mean_dice, wall_time_s })
    }

    /// Model weights followed by `optim.*` state.
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let state = self.optimizer.state_tensors();
        let mut all: Vec<(&str, &Tensor)> = self.model.tensors();
        all.extend(state.iter().map(|(k, v)| (k.as_str(), v)));
        crate::nn::save_tensors(path, &all)
    }
}

/// Training-mode loss on one batch with the gradient of every parameter.
#[derive(Debug, Clone)]
pub struct BatchGradients {
    pub loss: f64,
    pub grads: BTreeMap<String, Tensor>,
    pub bn_updates: Vec<BnUpdate>,
}

pub fn batch_gradients(model: &Model, samples: &[&Sample], loss: &LossConfig) -> Result<BatchGradients> {
    let (x, target) = batch_tensors(samples)?;
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, true);
    let xv = tape.constant(x);
    let out = model.forward(&mut tape, &bound, xv, Mode::Train)?;
    let lv = loss.apply(&mut tape, out.logits, &target)?;
    let value = tape.value(lv).item().expect("scalar loss");
    tape.backward(lv)?;
    let grads = collect_grads(&tape, &bound);
    Ok(BatchGradients { loss: value, grads, bn_updates: out.bn_updates })
}

/// Numerical failures inside a batch become [`Error::NonFiniteLoss`].
fn non_finite(e: Error, epoch: usize, phase: &'static str, batch: usize) -> Error {
    match e {
        Error::NonFinite(_) => Error::NonFiniteLoss { epoch, phase, batch },
        other => other,
    }
}

pub fn checkpoint_name(epoch: usize) -> String {
    format!("ckpt_epoch{epoch:03}.bin")
}

/// Trains `model` for `cfg.epochs` epochs.
///
/// With an output directory, `curves.csv` is rewritten after every epoch and
/// checkpoints `ckpt_epochNNN.bin` (0-based epoch) are written every
/// `cfg.checkpoint_every` epochs and after the last one. `on_epoch` sees
/// each report as it is produced.
pub fn train(
    model: &mut Model,
    train_set: &[Sample],
    val_set: &[Sample],
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
    mut on_epoch: impl FnMut(&EpochReport),
) -> Result<Vec<EpochReport>> {
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Config(format!(
            "training needs non-empty splits, got {} train and {} val samples",
            train_set.len(),
            val_set.len()
        )));
    }
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut trainer = Trainer::new(model, cfg.clone())?;
    let mut reports = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let report = trainer.run_epoch(epoch, train_set, val_set)?;
        on_epoch(&report);
        reports.push(report);
        if let Some(dir) = out_dir {
            write_curves(&dir.join("curves.csv"), &reports)?;
            let last = epoch + 1 == cfg.epochs;
            let periodic = cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0;
            if last || periodic {
                trainer.save_checkpoint(&dir.join(checkpoint_name(epoch)))?;
            }
        }
    }
    Ok(reports)
}

pub fn curves_csv(reports: &[EpochReport]) -> String {
    let mut s = format!("{CURVES_HEADER}\n");
    for r in reports {
        writeln!(s, "{}", r.csv_row()).expect("write to String");
    }
    s
}

pub fn write_curves(path: &Path, reports: &[EpochReport]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(curves_csv(reports).as_bytes()).map_err(|e| Error::io(path, e))
}

/// Path of the checkpoint written after the last epoch.
pub fn final_checkpoint(out_dir: &Path, cfg: &TrainConfig) -> PathBuf {
    out_dir.join(checkpoint_name(cfg.epochs - 1))
}

/// Probability map (`1 x H x W`) and its thresholded mask.
pub fn predict(model: &Model, img: &ImageTensor, t: f64) -> Result<(Tensor, Mask)> {
    let probs = metrics::probabilities(model, img)?;
    let mask = metrics::threshold(&probs, t)?;
    Ok((probs, mask))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imgproc::synth_vessels;
    use crate::loss::LossKind;
    use crate::nn::{BlockKind, DecoderKind, EncoderConfig, ModelConfig};

    fn scalar_params(theta: f64) -> ParamMap {
        ParamMap::from([("theta".to_string(), Tensor::scalar(theta))])
    }

    /// Gradient of `θ²`.
    fn square_grad(p: &ParamMap) -> BTreeMap<String, Tensor> {
        let t = p["theta"].item().unwrap();
        BTreeMap::from([("theta".to_string(), Tensor::scalar(2.0 * t))])
    }

    #[test]
    fn adam_matches_reference_table() {
        // independently computed reference for θ² from θ = 1 with lr 0.1
        let table = [0.9000000005, 0.8004122286917928, 0.7015862729460303];
        let mut p = scalar_params(1.0);
        let mut opt = Optimizer::new(OptimizerKind::ADAM).unwrap();
        for want in table {
            let g = square_grad(&p);
            opt.step(&mut p, &g, 0.1).unwrap();
            assert!((p["theta"].item().unwrap() - want).abs() < 1e-15);
        }
    }

    #[test]
    fn sgd_steps() {
        let mut p = scalar_params(1.0);
        let mut opt = Optimizer::new(OptimizerKind::Sgd { momentum: 0.0 }).unwrap();
        let g = square_grad(&p);
        opt.step(&mut p, &g, 0.25).unwrap();
        assert_eq!(p["theta"].item().unwrap(), 1.0 - 0.25 * 2.0);

        let mut p = scalar_params(1.0);
        let mut opt = Optimizer::new(OptimizerKind::Sgd { momentum: 0.9 }).unwrap();
        for want in [0.8, 0.46, 0.062] {
            let g = square_grad(&p);
            opt.step(&mut p, &g, 0.1).unwrap();
            assert!((p["theta"].item().unwrap() - want).abs() < 1e-14);
        }
    }

    #[test]
    fn optimizer_rejects_unknown_gradients() {
        let mut p = scalar_params(1.0);
        let mut opt = Optimizer::new(OptimizerKind::ADAM).unwrap();
        let g = BTreeMap::from([("other".to_string(), Tensor::scalar(1.0))]);
        assert!(opt.step(&mut p, &g, 0.1).is_err());
        assert!(Optimizer::new(OptimizerKind::Sgd { momentum: 1.0 }).is_err());
    }

    fn quadratic(p: &ParamMap, _: usize) -> Result<(f64, BTreeMap<String, Tensor>)> {
        let t = p["theta"].item().unwrap();
        Ok((0.5 * t * t, BTreeMap::from([("theta".to_string(), Tensor::scalar(t))])))
    }

    #[test]
    fn range_test_on_quadratic() {
        let mut p = scalar_params(3.0);
        let before = p.clone();
        let sgd = OptimizerKind::Sgd { momentum: 0.0 };
        let r = lr_range_test(&mut p, quadratic, sgd, 1e-6, 10.0, 100).unwrap();
        assert!(r.suggested_lr > 1e-6 && r.suggested_lr < 10.0, "{}", r.suggested_lr);
        assert!(r.lrs.len() <= 100);
        for w in r.lrs.windows(3) {
            assert!(((w[1] / w[0]) / (w[2] / w[1]) - 1.0).abs() < 1e-12);
        }
        assert_eq!(p, before);
        assert_eq!(p["theta"].data()[0].to_bits(), 3f64.to_bits());
    }

    #[test]
    fn range_test_argument_checks() {
        let mut p = scalar_params(1.0);
        let sgd = OptimizerKind::Sgd { momentum: 0.0 };
        assert!(lr_range_test(&mut p, quadratic, sgd, 1.0, 0.1, 100).is_err());
        assert!(lr_range_test(&mut p, quadratic, sgd, 1e-3, 1.0, 5).is_err());
        let nan = |_: &ParamMap, _| Ok((f64::NAN, BTreeMap::new()));
        let err = lr_range_test(&mut p, nan, sgd, 1e-3, 1.0, 20).unwrap_err();
        assert!(matches!(err, Error::NonFiniteLoss { .. }), "{err}");
    }

    fn tiny_model(decoder: DecoderKind) -> Model {
        Model::new(ModelConfig {
            encoder: EncoderConfig { block_kind: BlockKind::Residual, stage_widths: vec![4, 8], blocks_per_stage: 1 },
            decoder,
            fpn_width: 4,
            input_size: [3, 32, 32],
            ..ModelConfig::default()
        })
        .unwrap()
    }

    fn tiny_cfg() -> TrainConfig {
        TrainConfig { batch_size: 3, learning_rate: 1e-2, epochs: 2, checkpoint_every: 1, ..TrainConfig::default() }
    }

    #[test]
    fn training_is_deterministic() {
        let data = synth_vessels(4, 5, 32, 32).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let run = |sub: &str| {
            let mut m = tiny_model(DecoderKind::UNet);
            let out = dir.path().join(sub);
            let r = train(&mut m, &data[..4], &data[4..], &tiny_cfg(), Some(&out), |_| {}).unwrap();
            (r, fs::read(out.join("curves.csv")).unwrap(), fs::read(out.join("ckpt_epoch001.bin")).unwrap())
        };
        let (a, b) = (run("a"), run("b"));
        assert_eq!(a, b);
        assert_eq!(a.0.len(), 2);
        let csv = String::from_utf8(a.1).unwrap();
        assert_eq!(csv.lines().next().unwrap(), CURVES_HEADER);
        assert!(csv.lines().nth(1).unwrap().starts_with("0,") && csv.lines().nth(1).unwrap().ends_with(','));
        assert!(dir.path().join("a/ckpt_epoch000.bin").exists());
    }

    #[test]
    fn checkpoint_loads_back_into_model() {
        let data = synth_vessels(2, 4, 32, 32).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let mut m = tiny_model(DecoderKind::Fpn);
        let cfg = TrainConfig { epochs: 1, ..tiny_cfg() };
        train(&mut m, &data[..3], &data[3..], &cfg, Some(dir.path()), |_| {}).unwrap();
        let mut fresh = tiny_model(DecoderKind::Fpn);
        fresh.load_weights(&final_checkpoint(dir.path(), &cfg)).unwrap();
        assert_eq!(fresh.params(), m.params());
        let names: Vec<String> = crate::nn::load_tensors(&dir.path().join("ckpt_epoch000.bin"))
            .unwrap()
            .into_iter()
            .map(|(k, _)| k)
            .collect();
        assert!(names.contains(&"optim.step".to_string()));
        assert!(names.iter().any(|n| n.starts_with("optim.m.encoder.")));
    }

    #[test]
    fn huge_learning_rate_aborts_in_first_epoch() {
        let data = synth_vessels(3, 5, 32, 32).unwrap();
        let mut m = Model::new(ModelConfig {
            encoder: EncoderConfig { block_kind: BlockKind::Residual, stage_widths: vec![4, 8, 8], blocks_per_stage: 1 },
            input_size: [3, 32, 32],
            ..ModelConfig::default()
        })
        .unwrap();
        let cfg = TrainConfig { learning_rate: 1e30, batch_size: 2, ..tiny_cfg() };
        let err = train(&mut m, &data[..4], &data[4..], &cfg, None, |_| {}).unwrap_err();
        assert!(matches!(err, Error::NonFiniteLoss { epoch: 0, .. }), "{err}");
    }

    #[test]
    fn empty_splits_rejected() {
        let data = synth_vessels(3, 2, 32, 32).unwrap();
        let mut m = tiny_model(DecoderKind::UNet);
        assert!(train(&mut m, &data, &[], &tiny_cfg(), None, |_| {}).is_err());
        assert!(train(&mut m, &[], &data, &tiny_cfg(), None, |_| {}).is_err());
    }

    #[test]
    fn loss_kinds_train() {
        let data = synth_vessels(5, 3, 32, 32).unwrap();
        for kind in [LossKind::WeightedCe, LossKind::Focal, LossKind::Bce] {
            let mut m = tiny_model(DecoderKind::UNet);
            let cfg = TrainConfig { epochs: 1, loss: LossConfig::with_kind(kind), ..tiny_cfg() };
            let r = train(&mut m, &data, &data, &cfg, None, |_| {}).unwrap();
            assert!(r[0].train_loss.is_finite() && (0.0..=1.0).contains(&r[0].val_dice));
        }
    }

    #[test]
    fn predict_contract() {
        let data = synth_vessels(6, 1, 32, 32).unwrap();
        let m = tiny_model(DecoderKind::UNet);
        let (p, mask) = predict(&m, &data[0].image, 0.5).unwrap();
        assert_eq!(p.shape(), &[1, 32, 32]);
        assert!(p.data().iter().all(|&v| v > 0.0 && v < 1.0));
        assert!(mask.popcount() <= 32 * 32);
        assert_eq!(predict(&m, &data[0].image, 0.5).unwrap(), (p, mask));
        let small = crate::imgproc::ImageTensor::filled(16, 16, [0.5; 3]);
        assert!(predict(&m, &small, 0.5).is_err());
    }
}
