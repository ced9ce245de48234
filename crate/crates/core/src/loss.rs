//! Segmentation losses on logits.
//!
//! Every loss takes raw logits `z` and a binary target `g` of the same shape
//! and returns a scalar on the tape. Log terms go through a stable softplus,
//! `-ln σ(z) = softplus(-z)` and `-ln(1 - σ(z)) = softplus(z)`, so no
//! probability is ever passed to a logarithm.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::raster::Mask;
use crate::tensor::{sigmoid, CustomOp, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Dice,
    WeightedCe,
    Focal,
    Bce,
}

impl LossKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LossKind::Dice => "dice",
            LossKind::WeightedCe => "weighted_ce",
            LossKind::Focal => "focal",
            LossKind::Bce => "bce",
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dice" => Ok(LossKind::Dice),
            "weighted_ce" => Ok(LossKind::WeightedCe),
            "focal" => Ok(LossKind::Focal),
            "bce" => Ok(LossKind::Bce),
            _ => Err(Error::Config(format!("unknown loss kind {s:?} (expected dice, weighted_ce, focal or bce)"))),
        }
    }
}

/// How Dice sums are grouped before the ratio is taken.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DiceMode {
    /// One ratio over every pixel of the batch.
    #[default]
    Batch,
    /// One ratio per sample (leading axis), averaged.
    PerImage,
}

impl DiceMode {
    pub fn as_str(self) -> &'static str {
        match self {
            DiceMode::Batch => "batch",
            DiceMode::PerImage => "per_image",
        }
    }
}

impl FromStr for DiceMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "batch" => Ok(DiceMode::Batch),
            "per_image" => Ok(DiceMode::PerImage),
            _ => Err(Error::Config(format!("unknown dice mode {s:?} (expected batch or per_image)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    pub kind: LossKind,
    /// Positive-class weight of the weighted cross-entropy.
    pub beta: f64,
    /// Focusing exponent of the focal loss.
    pub gamma: f64,
    /// Positive-class weight of the focal loss.
    pub alpha: f64,
    /// Additive smoothing in the Dice ratio.
    pub epsilon_smooth: f64,
    pub dice_mode: DiceMode,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            kind: LossKind::Dice,
            beta: 0.9,
            gamma: 2.0,
            alpha: 0.5,
            epsilon_smooth: 1.0,
            dice_mode: DiceMode::Batch,
        }
    }
}

impl LossConfig {
    pub fn with_kind(kind: LossKind) -> Self {
        LossConfig { kind, ..LossConfig::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let open_unit = |v: f64| v > 0.0 && v < 1.0;
        if !open_unit(self.beta) {
            return Err(Error::Config(format!("loss.beta must be in (0, 1), got {}", self.beta)));
        }
        if !open_unit(self.alpha) {
            return Err(Error::Config(format!("loss.alpha must be in (0, 1), got {}", self.alpha)));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::Config(format!("loss.gamma must be >= 0, got {}", self.gamma)));
        }
        if !(self.epsilon_smooth > 0.0 && self.epsilon_smooth.is_finite()) {
            return Err(Error::Config(format!("loss.epsilon_smooth must be > 0, got {}", self.epsilon_smooth)));
        }
        Ok(())
    }

    /// Applies the configured loss.
    pub fn apply(&self, tape: &mut Tape, logits: Var, target: &Tensor) -> Result<Var> {
        self.validate()?;
        match self.kind {
            LossKind::Dice => dice_loss(tape, logits, target, self.epsilon_smooth, self.dice_mode),
            LossKind::WeightedCe => weighted_ce(tape, logits, target, self.beta),
            LossKind::Focal => focal_loss(tape, logits, target, self.gamma, self.alpha),
            LossKind::Bce => bce(tape, logits, target),
        }
    }
}

/// `ln(1 + e^x)` without overflow or cancellation.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Stacks masks into a `B x 1 x H x W` target tensor of zeros and ones.
pub fn mask_batch(masks: &[&Mask]) -> Result<Tensor> {
    let first = masks.first().ok_or_else(|| Error::shape("mask_batch", "empty batch"))?;
    let (h, w) = (first.height(), first.width());
    let mut data = Vec::with_capacity(masks.len() * h * w);
    for m in masks {
        first.check_same_dims(m)?;
        data.extend(m.bits().iter().map(|&b| b as f64));
    }
    Tensor::new(vec![masks.len(), 1, h, w], data)
}

fn check_target(op: &'static str, logits: &Tensor, target: &Tensor) -> Result<()> {
    if logits.shape() != target.shape() {
        return Err(Error::shape(op, format!("logits {:?} vs target {:?}", logits.shape(), target.shape())));
    }
    if logits.numel() == 0 {
        return Err(Error::shape(op, "empty input"));
    }
    if let Some(v) = target.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
        return Err(Error::shape(op, format!("target must be binary, found {v}")));
    }
    Ok(())
}

/// Per-pixel loss and its derivative in the logit.
trait Pointwise: Send + Sync + 'static {
    const NAME: &'static str;
    fn eval(&self, z: f64, positive: bool) -> (f64, f64);
}

struct MeanOf<P>(P);

impl<P: Pointwise> CustomOp for MeanOf<P> {
    fn name(&self) -> &'static str {
        P::NAME
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad_out: &[f64]) -> Vec<Option<Vec<f64>>> {
        let (z, g) = (inputs[0].data(), inputs[1].data());
        let scale = grad_out[0] / z.len() as f64;
        let dz = z.iter().zip(g).map(|(&z, &g)| self.0.eval(z, g == 1.0).1 * scale).collect();
        vec![Some(dz), None]
    }
}

fn mean_loss<P: Pointwise>(tape: &mut Tape, logits: Var, target: &Tensor, rule: P) -> Result<Var> {
    let z = tape.value(logits);
    check_target(P::NAME, z, target)?;
    let total: f64 = z.data().iter().zip(target.data()).map(|(&z, &g)| rule.eval(z, g == 1.0).0).sum();
    let value = Tensor::scalar(total / z.numel() as f64);
    let t = tape.constant(target.clone());
    tape.apply_custom(&[logits, t], value, Box::new(MeanOf(rule)))
}

struct BceRule;

impl Pointwise for BceRule {
    const NAME: &'static str = "bce";

    fn eval(&self, z: f64, positive: bool) -> (f64, f64) {
        let p = sigmoid(z);
        if positive {
            (softplus(-z), p - 1.0)
        } else {
            (softplus(z), p)
        }
    }
}

struct WeightedCeRule {
    beta: f64,
}

impl Pointwise for WeightedCeRule {
    const NAME: &'static str = "weighted_ce";

    fn eval(&self, z: f64, positive: bool) -> (f64, f64) {
        let p = sigmoid(z);
        if positive {
            (self.beta * softplus(-z), -self.beta * (1.0 - p))
        } else {
            ((1.0 - self.beta) * softplus(z), (1.0 - self.beta) * p)
        }
    }
}

struct FocalRule {
    gamma: f64,
    alpha: f64,
}

impl Pointwise for FocalRule {
    const NAME: &'static str = "focal";

    fn eval(&self, z: f64, positive: bool) -> (f64, f64) {
        // u = z for positives and -z for negatives, so p_t = σ(u)
        let (u, sign, alpha_t) = if positive { (z, 1.0, self.alpha) } else { (-z, -1.0, 1.0 - self.alpha) };
        let q = sigmoid(-u);
        let nll = softplus(-u);
        let w = q.powf(self.gamma);
        let loss = alpha_t * w * nll;
        let du = -alpha_t * w * (self.gamma * sigmoid(u) * nll + q);
        (loss, sign * du)
    }
}

/// Mean binary cross-entropy.
pub fn bce(tape: &mut Tape, logits: Var, target: &Tensor) -> Result<Var> {
    mean_loss(tape, logits, target, BceRule)
}

/// Mean of `-β g ln p - (1-β)(1-g) ln(1-p)`.
pub fn weighted_ce(tape: &mut Tape, logits: Var, target: &Tensor, beta: f64) -> Result<Var> {
    if !(beta > 0.0 && beta < 1.0) {
        return Err(Error::Config(format!("weighted_ce beta must be in (0, 1), got {beta}")));
    }
    mean_loss(tape, logits, target, WeightedCeRule { beta })
}

/// Mean of `-α_t (1 - p_t)^γ ln p_t`.
pub fn focal_loss(tape: &mut Tape, logits: Var, target: &Tensor, gamma: f64, alpha: f64) -> Result<Var> {
    if !(gamma >= 0.0 && gamma.is_finite()) || !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Config(format!("focal needs gamma >= 0 and alpha in (0, 1), got {gamma}, {alpha}")));
    }
    mean_loss(tape, logits, target, FocalRule { gamma, alpha })
}

struct DiceOp {
    eps: f64,
    groups: usize,
}

impl DiceOp {
    /// Intersection and `Σp + Σg` for each group.
    fn sums(&self, z: &[f64], g: &[f64]) -> Vec<(f64, f64)> {
        let len = z.len() / self.groups;
        z.chunks(len)
            .zip(g.chunks(len))
            .map(|(z, g)| {
                z.iter().zip(g).fold((0.0, 0.0), |(i, s), (&z, &g)| {
                    let p = sigmoid(z);
                    (i + p * g, s + p + g)
                })
            })
            .collect()
    }

    fn value(&self, z: &[f64], g: &[f64]) -> f64 {
        let per: f64 = self.sums(z, g).iter().map(|&(i, s)| 1.0 - (2.0 * i + self.eps) / (s + self.eps)).sum();
        per / self.groups as f64
    }
}

impl CustomOp for DiceOp {
    fn name(&self) -> &'static str {
        "dice"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad_out: &[f64]) -> Vec<Option<Vec<f64>>> {
        let (z, g) = (inputs[0].data(), inputs[1].data());
        let len = z.len() / self.groups;
        let scale = grad_out[0] / self.groups as f64;
        let mut dz = Vec::with_capacity(z.len());
        for ((zc, gc), (i, s)) in z.chunks(len).zip(g.chunks(len)).zip(self.sums(z, g)) {
            let (num, den) = (2.0 * i + self.eps, s + self.eps);
            for (&z, &g) in zc.iter().zip(gc) {
                let p = sigmoid(z);
                let dp = -(2.0 * g * den - num) / (den * den);
                dz.push(scale * dp * p * (1.0 - p));
            }
        }
        vec![Some(dz), None]
    }
}

/// `1 - (2 Σ p g + ε) / (Σ p + Σ g + ε)` with `p = σ(logits)`.
pub fn dice_loss(tape: &mut Tape, logits: Var, target: &Tensor, eps: f64, mode: DiceMode) -> Result<Var> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::Config(format!("dice epsilon must be > 0, got {eps}")));
    }
    let z = tape.value(logits);
    check_target("dice", z, target)?;
    let groups = match mode {
        DiceMode::Batch => 1,
        DiceMode::PerImage => z.shape().first().copied().unwrap_or(1).max(1),
    };
    let op = DiceOp { eps, groups };
    let value = Tensor::scalar(op.value(z.data(), target.data()));
    let t = tape.constant(target.clone());
    tape.apply_custom(&[logits, t], value, Box::new(op))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn logit(p: f64) -> f64 {
        (p / (1.0 - p)).ln()
    }

    fn eval(cfg: &LossConfig, z: &[f64], g: &[f64]) -> f64 {
        let shape = vec![1, 1, 1, z.len()];
        let mut tape = Tape::new();
        let zv = tape.leaf(Tensor::new(shape.clone(), z.to_vec()).unwrap(), false);
        let out = cfg.apply(&mut tape, zv, &Tensor::new(shape, g.to_vec()).unwrap()).unwrap();
        tape.value(out).item().unwrap()
    }

    fn random_case(seed: u64, n: usize) -> (Vec<f64>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = (0..n).map(|_| rng.random_range(-4.0..4.0)).collect();
        let g = (0..n).map(|_| if rng.random_bool(0.4) { 1.0 } else { 0.0 }).collect();
        (z, g)
    }

    fn all_kinds() -> Vec<LossConfig> {
        let mut v: Vec<LossConfig> =
            [LossKind::Dice, LossKind::WeightedCe, LossKind::Focal, LossKind::Bce].map(LossConfig::with_kind).into();
        v.push(LossConfig { dice_mode: DiceMode::PerImage, ..LossConfig::default() });
        v.push(LossConfig { gamma: 0.5, alpha: 0.25, ..LossConfig::with_kind(LossKind::Focal) });
        v
    }

    #[test]
    fn softplus_is_stable() {
        assert_eq!(softplus(800.0), 800.0);
        assert!(softplus(-800.0) >= 0.0 && softplus(-800.0) < 1e-300);
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
        assert!((softplus(1.5) - (1.0 + 1.5f64.exp()).ln()).abs() < 1e-14);
    }

    #[test]
    fn dice_examples() {
        let dice = LossConfig::default();
        let ones = [40.0; 4];
        assert!(eval(&dice, &ones, &[1.0; 4]).abs() < 1e-9);
        assert!(eval(&dice, &[-40.0; 4], &[0.0; 4]).abs() < 1e-9);
        let l = eval(&dice, &[40.0, -40.0, -40.0, -40.0], &[1.0, 1.0, 0.0, 0.0]);
        assert!((l - 0.25).abs() < 1e-9, "{l}");
    }

    #[test]
    fn weighted_ce_examples() {
        let wce = LossConfig::with_kind(LossKind::WeightedCe);
        assert!(eval(&wce, &[30.0], &[1.0]) < 1e-12);
        assert!((eval(&wce, &[0.0], &[1.0]) - 0.9 * 2f64.ln()).abs() < 1e-12);
        let (z, g) = random_case(3, 64);
        let half = LossConfig { beta: 0.5, ..wce };
        let b = eval(&LossConfig::with_kind(LossKind::Bce), &z, &g);
        assert!((eval(&half, &z, &g) - 0.5 * b).abs() < 1e-12);
    }

    #[test]
    fn focal_examples() {
        let focal = LossConfig::with_kind(LossKind::Focal);
        let easy = eval(&focal, &[logit(0.9)], &[1.0]);
        assert!((easy - 0.5 * 0.01 * -(0.9f64.ln())).abs() < 1e-12);
        let hard = eval(&focal, &[logit(0.1)], &[1.0]);
        assert!((hard - 0.5 * 0.81 * -(0.1f64.ln())).abs() < 1e-12);
        // negative pixel mirrors the positive one
        let neg = eval(&focal, &[-logit(0.1)], &[0.0]);
        assert!((neg - hard).abs() < 1e-12);
    }

    #[test]
    fn zero_at_confident_prediction() {
        for cfg in all_kinds() {
            let l = eval(&cfg, &[35.0, -35.0, 35.0], &[1.0, 0.0, 1.0]);
            assert!((0.0..1e-9).contains(&l), "{:?} {l}", cfg.kind);
        }
    }

    #[test]
    fn nonnegative_and_decreasing_on_positive_pixel() {
        for cfg in all_kinds() {
            let mut prev = f64::INFINITY;
            for k in -20..=20 {
                let l = eval(&cfg, &[k as f64 * 0.4], &[1.0]);
                assert!(l >= 0.0 && l < prev, "{:?} at {k}", cfg.kind);
                prev = l;
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        for (i, cfg) in all_kinds().into_iter().enumerate() {
            let (z, g) = random_case(10 + i as u64, 2 * 3 * 4);
            let target = Tensor::new(vec![2, 1, 3, 4], g).unwrap();
            let x = Tensor::new(vec![2, 1, 3, 4], z).unwrap();
            let err = grad_check(|t, v| cfg.apply(t, v, &target), &x, 1e-5).unwrap();
            assert!(err < 1e-4, "{:?} {:?}: {err}", cfg.kind, cfg.dice_mode);
        }
    }

    #[test]
    fn rejects_bad_targets_and_shapes() {
        let mut tape = Tape::new();
        let z = tape.leaf(Tensor::zeros(&[1, 1, 2, 2]), true);
        let half = Tensor::full(&[1, 1, 2, 2], 0.5);
        assert!(bce(&mut tape, z, &half).is_err());
        assert!(bce(&mut tape, z, &Tensor::zeros(&[1, 1, 4, 1])).is_err());
        assert!(LossConfig { beta: 1.0, ..LossConfig::default() }.validate().is_err());
        assert!(LossConfig { alpha: 0.0, ..LossConfig::default() }.validate().is_err());
        assert!(LossConfig { gamma: -1.0, ..LossConfig::default() }.validate().is_err());
        assert!(LossConfig { epsilon_smooth: 0.0, ..LossConfig::default() }.validate().is_err());
    }

    #[test]
    fn per_image_dice_averages_samples() {
        let z = [40.0, -40.0, -40.0, -40.0, 40.0, 40.0, 40.0, 40.0];
        let g = [1.0, 1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0];
        let mut tape = Tape::new();
        let zv = tape.leaf(Tensor::new(vec![2, 1, 1, 4], z.to_vec()).unwrap(), false);
        let t = Tensor::new(vec![2, 1, 1, 4], g.to_vec()).unwrap();
        let l = dice_loss(&mut tape, zv, &t, 1.0, DiceMode::PerImage).unwrap();
        assert!((tape.value(l).item().unwrap() - 0.125).abs() < 1e-9);
    }

    #[test]
    fn names_round_trip() {
        for k in [LossKind::Dice, LossKind::WeightedCe, LossKind::Focal, LossKind::Bce] {
            assert_eq!(k.as_str().parse::<LossKind>().unwrap(), k);
        }
        assert!("dcie".parse::<LossKind>().is_err());
        assert_eq!("per_image".parse::<DiceMode>().unwrap(), DiceMode::PerImage);
    }

    #[test]
    fn mask_batch_stacks() {
        let a = Mask::from_bits(2, 1, vec![1, 0]).unwrap();
        let b = Mask::from_bits(2, 1, vec![0, 1]).unwrap();
        let t = mask_batch(&[&a, &b]).unwrap();
        assert_eq!(t.shape(), &[2, 1, 1, 2]);
        assert_eq!(t.data(), &[1.0, 0.0, 0.0, 1.0]);
        assert!(mask_batch(&[&a, &Mask::zeros(1, 2)]).is_err());
    }
}
