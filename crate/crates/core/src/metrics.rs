//! Binarization, confusion counts and the IoU / Dice scores.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::imgproc::{ImageTensor, CHANNELS};
use crate::nn::Model;
use crate::par;
use crate::raster::Mask;
use crate::tensor::{sigmoid, Tensor};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Hash)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// `TP / (TP + FP + FN)`, or 1 when both masks are empty.
    pub fn iou(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp + self.fn_)
    }

    /// `2TP / (2TP + FP + FN)`, or 1 when both masks are empty.
    pub fn dice(&self) -> f64 {
        ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn_)
    }

    /// `TP / (TP + FP)`, or 1 with no predicted positives.
    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    /// `TP / (TP + FN)`, or 1 with no actual positives.
    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }
}

impl std::ops::Add for ConfusionCounts {
    type Output = ConfusionCounts;

    fn add(self, o: Self) -> Self {
        ConfusionCounts { tp: self.tp + o.tp, fp: self.fp + o.fp, fn_: self.fn_ + o.fn_, tn: self.tn + o.tn }
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

pub fn iou(c: &ConfusionCounts) -> f64 {
    c.iou()
}

pub fn dice(c: &ConfusionCounts) -> f64 {
    c.dice()
}

fn check_threshold(t: f64) -> Result<()> {
    if t > 0.0 && t < 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("threshold must be in (0, 1), got {t}")))
    }
}

/// Pixel is set iff its probability is strictly above `t`.
///
/// `probs` is `1 x H x W` or `H x W`.
pub fn threshold(probs: &Tensor, t: f64) -> Result<Mask> {
    check_threshold(t)?;
    let (h, w) = match probs.shape() {
        &[1, h, w] | &[h, w] => (h, w),
        other => return Err(Error::shape("threshold", format!("expected 1xHxW, got {other:?}"))),
    };
    if let Some(p) = probs.data().iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::shape("threshold", format!("probability {p} outside [0, 1]")));
    }
    Mask::from_bits(w, h, probs.data().iter().map(|&p| u8::from(p > t)).collect())
}

pub fn confusion(pred: &Mask, gt: &Mask) -> Result<ConfusionCounts> {
    pred.check_same_dims(gt)?;
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.bits().iter().zip(gt.bits()) {
        match (p != 0, g != 0) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

/// How per-image scores are combined into the report means.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Aggregation {
    /// Arithmetic mean of per-image scores.
    #[default]
    PerImage,
    /// Scores of the pooled confusion counts over all pixels.
    Global,
}

impl Aggregation {
    pub fn as_str(self) -> &'static str {
        match self {
            Aggregation::PerImage => "per_image",
            Aggregation::Global => "global",
        }
    }
}

impl FromStr for Aggregation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per_image" => Ok(Aggregation::PerImage),
            "global" => Ok(Aggregation::Global),
            _ => Err(Error::Config(format!("unknown aggregation {s:?} (expected per_image or global)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageScore {
    pub tile_id: String,
    pub iou: f64,
    pub dice: f64,
    pub counts: ConfusionCounts,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub mean_iou: f64,
    pub mean_dice: f64,
    pub per_image: Vec<ImageScore>,
    pub threshold: f64,
    pub aggregation: Aggregation,
}

impl MetricsReport {
    /// Combines per-image scores in their given order.
    pub fn from_scores(per_image: Vec<ImageScore>, threshold: f64, aggregation: Aggregation) -> Result<Self> {
        if per_image.is_empty() {
            return Err(Error::Config("cannot aggregate an empty evaluation set".into()));
        }
        let (mean_iou, mean_dice) = match aggregation {
            Aggregation::PerImage => {
                let n = per_image.len() as f64;
                (
                    per_image.iter().map(|s| s.iou).sum::<f64>() / n,
                    per_image.iter().map(|s| s.dice).sum::<f64>() / n,
                )
            }
            Aggregation::Global => {
                let pooled = per_image.iter().fold(ConfusionCounts::default(), |a, s| a + s.counts);
                (pooled.iou(), pooled.dice())
            }
        };
        Ok(MetricsReport { mean_iou, mean_dice, per_image, threshold, aggregation })
    }

    /// `tile_id,iou,dice` rows followed by a `__mean__` row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("tile_id,iou,dice\n");
        for r in &self.per_image {
            writeln!(s, "{},{},{}", r.tile_id, r.iou, r.dice).expect("write to String");
        }
        writeln!(s, "__mean__,{},{}", self.mean_iou, self.mean_dice).expect("write to String");
        s
    }
}

/// Scores one probability map against its ground truth.
pub fn score(tile_id: &str, probs: &Tensor, gt: &Mask, t: f64) -> Result<ImageScore> {
    let counts = confusion(&threshold(probs, t)?, gt)?;
    Ok(ImageScore { tile_id: tile_id.to_string(), iou: counts.iou(), dice: counts.dice(), counts })
}

/// Runs `model` on every image and scores sigmoid → threshold → confusion.
/// Images are processed in parallel; results keep input order.
pub fn evaluate_set<S>(model: &Model, data: &[S], t: f64, aggregation: Aggregation) -> Result<MetricsReport>
where
    S: AsEvalPair + Sync,
{
    check_threshold(t)?;
    if data.is_empty() {
        return Err(Error::Config("evaluation set is empty".into()));
    }
    let scores = par::map_slice(data, |item| {
        let (id, img, gt) = item.eval_pair();
        let probs = probabilities(model, img)?;
        score(id, &probs, gt, t)
    });
    MetricsReport::from_scores(scores.into_iter().collect::<Result<_>>()?, t, aggregation)
}

/// Sigmoid of the model's logits for a single image, shaped `1 x H x W`.
pub fn probabilities(model: &Model, img: &ImageTensor) -> Result<Tensor> {
    let (h, w) = (img.height(), img.width());
    let batch = Tensor::new(vec![1, CHANNELS, h, w], img.data().to_vec())?;
    let logits = model.infer(&batch)?;
    Tensor::new(vec![1, h, w], logits.data().iter().map(|&z| sigmoid(z)).collect())
}

/// Anything that can be scored: an id, an image and its ground-truth mask.
pub trait AsEvalPair {
    fn eval_pair(&self) -> (&str, &ImageTensor, &Mask);
}

impl AsEvalPair for crate::imgproc::Sample {
    fn eval_pair(&self) -> (&str, &ImageTensor, &Mask) {
        (&self.tile_id, &self.image, &self.mask)
    }
}

impl AsEvalPair for (String, ImageTensor, Mask) {
    fn eval_pair(&self) -> (&str, &ImageTensor, &Mask) {
        (&self.0, &self.1, &self.2)
    }
}
