//! `key = value` run configuration.
//!
//! One setting per line, `#` starts a comment, blank lines are ignored.
//! Unknown or repeated keys are errors. Relative paths are taken relative
//! to the working directory. [`RunConfig::to_resolved`] prints every key,
//! defaults included, in a fixed order, and re-parses to the same config.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use vesselseg::nn::ModelConfig;
use vesselseg::train::{OptimizerKind, TrainConfig};
use vesselseg::Error;

/// Every accepted key, in the order of the resolved file.
pub const KEYS: &[&str] = &[
    "data.dir",
    "output_dir",
    "model.block_kind",
    "model.stage_widths",
    "model.blocks_per_stage",
    "model.decoder",
    "model.fpn_width",
    "model.norm",
    "model.input_size",
    "model.seed",
    "model.init_weights",
    "model.init_prefix",
    "loss.kind",
    "loss.beta",
    "loss.gamma",
    "loss.alpha",
    "loss.epsilon_smooth",
    "loss.dice_mode",
    "train.optimizer",
    "train.momentum",
    "train.adam_beta1",
    "train.adam_beta2",
    "train.adam_eps",
    "train.batch_size",
    "train.learning_rate",
    "train.epochs",
    "train.seed",
    "train.val_fraction",
    "train.checkpoint_every",
    "train.record_wall_time",
    "eval.threshold",
    "eval.aggregation",
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// Dataset directory written by `ingest` or `synth`.
    pub data_dir: PathBuf,
    pub output_dir: PathBuf,
    pub model: ModelConfig,
    /// Weight file to initialize from before training.
    pub init_weights: Option<PathBuf>,
    /// Only tensors under this name prefix are taken from `init_weights`.
    pub init_prefix: String,
    pub train: TrainConfig,
    /// Re-split the dataset instead of using the split column of `index.csv`.
    pub val_fraction: Option<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data_dir: PathBuf::from("data"),
            output_dir: PathBuf::from("runs/default"),
            model: ModelConfig::default(),
            init_weights: None,
            init_prefix: "encoder.".into(),
            train: TrainConfig::default(),
            val_fraction: None,
        }
    }
}

fn bad(key: &str, value: &str, why: impl std::fmt::Display) -> Error {
    Error::Config(format!("{key} = {value:?}: {why}"))
}

fn num<T: FromStr>(key: &str, value: &str) -> Result<T, Error>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e| bad(key, value, e))
}

fn flag(key: &str, value: &str) -> Result<bool, Error> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(bad(key, value, "expected true or false")),
    }
}

/// `128` (square) or `128x96` (height x width).
fn input_size(key: &str, value: &str) -> Result<[usize; 3], Error> {
    let (h, w) = match value.split_once('x') {
        Some((h, w)) => (num(key, h.trim())?, num(key, w.trim())?),
        None => {
            let s = num(key, value)?;
            (s, s)
        }
    };
    Ok([3, h, w])
}

fn widths(key: &str, value: &str) -> Result<Vec<usize>, Error> {
    value.split(',').map(|v| num(key, v.trim())).collect()
}

fn optional_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

fn split_entry(line: &str) -> Result<(String, String), String> {
    let (key, value) = line.split_once('=').ok_or_else(|| format!("expected key = value, got {line:?}"))?;
    let key = key.trim();
    if !KEYS.contains(&key) {
        return Err(format!("unknown key {key:?}"));
    }
    Ok((key.to_string(), value.trim().to_string()))
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<RunConfig, Error> {
        RunConfig::parse_with_overrides(text, &[])
    }

    /// Parses `text`, then applies `key=value` overrides, which replace
    /// settings from the file rather than counting as duplicates.
    pub fn parse_with_overrides(text: &str, overrides: &[String]) -> Result<RunConfig, Error> {
        let mut entries: Vec<(String, String)> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = split_entry(line).map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
            if entries.iter().any(|(k, _)| *k == key) {
                return Err(Error::Config(format!("line {}: duplicate key {key:?}", i + 1)));
            }
            entries.push((key, value));
        }
        for o in overrides {
            let (key, value) = split_entry(o).map_err(|e| Error::Config(format!("override {o:?}: {e}")))?;
            match entries.iter_mut().find(|(k, _)| *k == key) {
                Some(slot) => slot.1 = value,
                None => entries.push((key, value)),
            }
        }
        RunConfig::from_entries(&entries)
    }

    fn from_entries(entries: &[(String, String)]) -> Result<RunConfig, Error> {
        let mut cfg = RunConfig::default();
        let (mut momentum, mut adam) = (0.9, (0.9, 0.999, 1e-8));
        let mut optimizer = "adam".to_string();
        for (key, value) in entries {
            let (key, value) = (key.as_str(), value.as_str());
            let m = &mut cfg.model;
            let t = &mut cfg.train;
            match key {
                "data.dir" => cfg.data_dir = PathBuf::from(value),
                "output_dir" => cfg.output_dir = PathBuf::from(value),
                "model.block_kind" => m.encoder.block_kind = value.parse()?,
                "model.stage_widths" => m.encoder.stage_widths = widths(key, value)?,
                "model.blocks_per_stage" => m.encoder.blocks_per_stage = num(key, value)?,
                "model.decoder" => m.decoder = value.parse()?,
                "model.fpn_width" => m.fpn_width = num(key, value)?,
                "model.norm" => m.norm = value.parse()?,
                "model.input_size" => m.input_size = input_size(key, value)?,
                "model.seed" => m.seed = num(key, value)?,
                "model.init_weights" => cfg.init_weights = optional_path(value),
                "model.init_prefix" => cfg.init_prefix = value.to_string(),
                "loss.kind" => t.loss.kind = value.parse()?,
                "loss.beta" => t.loss.beta = num(key, value)?,
                "loss.gamma" => t.loss.gamma = num(key, value)?,
                "loss.alpha" => t.loss.alpha = num(key, value)?,
                "loss.epsilon_smooth" => t.loss.epsilon_smooth = num(key, value)?,
                "loss.dice_mode" => t.loss.dice_mode = value.parse()?,
                "train.optimizer" => optimizer = value.to_string(),
                "train.momentum" => momentum = num(key, value)?,
                "train.adam_beta1" => adam.0 = num(key, value)?,
                "train.adam_beta2" => adam.1 = num(key, value)?,
                "train.adam_eps" => adam.2 = num(key, value)?,
                "train.batch_size" => t.batch_size = num(key, value)?,
                "train.learning_rate" => t.learning_rate = num(key, value)?,
                "train.epochs" => t.epochs = num(key, value)?,
                "train.seed" => t.seed = num(key, value)?,
                "train.val_fraction" => cfg.val_fraction = Some(num(key, value)?),
                "train.checkpoint_every" => t.checkpoint_every = num(key, value)?,
                "train.record_wall_time" => t.record_wall_time = flag(key, value)?,
                "eval.threshold" => t.threshold = num(key, value)?,
                "eval.aggregation" => t.aggregation = value.parse()?,
                _ => unreachable!("key list checked above"),
            }
        }
        cfg.train.optimizer = match optimizer.as_str() {
            "adam" => OptimizerKind::Adam { beta1: adam.0, beta2: adam.1, eps: adam.2 },
            "sgd" => OptimizerKind::Sgd { momentum },
            other => return Err(bad("train.optimizer", other, "expected adam or sgd")),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<RunConfig, Error> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io { path: path.into(), source })?;
        RunConfig::parse_with_overrides(&text, overrides).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<(), Error> {
        self.model.validate()?;
        self.train.validate()?;
        if let Some(f) = self.val_fraction {
            if !(f > 0.0 && f < 1.0) {
                return Err(Error::Config(format!("train.val_fraction must be in (0, 1), got {f}")));
            }
        }
        Ok(())
    }

    /// Every key with its effective value.
    pub fn to_resolved(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let l = &t.loss;
        let (momentum, adam) = match t.optimizer {
            OptimizerKind::Sgd { momentum } => (momentum, (0.9, 0.999, 1e-8)),
            OptimizerKind::Adam { beta1, beta2, eps } => (0.9, (beta1, beta2, eps)),
        };
        let widths: Vec<String> = m.encoder.stage_widths.iter().map(usize::to_string).collect();
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let values: Vec<String> = vec![
            self.data_dir.display().to_string(),
            self.output_dir.display().to_string(),
            m.encoder.block_kind.to_string(),
            widths.join(","),
            m.encoder.blocks_per_stage.to_string(),
            m.decoder.to_string(),
            m.fpn_width.to_string(),
            m.norm.to_string(),
            format!("{}x{}", m.input_size[1], m.input_size[2]),
            m.seed.to_string(),
            path(&self.init_weights),
            self.init_prefix.clone(),
            l.kind.to_string(),
            l.beta.to_string(),
            l.gamma.to_string(),
            l.alpha.to_string(),
            l.epsilon_smooth.to_string(),
            l.dice_mode.as_str().to_string(),
            t.optimizer.name().to_string(),
            momentum.to_string(),
            adam.0.to_string(),
            adam.1.to_string(),
            adam.2.to_string(),
            t.batch_size.to_string(),
            t.learning_rate.to_string(),
            t.epochs.to_string(),
            t.seed.to_string(),
            self.val_fraction.map(|f| f.to_string()).unwrap_or_default(),
            t.checkpoint_every.to_string(),
            t.record_wall_time.to_string(),
            t.threshold.to_string(),
            t.aggregation.as_str().to_string(),
        ];
        debug_assert_eq!(values.len(), KEYS.len());
        let mut out = String::new();
        for (k, v) in KEYS.iter().zip(values) {
            if v.is_empty() {
                writeln!(out, "# {k} =").expect("write to String");
            } else {
                writeln!(out, "{k} = {v}").expect("write to String");
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use vesselseg::loss::LossKind;
    use vesselseg::metrics::Aggregation;
    use vesselseg::nn::{BlockKind, DecoderKind, Norm};

    #[test]
    fn defaults_follow_the_baseline() {
        let cfg = RunConfig::parse("").unwrap();
        assert_eq!(cfg.train.batch_size, 8);
        assert_eq!(cfg.train.learning_rate, 1e-4);
        assert_eq!(cfg.train.epochs, 100);
        assert_eq!(cfg.train.loss.beta, 0.9);
        assert_eq!(cfg.model.input_size, [3, 128, 128]);
        assert_eq!(cfg.model.norm, Norm::None);
    }

    #[test]
    fn parses_every_section() {
        let text = "
            # comment
            data.dir = d
            output_dir = out   # trailing comment
            model.block_kind = plain
            model.stage_widths = 8, 16, 32, 64
            model.decoder = fpn
            model.fpn_width = 16
            model.input_size = 64x32
            loss.kind = focal
            loss.gamma = 1.5
            train.optimizer = sgd
            train.momentum = 0.5
            train.learning_rate = 3e-3
            train.val_fraction = 0.25
            eval.aggregation = global
        ";
        let cfg = RunConfig::parse(text).unwrap();
        assert_eq!(cfg.model.encoder.block_kind, BlockKind::Plain);
        assert_eq!(cfg.model.encoder.stage_widths, vec![8, 16, 32, 64]);
        assert_eq!(cfg.model.decoder, DecoderKind::Fpn);
        assert_eq!(cfg.model.input_size, [3, 64, 32]);
        assert_eq!(cfg.train.loss.kind, LossKind::Focal);
        assert_eq!(cfg.train.optimizer, OptimizerKind::Sgd { momentum: 0.5 });
        assert_eq!(cfg.val_fraction, Some(0.25));
        assert_eq!(cfg.train.aggregation, Aggregation::Global);
        assert_eq!(cfg.output_dir, PathBuf::from("out"));
    }

    #[test]
    fn unknown_and_duplicate_keys_fail() {
        let err = RunConfig::parse("learnig_rate = 1").unwrap_err();
        assert!(err.to_string().contains("learnig_rate"), "{err}");
        assert!(RunConfig::parse("train.learnig_rate = 1").is_err());
        assert!(RunConfig::parse("train.epochs = 1\ntrain.epochs = 2").is_err());
        assert!(RunConfig::parse("train.epochs").is_err());
        assert!(RunConfig::parse("train.epochs = many").is_err());
        assert!(RunConfig::parse("loss.beta = 1.5").is_err());
        assert!(RunConfig::parse("model.input_size = 90").is_err());
    }

    #[test]
    fn overrides_replace_file_values() {
        let o = vec!["train.epochs = 3".to_string(), "model.seed=7".to_string()];
        let cfg = RunConfig::parse_with_overrides("train.epochs = 50", &o).unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.model.seed, 7);
        assert!(RunConfig::parse_with_overrides("", &["train.epoch=3".to_string()]).is_err());
    }

    #[test]
    fn resolved_round_trips() {
        let text = "model.decoder = fpn\nloss.kind = weighted_ce\ntrain.optimizer = sgd\ntrain.momentum = 0.7\nmodel.init_weights = w.bin";
        let cfg = RunConfig::parse(text).unwrap();
        let resolved = cfg.to_resolved();
        assert_eq!(RunConfig::parse(&resolved).unwrap(), cfg);
        assert_eq!(resolved.lines().count(), KEYS.len());
        let defaults = RunConfig::parse("").unwrap();
        assert_eq!(RunConfig::parse(&defaults.to_resolved()).unwrap(), defaults);
    }
}
