//! One function per subcommand.

use std::fs;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};

use vesselseg::annot::{class_histogram, filter_labeled, parse_annotations, ClassLabel, Split};
use vesselseg::imgproc::{
    decode_image, normalize, resize_bilinear, save_probability_map, synth_vessels, NormalizationStats, Sample,
};
use vesselseg::nn::Model;
use vesselseg::raster::{build_class_mask, downsample_mask, save_mask};
use vesselseg::train::{self, batch_gradients, final_checkpoint, lr_range_test};
use vesselseg::{metrics, par, Error};

use crate::config::RunConfig;
use crate::dataset::{assign_splits, find_images, load_dataset, write_dataset, Dataset};
use crate::{for_tile, CliError, EvalArgs, IngestArgs, LrFindArgs, PredictArgs, SynthArgs, TrainArgs};

pub const RESOLVED_CONFIG: &str = "resolved.cfg";

fn say(out: &mut dyn Write, line: std::fmt::Arguments) {
    // Progress output is best effort; a closed pipe must not abort a run.
    let _ = writeln!(out, "{line}");
}

fn io(path: &Path, source: std::io::Error) -> CliError {
    Error::Io { path: path.to_path_buf(), source }.into()
}

fn check_fraction(f: f64) -> Result<(), CliError> {
    if f > 0.0 && f < 1.0 {
        Ok(())
    } else {
        Err(CliError::usage(format!("--val-fraction must be in (0, 1), got {f}")))
    }
}

/// Best-effort tile id of a 1-based line of the annotation file.
fn tile_on_line(text: &str, line: usize) -> Option<String> {
    let l = text.lines().nth(line.checked_sub(1)?)?;
    let rest = &l[l.find("\"id\"")? + 4..];
    let rest = rest.trim_start().strip_prefix(':')?.trim_start().strip_prefix('"')?;
    Some(rest[..rest.find('"')?].to_string())
}

pub fn ingest(a: &IngestArgs, out: &mut dyn Write) -> Result<(), CliError> {
    check_fraction(a.val_fraction)?;
    if a.size == 0 {
        return Err(CliError::usage("--size must be positive"));
    }
    let text = fs::read_to_string(&a.annotations).map_err(|e| io(&a.annotations, e))?;
    let records = parse_annotations(BufReader::new(text.as_bytes())).map_err(|e| {
        let line = match &e {
            Error::Parse { line, .. }
            | Error::UnknownClass { line, .. }
            | Error::TooFewVertices { line, .. }
            | Error::OutOfBounds { line, .. } => Some(*line),
            _ => None,
        };
        match line.and_then(|l| tile_on_line(&text, l)) {
            Some(id) => for_tile(&id, e),
            None => e.into(),
        }
    })?;
    let images = find_images(&a.images)?;
    let index = filter_labeled(&images, &records)?;

    let size = a.size;
    let built: Vec<Result<Sample, CliError>> = par::map_slice(index.entries(), |entry| {
        let id = &entry.tile_id;
        let img = decode_image(&entry.image_path).map_err(|e| for_tile(id, e))?;
        let (h, w) = (img.height(), img.width());
        if h < size || w < size {
            return Err(for_tile(id, Error::Dimensions(format!("image is {h}x{w}, smaller than --size {size}"))));
        }
        let mask = build_class_mask(&entry.record, ClassLabel::BloodVessel, w, h)
            .and_then(|m| downsample_mask(&m, size, size))
            .map_err(|e| for_tile(id, e))?;
        let image = resize_bilinear(&img, size, size).map_err(|e| for_tile(id, e))?;
        Ok(Sample { tile_id: id.clone(), image, mask })
    });
    let samples = built.into_iter().collect::<Result<Vec<_>, _>>()?;
    let splits = assign_splits(samples.len(), a.val_fraction, a.seed);
    write_dataset(&a.out, &samples, &splits)?;

    let hist = class_histogram(&records);
    let n_val = splits.iter().filter(|&&s| s == Split::Val).count();
    say(out, format_args!("images found: {}", images.len()));
    say(out, format_args!("annotated tiles: {}", records.len()));
    for (class, n) in &hist {
        say(out, format_args!("  {class} polygons: {n}"));
    }
    say(out, format_args!("retained tiles: {} (train {}, val {n_val})", samples.len(), samples.len() - n_val));
    say(out, format_args!("wrote {}", a.out.display()));
    Ok(())
}

pub fn synth(a: &SynthArgs, out: &mut dyn Write) -> Result<(), CliError> {
    check_fraction(a.val_fraction)?;
    if a.count == 0 {
        return Err(CliError::usage("--count must be positive"));
    }
    let samples = synth_vessels(a.seed, a.count, a.size, a.size)?;
    let splits = assign_splits(samples.len(), a.val_fraction, a.seed);
    write_dataset(&a.out, &samples, &splits)?;
    let n_val = splits.iter().filter(|&&s| s == Split::Val).count();
    say(out, format_args!("wrote {} tiles (train {}, val {n_val}) to {}", a.count, a.count - n_val, a.out.display()));
    Ok(())
}

/// Images normalized the way the model sees them.
fn prepared(samples: Vec<Sample>) -> Vec<Sample> {
    let stats = NormalizationStats::IMAGENET;
    samples.into_iter().map(|s| Sample { image: normalize(&s.image, &stats), ..s }).collect()
}

fn check_input_size(cfg: &RunConfig, data: &Dataset, dir: &Path) -> Result<(), CliError> {
    let [_, h, w] = cfg.model.input_size;
    if let Some(s) = data.samples.iter().find(|s| (s.image.height(), s.image.width()) != (h, w)) {
        return Err(CliError::usage(format!(
            "{}: tile {} is {}x{} but model.input_size is {h}x{w}",
            dir.display(),
            s.tile_id,
            s.image.height(),
            s.image.width()
        )));
    }
    Ok(())
}

/// Loads the dataset named by the config, applying `train.val_fraction`.
fn training_data(cfg: &RunConfig) -> Result<(Vec<Sample>, Vec<Sample>), CliError> {
    let mut data = load_dataset(&cfg.data_dir)?;
    if data.is_empty() {
        return Err(CliError::usage(format!("{}: dataset has no tiles", cfg.data_dir.display())));
    }
    check_input_size(cfg, &data, &cfg.data_dir)?;
    if let Some(f) = cfg.val_fraction {
        data.resplit(f, cfg.train.seed);
    }
    Ok((prepared(data.of(Split::Train)), prepared(data.of(Split::Val))))
}

fn build_model(cfg: &RunConfig, out: &mut dyn Write) -> Result<Model, CliError> {
    let mut model = Model::new(cfg.model.clone())?;
    if let Some(path) = &cfg.init_weights {
        let n = model.load_weights_prefix(path, &cfg.init_prefix)?;
        say(out, format_args!("initialized {n} tensors under {:?} from {}", cfg.init_prefix, path.display()));
    }
    Ok(model)
}

pub fn train(a: &TrainArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let cfg = RunConfig::load(&a.config, &a.overrides)?;
    fs::create_dir_all(&cfg.output_dir).map_err(|e| io(&cfg.output_dir, e))?;
    let resolved = cfg.output_dir.join(RESOLVED_CONFIG);
    fs::write(&resolved, cfg.to_resolved()).map_err(|e| io(&resolved, e))?;

    let (train_set, val_set) = training_data(&cfg)?;
    let mut model = build_model(&cfg, out)?;
    say(
        out,
        format_args!(
            "training on {} tiles, validating on {}, {} parameters",
            train_set.len(),
            val_set.len(),
            model.param_count()
        ),
    );
    let epochs = cfg.train.epochs;
    train::train(&mut model, &train_set, &val_set, &cfg.train, Some(&cfg.output_dir), |r| {
        say(
            out,
            format_args!(
                "epoch {}/{epochs}  train_loss {:.5}  val_loss {:.5}  val_iou {:.4}  val_dice {:.4}",
                r.epoch + 1,
                r.train_loss,
                r.val_loss,
                r.val_iou,
                r.val_dice
            ),
        )
    })?;
    say(out, format_args!("wrote {}", final_checkpoint(&cfg.output_dir, &cfg.train).display()));
    Ok(())
}

fn config_for(checkpoint: &Path, explicit: Option<&PathBuf>) -> Result<RunConfig, CliError> {
    let path = match explicit {
        Some(p) => p.clone(),
        None => checkpoint.parent().unwrap_or(Path::new(".")).join(RESOLVED_CONFIG),
    };
    Ok(RunConfig::load(&path, &[])?)
}

fn load_checkpoint(cfg: &RunConfig, checkpoint: &Path) -> Result<Model, CliError> {
    let mut model = Model::new(cfg.model.clone())?;
    model.load_weights(checkpoint)?;
    Ok(model)
}

pub fn eval(a: &EvalArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let cfg = config_for(&a.checkpoint, a.config.as_ref())?;
    let t = a.threshold.unwrap_or(cfg.train.threshold);
    let dir = a.data.clone().unwrap_or_else(|| cfg.data_dir.clone());
    let split = match a.split.as_str() {
        "all" => None,
        s => Some(s.parse::<Split>()?),
    };
    let model = load_checkpoint(&cfg, &a.checkpoint)?;
    let data = load_dataset(&dir)?;
    let samples = match split {
        Some(s) => data.of(s),
        None => data.samples.clone(),
    };
    if samples.is_empty() {
        return Err(CliError::usage(format!("{}: no tiles in split {}", dir.display(), a.split)));
    }
    let report = metrics::evaluate_set(&model, &prepared(samples), t, cfg.train.aggregation)?;
    let csv = report.to_csv();
    match &a.out {
        Some(path) => fs::write(path, &csv).map_err(|e| io(path, e))?,
        None => out.write_all(csv.as_bytes()).map_err(|e| io(Path::new("<stdout>"), e))?,
    }
    Ok(())
}

/// `<dir>/<stem>_prob.pgm` next to the mask.
fn default_prob_path(mask: &Path) -> PathBuf {
    let stem = mask.file_stem().and_then(|s| s.to_str()).unwrap_or("mask");
    mask.with_file_name(format!("{stem}_prob.pgm"))
}

pub fn predict(a: &PredictArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let cfg = config_for(&a.checkpoint, a.config.as_ref())?;
    let t = a.threshold.unwrap_or(cfg.train.threshold);
    let model = load_checkpoint(&cfg, &a.checkpoint)?;
    let img = decode_image(&a.image)?;
    let [_, h, w] = cfg.model.input_size;
    if (img.height(), img.width()) != (h, w) {
        return Err(Error::Shape {
            op: "predict",
            detail: format!("{} is {}x{}, model expects {h}x{w}", a.image.display(), img.height(), img.width()),
        }
        .into());
    }
    let img = normalize(&img, &NormalizationStats::IMAGENET);
    let (probs, mask) = train::predict(&model, &img, t)?;
    let prob_path = a.prob_out.clone().unwrap_or_else(|| default_prob_path(&a.out_mask));
    save_mask(&mask, &a.out_mask)?;
    save_probability_map(&probs, &prob_path)?;
    say(
        out,
        format_args!(
            "foreground {:.4}; wrote {} and {}",
            mask.foreground_fraction(),
            a.out_mask.display(),
            prob_path.display()
        ),
    );
    Ok(())
}

pub fn lr_find(a: &LrFindArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let cfg = RunConfig::load(&a.config, &a.overrides)?;
    let (train_set, _) = training_data(&cfg)?;
    let mut model = build_model(&cfg, out)?;
    let bs = cfg.train.batch_size;
    let order = vesselseg::annot::seeded_permutation(train_set.len(), cfg.train.seed);
    let n_batches = train_set.len().div_ceil(bs);
    let mut params = model.params().clone();
    let loss_cfg = cfg.train.loss.clone();
    let result = lr_range_test(
        &mut params,
        |p, step| {
            *model.params_mut() = p.clone();
            let b = step % n_batches;
            let batch: Vec<&Sample> = order[b * bs..((b + 1) * bs).min(order.len())].iter().map(|&i| &train_set[i]).collect();
            let g = batch_gradients(&model, &batch, &loss_cfg)?;
            Ok((g.loss, g.grads))
        },
        cfg.train.optimizer,
        a.lr_min,
        a.lr_max,
        a.steps,
    )?;
    fs::create_dir_all(&cfg.output_dir).map_err(|e| io(&cfg.output_dir, e))?;
    let path = cfg.output_dir.join("lr_range.csv");
    let mut csv = String::from("step,lr,loss,smoothed_loss\n");
    for (i, ((lr, l), s)) in result.lrs.iter().zip(&result.losses).zip(&result.smoothed).enumerate() {
        csv.push_str(&format!("{i},{lr},{l},{s}\n"));
    }
    fs::write(&path, csv).map_err(|e| io(&path, e))?;
    say(out, format_args!("suggested learning rate: {}", result.suggested_lr));
    say(out, format_args!("wrote {}", path.display()));
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn finds_tile_on_line() {
        let text = "{\"id\":\"a\"}\n{\"id\" : \"tile_9\", \"annotations\": 3}\n";
        assert_eq!(tile_on_line(text, 2).as_deref(), Some("tile_9"));
        assert_eq!(tile_on_line(text, 3), None);
        assert_eq!(tile_on_line("{\"x\":1}", 1), None);
    }

    #[test]
    fn prob_path_sits_beside_mask() {
        assert_eq!(default_prob_path(Path::new("out/m.png")), PathBuf::from("out/m_prob.pgm"));
    }
}
