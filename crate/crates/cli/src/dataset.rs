//! On-disk dataset directory shared by `ingest` and `synth`.
//!
//! ```text
//! <dir>/index.csv          tile_id,image,mask,split
//! <dir>/images/<id>.png    8-bit RGB
//! <dir>/masks/<id>.pgm     8-bit grayscale, 0 or 255
//! ```
//!
//! Paths in `index.csv` are relative to the directory. Rows are sorted by
//! tile id.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use vesselseg::annot::{seeded_permutation, val_count, Split};
use vesselseg::imgproc::{decode_image, save_image, Sample};
use vesselseg::raster::{load_mask, save_mask};
use vesselseg::Error;

pub const INDEX_FILE: &str = "index.csv";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexRow {
    pub tile_id: String,
    pub image: String,
    pub mask: String,
    pub split: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub splits: Vec<Split>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn of(&self, split: Split) -> Vec<Sample> {
        self.samples
            .iter()
            .zip(&self.splits)
            .filter(|(_, &s)| s == split)
            .map(|(x, _)| x.clone())
            .collect()
    }

    /// Replaces the stored split with a seeded one over the id-sorted samples.
    pub fn resplit(&mut self, val_fraction: f64, seed: u64) {
        self.splits = assign_splits(self.samples.len(), val_fraction, seed);
    }
}

/// The first `round(val_fraction * n)` positions of a seeded permutation
/// are validation.
pub fn assign_splits(n: usize, val_fraction: f64, seed: u64) -> Vec<Split> {
    let mut splits = vec![Split::Train; n];
    for &i in &seeded_permutation(n, seed)[..val_count(n, val_fraction).min(n)] {
        splits[i] = Split::Val;
    }
    splits
}

fn io(path: &Path, source: std::io::Error) -> Error {
    Error::Io { path: path.to_path_buf(), source }
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::Format { path: path.to_path_buf(), msg: e.to_string() }
}

/// Writes images, masks and the index. Samples must already be sorted by id.
pub fn write_dataset(dir: &Path, samples: &[Sample], splits: &[Split]) -> Result<Vec<IndexRow>, Error> {
    assert_eq!(samples.len(), splits.len());
    for sub in ["images", "masks"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| io(&p, e))?;
    }
    let mut rows = Vec::with_capacity(samples.len());
    for (s, split) in samples.iter().zip(splits) {
        let row = IndexRow {
            tile_id: s.tile_id.clone(),
            image: format!("images/{}.png", s.tile_id),
            mask: format!("masks/{}.pgm", s.tile_id),
            split: split.as_str().to_string(),
        };
        save_image(&s.image, &dir.join(&row.image))?;
        save_mask(&s.mask, &dir.join(&row.mask))?;
        rows.push(row);
    }
    let path = dir.join(INDEX_FILE);
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_path(&path).map_err(|e| csv_error(&path, e))?;
    for row in &rows {
        w.serialize(row).map_err(|e| csv_error(&path, e))?;
    }
    w.flush().map_err(|e| io(&path, e))?;
    Ok(rows)
}

pub fn read_index(dir: &Path) -> Result<Vec<IndexRow>, Error> {
    let path = dir.join(INDEX_FILE);
    let mut r = csv::Reader::from_path(&path).map_err(|e| csv_error(&path, e))?;
    let rows: Vec<IndexRow> = r.deserialize().collect::<Result<_, _>>().map_err(|e| csv_error(&path, e))?;
    Ok(rows)
}

/// Loads every row of the index. Images stay in `[0, 1]`.
pub fn load_dataset(dir: &Path) -> Result<Dataset, Error> {
    let rows = read_index(dir)?;
    let mut samples = Vec::with_capacity(rows.len());
    let mut splits = Vec::with_capacity(rows.len());
    for row in rows {
        let image = decode_image(&dir.join(&row.image))?;
        let mask = load_mask(&dir.join(&row.mask))?;
        if (mask.height(), mask.width()) != (image.height(), image.width()) {
            return Err(Error::Format {
                path: dir.join(&row.mask),
                msg: format!(
                    "tile {}: mask is {}x{} but image is {}x{}",
                    row.tile_id,
                    mask.height(),
                    mask.width(),
                    image.height(),
                    image.width()
                ),
            });
        }
        splits.push(row.split.parse()?);
        samples.push(Sample { tile_id: row.tile_id, image, mask });
    }
    Ok(Dataset { samples, splits })
}

/// Image files in `dir` keyed by file stem. PNG and PPM are recognized.
pub fn find_images(dir: &Path) -> Result<BTreeMap<String, PathBuf>, Error> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).map_err(|e| io(dir, e))? {
        let path = entry.map_err(|e| io(dir, e))?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if !matches!(ext.as_deref(), Some("png" | "ppm")) {
            continue;
        }
        if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
            if let Some(prev) = out.insert(stem.to_string(), path.clone()) {
                return Err(Error::Config(format!(
                    "two images for tile {stem:?}: {} and {}",
                    prev.display(),
                    path.display()
                )));
            }
        }
    }
    Ok(out)
}
