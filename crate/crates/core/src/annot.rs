//! Polygon annotation records and the labeled-tile index.
//!
//! The annotation file is line-delimited JSON, one tile per line:
//!
//! ```text
//! {"id":"t1","annotations":[{"type":"blood_vessel","coordinates":[[[0,0],[10,0],[0,10]]]}]}
//! ```
//!
//! Each entry of `coordinates` is one ring. Rings of the same entry are
//! unioned when rasterized, so they are stored as separate [`Polygon`]s.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::io::BufRead;
use std::path::PathBuf;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Side length of a source tile in pixels.
pub const TILE_SIZE: f64 = 512.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ClassLabel {
    BloodVessel,
    Glomerulus,
    Unsure,
}

impl ClassLabel {
    pub const ALL: [ClassLabel; 3] = [ClassLabel::BloodVessel, ClassLabel::Glomerulus, ClassLabel::Unsure];

    pub fn as_str(self) -> &'static str {
        match self {
            ClassLabel::BloodVessel => "blood_vessel",
            ClassLabel::Glomerulus => "glomerulus",
            ClassLabel::Unsure => "unsure",
        }
    }
}

impl fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ClassLabel {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "blood_vessel" => Ok(ClassLabel::BloodVessel),
            "glomerulus" => Ok(ClassLabel::Glomerulus),
            "unsure" => Ok(ClassLabel::Unsure),
            other => Err(other.to_string()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Vertex {
    pub x: f64,
    pub y: f64,
}

impl Vertex {
    pub const fn new(x: f64, y: f64) -> Self {
        Vertex { x, y }
    }
}

/// A single closed ring tagged with its class. The closing edge from the
/// last vertex back to the first is implicit.
#[derive(Debug, Clone, PartialEq)]
pub struct Polygon {
    class: ClassLabel,
    ring: Vec<Vertex>,
}

#[derive(Debug)]
enum RingFault {
    TooFew(usize),
    OutOfBounds(Vertex),
}

fn check_ring(ring: &[Vertex], limit: f64) -> std::result::Result<(), RingFault> {
    if ring.len() < 3 {
        return Err(RingFault::TooFew(ring.len()));
    }
    for v in ring {
        // NaN fails both comparisons and is rejected too.
        if !(v.x >= 0.0 && v.x <= limit && v.y >= 0.0 && v.y <= limit) {
            return Err(RingFault::OutOfBounds(*v));
        }
    }
    Ok(())
}

impl Polygon {
    /// Validates against [`TILE_SIZE`].
    pub fn new(class: ClassLabel, ring: Vec<Vertex>) -> Result<Self> {
        Self::with_limit(class, ring, TILE_SIZE)
    }

    pub fn with_limit(class: ClassLabel, ring: Vec<Vertex>, limit: f64) -> Result<Self> {
        match check_ring(&ring, limit) {
            Ok(()) => Ok(Polygon { class, ring }),
            Err(fault) => Err(fault_to_error(fault, 0, limit)),
        }
    }

    pub fn class(&self) -> ClassLabel {
        self.class
    }

    pub fn ring(&self) -> &[Vertex] {
        &self.ring
    }

    /// Signed shoelace area; positive for counter-clockwise rings in a y-up frame.
    pub fn signed_area(&self) -> f64 {
        crate::raster::signed_area(&self.ring)
    }

    /// Same polygon shifted by `(dx, dy)`, without re-validating bounds.
    pub fn translated(&self, dx: f64, dy: f64) -> Polygon {
        Polygon {
            class: self.class,
            ring: self.ring.iter().map(|v| Vertex::new(v.x + dx, v.y + dy)).collect(),
        }
    }
}

fn fault_to_error(fault: RingFault, line: usize, limit: f64) -> Error {
    match fault {
        RingFault::TooFew(count) => Error::TooFewVertices { line, count },
        RingFault::OutOfBounds(v) => Error::OutOfBounds { line, x: v.x, y: v.y, limit },
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationRecord {
    pub tile_id: String,
    pub polygons: Vec<Polygon>,
}

impl AnnotationRecord {
    pub fn has_class(&self, class: ClassLabel) -> bool {
        self.polygons.iter().any(|p| p.class == class)
    }

    pub fn polygons_of(&self, class: ClassLabel) -> impl Iterator<Item = &Polygon> {
        self.polygons.iter().filter(move |p| p.class == class)
    }

    /// One JSON line in the annotation file schema, one entry per polygon.
    pub fn to_json_line(&self) -> String {
        let raw = RawRecord {
            id: self.tile_id.clone(),
            annotations: self
                .polygons
                .iter()
                .map(|p| RawAnnotation {
                    kind: p.class.as_str().to_string(),
                    coordinates: vec![p.ring.iter().map(|v| [v.x, v.y]).collect()],
                })
                .collect(),
        };
        serde_json::to_string(&raw).expect("annotation record serializes")
    }
}

#[derive(Serialize, Deserialize)]
struct RawRecord {
    id: String,
    annotations: Vec<RawAnnotation>,
}

#[derive(Serialize, Deserialize)]
struct RawAnnotation {
    #[serde(rename = "type")]
    kind: String,
    coordinates: Vec<Vec<[f64; 2]>>,
}

/// Parses the annotation file. Blank lines are skipped; line numbers in
/// errors are 1-based.
pub fn parse_annotations<R: BufRead>(reader: R) -> Result<Vec<AnnotationRecord>> {
    parse_annotations_with_limit(reader, TILE_SIZE)
}

pub fn parse_annotations_with_limit<R: BufRead>(reader: R, limit: f64) -> Result<Vec<AnnotationRecord>> {
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::Parse { line: lineno, msg: e.to_string() })?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(parse_line(&line, lineno, limit)?);
    }
    Ok(records)
}

fn parse_line(line: &str, lineno: usize, limit: f64) -> Result<AnnotationRecord> {
    let raw: RawRecord =
        serde_json::from_str(line).map_err(|e| Error::Parse { line: lineno, msg: e.to_string() })?;
    if raw.id.is_empty() {
        return Err(Error::Parse { line: lineno, msg: "empty tile id".into() });
    }
    let mut polygons = Vec::new();
    for ann in raw.annotations {
        let class: ClassLabel = ann
            .kind
            .parse()
            .map_err(|label| Error::UnknownClass { line: lineno, label })?;
        for ring in ann.coordinates {
            let ring: Vec<Vertex> = ring.into_iter().map(|[x, y]| Vertex::new(x, y)).collect();
            check_ring(&ring, limit).map_err(|f| fault_to_error(f, lineno, limit))?;
            polygons.push(Polygon { class, ring });
        }
    }
    Ok(AnnotationRecord { tile_id: raw.id, polygons })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IndexEntry {
    pub tile_id: String,
    pub image_path: PathBuf,
    pub record: AnnotationRecord,
    pub split: Split,
}

/// Labeled tiles in lexicographic tile-id order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DatasetIndex {
    entries: Vec<IndexEntry>,
}

impl DatasetIndex {
    pub fn entries(&self) -> &[IndexEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &IndexEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn records(&self) -> Vec<AnnotationRecord> {
        self.entries.iter().map(|e| e.record.clone()).collect()
    }
}

/// Keeps the tiles whose record has at least one blood-vessel polygon.
///
/// `images` maps every known tile id to its image file. Tiles without a
/// record, or with only glomerulus / unsure polygons, are dropped. Entries
/// come back sorted by tile id and tagged [`Split::Train`].
pub fn filter_labeled(images: &BTreeMap<String, PathBuf>, records: &[AnnotationRecord]) -> Result<DatasetIndex> {
    let mut seen = HashSet::new();
    for r in records {
        if !seen.insert(r.tile_id.as_str()) {
            return Err(Error::DuplicateTile(r.tile_id.clone()));
        }
    }
    let mut entries = Vec::new();
    for record in records.iter().filter(|r| r.has_class(ClassLabel::BloodVessel)) {
        let image_path = images
            .get(&record.tile_id)
            .ok_or_else(|| Error::MissingImage(record.tile_id.clone()))?;
        entries.push(IndexEntry {
            tile_id: record.tile_id.clone(),
            image_path: image_path.clone(),
            record: record.clone(),
            split: Split::Train,
        });
    }
    entries.sort_by(|a, b| a.tile_id.cmp(&b.tile_id));
    Ok(DatasetIndex { entries })
}

/// Number of validation items for `n` entries: `round(val_fraction * n)`.
pub fn val_count(n: usize, val_fraction: f64) -> usize {
    (val_fraction * n as f64).round() as usize
}

/// Seeded permutation of `0..n` shared by every split in the crate.
pub fn seeded_permutation(n: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    order
}

/// Tags entries Train/Val. The first `round(val_fraction * N)` positions of a
/// seeded permutation over the id-sorted entries become Val.
pub fn split_train_val(index: &DatasetIndex, val_fraction: f64, seed: u64) -> Result<DatasetIndex> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::Config(format!("val_fraction must lie in (0, 1), got {val_fraction}")));
    }
    let mut entries = index.entries.clone();
    entries.sort_by(|a, b| a.tile_id.cmp(&b.tile_id));
    let n_val = val_count(entries.len(), val_fraction);
    let order = seeded_permutation(entries.len(), seed);
    for e in entries.iter_mut() {
        e.split = Split::Train;
    }
    for &i in &order[..n_val] {
        entries[i].split = Split::Val;
    }
    Ok(DatasetIndex { entries })
}

/// Polygon count per class; all three classes are always present.
pub fn class_histogram(records: &[AnnotationRecord]) -> BTreeMap<ClassLabel, usize> {
    let mut hist: BTreeMap<ClassLabel, usize> = ClassLabel::ALL.iter().map(|&c| (c, 0)).collect();
    for p in records.iter().flat_map(|r| &r.polygons) {
        *hist.entry(p.class).or_default() += 1;
    }
    hist
}
