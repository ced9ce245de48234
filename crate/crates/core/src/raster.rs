//! Polygon to binary mask conversion.
//!
//! Fill rule: pixel `(i, j)` is set iff its center `(i + 0.5, j + 0.5)` lies
//! strictly inside the ring under the even-odd rule. Centers exactly on an
//! edge or vertex stay clear. The scanline fill below evaluates the crossing
//! and on-edge predicates with the same orientation test a brute-force
//! point-in-polygon check would use, so the two agree bit for bit.

use std::io::Write;
use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, GrayImage, ImageEncoder, Luma};

use crate::annot::{AnnotationRecord, ClassLabel, Polygon, Vertex};
use crate::error::{Error, Result};

/// Row-major binary grid; every byte is 0 or 1.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Mask {
    width: usize,
    height: usize,
    bits: Vec<u8>,
}

impl Mask {
    pub fn zeros(width: usize, height: usize) -> Self {
        Mask { width, height, bits: vec![0; width * height] }
    }

    pub fn ones(width: usize, height: usize) -> Self {
        Mask { width, height, bits: vec![1; width * height] }
    }

    pub fn from_bits(width: usize, height: usize, bits: Vec<u8>) -> Result<Self> {
        if bits.len() != width * height {
            return Err(Error::Dimensions(format!(
                "mask {width}x{height} needs {} bits, got {}",
                width * height,
                bits.len()
            )));
        }
        if let Some(v) = bits.iter().find(|&&b| b > 1) {
            return Err(Error::Dimensions(format!("mask bit value {v} is not 0 or 1")));
        }
        Ok(Mask { width, height, bits })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    /// Pixel at column `x`, row `y`.
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x] != 0
    }

    pub fn set(&mut self, x: usize, y: usize, on: bool) {
        self.bits[y * self.width + x] = on as u8;
    }

    pub fn popcount(&self) -> usize {
        self.bits.iter().map(|&b| b as usize).sum()
    }

    pub fn foreground_fraction(&self) -> f64 {
        self.popcount() as f64 / self.bits.len().max(1) as f64
    }

    /// Pixelwise OR with another mask of the same size.
    pub fn union_with(&mut self, other: &Mask) -> Result<()> {
        self.check_same_dims(other)?;
        for (a, &b) in self.bits.iter_mut().zip(&other.bits) {
            *a |= b;
        }
        Ok(())
    }

    pub fn inverted(&self) -> Mask {
        Mask { width: self.width, height: self.height, bits: self.bits.iter().map(|&b| 1 - b).collect() }
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.bits.iter().map(|&b| b as f64).collect()
    }

    pub(crate) fn check_same_dims(&self, other: &Mask) -> Result<()> {
        if self.width != other.width || self.height != other.height {
            return Err(Error::Dimensions(format!(
                "mask {}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )));
        }
        Ok(())
    }
}

/// Shoelace signed area of an implicitly closed ring.
pub fn signed_area(ring: &[Vertex]) -> f64 {
    let n = ring.len();
    let mut twice = 0.0;
    for k in 0..n {
        let a = ring[k];
        let b = ring[(k + 1) % n];
        twice += a.x * b.y - b.x * a.y;
    }
    twice / 2.0
}

fn center(i: usize) -> f64 {
    i as f64 + 0.5
}

/// Indices `i < n` with `lo <= i + 0.5 <= hi`, as an inclusive range.
#[allow(clippy::neg_cmp_op_on_partial_ord)] // NaN bounds give None
fn centers_within(lo: f64, hi: f64, n: usize) -> Option<(usize, usize)> {
    if n == 0 || !(lo <= hi) {
        return None;
    }
    let mut first = (lo - 0.5).ceil().clamp(0.0, n as f64) as usize;
    while first > 0 && center(first - 1) >= lo {
        first -= 1;
    }
    while first < n && center(first) < lo {
        first += 1;
    }
    let mut last_excl = ((hi - 0.5).floor() + 1.0).clamp(0.0, n as f64) as usize;
    while last_excl < n && center(last_excl) <= hi {
        last_excl += 1;
    }
    while last_excl > 0 && center(last_excl - 1) > hi {
        last_excl -= 1;
    }
    (first < last_excl).then(|| (first, last_excl - 1))
}

/// One ring edge restricted to the scanlines it touches.
struct Edge {
    a: Vertex,
    b: Vertex,
    row_lo: usize,
    row_hi: usize,
}

impl Edge {
    /// Orientation of `(px, py)` against the edge, scaled by `b.y - a.y`:
    /// zero iff the point is on the edge's supporting line, and for a
    /// crossing edge, positive iff the crossing lies strictly right of it.
    fn side(&self, px: f64, py: f64) -> f64 {
        let dy = self.b.y - self.a.y;
        let d = (self.a.x - px) * dy + (py - self.a.y) * (self.b.x - self.a.x);
        if dy > 0.0 {
            d
        } else {
            -d
        }
    }
}

/// Rasterizes a single ring under the pixel-center even-odd rule.
pub fn rasterize_ring(ring: &[Vertex], width: usize, height: usize) -> Result<Mask> {
    if width == 0 || height == 0 {
        return Err(Error::Dimensions(format!("raster size {width}x{height}")));
    }
    if ring.len() < 3 || signed_area(ring) == 0.0 {
        return Err(Error::DegeneratePolygon);
    }
    let n = ring.len();
    let mut edges: Vec<Edge> = (0..n)
        .filter_map(|k| {
            let a = ring[k];
            let b = ring[(k + 1) % n];
            let (lo, hi) = (a.y.min(b.y), a.y.max(b.y));
            centers_within(lo, hi, height).map(|(row_lo, row_hi)| Edge { a, b, row_lo, row_hi })
        })
        .collect();
    edges.sort_by_key(|e| e.row_lo);

    let mut mask = Mask::zeros(width, height);
    let mut flips = vec![0u8; width + 1];
    let mut excluded = vec![false; width];
    let mut active: Vec<usize> = Vec::new();
    let mut next = 0;

    for row in 0..height {
        while next < edges.len() && edges[next].row_lo == row {
            active.push(next);
            next += 1;
        }
        active.retain(|&e| edges[e].row_hi >= row);
        if active.is_empty() {
            if next == edges.len() {
                break;
            }
            continue;
        }
        let py = center(row);
        flips.iter_mut().for_each(|f| *f = 0);
        excluded.iter_mut().for_each(|x| *x = false);

        for &ei in &active {
            let e = &edges[ei];
            if e.a.y == e.b.y {
                // Horizontal edge lying on this scanline.
                if let Some((i0, i1)) = centers_within(e.a.x.min(e.b.x), e.a.x.max(e.b.x), width) {
                    excluded[i0..=i1].iter_mut().for_each(|x| *x = true);
                }
                continue;
            }
            for v in [e.a, e.b] {
                if v.y == py {
                    if let Some((i0, i1)) = centers_within(v.x, v.x, width) {
                        excluded[i0..=i1].iter_mut().for_each(|x| *x = true);
                    }
                }
            }
            if (e.a.y > py) == (e.b.y > py) {
                continue;
            }
            // First center whose crossing is not strictly to its right.
            let xc = e.a.x + (py - e.a.y) * (e.b.x - e.a.x) / (e.b.y - e.a.y);
            let mut k = (xc - 0.5).ceil().clamp(0.0, width as f64) as usize;
            while k > 0 && e.side(center(k - 1), py) <= 0.0 {
                k -= 1;
            }
            while k < width && e.side(center(k), py) > 0.0 {
                k += 1;
            }
            flips[0] ^= 1;
            flips[k] ^= 1;
            if k < width && e.side(center(k), py) == 0.0 {
                excluded[k] = true;
            }
        }

        let mut parity = 0u8;
        let base = row * width;
        for i in 0..width {
            parity ^= flips[i];
            mask.bits[base + i] = parity & (!excluded[i]) as u8;
        }
    }
    Ok(mask)
}

pub fn rasterize_polygon(polygon: &Polygon, width: usize, height: usize) -> Result<Mask> {
    rasterize_ring(polygon.ring(), width, height)
}

/// Union of every polygon of `class` in the record.
pub fn build_class_mask(record: &AnnotationRecord, class: ClassLabel, width: usize, height: usize) -> Result<Mask> {
    if width == 0 || height == 0 {
        return Err(Error::Dimensions(format!("raster size {width}x{height}")));
    }
    let mut mask = Mask::zeros(width, height);
    for p in record.polygons_of(class) {
        mask.union_with(&rasterize_polygon(p, width, height)?)?;
    }
    Ok(mask)
}

/// Nearest-neighbor reduction sampling the source at each output pixel center.
pub fn downsample_mask(mask: &Mask, out_w: usize, out_h: usize) -> Result<Mask> {
    if out_w == 0 || out_h == 0 {
        return Err(Error::Dimensions(format!("output size {out_w}x{out_h}")));
    }
    if out_w > mask.width || out_h > mask.height {
        return Err(Error::Dimensions(format!(
            "cannot downsample {}x{} to larger {out_w}x{out_h}",
            mask.width, mask.height
        )));
    }
    // floor((i + 0.5) * in / out) in integer arithmetic.
    let src = |i: usize, n_in: usize, n_out: usize| ((2 * i + 1) * n_in) / (2 * n_out);
    let cols: Vec<usize> = (0..out_w).map(|i| src(i, mask.width, out_w)).collect();
    let mut bits = Vec::with_capacity(out_w * out_h);
    for j in 0..out_h {
        let sy = src(j, mask.height, out_h);
        let row = &mask.bits[sy * mask.width..(sy + 1) * mask.width];
        bits.extend(cols.iter().map(|&sx| row[sx]));
    }
    Ok(Mask { width: out_w, height: out_h, bits })
}

/// Writes an 8-bit grayscale file (format from the extension, `.pgm` or
/// `.png`), mapping 0 to 0 and 1 to 255.
pub fn save_mask(mask: &Mask, path: &Path) -> Result<()> {
    let img = GrayImage::from_fn(mask.width as u32, mask.height as u32, |x, y| {
        Luma([if mask.get(x as usize, y as usize) { 255 } else { 0 }])
    });
    save_gray(&img, path)
}

/// PGM files are written as binary graymaps (`P5`); other extensions go
/// through the image crate's format detection.
pub(crate) fn save_gray(img: &GrayImage, path: &Path) -> Result<()> {
    let is_pgm = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("pgm"));
    if !is_pgm {
        return img.save(path).map_err(|source| Error::Image { path: path.to_path_buf(), source });
    }
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = std::io::BufWriter::new(file);
    PnmEncoder::new(&mut out)
        .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary))
        .write_image(img.as_raw(), img.width(), img.height(), ExtendedColorType::L8)
        .map_err(|source| Error::Image { path: path.to_path_buf(), source })?;
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn load_mask(path: &Path) -> Result<Mask> {
    let img = image::open(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })?;
    let gray = match img {
        image::DynamicImage::ImageLuma8(g) => g,
        other => {
            return Err(Error::Format {
                path: path.to_path_buf(),
                msg: format!("expected 8-bit grayscale mask, found {:?}", other.color()),
            })
        }
    };
    let (w, h) = gray.dimensions();
    let mut bits = Vec::with_capacity((w * h) as usize);
    for p in gray.pixels() {
        match p.0[0] {
            0 => bits.push(0),
            255 => bits.push(1),
            v => {
                return Err(Error::Format { path: path.to_path_buf(), msg: format!("mask pixel value {v} not in {{0, 255}}") })
            }
        }
    }
    Mask::from_bits(w as usize, h as usize, bits)
}
