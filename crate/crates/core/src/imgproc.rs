//! Image decoding, resizing, normalization and the synthetic vessel generator.

use std::path::Path;

use image::{GrayImage, Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::interp;
use crate::raster::Mask;
use crate::tensor::Tensor;

pub const CHANNELS: usize = 3;

/// Three-channel image stored channel-major (`c, y, x`).
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != CHANNELS * height * width {
            return Err(Error::Dimensions(format!(
                "image {height}x{width} needs {} values, got {}",
                CHANNELS * height * width,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("image"));
        }
        Ok(ImageTensor { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(CHANNELS * height * width);
        for v in rgb {
            data.extend(std::iter::repeat_n(v, height * width));
        }
        ImageTensor { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let plane = self.height * self.width;
        &self.data[c * plane..(c + 1) * plane]
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }
}

/// Decodes an 8-bit RGB file (PNG or PPM) into `[0, 1]`.
pub fn decode_image(path: &Path) -> Result<ImageTensor> {
    let img = image::open(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })?;
    let rgb = match img {
        image::DynamicImage::ImageRgb8(rgb) => rgb,
        other => {
            return Err(Error::Format {
                path: path.to_path_buf(),
                msg: format!("expected 8-bit RGB, found {:?}", other.color()),
            })
        }
    };
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let plane = w * h;
    let mut data = vec![0.0; CHANNELS * plane];
    for (i, p) in rgb.pixels().enumerate() {
        for c in 0..CHANNELS {
            data[c * plane + i] = p.0[c] as f64 / 255.0;
        }
    }
    Ok(ImageTensor { height: h, width: w, data })
}

/// Writes `round(clamp(v, 0, 1) * 255)` per channel; format from the extension.
pub fn save_image(img: &ImageTensor, path: &Path) -> Result<()> {
    let q = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let out = RgbImage::from_fn(img.width as u32, img.height as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        Rgb([q(img.get(0, y, x)), q(img.get(1, y, x)), q(img.get(2, y, x))])
    });
    out.save(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

/// Saves an `H x W` (or `1 x H x W`) map of values in `[0, 1]` as 8-bit
/// grayscale, `round(v * 255)`. PGM for a `.pgm` extension, otherwise by
/// extension.
pub fn save_probability_map(probs: &Tensor, path: &Path) -> Result<()> {
    let (h, w) = match probs.shape() {
        &[1, h, w] | &[h, w] => (h, w),
        other => return Err(Error::shape("save_probability_map", format!("expected 1xHxW, got {other:?}"))),
    };
    let bytes = probs.data().iter().map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let img = GrayImage::from_raw(w as u32, h as u32, bytes).expect("buffer matches dimensions");
    crate::raster::save_gray(&img, path)
}

/// Bilinear resize with half-pixel centers, clamped at the borders.
pub fn resize_bilinear(img: &ImageTensor, out_h: usize, out_w: usize) -> Result<ImageTensor> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::Dimensions(format!("resize target {out_h}x{out_w}")));
    }
    if out_h == img.height && out_w == img.width {
        return Ok(img.clone());
    }
    let rows = interp::taps(img.height, out_h);
    let cols = interp::taps(img.width, out_w);
    let mut data = vec![0.0; CHANNELS * out_h * out_w];
    for c in 0..CHANNELS {
        interp::resample_plane(
            img.channel(c),
            img.height,
            img.width,
            &rows,
            &cols,
            &mut data[c * out_h * out_w..(c + 1) * out_h * out_w],
        );
    }
    Ok(ImageTensor { height: out_h, width: out_w, data })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalizationStats {
    mean: [f64; 3],
    std: [f64; 3],
}

impl NormalizationStats {
    /// Conventional ImageNet channel statistics.
    pub const IMAGENET: NormalizationStats =
        NormalizationStats { mean: [0.485, 0.456, 0.406], std: [0.229, 0.224, 0.225] };

    pub fn new(mean: [f64; 3], std: [f64; 3]) -> Result<Self> {
        if std.iter().any(|&s| !(s > 0.0 && s.is_finite())) || mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::Config(format!("invalid normalization stats mean={mean:?} std={std:?}")));
        }
        Ok(NormalizationStats { mean, std })
    }

    pub fn mean(&self) -> [f64; 3] {
        self.mean
    }

    pub fn std(&self) -> [f64; 3] {
        self.std
    }
}

impl Default for NormalizationStats {
    fn default() -> Self {
        Self::IMAGENET
    }
}

pub fn normalize(img: &ImageTensor, stats: &NormalizationStats) -> ImageTensor {
    map_channels(img, |c, v| (v - stats.mean[c]) / stats.std[c])
}

pub fn denormalize(img: &ImageTensor, stats: &NormalizationStats) -> ImageTensor {
    map_channels(img, |c, v| v * stats.std[c] + stats.mean[c])
}

fn map_channels(img: &ImageTensor, f: impl Fn(usize, f64) -> f64) -> ImageTensor {
    let plane = img.height * img.width;
    let data = img.data.iter().enumerate().map(|(i, &v)| f(i / plane, v)).collect();
    ImageTensor { height: img.height, width: img.width, data }
}

/// One image/mask pair with its identifier.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub tile_id: String,
    pub image: ImageTensor,
    pub mask: Mask,
}

pub const MIN_FOREGROUND: f64 = 0.01;
pub const MAX_FOREGROUND: f64 = 0.25;

/// Generates `count` textured tiles with dark random-walk tubes.
///
/// Sample `i` depends only on `(seed, i)` and is named `synth_{i:04}`. Each
/// mask covers between 1% and 25% of the tile; draws outside that band are
/// discarded and redrawn.
pub fn synth_vessels(seed: u64, count: usize, h: usize, w: usize) -> Result<Vec<Sample>> {
    if h < 32 || w < 32 {
        return Err(Error::Dimensions(format!("synthetic tiles must be at least 32x32, got {h}x{w}")));
    }
    Ok(crate::par::map_indexed(count, |i| synth_sample(seed, i as u64, h, w)))
}

fn synth_sample(seed: u64, index: u64, h: usize, w: usize) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let mask = loop {
        let m = draw_tubes(&mut rng, h, w);
        let f = m.foreground_fraction();
        if (MIN_FOREGROUND..=MAX_FOREGROUND).contains(&f) {
            break m;
        }
    };
    let image = paint(&mut rng, &mask);
    Sample { tile_id: format!("synth_{index:04}"), image, mask }
}

fn draw_tubes(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Mask {
    let mut mask = Mask::zeros(w, h);
    let turn = Normal::new(0.0, 0.18).expect("valid normal");
    let n_tubes = rng.random_range(1..=4);
    let span = h.max(w) as f64;
    for _ in 0..n_tubes {
        let radius = rng.random_range(2..=6) as f64 / 2.0;
        let mut x = rng.random_range(0.0..w as f64);
        let mut y = rng.random_range(0.0..h as f64);
        let mut heading = rng.random_range(0.0..std::f64::consts::TAU);
        let steps = rng.random_range((span * 0.4) as usize..=(span * 1.2) as usize);
        for _ in 0..steps {
            stamp_disk(&mut mask, x, y, radius);
            heading += turn.sample(rng);
            x += heading.cos();
            y += heading.sin();
        }
    }
    mask
}

fn stamp_disk(mask: &mut Mask, cx: f64, cy: f64, r: f64) {
    let (w, h) = (mask.width() as f64, mask.height() as f64);
    let x0 = (cx - r - 0.5).floor().max(0.0);
    let x1 = (cx + r - 0.5).ceil().min(w - 1.0);
    let y0 = (cy - r - 0.5).floor().max(0.0);
    let y1 = (cy + r - 0.5).ceil().min(h - 1.0);
    if x0 > x1 || y0 > y1 {
        return;
    }
    for py in y0 as usize..=y1 as usize {
        for px in x0 as usize..=x1 as usize {
            let dx = px as f64 + 0.5 - cx;
            let dy = py as f64 + 0.5 - cy;
            if dx * dx + dy * dy <= r * r {
                mask.set(px, py, true);
            }
        }
    }
}

/// Pale stained-looking background with a faint wave texture; tube pixels
/// are darkened.
fn paint(rng: &mut ChaCha8Rng, mask: &Mask) -> ImageTensor {
    let (h, w) = (mask.height(), mask.width());
    let base = [
        0.82 + rng.random_range(-0.04..0.04),
        0.66 + rng.random_range(-0.04..0.04),
        0.76 + rng.random_range(-0.04..0.04),
    ];
    let waves: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.random_range(0.05..0.4),
                rng.random_range(0.05..0.4),
                rng.random_range(0.0..std::f64::consts::TAU),
            )
        })
        .collect();
    let plane = h * w;
    let mut data = vec![0.0; CHANNELS * plane];
    for y in 0..h {
        for x in 0..w {
            let texture: f64 =
                waves.iter().map(|&(fx, fy, ph)| 0.025 * (fx * x as f64 + fy * y as f64 + ph).sin()).sum();
            let on = mask.get(x, y);
            for (c, b) in base.iter().enumerate() {
                let noise = rng.random_range(-0.03..0.03);
                let mut v = b + texture + noise;
                if on {
                    v *= 0.6;
                }
                data[c * plane + y * w + x] = v.clamp(0.0, 1.0);
            }
        }
    }
    ImageTensor { height: h, width: w, data }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decode_solid_red() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("red.png");
        RgbImage::from_pixel(4, 4, Rgb([255, 0, 0])).save(&p).unwrap();
        let img = decode_image(&p).unwrap();
        assert!(img.channel(0).iter().all(|&v| v == 1.0));
        assert!(img.channel(1).iter().chain(img.channel(2)).all(|&v| v == 0.0));
    }

    #[test]
    fn decode_save_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let img = synth_sample(3, 0, 32, 40).image;
        for name in ["a.png", "a.ppm"] {
            let p = dir.path().join(name);
            save_image(&img, &p).unwrap();
            let back = decode_image(&p).unwrap();
            assert_eq!((back.height(), back.width()), (32, 40));
            for (a, b) in img.data().iter().zip(back.data()) {
                assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
            }
        }
    }

    #[test]
    fn decode_rejects_grayscale() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.png");
        image::GrayImage::new(4, 4).save(&p).unwrap();
        assert!(matches!(decode_image(&p), Err(Error::Format { .. })));
    }

    #[test]
    fn resize_cases() {
        let img = synth_sample(1, 0, 32, 32).image;
        assert_eq!(resize_bilinear(&img, 32, 32).unwrap(), img);

        let flat = ImageTensor::filled(7, 9, [0.3, 0.6, 0.9]);
        let r = resize_bilinear(&flat, 4, 13).unwrap();
        for c in 0..3 {
            let want = [0.3, 0.6, 0.9][c];
            assert!(r.channel(c).iter().all(|&v| (v - want).abs() < 1e-12));
        }

        let checker = ImageTensor::new(2, 2, [[0.0, 1.0, 1.0, 0.0]; 3].concat()).unwrap();
        let one = resize_bilinear(&checker, 1, 1).unwrap();
        assert_eq!(one.data(), &[0.5, 0.5, 0.5]);

        assert!(resize_bilinear(&img, 0, 3).is_err());
    }

    #[test]
    fn resize_stays_within_range_and_is_idempotent() {
        let img = synth_sample(9, 2, 48, 36).image;
        let r = resize_bilinear(&img, 17, 29).unwrap();
        for c in 0..3 {
            let lo = img.channel(c).iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = img.channel(c).iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert!(r.channel(c).iter().all(|&v| v >= lo - 1e-12 && v <= hi + 1e-12));
        }
        assert_eq!(resize_bilinear(&r, 17, 29).unwrap(), r);
    }

    #[test]
    fn normalize_values() {
        let stats = NormalizationStats::new([0.5, 0.5, 0.5], [0.2, 0.2, 0.2]).unwrap();
        let img = ImageTensor::filled(1, 1, [0.8, 0.5, 0.3]);
        let n = normalize(&img, &stats);
        assert!((n.data()[0] - 1.5).abs() < 1e-12);
        assert_eq!(n.data()[1], 0.0);

        let at_mean = ImageTensor::filled(2, 2, NormalizationStats::IMAGENET.mean());
        assert!(normalize(&at_mean, &NormalizationStats::IMAGENET).data().iter().all(|&v| v == 0.0));

        let img = synth_sample(4, 1, 32, 32).image;
        let back = denormalize(&normalize(&img, &stats), &stats);
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(NormalizationStats::new([0.0; 3], [0.1, 0.0, 0.1]).is_err());
    }

    #[test]
    fn normalize_keeps_argmax() {
        let img = synth_sample(5, 0, 32, 32).image;
        let n = normalize(&img, &NormalizationStats::IMAGENET);
        let argmax = |v: &[f64]| {
            v.iter().enumerate().fold((0, f64::NEG_INFINITY), |best, (i, &x)| if x > best.1 { (i, x) } else { best }).0
        };
        for c in 0..3 {
            assert_eq!(argmax(img.channel(c)), argmax(n.channel(c)));
        }
    }

    #[test]
    fn synth_contract() {
        let a = synth_vessels(11, 8, 64, 64).unwrap();
        assert_eq!(a.len(), 8);
        assert_eq!(a, synth_vessels(11, 8, 64, 64).unwrap());
        assert_eq!(a[3].tile_id, "synth_0003");
        for Sample { image: img, mask, .. } in &a {
            let f = mask.foreground_fraction();
            assert!((MIN_FOREGROUND..=MAX_FOREGROUND).contains(&f), "fraction {f}");
            assert!(mask.popcount() > 0);
            assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
            // tubes are darker on average than background
            let mean = |on: bool| {
                let (mut s, mut n) = (0.0, 0.0);
                for y in 0..64 {
                    for x in 0..64 {
                        if mask.get(x, y) == on {
                            s += img.get(0, y, x);
                            n += 1.0;
                        }
                    }
                }
                s / n
            };
            assert!(mean(true) < mean(false) - 0.15);
        }
        assert_ne!(a[0], synth_vessels(12, 1, 64, 64).unwrap()[0]);
        assert!(synth_vessels(1, 1, 16, 64).is_err());
    }

    #[test]
    fn probability_map_quantizes() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("p.pgm");
        let probs = Tensor::new(vec![1, 1, 4], vec![0.0, 0.5, 0.999, 1.0]).unwrap();
        save_probability_map(&probs, &p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(&bytes[bytes.len() - 4..], &[0, 128, 255, 255]);
        assert!(save_probability_map(&Tensor::zeros(&[2, 2, 2]), &p).is_err());
    }

    #[test]
    fn synth_prefix_stable() {
        let four = synth_vessels(2, 4, 32, 32).unwrap();
        let two = synth_vessels(2, 2, 32, 32).unwrap();
        assert_eq!(&four[..2], &two[..]);
    }
}
