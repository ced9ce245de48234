//! Half-pixel-center bilinear sampling taps, shared by image resizing and
//! the tensor upsampling op so both follow one convention.

/// Output index `j` reads `(1 - frac) * src[lo] + frac * src[hi]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Tap {
    pub lo: usize,
    pub hi: usize,
    pub frac: f64,
}

/// Source coordinate of output `j` is `(j + 0.5) * n_in / n_out - 0.5`,
/// clamped to `[0, n_in - 1]`.
pub(crate) fn taps(n_in: usize, n_out: usize) -> Vec<Tap> {
    debug_assert!(n_in > 0 && n_out > 0);
    let scale = n_in as f64 / n_out as f64;
    let max = (n_in - 1) as f64;
    (0..n_out)
        .map(|j| {
            let src = ((j as f64 + 0.5) * scale - 0.5).clamp(0.0, max);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(n_in - 1);
            Tap { lo, hi, frac: src - lo as f64 }
        })
        .collect()
}

/// Bilinear resample of one `h_in x w_in` plane into `out` (`h_out x w_out`).
pub(crate) fn resample_plane(src: &[f64], h_in: usize, w_in: usize, rows: &[Tap], cols: &[Tap], out: &mut [f64]) {
    let w_out = cols.len();
    for (y, ty) in rows.iter().enumerate() {
        let r0 = &src[ty.lo * w_in..(ty.lo + 1) * w_in];
        let r1 = &src[ty.hi * w_in..(ty.hi + 1) * w_in];
        let dst = &mut out[y * w_out..(y + 1) * w_out];
        for (x, tx) in cols.iter().enumerate() {
            let top = r0[tx.lo] * (1.0 - tx.frac) + r0[tx.hi] * tx.frac;
            let bottom = r1[tx.lo] * (1.0 - tx.frac) + r1[tx.hi] * tx.frac;
            dst[x] = top * (1.0 - ty.frac) + bottom * ty.frac;
        }
    }
    debug_assert_eq!(src.len(), h_in * w_in);
}

/// Adjoint of [`resample_plane`]: scatters `grad_out` back onto the source grid.
pub(crate) fn resample_plane_adjoint(grad_out: &[f64], w_in: usize, rows: &[Tap], cols: &[Tap], grad_src: &mut [f64]) {
    let w_out = cols.len();
    for (y, ty) in rows.iter().enumerate() {
        for (x, tx) in cols.iter().enumerate() {
            let g = grad_out[y * w_out + x];
            if g == 0.0 {
                continue;
            }
            let gt = g * (1.0 - ty.frac);
            let gb = g * ty.frac;
            grad_src[ty.lo * w_in + tx.lo] += gt * (1.0 - tx.frac);
            grad_src[ty.lo * w_in + tx.hi] += gt * tx.frac;
            grad_src[ty.hi * w_in + tx.lo] += gb * (1.0 - tx.frac);
            grad_src[ty.hi * w_in + tx.hi] += gb * tx.frac;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_taps() {
        for t in taps(5, 5).iter().enumerate() {
            assert_eq!(t.1.lo, t.0);
            assert_eq!(t.1.frac, 0.0);
        }
    }

    #[test]
    fn upsample_taps() {
        // out 0 -> src -0.25 clamped to 0; out 1 -> 0.25; out 2 -> 0.75; out 3 -> 1.25 -> clamp? no, n_in=2 -> max 1
        let t = taps(2, 4);
        assert_eq!(t[0], Tap { lo: 0, hi: 1, frac: 0.0 });
        assert_eq!(t[1], Tap { lo: 0, hi: 1, frac: 0.25 });
        assert_eq!(t[2], Tap { lo: 0, hi: 1, frac: 0.75 });
        assert_eq!(t[3], Tap { lo: 1, hi: 1, frac: 0.0 });
    }
}
