//! 2-D convolution via im2col and a packed GEMM.
//!
//! Per sample, the input is unfolded into a `(C*K*K) x (Ho*Wo)` column
//! matrix so the forward pass is one `O x (C*K*K)` by column-matrix product.
//! Samples are independent and run through [`crate::par`]; the weight
//! gradient is reduced over samples in index order.

use super::Tensor;
use crate::error::{Error, Result};
use crate::par;

struct Geometry {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Geometry {
    fn new(x: &Tensor, weight: &Tensor, stride: usize, pad: usize) -> Result<Self> {
        let [n, c, h, w] = x.dims4("conv2d")?;
        let [o, wc, k, k2] = match weight.shape[..] {
            [a, b, c, d] => [a, b, c, d],
            _ => return Err(Error::shape("conv2d", format!("weight must be O x C x K x K, got {:?}", weight.shape))),
        };
        if k != k2 || k == 0 {
            return Err(Error::shape("conv2d", format!("kernel must be square and non-empty, got {k}x{k2}")));
        }
        if wc != c {
            return Err(Error::shape("conv2d", format!("input channels {c} != weight input channels {wc}")));
        }
        if stride == 0 {
            return Err(Error::shape("conv2d", "stride must be positive"));
        }
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(Error::shape(
                "conv2d",
                format!("padded input {}x{} smaller than kernel {k}", h + 2 * pad, w + 2 * pad),
            ));
        }
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        Ok(Geometry { n, c, h, w, o, k, stride, pad, ho, wo })
    }

    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }

    fn in_plane(&self) -> usize {
        self.c * self.h * self.w
    }

    fn out_plane(&self) -> usize {
        self.o * self.ho * self.wo
    }

    /// 1x1, stride 1, no padding: the column matrix is the input itself.
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn im2col(&self, x: &[f64], col: &mut [f64]) {
        let (k, s, p) = (self.k, self.stride, self.pad as isize);
        let cols = self.cols();
        for ci in 0..self.c {
            let src = &x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let dst = &mut col[row * cols..(row + 1) * cols];
                    for oy in 0..self.ho {
                        let iy = (oy * s + ky) as isize - p;
                        let line = &mut dst[oy * self.wo..(oy + 1) * self.wo];
                        if iy < 0 || iy >= self.h as isize {
                            line.fill(0.0);
                            continue;
                        }
                        let srow = &src[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for (ox, d) in line.iter_mut().enumerate() {
                            let ix = (ox * s + kx) as isize - p;
                            *d = if ix < 0 || ix >= self.w as isize { 0.0 } else { srow[ix as usize] };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, col: &[f64], dx: &mut [f64]) {
        let (k, s, p) = (self.k, self.stride, self.pad as isize);
        let cols = self.cols();
        for ci in 0..self.c {
            let dst = &mut dx[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let src = &col[row * cols..(row + 1) * cols];
                    for oy in 0..self.ho {
                        let iy = (oy * s + ky) as isize - p;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let drow = &mut dst[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for ox in 0..self.wo {
                            let ix = (ox * s + kx) as isize - p;
                            if ix >= 0 && ix < self.w as isize {
                                drow[ix as usize] += src[oy * self.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `C = op(A) * op(B) + beta * C` for row-major operands, where `op(A)` is
/// `m x k` and `op(B)` is `k x n`. A transposed operand is stored in its
/// untransposed layout.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], trans_a: bool, b: &[f64], trans_b: bool, beta: f64, c: &mut [f64]) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices cover every index reachable through these strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(super) fn forward(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>, stride: usize, pad: usize) -> Result<Tensor> {
    let g = Geometry::new(x, weight, stride, pad)?;
    if let Some(b) = bias {
        if b.shape != [g.o] {
            return Err(Error::shape("conv2d", format!("bias shape {:?} != [{}]", b.shape, g.o)));
        }
    }
    let mut out = vec![0.0; g.n * g.out_plane()];
    par::for_each_chunk_mut(&mut out, g.out_plane(), |i, dst| {
        let xs = &x.data[i * g.in_plane()..(i + 1) * g.in_plane()];
        if let Some(b) = bias {
            for (oc, row) in dst.chunks_mut(g.cols()).enumerate() {
                row.fill(b.data[oc]);
            }
        }
        let beta = if bias.is_some() { 1.0 } else { 0.0 };
        if g.is_pointwise() {
            gemm(g.o, g.rows(), g.cols(), &weight.data, false, xs, false, beta, dst);
        } else {
            let mut col = vec![0.0; g.rows() * g.cols()];
            g.im2col(xs, &mut col);
            gemm(g.o, g.rows(), g.cols(), &weight.data, false, &col, false, beta, dst);
        }
    });
    Ok(Tensor { shape: vec![g.n, g.o, g.ho, g.wo], data: out })
}

/// Returns `(dx, dweight, dbias)`.
pub(super) fn backward(
    x: &Tensor,
    weight: &Tensor,
    has_bias: bool,
    stride: usize,
    pad: usize,
    grad: &[f64],
) -> (Vec<f64>, Vec<f64>, Option<Vec<f64>>) {
    let g = Geometry::new(x, weight, stride, pad).expect("validated in forward");
    let per_sample: Vec<(Vec<f64>, Vec<f64>)> = par::map_indexed(g.n, |i| {
        let xs = &x.data[i * g.in_plane()..(i + 1) * g.in_plane()];
        let gs = &grad[i * g.out_plane()..(i + 1) * g.out_plane()];
        let mut dw = vec![0.0; weight.numel()];
        if g.is_pointwise() {
            gemm(g.o, g.cols(), g.rows(), gs, false, xs, true, 0.0, &mut dw);
            let mut dx = vec![0.0; g.in_plane()];
            gemm(g.rows(), g.o, g.cols(), &weight.data, true, gs, false, 0.0, &mut dx);
            return (dx, dw);
        }
        let mut col = vec![0.0; g.rows() * g.cols()];
        g.im2col(xs, &mut col);
        gemm(g.o, g.cols(), g.rows(), gs, false, &col, true, 0.0, &mut dw);
        // reuse the buffer for d(col)
        gemm(g.rows(), g.o, g.cols(), &weight.data, true, gs, false, 0.0, &mut col);
        let mut dx = vec![0.0; g.in_plane()];
        g.col2im(&col, &mut dx);
        (dx, dw)
    });

    let mut dx = Vec::with_capacity(x.numel());
    let mut dw = vec![0.0; weight.numel()];
    for (dxi, dwi) in per_sample {
        dx.extend_from_slice(&dxi);
        dw.iter_mut().zip(&dwi).for_each(|(a, b)| *a += b);
    }
    let db = has_bias.then(|| {
        let mut db = vec![0.0; g.o];
        for i in 0..g.n {
            for (oc, acc) in db.iter_mut().enumerate() {
                let off = i * g.out_plane() + oc * g.cols();
                *acc += grad[off..off + g.cols()].iter().sum::<f64>();
            }
        }
        db
    });
    (dx, dw, db)
}
