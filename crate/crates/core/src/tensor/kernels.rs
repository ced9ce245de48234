use super::{conv, BatchNormMode, Cache, Op, Tensor};
use crate::error::{Error, Result};
use crate::interp;
use crate::par;

fn expect_arity(op: &Op, inputs: &[&Tensor], allowed: &[usize]) -> Result<()> {
    if allowed.contains(&inputs.len()) {
        Ok(())
    } else {
        Err(Error::shape(op.name(), format!("expected {allowed:?} inputs, got {}", inputs.len())))
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::shape(op, format!("operand shapes {:?} and {:?} differ", a.shape, b.shape)));
    }
    Ok(())
}

pub(super) fn forward(op: &Op, inputs: &[&Tensor]) -> Result<(Tensor, Cache)> {
    match op {
        Op::Conv2d { stride, pad } => {
            expect_arity(op, inputs, &[2, 3])?;
            let out = conv::forward(inputs[0], inputs[1], inputs.get(2).copied(), *stride, *pad)?;
            Ok((out, Cache::None))
        }
        Op::UpsampleBilinear2x => {
            expect_arity(op, inputs, &[1])?;
            Ok((upsample2x(inputs[0])?, Cache::None))
        }
        Op::MaxPool2x2 => {
            expect_arity(op, inputs, &[1])?;
            let (out, arg) = maxpool(inputs[0])?;
            Ok((out, Cache::ArgMax(arg)))
        }
        Op::Relu => {
            expect_arity(op, inputs, &[1])?;
            Ok((map(inputs[0], |v| v.max(0.0)), Cache::None))
        }
        Op::Sigmoid => {
            expect_arity(op, inputs, &[1])?;
            Ok((map(inputs[0], sigmoid), Cache::None))
        }
        Op::Add | Op::Mul => {
            expect_arity(op, inputs, &[2])?;
            let (a, b) = (inputs[0], inputs[1]);
            same_shape(op.name(), a, b)?;
            let data = if *op == Op::Add {
                a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect()
            } else {
                a.data.iter().zip(&b.data).map(|(x, y)| x * y).collect()
            };
            Ok((Tensor { shape: a.shape.clone(), data }, Cache::None))
        }
        Op::ConcatChannels => {
            if inputs.is_empty() {
                return Err(Error::shape("concat_channels", "no inputs"));
            }
            Ok((concat(inputs)?, Cache::None))
        }
        Op::Sum => {
            expect_arity(op, inputs, &[1])?;
            Ok((Tensor::scalar(inputs[0].data.iter().sum()), Cache::None))
        }
        Op::BatchNorm { eps, mode } => {
            expect_arity(op, inputs, &[3])?;
            batchnorm(inputs[0], inputs[1], inputs[2], *eps, mode)
        }
    }
}

pub(super) fn backward(
    op: &Op,
    inputs: &[&Tensor],
    out: &Tensor,
    cache: &Cache,
    g: &[f64],
) -> Vec<Option<Vec<f64>>> {
    match op {
        Op::Conv2d { stride, pad } => {
            let (dx, dw, db) = conv::backward(inputs[0], inputs[1], inputs.len() == 3, *stride, *pad, g);
            let mut v = vec![Some(dx), Some(dw)];
            if let Some(db) = db {
                v.push(Some(db));
            }
            v
        }
        Op::UpsampleBilinear2x => vec![Some(upsample2x_backward(inputs[0], g))],
        Op::MaxPool2x2 => {
            let Cache::ArgMax(arg) = cache else { unreachable!("maxpool cache") };
            let mut dx = vec![0.0; inputs[0].numel()];
            for (&src, &gv) in arg.iter().zip(g) {
                dx[src] += gv;
            }
            vec![Some(dx)]
        }
        Op::Relu => {
            let dx = inputs[0].data.iter().zip(g).map(|(&x, &gv)| if x > 0.0 { gv } else { 0.0 }).collect();
            vec![Some(dx)]
        }
        Op::Sigmoid => {
            let dx = out.data.iter().zip(g).map(|(&y, &gv)| gv * y * (1.0 - y)).collect();
            vec![Some(dx)]
        }
        Op::Add => vec![Some(g.to_vec()), Some(g.to_vec())],
        Op::Mul => {
            let (a, b) = (inputs[0], inputs[1]);
            let da = b.data.iter().zip(g).map(|(y, gv)| y * gv).collect();
            let db = a.data.iter().zip(g).map(|(x, gv)| x * gv).collect();
            vec![Some(da), Some(db)]
        }
        Op::ConcatChannels => concat_backward(inputs, g),
        Op::Sum => vec![Some(vec![g[0]; inputs[0].numel()])],
        Op::BatchNorm { mode, .. } => {
            let Cache::Norm { xhat, inv_std } = cache else { unreachable!("batchnorm cache") };
            batchnorm_backward(inputs[0], inputs[1], xhat, inv_std, matches!(mode, BatchNormMode::Train), g)
        }
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn map(x: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor { shape: x.shape.clone(), data: x.data.iter().map(|&v| f(v)).collect() }
}

fn upsample2x(x: &Tensor) -> Result<Tensor> {
    let [n, c, h, w] = x.dims4("upsample_bilinear_2x")?;
    if h == 0 || w == 0 {
        return Err(Error::shape("upsample_bilinear_2x", format!("empty spatial size {h}x{w}")));
    }
    let (ho, wo) = (2 * h, 2 * w);
    let rows = interp::taps(h, ho);
    let cols = interp::taps(w, wo);
    let mut data = vec![0.0; n * c * ho * wo];
    par::for_each_chunk_mut(&mut data, ho * wo, |p, out| {
        interp::resample_plane(&x.data[p * h * w..(p + 1) * h * w], h, w, &rows, &cols, out);
    });
    Ok(Tensor { shape: vec![n, c, ho, wo], data })
}

fn upsample2x_backward(x: &Tensor, g: &[f64]) -> Vec<f64> {
    let [_, _, h, w] = x.dims4("upsample_bilinear_2x").expect("checked in forward");
    let (ho, wo) = (2 * h, 2 * w);
    let rows = interp::taps(h, ho);
    let cols = interp::taps(w, wo);
    let mut dx = vec![0.0; x.numel()];
    par::for_each_chunk_mut(&mut dx, h * w, |p, dst| {
        interp::resample_plane_adjoint(&g[p * ho * wo..(p + 1) * ho * wo], w, &rows, &cols, dst);
    });
    dx
}

fn maxpool(x: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let [n, c, h, w] = x.dims4("maxpool_2x2")?;
    if h % 2 != 0 || w % 2 != 0 || h == 0 || w == 0 {
        return Err(Error::shape("maxpool_2x2", format!("spatial size {h}x{w} must be even and non-zero")));
    }
    let (ho, wo) = (h / 2, w / 2);
    let mut data = Vec::with_capacity(n * c * ho * wo);
    let mut arg = Vec::with_capacity(n * c * ho * wo);
    for p in 0..n * c {
        let base = p * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                // Row-major scan; ties keep the first maximum.
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if x.data[i] > x.data[best] {
                        best = i;
                    }
                }
                data.push(x.data[best]);
                arg.push(best);
            }
        }
    }
    Ok((Tensor { shape: vec![n, c, ho, wo], data }, arg))
}

fn concat(inputs: &[&Tensor]) -> Result<Tensor> {
    let [n, _, h, w] = inputs[0].dims4("concat_channels")?;
    let mut total_c = 0;
    for t in inputs {
        let [tn, tc, th, tw] = t.dims4("concat_channels")?;
        if (tn, th, tw) != (n, h, w) {
            return Err(Error::shape(
                "concat_channels",
                format!("batch/spatial dims {tn}x{th}x{tw} do not match {n}x{h}x{w}"),
            ));
        }
        total_c += tc;
    }
    let plane = h * w;
    let mut data = Vec::with_capacity(n * total_c * plane);
    for b in 0..n {
        for t in inputs {
            let tc = t.shape[1];
            data.extend_from_slice(&t.data[b * tc * plane..(b + 1) * tc * plane]);
        }
    }
    Ok(Tensor { shape: vec![n, total_c, h, w], data })
}

fn concat_backward(inputs: &[&Tensor], g: &[f64]) -> Vec<Option<Vec<f64>>> {
    let n = inputs[0].shape[0];
    let plane = inputs[0].shape[2] * inputs[0].shape[3];
    let mut grads: Vec<Vec<f64>> = inputs.iter().map(|t| Vec::with_capacity(t.numel())).collect();
    let mut offset = 0;
    for _ in 0..n {
        for (t, dst) in inputs.iter().zip(grads.iter_mut()) {
            let len = t.shape[1] * plane;
            dst.extend_from_slice(&g[offset..offset + len]);
            offset += len;
        }
    }
    grads.into_iter().map(Some).collect()
}

fn batchnorm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64, mode: &BatchNormMode) -> Result<(Tensor, Cache)> {
    let [n, c, h, w] = x.dims4("batchnorm")?;
    for (name, p) in [("gamma", gamma), ("beta", beta)] {
        if p.shape != [c] {
            return Err(Error::shape("batchnorm", format!("{name} shape {:?} != [{c}]", p.shape)));
        }
    }
    #[allow(clippy::neg_cmp_op_on_partial_ord)] // rejects NaN too
    if !(eps > 0.0) {
        return Err(Error::shape("batchnorm", format!("epsilon must be positive, got {eps}")));
    }
    let plane = h * w;
    let m = (n * plane) as f64;
    let (mean, var) = match mode {
        BatchNormMode::Train => channel_moments(x),
        BatchNormMode::Eval { mean, var } => {
            if mean.len() != c || var.len() != c {
                return Err(Error::shape(
                    "batchnorm",
                    format!("running stats lengths {}/{} != channels {c}", mean.len(), var.len()),
                ));
            }
            (mean.clone(), var.clone())
        }
    };
    debug_assert!(m > 0.0);
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut xhat = vec![0.0; x.numel()];
    let mut data = vec![0.0; x.numel()];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * plane;
            for i in off..off + plane {
                xhat[i] = (x.data[i] - mean[ch]) * inv_std[ch];
                data[i] = gamma.data[ch] * xhat[i] + beta.data[ch];
            }
        }
    }
    Ok((Tensor { shape: x.shape.clone(), data }, Cache::Norm { xhat, inv_std }))
}

/// Per-channel mean and biased variance over batch and spatial positions.
pub(crate) fn channel_moments(x: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let (n, c) = (x.shape[0], x.shape[1]);
    let plane = x.shape[2] * x.shape[3];
    let m = (n * plane) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let mut s = 0.0;
        for b in 0..n {
            let off = (b * c + ch) * plane;
            s += x.data[off..off + plane].iter().sum::<f64>();
        }
        let mu = s / m;
        let mut ss = 0.0;
        for b in 0..n {
            let off = (b * c + ch) * plane;
            ss += x.data[off..off + plane].iter().map(|v| (v - mu) * (v - mu)).sum::<f64>();
        }
        mean[ch] = mu;
        var[ch] = ss / m;
    }
    (mean, var)
}

fn batchnorm_backward(
    x: &Tensor,
    gamma: &Tensor,
    xhat: &[f64],
    inv_std: &[f64],
    train: bool,
    g: &[f64],
) -> Vec<Option<Vec<f64>>> {
    let (n, c) = (x.shape[0], x.shape[1]);
    let plane = x.shape[2] * x.shape[3];
    let m = (n * plane) as f64;
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * plane;
            for i in off..off + plane {
                dgamma[ch] += g[i] * xhat[i];
                dbeta[ch] += g[i];
            }
        }
    }
    let mut dx = vec![0.0; x.numel()];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * plane;
            let k = gamma.data[ch] * inv_std[ch];
            for i in off..off + plane {
                dx[i] = if train {
                    k * (g[i] - dbeta[ch] / m - xhat[i] * dgamma[ch] / m)
                } else {
                    k * g[i]
                };
            }
        }
    }
    vec![Some(dx), Some(dgamma), Some(dbeta)]
}
