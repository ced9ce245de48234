use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// Coordinate where the maximum occurred.
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

/// Compares tape gradients of the scalar `f(x)` against central differences
/// `(f(x + eps e_i) - f(x - eps e_i)) / (2 eps)` and returns the largest
/// relative error, each measured against `max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    grad_check_report(f, x, eps).map(|r| r.max_relative_error)
}

pub fn grad_check_report<F>(f: F, x: &Tensor, eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    #[allow(clippy::neg_cmp_op_on_partial_ord)] // rejects NaN too
    if !(eps > 0.0) {
        return Err(Error::Config(format!("grad_check eps must be positive, got {eps}")));
    }
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), true);
    let y = f(&mut tape, xv)?;
    let value = scalar_value(&tape, y)?;
    if !value.is_finite() {
        return Err(Error::NonFinite("grad_check"));
    }
    tape.backward(y)?;
    let analytic = tape.grad(xv).map(Tensor::into_data).unwrap_or_else(|| vec![0.0; x.numel()]);

    let eval = |probe: Tensor| -> Result<f64> {
        let mut t = Tape::new();
        let v = t.leaf(probe, false);
        let out = f(&mut t, v)?;
        scalar_value(&t, out)
    };
    let mut numeric = Vec::with_capacity(x.numel());
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data[i];
        probe.data[i] = orig + eps;
        let plus = eval(probe.clone())?;
        probe.data[i] = orig - eps;
        let minus = eval(probe.clone())?;
        probe.data[i] = orig;
        numeric.push((plus - minus) / (2.0 * eps));
    }

    let (mut worst, mut worst_index) = (0.0f64, 0);
    for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-8);
        if rel > worst {
            worst = rel;
            worst_index = i;
        }
    }
    Ok(GradCheckReport { max_relative_error: worst, worst_index, analytic, numeric })
}

fn scalar_value(tape: &Tape, v: Var) -> Result<f64> {
    tape.value(v).item().ok_or(Error::Backward("grad_check function must return a scalar"))
}
