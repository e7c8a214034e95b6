use crate::error::{AutodiffError, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Outcome of comparing reverse-mode gradients against central differences.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Flat index of the worst coordinate.
    pub worst_index: usize,
    pub analytic: Tensor,
    pub numeric: Tensor,
}

/// Gradients smaller than this are compared absolutely.
const REL_FLOOR: f64 = 1e-6;

/// Compares the tape gradient of the scalar function `f` at `x` with
/// coordinate-wise central differences of width `2 * step`.
///
/// The per-coordinate error is `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn grad_check<F>(f: F, x: &Tensor, step: f64) -> Result<GradCheckReport>
where
    F: Fn(&Tape, Var) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(AutodiffError::Parameter {
            op: "grad_check",
            msg: format!("step must be positive, got {step}"),
        });
    }
    let tape = Tape::new();
    let input = tape.param(x.clone());
    let out = f(&tape, input)?;
    let grads = tape.backward(out)?;
    let analytic = grads
        .wrt(input)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape()));

    let eval = |t: Tensor| -> Result<f64> {
        let tape = Tape::new();
        let v = tape.constant(t);
        let out = f(&tape, v)?;
        Ok(tape.value(out).item())
    };
    let mut numeric = Tensor::zeros(x.shape());
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let up = eval(probe.clone())?;
        probe.data_mut()[i] = orig - step;
        let down = eval(probe.clone())?;
        probe.data_mut()[i] = orig;
        numeric.data_mut()[i] = (up - down) / (2.0 * step);
    }

    let mut max_rel_error = 0.0;
    let mut worst_index = 0;
    for (i, (&a, &n)) in analytic.data().iter().zip(numeric.data()).enumerate() {
        let err = (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR);
        if err > max_rel_error {
            max_rel_error = err;
            worst_index = i;
        }
    }
    Ok(GradCheckReport {
        max_rel_error,
        worst_index,
        analytic,
        numeric,
    })
}
