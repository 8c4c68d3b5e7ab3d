//! Central finite-difference gradient checking for f64 parameters.

use candle_core::{Tensor, Var};

use super::params::flat_f64;
use crate::error::Result;

/// Compares the autodiff gradient of `loss` with respect to `var` against
/// central differences at up to `max_coords` evenly spaced coordinates.
/// Returns `max |analytic - numeric| / max |analytic|` over those
/// coordinates, or the absolute difference when every analytic entry is 0.
pub fn relative_error(
    var: &Var,
    loss: &mut dyn FnMut() -> Result<Tensor>,
    h: f64,
    max_coords: usize,
) -> Result<f64> {
    Ok(relative_error_piecewise(var, loss, None, h, max_coords)?.0)
}

/// Like [`relative_error`] for piecewise-smooth losses. `pattern` reports
/// which side of every kink (e.g. the sign inside an absolute value) the
/// current input is on; coordinates whose pattern differs between the `+h`
/// and `-h` evaluations straddle a kink, where central differences are not
/// a valid reference, and are skipped. Returns the error and the number of
/// skipped coordinates.
pub fn relative_error_piecewise(
    var: &Var,
    loss: &mut dyn FnMut() -> Result<Tensor>,
    mut pattern: Option<&mut dyn FnMut() -> Result<Vec<bool>>>,
    h: f64,
    max_coords: usize,
) -> Result<(f64, usize)> {
    let analytic = {
        let l = loss()?;
        let grads = l.backward()?;
        match grads.get(var.as_tensor()) {
            Some(g) => flat_f64(g)?,
            None => vec![0.0; var.elem_count()],
        }
    };
    let base = flat_f64(var.as_tensor())?;
    let dims = var.dims().to_vec();
    let set = |v: Vec<f64>| -> Result<()> {
        var.set(&Tensor::from_vec(v, dims.as_slice(), var.device())?.to_dtype(var.dtype())?)?;
        Ok(())
    };
    let n = base.len();
    let step = (n / max_coords.max(1)).max(1);
    let (mut max_diff, mut max_ref, mut skipped) = (0.0f64, 0.0f64, 0);
    for i in (0..n).step_by(step).take(max_coords) {
        let mut side = |delta: f64| -> Result<(f64, Option<Vec<bool>>)> {
            let mut v = base.clone();
            v[i] += delta;
            set(v)?;
            let value = loss()?.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
            let p = match pattern.as_mut() {
                Some(f) => Some(f()?),
                None => None,
            };
            Ok((value, p))
        };
        let (plus, p_plus) = side(h)?;
        let (minus, p_minus) = side(-h)?;
        max_ref = max_ref.max(analytic[i].abs());
        if p_plus != p_minus {
            skipped += 1;
            continue;
        }
        let numeric = (plus - minus) / (2.0 * h);
        max_diff = max_diff.max((numeric - analytic[i]).abs());
    }
    set(base)?;
    Ok((if max_ref > 0.0 { max_diff / max_ref } else { max_diff }, skipped))
}
