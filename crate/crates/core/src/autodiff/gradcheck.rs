//! Central finite-difference checks against the tape's analytic gradients.

use super::{ParamStore, Tape, Tensor, Var};
use crate::error::{MagnetError, Result};

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

fn eval_scalar<F>(f: &F, x: &Tensor) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let v = tape.leaf(x.clone());
    let out = f(&mut tape, v)?;
    let y = tape.value(out);
    if y.len() != 1 {
        return Err(MagnetError::Contract(format!(
            "gradient check needs a scalar function, got {:?}",
            y.shape()
        )));
    }
    let y = y.item();
    if !y.is_finite() {
        return Err(MagnetError::Numeric {
            name: "f(x)".into(),
            detail: format!("non-finite value {y}"),
        });
    }
    Ok(y)
}

/// Max relative error between the tape gradient of `f` at `x` and central
/// differences with step `eps`, using `|a − n| / max(1, |a|, |n|)`.
pub fn check_gradients<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if eps <= 0.0 {
        return Err(MagnetError::Input("eps must be positive".into()));
    }
    eval_scalar(&f, x)?;
    let mut tape = Tape::new();
    let v = tape.leaf(x.clone());
    let out = f(&mut tape, v)?;
    tape.backward(out)?;
    let analytic = tape
        .grad(v)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape()));
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval_scalar(&f, &plus)? - eval_scalar(&f, &minus)?) / (2.0 * eps);
        worst = worst.max(rel_err(analytic.data()[i], numeric));
    }
    Ok(worst)
}

/// Same check with respect to every scalar of every parameter in `store`.
/// `max_coords` limits the number of probed coordinates per parameter
/// (evenly strided) to keep large networks affordable.
pub fn check_param_gradients<F>(
    store: &mut ParamStore,
    f: F,
    eps: f64,
    max_coords: Option<usize>,
) -> Result<f64>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    if eps <= 0.0 {
        return Err(MagnetError::Input("eps must be positive".into()));
    }
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let out = f(&mut tape, store)?;
        let y = tape.value(out);
        if y.len() != 1 || !y.item().is_finite() {
            return Err(MagnetError::Numeric {
                name: "f(params)".into(),
                detail: format!("non-scalar or non-finite output {:?}", y.data()),
            });
        }
        Ok(y.item())
    };
    store.zero_grad();
    let mut tape = Tape::new();
    let out = f(&mut tape, store)?;
    tape.backward(out)?;
    tape.accumulate_param_grads(store);
    let mut worst: f64 = 0.0;
    for id in store.ids().collect::<Vec<_>>() {
        let n = store.get(id).value.len();
        let stride = match max_coords {
            Some(m) if m > 0 && n > m => n.div_ceil(m),
            _ => 1,
        };
        for i in (0..n).step_by(stride) {
            let analytic = store.get(id).grad.data()[i];
            let orig = store.get(id).value.data()[i];
            store.get_mut(id).value.data_mut()[i] = orig + eps;
            let fp = eval(store)?;
            store.get_mut(id).value.data_mut()[i] = orig - eps;
            let fm = eval(store)?;
            store.get_mut(id).value.data_mut()[i] = orig;
            let numeric = (fp - fm) / (2.0 * eps);
            worst = worst.max(rel_err(analytic, numeric));
        }
    }
    store.zero_grad();
    Ok(worst)
}
