use super::{Tape, Tensor, Var};
use crate::{Error, Result};

/// Compares the recorded gradient of `f` at `x` with central differences.
///
/// Returns the largest `|analytic - numeric| / max(|analytic|, |numeric|, 1e-12)`
/// over all components of `x`.
pub fn finite_difference_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let all: Vec<usize> = (0..x.len()).collect();
    finite_difference_check_at(f, x, eps, &all)
}

/// Same as [`finite_difference_check`] restricted to the listed components.
pub fn finite_difference_check_at<F>(f: F, x: &Tensor<f64>, eps: f64, components: &[usize]) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::invalid("eps must be positive"));
    }
    if !x.all_finite() {
        return Err(Error::NonFinite("gradient check input".into()));
    }
    let eval = |t: &Tensor<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.leaf(t);
        let out = f(&mut tape, v)?;
        let y = tape.scalar(out);
        if !y.is_finite() {
            return Err(Error::NonFinite("gradient check objective".into()));
        }
        Ok(y)
    };

    let mut probe = x.clone();
    probe.requires_grad = true;
    let analytic = {
        let mut tape = Tape::new();
        let v = tape.leaf(&probe);
        let out = f(&mut tape, v)?;
        if !tape.scalar(out).is_finite() {
            return Err(Error::NonFinite("gradient check objective".into()));
        }
        tape.backward(out)?.get(v)?.to_vec()
    };
    if analytic.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("analytic gradient".into()));
    }

    let mut worst = 0.0f64;
    for &i in components {
        if i >= x.len() {
            return Err(Error::invalid(format!("component {i} out of range")));
        }
        let base = x.data()[i];
        probe.data_mut()[i] = base + eps;
        let up = eval(&probe)?;
        probe.data_mut()[i] = base - eps;
        let down = eval(&probe)?;
        probe.data_mut()[i] = base;
        let numeric = (up - down) / (2.0 * eps);
        let a = analytic[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-12);
        worst = worst.max(rel);
    }
    Ok(worst)
}
