//! Central finite-difference verification of tape gradients.

use std::sync::Arc;

use crate::error::{Error, Result};

use super::tape::{Tape, Var};
use super::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub op_name: String,
    pub max_abs_err: f64,
    pub max_rel_err: f64,
    /// Number of scalar input coordinates compared.
    pub checked: usize,
    pub passed: bool,
}

/// Floor of the relative-error denominator.
const REL_FLOOR: f64 = 1e-8;

/// Compares the tape gradient of the scalar `f(inputs)` against central
/// differences `(f(x+eps) - f(x-eps)) / (2 eps)` for every input coordinate.
pub fn grad_check<F>(
    op_name: &str,
    inputs: &[Tensor],
    eps: f64,
    tol: f64,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::Config(format!(
            "grad_check eps {eps} outside [1e-7, 1e-3]"
        )));
    }

    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
    let out = f(&tape, &vars)?;
    let value = tape.value(out);
    if value.len() != 1 {
        return Err(Error::shape("grad_check", value.shape(), &[1]));
    }
    if !value.item().is_finite() {
        return Err(Error::NonFinite(op_name.to_string()));
    }
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(v, x)| grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(x.shape())))
        .collect();

    compare_gradients(op_name, inputs, &analytic, eps, tol, |perturbed| {
        let tape = Tape::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.variable(t.clone())).collect();
        Ok(tape.value(f(&tape, &vars)?).item())
    })
}

/// Central-difference comparison of `analytic` against `eval` around `inputs`.
/// Shared by checks that build their graphs differently.
pub fn compare_gradients(
    op_name: &str,
    inputs: &[Tensor],
    analytic: &[Tensor],
    eps: f64,
    tol: f64,
    mut eval: impl FnMut(&[Tensor]) -> Result<f64>,
) -> Result<GradCheckReport> {
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::Config(format!(
            "grad_check eps {eps} outside [1e-7, 1e-3]"
        )));
    }
    let mut max_abs: f64 = 0.0;
    let mut max_rel: f64 = 0.0;
    let mut checked = 0;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, analytic) in analytic.iter().enumerate() {
        for j in 0..inputs[i].len() {
            let orig = inputs[i].data()[j];
            work[i].data_mut()[j] = orig + eps;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = orig - eps;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            if !(plus.is_finite() && minus.is_finite()) {
                return Err(Error::NonFinite(op_name.to_string()));
            }

            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.data()[j];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(REL_FLOOR);
            max_abs = max_abs.max(abs);
            max_rel = max_rel.max(rel);
            checked += 1;
        }
    }

    Ok(GradCheckReport {
        op_name: op_name.to_string(),
        max_abs_err: max_abs,
        max_rel_err: max_rel,
        checked,
        passed: max_rel <= tol,
    })
}

/// `sum(y ⊙ weights)`: reduces any output to a scalar that still exercises
/// every output coordinate.
pub fn weighted_sum(tape: &Tape, y: Var, weights: &Arc<Tensor>) -> Result<Var> {
    let w = tape.constant(Arc::clone(weights));
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_eps_out_of_range() {
        let x = [Tensor::scalar(1.0)];
        let r = grad_check("id", &x, 1e-2, 1e-4, |t, v| t.sum(v[0]));
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn reports_non_finite_forward() {
        let x = [Tensor::scalar(-1.0)];
        let r = grad_check("ln", &x, 1e-6, 1e-4, |t, v| {
            let y = t.ln_clamped(v[0], f64::NEG_INFINITY)?;
            t.sum(y)
        });
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }

    #[test]
    fn detects_wrong_gradient() {
        // scale() is correct, so fake a wrong analytic gradient by checking a
        // function whose tape path is cut by a constant.
        let x = [Tensor::from_vec(vec![0.3, 0.7])];
        let report = grad_check("cut", &x, 1e-6, 1e-4, |t, v| {
            let c = t.constant(t.value(v[0]));
            let y = t.mul(v[0], c)?;
            t.sum(y)
        })
        .unwrap();
        assert!(!report.passed);
        assert!((report.max_rel_err - 0.5).abs() < 1e-6);
    }
}
