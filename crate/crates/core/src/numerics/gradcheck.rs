//! Central finite-difference gradient checking.

use super::params::ParamStore;
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

fn check_eps(eps: f64) -> Result<()> {
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::InvalidArgument(format!("eps {eps} outside [1e-7, 1e-3]")));
    }
    Ok(())
}

fn finite(v: f64, what: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(format!("objective evaluation ({what})")))
    }
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(1.0)
}

/// Compares the tape gradient of a scalar function of `params` with central
/// differences. Returns `max |analytic - numeric| / max(1, |analytic|)`.
pub fn grad_check<F>(f: F, params: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape<'_>, &[Var]) -> Result<Var>,
{
    check_eps(eps)?;
    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.leaf(p.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.scalar(out))
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    finite(tape.scalar(out), "base point")?;
    let grads = tape.backward(out)?;

    let mut worst = 0.0f64;
    let mut work = params.to_vec();
    for (pi, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(*var).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; params[pi].len()]);
        for j in 0..params[pi].len() {
            let orig = params[pi].data()[j];
            work[pi].data_mut()[j] = orig + eps;
            let plus = finite(eval(&work)?, "+eps")?;
            work[pi].data_mut()[j] = orig - eps;
            let minus = finite(eval(&work)?, "-eps")?;
            work[pi].data_mut()[j] = orig;
            worst = worst.max(rel_err(analytic[j], (plus - minus) / (2.0 * eps)));
        }
    }
    Ok(worst)
}

/// [`grad_check`] over every scalar of a parameter store. `f` builds the loss
/// on a tape bound to the (possibly perturbed) store.
pub fn grad_check_store<F>(store: &ParamStore, f: F, eps: f64) -> Result<f64>
where
    F: for<'a> Fn(&mut Tape<'a>) -> Result<Var>,
{
    check_eps(eps)?;
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut tape = Tape::with_params(s);
        let out = f(&mut tape)?;
        Ok(tape.scalar(out))
    };

    let mut tape = Tape::with_params(store);
    let out = f(&mut tape)?;
    finite(tape.scalar(out), "base point")?;
    let grads = tape.backward(out)?;

    let mut worst = 0.0f64;
    let mut work = store.clone();
    for id in store.ids() {
        let n = store.get(id).len();
        let analytic = grads.param(id).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; n]);
        for j in 0..n {
            let orig = store.get(id).data()[j];
            work.get_mut(id).data_mut()[j] = orig + eps;
            let plus = finite(eval(&work)?, "+eps")?;
            work.get_mut(id).data_mut()[j] = orig - eps;
            let minus = finite(eval(&work)?, "-eps")?;
            work.get_mut(id).data_mut()[j] = orig;
            worst = worst.max(rel_err(analytic[j], (plus - minus) / (2.0 * eps)));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let err = grad_check(|t, v| Ok(t.square(v[0])), &[Tensor::scalar(3.0)], 1e-5).unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn nan_parameter_is_an_evaluation_error() {
        let r = grad_check(|t, v| Ok(t.square(v[0])), &[Tensor::scalar(f64::NAN)], 1e-5);
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }

    #[test]
    fn eps_range_enforced() {
        assert!(grad_check(|t, v| Ok(t.square(v[0])), &[Tensor::scalar(1.0)], 1e-2).is_err());
        assert!(grad_check(|t, v| Ok(t.square(v[0])), &[Tensor::scalar(1.0)], 1e-9).is_err());
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // relu kink inside the stencil gives a visible mismatch
        let err = grad_check(|t, v| Ok(t.relu(v[0])), &[Tensor::scalar(0.0)], 1e-4).unwrap();
        assert!(err > 0.4);
    }
}
