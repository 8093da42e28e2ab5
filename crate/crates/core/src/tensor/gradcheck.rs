//! Central finite-difference checks against the tape's gradients.

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Outcome of a gradient check; `worst_*` locate the largest relative error.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub worst_param: usize,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub coords_checked: usize,
}

/// `|a - n| / max(1e-8, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Check every coordinate of every tensor in `params`.
///
/// `f` receives one leaf per entry of `params` and must return a scalar.
pub fn grad_check<F>(f: F, params: &[Tensor], eps: f64) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    grad_check_sampled(f, params, eps, None)
}

/// Like [`grad_check`] but only at the listed flat indices per tensor.
pub fn grad_check_sampled<F>(
    f: F,
    params: &[Tensor],
    eps: f64,
    coords: Option<&[Vec<usize>]>,
) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::contract(format!("eps {eps} outside [1e-7, 1e-3]")));
    }
    if let Some(c) = coords {
        if c.len() != params.len() {
            return Err(Error::contract("one coordinate list per parameter"));
        }
    }

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .map(|&v| tape.grad(v).expect("leaf params require grad"))
        .collect();

    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = ps.iter().map(|p| t.param(p.clone())).collect();
        let out = f(&mut t, &vs)?;
        let v = t.value(out).item()?;
        if !v.is_finite() {
            return Err(Error::NonFinite("objective at perturbed point".into()));
        }
        Ok(v)
    };

    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst_param: 0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        coords_checked: 0,
    };
    let mut work = params.to_vec();
    for p in 0..params.len() {
        let all: Vec<usize>;
        let indices = match coords {
            Some(c) => &c[p],
            None => {
                all = (0..params[p].numel()).collect();
                &all
            }
        };
        for &i in indices {
            let orig = params[p].data()[i];
            work[p].data_mut()[i] = orig + eps;
            let plus = eval(&work)?;
            work[p].data_mut()[i] = orig - eps;
            let minus = eval(&work)?;
            work[p].data_mut()[i] = orig;

            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[p].data()[i];
            let err = relative_error(a, numeric);
            report.coords_checked += 1;
            if err > report.max_rel_error || report.coords_checked == 1 {
                report.max_rel_error = err;
                report.worst_param = p;
                report.worst_index = i;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
