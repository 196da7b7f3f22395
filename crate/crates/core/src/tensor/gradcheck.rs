use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic − numeric| / max(1e-8, |numeric|)` over all coordinates.
    pub max_rel_error: f64,
    /// `(parameter, coordinate)` attaining the maximum.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub coordinates: usize,
}

/// Compares reverse-mode gradients of `f` against central differences.
///
/// `f` receives a fresh tape with one leaf per entry of `params` and must
/// return a scalar. The numeric derivative uses the fourth-order central
/// stencil `(8[f(x+h) − f(x−h)] − [f(x+2h) − f(x−2h)]) / 12h`.
pub fn finite_diff_check<Fun>(mut f: Fun, params: &[Tensor<f64>], eps: f64) -> Result<GradCheckReport>
where
    Fun: FnMut(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!("eps must be positive, got {eps}")));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    if !tape.value(loss).all_finite() {
        return Err(Error::NonFinite {
            param: 0,
            coordinate: 0,
        });
    }
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| tape.grad(v).map_or_else(|| vec![0.0; p.numel()], <[f64]>::to_vec))
        .collect();

    let mut eval = |current: &[Tensor<f64>], param: usize, coordinate: usize| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = current.iter().map(|p| tape.constant(p.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let v = tape.value(out).data()[0];
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite { param, coordinate })
        }
    };

    let mut current = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        coordinates: 0,
    };
    for p in 0..params.len() {
        for i in 0..params[p].numel() {
            let x = params[p].data()[i];
            let mut at = |offset: f64, current: &mut Vec<Tensor<f64>>| -> Result<f64> {
                current[p].data_mut()[i] = x + offset;
                eval(current, p, i)
            };
            let f1 = at(eps, &mut current)?;
            let b1 = at(-eps, &mut current)?;
            let f2 = at(2.0 * eps, &mut current)?;
            let b2 = at(-2.0 * eps, &mut current)?;
            current[p].data_mut()[i] = x;
            let numeric = (8.0 * (f1 - b1) - (f2 - b2)) / (12.0 * eps);
            let a = analytic[p][i];
            let rel = (a - numeric).abs() / numeric.abs().max(1e-8);
            report.coordinates += 1;
            if rel > report.max_rel_error || report.coordinates == 1 {
                report.max_rel_error = rel;
                report.worst = (p, i);
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
