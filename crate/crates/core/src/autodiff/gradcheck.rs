//! Central finite-difference verification of analytic gradients.

use super::{GradientFault, Graph, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;

/// Denominator floor of the relative error, so gradients that are zero up to
/// roundoff are compared absolutely instead of amplified.
pub const RELATIVE_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    /// Largest finite-difference derivative magnitude over the tensor; 0 means
    /// the loss does not depend on this parameter at the checked point.
    pub max_abs_numeric: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub step: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params
            .iter()
            .all(|p| p.max_rel_error <= self.tolerance)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.max_rel_error)
            .fold(0.0, f64::max)
    }

    /// The parameter with the largest relative error.
    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

/// Compares the analytic gradient of `loss` with central differences for every
/// element of every parameter in `params`. Parameters the loss never binds have
/// an analytic gradient of zero.
pub fn finite_diff_check<F>(
    loss: F,
    params: &ParamStore<f64>,
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    finite_diff_check_with_fault(loss, params, step, tolerance, None)
}

pub fn finite_diff_check_with_fault<F>(
    loss: F,
    params: &ParamStore<f64>,
    step: f64,
    tolerance: f64,
    fault: Option<GradientFault>,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    if step.is_nan() || step <= 0.0 {
        return Err(Error::Argument(format!(
            "finite-difference step must be positive, got {step}"
        )));
    }
    let mut g = Graph::new().with_fault(fault);
    let out = loss(&mut g, params)?;
    check_finite(g.value(out).item())?;
    g.backward(out)?;

    let eval = |p: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::inference();
        let out = loss(&mut g, p)?;
        let v = g.value(out).item();
        check_finite(v)?;
        Ok(v)
    };

    let mut probe = params.clone();
    let mut report = GradCheckReport {
        tolerance,
        step,
        params: Vec::new(),
    };
    let names: Vec<String> = params.names().map(str::to_owned).collect();
    for name in names {
        let analytic: Vec<f64> = match g.param_grad(&name) {
            Some(gr) => gr.to_vec(),
            None => vec![0.0; params.get(&name).unwrap().numel()],
        };
        let mut entry = ParamCheck {
            name: name.clone(),
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
            max_abs_numeric: 0.0,
        };
        for (i, &a) in analytic.iter().enumerate() {
            let orig = params.get(&name).unwrap().data()[i];
            probe.get_mut(&name).unwrap().data_mut()[i] = orig + step;
            let plus = eval(&probe)?;
            probe.get_mut(&name).unwrap().data_mut()[i] = orig - step;
            let minus = eval(&probe)?;
            probe.get_mut(&name).unwrap().data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            entry.max_abs_numeric = entry.max_abs_numeric.max(numeric.abs());
            let err = relative_error(a, numeric);
            if err > entry.max_rel_error || i == 0 {
                entry.max_rel_error = err;
                entry.worst_index = i;
                entry.analytic = a;
                entry.numeric = numeric;
            }
        }
        report.params.push(entry);
    }
    Ok(report)
}

fn check_finite(v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("loss evaluated to {v}")))
    }
}
