use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckFailure {
    pub param: usize,
    pub coord: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    pub failures: Vec<GradCheckFailure>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Gradients below this magnitude are compared absolutely: central
/// differences of an O(1) loss at `h = 1e-5` carry roundoff up to ~1e-10, so
/// exact zeros would otherwise read as large relative errors.
pub const GRADIENT_FLOOR: f64 = 1e-5;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRADIENT_FLOOR)
}

fn evaluate<F>(f: &F, params: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone().requires_grad(true))).collect();
    let out = f(&mut tape, &vars)?;
    if tape.value(out).len() != 1 {
        return Err(Error::Autodiff("gradient check target must be scalar".into()));
    }
    Ok(tape.scalar(out))
}

/// Compares tape gradients of the scalar `f` against central differences
/// `(f(p + h e) - f(p - h e)) / 2h` for every coordinate of every parameter.
pub fn finite_difference_check<F>(f: F, params: &[Tensor], h: f64, tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(Error::invalid(format!("step must be positive, got {h}")));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone().requires_grad(true))).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut report = GradCheckReport { max_rel_error: 0.0, checked: 0, failures: Vec::new() };
    let mut probe: Vec<Tensor> = params.to_vec();
    for (pi, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; params[pi].numel()]);
        for c in 0..params[pi].numel() {
            let orig = params[pi].data()[c];
            probe[pi].data_mut()[c] = orig + h;
            let plus = evaluate(&f, &probe)?;
            probe[pi].data_mut()[c] = orig - h;
            let minus = evaluate(&f, &probe)?;
            probe[pi].data_mut()[c] = orig;

            let numeric = (plus - minus) / (2.0 * h);
            let err = relative_error(analytic[c], numeric);
            report.checked += 1;
            report.max_rel_error = report.max_rel_error.max(err);
            if err >= tolerance || !err.is_finite() {
                report.failures.push(GradCheckFailure {
                    param: pi,
                    coord: c,
                    analytic: analytic[c],
                    numeric,
                    rel_error: err,
                });
            }
        }
    }
    Ok(report)
}
