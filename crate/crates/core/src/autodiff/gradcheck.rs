use super::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Outcome of a central finite-difference gradient check.
#[derive(Debug, Clone)]
pub struct FdReport {
    /// `max |analytic − fd| / max(1, |analytic|)` over every parameter entry.
    pub max_rel_err: f64,
    /// `(param index, row, col)` of the worst entry.
    pub worst: Option<(usize, usize, usize)>,
    pub analytic: Vec<Matrix>,
    pub numeric: Vec<Matrix>,
}

/// Compares reverse-mode gradients against central differences with step `h`.
///
/// `f` receives a fresh tape with `params` bound as tracked leaves (in order)
/// and must return a `1 x 1` loss. It is evaluated `2·Σ|params| + 1` times, so
/// it must be deterministic.
pub fn fd_check<F>(params: &[Matrix], h: f64, f: F) -> Result<FdReport>
where
    F: Fn(&mut Tape, &[Tensor]) -> Result<Tensor>,
{
    if h.is_nan() || h <= 0.0 {
        return Err(Error::Config(format!(
            "finite-difference step must be positive, got {h}"
        )));
    }
    let eval = |values: &[Matrix]| -> Result<f64> {
        let mut tape = Tape::new();
        let handles: Vec<Tensor> = values.iter().map(|m| tape.param(m.clone())).collect();
        let loss = f(&mut tape, &handles)?;
        Ok(tape.value(loss).get(0, 0))
    };

    let mut tape = Tape::new();
    let handles: Vec<Tensor> = params.iter().map(|m| tape.param(m.clone())).collect();
    let loss = f(&mut tape, &handles)?;
    tape.backward(loss)?;
    let analytic: Vec<Matrix> = handles
        .iter()
        .zip(params)
        .map(|(&t, p)| {
            tape.grad(t)
                .cloned()
                .unwrap_or_else(|| Matrix::zeros(p.rows(), p.cols()))
        })
        .collect();

    let mut values = params.to_vec();
    let mut numeric = Vec::with_capacity(params.len());
    let mut max_rel_err = 0.0f64;
    let mut worst = None;
    for (pi, param) in params.iter().enumerate() {
        let mut fd = Matrix::zeros(param.rows(), param.cols());
        for idx in 0..param.len() {
            let (r, c) = (idx / param.cols(), idx % param.cols());
            let base = param.as_slice()[idx];
            values[pi].as_mut_slice()[idx] = base + h;
            let plus = eval(&values)?;
            values[pi].as_mut_slice()[idx] = base - h;
            let minus = eval(&values)?;
            values[pi].as_mut_slice()[idx] = base;

            let a = analytic[pi].get(r, c);
            let n = (plus - minus) / (2.0 * h);
            if !plus.is_finite() || !minus.is_finite() || !a.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite value in gradient check at param {pi} entry ({r}, {c})"
                )));
            }
            fd.set(r, c, n);
            let rel = (a - n).abs() / a.abs().max(1.0);
            if rel > max_rel_err || worst.is_none() {
                max_rel_err = max_rel_err.max(rel);
                worst = Some((pi, r, c));
            }
        }
        numeric.push(fd);
    }
    Ok(FdReport {
        max_rel_err,
        worst,
        analytic,
        numeric,
    })
}
