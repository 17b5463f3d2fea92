//! Central finite-difference gradient checking in 64-bit.

use super::{Tape, Tensor, Var};
use crate::error::Result;

#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    pub h: f64,
    pub rtol: f64,
    pub atol: f64,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck { h: 1e-5, rtol: 1e-4, atol: 1e-6 }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub failures: usize,
    pub max_abs_err: f64,
    /// (input, element, analytic, numeric) of the largest violation.
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures == 0 && self.checked > 0
    }
}

fn eval<F>(inputs: &[Tensor<f64>], f: &F) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars = inputs.iter().map(|t| tape.leaf(t, false)).collect::<Result<Vec<_>>>()?;
    let out = f(&mut tape, &vars)?;
    Ok(tape.scalar(out))
}

/// Reverse-mode gradients of `f` with respect to every input.
pub fn analytic_gradients<F>(inputs: &[Tensor<f64>], f: &F) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars = inputs.iter().map(|t| tape.leaf(t, true)).collect::<Result<Vec<_>>>()?;
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    Ok(vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.len()]))
        .collect())
}

/// Central differences `(f(x+h) − f(x−h)) / 2h` for every input element.
pub fn numeric_gradients<F>(inputs: &[Tensor<f64>], f: &F, h: f64) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut work = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut g = vec![0.0; inputs[i].len()];
        for (j, gj) in g.iter_mut().enumerate() {
            let x0 = inputs[i].data()[j];
            work[i].data_mut()[j] = x0 + h;
            let up = eval(&work, f)?;
            work[i].data_mut()[j] = x0 - h;
            let down = eval(&work, f)?;
            work[i].data_mut()[j] = x0;
            *gj = (up - down) / (2.0 * h);
        }
        out.push(g);
    }
    Ok(out)
}

/// Elementwise `|a − n| ≤ atol + rtol·|n|`.
pub fn compare(analytic: &[Vec<f64>], numeric: &[Vec<f64>], cfg: &GradCheck) -> GradCheckReport {
    let mut r = GradCheckReport::default();
    let mut worst_excess = f64::NEG_INFINITY;
    for (i, (a, n)) in analytic.iter().zip(numeric).enumerate() {
        for (j, (&av, &nv)) in a.iter().zip(n).enumerate() {
            r.checked += 1;
            let err = (av - nv).abs();
            r.max_abs_err = r.max_abs_err.max(err);
            let excess = err - (cfg.atol + cfg.rtol * nv.abs());
            if excess > 0.0 || !err.is_finite() {
                r.failures += 1;
            }
            if excess > worst_excess {
                worst_excess = excess;
                r.worst = Some((i, j, av, nv));
            }
        }
    }
    r
}

pub fn check_gradients<F>(inputs: &[Tensor<f64>], f: F, cfg: &GradCheck) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let a = analytic_gradients(inputs, &f)?;
    let n = numeric_gradients(inputs, &f, cfg.h)?;
    Ok(compare(&a, &n, cfg))
}
