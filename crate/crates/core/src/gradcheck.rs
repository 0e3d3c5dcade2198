//! Central finite-difference oracle for reverse-mode gradients.
//!
//! The oracle only ever evaluates the forward closure; it never looks at
//! adjoints, so it stays independent of the code it checks.

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Central difference step.
    pub step: f64,
    /// Maximum allowed elementwise relative error.
    pub rel_tolerance: f64,
    /// Denominator floor: the error is relative to `max(|analytic|, |numeric|, floor)`.
    pub floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-5,
            rel_tolerance: 1e-5,
            floor: 1e-4,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Worst relative error per input tensor.
    pub per_input: Vec<f64>,
    pub max_rel_error: f64,
    /// `(input, flat index, analytic, numeric)` of the worst element.
    pub worst: Option<(usize, usize, f64, f64)>,
    pub checked: usize,
    pub passed: bool,
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Reverse-mode gradients of `f` wrt every input.
pub fn analytic_gradients<F>(inputs: &[Tensor], f: &F) -> Result<Vec<Tensor>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.variable(t)).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    Ok(vars.iter().map(|&v| tape.grad_tensor(v)).collect())
}

/// Evaluates the scalar output of `f` without recording gradients.
pub fn evaluate<F>(inputs: &[Tensor], f: &F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t)).collect();
    let out = f(&mut tape, &vars)?;
    Ok(tape.value(out).data()[0])
}

/// Central differences of `f` wrt every scalar of every input.
pub fn numeric_gradients<F>(inputs: &[Tensor], f: &F, step: f64) -> Result<Vec<Tensor>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for t in 0..inputs.len() {
        let mut g = Tensor::zeros(inputs[t].shape());
        for i in 0..inputs[t].len() {
            let orig = work[t].data()[i];
            work[t].data_mut()[i] = orig + step;
            let plus = evaluate(&work, f)?;
            work[t].data_mut()[i] = orig - step;
            let minus = evaluate(&work, f)?;
            work[t].data_mut()[i] = orig;
            g.data_mut()[i] = (plus - minus) / (2.0 * step);
        }
        out.push(g);
    }
    Ok(out)
}

/// Compares reverse-mode and finite-difference gradients of a scalar-valued `f`.
pub fn check_gradients<F>(inputs: &[Tensor], f: F, cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let analytic = analytic_gradients(inputs, &f)?;
    let numeric = numeric_gradients(inputs, &f, cfg.step)?;
    let mut per_input = Vec::with_capacity(inputs.len());
    let mut worst = None;
    let mut max_rel = 0.0f64;
    let mut checked = 0;
    for (t, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        let mut local = 0.0f64;
        for (i, (&av, &nv)) in a.data().iter().zip(n.data()).enumerate() {
            let e = relative_error(av, nv, cfg.floor);
            checked += 1;
            local = local.max(e);
            if e > max_rel || worst.is_none() {
                max_rel = max_rel.max(e);
                worst = Some((t, i, av, nv));
            }
        }
        per_input.push(local);
    }
    Ok(GradCheckReport {
        per_input,
        max_rel_error: max_rel,
        worst,
        checked,
        passed: max_rel <= cfg.rel_tolerance,
    })
}

/// Contracts `y` with a fixed weight tensor so every output element gets a
/// distinct adjoint: `loss = Σ y ⊙ w`.
pub fn weighted_sum(tape: &mut Tape, y: Var, weights: &Tensor) -> Result<Var> {
    let w = tape.constant(weights);
    let shape = tape.shape(y).to_vec();
    let w = tape.reshape(w, &shape)?;
    let p = tape.mul(y, w)?;
    tape.sum(p)
}
