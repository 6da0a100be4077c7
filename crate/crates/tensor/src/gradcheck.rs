//! Central finite-difference check of reverse-mode gradients.

use crate::error::{invalid, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

pub const STEP: f64 = 1e-5;

/// Relative error floor in the denominator.
const REL_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(parameter, element)` where the maximum occurred.
    pub worst: Option<(usize, usize)>,
    pub analytic: Vec<Tensor>,
    pub numeric: Vec<Tensor>,
}

impl GradCheckReport {
    pub fn checked(&self) -> usize {
        self.analytic.iter().map(Tensor::len).sum()
    }
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

fn evaluate<F>(f: &F, params: &[Tensor]) -> Result<(Graph, Vec<Var>, Var)>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let out = f(&mut g, &vars)?;
    let v = g.value(out);
    if v.len() != 1 {
        return Err(invalid("grad_check", "function must return a scalar"));
    }
    if !v.is_finite() {
        return Err(invalid("grad_check", "non-finite function value"));
    }
    Ok((g, vars, out))
}

/// Compares the reverse-mode gradient of the scalar function `f` at
/// `params` against central differences with step [`STEP`].
///
/// `f` is re-run from scratch for every perturbation, so it must be a pure
/// function of its parameter variables.
pub fn grad_check<F>(params: &[Tensor], f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let (g, vars, out) = evaluate(&f, params)?;
    let grads = g.backward(out)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.grad(v)).collect();

    let mut numeric = Vec::with_capacity(params.len());
    let mut worst = None;
    let mut max_rel_error = 0.0;
    let mut probe = params.to_vec();
    for (pi, p) in params.iter().enumerate() {
        let mut num = Tensor::zeros(p.shape());
        for ei in 0..p.len() {
            let orig = p.data()[ei];
            probe[pi].data_mut()[ei] = orig + STEP;
            let (gp, _, op) = evaluate(&f, &probe)?;
            probe[pi].data_mut()[ei] = orig - STEP;
            let (gm, _, om) = evaluate(&f, &probe)?;
            probe[pi].data_mut()[ei] = orig;
            let d = (gp.value(op).item() - gm.value(om).item()) / (2.0 * STEP);
            if !d.is_finite() {
                return Err(invalid("grad_check", "non-finite difference"));
            }
            num.data_mut()[ei] = d;
            let err = relative_error(analytic[pi].data()[ei], d);
            if err > max_rel_error || worst.is_none() {
                max_rel_error = err;
                worst = Some((pi, ei));
            }
        }
        numeric.push(num);
    }
    Ok(GradCheckReport {
        max_rel_error,
        worst,
        analytic,
        numeric,
    })
}
