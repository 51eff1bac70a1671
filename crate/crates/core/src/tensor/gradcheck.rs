//! Central finite-difference gradient checking.

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Worst relative error per input, in input order.
    pub per_input: Vec<f64>,
    pub analytic: Vec<Vec<f64>>,
    pub numeric: Vec<Vec<f64>>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.per_input.iter().copied().fold(0.0, f64::max)
    }
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-12)
}

/// Compares tape gradients of the scalar function `f` against central
/// differences with the given `step`, for every coordinate of `x`.
pub fn grad_check<'a, F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape<'a>, Var) -> Result<Var>,
{
    let report = grad_check_multi(|t, vs| f(t, vs[0]), std::slice::from_ref(x), step)?;
    Ok(report.max_rel_err())
}

/// [`grad_check`] over several inputs at once.
pub fn grad_check_multi<'a, F>(f: F, inputs: &[Tensor], step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<'a>, &[Var]) -> Result<Var>,
{
    if !(1e-6..=1e-3).contains(&step) {
        return Err(Error::Domain(format!(
            "finite-difference step {step} outside [1e-6, 1e-3]"
        )));
    }
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|t| tape.input(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.item(out))
    };

    let owned: Vec<Tensor> = inputs.iter().map(|t| t.clone().with_grad()).collect();
    let analytic: Vec<Vec<f64>> = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = owned.iter().map(|t| tape.input(t.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        let grads = tape.backward(loss)?;
        vars.iter()
            .zip(&owned)
            .map(|(v, t)| {
                grads
                    .get(*v)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; t.numel()])
            })
            .collect()
    };

    let mut probe: Vec<Tensor> = inputs.to_vec();
    let mut numeric = Vec::with_capacity(inputs.len());
    let mut per_input = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut num = vec![0.0; inputs[i].numel()];
        for (k, slot) in num.iter_mut().enumerate() {
            let orig = inputs[i].data()[k];
            probe[i].data_mut()[k] = orig + step;
            let up = eval(&probe)?;
            probe[i].data_mut()[k] = orig - step;
            let down = eval(&probe)?;
            probe[i].data_mut()[k] = orig;
            *slot = (up - down) / (2.0 * step);
        }
        let worst = analytic[i]
            .iter()
            .zip(&num)
            .map(|(&a, &n)| rel_err(a, n))
            .fold(0.0, f64::max);
        per_input.push(worst);
        numeric.push(num);
    }
    Ok(GradCheckReport {
        per_input,
        analytic,
        numeric,
    })
}
