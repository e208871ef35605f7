//! Central finite-difference verification of graph gradients.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{Bound, ParamSet};

/// Per-parameter outcome of a [`gradient_check_report`].
#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub max_relative_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Denominator floor. Gradients that are exactly zero (a key bias under softmax, say) come
/// back from central differences as cancellation noise around 1e-10, which must not count.
const MAGNITUDE_FLOOR: f64 = 1e-5;

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(MAGNITUDE_FLOOR)
}

fn evaluate<F>(params: &ParamSet<f64>, loss_fn: &mut F) -> Result<f64>
where
    F: FnMut(&mut Graph<f64>, &Bound) -> Result<Var>,
{
    let mut graph = Graph::new();
    let bound = params.bind(&mut graph)?;
    let loss = loss_fn(&mut graph, &bound)?;
    let value = graph.value(loss);
    if value.len() != 1 {
        return Err(Error::contract("gradient check needs a scalar loss"));
    }
    Ok(value.item())
}

/// Compares reverse-mode gradients of `loss_fn` against central differences for every
/// scalar of every trainable parameter and reports the worst case per tensor.
pub fn gradient_check_report<F>(params: &ParamSet<f64>, epsilon: f64, mut loss_fn: F) -> Result<Vec<ParamCheck>>
where
    F: FnMut(&mut Graph<f64>, &Bound) -> Result<Var>,
{
    if epsilon.is_nan() || epsilon <= 0.0 {
        return Err(Error::config(format!("finite-difference step must be positive, got {epsilon}")));
    }
    let mut graph = Graph::new();
    let bound = params.bind(&mut graph)?;
    let loss = loss_fn(&mut graph, &bound)?;
    let base = graph.value(loss).item();
    let grads = graph.backward(loss)?;

    let again = evaluate(params, &mut loss_fn)?;
    if base.to_bits() != again.to_bits() {
        return Err(Error::Determinism(format!("two identical evaluations gave {base} and {again}")));
    }

    let mut work = params.clone();
    let mut report = Vec::new();
    for (name, tensor) in params.iter() {
        if !tensor.requires_grad {
            continue;
        }
        let var = bound.get(name)?;
        let zeros = vec![0.0; tensor.len()];
        let analytic = grads.get(var).unwrap_or(&zeros).to_vec();
        let mut check = ParamCheck {
            name: name.to_string(),
            max_relative_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for (i, (&a, &orig)) in analytic.iter().zip(tensor.data()).enumerate() {
            work.get_mut(name).expect("cloned set").data_mut()[i] = orig + epsilon;
            let plus = evaluate(&work, &mut loss_fn)?;
            work.get_mut(name).expect("cloned set").data_mut()[i] = orig - epsilon;
            let minus = evaluate(&work, &mut loss_fn)?;
            work.get_mut(name).expect("cloned set").data_mut()[i] = orig;

            let numeric = (plus - minus) / (2.0 * epsilon);
            let err = relative_error(a, numeric);
            if err > check.max_relative_error || i == 0 {
                check = ParamCheck {
                    name: check.name,
                    max_relative_error: err,
                    worst_index: i,
                    analytic: a,
                    numeric,
                };
            }
        }
        report.push(check);
    }
    Ok(report)
}

/// Maximum over all parameters of `|analytic - numeric| / max(|analytic|, |numeric|, 1e-5)`.
pub fn gradient_check<F>(params: &ParamSet<f64>, epsilon: f64, loss_fn: F) -> Result<f64>
where
    F: FnMut(&mut Graph<f64>, &Bound) -> Result<Var>,
{
    Ok(gradient_check_report(params, epsilon, loss_fn)?
        .iter()
        .map(|c| c.max_relative_error)
        .fold(0.0, f64::max))
}

#[cfg(test)]
mod tests {
    use std::cell::Cell;

    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn quadratic_is_exact() {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::full(&[1], 3.0));
        let err = gradient_check(&p, 1e-5, |g, b| {
            let w = b.get("w")?;
            let sq = g.mul(w, w)?;
            g.sum(sq)
        })
        .unwrap();
        assert!(err < 1e-8, "relative error {err}");
    }

    #[test]
    fn detects_nondeterminism() {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::full(&[1], 1.0));
        let calls = Cell::new(0.0);
        let res = gradient_check(&p, 1e-5, |g, b| {
            calls.set(calls.get() + 1.0);
            let w = b.get("w")?;
            g.scale(w, calls.get())
        });
        assert!(matches!(res, Err(Error::Determinism(_))));
    }

    #[test]
    fn linear_function_is_exact() {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::full(&[2], 0.5));
        let err = gradient_check(&p, 1e-5, |g, b| {
            let w = b.get("w")?;
            let s = g.scale(w, 2.0)?;
            g.sum(s)
        })
        .unwrap();
        assert!(err < 1e-9);
    }
}
