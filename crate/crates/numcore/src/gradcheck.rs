//! Central finite-difference verification of reverse-mode gradients.

use crate::error::{NumError, Result};
use crate::graph::{Graph, Var};
use crate::kernels::par_map;
use crate::params::ParamStore;

/// Worst coordinate seen by [`grad_check`].
#[derive(Debug, Clone, PartialEq)]
pub struct Worst {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub coordinates: usize,
    pub worst: Option<Worst>,
}

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn eval<L>(store: &ParamStore<f64>, loss_fn: &L) -> Result<f64>
where
    L: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = loss_fn(&mut g, store)?;
    let v = g.value(loss);
    if !v.is_scalar() {
        return Err(NumError::NonScalarLoss(v.shape().to_vec()));
    }
    Ok(v.item())
}

/// Finite-difference formula used by [`grad_check_with`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum Stencil {
    /// `(f(θ+h) − f(θ−h)) / 2h`, error `O(h²)`.
    #[default]
    Central,
    /// `(−f(θ+2h) + 8f(θ+h) − 8f(θ−h) + f(θ−2h)) / 12h`, error `O(h⁴)`.
    /// Tolerates a larger `h`, which cuts the round-off of the difference.
    FourthOrder,
}

/// Compares analytic gradients of `loss_fn` against central differences
/// `(f(θ+h) − f(θ−h)) / 2h` for every coordinate of every parameter in `store`.
///
/// `loss_fn` must build its graph in evaluation mode and be deterministic;
/// two evaluations at the unperturbed point that differ bitwise are an error.
/// Coordinates are checked in parallel when the `parallel` feature is on.
pub fn grad_check<L>(store: &ParamStore<f64>, loss_fn: L, h: f64) -> Result<GradCheckReport>
where
    L: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var> + Sync + Send,
{
    grad_check_with(store, loss_fn, h, Stencil::Central)
}

/// [`grad_check`] with a chosen stencil.
pub fn grad_check_with<L>(
    store: &ParamStore<f64>,
    loss_fn: L,
    h: f64,
    stencil: Stencil,
) -> Result<GradCheckReport>
where
    L: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var> + Sync + Send,
{
    let mut g = Graph::new();
    let loss = loss_fn(&mut g, store)?;
    let base = g.value(loss).item();
    let grads = g.backward(loss)?;
    let again = eval(store, &loss_fn)?;
    if base.to_bits() != again.to_bits() {
        return Err(NumError::NonDeterministic(format!(
            "two evaluations gave {base:e} and {again:e}"
        )));
    }

    let bound: std::collections::HashMap<&str, Var> = g.bound_params().collect();
    let mut coords = Vec::new();
    let mut analytic = Vec::new();
    for (name, p) in store.iter() {
        let grad = bound.get(name).map(|&v| grads.get_or_zero(v));
        for i in 0..p.value.numel() {
            coords.push((name.to_string(), i));
            analytic.push(grad.as_ref().map_or(0.0, |t| t.data()[i]));
        }
    }

    let numeric: Vec<Result<f64>> = par_map(&coords, |(name, i)| {
        let mut local = store.clone();
        let orig = local.get(name)?.data()[*i];
        let mut at = |delta: f64| -> Result<f64> {
            local.get_mut(name)?.data_mut()[*i] = orig + delta;
            eval(&local, &loss_fn)
        };
        Ok(match stencil {
            Stencil::Central => (at(h)? - at(-h)?) / (2.0 * h),
            Stencil::FourthOrder => {
                (8.0 * (at(h)? - at(-h)?) - (at(2.0 * h)? - at(-2.0 * h)?)) / (12.0 * h)
            }
        })
    });

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        coordinates: coords.len(),
        worst: None,
    };
    for (((name, i), a), n) in coords.into_iter().zip(analytic).zip(numeric) {
        let n = n?;
        let err = relative_error(a, n);
        if err > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(err);
            report.worst = Some(Worst {
                param: name,
                index: i,
                analytic: a,
                numeric: n,
            });
        }
    }
    Ok(report)
}
