//! Central finite-difference verification of reverse-mode gradients.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::graph::{Graph, Var};
use super::params::ParamStore;

/// `|a − b| / max(|a| + |b|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Fourth-order central difference of `f` at offset zero with step `eps`.
fn derivative(eps: f64, mut f: impl FnMut(f64) -> Result<f64>) -> Result<f64> {
    let near = f(eps)? - f(-eps)?;
    let far = f(2.0 * eps)? - f(-2.0 * eps)?;
    Ok((8.0 * near - far) / (12.0 * eps))
}

fn scalar_of(g: &Graph<f64>, v: Var) -> Result<f64> {
    let (r, c) = g.shape(v);
    if (r, c) != (1, 1) {
        return Err(Error::invalid(format!(
            "gradient check needs a scalar output, got {r}x{c}"
        )));
    }
    Ok(g.value(v).item())
}

/// Checks `f` against fourth-order central differences with respect to every input
/// element. Returns the largest relative error.
pub fn grad_check<F>(inputs: &[Tensor<f64>], eps: f64, f: F) -> Result<f64>
where
    F: Fn(&Graph<f64>, &[Var]) -> Var,
{
    let g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = f(&g, &vars);
    scalar_of(&g, out)?;
    let grads = g.backward(out);
    let analytic: Vec<Tensor<f64>> = inputs
        .iter()
        .zip(&vars)
        .map(|(t, &v)| {
            grads
                .get(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.rows(), t.cols()))
        })
        .collect();

    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.input(t.clone())).collect();
        let out = f(&g, &vars);
        scalar_of(&g, out)
    };

    let mut worst = 0.0f64;
    let mut work = inputs.to_vec();
    for (k, a) in analytic.iter().enumerate() {
        for i in 0..work[k].len() {
            let orig = work[k].data()[i];
            let numeric = derivative(eps, |d| {
                work[k].data_mut()[i] = orig + d;
                eval(&work)
            })?;
            work[k].data_mut()[i] = orig;
            worst = worst.max(relative_error(a.data()[i], numeric));
        }
    }
    Ok(worst)
}

/// Checks the gradient of a scalar loss with respect to every trainable
/// parameter in `store`. `f` builds the loss on a fresh tape.
///
/// `max_per_param` bounds how many coordinates of each tensor are probed
/// (evenly strided); `None` probes all of them.
pub fn grad_check_params<F>(
    store: &mut ParamStore<f64>,
    eps: f64,
    max_per_param: Option<usize>,
    f: F,
) -> Result<f64>
where
    F: Fn(&Graph<f64>, &ParamStore<f64>) -> Var,
{
    store.zero_grad();
    {
        let g = Graph::new();
        let out = f(&g, store);
        scalar_of(&g, out)?;
        let mut grads_store = store.clone();
        g.backward_into(out, &mut grads_store);
        *store = grads_store;
    }
    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let g = Graph::new();
        let out = f(&g, s);
        scalar_of(&g, out)
    };
    let ids: Vec<_> = store
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(id, _)| id)
        .collect();
    let mut worst = 0.0f64;
    for id in ids {
        let n = store.get(id).value.len();
        let stride = match max_per_param {
            Some(m) if m > 0 && n > m => n.div_ceil(m),
            _ => 1,
        };
        for i in (0..n).step_by(stride) {
            let orig = store.get(id).value.data()[i];
            let numeric = derivative(eps, |d| {
                store.get_mut(id).value.data_mut()[i] = orig + d;
                eval(store)
            })?;
            store.get_mut(id).value.data_mut()[i] = orig;
            let analytic = store.get(id).grad.data()[i];
            worst = worst.max(relative_error(analytic, numeric));
        }
    }
    Ok(worst)
}
