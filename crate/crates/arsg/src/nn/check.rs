//! Finite-difference gradient checking.

use crate::error::Result;
use crate::nn::graph::{Graph, NodeRef, ParamStore};
use crate::nn::tensor::Real;

/// Compare analytic gradients against central finite differences.
///
/// `build` must deterministically construct the forward graph from the
/// current parameter values and return the scalar loss node. Returns the
/// maximum over all parameter elements of
/// |analytic - numeric| / max(|analytic|, |numeric|, 1e-12).
pub fn grad_check<F>(store: &mut ParamStore, step: Real, build: F) -> Result<Real>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<NodeRef>,
{
    let eval = |store: &ParamStore| -> Result<Real> {
        let mut g = Graph::new();
        let loss = build(&mut g, store)?;
        Ok(g.value(loss).item())
    };

    let mut g = Graph::new();
    let loss = build(&mut g, store)?;
    store.zero_grads();
    g.backward(loss, store)?;
    let analytic: Vec<Vec<Real>> = store.iter().map(|p| p.grad.data().to_vec()).collect();

    let mut max_err: Real = 0.0;
    let ids: Vec<_> = store.ids().collect();
    for (pi, id) in ids.iter().enumerate() {
        for i in 0..store.value(*id).len() {
            let orig = store.value(*id).data()[i];
            store.value_mut(*id).data_mut()[i] = orig + step;
            let up = eval(store)?;
            store.value_mut(*id).data_mut()[i] = orig - step;
            let down = eval(store)?;
            store.value_mut(*id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic[pi][i];
            let denom = a.abs().max(numeric.abs()).max(1e-12);
            let err = (a - numeric).abs() / denom;
            if err > max_err {
                max_err = err;
            }
        }
    }
    Ok(max_err)
}
