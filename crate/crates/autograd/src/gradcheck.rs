//! Central finite-difference checks of reverse-mode gradients.

use crate::{Array, Graph, ParamId, ParamStore, Var};

/// Outcome of checking one scalar coordinate.
#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradCheck {
    /// `|a - n| / max(|a|, |n|, floor)`.
    pub fn relative_error(&self, floor: f64) -> f64 {
        let denom = self.analytic.abs().max(self.numeric.abs()).max(floor);
        (self.analytic - self.numeric).abs() / denom
    }
}

/// Compares the autodiff gradient of `loss` with respect to parameter `id`
/// at the given flat `indices` against `(L(p + h) - L(p - h)) / 2h`.
pub fn check_param(
    store: &ParamStore,
    id: ParamId,
    indices: &[usize],
    h: f64,
    loss: impl for<'g> Fn(&'g Graph<'g>) -> Var<'g>,
) -> Vec<GradCheck> {
    let analytic = {
        let g = Graph::new(store);
        let out = loss(&g);
        let grads = g.backward(out);
        grads
            .param(id)
            .cloned()
            .unwrap_or_else(|| Array::zeros(store.get(id).shape()))
    };
    let mut work = store.clone();
    let eval = |work: &ParamStore| {
        let g = Graph::inference(work);
        loss(&g).item()
    };
    indices
        .iter()
        .map(|&i| {
            let orig = work.get(id).data()[i];
            work.get_mut(id).data_mut()[i] = orig + h;
            let plus = eval(&work);
            work.get_mut(id).data_mut()[i] = orig - h;
            let minus = eval(&work);
            work.get_mut(id).data_mut()[i] = orig;
            GradCheck {
                index: i,
                analytic: analytic.data()[i],
                numeric: (plus - minus) / (2.0 * h),
            }
        })
        .collect()
}

/// Checks every coordinate of the gradient of `f` with respect to a free
/// input `x`; panics with the first mismatch beyond `tol` (absolute or
/// relative, whichever is looser).
pub fn check_input_grad(x: &Array, h: f64, tol: f64, f: impl for<'g> Fn(Var<'g>) -> Var<'g>) {
    let store = ParamStore::new();
    let analytic = {
        let g = Graph::new(&store);
        let v = g.input(x.clone());
        let out = f(v);
        let grads = g.backward(out);
        grads.wrt(v).cloned().unwrap_or_else(|| Array::zeros(x.shape()))
    };
    let eval = |x: Array| {
        let g = Graph::inference(&store);
        f(g.constant(x)).item()
    };
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(plus) - eval(minus)) / (2.0 * h);
        let a = analytic.data()[i];
        let err = (a - numeric).abs();
        assert!(
            err <= tol || err <= tol * a.abs().max(numeric.abs()),
            "gradient mismatch at {i}: analytic {a}, numeric {numeric}"
        );
    }
}
