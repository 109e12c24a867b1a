//! Adam with bias correction.

use crate::error::{Error, Result};
use crate::graph::{Grads, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    first: Vec<Tensor<T>>,
    second: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamState<T> {
    /// Zero moments for every tensor in `store`, default betas and epsilon.
    pub fn new(store: &ParamStore<T>, lr: T) -> Self {
        let zeros = |s: &ParamStore<T>| s.iter().map(|(_, _, v)| Tensor::zeros(v.shape())).collect::<Vec<_>>();
        Self {
            step: 0,
            lr,
            beta1: T::lit(0.9),
            beta2: T::lit(0.999),
            eps: T::lit(1e-8),
            first: zeros(store),
            second: zeros(store),
        }
    }

    pub fn first_moment(&self, id: ParamId) -> &Tensor<T> {
        &self.first[id.index()]
    }

    pub fn second_moment(&self, id: ParamId) -> &Tensor<T> {
        &self.second[id.index()]
    }
}

/// One Adam update of every parameter.
pub fn adam_step<T: Scalar>(store: &mut ParamStore<T>, grads: &Grads<T>, state: &mut AdamState<T>) -> Result<()> {
    adam_step_filtered(store, grads, state, |_| true)
}

/// One Adam update of the parameters selected by `update`; the others and
/// their moments are left untouched.
pub fn adam_step_filtered<T: Scalar>(
    store: &mut ParamStore<T>,
    grads: &Grads<T>,
    state: &mut AdamState<T>,
    update: impl Fn(ParamId) -> bool,
) -> Result<()> {
    if grads.len() != store.len() || state.first.len() != store.len() {
        return Err(Error::shape("adam_step", "parameter, gradient and moment counts differ"));
    }
    for id in store.ids() {
        let (p, g) = (store.get(id), grads.get(id));
        if p.shape() != g.shape() || p.shape() != state.first[id.index()].shape() {
            return Err(Error::shape("adam_step", format!("{}: {:?} vs grad {:?}", store.name(id), p.shape(), g.shape())));
        }
    }
    state.step += 1;
    let t = i32::try_from(state.step).unwrap_or(i32::MAX);
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = T::one() - b1.powi(t);
    let c2 = T::one() - b2.powi(t);
    for id in store.ids().collect::<Vec<_>>() {
        if !update(id) {
            continue;
        }
        let g = grads.get(id).data();
        let m = state.first[id.index()].data_mut();
        let v = state.second[id.index()].data_mut();
        let p = store.get_mut(id).data_mut();
        for i in 0..p.len() {
            m[i] = b1 * m[i] + (T::one() - b1) * g[i];
            v[i] = b2 * v[i] + (T::one() - b2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            p[i] -= state.lr * m_hat / (v_hat.sqrt() + state.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup(p: Vec<f64>, g: Vec<f64>) -> (ParamStore<f64>, Grads<f64>, ParamId) {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::vector(p));
        let mut grads = Grads::zeros_like(&store);
        // Route the gradient through a tiny graph so Grads stays opaque.
        let gt = Tensor::vector(g);
        {
            let mut graph = crate::graph::Graph::new(&store);
            let w = graph.param(id);
            let c = graph.input(gt).unwrap();
            let prod = graph.mul(w, c).unwrap();
            let s = graph.sum(prod).unwrap();
            graph.backward(s, &mut grads).unwrap();
        }
        (store, grads, id)
    }

    #[test]
    fn zero_gradient_is_identity() {
        let (mut store, grads, id) = setup(vec![0.3, -1.2], vec![0.0, 0.0]);
        let mut st = AdamState::new(&store, 1e-4);
        for _ in 0..3 {
            adam_step(&mut store, &grads, &mut st).unwrap();
        }
        assert_eq!(store.get(id).data(), &[0.3, -1.2]);
    }

    #[test]
    fn first_step_moves_by_lr_against_sign() {
        let (mut store, grads, id) = setup(vec![1.0, 1.0, 1.0], vec![0.5, -3.0, 1e-3]);
        let lr = 1e-4;
        let mut st = AdamState::new(&store, lr);
        adam_step(&mut store, &grads, &mut st).unwrap();
        for (p, s) in store.get(id).data().iter().zip([1.0, -1.0, 1.0]) {
            // |g| / (|g| + eps) differs from 1 by at most eps/|g|.
            assert!((p - (1.0 - lr * s)).abs() <= lr * 1e-5, "{p}");
        }
    }

    #[test]
    fn two_fixed_gradient_steps_match_unrolled_form() {
        let g = 0.2;
        let (mut store, grads, id) = setup(vec![0.0], vec![g]);
        let lr = 0.01;
        let mut st = AdamState::new(&store, lr);
        adam_step(&mut store, &grads, &mut st).unwrap();
        adam_step(&mut store, &grads, &mut st).unwrap();
        // Hand-unrolled: m1 = .1g, v1 = .001g², m2 = .19g, v2 = .001999g².
        let step = |m: f64, v: f64, t: i32| lr * (m / (1.0 - 0.9f64.powi(t))) / ((v / (1.0 - 0.999f64.powi(t))).sqrt() + 1e-8);
        let expect = -step(0.1 * g, 0.001 * g * g, 1) - step(0.19 * g, 0.001999 * g * g, 2);
        assert!((store.get(id).item() - expect).abs() < 1e-15);
        assert_eq!(st.step, 2);
    }

    #[test]
    fn zero_learning_rate_changes_nothing() {
        let (mut store, grads, id) = setup(vec![0.7], vec![1.5]);
        let mut st = AdamState::new(&store, 0.0);
        adam_step(&mut store, &grads, &mut st).unwrap();
        assert_eq!(store.get(id).item(), 0.7);
    }

    #[test]
    fn filtered_step_skips_frozen() {
        let (mut store, grads, id) = setup(vec![0.7], vec![1.5]);
        let mut st = AdamState::new(&store, 0.1);
        adam_step_filtered(&mut store, &grads, &mut st, |_| false).unwrap();
        assert_eq!(store.get(id).item(), 0.7);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let (store, grads, _) = setup(vec![0.7], vec![1.5]);
        let mut other = ParamStore::new();
        other.add("w", Tensor::vector(vec![1.0, 2.0]));
        let mut st = AdamState::new(&store, 0.1);
        assert!(adam_step(&mut other, &grads, &mut st).is_err());
    }
}
