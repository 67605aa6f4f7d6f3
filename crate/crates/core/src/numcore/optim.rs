use super::params::{Gradients, ParamStore};
use super::tensor::Tensor;
use crate::scalar::Scalar;

/// Running averages for adadelta, one pair per parameter tensor.
///
/// Per value, with gradient `g`:
///
/// ```text
/// E[g²]  ← ρ E[g²] + (1-ρ) g²
/// Δx     = -sqrt(E[Δx²] + ε) / sqrt(E[g²] + ε) · g
/// E[Δx²] ← ρ E[Δx²] + (1-ρ) Δx²
/// x      ← x + Δx
/// ```
#[derive(Debug, Clone)]
pub struct AdadeltaState<T> {
    rho: T,
    eps: T,
    sq_grad: Vec<Tensor<T>>,
    sq_delta: Vec<Tensor<T>>,
}

impl<T: Scalar> AdadeltaState<T> {
    /// Panics unless `rho` is in (0, 1) and `eps` is positive.
    pub fn new(store: &ParamStore<T>, rho: f64, eps: f64) -> Self {
        assert!(
            rho > 0.0 && rho < 1.0,
            "adadelta rho must lie in (0, 1), got {rho}"
        );
        assert!(eps > 0.0, "adadelta eps must be positive, got {eps}");
        let zeros: Vec<Tensor<T>> = store
            .iter()
            .map(|(_, _, v)| Tensor::zeros(v.shape()))
            .collect();
        AdadeltaState {
            rho: T::of(rho),
            eps: T::of(eps),
            sq_grad: zeros.clone(),
            sq_delta: zeros,
        }
    }

    pub fn rho(&self) -> T {
        self.rho
    }

    pub fn eps(&self) -> T {
        self.eps
    }

    /// E[g²] for every parameter, in store order.
    pub fn sq_grad(&self) -> &[Tensor<T>] {
        &self.sq_grad
    }

    pub fn sq_delta(&self) -> &[Tensor<T>] {
        &self.sq_delta
    }

    /// Applies one update in place.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>) {
        let (rho, eps) = (self.rho, self.eps);
        let keep = T::one() - rho;
        for (i, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let g = grads.get(id).data();
            let eg = self.sq_grad[i].data_mut();
            let ed = self.sq_delta[i].data_mut();
            let x = store.get_mut(id).data_mut();
            for j in 0..x.len() {
                let gj = g[j];
                eg[j] = rho * eg[j] + keep * gj * gj;
                let delta = -((ed[j] + eps).sqrt() / (eg[j] + eps).sqrt()) * gj;
                ed[j] = rho * ed[j] + keep * delta * delta;
                x[j] += delta;
            }
        }
    }
}

/// Rescales all gradients together when their global L2 norm exceeds
/// `max_norm`. Returns the norm measured before clipping.
///
/// Panics if `max_norm` is not positive.
pub fn clip_gradients<T: Scalar>(grads: &mut Gradients<T>, max_norm: f64) -> T {
    assert!(max_norm > 0.0, "clip threshold must be positive");
    let norm = grads.global_norm();
    let limit = T::of(max_norm);
    if norm > limit {
        let factor = limit / norm;
        for g in grads.iter_mut() {
            g.scale_in_place(factor);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::ParamStore;

    fn one_param(value: f64) -> ParamStore<f64> {
        let mut store = ParamStore::new();
        store.add("x", Tensor::scalar(value));
        store
    }

    fn grad_of(store: &ParamStore<f64>, g: f64) -> Gradients<f64> {
        let mut grads = Gradients::zeros_like(store);
        grads.get_mut(store.id("x").unwrap()).data_mut()[0] = g;
        grads
    }

    /// Hand evaluation of the three recurrences for a single value.
    fn first_step_delta(g: f64, rho: f64, eps: f64) -> f64 {
        let eg = (1.0 - rho) * g * g;
        -(eps.sqrt() / (eg + eps).sqrt()) * g
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut store = one_param(0.7);
        let mut state = AdadeltaState::new(&store, 0.95, 1e-8);
        let grads = Gradients::zeros_like(&store);
        for _ in 0..5 {
            state.step(&mut store, &grads);
        }
        assert_eq!(store.get(store.id("x").unwrap()).data()[0], 0.7);
    }

    #[test]
    fn first_step_matches_hand_evaluation() {
        let expected = first_step_delta(1.0, 0.95, 1e-8);
        assert!((expected - -4.4721e-4).abs() < 1e-8, "{expected}");
        let mut store = one_param(0.0);
        let mut state = AdadeltaState::new(&store, 0.95, 1e-8);
        let g = grad_of(&store, 1.0);
        state.step(&mut store, &g);
        let x = store.get(store.id("x").unwrap()).data()[0];
        assert!((x - expected).abs() < 1e-15);
        let ed = state.sq_delta()[0].data()[0];
        assert!((ed - 0.05 * expected * expected).abs() < 1e-20);
    }

    #[test]
    fn first_step_is_scale_free() {
        let small = first_step_delta(1.0, 0.95, 1e-8);
        let large = first_step_delta(10.0, 0.95, 1e-8);
        assert!((small.abs() - large.abs()).abs() < 1e-8);

        let mut a = one_param(0.0);
        let mut b = one_param(0.0);
        let mut sa = AdadeltaState::new(&a, 0.95, 1e-8);
        let mut sb = AdadeltaState::new(&b, 0.95, 1e-8);
        let g = grad_of(&a, 1.0);
        sa.step(&mut a, &g);
        let g = grad_of(&b, 10.0);
        sb.step(&mut b, &g);
        let xa = a.get(a.id("x").unwrap()).data()[0];
        let xb = b.get(b.id("x").unwrap()).data()[0];
        assert!((xa - xb).abs() < 1e-8);
    }

    #[test]
    fn running_averages_stay_nonnegative() {
        let mut store = one_param(1.0);
        let mut state = AdadeltaState::new(&store, 0.95, 1e-8);
        for k in 0..20 {
            let g = if k % 2 == 0 { 3.0 } else { -0.5 };
            let g = grad_of(&store, g);
            state.step(&mut store, &g);
            assert!(state.sq_grad()[0].data()[0] >= 0.0);
            assert!(state.sq_delta()[0].data()[0] >= 0.0);
        }
    }

    fn grads_with(values: &[f64]) -> Gradients<f64> {
        let mut store = ParamStore::new();
        store.add("g", Tensor::from_f64(&[values.len()], values).unwrap());
        let mut grads = Gradients::zeros_like(&store);
        grads
            .get_mut(store.id("g").unwrap())
            .data_mut()
            .copy_from_slice(values);
        grads
    }

    #[test]
    fn clip_below_threshold_is_identity() {
        let mut g = grads_with(&[3.0, 4.0]);
        let norm = clip_gradients(&mut g, 10.0);
        assert_eq!(norm, 5.0);
        assert_eq!(g.iter().next().unwrap().data(), &[3.0, 4.0]);
    }

    #[test]
    fn clip_above_threshold_rescales_everything() {
        let mut g = grads_with(&[12.0, 16.0]);
        clip_gradients(&mut g, 10.0);
        assert_eq!(g.iter().next().unwrap().data(), &[6.0, 8.0]);
    }

    #[test]
    fn clip_of_zero_gradients_is_identity() {
        let mut g = grads_with(&[0.0, 0.0, 0.0]);
        clip_gradients(&mut g, 1.0);
        assert_eq!(g.iter().next().unwrap().data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn clip_is_idempotent() {
        let mut g = grads_with(&[30.0, -40.0, 5.0]);
        clip_gradients(&mut g, 7.0);
        let once = g.iter().next().unwrap().clone();
        clip_gradients(&mut g, 7.0);
        let twice = g.iter().next().unwrap();
        for (a, b) in once.data().iter().zip(twice.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(g.global_norm() <= 7.0 + 1e-9);
    }
}
