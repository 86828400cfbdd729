use std::collections::BTreeMap;

use super::store::{ParamId, VarStore};
use super::tensor::{Real, Tensor};

/// RMSprop: `v ← ρ·v + (1−ρ)·g²`, `θ ← θ − lr·g / (√v + ε)`.
#[derive(Debug, Clone)]
pub struct RmsProp<F> {
    pub lr: f64,
    pub decay: f64,
    pub eps: f64,
    square_avg: BTreeMap<ParamId, Tensor<F>>,
}

impl<F: Real> RmsProp<F> {
    pub fn new(lr: f64, decay: f64, eps: f64) -> Self {
        Self {
            lr,
            decay,
            eps,
            square_avg: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, vs: &mut VarStore<F>, grads: &[(ParamId, Tensor<F>)]) {
        let (lr, rho, eps) = (F::of(self.lr), F::of(self.decay), F::of(self.eps));
        let one = F::one();
        for (id, g) in grads {
            if !vs.is_trainable(*id) {
                continue;
            }
            let avg = self
                .square_avg
                .entry(*id)
                .or_insert_with(|| Tensor::zeros(g.shape()));
            let param = vs.get_mut(*id);
            for ((p, v), &gv) in param
                .data_mut()
                .iter_mut()
                .zip(avg.data_mut().iter_mut())
                .zip(g.data())
            {
                *v = rho * *v + (one - rho) * gv * gv;
                *p -= lr * gv / (v.sqrt() + eps);
            }
        }
    }

    /// Per-parameter squared-gradient averages, keyed by parameter id.
    pub fn state(&self) -> &BTreeMap<ParamId, Tensor<F>> {
        &self.square_avg
    }

    pub fn set_state(&mut self, id: ParamId, value: Tensor<F>) {
        self.square_avg.insert(id, value);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::ParamKind;

    #[test]
    fn first_step_is_scaled_sign() {
        let mut vs = VarStore::<f64>::new();
        let id = vs.add("p", Tensor::from_vec(&[2], vec![1.0, 1.0]), ParamKind::Weight);
        let mut opt = RmsProp::new(0.01, 0.99, 0.0);
        opt.step(&mut vs, &[(id, Tensor::from_vec(&[2], vec![3.0, -0.5]))]);
        // v = 0.01 g², step = lr·g/(0.1|g|) = 0.1·sign(g)
        let p = vs.get(id).data();
        assert!((p[0] - 0.9).abs() < 1e-12);
        assert!((p[1] - 1.1).abs() < 1e-12);
    }

    #[test]
    fn frozen_params_untouched() {
        let mut vs = VarStore::<f64>::new();
        let id = vs.add("e.w", Tensor::from_vec(&[1], vec![1.0]), ParamKind::Weight);
        vs.set_frozen_prefix("e.", true);
        let mut opt = RmsProp::new(0.01, 0.99, 1e-8);
        opt.step(&mut vs, &[(id, Tensor::from_vec(&[1], vec![3.0]))]);
        assert_eq!(vs.get(id).data(), &[1.0]);
    }
}
