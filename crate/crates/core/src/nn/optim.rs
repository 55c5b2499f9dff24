use super::tensor::LayerParams;
use crate::error::{Error, Result};
use crate::scalar::Real;

/// Fraction of training after which the learning rate starts its cosine decay.
pub const ANNEAL_POINT: f64 = 0.72;

/// Learning rate at `step` out of `total`: constant until the anneal point,
/// then a half cosine down to zero at `total`.
pub fn cosine_lr(base_lr: f64, step: u64, total: u64, anneal_point: f64) -> f64 {
    let t = step as f64;
    let total = total as f64;
    let start = anneal_point * total;
    if t < start || total <= start {
        return base_lr;
    }
    let frac = ((t - start) / (total - start)).min(1.0);
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
}

/// Adam moments and schedule position.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState<T: Real> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub step: u64,
    pub base_lr: f64,
    pub total_steps: u64,
    pub anneal_point: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Real> OptimState<T> {
    pub fn new(params: &LayerParams<T>, base_lr: f64, total_steps: u64) -> Self {
        let zeros = || params.iter().map(|(_, t)| vec![T::zero(); t.len()]).collect();
        Self {
            m: zeros(),
            v: zeros(),
            step: 0,
            base_lr,
            total_steps,
            anneal_point: ANNEAL_POINT,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn lr(&self) -> f64 {
        cosine_lr(self.base_lr, self.step, self.total_steps, self.anneal_point)
    }

    /// Checks that the moment buffers line up with `params`.
    pub fn check(&self, params: &LayerParams<T>) -> Result<()> {
        let ok = self.m.len() == params.len()
            && self.v.len() == params.len()
            && params.iter().zip(&self.m).zip(&self.v).all(|(((_, t), m), v)| m.len() == t.len() && v.len() == t.len());
        if ok {
            Ok(())
        } else {
            Err(Error::ShapeMismatch("optimizer state does not match the parameters".into()))
        }
    }
}

/// One Adam step with bias correction at the scheduled learning rate, then
/// clears the gradients. Returns the learning rate used.
pub fn opt_step<T: Real>(params: &mut LayerParams<T>, state: &mut OptimState<T>) -> f64 {
    let lr = state.lr();
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 / (1.0 - b1.powi(t));
    let c2 = 1.0 / (1.0 - b2.powi(t));
    let (b1t, b2t, eps) = (T::lit(b1), T::lit(b2), T::lit(state.eps));
    let (step, c1, c2) = (T::lit(lr), T::lit(c1), T::lit(c2));
    for ((p, m), v) in params.tensors_mut().zip(&mut state.m).zip(&mut state.v) {
        let (data, grad) = p.data_and_grad_mut();
        for i in 0..grad.len() {
            let g = grad[i];
            m[i] = b1t * m[i] + (T::one() - b1t) * g;
            v[i] = b2t * v[i] + (T::one() - b2t) * g * g;
            data[i] -= step * (m[i] * c1) / ((v[i] * c2).sqrt() + eps);
            grad[i] = T::zero();
        }
    }
    lr
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Tensor;

    #[test]
    fn schedule_endpoints() {
        assert_eq!(cosine_lr(1e-4, 0, 1000, ANNEAL_POINT), 1e-4);
        assert_eq!(cosine_lr(1e-4, 720, 1000, ANNEAL_POINT), 1e-4);
        assert!(cosine_lr(1e-4, 1000, 1000, ANNEAL_POINT).abs() < 1e-20);
        assert!((cosine_lr(1e-4, 860, 1000, ANNEAL_POINT) - 0.5e-4).abs() < 1e-12);
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = LayerParams::<f32>::new();
        p.add("w", Tensor::new(&[2], vec![0.5, -1.5]).unwrap());
        let mut s = OptimState::new(&p, 1e-2, 10);
        opt_step(&mut p, &mut s);
        assert_eq!(p.iter().next().unwrap().1.data(), &[0.5, -1.5]);
    }

    #[test]
    fn quadratic_descent() {
        let mut p = LayerParams::<f64>::new();
        let id = p.add("w", Tensor::scalar(1.0));
        let mut s = OptimState::new(&p, 1e-2, 2000);
        s.anneal_point = 1.0;
        for _ in 0..2000 {
            let w = p.get(id).data()[0];
            p.get_mut(id).grad_mut().unwrap()[0] = 2.0 * w;
            opt_step(&mut p, &mut s);
        }
        assert!(p.get(id).data()[0].abs() < 1e-3);
    }
}
