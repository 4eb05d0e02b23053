//! AdamW with decoupled weight decay and the polynomial learning-rate
//! schedule.

use std::collections::HashMap;

use crate::autograd::ParamId;
use crate::nn::Module;
use crate::tensor::Scalar;

/// `base * (1 - iter / max_iter)^0.9`
pub fn poly_lr(iter: usize, max_iter: usize, base: f64) -> f64 {
    if max_iter == 0 {
        return base;
    }
    let frac = (iter.min(max_iter) as f64) / max_iter as f64;
    base * (1.0 - frac).powf(0.9)
}

#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    moments: HashMap<ParamId, (Vec<f64>, Vec<f64>)>,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            step: 0,
            moments: HashMap::new(),
        }
    }
}

impl AdamW {
    pub fn new(beta1: f64, beta2: f64, weight_decay: f64) -> Self {
        Self {
            beta1,
            beta2,
            weight_decay,
            ..Self::default()
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update of every trainable parameter of `module` from its
    /// accumulated gradient, at learning rate `lr`. Gradients are left in
    /// place.
    pub fn step<T: Scalar, M: Module<T> + ?Sized>(&mut self, module: &mut M, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2, eps, wd) = (self.beta1, self.beta2, self.eps, self.weight_decay);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let moments = &mut self.moments;
        module.visit_params("", &mut |_, p| {
            if !p.trainable {
                return;
            }
            let len = p.value.len();
            let (m, v) = moments
                .entry(p.id())
                .or_insert_with(|| (vec![0.0; len], vec![0.0; len]));
            let grad = p.grad.data().to_vec();
            for (i, w) in p.value.data_mut().iter_mut().enumerate() {
                let g = grad[i].as_f64();
                m[i] = b1 * m[i] + (1.0 - b1) * g;
                v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                let update = (m[i] / c1) / ((v[i] / c2).sqrt() + eps) + wd * w.as_f64();
                *w -= T::from_f64_lossy(lr * update);
            }
        });
    }
}

/// Clears the accumulated gradient of every parameter.
pub fn zero_grad<T: Scalar, M: Module<T> + ?Sized>(module: &mut M) {
    module.visit_params("", &mut |_, p| p.zero_grad());
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Parameter;
    use crate::tensor::Tensor;

    struct One(Parameter<f64>);

    impl Module<f64> for One {
        fn visit_params(&mut self, _: &str, f: &mut dyn FnMut(&str, &mut Parameter<f64>)) {
            f("w", &mut self.0);
        }
    }

    #[test]
    fn poly_schedule_examples() {
        assert_eq!(poly_lr(0, 100, 5e-4), 5e-4);
        assert_eq!(poly_lr(100, 100, 5e-4), 0.0);
        assert!((poly_lr(50, 100, 5e-4) - 5e-4 * 0.5f64.powf(0.9)).abs() < 1e-15);
        assert!((0.5f64.powf(0.9) - 0.53589).abs() < 1e-5);
    }

    #[test]
    fn zero_rate_leaves_parameters_unchanged() {
        let mut m = One(Parameter::new(
            Tensor::new(vec![2], vec![1.0, -2.0]).unwrap(),
        ));
        m.0.grad = Tensor::new(vec![2], vec![0.3, 0.7]).unwrap();
        let mut opt = AdamW::default();
        opt.step(&mut m, 0.0);
        assert_eq!(m.0.value.data(), &[1.0, -2.0]);
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut m = One(Parameter::new(
            Tensor::new(vec![2], vec![1.0, -2.0]).unwrap(),
        ));
        m.0.grad = Tensor::new(vec![2], vec![0.3, -0.7]).unwrap();
        let mut opt = AdamW::new(0.9, 0.999, 0.0);
        opt.step(&mut m, 0.1);
        assert!((m.0.value.data()[0] - 0.9).abs() < 1e-6);
        assert!((m.0.value.data()[1] + 1.9).abs() < 1e-6);
    }

    #[test]
    fn decay_shrinks_weights_without_gradient() {
        let mut m = One(Parameter::new(Tensor::new(vec![1], vec![2.0]).unwrap()));
        let mut opt = AdamW::default();
        opt.step(&mut m, 0.1);
        assert!((m.0.value.data()[0] - 2.0 * (1.0 - 0.1 * 0.01)).abs() < 1e-12);
    }
}
