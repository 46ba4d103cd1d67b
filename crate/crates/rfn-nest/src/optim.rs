//! Named parameters and the gradient-descent optimizers.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// A named weight tensor. Frozen (`trainable = false`) parameters never
/// receive optimizer updates.
#[derive(Debug, Clone)]
pub struct Parameter<T: Scalar> {
    pub name: String,
    pub value: Tensor<T>,
    pub trainable: bool,
}

impl<T: Scalar> Parameter<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        Parameter {
            name: name.into(),
            value,
            trainable: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum OptimKind {
    /// Plain gradient descent; deterministic reference for tests.
    Sgd,
    #[default]
    Adam,
}

#[derive(Debug, Clone)]
struct Moments<T: Scalar> {
    m: Tensor<T>,
    v: Tensor<T>,
}

/// Adam (beta1 = 0.9, beta2 = 0.999, eps = 1e-8) or plain SGD. State is
/// keyed by parameter name and initialized to zeros on first sight.
#[derive(Debug)]
pub struct Optimizer<T: Scalar> {
    kind: OptimKind,
    lr: T,
    beta1: T,
    beta2: T,
    eps: T,
    step_count: u32,
    moments: HashMap<String, Moments<T>>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(kind: OptimKind, lr: f64) -> Self {
        Optimizer {
            kind,
            lr: T::from_f64(lr),
            beta1: T::from_f64(0.9),
            beta2: T::from_f64(0.999),
            eps: T::from_f64(1e-8),
            step_count: 0,
            moments: HashMap::new(),
        }
    }

    pub fn sgd(lr: f64) -> Self {
        Self::new(OptimKind::Sgd, lr)
    }

    pub fn adam(lr: f64) -> Self {
        Self::new(OptimKind::Adam, lr)
    }

    /// Apply one update. `grads[i]` belongs to `params[i]`; `None` entries
    /// and frozen parameters are skipped.
    pub fn step(
        &mut self,
        params: &mut [Parameter<T>],
        grads: &[Option<Tensor<T>>],
    ) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::shape(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        self.step_count += 1;
        let t = self.step_count;
        for (param, grad) in params.iter_mut().zip(grads) {
            let Some(grad) = grad else { continue };
            if !param.trainable {
                continue;
            }
            if grad.shape() != param.value.shape() {
                return Err(Error::shape(format!(
                    "gradient shape {:?} does not match parameter '{}' shape {:?}",
                    grad.shape(),
                    param.name,
                    param.value.shape()
                )));
            }
            match self.kind {
                OptimKind::Sgd => {
                    for (w, &g) in param.value.data_mut().iter_mut().zip(grad.data()) {
                        *w -= self.lr * g;
                    }
                }
                OptimKind::Adam => {
                    let entry = self.moments.entry(param.name.clone()).or_insert_with(|| {
                        Moments {
                            m: Tensor::zeros(grad.shape()),
                            v: Tensor::zeros(grad.shape()),
                        }
                    });
                    let one = T::one();
                    let bc1 = one - self.beta1.powi(t as i32);
                    let bc2 = one - self.beta2.powi(t as i32);
                    for ((w, &g), (m, v)) in param
                        .value
                        .data_mut()
                        .iter_mut()
                        .zip(grad.data())
                        .zip(entry.m.data_mut().iter_mut().zip(entry.v.data_mut()))
                    {
                        *m = self.beta1 * *m + (one - self.beta1) * g;
                        *v = self.beta2 * *v + (one - self.beta2) * g * g;
                        let mhat = *m / bc1;
                        let vhat = *v / bc2;
                        *w -= self.lr * mhat / (vhat.sqrt() + self.eps);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_param(name: &str, v: f64) -> Parameter<f64> {
        Parameter::new(name, Tensor::scalar(v))
    }

    #[test]
    fn sgd_update_is_w_minus_lr_g() {
        let mut params = vec![scalar_param("w", 1.0)];
        let mut opt = Optimizer::sgd(0.1);
        opt.step(&mut params, &[Some(Tensor::scalar(0.5))]).unwrap();
        assert_eq!(params[0].value.item(), 0.95);
    }

    #[test]
    fn zero_gradient_leaves_parameter_unchanged() {
        let mut params = vec![scalar_param("w", 0.3)];
        let mut opt = Optimizer::sgd(0.1);
        opt.step(&mut params, &[Some(Tensor::scalar(0.0))]).unwrap();
        assert_eq!(params[0].value.item(), 0.3);
    }

    #[test]
    fn frozen_parameter_is_untouched() {
        let mut params = vec![scalar_param("w", 1.0)];
        params[0].trainable = false;
        let mut opt = Optimizer::adam(0.1);
        opt.step(&mut params, &[Some(Tensor::scalar(2.0))]).unwrap();
        assert_eq!(params[0].value.item(), 1.0);
    }

    #[test]
    fn gradient_shape_mismatch_is_an_error() {
        let mut params = vec![scalar_param("w", 1.0)];
        let mut opt = Optimizer::sgd(0.1);
        let r = opt.step(&mut params, &[Some(Tensor::zeros(&[2]))]);
        assert!(matches!(r, Err(Error::Shape(_))));
    }

    /// Adam on f(w) = w^2 against a scalar replay of the update rule, plus
    /// the qualitative claim: |w| shrinks monotonically toward 0 once the
    /// moment estimates have warmed up.
    #[test]
    fn adam_matches_scalar_simulation_and_descends_on_quadratic() {
        let lr = 0.02;
        let (beta1, beta2, eps) = (0.9, 0.999, 1e-8);
        let mut params = vec![scalar_param("w", 1.0)];
        let mut opt = Optimizer::adam(lr);

        let (mut sim_w, mut sim_m, mut sim_v) = (1.0f64, 0.0f64, 0.0f64);
        let mut history = vec![1.0f64];
        for t in 1..=60 {
            let g = 2.0 * params[0].value.item();
            opt.step(&mut params, &[Some(Tensor::scalar(g))]).unwrap();

            let sim_g = 2.0 * sim_w;
            sim_m = beta1 * sim_m + (1.0 - beta1) * sim_g;
            sim_v = beta2 * sim_v + (1.0 - beta2) * sim_g * sim_g;
            let mhat = sim_m / (1.0 - beta1.powi(t));
            let vhat = sim_v / (1.0 - beta2.powi(t));
            sim_w -= lr * mhat / (vhat.sqrt() + eps);

            assert!((params[0].value.item() - sim_w).abs() < 1e-14);
            history.push(params[0].value.item());
        }
        let warmup = 3;
        for k in warmup..history.len() - 1 {
            assert!(
                history[k + 1].abs() <= history[k].abs() + 1e-12,
                "|w| grew at step {k}: {} -> {}",
                history[k],
                history[k + 1]
            );
        }
        assert!(history.last().unwrap().abs() < 0.5);
    }
}
