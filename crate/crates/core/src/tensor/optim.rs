use std::collections::HashMap;

use super::Parameter;
use crate::error::{Error, Result};

/// SGD with heavy-ball momentum and per-parameter L2 decay:
/// `v <- momentum * v + grad + decay * w`, `w <- w - lr * v`.
#[derive(Clone, Debug, Default)]
pub struct Sgd {
    momentum: f64,
    velocity: HashMap<String, Vec<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64) -> Self {
        Self { momentum, velocity: HashMap::new() }
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    /// Updates every parameter in `params`. `decay` maps identifiers to
    /// their decay coefficient; missing entries decay by zero.
    pub fn step<'a>(
        &mut self,
        params: impl IntoIterator<Item = &'a mut Parameter>,
        lr: f64,
        decay: &HashMap<String, f64>,
    ) -> Result<()> {
        let params: Vec<&mut Parameter> = params.into_iter().collect();
        if let Some(p) = params.iter().find(|p| p.grad().is_none()) {
            return Err(Error::Uninitialized(format!(
                "parameter {} has no gradient; run backward before stepping",
                p.id()
            )));
        }
        for p in params {
            let wd = decay.get(p.id()).copied().unwrap_or(0.0);
            let grad = p.grad().expect("checked above").data().to_vec();
            let n = grad.len();
            let v = self.velocity.entry(p.id().to_string()).or_insert_with(|| vec![0.0; n]);
            let w = p.value_mut().data_mut();
            for i in 0..n {
                v[i] = self.momentum * v[i] + grad[i] + wd * w[i];
                w[i] -= lr * v[i];
            }
        }
        Ok(())
    }
}

/// One-shot SGD step with fresh (zero) momentum state.
pub fn sgd_step<'a>(
    params: impl IntoIterator<Item = &'a mut Parameter>,
    lr: f64,
    momentum: f64,
    decay: &HashMap<String, f64>,
) -> Result<()> {
    Sgd::new(momentum).step(params, lr, decay)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Gradients, Tensor};

    fn param_with_grad(w: f64, g: f64) -> Parameter {
        let mut p = Parameter::new("w", Tensor::scalar(w));
        let mut grads = Gradients::new();
        grads.insert("w".into(), Tensor::scalar(g));
        p.load_grad(&grads);
        p
    }

    #[test]
    fn plain_step() {
        let mut p = param_with_grad(1.0, 2.0);
        sgd_step([&mut p], 0.1, 0.0, &HashMap::new()).unwrap();
        assert!((p.value().item() - 0.8).abs() < 1e-15);
    }

    #[test]
    fn zero_grad_is_fixed_point() {
        let mut p = param_with_grad(1.25, 0.0);
        sgd_step([&mut p], 0.1, 0.9, &HashMap::new()).unwrap();
        assert_eq!(p.value().item(), 1.25);
    }

    #[test]
    fn momentum_recurrence_two_steps() {
        let (lr, mu, wd) = (0.1, 0.9, 0.01);
        let mut p = param_with_grad(1.0, 0.5);
        let mut opt = Sgd::new(mu);
        let decay: HashMap<_, _> = [("w".to_string(), wd)].into();
        opt.step([&mut p], lr, &decay).unwrap();
        opt.step([&mut p], lr, &decay).unwrap();
        // hand recurrence
        let (mut w, mut v) = (1.0f64, 0.0f64);
        for _ in 0..2 {
            v = mu * v + 0.5 + wd * w;
            w -= lr * v;
        }
        assert!((p.value().item() - w).abs() < 1e-12);
    }

    #[test]
    fn step_before_backward_fails() {
        let mut p = Parameter::new("w", Tensor::scalar(1.0));
        let err = sgd_step([&mut p], 0.1, 0.0, &HashMap::new()).unwrap_err();
        assert!(matches!(err, Error::Uninitialized(_)));
    }
}
