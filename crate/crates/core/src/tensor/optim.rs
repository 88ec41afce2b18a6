use super::{Parameter, Tensor};
use crate::error::{Error, Result};

/// Plain SGD: `p <- p - lr * grad` for every trainable parameter.
/// Frozen parameters are skipped without being read.
pub fn sgd_step(params: &mut [&mut Parameter], lr: f64) -> Result<()> {
    if !(lr > 0.0) {
        return Err(Error::Config(format!("learning rate must be > 0, got {lr}")));
    }
    for p in params.iter() {
        if p.requires_grad && p.grad.is_none() {
            return Err(Error::Contract(format!("trainable `{}` has no gradient", p.name)));
        }
    }
    for p in params.iter_mut() {
        if !p.requires_grad {
            continue;
        }
        let grad = p.grad.as_ref().expect("checked above");
        for (v, g) in p.value.data_mut().iter_mut().zip(grad.data()) {
            *v -= lr * g;
        }
    }
    Ok(())
}

/// Adam with bias correction. Used for backbone pretraining only; prompt tuning uses [`sgd_step`].
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Parameters must be passed in the same order on every call.
    pub fn step(&mut self, params: &mut [Parameter]) -> Result<()> {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() {
            return Err(Error::Contract("parameter list changed between Adam steps".into()));
        }
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            if !p.requires_grad {
                continue;
            }
            let Some(grad) = p.grad.as_ref() else {
                continue;
            };
            let (md, vd) = (m.data_mut(), v.data_mut());
            for (i, (w, g)) in p.value.data_mut().iter_mut().zip(grad.data()).enumerate() {
                md[i] = self.beta1 * md[i] + (1.0 - self.beta1) * g;
                vd[i] = self.beta2 * vd[i] + (1.0 - self.beta2) * g * g;
                *w -= self.lr * (md[i] / c1) / ((vd[i] / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_updates_trainable_only() {
        let mut p = Parameter::new("p", Tensor::scalar(1.0), true);
        p.grad = Some(Tensor::scalar(2.0));
        let mut frozen = Parameter::new("f", Tensor::scalar(0.3), false);
        frozen.grad = Some(Tensor::scalar(100.0));
        sgd_step(&mut [&mut p, &mut frozen], 0.1).unwrap();
        assert!((p.value.data()[0] - 0.8).abs() < 1e-15);
        assert_eq!(frozen.value.data()[0].to_bits(), 0.3f64.to_bits());
    }

    #[test]
    fn sgd_requires_grad_on_trainable() {
        let mut p = Parameter::new("p", Tensor::scalar(1.0), true);
        assert!(matches!(sgd_step(&mut [&mut p], 0.1), Err(Error::Contract(_))));
        p.grad = Some(Tensor::scalar(1.0));
        assert!(matches!(sgd_step(&mut [&mut p], 0.0), Err(Error::Config(_))));
    }
}
