//! Adam with bias correction and a reduce-on-plateau learning-rate rule.

use crate::error::{dim_err, Error, Result};
use crate::nn::ParamStore;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T: Real> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Real> AdamState<T> {
    /// Fresh state with β1 = 0.9, β2 = 0.999, ε = 1e-8.
    pub fn new(params: &ParamStore<T>, lr: f64) -> Self {
        let zeros: Vec<Tensor<T>> = params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update. Rejects non-finite gradients before touching any state.
    pub fn update(&mut self, params: &mut ParamStore<T>, grads: &[Tensor<T>]) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return dim_err(
                "adam",
                format!("{} params, {} grads, {} moments", params.len(), grads.len(), self.m.len()),
            );
        }
        for (i, (p, g)) in params.tensors().iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || self.m[i].shape() != p.shape() {
                return dim_err("adam", format!("shape mismatch for {}", params.name(i)));
            }
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("gradient of {}", params.name(i))));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for ((p, g), (m, v)) in params
            .tensors_mut()
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for (((pv, gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                let gf = gv.as_f64();
                let m1 = self.beta1 * mv.as_f64() + (1.0 - self.beta1) * gf;
                let v1 = self.beta2 * vv.as_f64() + (1.0 - self.beta2) * gf * gf;
                *mv = T::of_f64(m1);
                *vv = T::of_f64(v1);
                let upd = self.lr * (m1 / c1) / ((v1 / c2).sqrt() + self.eps);
                *pv = T::of_f64(pv.as_f64() - upd);
            }
        }
        Ok(())
    }
}

/// Multiplies the learning rate by `factor` once validation loss has failed
/// to improve by `threshold` for `patience` consecutive epochs.
#[derive(Clone, Debug, PartialEq)]
pub struct Plateau {
    pub factor: f64,
    pub patience: usize,
    pub threshold: f64,
    pub min_lr: f64,
    pub best: f64,
    pub bad_epochs: usize,
}

impl Plateau {
    pub fn new(factor: f64, patience: usize, threshold: f64, min_lr: f64) -> Self {
        Self {
            factor,
            patience,
            threshold,
            min_lr,
            best: f64::INFINITY,
            bad_epochs: 0,
        }
    }

    /// Feed one validation loss; returns the learning rate to use next.
    pub fn step(&mut self, val_loss: f64, lr: f64) -> f64 {
        if val_loss < self.best - self.threshold {
            self.best = val_loss;
            self.bad_epochs = 0;
            return lr;
        }
        self.bad_epochs += 1;
        if self.bad_epochs >= self.patience {
            self.bad_epochs = 0;
            return (lr * self.factor).max(self.min_lr).min(lr);
        }
        lr
    }
}

impl Default for Plateau {
    fn default() -> Self {
        Self::new(0.2, 5, 1e-4, 1e-6)
    }
}
