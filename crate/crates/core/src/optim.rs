//! First-order optimizers over a list of parameter tensors.

use crate::autodiff::Tensor;
use crate::error::{invalid, shape_err, Result};

pub trait Optimizer {
    /// Applies one update in place. `grads` pairs with `params`.
    fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()>;
    fn learning_rate(&self) -> f64;
    fn set_learning_rate(&mut self, lr: f64);
}

fn check(params: &[Tensor], grads: &[Tensor], state: &mut Vec<Vec<f64>>) -> Result<()> {
    if params.len() != grads.len() {
        return Err(shape_err(format!("{} params, {} grads", params.len(), grads.len())));
    }
    if state.is_empty() {
        *state = params.iter().map(|p| vec![0.0; p.len()]).collect();
    }
    for ((p, g), s) in params.iter().zip(grads).zip(state.iter()) {
        if p.shape() != g.shape() || s.len() != p.len() {
            return Err(shape_err(format!("gradient {:?} for parameter {:?}", g.shape(), p.shape())));
        }
    }
    Ok(())
}

fn validate(lr: f64, decays: &[f64], eps: f64) -> Result<()> {
    if !(lr > 0.0 && eps > 0.0) || decays.iter().any(|d| !(0.0..1.0).contains(d)) {
        return Err(invalid(format!("bad optimizer hyperparameters lr={lr} decays={decays:?} eps={eps}")));
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct RmsProp {
    lr: f64,
    decay: f64,
    eps: f64,
    sq: Vec<Vec<f64>>,
}

impl RmsProp {
    pub fn new(lr: f64, decay: f64, eps: f64) -> Result<Self> {
        validate(lr, &[decay], eps)?;
        Ok(Self { lr, decay, eps, sq: Vec::new() })
    }
}

impl Optimizer for RmsProp {
    fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        check(params, grads, &mut self.sq)?;
        for ((p, g), s) in params.iter_mut().zip(grads).zip(&mut self.sq) {
            for ((x, &g), v) in p.data_mut().iter_mut().zip(g.data()).zip(s.iter_mut()) {
                *v = self.decay * *v + (1.0 - self.decay) * g * g;
                *x -= self.lr * g / (v.sqrt() + self.eps);
            }
        }
        Ok(())
    }

    fn learning_rate(&self) -> f64 {
        self.lr
    }

    fn set_learning_rate(&mut self, lr: f64) {
        self.lr = lr;
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Result<Self> {
        validate(lr, &[beta1, beta2], eps)?;
        Ok(Self { lr, beta1, beta2, eps, t: 0, m: Vec::new(), v: Vec::new() })
    }
}

impl Optimizer for Adam {
    fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        check(params, grads, &mut self.m)?;
        check(params, grads, &mut self.v)?;
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((x, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *x -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }

    fn learning_rate(&self) -> f64 {
        self.lr
    }

    fn set_learning_rate(&mut self, lr: f64) {
        self.lr = lr;
    }
}
