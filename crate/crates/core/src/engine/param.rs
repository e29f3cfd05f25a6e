use std::collections::HashMap;

use super::tensor::{Shape, Tensor};
use crate::error::{Error, Result};

/// A trainable tensor with its gradient buffer.
///
/// `touched` records whether any backward pass accumulated into `grad` since
/// the last optimizer step; untouched parameters are skipped by [`Sgd`], which
/// keeps unchosen supernet blocks bitwise frozen.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    touched: bool,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self {
            name: name.into(),
            value,
            grad,
            touched: false,
        }
    }

    pub fn shape(&self) -> Shape {
        self.value.shape()
    }

    pub fn numel(&self) -> usize {
        self.value.numel()
    }

    pub fn accumulate(&mut self, grad: &Tensor) -> Result<()> {
        self.grad.add_assign(grad)?;
        self.touched = true;
        Ok(())
    }

    /// Accumulates into the gradient through a closure over the raw buffer.
    pub fn accumulate_with(&mut self, f: impl FnOnce(&mut [f32])) {
        f(self.grad.data_mut());
        self.touched = true;
    }

    pub fn is_touched(&self) -> bool {
        self.touched
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
        self.touched = false;
    }
}

/// Stochastic gradient descent with heavy-ball momentum and L2 weight decay.
///
/// Per parameter: `g' = g + wd*w`, `v = mu*v + g'`, `w = w - lr*v`.
#[derive(Debug, Clone, Default)]
pub struct Sgd {
    pub momentum: f32,
    pub weight_decay: f32,
    velocity: HashMap<String, Vec<f32>>,
}

impl Sgd {
    pub fn new(momentum: f32, weight_decay: f32) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::config(format!("momentum {momentum} outside [0, 1)")));
        }
        if weight_decay < 0.0 {
            return Err(Error::config(format!("negative weight decay {weight_decay}")));
        }
        Ok(Self {
            momentum,
            weight_decay,
            velocity: HashMap::new(),
        })
    }

    pub fn check_lr(lr: f32) -> Result<()> {
        if lr < 0.0 || !lr.is_finite() {
            return Err(Error::config(format!("learning rate must be non-negative, got {lr}")));
        }
        Ok(())
    }

    /// Updates one parameter if a backward pass touched it, then zeroes its grad.
    /// `lr` must already have passed [`Sgd::check_lr`].
    pub fn apply(&mut self, p: &mut Parameter, lr: f32) {
        if !p.touched {
            return;
        }
        let v = self
            .velocity
            .entry(p.name.clone())
            .or_insert_with(|| vec![0.0; p.value.numel()]);
        let grad = p.grad.data();
        let value = p.value.data_mut();
        for i in 0..value.len() {
            let g = grad[i] + self.weight_decay * value[i];
            v[i] = self.momentum * v[i] + g;
            value[i] -= lr * v[i];
        }
        p.zero_grad();
    }

    /// Applies one update to every touched parameter.
    pub fn step<'a, I>(&mut self, params: I, lr: f32) -> Result<()>
    where
        I: IntoIterator<Item = &'a mut Parameter>,
    {
        Self::check_lr(lr)?;
        for p in params {
            self.apply(p, lr);
        }
        Ok(())
    }
}

/// Step size at `step` of `total` under cosine decay to zero.
pub fn cosine_lr(base: f32, step: usize, total: usize) -> f32 {
    if total == 0 {
        return base;
    }
    let t = step as f64 / total as f64;
    (base as f64 * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())) as f32
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f32) -> Parameter {
        Parameter::new("w", Tensor::full(Shape::new(1, 1, 1, 1), v))
    }

    #[test]
    fn zero_grad_no_decay_leaves_params() {
        let mut p = scalar(0.5);
        p.accumulate(&Tensor::zeros(p.shape())).unwrap();
        let mut opt = Sgd::new(0.9, 0.0).unwrap();
        opt.step([&mut p], 0.1).unwrap();
        assert_eq!(p.value.data()[0], 0.5);
    }

    #[test]
    fn plain_step_moves_by_lr() {
        let mut p = scalar(1.0);
        p.accumulate(&Tensor::full(p.shape(), 1.0)).unwrap();
        let mut opt = Sgd::new(0.0, 0.0).unwrap();
        opt.step([&mut p], 0.1).unwrap();
        assert!((p.value.data()[0] - 0.9).abs() < 1e-7);
        assert_eq!(p.grad.data()[0], 0.0);
    }

    #[test]
    fn momentum_two_step_matches_hand_recursion() {
        // v1 = 1, w1 = 1 - 0.1*1 = 0.9
        // v2 = 0.9*1 + 2 = 2.9, w2 = 0.9 - 0.1*2.9 = 0.61
        let mut p = scalar(1.0);
        let mut opt = Sgd::new(0.9, 0.0).unwrap();
        p.accumulate(&Tensor::full(p.shape(), 1.0)).unwrap();
        opt.step([&mut p], 0.1).unwrap();
        assert!((p.value.data()[0] - 0.9).abs() < 1e-6);
        p.accumulate(&Tensor::full(p.shape(), 2.0)).unwrap();
        opt.step([&mut p], 0.1).unwrap();
        assert!((p.value.data()[0] - 0.61).abs() < 1e-6);
    }

    #[test]
    fn untouched_params_are_frozen() {
        let mut p = scalar(1.0);
        let mut opt = Sgd::new(0.9, 0.1).unwrap();
        opt.step([&mut p], 0.1).unwrap();
        assert_eq!(p.value.data()[0], 1.0);
    }

    #[test]
    fn negative_lr_is_config_error() {
        let mut p = scalar(1.0);
        let mut opt = Sgd::new(0.0, 0.0).unwrap();
        assert!(matches!(opt.step([&mut p], -0.1), Err(Error::Config(_))));
    }

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(0.1, 0, 10), 0.1);
        assert!(cosine_lr(0.1, 10, 10).abs() < 1e-9);
        assert!((cosine_lr(0.1, 5, 10) - 0.05).abs() < 1e-7);
    }
}
