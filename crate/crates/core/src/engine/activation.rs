use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActKind {
    Relu,
    Relu6,
    Sigmoid,
}

impl ActKind {
    #[inline]
    pub fn apply(self, v: f32) -> f32 {
        match self {
            ActKind::Relu => v.max(0.0),
            ActKind::Relu6 => v.clamp(0.0, 6.0),
            ActKind::Sigmoid => 1.0 / (1.0 + (-v).exp()),
        }
    }

    /// Derivative expressed through the input `x` and output `y`.
    #[inline]
    fn derivative(self, x: f32, y: f32) -> f32 {
        match self {
            ActKind::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            ActKind::Relu6 => {
                if x > 0.0 && x < 6.0 {
                    1.0
                } else {
                    0.0
                }
            }
            ActKind::Sigmoid => y * (1.0 - y),
        }
    }
}

pub fn activation(x: &Tensor, kind: ActKind) -> Tensor {
    let mut y = x.clone();
    y.data_mut().iter_mut().for_each(|v| *v = kind.apply(*v));
    y
}

/// Elementwise nonlinearity with cached input/output for backward.
#[derive(Debug, Clone)]
pub struct Activation {
    pub kind: ActKind,
    cache: Option<(Tensor, Tensor)>,
}

impl Activation {
    pub fn new(kind: ActKind) -> Self {
        Self { kind, cache: None }
    }

    pub fn forward(&mut self, x: &Tensor) -> Tensor {
        let y = activation(x, self.kind);
        self.cache = Some((x.clone(), y.clone()));
        y
    }

    pub fn infer(&self, x: &Tensor) -> Tensor {
        activation(x, self.kind)
    }

    pub fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let (x, y) = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::State("activation backward called before forward".into()))?;
        grad.ensure_same_shape(x, "activation backward")?;
        let mut gx = grad.clone();
        for ((g, &xv), &yv) in gx.data_mut().iter_mut().zip(x.data()).zip(y.data()) {
            *g *= self.kind.derivative(xv, yv);
        }
        Ok(gx)
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }
}
