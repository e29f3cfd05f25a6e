use super::param::Parameter;
use super::tensor::{Shape, Tensor};
use crate::error::{Error, Result};

pub const BN_MOMENTUM: f32 = 0.1;
pub const BN_EPS: f32 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone)]
struct BnCache {
    x_hat: Tensor,
    inv_std: Vec<f32>,
}

/// Per-channel batch normalization with affine parameters and running stats.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: Parameter,
    pub beta: Parameter,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    /// Weight of the current batch in the running-stat update.
    pub momentum: f32,
    cache: Option<BnCache>,
}

impl BatchNorm {
    pub fn new(prefix: &str, channels: usize) -> Self {
        let shape = Shape::new(1, channels, 1, 1);
        Self {
            gamma: Parameter::new(format!("{prefix}.gamma"), Tensor::full(shape, 1.0)),
            beta: Parameter::new(format!("{prefix}.beta"), Tensor::zeros(shape)),
            running_mean: Tensor::zeros(shape),
            running_var: Tensor::full(shape, 1.0),
            momentum: BN_MOMENTUM,
            cache: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.shape().c
    }

    fn check(&self, x: &Tensor) -> Result<()> {
        if x.shape().c != self.channels() {
            return Err(Error::dim(format!(
                "batchnorm channel axis: input has {} channels, parameters have {}",
                x.shape().c,
                self.channels()
            )));
        }
        Ok(())
    }

    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        match mode {
            Mode::Eval => self.infer(x),
            Mode::Train => self.forward_train(x),
        }
    }

    fn forward_train(&mut self, x: &Tensor) -> Result<Tensor> {
        self.check(x)?;
        let s = x.shape();
        if s.n < 2 {
            return Err(Error::Statistics(format!(
                "batch of size {} cannot provide training statistics",
                s.n
            )));
        }
        let count = (s.n * s.plane()) as f64;
        let mut x_hat = Tensor::zeros(s);
        let mut y = Tensor::zeros(s);
        let mut inv_std = vec![0.0f32; s.c];
        for c in 0..s.c {
            let mut sum = 0.0f64;
            for n in 0..s.n {
                sum += x.plane(n, c).iter().map(|&v| v as f64).sum::<f64>();
            }
            let mean = sum / count;
            let mut sq = 0.0f64;
            for n in 0..s.n {
                sq += x
                    .plane(n, c)
                    .iter()
                    .map(|&v| {
                        let d = v as f64 - mean;
                        d * d
                    })
                    .sum::<f64>();
            }
            let var = sq / count;
            let istd = (1.0 / (var + BN_EPS as f64).sqrt()) as f32;
            inv_std[c] = istd;
            let (g, b) = (self.gamma.value.data()[c], self.beta.value.data()[c]);
            let mean32 = mean as f32;
            for n in 0..s.n {
                let xs = x.plane(n, c);
                let xh = x_hat.plane_mut(n, c);
                for (h, &v) in xh.iter_mut().zip(xs) {
                    *h = (v - mean32) * istd;
                }
                let xh = x_hat.plane(n, c).to_vec();
                for (o, h) in y.plane_mut(n, c).iter_mut().zip(&xh) {
                    *o = g * h + b;
                }
            }
            let unbiased = if count > 1.0 { sq / (count - 1.0) } else { var };
            let rm = &mut self.running_mean.data_mut()[c];
            *rm = (1.0 - self.momentum) * *rm + self.momentum * mean32;
            let rv = &mut self.running_var.data_mut()[c];
            *rv = (1.0 - self.momentum) * *rv + self.momentum * unbiased as f32;
        }
        self.cache = Some(BnCache { x_hat, inv_std });
        Ok(y)
    }

    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        self.check(x)?;
        let s = x.shape();
        let mut y = Tensor::zeros(s);
        for c in 0..s.c {
            let istd = 1.0 / (self.running_var.data()[c] + BN_EPS).sqrt();
            let scale = self.gamma.value.data()[c] * istd;
            let shift = self.beta.value.data()[c] - self.running_mean.data()[c] * scale;
            for n in 0..s.n {
                let xs = x.plane(n, c).to_vec();
                for (o, v) in y.plane_mut(n, c).iter_mut().zip(&xs) {
                    *o = v * scale + shift;
                }
            }
        }
        Ok(y)
    }

    pub fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let cache = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::State("batchnorm backward called before a training forward".into()))?;
        grad.ensure_same_shape(&cache.x_hat, "batchnorm backward")?;
        let s = grad.shape();
        let m = (s.n * s.plane()) as f32;
        let mut gx = Tensor::zeros(s);
        let mut dgamma = vec![0.0f32; s.c];
        let mut dbeta = vec![0.0f32; s.c];
        for c in 0..s.c {
            let mut sum_g = 0.0f32;
            let mut sum_gx = 0.0f32;
            for n in 0..s.n {
                for (g, h) in grad.plane(n, c).iter().zip(cache.x_hat.plane(n, c)) {
                    sum_g += g;
                    sum_gx += g * h;
                }
            }
            dbeta[c] = sum_g;
            dgamma[c] = sum_gx;
            let k = self.gamma.value.data()[c] * cache.inv_std[c] / m;
            for n in 0..s.n {
                let gs = grad.plane(n, c).to_vec();
                let hs = cache.x_hat.plane(n, c).to_vec();
                for ((o, g), h) in gx.plane_mut(n, c).iter_mut().zip(&gs).zip(&hs) {
                    *o = k * (m * g - sum_g - h * sum_gx);
                }
            }
        }
        self.gamma.accumulate_with(|buf| {
            for (b, d) in buf.iter_mut().zip(&dgamma) {
                *b += d;
            }
        });
        self.beta.accumulate_with(|buf| {
            for (b, d) in buf.iter_mut().zip(&dbeta) {
                *b += d;
            }
        });
        Ok(gx)
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }
}
