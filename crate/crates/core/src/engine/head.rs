//! Pooling, fully connected layers, squeeze-excitation and the classifier loss.

use super::activation::{ActKind, Activation};
use super::param::Parameter;
use super::tensor::{Shape, Tensor};
use crate::error::{Error, Result};

pub fn global_avg_pool(x: &Tensor) -> Tensor {
    let s = x.shape();
    let inv = 1.0 / s.plane() as f32;
    let mut out = Tensor::zeros(Shape::new(s.n, s.c, 1, 1));
    for n in 0..s.n {
        for c in 0..s.c {
            let i = out.index(n, c, 0, 0);
            out.data_mut()[i] = x.plane(n, c).iter().sum::<f32>() * inv;
        }
    }
    out
}

pub fn global_avg_pool_backward(grad: &Tensor, input_shape: Shape) -> Tensor {
    let inv = 1.0 / input_shape.plane() as f32;
    let mut gx = Tensor::zeros(input_shape);
    for n in 0..input_shape.n {
        for c in 0..input_shape.c {
            let g = grad.at(n, c, 0, 0) * inv;
            gx.plane_mut(n, c).iter_mut().for_each(|v| *v = g);
        }
    }
    gx
}

/// Affine map on `(n, in, 1, 1)` tensors: `y = W x + b`.
#[derive(Debug, Clone)]
pub struct Dense {
    pub weight: Parameter,
    pub bias: Parameter,
    cached_input: Option<Tensor>,
}

impl Dense {
    pub fn new(weight: Parameter, bias: Parameter) -> Self {
        Self {
            weight,
            bias,
            cached_input: None,
        }
    }

    pub fn in_features(&self) -> usize {
        self.weight.shape().c
    }

    pub fn out_features(&self) -> usize {
        self.weight.shape().n
    }

    fn compute(&self, x: &Tensor) -> Result<Tensor> {
        let s = x.shape();
        let (out_f, in_f) = (self.out_features(), self.in_features());
        if s.c != in_f || s.h != 1 || s.w != 1 {
            return Err(Error::dim(format!(
                "dense layer expects (n, {in_f}, 1, 1), got {s}"
            )));
        }
        let w = self.weight.value.data();
        let b = self.bias.value.data();
        let xd = x.data();
        let mut out = vec![0.0f32; s.n * out_f];
        for n in 0..s.n {
            let xr = &xd[n * in_f..(n + 1) * in_f];
            for o in 0..out_f {
                let wr = &w[o * in_f..(o + 1) * in_f];
                let mut acc = 0.0f32;
                for (a, v) in wr.iter().zip(xr) {
                    acc += a * v;
                }
                out[n * out_f + o] = acc + b[o];
            }
        }
        Tensor::from_vec(Shape::new(s.n, out_f, 1, 1), out)
    }

    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let y = self.compute(x)?;
        self.cached_input = Some(x.clone());
        Ok(y)
    }

    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        self.compute(x)
    }

    pub fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let x = self
            .cached_input
            .as_ref()
            .ok_or_else(|| Error::State("dense backward called before forward".into()))?;
        let (out_f, in_f) = (self.out_features(), self.in_features());
        let n = x.shape().n;
        if grad.shape() != Shape::new(n, out_f, 1, 1) {
            return Err(Error::dim(format!(
                "dense upstream gradient {} does not match output ({n}, {out_f}, 1, 1)",
                grad.shape()
            )));
        }
        let w = self.weight.value.data().to_vec();
        let xd = x.data();
        let gd = grad.data();
        let mut gx = vec![0.0f32; n * in_f];
        let mut gw = vec![0.0f32; out_f * in_f];
        let mut gb = vec![0.0f32; out_f];
        for s in 0..n {
            for o in 0..out_f {
                let g = gd[s * out_f + o];
                gb[o] += g;
                for i in 0..in_f {
                    gw[o * in_f + i] += g * xd[s * in_f + i];
                    gx[s * in_f + i] += g * w[o * in_f + i];
                }
            }
        }
        self.weight.accumulate_with(|buf| buf.iter_mut().zip(&gw).for_each(|(b, d)| *b += d));
        self.bias.accumulate_with(|buf| buf.iter_mut().zip(&gb).for_each(|(b, d)| *b += d));
        Tensor::from_vec(x.shape(), gx)
    }

    pub fn clear_cache(&mut self) {
        self.cached_input = None;
    }
}

/// Mean softmax cross-entropy and its gradient with respect to the logits.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f32, Tensor)> {
    let s = logits.shape();
    let classes = s.c;
    if labels.len() != s.n {
        return Err(Error::input(format!(
            "{} labels for a batch of {}",
            labels.len(),
            s.n
        )));
    }
    if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= classes) {
        return Err(Error::input(format!(
            "label {l} at position {i} outside [0, {classes})"
        )));
    }
    let mut grad = Tensor::zeros(s);
    let mut total = 0.0f64;
    let inv_n = 1.0 / s.n as f32;
    for (n, &label) in labels.iter().enumerate() {
        let row = &logits.data()[n * classes..(n + 1) * classes];
        let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let exps: Vec<f64> = row.iter().map(|&v| ((v - max) as f64).exp()).collect();
        let z: f64 = exps.iter().sum();
        total += z.ln() - (row[label] - max) as f64;
        let g = &mut grad.data_mut()[n * classes..(n + 1) * classes];
        for (k, gv) in g.iter_mut().enumerate() {
            let p = (exps[k] / z) as f32;
            *gv = (p - if k == label { 1.0 } else { 0.0 }) * inv_n;
        }
    }
    Ok(((total / s.n as f64) as f32, grad))
}

/// Global average pool followed by a linear classifier.
#[derive(Debug, Clone)]
pub struct ClassifierHead {
    pub fc: Dense,
    input_shape: Option<Shape>,
}

impl ClassifierHead {
    pub fn new(fc: Dense) -> Self {
        Self {
            fc,
            input_shape: None,
        }
    }

    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let pooled = global_avg_pool(x);
        let logits = self.fc.forward(&pooled)?;
        self.input_shape = Some(x.shape());
        Ok(logits)
    }

    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        self.fc.infer(&global_avg_pool(x))
    }

    pub fn backward(&mut self, grad_logits: &Tensor) -> Result<Tensor> {
        let shape = self
            .input_shape
            .ok_or_else(|| Error::State("classifier backward called before forward".into()))?;
        let gp = self.fc.backward(grad_logits)?;
        Ok(global_avg_pool_backward(&gp, shape))
    }

    pub fn clear_cache(&mut self) {
        self.input_shape = None;
        self.fc.clear_cache();
    }
}

/// Pool, linear and softmax cross-entropy in one call.
pub fn classifier_head(
    input: &Tensor,
    fc_weight: &Parameter,
    fc_bias: &Parameter,
    labels: &[usize],
) -> Result<(Tensor, f32)> {
    let head = ClassifierHead::new(Dense::new(fc_weight.clone(), fc_bias.clone()));
    let logits = head.infer(input)?;
    let (loss, _) = softmax_cross_entropy(&logits, labels)?;
    Ok((logits, loss))
}

/// Squeeze-and-excitation: pool, reduce, relu, expand, sigmoid, channel scale.
#[derive(Debug, Clone)]
pub struct SqueezeExcite {
    pub reduce: Dense,
    pub expand: Dense,
    relu: Activation,
    gate: Activation,
    cache: Option<(Tensor, Tensor)>,
}

impl SqueezeExcite {
    pub fn new(reduce: Dense, expand: Dense) -> Self {
        Self {
            reduce,
            expand,
            relu: Activation::new(ActKind::Relu),
            gate: Activation::new(ActKind::Sigmoid),
            cache: None,
        }
    }

    fn scale(x: &Tensor, e: &Tensor) -> Tensor {
        let s = x.shape();
        let mut y = x.clone();
        for n in 0..s.n {
            for c in 0..s.c {
                let k = e.at(n, c, 0, 0);
                y.plane_mut(n, c).iter_mut().for_each(|v| *v *= k);
            }
        }
        y
    }

    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let pooled = global_avg_pool(x);
        let z = self.reduce.forward(&pooled)?;
        let z = self.relu.forward(&z);
        let e = self.expand.forward(&z)?;
        let e = self.gate.forward(&e);
        let y = Self::scale(x, &e);
        self.cache = Some((x.clone(), e));
        Ok(y)
    }

    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        let z = self.relu.infer(&self.reduce.infer(&global_avg_pool(x))?);
        let e = self.gate.infer(&self.expand.infer(&z)?);
        Ok(Self::scale(x, &e))
    }

    pub fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let (x, e) = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::State("squeeze-excite backward called before forward".into()))?;
        grad.ensure_same_shape(x, "squeeze-excite backward")?;
        let s = x.shape();
        let mut ge = Tensor::zeros(e.shape());
        for n in 0..s.n {
            for c in 0..s.c {
                let dot: f32 = grad.plane(n, c).iter().zip(x.plane(n, c)).map(|(g, v)| g * v).sum();
                let i = ge.index(n, c, 0, 0);
                ge.data_mut()[i] = dot;
            }
        }
        let mut gx = Self::scale(grad, e);
        let g = self.gate.backward(&ge)?;
        let g = self.expand.backward(&g)?;
        let g = self.relu.backward(&g)?;
        let gp = self.reduce.backward(&g)?;
        gx.add_assign(&global_avg_pool_backward(&gp, s))?;
        Ok(gx)
    }

    pub fn params_mut(&mut self) -> [&mut Parameter; 4] {
        [
            &mut self.reduce.weight,
            &mut self.reduce.bias,
            &mut self.expand.weight,
            &mut self.expand.bias,
        ]
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
        self.reduce.clear_cache();
        self.expand.clear_cache();
        self.relu.clear_cache();
        self.gate.clear_cache();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn logits(n: usize, c: usize, v: &[f32]) -> Tensor {
        Tensor::from_vec(Shape::new(n, c, 1, 1), v.to_vec()).unwrap()
    }

    #[test]
    fn uniform_logits_give_ln_classes() {
        let (loss, _) = softmax_cross_entropy(&logits(1, 4, &[0.0; 4]), &[2]).unwrap();
        assert!((loss - 4f32.ln()).abs() < 1e-6);
        assert!((loss - 1.3863).abs() < 1e-4);
    }

    #[test]
    fn confident_correct_logits_give_near_zero_loss() {
        let (loss, _) = softmax_cross_entropy(&logits(1, 3, &[50.0, 0.0, 0.0]), &[0]).unwrap();
        assert!(loss < 1e-6);
    }

    #[test]
    fn batch_of_two_matches_hand_softmax() {
        // sample 0: logits (1, 2), label 1 -> -ln(e^2/(e^1+e^2))
        // sample 1: logits (0, 0), label 0 -> ln 2
        let l0 = -((2f64).exp() / ((1f64).exp() + (2f64).exp())).ln();
        let l1 = 2f64.ln();
        let expected = ((l0 + l1) / 2.0) as f32;
        let (loss, _) =
            softmax_cross_entropy(&logits(2, 2, &[1.0, 2.0, 0.0, 0.0]), &[1, 0]).unwrap();
        assert!((loss - expected).abs() < 1e-6);
    }

    #[test]
    fn label_out_of_range_is_input_error() {
        let err = softmax_cross_entropy(&logits(1, 2, &[0.0, 0.0]), &[2]).unwrap_err();
        assert!(matches!(err, Error::Input(_)));
    }

    #[test]
    fn classifier_head_uniform() {
        let w = Parameter::new("fc.w", Tensor::zeros(Shape::new(4, 3, 1, 1)));
        let b = Parameter::new("fc.b", Tensor::zeros(Shape::new(1, 4, 1, 1)));
        let x = Tensor::full(Shape::new(2, 3, 2, 2), 0.7);
        let (l, loss) = classifier_head(&x, &w, &b, &[0, 3]).unwrap();
        assert_eq!(l.shape(), Shape::new(2, 4, 1, 1));
        assert!((loss - 4f32.ln()).abs() < 1e-6);
    }
}
