//! Central-difference gradient checks for every differentiable primitive.
//!
//! Each check draws a random instance, projects the output onto a random
//! direction `r` so the loss is `sum(y * r)` (accumulated in f64), and
//! compares the analytic gradient of every input against the numeric one.
//! The error is `|g_a - g_n| / max(|g_a|, |g_n|)` over the whole tensor.

use super::activation::{ActKind, Activation};
use super::conv::{conv2d, conv2d_backward, ConvGeom};
use super::head::{global_avg_pool, global_avg_pool_backward, softmax_cross_entropy, Dense, SqueezeExcite};
use super::norm::{BatchNorm, Mode};
use super::param::Parameter;
use super::tensor::{Shape, Tensor};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Finite-difference step.
pub const FD_EPS: f64 = 5e-3;

/// Default pass threshold on the relative error.
pub const FD_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Primitive {
    Conv,
    ConvStrided,
    ConvDepthwise,
    ConvPointwise,
    Relu,
    Relu6,
    Sigmoid,
    BatchNormTrain,
    Dense,
    GlobalAvgPool,
    SqueezeExcite,
    SoftmaxCrossEntropy,
}

impl Primitive {
    pub const ALL: [Primitive; 12] = [
        Primitive::Conv,
        Primitive::ConvStrided,
        Primitive::ConvDepthwise,
        Primitive::ConvPointwise,
        Primitive::Relu,
        Primitive::Relu6,
        Primitive::Sigmoid,
        Primitive::BatchNormTrain,
        Primitive::Dense,
        Primitive::GlobalAvgPool,
        Primitive::SqueezeExcite,
        Primitive::SoftmaxCrossEntropy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Primitive::Conv => "conv3x3",
            Primitive::ConvStrided => "conv3x3-stride2",
            Primitive::ConvDepthwise => "conv-depthwise",
            Primitive::ConvPointwise => "conv1x1",
            Primitive::Relu => "relu",
            Primitive::Relu6 => "relu6",
            Primitive::Sigmoid => "sigmoid",
            Primitive::BatchNormTrain => "batchnorm",
            Primitive::Dense => "dense",
            Primitive::GlobalAvgPool => "global-avg-pool",
            Primitive::SqueezeExcite => "squeeze-excite",
            Primitive::SoftmaxCrossEntropy => "softmax-cross-entropy",
        }
    }
}

/// Outcome for one input tensor of one instance.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub primitive: Primitive,
    pub input: &'static str,
    pub rel_err: f64,
}

type Forward = Box<dyn Fn(&[Tensor]) -> Result<Tensor>>;
type Backward = Box<dyn Fn(&[Tensor], &Tensor) -> Result<Vec<Tensor>>>;

struct Case {
    names: Vec<&'static str>,
    inputs: Vec<Tensor>,
    forward: Forward,
    backward: Backward,
}

pub fn relative_error(analytic: &[f32], numeric: &[f64]) -> f64 {
    let mut diff = 0.0;
    let (mut na, mut nn) = (0.0, 0.0);
    for (&a, &n) in analytic.iter().zip(numeric) {
        diff += (a as f64 - n).powi(2);
        na += (a as f64).powi(2);
        nn += n * n;
    }
    let scale = na.sqrt().max(nn.sqrt());
    if scale == 0.0 {
        0.0
    } else {
        diff.sqrt() / scale
    }
}

fn project(y: &Tensor, r: &Tensor) -> f64 {
    y.data().iter().zip(r.data()).map(|(&a, &b)| a as f64 * b as f64).sum()
}

/// Values at least `margin` away from zero, with magnitude up to `hi`.
fn away_from_zero(shape: Shape, margin: f32, hi: f32, rng: &mut Rng) -> Tensor {
    let mut t = Tensor::rand_uniform(shape, margin, hi, rng);
    t.data_mut().iter_mut().for_each(|v| {
        if rng.uniform() < 0.5 {
            *v = -*v
        }
    });
    t
}

fn conv_case(rng: &mut Rng, cin: usize, cout: usize, k: usize, geom: ConvGeom) -> Case {
    let x = Tensor::randn(Shape::new(2, cin, 6, 6), 1.0, rng);
    let w = Tensor::randn(Shape::new(cout, cin / geom.groups, k, k), 0.5, rng);
    Case {
        names: vec!["input", "weight"],
        inputs: vec![x, w],
        forward: Box::new(move |t| conv2d(&t[0], &t[1], geom)),
        backward: Box::new(move |t, g| {
            let (gx, gw) = conv2d_backward(&t[0], &t[1], g, geom)?;
            Ok(vec![gx, gw])
        }),
    }
}

fn act_case(rng: &mut Rng, kind: ActKind) -> Case {
    let shape = Shape::new(2, 3, 4, 4);
    let x = match kind {
        ActKind::Relu => away_from_zero(shape, 0.05, 3.0, rng),
        // both kinks, at 0 and 6, kept clear
        ActKind::Relu6 => {
            let mut t = away_from_zero(shape, 0.05, 5.9, rng);
            t.data_mut().iter_mut().for_each(|v| {
                if rng.uniform() < 0.25 {
                    *v = 6.1 + v.abs()
                }
            });
            t
        }
        ActKind::Sigmoid => Tensor::randn(shape, 2.0, rng),
    };
    Case {
        names: vec!["input"],
        inputs: vec![x],
        forward: Box::new(move |t| Ok(Activation::new(kind).infer(&t[0]))),
        backward: Box::new(move |t, g| {
            let mut a = Activation::new(kind);
            a.forward(&t[0]);
            Ok(vec![a.backward(g)?])
        }),
    }
}

fn bn_with(t: &[Tensor]) -> BatchNorm {
    let mut bn = BatchNorm::new("bn", t[0].shape().c);
    bn.gamma.value = t[1].clone();
    bn.beta.value = t[2].clone();
    bn
}

fn bn_case(rng: &mut Rng) -> Case {
    let c = 3;
    let x = Tensor::randn(Shape::new(4, c, 3, 3), 1.5, rng);
    let gamma = Tensor::rand_uniform(Shape::new(1, c, 1, 1), 0.5, 1.5, rng);
    let beta = Tensor::randn(Shape::new(1, c, 1, 1), 0.5, rng);
    Case {
        names: vec!["input", "gamma", "beta"],
        inputs: vec![x, gamma, beta],
        forward: Box::new(|t| bn_with(t).forward(&t[0], Mode::Train)),
        backward: Box::new(|t, g| {
            let mut bn = bn_with(t);
            bn.forward(&t[0], Mode::Train)?;
            let gx = bn.backward(g)?;
            Ok(vec![gx, bn.gamma.grad.clone(), bn.beta.grad.clone()])
        }),
    }
}

fn dense_with(w: &Tensor, b: &Tensor) -> Dense {
    Dense::new(Parameter::new("w", w.clone()), Parameter::new("b", b.clone()))
}

fn dense_case(rng: &mut Rng) -> Case {
    let (inf, outf) = (5, 4);
    Case {
        names: vec!["input", "weight", "bias"],
        inputs: vec![
            Tensor::randn(Shape::new(3, inf, 1, 1), 1.0, rng),
            Tensor::randn(Shape::new(outf, inf, 1, 1), 0.5, rng),
            Tensor::randn(Shape::new(1, outf, 1, 1), 0.5, rng),
        ],
        forward: Box::new(|t| dense_with(&t[1], &t[2]).infer(&t[0])),
        backward: Box::new(|t, g| {
            let mut d = dense_with(&t[1], &t[2]);
            d.forward(&t[0])?;
            let gx = d.backward(g)?;
            Ok(vec![gx, d.weight.grad.clone(), d.bias.grad.clone()])
        }),
    }
}

fn pool_case(rng: &mut Rng) -> Case {
    Case {
        names: vec!["input"],
        inputs: vec![Tensor::randn(Shape::new(2, 3, 4, 5), 1.0, rng)],
        forward: Box::new(|t| Ok(global_avg_pool(&t[0]))),
        backward: Box::new(|t, g| Ok(vec![global_avg_pool_backward(g, t[0].shape())])),
    }
}

fn se_with(t: &[Tensor]) -> SqueezeExcite {
    SqueezeExcite::new(dense_with(&t[1], &t[2]), dense_with(&t[3], &t[4]))
}

fn se_case(rng: &mut Rng) -> Result<Case> {
    let (c, r) = (4, 2);
    // redraw until the hidden ReLU is clear of its kink
    for _ in 0..1000 {
        let t = vec![
            Tensor::randn(Shape::new(2, c, 3, 3), 1.0, rng),
            Tensor::randn(Shape::new(r, c, 1, 1), 1.0, rng),
            Tensor::randn(Shape::new(1, r, 1, 1), 0.5, rng),
            Tensor::randn(Shape::new(c, r, 1, 1), 1.0, rng),
            Tensor::randn(Shape::new(1, c, 1, 1), 0.5, rng),
        ];
        let hidden = dense_with(&t[1], &t[2]).infer(&global_avg_pool(&t[0]))?;
        if hidden.data().iter().all(|v| v.abs() > 0.05) {
            return Ok(Case {
                names: vec!["input", "reduce.weight", "reduce.bias", "expand.weight", "expand.bias"],
                inputs: t,
                forward: Box::new(|t| se_with(t).infer(&t[0])),
                backward: Box::new(|t, g| {
                    let mut se = se_with(t);
                    se.forward(&t[0])?;
                    let gx = se.backward(g)?;
                    Ok(vec![
                        gx,
                        se.reduce.weight.grad.clone(),
                        se.reduce.bias.grad.clone(),
                        se.expand.weight.grad.clone(),
                        se.expand.bias.grad.clone(),
                    ])
                }),
            });
        }
    }
    Err(Error::Statistics("could not draw a kink-free squeeze-excite instance".into()))
}

fn ce_case(rng: &mut Rng) -> Case {
    let (n, k) = (4, 5);
    let labels: Vec<usize> = (0..n).map(|_| rng.below(k)).collect();
    let l2 = labels.clone();
    Case {
        names: vec!["logits"],
        inputs: vec![Tensor::randn(Shape::new(n, k, 1, 1), 2.0, rng)],
        forward: Box::new(move |t| {
            let (loss, _) = softmax_cross_entropy(&t[0], &labels)?;
            Tensor::from_vec(Shape::new(1, 1, 1, 1), vec![loss])
        }),
        backward: Box::new(move |t, g| {
            let (_, mut grad) = softmax_cross_entropy(&t[0], &l2)?;
            let s = g.data()[0];
            grad.data_mut().iter_mut().for_each(|v| *v *= s);
            Ok(vec![grad])
        }),
    }
}

fn build(p: Primitive, rng: &mut Rng) -> Result<Case> {
    Ok(match p {
        Primitive::Conv => conv_case(rng, 3, 4, 3, ConvGeom::new(1, 1, 1)),
        Primitive::ConvStrided => conv_case(rng, 4, 2, 3, ConvGeom::new(2, 1, 1)),
        Primitive::ConvDepthwise => conv_case(rng, 4, 4, 3, ConvGeom::new(1, 1, 4)),
        Primitive::ConvPointwise => conv_case(rng, 5, 3, 1, ConvGeom::pointwise()),
        Primitive::Relu => act_case(rng, ActKind::Relu),
        Primitive::Relu6 => act_case(rng, ActKind::Relu6),
        Primitive::Sigmoid => act_case(rng, ActKind::Sigmoid),
        Primitive::BatchNormTrain => bn_case(rng),
        Primitive::Dense => dense_case(rng),
        Primitive::GlobalAvgPool => pool_case(rng),
        Primitive::SqueezeExcite => se_case(rng)?,
        Primitive::SoftmaxCrossEntropy => ce_case(rng),
    })
}

/// Draws one random instance of `p` and checks the gradient of each input.
pub fn check_primitive(p: Primitive, rng: &mut Rng) -> Result<Vec<GradCheck>> {
    let case = build(p, rng)?;
    let y = (case.forward)(&case.inputs)?;
    let r = Tensor::randn(y.shape(), 1.0, rng);
    let analytic = (case.backward)(&case.inputs, &r)?;
    let mut out = Vec::with_capacity(case.inputs.len());
    for (i, name) in case.names.iter().enumerate() {
        let mut inputs = case.inputs.clone();
        let mut numeric = vec![0.0f64; inputs[i].numel()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let orig = inputs[i].data()[j];
            inputs[i].data_mut()[j] = (orig as f64 + FD_EPS) as f32;
            let plus = project(&(case.forward)(&inputs)?, &r);
            inputs[i].data_mut()[j] = (orig as f64 - FD_EPS) as f32;
            let minus = project(&(case.forward)(&inputs)?, &r);
            inputs[i].data_mut()[j] = orig;
            *slot = (plus - minus) / (2.0 * FD_EPS);
        }
        out.push(GradCheck {
            primitive: p,
            input: name,
            rel_err: relative_error(analytic[i].data(), &numeric),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_primitive_passes() {
        let mut rng = Rng::new(17);
        for p in Primitive::ALL {
            for _ in 0..3 {
                for c in check_primitive(p, &mut rng).unwrap() {
                    assert!(c.rel_err <= FD_TOLERANCE, "{} / {}: {}", p.name(), c.input, c.rel_err);
                }
            }
        }
    }

    #[test]
    fn a_wrong_gradient_is_caught() {
        let numeric = [1.0, 2.0, 3.0];
        assert!(relative_error(&[1.0, 2.0, 3.0], &numeric) < 1e-12);
        assert!(relative_error(&[1.0, 2.0, 3.3], &numeric) > FD_TOLERANCE);
        assert_eq!(relative_error(&[0.0], &[0.0]), 0.0);
    }
}
