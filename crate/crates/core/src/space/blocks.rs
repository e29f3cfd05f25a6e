//! Runtime choice blocks, stem and tail.
//!
//! Every block offers three passes: `forward` (training, caches activations),
//! `infer` (read-only, no caching, running BN statistics) and `backward`
//! (accumulates parameter gradients, returns the input gradient).

use std::collections::HashMap;

use crate::engine::checkpoint::NamedArray;
use crate::engine::{
    ActKind, Activation, BatchNorm, ClassifierHead, Conv2d, ConvGeom, Dense, Mode, Parameter, Shape,
    SqueezeExcite, Tensor,
};
use crate::error::{Error, Result};
use crate::rng::Rng;

use super::spec::{ChoiceSpec, LayerSpec, SpaceSpec, SE_RATIO, STEM_KERNEL, STEM_STRIDE};

/// How stabilizer weights start out.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StabilizerInit {
    /// Identity over the shared channels plus Gaussian noise of this std.
    IdentityNoise(f32),
    /// He fan-in scaling, like every other convolution.
    He,
}

impl Default for StabilizerInit {
    fn default() -> Self {
        StabilizerInit::IdentityNoise(0.01)
    }
}

pub(crate) fn he_conv(name: String, out_c: usize, in_per_group: usize, k: usize, rng: &mut Rng) -> Parameter {
    let fan_in = (in_per_group * k * k) as f32;
    let std = (2.0 / fan_in).sqrt();
    Parameter::new(name, Tensor::randn(Shape::new(out_c, in_per_group, k, k), std, rng))
}

pub(crate) fn dense(name: &str, out_f: usize, in_f: usize, rng: &mut Rng) -> Dense {
    let std = (1.0 / in_f as f32).sqrt();
    Dense::new(
        Parameter::new(format!("{name}.weight"), Tensor::randn(Shape::new(out_f, in_f, 1, 1), std, rng)),
        Parameter::new(format!("{name}.bias"), Tensor::zeros(Shape::new(1, out_f, 1, 1))),
    )
}

fn stabilizer_weight(name: String, out_c: usize, in_c: usize, init: StabilizerInit, rng: &mut Rng) -> Parameter {
    match init {
        StabilizerInit::He => he_conv(name, out_c, in_c, 1, rng),
        StabilizerInit::IdentityNoise(sigma) => {
            let mut w = Tensor::randn(Shape::new(out_c, in_c, 1, 1), sigma, rng);
            for c in 0..out_c.min(in_c) {
                let i = w.index(c, c, 0, 0);
                w.data_mut()[i] += 1.0;
            }
            Parameter::new(name, w)
        }
    }
}

/// Convolution, batch norm and an optional activation.
#[derive(Debug, Clone)]
pub struct ConvBn {
    pub conv: Conv2d,
    pub bn: BatchNorm,
    pub act: Option<Activation>,
}

impl ConvBn {
    pub fn new(prefix: &str, conv: Conv2d, act: Option<ActKind>) -> Self {
        let bn = BatchNorm::new(&format!("{prefix}.bn"), conv.out_channels());
        Self {
            conv,
            bn,
            act: act.map(Activation::new),
        }
    }

    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        if mode == Mode::Eval {
            return self.infer(x);
        }
        let y = self.conv.forward(x)?;
        let y = self.bn.forward(&y, Mode::Train)?;
        Ok(match &mut self.act {
            Some(a) => a.forward(&y),
            None => y,
        })
    }

    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        let y = self.bn.infer(&self.conv.infer(x)?)?;
        Ok(match &self.act {
            Some(a) => a.infer(&y),
            None => y,
        })
    }

    pub fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let g = match &mut self.act {
            Some(a) => a.backward(grad)?,
            None => grad.clone(),
        };
        let g = self.bn.backward(&g)?;
        self.conv.backward(&g)
    }

    pub(crate) fn visit(&self, f: &mut dyn FnMut(&Parameter)) {
        f(&self.conv.weight);
        f(&self.bn.gamma);
        f(&self.bn.beta);
    }

    pub(crate) fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        f(&mut self.conv.weight);
        f(&mut self.bn.gamma);
        f(&mut self.bn.beta);
    }

    pub(crate) fn buffers(&self, out: &mut Vec<NamedArray>) {
        let prefix = self.bn.gamma.name.trim_end_matches(".gamma").to_string();
        out.push(NamedArray::from_tensor(format!("{prefix}.running_mean"), &self.bn.running_mean));
        out.push(NamedArray::from_tensor(format!("{prefix}.running_var"), &self.bn.running_var));
    }

    pub(crate) fn buffers_mut(&mut self) -> [(String, &mut Tensor); 2] {
        let prefix = self.bn.gamma.name.trim_end_matches(".gamma").to_string();
        [
            (format!("{prefix}.running_mean"), &mut self.bn.running_mean),
            (format!("{prefix}.running_var"), &mut self.bn.running_var),
        ]
    }

    /// Visits parameter values and BN buffers by name.
    pub(crate) fn visit_tensors_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.visit_mut(&mut |p| f(&p.name.clone(), &mut p.value));
        for (name, t) in self.buffers_mut() {
            f(&name, t);
        }
    }

    pub(crate) fn clear_cache(&mut self) {
        self.conv.clear_cache();
        self.bn.clear_cache();
        if let Some(a) = &mut self.act {
            a.clear_cache();
        }
    }
}

/// Pointwise expansion, depthwise kxk, optional SE, linear pointwise projection.
///
/// The expansion convolution is kept even at expansion 1 so every bottleneck
/// starts with a pointwise convolution that a preceding stabilizer can fold into.
#[derive(Debug, Clone)]
pub struct InvertedBottleneck {
    pub expand: ConvBn,
    pub depthwise: ConvBn,
    pub se: Option<SqueezeExcite>,
    pub project: ConvBn,
}

impl InvertedBottleneck {
    pub fn build(
        prefix: &str,
        in_c: usize,
        hidden: usize,
        out_c: usize,
        stride: usize,
        kernel: usize,
        se: bool,
        rng: &mut Rng,
    ) -> Self {
        let expand = ConvBn::new(
            &format!("{prefix}.expand"),
            Conv2d::new(
                he_conv(format!("{prefix}.expand.weight"), hidden, in_c, 1, rng),
                ConvGeom::pointwise(),
            ),
            Some(ActKind::Relu6),
        );
        let depthwise = ConvBn::new(
            &format!("{prefix}.depthwise"),
            Conv2d::new(
                he_conv(format!("{prefix}.depthwise.weight"), hidden, 1, kernel, rng),
                ConvGeom::new(stride, kernel / 2, hidden),
            ),
            Some(ActKind::Relu6),
        );
        let se = se.then(|| {
            let r = (hidden / SE_RATIO).max(1);
            SqueezeExcite::new(
                dense(&format!("{prefix}.se.reduce"), r, hidden, rng),
                dense(&format!("{prefix}.se.expand"), hidden, r, rng),
            )
        });
        let project = ConvBn::new(
            &format!("{prefix}.project"),
            Conv2d::new(
                he_conv(format!("{prefix}.project.weight"), out_c, hidden, 1, rng),
                ConvGeom::pointwise(),
            ),
            None,
        );
        Self {
            expand,
            depthwise,
            se,
            project,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.expand.conv.in_channels()
    }
}

/// Bias-free pointwise convolution replacing a skip connection.
#[derive(Debug, Clone)]
pub struct Stabilizer {
    pub conv: Conv2d,
    pub relu: Option<Activation>,
}

#[derive(Debug, Clone)]
pub enum Block {
    Inverted(Box<InvertedBottleneck>),
    Skip,
    Stabilizer(Stabilizer),
}

impl Block {
    pub fn build(prefix: &str, layer: &LayerSpec, choice: &ChoiceSpec, init: StabilizerInit, rng: &mut Rng) -> Self {
        match *choice {
            ChoiceSpec::InvertedBottleneck { expansion, kernel, se } => Block::Inverted(Box::new(
                InvertedBottleneck::build(
                    prefix,
                    layer.in_channels,
                    layer.in_channels * expansion,
                    layer.out_channels,
                    layer.stride,
                    kernel,
                    se,
                    rng,
                ),
            )),
            ChoiceSpec::Skip => Block::Skip,
            ChoiceSpec::Els { relu } => Block::Stabilizer(Stabilizer {
                conv: Conv2d::new(
                    stabilizer_weight(
                        format!("{prefix}.els.weight"),
                        layer.out_channels,
                        layer.in_channels,
                        init,
                        rng,
                    ),
                    ConvGeom::pointwise(),
                ),
                relu: relu.then(|| Activation::new(ActKind::Relu)),
            }),
        }
    }

    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        if mode == Mode::Eval {
            return self.infer(x);
        }
        match self {
            Block::Skip => Ok(x.clone()),
            Block::Stabilizer(s) => {
                let y = s.conv.forward(x)?;
                Ok(match &mut s.relu {
                    Some(a) => a.forward(&y),
                    None => y,
                })
            }
            Block::Inverted(ib) => {
                let y = ib.expand.forward(x, Mode::Train)?;
                let y = ib.depthwise.forward(&y, Mode::Train)?;
                let y = match &mut ib.se {
                    Some(se) => se.forward(&y)?,
                    None => y,
                };
                ib.project.forward(&y, Mode::Train)
            }
        }
    }

    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            Block::Skip => Ok(x.clone()),
            Block::Stabilizer(s) => {
                let y = s.conv.infer(x)?;
                Ok(match &s.relu {
                    Some(a) => a.infer(&y),
                    None => y,
                })
            }
            Block::Inverted(ib) => {
                let y = ib.expand.infer(x)?;
                let y = ib.depthwise.infer(&y)?;
                let y = match &ib.se {
                    Some(se) => se.infer(&y)?,
                    None => y,
                };
                ib.project.infer(&y)
            }
        }
    }

    pub fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        match self {
            Block::Skip => Ok(grad.clone()),
            Block::Stabilizer(s) => {
                let g = match &mut s.relu {
                    Some(a) => a.backward(grad)?,
                    None => grad.clone(),
                };
                s.conv.backward(&g)
            }
            Block::Inverted(ib) => {
                let g = ib.project.backward(grad)?;
                let g = match &mut ib.se {
                    Some(se) => se.backward(&g)?,
                    None => g,
                };
                let g = ib.depthwise.backward(&g)?;
                ib.expand.backward(&g)
            }
        }
    }

    pub fn visit_params(&self, f: &mut dyn FnMut(&Parameter)) {
        match self {
            Block::Skip => {}
            Block::Stabilizer(s) => f(&s.conv.weight),
            Block::Inverted(ib) => {
                ib.expand.visit(f);
                ib.depthwise.visit(f);
                if let Some(se) = &ib.se {
                    f(&se.reduce.weight);
                    f(&se.reduce.bias);
                    f(&se.expand.weight);
                    f(&se.expand.bias);
                }
                ib.project.visit(f);
            }
        }
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        match self {
            Block::Skip => {}
            Block::Stabilizer(s) => f(&mut s.conv.weight),
            Block::Inverted(ib) => {
                ib.expand.visit_mut(f);
                ib.depthwise.visit_mut(f);
                if let Some(se) = &mut ib.se {
                    for p in se.params_mut() {
                        f(p);
                    }
                }
                ib.project.visit_mut(f);
            }
        }
    }

    pub fn visit_bn_mut(&mut self, f: &mut dyn FnMut(&mut BatchNorm)) {
        if let Block::Inverted(ib) = self {
            for cb in [&mut ib.expand, &mut ib.depthwise, &mut ib.project] {
                f(&mut cb.bn);
            }
        }
    }

    pub fn buffers(&self, out: &mut Vec<NamedArray>) {
        if let Block::Inverted(ib) = self {
            ib.expand.buffers(out);
            ib.depthwise.buffers(out);
            ib.project.buffers(out);
        }
    }

    /// Visits parameter values and BN buffers by name.
    pub fn visit_tensors_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.visit_params_mut(&mut |p| f(&p.name.clone(), &mut p.value));
        if let Block::Inverted(ib) = self {
            for cb in [&mut ib.expand, &mut ib.depthwise, &mut ib.project] {
                for (name, t) in cb.buffers_mut() {
                    f(&name, t);
                }
            }
        }
    }

    pub fn clear_cache(&mut self) {
        match self {
            Block::Skip => {}
            Block::Stabilizer(s) => {
                s.conv.clear_cache();
                if let Some(a) = &mut s.relu {
                    a.clear_cache();
                }
            }
            Block::Inverted(ib) => {
                ib.expand.clear_cache();
                ib.depthwise.clear_cache();
                if let Some(se) = &mut ib.se {
                    se.clear_cache();
                }
                ib.project.clear_cache();
            }
        }
    }

    /// Replaces the block-name part of every parameter name with `prefix`.
    pub fn rename(&mut self, prefix: &str) {
        self.visit_params_mut(&mut |p| {
            let cut = [".expand.", ".depthwise.", ".se.", ".project.", ".els."]
                .iter()
                .filter_map(|k| p.name.find(k))
                .min();
            if let Some(cut) = cut {
                p.name = format!("{prefix}{}", &p.name[cut..]);
            }
        });
    }

    /// The first convolution a preceding stabilizer may fold into.
    pub fn leading_pointwise_mut(&mut self) -> Option<&mut Conv2d> {
        match self {
            Block::Inverted(ib) => Some(&mut ib.expand.conv),
            _ => None,
        }
    }

    pub fn is_identity_like(&self) -> bool {
        matches!(self, Block::Skip | Block::Stabilizer(_))
    }
}

pub fn build_stem(spec: &SpaceSpec, rng: &mut Rng) -> ConvBn {
    ConvBn::new(
        "stem",
        Conv2d::new(
            he_conv("stem.weight".into(), spec.stem.out_channels, spec.input_channels, STEM_KERNEL, rng),
            ConvGeom::new(STEM_STRIDE, STEM_KERNEL / 2, 1),
        ),
        Some(ActKind::Relu6),
    )
}

/// 1x1 conv + BN + relu6, then pooled linear classifier.
#[derive(Debug, Clone)]
pub struct Tail {
    pub conv: ConvBn,
    pub head: ClassifierHead,
}

impl Tail {
    pub fn build(in_c: usize, spec: &SpaceSpec, rng: &mut Rng) -> Self {
        Self {
            conv: ConvBn::new(
                "tail",
                Conv2d::new(
                    he_conv("tail.weight".into(), spec.tail.channels, in_c, 1, rng),
                    ConvGeom::pointwise(),
                ),
                Some(ActKind::Relu6),
            ),
            head: ClassifierHead::new(dense("fc", spec.classes, spec.tail.channels, rng)),
        }
    }

    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        if mode == Mode::Eval {
            return self.infer(x);
        }
        let y = self.conv.forward(x, Mode::Train)?;
        self.head.forward(&y)
    }

    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        self.head.infer(&self.conv.infer(x)?)
    }

    pub fn backward(&mut self, grad_logits: &Tensor) -> Result<Tensor> {
        let g = self.head.backward(grad_logits)?;
        self.conv.backward(&g)
    }

    pub fn visit_params(&self, f: &mut dyn FnMut(&Parameter)) {
        self.conv.visit(f);
        f(&self.head.fc.weight);
        f(&self.head.fc.bias);
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.conv.visit_mut(f);
        f(&mut self.head.fc.weight);
        f(&mut self.head.fc.bias);
    }

    pub fn visit_tensors_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.conv.visit_tensors_mut(f);
        for p in [&mut self.head.fc.weight, &mut self.head.fc.bias] {
            f(&p.name.clone(), &mut p.value);
        }
    }

    pub fn buffers(&self, out: &mut Vec<NamedArray>) {
        self.conv.buffers(out);
    }

    pub fn clear_cache(&mut self) {
        self.conv.clear_cache();
        self.head.clear_cache();
    }
}

/// Collects parameters and BN buffers as named arrays, in visiting order.
pub(crate) fn collect_arrays(
    visit: impl FnOnce(&mut dyn FnMut(&Parameter)),
    buffers: Vec<NamedArray>,
) -> Vec<NamedArray> {
    let mut out = Vec::new();
    visit(&mut |p: &Parameter| out.push(NamedArray::from_tensor(p.name.clone(), &p.value)));
    out.extend(buffers);
    out
}

/// Overwrites every visited tensor from a name-keyed table.
pub(crate) fn restore_arrays(
    table: &HashMap<String, &NamedArray>,
    visit: impl FnOnce(&mut dyn FnMut(&str, &mut Tensor)),
) -> Result<()> {
    let mut err = None;
    visit(&mut |name: &str, target: &mut Tensor| {
        if err.is_some() {
            return;
        }
        match table.get(name) {
            None => err = Some(Error::input(format!("checkpoint lacks tensor '{name}'"))),
            Some(a) => match a.to_tensor() {
                Ok(t) if t.shape() == target.shape() => *target = t,
                Ok(t) => {
                    err = Some(Error::dim(format!(
                        "tensor '{name}': checkpoint shape {} vs expected {}",
                        t.shape(),
                        target.shape()
                    )))
                }
                Err(e) => err = Some(e),
            },
        }
    });
    err.map_or(Ok(()), Err)
}
