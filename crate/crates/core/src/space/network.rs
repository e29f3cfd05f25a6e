//! A single fixed chain of blocks: a supernet path made concrete, or a
//! standalone network trained from scratch.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::engine::checkpoint::{self, NamedArray};
use crate::engine::{softmax_cross_entropy, BatchNorm, Mode, Parameter, Sgd, Tensor, BN_MOMENTUM};
use crate::error::{Error, Result};
use crate::rng::Rng;

use super::blocks::{build_stem, collect_arrays, restore_arrays, Block, ConvBn, InvertedBottleneck, StabilizerInit, Tail};
use super::spec::{Architecture, ChoiceSpec, LayerSpec, SpaceSpec, StemSpec, TailSpec};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetLayer {
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub choice: ChoiceSpec,
    /// Bottleneck width when it no longer equals `in_channels * expansion`,
    /// which happens after a channel-changing stabilizer is folded in.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hidden: Option<usize>,
}

impl NetLayer {
    /// Width of the bottleneck's inner representation; `None` for other blocks.
    pub fn hidden_width(&self) -> Option<usize> {
        match self.choice {
            ChoiceSpec::InvertedBottleneck { expansion, .. } => {
                Some(self.hidden.unwrap_or(self.in_channels * expansion))
            }
            _ => None,
        }
    }
}

/// Layout of a concrete network; the standalone counterpart of [`SpaceSpec`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub name: String,
    pub input_channels: usize,
    pub resolution: usize,
    pub classes: usize,
    pub stem: StemSpec,
    pub tail: TailSpec,
    pub layers: Vec<NetLayer>,
}

impl NetworkSpec {
    pub fn from_arch(space: &SpaceSpec, arch: &Architecture) -> Result<Self> {
        space.check_arch(arch)?;
        Ok(Self {
            name: format!("{}{}", space.name, arch),
            input_channels: space.input_channels,
            resolution: space.resolution,
            classes: space.classes,
            stem: space.stem.clone(),
            tail: space.tail.clone(),
            layers: space
                .layers
                .iter()
                .zip(&arch.genes)
                .map(|(l, &g)| NetLayer {
                    in_channels: l.in_channels,
                    out_channels: l.out_channels,
                    stride: l.stride,
                    choice: l.choices[g],
                    hidden: None,
                })
                .collect(),
        })
    }

    /// Channels entering the tail.
    pub fn last_channels(&self) -> usize {
        self.layers.last().map_or(self.stem.out_channels, |l| l.out_channels)
    }

    fn layer_spec(l: &NetLayer) -> LayerSpec {
        LayerSpec {
            in_channels: l.in_channels,
            out_channels: l.out_channels,
            stride: l.stride,
            choices: vec![l.choice],
        }
    }

    /// A one-choice-per-layer space describing this network, for the cost model.
    pub fn as_space(&self) -> (SpaceSpec, Architecture) {
        let space = SpaceSpec {
            name: self.name.clone(),
            input_channels: self.input_channels,
            resolution: self.resolution,
            classes: self.classes,
            stem: self.stem.clone(),
            tail: self.tail.clone(),
            layers: self.layers.iter().map(Self::layer_spec).collect(),
        };
        let arch = Architecture::new(vec![0; self.layers.len()]);
        (space, arch)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::input(format!("cannot serialize network: {e}")))
    }

    pub fn from_toml(text: &str, source: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse {
            source_name: source.into(),
            position: e
                .span()
                .map(|s| format!("byte {}", s.start))
                .unwrap_or_else(|| "unknown".into()),
            message: e.message().to_string(),
        })
    }
}

#[derive(Debug, Clone)]
pub struct Network {
    pub spec: NetworkSpec,
    pub stem: ConvBn,
    pub blocks: Vec<Block>,
    pub tail: Tail,
}

/// Loss and correct-prediction count of one training batch.
#[derive(Debug, Clone, Copy)]
pub struct BatchResult {
    pub loss: f32,
    pub correct: usize,
}

pub(crate) fn count_correct(logits: &Tensor, labels: &[usize]) -> usize {
    let classes = logits.shape().c;
    labels
        .iter()
        .enumerate()
        .filter(|(n, &l)| argmax(&logits.data()[n * classes..(n + 1) * classes]) == l)
        .count()
}

/// Index of the first maximum.
pub(crate) fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn build_block(prefix: &str, layer: &NetLayer, init: StabilizerInit, rng: &mut Rng) -> Block {
    match (layer.choice, layer.hidden_width()) {
        (ChoiceSpec::InvertedBottleneck { kernel, se, .. }, Some(hidden)) => {
            Block::Inverted(Box::new(InvertedBottleneck::build(
                prefix,
                layer.in_channels,
                hidden,
                layer.out_channels,
                layer.stride,
                kernel,
                se,
                rng,
            )))
        }
        (choice, _) => Block::build(prefix, &NetworkSpec::layer_spec(layer), &choice, init, rng),
    }
}

impl Network {
    /// Fresh He-initialized network for `spec`.
    pub fn fresh(spec: NetworkSpec, seed: u64, init: StabilizerInit) -> Self {
        let root = Rng::new(seed);
        let (space, _) = spec.as_space();
        let stem = build_stem(&space, &mut root.fork(0));
        let blocks = spec
            .layers
            .iter()
            .enumerate()
            .map(|(l, layer)| build_block(&format!("layer{l}"), layer, init, &mut root.fork(1 + l as u64)))
            .collect();
        let tail = Tail::build(spec.last_channels(), &space, &mut root.fork(u32::MAX as u64));
        Self {
            spec,
            stem,
            blocks,
            tail,
        }
    }

    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        if mode == Mode::Eval {
            return self.infer(x);
        }
        let mut h = self.stem.forward(x, Mode::Train)?;
        for b in &mut self.blocks {
            h = b.forward(&h, Mode::Train)?;
        }
        self.tail.forward(&h, Mode::Train)
    }

    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = self.stem.infer(x)?;
        for b in &self.blocks {
            h = b.infer(&h)?;
        }
        self.tail.infer(&h)
    }

    pub fn backward(&mut self, grad_logits: &Tensor) -> Result<()> {
        let mut g = self.tail.backward(grad_logits)?;
        for b in self.blocks.iter_mut().rev() {
            g = b.backward(&g)?;
        }
        self.stem.backward(&g)?;
        Ok(())
    }

    pub fn train_batch(&mut self, x: &Tensor, labels: &[usize]) -> Result<BatchResult> {
        let logits = self.forward(x, Mode::Train)?;
        let (loss, grad) = softmax_cross_entropy(&logits, labels)?;
        self.backward(&grad)?;
        Ok(BatchResult {
            loss,
            correct: count_correct(&logits, labels),
        })
    }

    pub fn step(&mut self, opt: &mut Sgd, lr: f32) -> Result<()> {
        Sgd::check_lr(lr)?;
        self.visit_params_mut(&mut |p| opt.apply(p, lr));
        Ok(())
    }

    pub fn visit_params(&self, f: &mut dyn FnMut(&Parameter)) {
        self.stem.visit(f);
        for b in &self.blocks {
            b.visit_params(f);
        }
        self.tail.visit_params(f);
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.stem.visit_mut(f);
        for b in &mut self.blocks {
            b.visit_params_mut(f);
        }
        self.tail.visit_params_mut(f);
    }

    pub fn param_count(&self) -> u64 {
        let mut n = 0u64;
        self.visit_params(&mut |p| n += p.numel() as u64);
        n
    }

    pub fn to_arrays(&self) -> Vec<NamedArray> {
        let mut buffers = Vec::new();
        self.stem.buffers(&mut buffers);
        for b in &self.blocks {
            b.buffers(&mut buffers);
        }
        self.tail.buffers(&mut buffers);
        collect_arrays(|f| self.visit_params(f), buffers)
    }

    pub fn load_arrays(&mut self, arrays: &[NamedArray]) -> Result<()> {
        let table: HashMap<String, &NamedArray> = arrays.iter().map(|a| (a.name.clone(), a)).collect();
        restore_arrays(&table, |f| {
            self.stem.visit_tensors_mut(f);
            for b in &mut self.blocks {
                b.visit_tensors_mut(f);
            }
            self.tail.visit_tensors_mut(f);
        })
    }

    pub fn save(&self, dir: &Path, stem_name: &str) -> Result<()> {
        checkpoint::save(&dir.join(format!("{stem_name}.scnt")), &self.to_arrays())?;
        let path = dir.join(format!("{stem_name}.toml"));
        std::fs::write(&path, self.spec.to_toml()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(dir: &Path, stem_name: &str) -> Result<Self> {
        let path = dir.join(format!("{stem_name}.toml"));
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let spec = NetworkSpec::from_toml(&text, &path.display().to_string())?;
        let mut net = Network::fresh(spec, 0, StabilizerInit::default());
        net.load_arrays(&checkpoint::load(&dir.join(format!("{stem_name}.scnt")))?)?;
        Ok(net)
    }

    /// Every batch norm, stem first.
    pub fn visit_bn_mut(&mut self, f: &mut dyn FnMut(&mut BatchNorm)) {
        f(&mut self.stem.bn);
        for b in &mut self.blocks {
            b.visit_bn_mut(f);
        }
        f(&mut self.tail.conv.bn);
    }

    /// Replaces every running statistic by the plain average of the batch
    /// statistics seen over `batches` training-mode passes. Weights are
    /// untouched.
    pub fn recalibrate_bn(&mut self, batches: &[Tensor]) -> Result<()> {
        for (k, x) in batches.iter().enumerate() {
            let m = 1.0 / (k + 1) as f32;
            self.visit_bn_mut(&mut |bn| bn.momentum = m);
            self.forward(x, Mode::Train)?;
        }
        self.visit_bn_mut(&mut |bn| bn.momentum = BN_MOMENTUM);
        self.clear_cache();
        Ok(())
    }

    pub fn clear_cache(&mut self) {
        self.stem.clear_cache();
        for b in &mut self.blocks {
            b.clear_cache();
        }
        self.tail.clear_cache();
    }
}
