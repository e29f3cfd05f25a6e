//! The weight-sharing supernet: one parameter bank per (layer, choice), a
//! shared stem and tail, and per-block update counters.

use std::collections::HashMap;
use std::path::Path;

use crate::engine::checkpoint::{self, NamedArray};
use crate::engine::{Mode, Parameter, Sgd, Shape, Tensor};
use crate::error::{Error, Result};
use crate::rng::Rng;

use super::blocks::{build_stem, collect_arrays, restore_arrays, Block, ConvBn, StabilizerInit, Tail};
use super::network::{Network, NetworkSpec};
use super::spec::{Architecture, SpaceSpec};

const COUNTS_NAME: &str = "meta.update_counts";

#[derive(Debug, Clone)]
pub struct Supernet {
    pub spec: SpaceSpec,
    pub stem: ConvBn,
    pub banks: Vec<Vec<Block>>,
    pub tail: Tail,
    update_counts: Vec<Vec<u64>>,
    active: Option<Architecture>,
}

pub fn build_supernet(spec: &SpaceSpec, seed: u64) -> Result<Supernet> {
    build_supernet_with(spec, seed, StabilizerInit::default())
}

/// Builds the supernet. Each block draws from its own `(layer, choice)`
/// stream, so two spaces differing only in their identity-like choices get
/// identical bottleneck weights for the same seed.
pub fn build_supernet_with(spec: &SpaceSpec, seed: u64, init: StabilizerInit) -> Result<Supernet> {
    spec.validate()?;
    let root = Rng::new(seed);
    let stem = build_stem(spec, &mut root.fork(0));
    let banks: Vec<Vec<Block>> = spec
        .layers
        .iter()
        .enumerate()
        .map(|(l, layer)| {
            layer
                .choices
                .iter()
                .enumerate()
                .map(|(c, choice)| {
                    let stream = 1 + ((l as u64) << 16) + c as u64;
                    Block::build(&format!("layer{l}.choice{c}"), layer, choice, init, &mut root.fork(stream))
                })
                .collect()
        })
        .collect();
    let last = spec.layers.last().map_or(spec.stem.out_channels, |l| l.out_channels);
    let tail = Tail::build(last, spec, &mut root.fork(u32::MAX as u64));
    Ok(Supernet {
        spec: spec.clone(),
        stem,
        update_counts: spec.layers.iter().map(|l| vec![0; l.choices.len()]).collect(),
        banks,
        tail,
        active: None,
    })
}

impl Supernet {
    /// Runs the chosen path. In train mode activations are cached for
    /// [`Supernet::backward_path`] and BN running statistics are updated.
    pub fn forward_path(&mut self, arch: &Architecture, x: &Tensor, mode: Mode) -> Result<Tensor> {
        self.spec.check_arch(arch)?;
        if mode == Mode::Eval {
            return self.infer_path(arch, x);
        }
        let mut h = self.stem.forward(x, Mode::Train)?;
        for (bank, &g) in self.banks.iter_mut().zip(&arch.genes) {
            h = bank[g].forward(&h, Mode::Train)?;
        }
        let out = self.tail.forward(&h, Mode::Train)?;
        self.active = Some(arch.clone());
        Ok(out)
    }

    /// Read-only evaluation of a path with running BN statistics.
    pub fn infer_path(&self, arch: &Architecture, x: &Tensor) -> Result<Tensor> {
        self.spec.check_arch(arch)?;
        let mut h = self.stem.infer(x)?;
        for (bank, &g) in self.banks.iter().zip(&arch.genes) {
            h = bank[g].infer(&h)?;
        }
        self.tail.infer(&h)
    }

    /// Backpropagates through the path of the last training forward.
    pub fn backward_path(&mut self, grad_logits: &Tensor) -> Result<()> {
        let arch = self
            .active
            .take()
            .ok_or_else(|| Error::State("backward_path called without a training forward".into()))?;
        let mut g = self.tail.backward(grad_logits)?;
        for (bank, &gene) in self.banks.iter_mut().zip(&arch.genes).rev() {
            g = bank[gene].backward(&g)?;
        }
        self.stem.backward(&g)?;
        Ok(())
    }

    /// Applies the optimizer to every parameter touched since the last step.
    pub fn step(&mut self, opt: &mut Sgd, lr: f32) -> Result<()> {
        Sgd::check_lr(lr)?;
        self.visit_params_mut(&mut |p| opt.apply(p, lr));
        Ok(())
    }

    pub fn record_updates(&mut self, arch: &Architecture) {
        for (counts, &g) in self.update_counts.iter_mut().zip(&arch.genes) {
            counts[g] += 1;
        }
    }

    pub fn update_counts(&self) -> &[Vec<u64>] {
        &self.update_counts
    }

    pub fn visit_params(&self, f: &mut dyn FnMut(&Parameter)) {
        self.stem.visit(f);
        for bank in &self.banks {
            for b in bank {
                b.visit_params(f);
            }
        }
        self.tail.visit_params(f);
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.stem.visit_mut(f);
        for bank in &mut self.banks {
            for b in bank {
                b.visit_params_mut(f);
            }
        }
        self.tail.visit_params_mut(f);
    }

    /// Parameters a forward pass along `arch` reads.
    pub fn path_param_count(&self, arch: &Architecture) -> Result<u64> {
        self.spec.check_arch(arch)?;
        let mut n = 0u64;
        let mut add = |p: &Parameter| n += p.numel() as u64;
        self.stem.visit(&mut add);
        for (bank, &g) in self.banks.iter().zip(&arch.genes) {
            bank[g].visit_params(&mut add);
        }
        self.tail.visit_params(&mut add);
        Ok(n)
    }

    /// Copies the chosen path out as a standalone network.
    pub fn extract(&self, arch: &Architecture) -> Result<Network> {
        let spec = NetworkSpec::from_arch(&self.spec, arch)?;
        let blocks = self
            .banks
            .iter()
            .zip(&arch.genes)
            .enumerate()
            .map(|(l, (bank, &g))| {
                let mut b = bank[g].clone();
                b.clear_cache();
                b.rename(&format!("layer{l}"));
                b
            })
            .collect();
        let mut stem = self.stem.clone();
        stem.clear_cache();
        let mut tail = self.tail.clone();
        tail.clear_cache();
        Ok(Network {
            spec,
            stem,
            blocks,
            tail,
        })
    }

    /// Output of every choice at `layer`, fed by choice 0 at all earlier layers.
    pub fn choice_outputs(&self, layer: usize, x: &Tensor) -> Result<Vec<Tensor>> {
        if layer >= self.banks.len() {
            return Err(Error::input(format!(
                "layer {layer} out of range for a {}-layer space",
                self.banks.len()
            )));
        }
        let mut h = self.stem.infer(x)?;
        for bank in &self.banks[..layer] {
            h = bank[0].infer(&h)?;
        }
        self.banks[layer].iter().map(|b| b.infer(&h)).collect()
    }

    pub fn to_arrays(&self) -> Vec<NamedArray> {
        let mut buffers = Vec::new();
        self.stem.buffers(&mut buffers);
        for bank in &self.banks {
            for b in bank {
                b.buffers(&mut buffers);
            }
        }
        self.tail.buffers(&mut buffers);
        let mut out = collect_arrays(|f| self.visit_params(f), buffers);
        let width = self.update_counts.iter().map(Vec::len).max().unwrap_or(0);
        let mut counts = vec![0f32; self.update_counts.len() * width];
        for (l, row) in self.update_counts.iter().enumerate() {
            for (c, &v) in row.iter().enumerate() {
                counts[l * width + c] = v as f32;
            }
        }
        out.push(NamedArray {
            name: COUNTS_NAME.into(),
            dims: vec![self.update_counts.len() as u32, width as u32],
            data: counts,
        });
        out
    }

    pub fn load_arrays(&mut self, arrays: &[NamedArray]) -> Result<()> {
        let table: HashMap<String, &NamedArray> = arrays.iter().map(|a| (a.name.clone(), a)).collect();
        restore_arrays(&table, |f| {
            self.stem.visit_tensors_mut(f);
            for bank in &mut self.banks {
                for b in bank {
                    b.visit_tensors_mut(f);
                }
            }
            self.tail.visit_tensors_mut(f);
        })?;
        if let Some(a) = table.get(COUNTS_NAME) {
            let width = a.dims.get(1).copied().unwrap_or(0) as usize;
            for (l, row) in self.update_counts.iter_mut().enumerate() {
                for (c, v) in row.iter_mut().enumerate() {
                    *v = a.data.get(l * width + c).copied().unwrap_or(0.0) as u64;
                }
            }
        }
        Ok(())
    }

    /// Writes `<name>.scnt` (weights) and `<name>.toml` (space).
    pub fn save(&self, dir: &Path, name: &str) -> Result<()> {
        checkpoint::save(&dir.join(format!("{name}.scnt")), &self.to_arrays())?;
        let path = dir.join(format!("{name}.toml"));
        std::fs::write(&path, self.spec.to_toml()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(dir: &Path, name: &str) -> Result<Self> {
        let spec = SpaceSpec::load(&dir.join(format!("{name}.toml")))?;
        let mut net = build_supernet(&spec, 0)?;
        net.load_arrays(&checkpoint::load(&dir.join(format!("{name}.scnt")))?)?;
        Ok(net)
    }

    pub fn clear_cache(&mut self) {
        self.active = None;
        self.stem.clear_cache();
        for bank in &mut self.banks {
            for b in bank {
                b.clear_cache();
            }
        }
        self.tail.clear_cache();
    }

    /// Input shape for a batch of `n`.
    pub fn input_shape(&self, n: usize) -> Shape {
        Shape::new(n, self.spec.input_channels, self.spec.resolution, self.spec.resolution)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::softmax_cross_entropy;

    fn batch(net: &Supernet, n: usize, seed: u64) -> Tensor {
        Tensor::rand_uniform(net.input_shape(n), 0.0, 1.0, &mut Rng::new(seed))
    }

    #[test]
    fn t1_has_twelve_banks() {
        let net = build_supernet(&SpaceSpec::t1(), 1).unwrap();
        assert_eq!(net.banks.iter().map(Vec::len).sum::<usize>(), 12);
    }

    #[test]
    fn same_seed_same_checkpoint() {
        let a = build_supernet(&SpaceSpec::t1(), 9).unwrap();
        let b = build_supernet(&SpaceSpec::t1(), 9).unwrap();
        let ea = checkpoint::encode(&a.to_arrays()).unwrap();
        let eb = checkpoint::encode(&b.to_arrays()).unwrap();
        assert_eq!(ea, eb);
    }

    #[test]
    fn skip_at_stride_two_is_rejected() {
        let mut spec = SpaceSpec::t1();
        spec.layers[1].stride = 2;
        match build_supernet(&spec, 0) {
            Err(Error::Spec { layer, .. }) => assert_eq!(layer, 1),
            other => panic!("expected spec error, got {other:?}"),
        }
    }

    #[test]
    fn bottlenecks_shared_between_skip_and_stabilizer_spaces() {
        let a = build_supernet(&SpaceSpec::t1(), 4).unwrap();
        let b = build_supernet(&SpaceSpec::t1().with_stabilizers(true), 4).unwrap();
        let mut wa = Vec::new();
        a.banks[2][1].visit_params(&mut |p| wa.push(p.value.clone()));
        let mut wb = Vec::new();
        b.banks[2][1].visit_params(&mut |p| wb.push(p.value.clone()));
        assert_eq!(wa.len(), wb.len());
        for (x, y) in wa.iter().zip(&wb) {
            assert_eq!(x.data(), y.data());
        }
    }

    #[test]
    fn logits_shape_and_gene_errors() {
        let mut net = build_supernet(&SpaceSpec::t1(), 2).unwrap();
        let x = batch(&net, 3, 0);
        let y = net.forward_path(&Architecture::new(vec![0, 1, 2, 0]), &x, Mode::Train).unwrap();
        assert_eq!(y.shape(), Shape::new(3, 4, 1, 1));
        assert!(matches!(
            net.infer_path(&Architecture::new(vec![0, 3, 0, 0]), &x),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn backward_without_forward_is_state_error() {
        let mut net = build_supernet(&SpaceSpec::t1(), 2).unwrap();
        let g = Tensor::zeros(Shape::new(1, 4, 1, 1));
        assert!(matches!(net.backward_path(&g), Err(Error::State(_))));
    }

    #[test]
    fn unchosen_blocks_stay_frozen() {
        let mut net = build_supernet(&SpaceSpec::t1(), 3).unwrap();
        let before = net.clone();
        let arch = Architecture::new(vec![0, 1, 2, 0]);
        let x = batch(&net, 4, 1);
        let logits = net.forward_path(&arch, &x, Mode::Train).unwrap();
        let (_, g) = softmax_cross_entropy(&logits, &[0, 1, 2, 3]).unwrap();
        net.backward_path(&g).unwrap();
        let mut opt = Sgd::new(0.9, 1e-4).unwrap();
        net.step(&mut opt, 0.1).unwrap();
        for (l, bank) in net.banks.iter().enumerate() {
            for (c, block) in bank.iter().enumerate() {
                let mut now = Vec::new();
                block.visit_params(&mut |p| now.push(p.value.clone()));
                let mut old = Vec::new();
                before.banks[l][c].visit_params(&mut |p| old.push(p.value.clone()));
                let same = now.iter().zip(&old).all(|(a, b)| a.data() == b.data());
                if arch.genes[l] == c {
                    assert!(now.is_empty() || !same, "chosen block ({l},{c}) did not move");
                } else {
                    assert!(same, "unchosen block ({l},{c}) moved");
                }
            }
        }
    }

    #[test]
    fn checkpoint_round_trip_keeps_counts() {
        let mut a = build_supernet(&SpaceSpec::t1(), 5).unwrap();
        a.record_updates(&Architecture::new(vec![2, 1, 0, 1]));
        let mut b = build_supernet(&SpaceSpec::t1(), 6).unwrap();
        b.load_arrays(&a.to_arrays()).unwrap();
        assert_eq!(a.update_counts(), b.update_counts());
        let x = batch(&a, 2, 3);
        let arch = Architecture::new(vec![1, 0, 1, 2]);
        assert_eq!(
            a.infer_path(&arch, &x).unwrap().data(),
            b.infer_path(&arch, &x).unwrap().data()
        );
    }
}
