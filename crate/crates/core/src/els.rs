//! Equivariant learnable stabilizers: folding a bias-free pointwise
//! convolution into the convolution that follows it, stripping every
//! stabilizer out of a path, and checking that nothing changed.

use serde::{Deserialize, Serialize};

use crate::engine::{Shape, Tensor};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::space::{Architecture, Block, ChoiceSpec, NetLayer, Network, NetworkSpec, Supernet};

pub const DEFAULT_TOLERANCE: f32 = 1e-4;

/// Composes `w1` (c1, c0, 1, 1) followed by `w2` (m, c1, k, k) into one
/// convolution `w3` (m, c0, k, k):
/// `w3[c, u, y, x] = sum_p w2[c, p, y, x] * w1[p, u, 0, 0]`.
pub fn fold_pointwise(w1: &Tensor, w2: &Tensor) -> Result<Tensor> {
    let s1 = w1.shape();
    let s2 = w2.shape();
    if s1.h != 1 || s1.w != 1 {
        return Err(Error::dim(format!("first weight must be pointwise, got {s1}")));
    }
    if s2.c != s1.n {
        return Err(Error::dim(format!(
            "inner channels disagree: first weight produces {} channels, second consumes {}",
            s1.n, s2.c
        )));
    }
    let (m, c1, c0, kh, kw) = (s2.n, s1.n, s1.c, s2.h, s2.w);
    let mut w3 = Tensor::zeros(Shape::new(m, c0, kh, kw));
    let a = w1.data();
    let b = w2.data();
    let out = w3.data_mut();
    let plane = kh * kw;
    for c in 0..m {
        for u in 0..c0 {
            let dst = &mut out[(c * c0 + u) * plane..(c * c0 + u + 1) * plane];
            for p in 0..c1 {
                let scale = a[p * c0 + u];
                let src = &b[(c * c1 + p) * plane..(c * c1 + p + 1) * plane];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += s * scale;
                }
            }
        }
    }
    Ok(w3)
}

/// Removes every skip and stabilizer from `net`, folding each stabilizer into
/// the first convolution after it (the tail's if none follows). Runs of
/// stabilizers fold right to left. A stabilizer followed by a ReLU is folded
/// as if it were linear, which is exactly what makes that variant unsound.
pub fn strip_network(net: &Network) -> Result<Network> {
    let mut kept: Vec<(NetLayer, Block)> = Vec::new();
    let mut tail = net.tail.clone();
    for (layer, block) in net.spec.layers.iter().zip(&net.blocks).rev() {
        match block {
            Block::Skip => {}
            Block::Inverted(_) => kept.push((layer.clone(), block.clone())),
            Block::Stabilizer(s) => {
                let target = match kept.last_mut() {
                    Some((next, b)) => {
                        if let (Some(hidden), ChoiceSpec::InvertedBottleneck { expansion, .. }) =
                            (next.hidden_width(), next.choice)
                        {
                            next.hidden = (hidden != layer.in_channels * expansion).then_some(hidden);
                        }
                        next.in_channels = layer.in_channels;
                        b.leading_pointwise_mut()
                            .ok_or_else(|| Error::State("fold target has no leading convolution".into()))?
                    }
                    None => &mut tail.conv.conv,
                };
                let w3 = fold_pointwise(&s.conv.weight.value, &target.weight.value)?;
                target.weight.grad = Tensor::zeros(w3.shape());
                target.weight.value = w3;
            }
        }
    }
    kept.reverse();
    let mut layers = Vec::with_capacity(kept.len());
    let mut blocks = Vec::with_capacity(kept.len());
    for (i, (layer, mut block)) in kept.into_iter().enumerate() {
        block.rename(&format!("layer{i}"));
        block.clear_cache();
        layers.push(layer);
        blocks.push(block);
    }
    let mut stem = net.stem.clone();
    stem.clear_cache();
    tail.clear_cache();
    Ok(Network {
        spec: NetworkSpec {
            layers,
            ..net.spec.clone()
        },
        stem,
        blocks,
        tail,
    })
}

/// The standalone network for `arch` with all stabilizers folded away.
pub fn strip_stabilizers(arch: &Architecture, supernet: &Supernet) -> Result<Network> {
    strip_network(&supernet.extract(arch)?)
}

/// Outcome of comparing two networks on random probe batches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub max_abs_output_diff: f32,
    pub probes: usize,
    pub passed: bool,
    pub tolerance: f32,
    /// Max abs logit difference of each probe batch.
    pub probe_diffs: Vec<f32>,
}

impl FoldReport {
    /// Probes whose difference exceeded the tolerance.
    pub fn failed_probes(&self) -> usize {
        self.probe_diffs.iter().filter(|&&d| d > self.tolerance).count()
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::input(format!("cannot serialize report: {e}")))
    }
}

pub const PROBE_BATCH: usize = 2;

/// Max abs logit difference between `a` and `b` over `probes` random batches
/// of uniform `[0, 1)` images.
pub fn verify_equivalence(a: &Network, b: &Network, probes: usize, tolerance: f32, rng: &mut Rng) -> Result<FoldReport> {
    let sa = &a.spec;
    let sb = &b.spec;
    if (sa.input_channels, sa.resolution, sa.classes) != (sb.input_channels, sb.resolution, sb.classes) {
        return Err(Error::input(format!(
            "networks disagree on shapes: {}x{}x{} -> {} vs {}x{}x{} -> {}",
            sa.input_channels, sa.resolution, sa.resolution, sa.classes, sb.input_channels, sb.resolution,
            sb.resolution, sb.classes
        )));
    }
    let shape = Shape::new(PROBE_BATCH, sa.input_channels, sa.resolution, sa.resolution);
    let mut probe_diffs = Vec::with_capacity(probes);
    for _ in 0..probes {
        let x = Tensor::rand_uniform(shape, 0.0, 1.0, rng);
        let d = a.infer(&x)?.max_abs_diff(&b.infer(&x)?)?;
        probe_diffs.push(d);
    }
    let max = probe_diffs.iter().copied().fold(0.0f32, f32::max);
    Ok(FoldReport {
        max_abs_output_diff: max,
        probes,
        passed: max <= tolerance,
        tolerance,
        probe_diffs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{conv2d, ConvGeom};
    use crate::space::{build_supernet_with, count_params, network_cost, SpaceSpec, StabilizerInit};

    fn els_net(arch: &[usize], seed: u64) -> (Supernet, Architecture) {
        let spec = SpaceSpec::t1().with_stabilizers(true);
        (
            build_supernet_with(&spec, seed, StabilizerInit::He).unwrap(),
            Architecture::new(arch.to_vec()),
        )
    }

    #[test]
    fn identity_fold_is_bitwise() {
        let mut rng = Rng::new(1);
        let mut eye = Tensor::zeros(Shape::new(3, 3, 1, 1));
        for c in 0..3 {
            let i = eye.index(c, c, 0, 0);
            eye.data_mut()[i] = 1.0;
        }
        let w2 = Tensor::randn(Shape::new(5, 3, 3, 3), 1.0, &mut rng);
        assert_eq!(fold_pointwise(&eye, &w2).unwrap().data(), w2.data());
    }

    #[test]
    fn scalar_fold_by_hand() {
        let w1 = Tensor::full(Shape::new(1, 1, 1, 1), 2.0);
        let w2 = Tensor::full(Shape::new(1, 1, 3, 3), 1.0);
        assert_eq!(fold_pointwise(&w1, &w2).unwrap().data(), &[2.0; 9]);
    }

    #[test]
    fn mismatched_inner_channels() {
        let w1 = Tensor::zeros(Shape::new(4, 2, 1, 1));
        let w2 = Tensor::zeros(Shape::new(3, 5, 3, 3));
        assert!(matches!(fold_pointwise(&w1, &w2), Err(Error::Dimension(_))));
    }

    #[test]
    fn folded_conv_matches_sequential_convs() {
        let mut rng = Rng::new(2);
        let w1 = Tensor::randn(Shape::new(4, 3, 1, 1), 1.0, &mut rng);
        let w2 = Tensor::randn(Shape::new(2, 4, 3, 3), 1.0, &mut rng);
        let w3 = fold_pointwise(&w1, &w2).unwrap();
        let geom = ConvGeom::new(1, 1, 1);
        for _ in 0..50 {
            let x = Tensor::randn(Shape::new(1, 3, 5, 5), 1.0, &mut rng);
            let seq = conv2d(&conv2d(&x, &w1, ConvGeom::pointwise()).unwrap(), &w2, geom).unwrap();
            let fused = conv2d(&x, &w3, geom).unwrap();
            assert!(seq.max_abs_diff(&fused).unwrap() <= 1e-5);
        }
    }

    #[test]
    fn no_stabilizer_leaves_network_unchanged() {
        let (net, arch) = els_net(&[0, 1, 0, 1], 3);
        let path = net.extract(&arch).unwrap();
        let stripped = strip_network(&path).unwrap();
        assert_eq!(stripped.spec, path.spec);
        let report = verify_equivalence(&path, &stripped, 5, 0.0, &mut Rng::new(0)).unwrap();
        assert!(report.passed);
    }

    #[test]
    fn one_stabilizer_folds_exactly() {
        let (net, arch) = els_net(&[0, 2, 1, 0], 4);
        let path = net.extract(&arch).unwrap();
        let stripped = strip_stabilizers(&arch, &net).unwrap();
        assert_eq!(stripped.blocks.len(), 3);
        let report = verify_equivalence(&path, &stripped, 100, DEFAULT_TOLERANCE, &mut Rng::new(5)).unwrap();
        assert!(report.passed, "{}", report.max_abs_output_diff);
    }

    #[test]
    fn trailing_and_consecutive_stabilizers_fold_into_tail() {
        let (net, arch) = els_net(&[1, 0, 2, 2], 6);
        let path = net.extract(&arch).unwrap();
        let stripped = strip_network(&path).unwrap();
        assert_eq!(stripped.blocks.len(), 2);
        let report = verify_equivalence(&path, &stripped, 20, DEFAULT_TOLERANCE, &mut Rng::new(5)).unwrap();
        assert!(report.passed, "{}", report.max_abs_output_diff);

        // Composing the two stabilizers first gives the same tail weight.
        let w = |l: usize| match &path.blocks[l] {
            Block::Stabilizer(s) => s.conv.weight.value.clone(),
            _ => unreachable!(),
        };
        let both = fold_pointwise(&w(2), &w(3)).unwrap();
        let once = fold_pointwise(&both, &path.tail.conv.conv.weight.value).unwrap();
        let diff = once.max_abs_diff(&stripped.tail.conv.conv.weight.value).unwrap();
        assert!(diff <= 1e-5, "{diff}");
    }

    #[test]
    fn all_stabilizer_arch_reduces_to_stem_and_tail() {
        let (net, arch) = els_net(&[2, 2, 2, 2], 7);
        let path = net.extract(&arch).unwrap();
        let stripped = strip_network(&path).unwrap();
        assert!(stripped.blocks.is_empty());
        let report = verify_equivalence(&path, &stripped, 20, DEFAULT_TOLERANCE, &mut Rng::new(1)).unwrap();
        assert!(report.passed, "{}", report.max_abs_output_diff);
    }

    #[test]
    fn stripping_is_idempotent() {
        let (net, arch) = els_net(&[2, 0, 2, 1], 8);
        let once = strip_stabilizers(&arch, &net).unwrap();
        let twice = strip_network(&once).unwrap();
        assert_eq!(once.spec, twice.spec);
        let a = once.to_arrays();
        let b = twice.to_arrays();
        assert_eq!(a, b);
    }

    #[test]
    fn stripped_params_drop_stabilizer_weights() {
        let spec = SpaceSpec::t1().with_stabilizers(true);
        let (net, arch) = els_net(&[2, 0, 2, 1], 9);
        let stripped = strip_stabilizers(&arch, &net).unwrap();
        let before = count_params(&spec, &arch).unwrap();
        assert_eq!(stripped.param_count(), before - 2 * 8 * 8);
        assert_eq!(network_cost(&stripped.spec).params, stripped.param_count());
    }

    #[test]
    fn channel_changing_stabilizer_folds_exactly() {
        let mut spec = SpaceSpec::t1_with(8, 16);
        spec.layers[1].out_channels = 6;
        spec.layers[1].choices = vec![ChoiceSpec::ib(3, 3), ChoiceSpec::ELS];
        spec.layers[2].in_channels = 6;
        spec.layers[2].choices[2] = ChoiceSpec::ELS;
        let net = build_supernet_with(&spec, 3, StabilizerInit::He).unwrap();
        let arch = Architecture::new(vec![0, 1, 0, 0]);
        let stripped = strip_stabilizers(&arch, &net).unwrap();
        assert_eq!(stripped.spec.layers[1].in_channels, 8);
        assert_eq!(stripped.spec.layers[1].hidden, Some(18));
        let report =
            verify_equivalence(&net.extract(&arch).unwrap(), &stripped, 20, DEFAULT_TOLERANCE, &mut Rng::new(2))
                .unwrap();
        assert!(report.passed, "{}", report.max_abs_output_diff);
        let rebuilt = Network::fresh(stripped.spec.clone(), 0, StabilizerInit::default());
        assert_eq!(rebuilt.param_count(), stripped.param_count());
        assert_eq!(network_cost(&stripped.spec).params, stripped.param_count());
    }

    #[test]
    fn relu_stabilizer_is_not_foldable() {
        let spec = SpaceSpec::t1().with_relu_stabilizers();
        let net = build_supernet_with(&spec, 10, StabilizerInit::default()).unwrap();
        let arch = Architecture::new(vec![0, 2, 0, 1]);
        let stripped = strip_stabilizers(&arch, &net).unwrap();
        let report = verify_equivalence(
            &net.extract(&arch).unwrap(),
            &stripped,
            100,
            DEFAULT_TOLERANCE,
            &mut Rng::new(3),
        )
        .unwrap();
        assert!(!report.passed);
        assert!(report.failed_probes() >= 95, "{}", report.failed_probes());
    }

    #[test]
    fn self_comparison_is_zero() {
        let (net, arch) = els_net(&[0, 2, 1, 0], 4);
        let path = net.extract(&arch).unwrap();
        let r = verify_equivalence(&path, &path, 3, 0.0, &mut Rng::new(9)).unwrap();
        assert_eq!(r.max_abs_output_diff, 0.0);
        assert!(r.passed);
    }
}
