//! Analytic multiply-add and parameter counts.
//!
//! Per convolution: `out_h * out_w * out_c * (in_c / groups) * k^2`. SE adds
//! its two dense layers plus one multiply per gated element; the classifier
//! adds `in * out`. Skip contributes nothing. BN affine parameters count
//! toward params; running statistics do not.

use crate::error::Result;

use super::network::NetworkSpec;
use super::spec::{Architecture, ChoiceSpec, LayerSpec, SpaceSpec, SE_RATIO, STEM_KERNEL, STEM_STRIDE};

/// Cost of one piece of the network.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Cost {
    pub madds: u64,
    pub params: u64,
}

impl Cost {
    fn conv(out_hw: usize, out_c: usize, in_per_group: usize, k: usize, bn: bool) -> Self {
        let weights = (out_c * in_per_group * k * k) as u64;
        Self {
            madds: (out_hw * out_hw) as u64 * weights,
            params: weights + if bn { 2 * out_c as u64 } else { 0 },
        }
    }

    fn add(self, other: Cost) -> Cost {
        Cost {
            madds: self.madds + other.madds,
            params: self.params + other.params,
        }
    }
}

/// Cost of one choice at `layer` given the spatial size entering it.
pub fn choice_cost(layer: &LayerSpec, choice: &ChoiceSpec, in_res: usize) -> Cost {
    block_cost(layer.in_channels, layer.out_channels, layer.stride, choice, None, in_res)
}

fn block_cost(
    in_c: usize,
    out_c: usize,
    stride: usize,
    choice: &ChoiceSpec,
    hidden: Option<usize>,
    in_res: usize,
) -> Cost {
    let out_res = in_res.div_ceil(stride);
    match *choice {
        ChoiceSpec::Skip => Cost::default(),
        ChoiceSpec::Els { .. } => Cost::conv(in_res, out_c, in_c, 1, false),
        ChoiceSpec::InvertedBottleneck { expansion, kernel, se } => {
            let hidden = hidden.unwrap_or(in_c * expansion);
            let mut c = Cost::conv(in_res, hidden, in_c, 1, true)
                .add(Cost::conv(out_res, hidden, 1, kernel, true));
            if se {
                let r = (hidden / SE_RATIO).max(1);
                c = c.add(Cost {
                    madds: (hidden * r + r * hidden + out_res * out_res * hidden) as u64,
                    params: (2 * hidden * r + r + hidden) as u64,
                });
            }
            c.add(Cost::conv(out_res, out_c, hidden, 1, true))
        }
    }
}

/// Stem, per-layer and tail costs of `arch`.
pub fn cost_breakdown(spec: &SpaceSpec, arch: &Architecture) -> Result<(Cost, Vec<Cost>, Cost)> {
    spec.check_arch(arch)?;
    let mut res = spec.stem_resolution();
    let stem = Cost::conv(res, spec.stem.out_channels, spec.input_channels, STEM_KERNEL, true);
    let mut layers = Vec::with_capacity(spec.layers.len());
    for (layer, &g) in spec.layers.iter().zip(&arch.genes) {
        layers.push(choice_cost(layer, &layer.choices[g], res));
        res = res.div_ceil(layer.stride);
    }
    let last = spec.layers.last().map_or(spec.stem.out_channels, |l| l.out_channels);
    let tail = Cost::conv(res, spec.tail.channels, last, 1, true).add(Cost {
        madds: (spec.tail.channels * spec.classes) as u64,
        params: (spec.tail.channels * spec.classes + spec.classes) as u64,
    });
    Ok((stem, layers, tail))
}

/// Total cost of a concrete network, honoring folded bottleneck widths.
pub fn network_cost(net: &NetworkSpec) -> Cost {
    let mut res = (net.resolution + 2 - STEM_KERNEL) / STEM_STRIDE + 1;
    let mut total = Cost::conv(res, net.stem.out_channels, net.input_channels, STEM_KERNEL, true);
    for l in &net.layers {
        total = total.add(block_cost(l.in_channels, l.out_channels, l.stride, &l.choice, l.hidden, res));
        res = res.div_ceil(l.stride);
    }
    total
        .add(Cost::conv(res, net.tail.channels, net.last_channels(), 1, true))
        .add(Cost {
            madds: (net.tail.channels * net.classes) as u64,
            params: (net.tail.channels * net.classes + net.classes) as u64,
        })
}

pub fn count_madds(spec: &SpaceSpec, arch: &Architecture) -> Result<u64> {
    let (stem, layers, tail) = cost_breakdown(spec, arch)?;
    Ok(stem.madds + layers.iter().map(|c| c.madds).sum::<u64>() + tail.madds)
}

pub fn count_params(spec: &SpaceSpec, arch: &Architecture) -> Result<u64> {
    let (stem, layers, tail) = cost_breakdown(spec, arch)?;
    Ok(stem.params + layers.iter().map(|c| c.params).sum::<u64>() + tail.params)
}

/// Architecture taking the most expensive choice (by madds) at every layer.
pub fn max_madds_arch(spec: &SpaceSpec) -> Architecture {
    let mut res = spec.stem_resolution();
    let mut genes = Vec::with_capacity(spec.layers.len());
    for layer in &spec.layers {
        let best = (0..layer.choices.len())
            .max_by_key(|&g| (choice_cost(layer, &layer.choices[g], res).madds, std::cmp::Reverse(g)))
            .unwrap_or(0);
        genes.push(best);
        res = res.div_ceil(layer.stride);
    }
    Architecture::new(genes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::space::supernet::build_supernet;

    #[test]
    fn pointwise_formula() {
        assert_eq!(Cost::conv(8, 16, 8, 1, false).madds, 8192);
    }

    #[test]
    fn bottleneck_params_by_hand() {
        let spec = SpaceSpec::t1();
        let c = choice_cost(&spec.layers[0], &ChoiceSpec::ib(3, 3), 8);
        assert_eq!(c.params, 8 * 24 + 24 * 9 + 24 * 8 + 2 * (24 + 24 + 8));
    }

    #[test]
    fn skip_is_free_and_all_skip_is_minimum() {
        let spec = SpaceSpec::t1();
        let skip = Architecture::new(vec![2; 4]);
        let (stem, layers, tail) = cost_breakdown(&spec, &skip).unwrap();
        assert!(layers.iter().all(|c| *c == Cost::default()));
        let base = count_madds(&spec, &skip).unwrap();
        assert_eq!(base, stem.madds + tail.madds);
        for arch in spec.enumerate() {
            assert!(count_madds(&spec, &arch).unwrap() >= base);
        }
    }

    #[test]
    fn replacing_skip_increases_madds() {
        let spec = SpaceSpec::t1();
        for arch in spec.enumerate() {
            for l in 0..4 {
                if arch.genes[l] == 2 {
                    for g in 0..2 {
                        let mut b = arch.clone();
                        b.genes[l] = g;
                        assert!(count_madds(&spec, &b).unwrap() > count_madds(&spec, &arch).unwrap());
                    }
                }
            }
        }
    }

    #[test]
    fn max_arch_is_all_k5() {
        let spec = SpaceSpec::t1();
        assert_eq!(max_madds_arch(&spec).genes, vec![1; 4]);
    }

    #[test]
    fn params_match_bank_tensors() {
        for spec in [SpaceSpec::t1(), SpaceSpec::t1().with_stabilizers(true), se_space()] {
            let net = build_supernet(&spec, 0).unwrap();
            for arch in spec.enumerate() {
                assert_eq!(
                    count_params(&spec, &arch).unwrap(),
                    net.path_param_count(&arch).unwrap(),
                    "{arch}"
                );
            }
        }
    }

    #[test]
    fn network_cost_matches_space_cost() {
        let spec = SpaceSpec::t1().with_stabilizers(true);
        for arch in spec.enumerate() {
            let net = NetworkSpec::from_arch(&spec, &arch).unwrap();
            let c = network_cost(&net);
            assert_eq!(c.madds, count_madds(&spec, &arch).unwrap());
            assert_eq!(c.params, count_params(&spec, &arch).unwrap());
        }
    }

    fn se_space() -> SpaceSpec {
        let mut spec = SpaceSpec::t1();
        for l in &mut spec.layers {
            l.choices[1] = ChoiceSpec::ib_se(6, 7);
        }
        spec
    }
}
