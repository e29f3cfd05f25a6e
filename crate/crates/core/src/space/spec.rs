use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const KERNELS: [usize; 3] = [3, 5, 7];
pub const EXPANSIONS: [usize; 4] = [1, 2, 3, 6];
/// Squeeze-excitation bottleneck ratio.
pub const SE_RATIO: usize = 4;

/// One candidate operation at a searchable layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ChoiceSpec {
    InvertedBottleneck {
        expansion: usize,
        kernel: usize,
        #[serde(default)]
        se: bool,
    },
    Skip,
    /// Bias-free pointwise stabilizer. `relu` turns it into the
    /// non-equivariant variant used as a negative control.
    Els {
        #[serde(default)]
        relu: bool,
    },
}

impl ChoiceSpec {
    pub const fn ib(expansion: usize, kernel: usize) -> Self {
        ChoiceSpec::InvertedBottleneck {
            expansion,
            kernel,
            se: false,
        }
    }

    pub const fn ib_se(expansion: usize, kernel: usize) -> Self {
        ChoiceSpec::InvertedBottleneck {
            expansion,
            kernel,
            se: true,
        }
    }

    pub const ELS: ChoiceSpec = ChoiceSpec::Els { relu: false };

    pub fn is_identity_like(&self) -> bool {
        matches!(self, ChoiceSpec::Skip | ChoiceSpec::Els { .. })
    }

    pub fn is_inverted_bottleneck(&self) -> bool {
        matches!(self, ChoiceSpec::InvertedBottleneck { .. })
    }

    pub fn label(&self) -> String {
        match *self {
            ChoiceSpec::InvertedBottleneck { expansion, kernel, se } => {
                format!("E{expansion}K{kernel}{}", if se { "_SE" } else { "" })
            }
            ChoiceSpec::Skip => "skip".into(),
            ChoiceSpec::Els { relu: false } => "els".into(),
            ChoiceSpec::Els { relu: true } => "els-relu".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub choices: Vec<ChoiceSpec>,
}

/// Fixed 3x3 stride-2 convolution + BN + relu6.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StemSpec {
    pub out_channels: usize,
}

/// Fixed 1x1 convolution + BN + relu6, global pooling and a linear classifier.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TailSpec {
    pub channels: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpaceSpec {
    pub name: String,
    pub input_channels: usize,
    pub resolution: usize,
    pub classes: usize,
    pub stem: StemSpec,
    pub tail: TailSpec,
    pub layers: Vec<LayerSpec>,
}

pub const STEM_KERNEL: usize = 3;
pub const STEM_STRIDE: usize = 2;

impl SpaceSpec {
    /// The desk-scale toy space: 16x16 RGB input, 4 classes, four stride-1
    /// layers of 8 channels choosing among {E3K3, E3K5, skip}.
    pub fn t1() -> Self {
        Self::t1_with(8, 16)
    }

    pub fn t1_with(channels: usize, tail_channels: usize) -> Self {
        let layers = (0..4)
            .map(|_| LayerSpec {
                in_channels: channels,
                out_channels: channels,
                stride: 1,
                choices: vec![ChoiceSpec::ib(3, 3), ChoiceSpec::ib(3, 5), ChoiceSpec::Skip],
            })
            .collect();
        Self {
            name: "t1".into(),
            input_channels: 3,
            resolution: 16,
            classes: 4,
            stem: StemSpec {
                out_channels: channels,
            },
            tail: TailSpec {
                channels: tail_channels,
            },
            layers,
        }
    }

    /// A 19-layer MobileNetV2-style space with six inverted bottlenecks
    /// (E3/E6 x K3/K5/K7, numbered `(e-3) + (k-3)/2`) plus skip where legal.
    pub fn s1() -> Self {
        Self::mobile_space("s1", false)
    }

    /// [`SpaceSpec::s1`] where every inverted bottleneck also has an SE twin.
    pub fn s2() -> Self {
        Self::mobile_space("s2", true)
    }

    fn mobile_space(name: &str, with_se: bool) -> Self {
        // (out_channels, repeats, first stride)
        let stages = [(24, 2, 2), (40, 3, 2), (80, 4, 2), (96, 4, 1), (192, 4, 2), (320, 2, 1)];
        let mut ib = Vec::new();
        for e in [3, 6] {
            for k in KERNELS {
                ib.push(ChoiceSpec::ib(e, k));
            }
        }
        // Numbering o = (x-3) + (y-3)/2 interleaves expansions across kernels.
        ib.sort_by_key(|c| match *c {
            ChoiceSpec::InvertedBottleneck { expansion, kernel, .. } => (expansion - 3) + (kernel - 3) / 2,
            _ => unreachable!(),
        });
        let mut ib_all = ib.clone();
        if with_se {
            ib_all.extend(ib.iter().map(|c| match *c {
                ChoiceSpec::InvertedBottleneck { expansion, kernel, .. } => ChoiceSpec::ib_se(expansion, kernel),
                other => other,
            }));
        }
        let mut layers = Vec::new();
        let mut c_in = 16;
        for (c_out, repeats, first_stride) in stages {
            for r in 0..repeats {
                let stride = if r == 0 { first_stride } else { 1 };
                let mut choices = ib_all.clone();
                if stride == 1 && c_in == c_out {
                    choices.push(ChoiceSpec::Skip);
                }
                layers.push(LayerSpec {
                    in_channels: c_in,
                    out_channels: c_out,
                    stride,
                    choices,
                });
                c_in = c_out;
            }
        }
        Self {
            name: name.into(),
            input_channels: 3,
            resolution: 224,
            classes: 1000,
            stem: StemSpec { out_channels: 16 },
            tail: TailSpec { channels: 1280 },
            layers,
        }
    }

    /// Replaces every skip (when `enabled`) or stabilizer (when not) choice
    /// with the other kind. Layers where skip would be illegal keep their
    /// stabilizer-free choice set.
    pub fn with_stabilizers(&self, enabled: bool) -> Self {
        let mut out = self.clone();
        for layer in &mut out.layers {
            for c in &mut layer.choices {
                match (*c, enabled) {
                    (ChoiceSpec::Skip, true) => *c = ChoiceSpec::ELS,
                    (ChoiceSpec::Els { .. }, false) => *c = ChoiceSpec::Skip,
                    _ => {}
                }
            }
        }
        out
    }

    /// Stabilizers followed by a ReLU; used only to probe non-equivariance.
    pub fn with_relu_stabilizers(&self) -> Self {
        let mut out = self.with_stabilizers(true);
        for layer in &mut out.layers {
            for c in &mut layer.choices {
                if let ChoiceSpec::Els { relu } = c {
                    *relu = true;
                }
            }
        }
        out
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn choice_counts(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.choices.len()).collect()
    }

    /// The shared choice count, if every layer has the same number.
    pub fn uniform_choice_count(&self) -> Option<usize> {
        let counts = self.choice_counts();
        let first = *counts.first()?;
        counts.iter().all(|&c| c == first).then_some(first)
    }

    /// Number of architectures, saturating at `u128::MAX`.
    pub fn size(&self) -> u128 {
        self.layers
            .iter()
            .fold(1u128, |acc, l| acc.saturating_mul(l.choices.len() as u128))
    }

    pub fn has_stabilizers(&self) -> bool {
        self.layers
            .iter()
            .any(|l| l.choices.iter().any(|c| matches!(c, ChoiceSpec::Els { .. })))
    }

    pub fn has_skips(&self) -> bool {
        self.layers
            .iter()
            .any(|l| l.choices.contains(&ChoiceSpec::Skip))
    }

    /// Spatial size after the stem.
    pub fn stem_resolution(&self) -> usize {
        (self.resolution + 2 - STEM_KERNEL) / STEM_STRIDE + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::config(format!("class count {} < 2", self.classes)));
        }
        if self.input_channels == 0 || self.resolution < STEM_KERNEL {
            return Err(Error::config(format!(
                "input {}x{}x{} too small for the stem",
                self.input_channels, self.resolution, self.resolution
            )));
        }
        if self.stem.out_channels == 0 || self.tail.channels == 0 {
            return Err(Error::config("stem and tail need at least one channel"));
        }
        let mut c = self.stem.out_channels;
        let mut res = self.stem_resolution();
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.in_channels != c {
                return Err(Error::spec(
                    i,
                    format!("in_channels {} but previous layer produces {c}", layer.in_channels),
                ));
            }
            if layer.out_channels == 0 {
                return Err(Error::spec(i, "out_channels must be positive"));
            }
            if layer.stride == 0 || layer.stride > 2 {
                return Err(Error::spec(i, format!("stride {} not in {{1, 2}}", layer.stride)));
            }
            if layer.choices.len() < 2 {
                return Err(Error::spec(
                    i,
                    format!("{} choice(s); every layer needs at least 2", layer.choices.len()),
                ));
            }
            for (j, choice) in layer.choices.iter().enumerate() {
                match *choice {
                    ChoiceSpec::InvertedBottleneck { expansion, kernel, .. } => {
                        if !KERNELS.contains(&kernel) {
                            return Err(Error::spec(i, format!("choice {j}: kernel {kernel} not in {KERNELS:?}")));
                        }
                        if !EXPANSIONS.contains(&expansion) {
                            return Err(Error::spec(
                                i,
                                format!("choice {j}: expansion {expansion} not in {EXPANSIONS:?}"),
                            ));
                        }
                    }
                    ChoiceSpec::Skip => {
                        if layer.stride != 1 {
                            return Err(Error::spec(i, format!("choice {j}: skip at a stride-{} layer", layer.stride)));
                        }
                        if layer.in_channels != layer.out_channels {
                            return Err(Error::spec(
                                i,
                                format!(
                                    "choice {j}: skip cannot map {} to {} channels",
                                    layer.in_channels, layer.out_channels
                                ),
                            ));
                        }
                    }
                    ChoiceSpec::Els { .. } => {
                        if layer.stride != 1 {
                            return Err(Error::spec(
                                i,
                                format!("choice {j}: stabilizer at a stride-{} layer", layer.stride),
                            ));
                        }
                    }
                }
            }
            c = layer.out_channels;
            res = res.div_ceil(layer.stride);
        }
        if res == 0 {
            return Err(Error::config("feature map vanishes before the tail"));
        }
        Ok(())
    }

    pub fn check_arch(&self, arch: &Architecture) -> Result<()> {
        if arch.genes.len() != self.layers.len() {
            return Err(Error::input(format!(
                "architecture has {} genes, space has {} layers",
                arch.genes.len(),
                self.layers.len()
            )));
        }
        for (i, (&g, layer)) in arch.genes.iter().zip(&self.layers).enumerate() {
            if g >= layer.choices.len() {
                return Err(Error::input(format!(
                    "gene {g} at layer {i} out of range (layer has {} choices)",
                    layer.choices.len()
                )));
            }
        }
        Ok(())
    }

    pub fn choice(&self, layer: usize, gene: usize) -> &ChoiceSpec {
        &self.layers[layer].choices[gene]
    }

    /// All-identity architecture: the identity-like choice at every layer.
    /// `None` if some layer has no skip or stabilizer.
    pub fn all_identity(&self) -> Option<Architecture> {
        let genes = self
            .layers
            .iter()
            .map(|l| l.choices.iter().position(|c| c.is_identity_like()))
            .collect::<Option<Vec<_>>>()?;
        Some(Architecture::new(genes))
    }

    /// Enumerates every architecture in lexicographic gene order.
    pub fn enumerate(&self) -> Vec<Architecture> {
        let counts = self.choice_counts();
        let total: usize = counts.iter().product();
        let mut out = Vec::with_capacity(total);
        let mut genes = vec![0usize; counts.len()];
        for _ in 0..total {
            out.push(Architecture::new(genes.clone()));
            for i in (0..genes.len()).rev() {
                genes[i] += 1;
                if genes[i] < counts[i] {
                    break;
                }
                genes[i] = 0;
            }
        }
        out
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::input(format!("cannot serialize space: {e}")))
    }

    pub fn from_toml(text: &str, source: &str) -> Result<Self> {
        let spec: SpaceSpec = toml::from_str(text).map_err(|e| Error::Parse {
            source_name: source.into(),
            position: e
                .span()
                .map(|s| format!("byte {}", s.start))
                .unwrap_or_else(|| "unknown".into()),
            message: e.message().to_string(),
        })?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, &path.display().to_string())
    }

    /// Resolves `t1`, `s1`, `s2` or a path to a TOML space file.
    pub fn resolve(name_or_path: &str) -> Result<Self> {
        match name_or_path {
            "t1" => Ok(Self::t1()),
            "s1" => Ok(Self::s1()),
            "s2" => Ok(Self::s2()),
            path => Self::load(Path::new(path)),
        }
    }
}

/// A concrete subnetwork: one choice index per layer.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub struct Architecture {
    pub genes: Vec<usize>,
}

impl Architecture {
    pub fn new(genes: Vec<usize>) -> Self {
        Self { genes }
    }

    pub fn len(&self) -> usize {
        self.genes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.genes.is_empty()
    }

    /// Genes joined by `-`, safe inside CSV cells and file names.
    pub fn key(&self) -> String {
        self.genes.iter().map(|g| g.to_string()).collect::<Vec<_>>().join("-")
    }

    pub fn count_choice(&self, spec: &SpaceSpec, pred: impl Fn(&ChoiceSpec) -> bool) -> usize {
        self.genes
            .iter()
            .enumerate()
            .filter(|(l, &g)| pred(spec.choice(*l, g)))
            .count()
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let body = self.genes.iter().map(|g| g.to_string()).collect::<Vec<_>>().join(",");
        write!(f, "({body})")
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let body = s.trim().trim_start_matches('(').trim_end_matches(')');
        let genes = body
            .split([',', '-'])
            .map(|t| {
                t.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::input(format!("bad gene '{t}' in architecture '{s}'")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::new(genes))
    }
}

impl From<Architecture> for String {
    fn from(a: Architecture) -> String {
        a.to_string()
    }
}

impl TryFrom<String> for Architecture {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn t1_is_valid_with_81_archs() {
        let t1 = SpaceSpec::t1();
        t1.validate().unwrap();
        assert_eq!(t1.size(), 81);
        assert_eq!(t1.enumerate().len(), 81);
        assert_eq!(t1.uniform_choice_count(), Some(3));
    }

    #[test]
    fn s1_s2_layouts() {
        let s1 = SpaceSpec::s1();
        s1.validate().unwrap();
        assert_eq!(s1.num_layers(), 19);
        assert!(s1.choice_counts().iter().all(|&c| c == 6 || c == 7));
        assert_eq!(s1.layers[1].choices.len(), 7);
        assert_eq!(s1.layers[1].choices[6], ChoiceSpec::Skip);
        // o = (x-3) + (y-3)/2 ordering
        assert_eq!(s1.layers[0].choices[0], ChoiceSpec::ib(3, 3));
        assert_eq!(s1.layers[0].choices[1], ChoiceSpec::ib(3, 5));
        let s2 = SpaceSpec::s2();
        s2.validate().unwrap();
        assert!(s2.choice_counts().iter().all(|&c| c == 12 || c == 13));
        assert!(s2.with_stabilizers(true).has_stabilizers());
    }

    #[test]
    fn skip_at_stride_two_is_rejected() {
        let mut spec = SpaceSpec::t1();
        spec.layers[2].stride = 2;
        match spec.validate() {
            Err(Error::Spec { layer, .. }) => assert_eq!(layer, 2),
            other => panic!("expected spec error, got {other:?}"),
        }
    }

    #[test]
    fn skip_across_channel_change_rejected_but_els_allowed() {
        let mut spec = SpaceSpec::t1();
        spec.layers[1].out_channels = 12;
        spec.layers[2].in_channels = 12;
        assert!(spec.validate().is_err());
        let els = spec.with_stabilizers(true);
        els.validate().unwrap();
    }

    #[test]
    fn single_choice_layer_rejected() {
        let mut spec = SpaceSpec::t1();
        spec.layers[0].choices.truncate(1);
        assert!(matches!(spec.validate(), Err(Error::Spec { layer: 0, .. })));
    }

    #[test]
    fn toml_roundtrip() {
        let spec = SpaceSpec::t1().with_stabilizers(true);
        let text = spec.to_toml().unwrap();
        assert_eq!(SpaceSpec::from_toml(&text, "mem").unwrap(), spec);
    }

    #[test]
    fn arch_text_forms() {
        let a: Architecture = "(0,5,0,6)".parse().unwrap();
        assert_eq!(a.genes, vec![0, 5, 0, 6]);
        assert_eq!(a.to_string(), "(0,5,0,6)");
        assert_eq!(a.key(), "0-5-0-6");
        assert_eq!("0-5-0-6".parse::<Architecture>().unwrap(), a);
        assert!("1,x".parse::<Architecture>().is_err());
    }

    #[test]
    fn gene_out_of_range_is_input_error() {
        let spec = SpaceSpec::t1();
        let err = spec.check_arch(&Architecture::new(vec![0, 3, 0, 0])).unwrap_err();
        assert!(matches!(err, Error::Input(_)));
    }
}
