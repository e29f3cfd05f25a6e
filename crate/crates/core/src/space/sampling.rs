//! Path samplers for single-path training and search initialization.

use crate::error::{Error, Result};
use crate::rng::Rng;

use super::spec::{Architecture, SpaceSpec};

/// Independent uniform gene per layer.
pub fn sample_uniform(spec: &SpaceSpec, rng: &mut Rng) -> Architecture {
    Architecture::new(spec.layers.iter().map(|l| rng.below(l.choices.len())).collect())
}

/// `m` paths whose genes at every layer form a permutation of `0..m`.
pub fn sample_fair_group(spec: &SpaceSpec, rng: &mut Rng) -> Result<Vec<Architecture>> {
    let m = match spec.uniform_choice_count() {
        Some(m) => m,
        None => {
            let first = spec.layers[0].choices.len();
            let layer = spec.layers.iter().position(|l| l.choices.len() != first).unwrap_or(0);
            return Err(Error::spec(
                layer,
                format!(
                    "fair sampling needs equal choice counts; layer 0 has {first}, this layer has {}",
                    spec.layers[layer].choices.len()
                ),
            ));
        }
    };
    let columns: Vec<Vec<usize>> = spec.layers.iter().map(|_| rng.permutation(m)).collect();
    Ok((0..m)
        .map(|k| Architecture::new(columns.iter().map(|col| col[k]).collect()))
        .collect())
}
