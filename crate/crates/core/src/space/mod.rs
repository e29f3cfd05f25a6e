//! Search-space description, runtime blocks, supernet, cost model and samplers.

pub mod blocks;
pub mod cost;
pub mod network;
pub mod sampling;
pub mod spec;
pub mod supernet;

pub use blocks::{Block, StabilizerInit};
pub use cost::{count_madds, count_params, max_madds_arch, network_cost, Cost};
pub use network::{BatchResult, NetLayer, Network, NetworkSpec};
pub use sampling::{sample_fair_group, sample_uniform};
pub use spec::{Architecture, ChoiceSpec, LayerSpec, SpaceSpec, StemSpec, TailSpec};
pub use supernet::{build_supernet, build_supernet_with, Supernet};
