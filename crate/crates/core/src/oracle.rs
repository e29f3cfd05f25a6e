//! Ground truth: every architecture trained from scratch on its own, scored
//! on the held-out test split, and compared against one-shot scores.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{Dataset, SplitTag};
use crate::diagnostics::kendall_tau;
use crate::els::strip_network;
use crate::engine::{cosine_lr, Sgd};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::space::network::count_correct;
use crate::space::{count_madds, count_params, Architecture, Network, NetworkSpec, SpaceSpec, StabilizerInit};
use crate::trainer::{evaluate_many_with, write_csv, write_text, BnRecalibration};

/// Largest space the exhaustive oracle accepts.
pub const EXHAUSTIVE_BUDGET: u128 = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StandaloneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    pub seed: u64,
}

impl Default for StandaloneConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 64,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 1e-4,
            seed: 0,
        }
    }
}

impl StandaloneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("oracle.epochs must be at least 1"));
        }
        if self.batch_size < 2 {
            return Err(Error::config("oracle.batch_size must be at least 2"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("oracle.lr must be positive, got {}", self.lr)));
        }
        Sgd::new(self.momentum, self.weight_decay).map(|_| ())
    }
}

/// The freshly initialized standalone network for `arch`: skips and
/// stabilizers are removed before training.
pub fn standalone_network(spec: &SpaceSpec, arch: &Architecture, seed: u64) -> Result<Network> {
    let full = Network::fresh(NetworkSpec::from_arch(spec, arch)?, seed, StabilizerInit::default());
    let stripped = strip_network(&full)?;
    Ok(Network::fresh(stripped.spec, seed, StabilizerInit::default()))
}

/// Top-1 accuracy of a standalone network. Any split is accepted.
pub fn network_accuracy(net: &Network, data: &Dataset) -> Result<f32> {
    if data.is_empty() {
        return Err(Error::input("cannot evaluate on an empty dataset"));
    }
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut correct = 0;
    for chunk in idx.chunks(256) {
        let (x, labels) = data.batch(chunk);
        correct += count_correct(&net.infer(&x)?, &labels);
    }
    Ok(correct as f32 / data.len() as f32)
}

/// Trains `net` in place with SGD and a cosine schedule. Returns the mean
/// training accuracy of the last epoch.
pub fn train_network(net: &mut Network, train: &Dataset, cfg: &StandaloneConfig) -> Result<f32> {
    cfg.validate()?;
    train.require_not_test("standalone training")?;
    if train.len() < 2 {
        return Err(Error::input("training split needs at least 2 samples"));
    }
    let root = Rng::new(cfg.seed ^ 0x5eed_0000);
    let mut opt = Sgd::new(cfg.momentum, cfg.weight_decay)?;
    let batches = train.len().div_ceil(cfg.batch_size);
    let total = cfg.epochs * batches;
    let mut step = 0;
    let mut last_acc = 0.0;
    for epoch in 0..cfg.epochs {
        let order = root.fork(epoch as u64).permutation(train.len());
        let (mut correct, mut seen) = (0, 0);
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let (x, labels) = train.batch(chunk);
            let r = net.train_batch(&x, &labels)?;
            if !r.loss.is_finite() {
                return Err(Error::Statistics(format!("standalone training diverged at step {step}")));
            }
            net.step(&mut opt, cosine_lr(cfg.lr, step, total))?;
            correct += r.correct;
            seen += chunk.len();
            step += 1;
        }
        last_acc = correct as f32 / seen.max(1) as f32;
    }
    net.clear_cache();
    Ok(last_acc)
}

/// One trained-from-scratch result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthEntry {
    pub genes: String,
    pub test_acc: f32,
    pub train_acc: f32,
    pub madds: u64,
    pub params: u64,
    pub seed: u64,
}

/// Trains `arch` standalone on `train` and scores it on `test`.
pub fn train_standalone(
    spec: &SpaceSpec,
    arch: &Architecture,
    train: &Dataset,
    test: &Dataset,
    cfg: &StandaloneConfig,
) -> Result<GroundTruthEntry> {
    if test.tag != SplitTag::Test {
        return Err(Error::input("standalone accuracy must be measured on the test split"));
    }
    let mut net = standalone_network(spec, arch, cfg.seed)?;
    let train_acc = train_network(&mut net, train, cfg)?;
    Ok(GroundTruthEntry {
        genes: arch.key(),
        test_acc: network_accuracy(&net, test)?,
        train_acc,
        madds: count_madds(spec, arch)?,
        params: count_params(spec, arch)?,
        seed: cfg.seed,
    })
}

/// Standalone test accuracy of a set of architectures, keyed by genes.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GroundTruthTable {
    pub entries: BTreeMap<Architecture, GroundTruthEntry>,
}

impl GroundTruthTable {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, arch: &Architecture) -> Result<&GroundTruthEntry> {
        self.entries
            .get(arch)
            .ok_or_else(|| Error::input(format!("architecture {arch} is not in the ground-truth table")))
    }

    pub fn accuracy(&self, arch: &Architecture) -> Result<f32> {
        self.get(arch).map(|e| e.test_acc)
    }

    pub fn archs(&self) -> Vec<Architecture> {
        self.entries.keys().cloned().collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_csv(path, &self.entries.values().collect::<Vec<_>>())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)
            .map_err(|e| Error::io(path, std::io::Error::other(e.to_string())))?;
        let mut entries = BTreeMap::new();
        for (i, row) in r.deserialize::<GroundTruthEntry>().enumerate() {
            let e = row.map_err(|e| Error::Parse {
                source_name: path.display().to_string(),
                position: format!("line {}", i + 2),
                message: e.to_string(),
            })?;
            let arch = parse_key(&e.genes)?;
            entries.insert(arch, e);
        }
        Ok(Self { entries })
    }
}

fn parse_key(key: &str) -> Result<Architecture> {
    key.split('-')
        .map(|g| g.parse::<usize>().map_err(|_| Error::input(format!("bad gene key {key:?}"))))
        .collect::<Result<Vec<_>>>()
        .map(Architecture::new)
}

/// Hex SHA-256 of everything that determines a ground-truth table.
pub fn config_hash(spec: &SpaceSpec, cfg: &StandaloneConfig, data_tag: &str) -> Result<String> {
    let cfg_text = toml::to_string(cfg).map_err(|e| Error::input(e.to_string()))?;
    let mut h = Sha256::new();
    h.update(spec.to_toml()?.as_bytes());
    h.update(cfg_text.as_bytes());
    h.update(data_tag.as_bytes());
    Ok(format!("{:x}", h.finalize()))
}

fn pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::config(format!("cannot start {workers} workers: {e}")))
}

/// Trains every listed architecture standalone.
pub fn ground_truth_for(
    spec: &SpaceSpec,
    archs: &[Architecture],
    train: &Dataset,
    test: &Dataset,
    cfg: &StandaloneConfig,
    workers: usize,
) -> Result<GroundTruthTable> {
    cfg.validate()?;
    let rows = pool(workers)?.install(|| {
        archs
            .par_iter()
            .map(|a| train_standalone(spec, a, train, test, cfg))
            .collect::<Result<Vec<_>>>()
    })?;
    Ok(GroundTruthTable {
        entries: archs.iter().cloned().zip(rows).collect(),
    })
}

/// Trains every architecture of `spec`. Spaces beyond
/// [`EXHAUSTIVE_BUDGET`] are refused before any training.
pub fn exhaustive_ground_truth(
    spec: &SpaceSpec,
    train: &Dataset,
    test: &Dataset,
    cfg: &StandaloneConfig,
    workers: usize,
) -> Result<GroundTruthTable> {
    if spec.size() > EXHAUSTIVE_BUDGET {
        return Err(Error::config(format!(
            "space {} has {} architectures, above the exhaustive budget of {EXHAUSTIVE_BUDGET}",
            spec.name,
            spec.size()
        )));
    }
    ground_truth_for(spec, &spec.enumerate(), train, test, cfg, workers)
}

/// Writes `ground_truth.csv` and `manifest.toml` into `dir`.
pub fn save_ground_truth(dir: &Path, table: &GroundTruthTable, hash: &str) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    table.write_csv(&dir.join("ground_truth.csv"))?;
    write_text(
        &dir.join("manifest.toml"),
        &format!("config_hash = \"{hash}\"\nentries = {}\nversion = \"{}\"\n", table.len(), env!("CARGO_PKG_VERSION")),
    )
}

/// Reads a table written by [`save_ground_truth`] if its manifest carries
/// `hash`; `None` when absent or stale.
pub fn load_cached_ground_truth(dir: &Path, hash: &str) -> Result<Option<GroundTruthTable>> {
    let manifest = dir.join("manifest.toml");
    let Ok(text) = std::fs::read_to_string(&manifest) else {
        return Ok(None);
    };
    #[derive(Deserialize)]
    struct Manifest {
        config_hash: String,
    }
    let m: Manifest = toml::from_str(&text).map_err(|e| Error::Parse {
        source_name: manifest.display().to_string(),
        position: "manifest".into(),
        message: e.to_string(),
    })?;
    if m.config_hash != hash {
        return Ok(None);
    }
    GroundTruthTable::read_csv(&dir.join("ground_truth.csv")).map(Some)
}

/// Ground truth for `archs`, cached under `dir` keyed by `hash`.
///
/// Finished entries go to `partial.csv` after every chunk of `workers`
/// architectures, so an interrupted run resumes where it stopped.
#[allow(clippy::too_many_arguments)]
pub fn cached_ground_truth(
    dir: &Path,
    hash: &str,
    spec: &SpaceSpec,
    archs: &[Architecture],
    train: &Dataset,
    test: &Dataset,
    cfg: &StandaloneConfig,
    workers: usize,
) -> Result<GroundTruthTable> {
    if let Some(t) = load_cached_ground_truth(dir, hash)? {
        if archs.iter().all(|a| t.get(a).is_ok()) {
            return Ok(t);
        }
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let partial = dir.join("partial.csv");
    let hash_file = dir.join("partial.hash");
    let mut table = match std::fs::read_to_string(&hash_file) {
        Ok(h) if h.trim() == hash && partial.exists() => GroundTruthTable::read_csv(&partial)?,
        _ => GroundTruthTable::default(),
    };
    write_text(&hash_file, hash)?;
    let todo: Vec<Architecture> = archs.iter().filter(|a| table.get(a).is_err()).cloned().collect();
    for chunk in todo.chunks(workers.max(1)) {
        let done = ground_truth_for(spec, chunk, train, test, cfg, workers)?;
        table.entries.extend(done.entries);
        table.write_csv(&partial)?;
    }
    save_ground_truth(dir, &table, hash)?;
    Ok(table)
}

/// One point of a one-shot versus ground-truth comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingPoint {
    pub genes: String,
    pub oneshot_acc: f32,
    pub standalone_acc: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingResult {
    pub tau: f64,
    pub points: Vec<RankingPoint>,
}

impl RankingResult {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_csv(path, &self.points)
    }

    /// Pairs whose standalone accuracies differ by more than `margin`, and
    /// how many of them the one-shot scores order the same way.
    pub fn ordered_pairs(&self, margin: f32) -> (usize, usize) {
        let (mut agree, mut total) = (0, 0);
        for (i, p) in self.points.iter().enumerate() {
            for q in &self.points[i + 1..] {
                let d = p.standalone_acc - q.standalone_acc;
                if d.abs() > margin {
                    total += 1;
                    agree += usize::from(d * (p.oneshot_acc - q.oneshot_acc) > 0.0);
                }
            }
        }
        (agree, total)
    }
}

/// Rank correlation between arbitrary one-shot scores and the table.
pub fn rank_against(table: &GroundTruthTable, archs: &[Architecture], oneshot: &[f32]) -> Result<RankingResult> {
    if archs.len() != oneshot.len() {
        return Err(Error::input("one score per architecture required"));
    }
    let points = archs
        .iter()
        .zip(oneshot)
        .map(|(a, &s)| {
            Ok(RankingPoint {
                genes: a.key(),
                oneshot_acc: s,
                standalone_acc: table.accuracy(a)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let x: Vec<f64> = points.iter().map(|p| p.oneshot_acc as f64).collect();
    let y: Vec<f64> = points.iter().map(|p| p.standalone_acc as f64).collect();
    Ok(RankingResult {
        tau: kendall_tau(&x, &y)?,
        points,
    })
}

/// Scores `sample_size` table architectures (all of them when the table is
/// smaller) with inherited supernet weights on `val` and correlates with the
/// standalone accuracies. With `recal`, each path's batch-norm statistics
/// are re-estimated before scoring.
pub fn ranking_experiment(
    net: &crate::space::Supernet,
    val: &Dataset,
    table: &GroundTruthTable,
    sample_size: usize,
    rng: &mut Rng,
    workers: usize,
    recal: Option<&BnRecalibration>,
) -> Result<RankingResult> {
    let mut archs = table.archs();
    if sample_size < archs.len() {
        let pick = rng.permutation(archs.len());
        let mut chosen: Vec<usize> = pick[..sample_size].to_vec();
        chosen.sort_unstable();
        archs = chosen.into_iter().map(|i| archs[i].clone()).collect();
    }
    for a in &archs {
        net.spec.check_arch(a)?;
    }
    let scores = evaluate_many_with(net, &archs, val, workers, recal)?;
    rank_against(table, &archs, &scores)
}
