//! Single-path supernet training and one-shot evaluation.
//!
//! `spos` trains one uniformly sampled path per step. `fairnas` samples `m`
//! paths whose genes form a permutation at every layer, averages their
//! gradients and applies a single update, so every block is trained exactly
//! once per step.

use std::io::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::engine::{cosine_lr, softmax_cross_entropy, Mode, Sgd, Tensor};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::space::network::count_correct;
use crate::space::{sample_fair_group, sample_uniform, Architecture, Supernet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Spos,
    Fairnas,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub strategy: Strategy,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    pub seed: u64,
    pub els_enabled: bool,
    /// Random paths scored on the validation set after every epoch.
    pub val_paths: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Fairnas,
            epochs: 10,
            batch_size: 64,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 1e-4,
            seed: 0,
            els_enabled: true,
            val_paths: 4,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("train.epochs must be at least 1"));
        }
        if self.batch_size < 2 {
            return Err(Error::config(format!(
                "train.batch_size must be at least 2 for batch statistics, got {}",
                self.batch_size
            )));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("train.lr must be positive, got {}", self.lr)));
        }
        Sgd::new(self.momentum, self.weight_decay).map(|_| ())
    }

    /// Epoch count giving spos the same per-block update budget as `self`
    /// under fairnas in a space with `m` choices per layer.
    pub fn spos_parity_epochs(&self, m: usize) -> usize {
        self.epochs * m
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    /// Path keys, `|`-joined for fairnas groups.
    pub genes: String,
    pub loss: f32,
    pub acc: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f32,
    pub train_acc_mean: f32,
    pub train_acc_std: f32,
    pub val_acc_mean: f32,
    pub val_acc_std: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub strategy: Strategy,
    pub els_enabled: bool,
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    pub update_counts: Vec<Vec<u64>>,
}

impl TrainLog {
    pub fn write_steps_csv(&self, path: &Path) -> Result<()> {
        write_csv(path, &self.steps)
    }

    pub fn write_epochs_csv(&self, path: &Path) -> Result<()> {
        write_csv(path, &self.epochs)
    }

    /// Structured-text summary without the per-step rows.
    pub fn read_epochs_csv(path: &Path) -> Result<Vec<EpochRecord>> {
        let mut r = csv::Reader::from_path(path).map_err(|e| Error::io(path, std::io::Error::other(e.to_string())))?;
        r.deserialize()
            .enumerate()
            .map(|(i, row)| {
                row.map_err(|e| Error::Parse {
                    source_name: path.display().to_string(),
                    position: format!("line {}", i + 2),
                    message: e.to_string(),
                })
            })
            .collect()
    }

    pub fn summary_toml(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Summary<'a> {
            strategy: Strategy,
            els_enabled: bool,
            steps: usize,
            epochs: &'a [EpochRecord],
            update_counts: &'a [Vec<u64>],
        }
        toml::to_string_pretty(&Summary {
            strategy: self.strategy,
            els_enabled: self.els_enabled,
            steps: self.steps.len(),
            epochs: &self.epochs,
            update_counts: &self.update_counts,
        })
        .map_err(|e| Error::input(format!("cannot serialize train summary: {e}")))
    }
}

pub(crate) fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let to_err = |e: csv::Error| Error::io(path, std::io::Error::other(e.to_string()));
    let mut w = csv::Writer::from_path(path).map_err(to_err)?;
    for r in rows {
        w.serialize(r).map_err(to_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

fn mean_std(xs: &[f32]) -> (f32, f32) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().map(|&x| x as f64).sum::<f64>() / n;
    let var = xs.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n;
    (mean as f32, var.sqrt() as f32)
}

/// One spos update on a single path. Returns (loss, accuracy).
pub fn spos_step(
    net: &mut Supernet,
    arch: &Architecture,
    x: &Tensor,
    labels: &[usize],
    opt: &mut Sgd,
    lr: f32,
) -> Result<(f32, f32)> {
    let logits = net.forward_path(arch, x, Mode::Train)?;
    let (loss, grad) = softmax_cross_entropy(&logits, labels)?;
    net.backward_path(&grad)?;
    net.step(opt, lr)?;
    net.record_updates(arch);
    Ok((loss, count_correct(&logits, labels) as f32 / labels.len() as f32))
}

/// One fairnas update: the group's gradients are averaged and applied once.
/// Returns the mean (loss, accuracy) over the group.
pub fn fairnas_step(
    net: &mut Supernet,
    group: &[Architecture],
    x: &Tensor,
    labels: &[usize],
    opt: &mut Sgd,
    lr: f32,
) -> Result<(f32, f32)> {
    let m = group.len() as f32;
    let (mut loss_sum, mut acc_sum) = (0.0, 0.0);
    for arch in group {
        let logits = net.forward_path(arch, x, Mode::Train)?;
        let (loss, mut grad) = softmax_cross_entropy(&logits, labels)?;
        grad.scale(1.0 / m);
        net.backward_path(&grad)?;
        loss_sum += loss;
        acc_sum += count_correct(&logits, labels) as f32 / labels.len() as f32;
    }
    net.step(opt, lr)?;
    for arch in group {
        net.record_updates(arch);
    }
    Ok((loss_sum / m, acc_sum / m))
}

/// Trains `net` on `train`, scoring `cfg.val_paths` random paths on `val`
/// after every epoch.
pub fn train_supernet(net: &mut Supernet, train: &Dataset, val: &Dataset, cfg: &TrainConfig) -> Result<TrainLog> {
    cfg.validate()?;
    train.require_not_test("supernet training")?;
    val.require_not_test("supernet validation")?;
    if cfg.els_enabled != net.spec.has_stabilizers() && (net.spec.has_stabilizers() || net.spec.has_skips()) {
        return Err(Error::config(format!(
            "train.els_enabled = {} but the space {} stabilizers",
            cfg.els_enabled,
            if net.spec.has_stabilizers() { "has" } else { "has no" }
        )));
    }
    if cfg.strategy == Strategy::Fairnas {
        // Surface ragged spaces before any work.
        sample_fair_group(&net.spec, &mut Rng::new(0))?;
    }
    if train.len() < 2 {
        return Err(Error::input("training split needs at least 2 samples"));
    }
    let batches = train.len().div_ceil(cfg.batch_size);
    let total = cfg.epochs * batches;
    let root = Rng::new(cfg.seed);
    let mut path_rng = root.fork(1);
    let mut opt = Sgd::new(cfg.momentum, cfg.weight_decay)?;
    let mut log = TrainLog {
        strategy: cfg.strategy,
        els_enabled: cfg.els_enabled,
        steps: Vec::with_capacity(total),
        epochs: Vec::with_capacity(cfg.epochs),
        update_counts: Vec::new(),
    };
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let order = root.fork(1000 + epoch as u64).permutation(train.len());
        let mut accs = Vec::with_capacity(batches);
        let mut losses = Vec::with_capacity(batches);
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let (x, labels) = train.batch(chunk);
            let lr = cosine_lr(cfg.lr, step, total);
            let (loss, acc, genes) = match cfg.strategy {
                Strategy::Spos => {
                    let arch = sample_uniform(&net.spec, &mut path_rng);
                    let (loss, acc) = spos_step(net, &arch, &x, &labels, &mut opt, lr)?;
                    (loss, acc, arch.key())
                }
                Strategy::Fairnas => {
                    let group = sample_fair_group(&net.spec, &mut path_rng)?;
                    let (loss, acc) = fairnas_step(net, &group, &x, &labels, &mut opt, lr)?;
                    let genes = group.iter().map(Architecture::key).collect::<Vec<_>>().join("|");
                    (loss, acc, genes)
                }
            };
            if !loss.is_finite() {
                return Err(Error::Statistics(format!("training diverged at step {step}: loss {loss}")));
            }
            log.steps.push(StepRecord {
                step,
                epoch,
                genes,
                loss,
                acc,
            });
            accs.push(acc);
            losses.push(loss);
            step += 1;
        }
        net.clear_cache();
        let mut val_rng = root.fork(2000 + epoch as u64);
        let val_accs = (0..cfg.val_paths)
            .map(|_| evaluate_oneshot(net, &sample_uniform(&net.spec, &mut val_rng), val))
            .collect::<Result<Vec<_>>>()?;
        let (train_acc_mean, train_acc_std) = mean_std(&accs);
        let (val_acc_mean, val_acc_std) = mean_std(&val_accs);
        log.epochs.push(EpochRecord {
            epoch,
            train_loss: mean_std(&losses).0,
            train_acc_mean,
            train_acc_std,
            val_acc_mean,
            val_acc_std,
        });
    }
    log.update_counts = net.update_counts().to_vec();
    Ok(log)
}

const EVAL_CHUNK: usize = 256;

/// Fixed input batches used to re-estimate a path's batch-norm statistics
/// before it is scored. Labels are never read.
#[derive(Debug, Clone)]
pub struct BnRecalibration {
    batches: Vec<Tensor>,
}

impl BnRecalibration {
    /// The first `batches` consecutive batches of `data`.
    pub fn from_dataset(data: &Dataset, batches: usize, batch_size: usize) -> Result<Self> {
        data.require_not_test("batch-norm recalibration")?;
        if batches == 0 || batch_size < 2 || data.len() < batch_size {
            return Err(Error::config(format!(
                "recalibration needs at least one batch of 2 or more samples (batches {batches}, batch size {batch_size}, {} samples)",
                data.len()
            )));
        }
        let idx: Vec<usize> = (0..data.len().min(batches * batch_size)).collect();
        let batches = idx
            .chunks(batch_size)
            .filter(|c| c.len() == batch_size)
            .map(|c| data.batch(c).0)
            .collect();
        Ok(Self { batches })
    }

    pub fn batches(&self) -> &[Tensor] {
        &self.batches
    }
}

fn score(data: &Dataset, mut infer: impl FnMut(&Tensor) -> Result<Tensor>) -> Result<f32> {
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut correct = 0;
    for chunk in idx.chunks(EVAL_CHUNK) {
        let (x, labels) = data.batch(chunk);
        correct += count_correct(&infer(&x)?, &labels);
    }
    Ok(correct as f32 / data.len() as f32)
}

/// Top-1 accuracy of the inherited-weight path `arch` on `data`.
pub fn evaluate_oneshot(net: &Supernet, arch: &Architecture, data: &Dataset) -> Result<f32> {
    evaluate_oneshot_with(net, arch, data, None)
}

/// [`evaluate_oneshot`], optionally re-estimating the path's batch-norm
/// statistics first. The supernet itself is not modified.
pub fn evaluate_oneshot_with(
    net: &Supernet,
    arch: &Architecture,
    data: &Dataset,
    recal: Option<&BnRecalibration>,
) -> Result<f32> {
    data.require_not_test("one-shot evaluation")?;
    if data.is_empty() {
        return Err(Error::input("cannot evaluate on an empty dataset"));
    }
    match recal {
        None => score(data, |x| net.infer_path(arch, x)),
        Some(r) => {
            let mut path = net.extract(arch)?;
            path.recalibrate_bn(r.batches())?;
            score(data, |x| path.infer(x))
        }
    }
}

/// Evaluates many paths, in parallel over `workers` threads; results keep
/// the input order.
pub fn evaluate_many(net: &Supernet, archs: &[Architecture], data: &Dataset, workers: usize) -> Result<Vec<f32>> {
    evaluate_many_with(net, archs, data, workers, None)
}

pub fn evaluate_many_with(
    net: &Supernet,
    archs: &[Architecture],
    data: &Dataset,
    workers: usize,
    recal: Option<&BnRecalibration>,
) -> Result<Vec<f32>> {
    let one = |a: &Architecture| evaluate_oneshot_with(net, a, data, recal);
    if workers <= 1 {
        return archs.iter().map(one).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::config(format!("cannot start {workers} workers: {e}")))?;
    pool.install(|| archs.par_iter().map(one).collect())
}

pub const HISTOGRAM_BINS: usize = 20;

/// Accuracies binned on `[0, 1]` with width 0.05; 1.0 lands in the last bin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyHistogram {
    pub counts: Vec<usize>,
    pub accuracies: Vec<f32>,
}

impl AccuracyHistogram {
    pub fn from_accuracies(accuracies: Vec<f32>) -> Self {
        let mut counts = vec![0; HISTOGRAM_BINS];
        for &a in &accuracies {
            // Accuracies are k/n; the nudge keeps exact edges such as 0.3 in
            // their upper bin despite float rounding.
            let bin = ((a as f64 * HISTOGRAM_BINS as f64) + 1e-6).floor() as usize;
            counts[bin.min(HISTOGRAM_BINS - 1)] += 1;
        }
        Self { counts, accuracies }
    }

    pub fn bin_edges() -> Vec<f32> {
        (0..=HISTOGRAM_BINS).map(|i| i as f32 / HISTOGRAM_BINS as f32).collect()
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    /// Fraction of accuracies strictly below `threshold`.
    pub fn mass_below(&self, threshold: f32) -> f32 {
        if self.accuracies.is_empty() {
            return 0.0;
        }
        self.accuracies.iter().filter(|&&a| a < threshold).count() as f32 / self.accuracies.len() as f32
    }

    pub fn mean_std(&self) -> (f32, f32) {
        mean_std(&self.accuracies)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        #[derive(Serialize)]
        struct Row {
            bin_lo: f32,
            bin_hi: f32,
            count: usize,
        }
        let edges = Self::bin_edges();
        let rows: Vec<Row> = self
            .counts
            .iter()
            .enumerate()
            .map(|(i, &count)| Row {
                bin_lo: edges[i],
                bin_hi: edges[i + 1],
                count,
            })
            .collect();
        write_csv(path, &rows)
    }
}

/// One-shot accuracies of `n` uniformly sampled paths.
pub fn accuracy_histogram(
    net: &Supernet,
    data: &Dataset,
    n: usize,
    rng: &mut Rng,
    workers: usize,
    recal: Option<&BnRecalibration>,
) -> Result<AccuracyHistogram> {
    if n == 0 {
        return Err(Error::input("histogram needs at least one sample"));
    }
    let archs: Vec<Architecture> = (0..n).map(|_| sample_uniform(&net.spec, rng)).collect();
    Ok(AccuracyHistogram::from_accuracies(evaluate_many_with(net, &archs, data, workers, recal)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_synthetic, split};
    use crate::space::{build_supernet, SpaceSpec};

    fn tiny() -> (Dataset, Dataset) {
        let ds = generate_synthetic(1, 96, 4, 16).unwrap();
        let s = split(&ds, 0.25, 0.2, 0).unwrap();
        (s.train, s.val)
    }

    fn cfg(strategy: Strategy) -> TrainConfig {
        TrainConfig {
            strategy,
            epochs: 1,
            batch_size: 16,
            els_enabled: false,
            val_paths: 1,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn fairnas_epoch_counters_equal() {
        let (train, val) = tiny();
        let mut net = build_supernet(&SpaceSpec::t1(), 0).unwrap();
        let log = train_supernet(&mut net, &train, &val, &cfg(Strategy::Fairnas)).unwrap();
        let first = log.update_counts[0][0];
        assert!(first > 0);
        assert!(log.update_counts.iter().flatten().all(|&c| c == first));
    }

    #[test]
    fn ragged_space_rejected_for_fairnas() {
        let (train, val) = tiny();
        let mut spec = SpaceSpec::t1();
        spec.layers[0].choices.pop();
        let mut net = build_supernet(&spec, 0).unwrap();
        let err = train_supernet(&mut net, &train, &val, &cfg(Strategy::Fairnas)).unwrap_err();
        assert!(matches!(err, Error::Spec { .. }), "{err}");
    }

    #[test]
    fn test_split_refused() {
        let ds = generate_synthetic(1, 96, 4, 16).unwrap();
        let s = split(&ds, 0.25, 0.2, 0).unwrap();
        let mut net = build_supernet(&SpaceSpec::t1(), 0).unwrap();
        assert!(train_supernet(&mut net, &s.test, &s.val, &cfg(Strategy::Spos)).is_err());
        assert!(evaluate_oneshot(&net, &Architecture::new(vec![0; 4]), &s.test).is_err());
    }

    #[test]
    fn els_flag_must_match_space() {
        let (train, val) = tiny();
        let mut net = build_supernet(&SpaceSpec::t1(), 0).unwrap();
        let mut c = cfg(Strategy::Spos);
        c.els_enabled = true;
        assert!(train_supernet(&mut net, &train, &val, &c).unwrap_err().is_config());
    }

    #[test]
    fn fairnas_update_is_order_independent() {
        let (train, _) = tiny();
        let (x, labels) = train.batch(&(0..16).collect::<Vec<_>>());
        let group = sample_fair_group(&SpaceSpec::t1(), &mut Rng::new(4)).unwrap();
        let mut reversed = group.clone();
        reversed.reverse();
        let mut a = build_supernet(&SpaceSpec::t1(), 2).unwrap();
        let mut b = a.clone();
        fairnas_step(&mut a, &group, &x, &labels, &mut Sgd::new(0.9, 1e-4).unwrap(), 0.1).unwrap();
        fairnas_step(&mut b, &reversed, &x, &labels, &mut Sgd::new(0.9, 1e-4).unwrap(), 0.1).unwrap();
        let mut wa = Vec::new();
        a.visit_params(&mut |p| wa.push(p.value.clone()));
        let mut i = 0;
        b.visit_params(&mut |p| {
            assert!(p.value.max_abs_diff(&wa[i]).unwrap() <= 1e-6, "{}", p.name);
            i += 1;
        });
    }

    #[test]
    fn untrained_accuracy_near_chance_and_deterministic() {
        let ds = generate_synthetic(2, 1000, 4, 16).unwrap();
        let val = ds.subset(&(0..1000).collect::<Vec<_>>(), crate::dataset::SplitTag::Val);
        let net = build_supernet(&SpaceSpec::t1(), 3).unwrap();
        let arch = Architecture::new(vec![0, 1, 0, 1]);
        let a = evaluate_oneshot(&net, &arch, &val).unwrap();
        assert!((0.15..=0.35).contains(&a), "{a}");
        assert_eq!(a, evaluate_oneshot(&net, &arch, &val).unwrap());
        let empty = val.subset(&[], crate::dataset::SplitTag::Val);
        assert!(matches!(evaluate_oneshot(&net, &arch, &empty), Err(Error::Input(_))));
    }

    #[test]
    fn histogram_bins() {
        let h = AccuracyHistogram::from_accuracies(vec![0.0, 0.3, 0.299, 1.0, 0.5, 0.5]);
        assert_eq!(h.total(), 6);
        assert_eq!(h.counts[0], 1);
        assert_eq!(h.counts[6], 1);
        assert_eq!(h.counts[5], 1);
        assert_eq!(h.counts[19], 1);
        assert_eq!(h.counts[10], 2);
        assert!((h.mass_below(0.3) - 2.0 / 6.0).abs() < 1e-6);
        let c = AccuracyHistogram::from_accuracies(vec![0.42; 7]);
        assert_eq!(c.counts.iter().filter(|&&k| k > 0).count(), 1);
    }

    #[test]
    fn parallel_evaluation_matches_serial() {
        let (_, val) = tiny();
        let net = build_supernet(&SpaceSpec::t1(), 5).unwrap();
        let archs: Vec<Architecture> = SpaceSpec::t1().enumerate().into_iter().take(6).collect();
        assert_eq!(
            evaluate_many(&net, &archs, &val, 1).unwrap(),
            evaluate_many(&net, &archs, &val, 3).unwrap()
        );
    }
}
