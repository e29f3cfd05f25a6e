//! Constrained, weighted NSGA-II over a search space, scoring candidates with
//! inherited supernet weights.
//!
//! Objectives: accuracy and parameter count are maximized, multiply-adds
//! minimized. Candidates above `madds_max` are dropped before any accuracy
//! evaluation, and those at or below `acc_min` never enter a population.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::space::{count_madds, count_params, max_madds_arch, sample_uniform, Architecture, ChoiceSpec, SpaceSpec, Supernet};
use crate::trainer::{evaluate_many_with, write_csv, BnRecalibration};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveVector {
    pub acc: f32,
    pub madds: u64,
    pub params: u64,
}

impl ObjectiveVector {
    /// Values oriented so that larger is better on every axis.
    fn oriented(&self) -> [f64; 3] {
        [self.acc as f64, -(self.madds as f64), self.params as f64]
    }
}

/// `a` is at least as good as `b` everywhere and strictly better somewhere.
pub fn dominates(a: &ObjectiveVector, b: &ObjectiveVector) -> bool {
    let (a, b) = (a.oriented(), b.oriented());
    a.iter().zip(&b).all(|(x, y)| x >= y) && a.iter().zip(&b).any(|(x, y)| x > y)
}

/// Fronts of indices into `objs`, best first.
pub fn non_dominated_sort(objs: &[ObjectiveVector]) -> Vec<Vec<usize>> {
    let n = objs.len();
    let mut dominated_by = vec![0usize; n];
    let mut dominates_list: Vec<Vec<usize>> = vec![Vec::new(); n];
    for i in 0..n {
        for j in i + 1..n {
            if dominates(&objs[i], &objs[j]) {
                dominates_list[i].push(j);
                dominated_by[j] += 1;
            } else if dominates(&objs[j], &objs[i]) {
                dominates_list[j].push(i);
                dominated_by[i] += 1;
            }
        }
    }
    let mut fronts = Vec::new();
    let mut current: Vec<usize> = (0..n).filter(|&i| dominated_by[i] == 0).collect();
    while !current.is_empty() {
        let mut next = Vec::new();
        for &i in &current {
            for &j in &dominates_list[i] {
                dominated_by[j] -= 1;
                if dominated_by[j] == 0 {
                    next.push(j);
                }
            }
        }
        next.sort_unstable();
        fronts.push(std::mem::replace(&mut current, next));
    }
    fronts
}

/// Per objective, boundary members get `+inf` and interior members the
/// range-normalized gap between their neighbours times the objective's
/// weight; the sum over objectives is returned. Objectives with zero weight
/// or zero range are ignored. Fronts of one or two members are all `+inf`.
pub fn weighted_crowding(front: &[ObjectiveVector], weights: [f64; 3]) -> Vec<f64> {
    let n = front.len();
    if n <= 2 {
        return vec![f64::INFINITY; n];
    }
    let mut dist = vec![0f64; n];
    let vals: Vec<[f64; 3]> = front.iter().map(ObjectiveVector::oriented).collect();
    for (k, &w) in weights.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| vals[a][k].total_cmp(&vals[b][k]).then(a.cmp(&b)));
        let (lo, hi) = (vals[order[0]][k], vals[order[n - 1]][k]);
        if hi == lo {
            continue;
        }
        dist[order[0]] = f64::INFINITY;
        dist[order[n - 1]] = f64::INFINITY;
        for p in 1..n - 1 {
            let i = order[p];
            dist[i] += w * (vals[order[p + 1]][k] - vals[order[p - 1]][k]) / (hi - lo);
        }
    }
    dist
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Individual {
    pub arch: Architecture,
    pub objectives: ObjectiveVector,
    pub rank: usize,
    pub crowding: f64,
}

impl Individual {
    /// Crowded comparison: lower rank, then larger crowding.
    fn better_than(&self, other: &Individual) -> bool {
        self.rank < other.rank || (self.rank == other.rank && self.crowding > other.crowding)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    pub population: usize,
    pub generations: usize,
    pub w_acc: f64,
    pub w_madds: f64,
    pub w_params: f64,
    /// `None` means 60% of the space's maximum multiply-adds.
    pub madds_max: Option<u64>,
    pub acc_min: f32,
    /// Expected number of layers touched by one mutation.
    pub mutation_ratio: f64,
    pub p_rm: f64,
    pub p_re: f64,
    pub p_pr: f64,
    pub p_m: f64,
    pub p_km: f64,
    pub seed: u64,
    /// Candidate draws allowed while filling one population.
    pub draw_limit: usize,
    pub workers: usize,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            population: 32,
            generations: 20,
            w_acc: 0.4,
            w_madds: 0.4,
            w_params: 0.2,
            madds_max: None,
            acc_min: 0.4,
            mutation_ratio: 0.8,
            p_rm: 0.2,
            p_re: 0.65,
            p_pr: 0.15,
            p_m: 0.7,
            p_km: 0.3,
            seed: 0,
            draw_limit: 10_000,
            workers: 1,
        }
    }
}

pub const DEFAULT_MADDS_FRACTION: f64 = 0.6;

impl SearchConfig {
    pub fn weights(&self) -> [f64; 3] {
        [self.w_acc, self.w_madds, self.w_params]
    }

    pub fn validate(&self) -> Result<()> {
        let w = self.weights();
        if w.iter().any(|&x| !(x >= 0.0 && x.is_finite())) || (w.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
            return Err(Error::config(format!("search weights {w:?} must be non-negative and sum to 1")));
        }
        if self.madds_max == Some(0) {
            return Err(Error::config("search.madds_max must be positive"));
        }
        if !(0.0..=1.0).contains(&self.acc_min) {
            return Err(Error::config(format!("search.acc_min {} outside [0, 1]", self.acc_min)));
        }
        for (name, p) in [
            ("p_rm", self.p_rm),
            ("p_re", self.p_re),
            ("p_pr", self.p_pr),
            ("p_m", self.p_m),
            ("p_km", self.p_km),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(format!("search.{name} = {p} outside [0, 1]")));
            }
        }
        if !(self.mutation_ratio >= 0.0 && self.mutation_ratio.is_finite()) {
            return Err(Error::config("search.mutation_ratio must be non-negative"));
        }
        if self.p_rm + self.p_re + self.p_pr <= 0.0 {
            return Err(Error::config("at least one of p_rm, p_re, p_pr must be positive"));
        }
        if self.population < 2 {
            return Err(Error::config("search.population must be at least 2"));
        }
        if self.draw_limit == 0 {
            return Err(Error::config("search.draw_limit must be positive"));
        }
        Ok(())
    }

    pub fn resolved_madds_max(&self, spec: &SpaceSpec) -> Result<u64> {
        match self.madds_max {
            Some(m) => Ok(m),
            None => Ok((count_madds(spec, &max_madds_arch(spec))? as f64 * DEFAULT_MADDS_FRACTION).floor() as u64),
        }
    }

    /// Probability that a given layer is perturbed by one mutation.
    pub fn layer_mutation_rate(&self, layers: usize) -> f64 {
        let q = (self.mutation_ratio / layers as f64).min(1.0);
        q + (1.0 - q).powi(layers as i32) / layers as f64
    }
}

/// Both constraints under `cfg`, for a known accuracy.
pub fn is_feasible(spec: &SpaceSpec, arch: &Architecture, acc: f32, cfg: &SearchConfig) -> Result<bool> {
    Ok(count_madds(spec, arch)? <= cfg.resolved_madds_max(spec)? && passes_acc(acc, cfg.acc_min))
}

fn passes_acc(acc: f32, acc_min: f32) -> bool {
    acc > acc_min
}

fn binary_tournament<'a>(pop: &'a [Individual], rng: &mut Rng) -> &'a Individual {
    let a = &pop[rng.below(pop.len())];
    let b = &pop[rng.below(pop.len())];
    if b.better_than(a) {
        b
    } else {
        a
    }
}

/// A different choice index at `layer`, from `pool` when it is non-empty and
/// uniformly from all other choices otherwise.
fn redraw(spec: &SpaceSpec, layer: usize, current: usize, pool: Vec<usize>, rng: &mut Rng) -> usize {
    let pool = if pool.is_empty() {
        (0..spec.layers[layer].choices.len()).filter(|&c| c != current).collect()
    } else {
        pool
    };
    if pool.is_empty() {
        current
    } else {
        pool[rng.below(pool.len())]
    }
}

fn mutate_layer(spec: &SpaceSpec, layer: usize, current: usize, cfg: &SearchConfig, rng: &mut Rng) -> usize {
    let choices = &spec.layers[layer].choices;
    let total = cfg.p_rm + cfg.p_re + cfg.p_pr;
    let u = rng.uniform() as f64 * total;
    let others = (0..choices.len()).filter(|&c| c != current);
    let pool: Vec<usize> = if u < cfg.p_rm {
        Vec::new()
    } else if u < cfg.p_rm + cfg.p_re {
        // Same kernel and SE flag, different expansion.
        match choices[current] {
            ChoiceSpec::InvertedBottleneck { kernel, se, .. } => others
                .filter(|&c| {
                    matches!(choices[c], ChoiceSpec::InvertedBottleneck { kernel: k, se: s, .. } if k == kernel && s == se)
                })
                .collect(),
            _ => Vec::new(),
        }
    } else {
        // Different kernel at the same expansion, or pruned to identity.
        match choices[current] {
            ChoiceSpec::InvertedBottleneck { expansion, se, .. } => others
                .filter(|&c| match choices[c] {
                    ChoiceSpec::InvertedBottleneck { expansion: e, se: s, .. } => e == expansion && s == se,
                    other => other.is_identity_like(),
                })
                .collect(),
            _ => Vec::new(),
        }
    };
    redraw(spec, layer, current, pool, rng)
}

/// Perturbs every layer independently with probability
/// `mutation_ratio / L`, and one random layer when none was picked. Returns
/// the perturbed layers.
fn hierarchical_mutation(spec: &SpaceSpec, arch: &mut Architecture, cfg: &SearchConfig, rng: &mut Rng) -> Vec<usize> {
    let l = arch.len();
    let q = (cfg.mutation_ratio / l as f64).min(1.0);
    let mut picked: Vec<usize> = (0..l).filter(|_| rng.bernoulli(q)).collect();
    if picked.is_empty() {
        picked.push(rng.below(l));
    }
    for &layer in &picked {
        arch.genes[layer] = mutate_layer(spec, layer, arch.genes[layer], cfg, rng);
    }
    picked
}

/// One child of two parents: with probability `p_km` uniform per-gene
/// crossover, otherwise `a` mutated with probability `p_m` (copied if not).
pub fn make_offspring(
    spec: &SpaceSpec,
    a: &Architecture,
    b: &Architecture,
    cfg: &SearchConfig,
    rng: &mut Rng,
) -> Architecture {
    offspring_traced(spec, a, b, cfg, rng).0
}

fn offspring_traced(
    spec: &SpaceSpec,
    a: &Architecture,
    b: &Architecture,
    cfg: &SearchConfig,
    rng: &mut Rng,
) -> (Architecture, Vec<usize>) {
    if rng.bernoulli(cfg.p_km) {
        let genes = a
            .genes
            .iter()
            .zip(&b.genes)
            .map(|(&x, &y)| if rng.bernoulli(0.5) { x } else { y })
            .collect();
        return (Architecture::new(genes), Vec::new());
    }
    let mut child = a.clone();
    let touched = if rng.bernoulli(cfg.p_m) {
        hierarchical_mutation(spec, &mut child, cfg, rng)
    } else {
        Vec::new()
    };
    (child, touched)
}

/// Per-generation summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationStats {
    pub generation: usize,
    pub best_acc: f32,
    pub mean_acc: f32,
    pub mean_madds: f64,
    /// Fraction of all genes in the population that pick an identity choice.
    pub skip_ratio: f64,
    pub mean_skip_genes: f64,
    pub front_size: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AuditStage {
    MaddsCheck,
    Evaluate,
}

/// One constraint-check event, in execution order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub seq: usize,
    pub stage: AuditStage,
    pub genes: String,
    pub passed: bool,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub population: Vec<Individual>,
    /// Non-dominated set of every feasible individual evaluated.
    pub archive: Vec<Individual>,
    /// Highest-accuracy feasible individual ever seen.
    pub best: Individual,
    pub generations: Vec<GenerationStats>,
    pub audit: Vec<AuditRecord>,
    /// Distinct architectures whose accuracy was computed.
    pub evaluations: usize,
}

#[derive(Serialize)]
struct FrontRow {
    genes: String,
    acc: f32,
    madds: u64,
    params: u64,
}

fn front_rows(inds: &[Individual]) -> Vec<FrontRow> {
    inds.iter()
        .map(|i| FrontRow {
            genes: i.arch.key(),
            acc: i.objectives.acc,
            madds: i.objectives.madds,
            params: i.objectives.params,
        })
        .collect()
}

impl SearchResult {
    /// Members of the first front of the final population.
    pub fn pareto_front(&self) -> Vec<Individual> {
        self.population.iter().filter(|i| i.rank == 0).cloned().collect()
    }

    pub fn write_generations_csv(&self, path: &Path) -> Result<()> {
        write_csv(path, &self.generations)
    }

    pub fn write_front_csv(&self, path: &Path) -> Result<()> {
        let mut front = self.pareto_front();
        front.sort_by(|a, b| a.objectives.madds.cmp(&b.objectives.madds).then(a.arch.cmp(&b.arch)));
        write_csv(path, &front_rows(&front))
    }

    pub fn write_archive_csv(&self, path: &Path) -> Result<()> {
        write_csv(path, &front_rows(&self.archive))
    }

    pub fn write_audit_csv(&self, path: &Path) -> Result<()> {
        write_csv(path, &self.audit)
    }
}

/// Sorts `objs` into `n` survivors: whole fronts while they fit, then the
/// most crowded-apart members of the first front that does not. Returns
/// `(index, rank, crowding)` in selection order.
fn select_survivors(objs: &[ObjectiveVector], n: usize, weights: [f64; 3]) -> Vec<(usize, usize, f64)> {
    let mut out = Vec::with_capacity(n);
    for (rank, front) in non_dominated_sort(objs).into_iter().enumerate() {
        if out.len() >= n {
            break;
        }
        let fobjs: Vec<ObjectiveVector> = front.iter().map(|&i| objs[i]).collect();
        let crowd = weighted_crowding(&fobjs, weights);
        let mut members: Vec<(usize, usize, f64)> = front.iter().zip(&crowd).map(|(&i, &c)| (i, rank, c)).collect();
        if out.len() + members.len() > n {
            members.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)));
            members.truncate(n - out.len());
        }
        out.extend(members);
    }
    out
}

/// Mean number and fraction of identity-choice genes.
fn skip_stats(spec: &SpaceSpec, pop: &[Individual]) -> (f64, f64) {
    if pop.is_empty() {
        return (0.0, 0.0);
    }
    let skips: usize = pop.iter().map(|i| i.arch.count_choice(spec, ChoiceSpec::is_identity_like)).sum();
    let genes: usize = pop.iter().map(|i| i.arch.len()).sum();
    (skips as f64 / pop.len() as f64, skips as f64 / genes.max(1) as f64)
}

struct Search<'a> {
    spec: &'a SpaceSpec,
    cfg: &'a SearchConfig,
    madds_max: u64,
    evaluator: &'a dyn Fn(&[Architecture]) -> Result<Vec<f32>>,
    cache: HashMap<Architecture, f32>,
    audit: Vec<AuditRecord>,
    feasible: BTreeMap<Architecture, ObjectiveVector>,
}

impl Search<'_> {
    fn log(&mut self, stage: AuditStage, arch: &Architecture, passed: bool, value: f64) {
        let seq = self.audit.len();
        self.audit.push(AuditRecord {
            seq,
            stage,
            genes: arch.key(),
            passed,
            value,
        });
    }

    /// Fills a population of `n` feasible individuals from `propose`,
    /// checking madds first and evaluating in deterministic batches.
    fn fill(&mut self, n: usize, propose: &mut dyn FnMut(&mut Rng) -> Architecture, rng: &mut Rng) -> Result<Vec<Individual>> {
        let mut out: Vec<Individual> = Vec::with_capacity(n);
        let mut draws = 0usize;
        while out.len() < n {
            let mut batch = Vec::new();
            while batch.len() < n - out.len() {
                if draws >= self.cfg.draw_limit {
                    return Err(Error::config(format!(
                        "no feasible population of {n} after {draws} draws (madds_max {}, acc_min {})",
                        self.madds_max, self.cfg.acc_min
                    )));
                }
                draws += 1;
                let arch = propose(rng);
                let madds = count_madds(self.spec, &arch)?;
                let ok = madds <= self.madds_max;
                self.log(AuditStage::MaddsCheck, &arch, ok, madds as f64);
                if ok {
                    batch.push((arch, madds));
                }
            }
            let mut fresh: Vec<Architecture> = batch.iter().map(|(a, _)| a.clone()).filter(|a| !self.cache.contains_key(a)).collect();
            fresh.sort();
            fresh.dedup();
            if !fresh.is_empty() {
                let accs = (self.evaluator)(&fresh)?;
                if accs.len() != fresh.len() {
                    return Err(Error::State("evaluator returned the wrong number of scores".into()));
                }
                self.cache.extend(fresh.into_iter().zip(accs));
            }
            for (arch, madds) in batch {
                let acc = self.cache[&arch];
                let ok = passes_acc(acc, self.cfg.acc_min);
                self.log(AuditStage::Evaluate, &arch, ok, acc as f64);
                if ok && out.len() < n {
                    let objectives = ObjectiveVector {
                        acc,
                        madds,
                        params: count_params(self.spec, &arch)?,
                    };
                    self.feasible.insert(arch.clone(), objectives);
                    out.push(Individual {
                        arch,
                        objectives,
                        rank: 0,
                        crowding: 0.0,
                    });
                }
            }
        }
        Ok(out)
    }
}

/// Runs the search with an arbitrary batch evaluator (returning one accuracy
/// per architecture, in order).
pub fn evolve_with(
    spec: &SpaceSpec,
    cfg: &SearchConfig,
    evaluator: &dyn Fn(&[Architecture]) -> Result<Vec<f32>>,
) -> Result<SearchResult> {
    cfg.validate()?;
    spec.validate()?;
    let n = cfg.population;
    let weights = cfg.weights();
    let root = Rng::new(cfg.seed);
    let mut s = Search {
        spec,
        cfg,
        madds_max: cfg.resolved_madds_max(spec)?,
        evaluator,
        cache: HashMap::new(),
        audit: Vec::new(),
        feasible: BTreeMap::new(),
    };
    let mut init_rng = root.fork(0);
    let mut uniform = |r: &mut Rng| sample_uniform(spec, r);
    let mut p = s.fill(n, &mut uniform, &mut init_rng)?;
    let mut q = s.fill(n, &mut uniform, &mut init_rng)?;
    let mut generations = Vec::with_capacity(cfg.generations);
    let mut best: Option<Individual> = None;
    let track_best = |pop: &[Individual], best: &mut Option<Individual>| {
        for i in pop {
            if best.as_ref().map_or(true, |b| i.objectives.acc > b.objectives.acc) {
                *best = Some(i.clone());
            }
        }
    };
    track_best(&p, &mut best);
    track_best(&q, &mut best);
    if cfg.generations == 0 {
        let objs: Vec<ObjectiveVector> = p.iter().map(|i| i.objectives).collect();
        p = select_survivors(&objs, n, weights)
            .into_iter()
            .map(|(i, rank, crowding)| Individual { rank, crowding, ..p[i].clone() })
            .collect();
    }
    for gen in 0..cfg.generations {
        let merged: Vec<Individual> = p.drain(..).chain(q.drain(..)).collect();
        let objs: Vec<ObjectiveVector> = merged.iter().map(|i| i.objectives).collect();
        let survivors = select_survivors(&objs, n, weights);
        p = survivors
            .iter()
            .map(|&(i, rank, crowding)| Individual {
                rank,
                crowding,
                ..merged[i].clone()
            })
            .collect();
        let (mean_skip_genes, skip_ratio) = skip_stats(spec, &p);
        generations.push(GenerationStats {
            generation: gen,
            best_acc: p.iter().map(|i| i.objectives.acc).fold(0.0, f32::max),
            mean_acc: p.iter().map(|i| i.objectives.acc).sum::<f32>() / p.len() as f32,
            mean_madds: p.iter().map(|i| i.objectives.madds as f64).sum::<f64>() / p.len() as f64,
            skip_ratio,
            mean_skip_genes,
            front_size: p.iter().filter(|i| i.rank == 0).count(),
        });
        if gen + 1 == cfg.generations {
            break;
        }
        let parents = p.clone();
        let mut rng = root.fork(1 + gen as u64);
        let mut breed = |r: &mut Rng| {
            let a = binary_tournament(&parents, r).arch.clone();
            let b = binary_tournament(&parents, r).arch.clone();
            make_offspring(spec, &a, &b, cfg, r)
        };
        q = s.fill(n, &mut breed, &mut rng)?;
        track_best(&q, &mut best);
    }
    let archive_objs: Vec<(Architecture, ObjectiveVector)> = s.feasible.iter().map(|(a, o)| (a.clone(), *o)).collect();
    let objs: Vec<ObjectiveVector> = archive_objs.iter().map(|(_, o)| *o).collect();
    let first = non_dominated_sort(&objs).into_iter().next().unwrap_or_default();
    let archive = first
        .into_iter()
        .map(|i| Individual {
            arch: archive_objs[i].0.clone(),
            objectives: archive_objs[i].1,
            rank: 0,
            crowding: 0.0,
        })
        .collect();
    Ok(SearchResult {
        population: p,
        archive,
        best: best.ok_or_else(|| Error::State("empty search".into()))?,
        generations,
        evaluations: s.cache.len(),
        audit: s.audit,
    })
}

/// Searches `net.spec` scoring candidates by one-shot accuracy on `val`.
pub fn evolve(net: &Supernet, val: &Dataset, cfg: &SearchConfig, recal: Option<&BnRecalibration>) -> Result<SearchResult> {
    val.require_not_test("search")?;
    let eval = |archs: &[Architecture]| evaluate_many_with(net, archs, val, cfg.workers, recal);
    evolve_with(&net.spec, cfg, &eval)
}

/// `k` members of `front` spread evenly by multiply-adds: after sorting by
/// madds, indices `round(i (|F| - 1) / (k - 1))`. `k = 1` picks the cheapest.
pub fn select_equispaced(front: &[Individual], k: usize) -> Result<Vec<Individual>> {
    if k > front.len() {
        return Err(Error::input(format!("cannot select {k} models from a front of {}", front.len())));
    }
    let mut sorted = front.to_vec();
    sorted.sort_by(|a, b| a.objectives.madds.cmp(&b.objectives.madds).then(a.arch.cmp(&b.arch)));
    Ok(match k {
        0 => Vec::new(),
        1 => vec![sorted[0].clone()],
        _ => (0..k)
            .map(|i| {
                let idx = (i as f64 * (sorted.len() - 1) as f64 / (k - 1) as f64).round() as usize;
                sorted[idx].clone()
            })
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ov(acc: f32, madds: u64, params: u64) -> ObjectiveVector {
        ObjectiveVector { acc, madds, params }
    }

    #[test]
    fn dominance_examples() {
        let a = ov(0.7, 100, 3_000_000);
        assert!(dominates(&a, &ov(0.6, 120, 2_000_000)));
        assert!(!dominates(&a, &a));
        let b = ov(0.8, 90, 4_000_000);
        assert!(!dominates(&a, &b));
        assert!(dominates(&b, &a));
    }

    #[test]
    fn small_sorts() {
        assert_eq!(non_dominated_sort(&[ov(0.5, 1, 1)]), vec![vec![0]]);
        let mutual = [ov(0.9, 30, 1), ov(0.8, 20, 1), ov(0.7, 10, 1)];
        assert_eq!(non_dominated_sort(&mutual), vec![vec![0, 1, 2]]);
        assert_eq!(non_dominated_sort(&[ov(0.5, 10, 1), ov(0.6, 5, 2)]), vec![vec![1], vec![0]]);
    }

    #[test]
    fn crowding_hand_arithmetic() {
        let front = [ov(0.0, 10, 5), ov(0.5, 10, 5), ov(1.0, 10, 5)];
        let d = weighted_crowding(&front, [1.0, 0.0, 0.0]);
        assert!(d[0].is_infinite() && d[2].is_infinite());
        assert_eq!(d[1], 1.0);
        assert!(weighted_crowding(&front[..2], [0.4, 0.4, 0.2]).iter().all(|d| d.is_infinite()));
    }

    #[test]
    fn crowding_is_scale_invariant() {
        let mut rng = Rng::new(3);
        let front: Vec<_> = (0..9).map(|_| ov(rng.uniform(), 10 + rng.below(100) as u64, 1 + rng.below(50) as u64)).collect();
        let scaled: Vec<_> = front.iter().map(|o| ov(o.acc, o.madds * 7, o.params)).collect();
        assert_eq!(weighted_crowding(&front, [0.4, 0.4, 0.2]), weighted_crowding(&scaled, [0.4, 0.4, 0.2]));
    }

    #[test]
    fn equal_weights_scale_standard_crowding() {
        let mut rng = Rng::new(4);
        let front: Vec<_> = (0..7).map(|_| ov(rng.uniform(), rng.below(1000) as u64, rng.below(1000) as u64)).collect();
        let w = 1.0 / 3.0;
        let weighted = weighted_crowding(&front, [w, w, w]);
        let standard = weighted_crowding(&front, [1.0, 1.0, 1.0]);
        for (a, b) in weighted.iter().zip(&standard) {
            assert!(a.is_infinite() && b.is_infinite() || (a - b * w).abs() < 1e-12);
        }
    }

    #[test]
    fn all_skip_is_on_the_first_front() {
        let spec = SpaceSpec::t1();
        let mut rng = Rng::new(5);
        let mut archs: Vec<Architecture> = (0..20).map(|_| sample_uniform(&spec, &mut rng)).collect();
        archs.push(spec.all_identity().unwrap());
        let objs: Vec<_> = archs
            .iter()
            .map(|a| {
                let acc = 0.25 + 0.1 * (4 - a.count_choice(&spec, ChoiceSpec::is_identity_like)) as f32;
                ov(acc, count_madds(&spec, a).unwrap(), count_params(&spec, a).unwrap())
            })
            .collect();
        assert!(non_dominated_sort(&objs)[0].contains(&(archs.len() - 1)));
    }

    #[test]
    fn offspring_edge_cases() {
        let spec = SpaceSpec::t1();
        let a = Architecture::new(vec![0, 1, 2, 0]);
        let mut rng = Rng::new(0);
        let cross = SearchConfig {
            p_km: 1.0,
            ..Default::default()
        };
        for _ in 0..50 {
            assert_eq!(make_offspring(&spec, &a, &a, &cross, &mut rng), a);
        }
        let frozen = SearchConfig {
            p_km: 0.0,
            p_m: 0.0,
            ..Default::default()
        };
        let b = Architecture::new(vec![2, 2, 2, 2]);
        for _ in 0..50 {
            assert_eq!(make_offspring(&spec, &a, &b, &frozen, &mut rng), a);
        }
    }

    #[test]
    fn per_layer_mutation_rate_within_3_sigma() {
        let spec = SpaceSpec::t1();
        let cfg = SearchConfig::default();
        let mut rng = Rng::new(9);
        let trials = 10_000;
        let mut hits = [0usize; 4];
        let parent = Architecture::new(vec![0, 1, 2, 1]);
        for _ in 0..trials {
            let (child, touched) = offspring_traced(&spec, &parent, &parent, &cfg, &mut rng);
            for l in 0..4 {
                assert!(child.genes[l] < 3);
                assert_eq!(touched.contains(&l), child.genes[l] != parent.genes[l]);
            }
            for l in touched {
                hits[l] += 1;
            }
        }
        let p = (1.0 - cfg.p_km) * cfg.p_m * cfg.layer_mutation_rate(4);
        let sigma = (trials as f64 * p * (1.0 - p)).sqrt();
        for h in hits {
            assert!((h as f64 - trials as f64 * p).abs() <= 3.0 * sigma, "{h} vs {}", trials as f64 * p);
        }
    }

    fn toy_eval(spec: &SpaceSpec) -> impl Fn(&[Architecture]) -> Result<Vec<f32>> + '_ {
        move |archs: &[Architecture]| {
            Ok(archs
                .iter()
                .map(|a| {
                    let skips = a.count_choice(spec, ChoiceSpec::is_identity_like) as f32;
                    let k5 = a.genes.iter().filter(|&&g| g == 1).count() as f32;
                    0.25 + 0.15 * (4.0 - skips) + 0.02 * k5
                })
                .collect())
        }
    }

    #[test]
    fn loop_contract_and_audit_order() {
        let spec = SpaceSpec::t1();
        let cfg = SearchConfig {
            population: 8,
            generations: 2,
            ..Default::default()
        };
        let eval = toy_eval(&spec);
        let r = evolve_with(&spec, &cfg, &eval).unwrap();
        let mmax = cfg.resolved_madds_max(&spec).unwrap();
        assert_eq!(r.population.len(), 8);
        for i in &r.population {
            assert!(i.objectives.madds <= mmax && i.objectives.acc >= cfg.acc_min);
        }
        let mut cleared = std::collections::HashSet::new();
        for rec in &r.audit {
            match rec.stage {
                AuditStage::MaddsCheck if rec.passed => {
                    cleared.insert(rec.genes.clone());
                }
                AuditStage::Evaluate => assert!(cleared.contains(&rec.genes), "{} evaluated before madds check", rec.genes),
                _ => {}
            }
        }
        assert_eq!(r.generations.len(), 2);
        assert_eq!(evolve_with(&spec, &cfg, &eval).unwrap(), r);
    }

    #[test]
    fn infeasible_constraints_are_a_config_error() {
        let spec = SpaceSpec::t1();
        let cfg = SearchConfig {
            madds_max: Some(1),
            draw_limit: 100,
            ..Default::default()
        };
        assert!(evolve_with(&spec, &cfg, &toy_eval(&spec)).unwrap_err().is_config());
        let bad = SearchConfig {
            w_acc: 0.5,
            ..Default::default()
        };
        assert!(bad.validate().unwrap_err().is_config());
    }

    #[test]
    fn best_individual_is_kept() {
        let spec = SpaceSpec::t1();
        let cfg = SearchConfig {
            population: 6,
            generations: 5,
            ..Default::default()
        };
        let r = evolve_with(&spec, &cfg, &toy_eval(&spec)).unwrap();
        let seen_max = r
            .audit
            .iter()
            .filter(|a| a.stage == AuditStage::Evaluate && a.passed)
            .map(|a| a.value as f32)
            .filter(|&v| v >= cfg.acc_min)
            .fold(0.0, f32::max);
        assert_eq!(r.best.objectives.acc, seen_max);
    }

    #[test]
    fn equispaced_selection() {
        let front: Vec<Individual> = (0..5)
            .map(|i| Individual {
                arch: Architecture::new(vec![i]),
                objectives: ov(0.5, 10 * (5 - i as u64), 1),
                rank: 0,
                crowding: 0.0,
            })
            .collect();
        let madds = |v: Vec<Individual>| v.iter().map(|i| i.objectives.madds).collect::<Vec<_>>();
        assert_eq!(madds(select_equispaced(&front, 3).unwrap()), vec![10, 30, 50]);
        assert_eq!(madds(select_equispaced(&front, 5).unwrap()), vec![10, 20, 30, 40, 50]);
        assert_eq!(madds(select_equispaced(&front, 1).unwrap()), vec![10]);
        assert!(select_equispaced(&front, 6).is_err());
    }
}
