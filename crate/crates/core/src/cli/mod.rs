//! Command-line pipeline: `gen-data`, `train`, `search`, `fold`,
//! `rank-eval`, `diagnose` and `replay`.
//!
//! Every command writes its outputs under one directory together with a
//! manifest holding the resolved configuration, seeds, version and SHA-256
//! digests of inputs and outputs. `replay` reruns a manifest and checks that
//! every CSV comes out byte-identical.

pub mod config;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diagnostics::{instability_report, layer_similarity};
use crate::els::{strip_stabilizers, verify_equivalence};
use crate::error::{Error, Result};
use crate::evolution::{evolve, select_equispaced};
use crate::oracle::{
    exhaustive_ground_truth, ground_truth_for, ranking_experiment, GroundTruthTable, EXHAUSTIVE_BUDGET,
};
use crate::rng::Rng;
use crate::space::{build_supernet, count_madds, count_params, sample_uniform, Architecture, SpaceSpec, Supernet};
use crate::trainer::{accuracy_histogram, train_supernet, write_csv, write_text, TrainLog};

pub use config::ExperimentConfig;

pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;

pub const OUT_ENV: &str = "SCARLET_KIT_OUT";

#[derive(Debug, Parser)]
#[command(name = "scarlet-kit", version, about = "Stabilized weight-sharing NAS toolkit")]
struct Cli {
    /// Experiment file (TOML); defaults apply to every absent key.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the train, search, oracle and fold seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; falls back to the config's `out`, then $SCARLET_KIT_OUT.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for evaluation and ground truth (1 is fully serial).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, PartialEq, Subcommand, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum Command {
    /// Generate (or load) the dataset and write the three splits.
    GenData,
    /// Train a supernet.
    Train {
        /// Stem of the supernet files in the output directory.
        #[arg(long, default_value = "supernet")]
        name: String,
        /// Overrides `train.els_enabled`.
        #[arg(long)]
        els: Option<bool>,
    },
    /// Constrained weighted NSGA-II over a trained supernet.
    Search {
        #[arg(long, default_value = "supernet")]
        supernet: String,
    },
    /// Fold the stabilizers out of one path and verify equivalence.
    Fold {
        #[arg(long, default_value = "supernet")]
        supernet: String,
        /// Genes such as `0,1,2,0`; defaults to the most accurate member of
        /// the search front.
        #[arg(long)]
        arch: Option<String>,
    },
    /// Kendall tau between one-shot and trained-from-scratch accuracies.
    RankEval {
        #[arg(long, default_value = "supernet")]
        supernet: String,
        /// Existing ground-truth CSV; trained from scratch when absent.
        #[arg(long)]
        table: Option<PathBuf>,
    },
    /// Similarity matrices, accuracy histogram and, against a baseline
    /// supernet, the training-instability comparison.
    Diagnose {
        #[arg(long, default_value = "supernet")]
        supernet: String,
        #[arg(long)]
        baseline: Option<String>,
    },
    /// Rerun a manifest and compare every CSV byte for byte.
    Replay {
        #[arg(long)]
        manifest: PathBuf,
    },
}

impl Command {
    fn label(&self) -> String {
        match self {
            Command::GenData => "gen-data".into(),
            Command::Train { name, .. } => format!("train-{name}"),
            Command::Search { supernet } => format!("search-{supernet}"),
            Command::Fold { supernet, .. } => format!("fold-{supernet}"),
            Command::RankEval { supernet, .. } => format!("rank-eval-{supernet}"),
            Command::Diagnose { supernet, .. } => format!("diagnose-{supernet}"),
            Command::Replay { .. } => "replay".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Seeds {
    pub data: u64,
    pub train: u64,
    pub search: u64,
    pub oracle: u64,
    pub fold: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub config_hash: String,
    /// Directory the inputs were read from.
    pub input_dir: String,
    pub seeds: Seeds,
    pub invocation: Command,
    pub inputs: Vec<FileDigest>,
    /// Paths relative to the output directory.
    pub outputs: Vec<FileDigest>,
    /// The fully resolved experiment file.
    pub config: String,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Parse {
            source_name: path.display().to_string(),
            position: e.span().map(|s| format!("byte {}", s.start)).unwrap_or_else(|| "unknown".into()),
            message: e.message().to_string(),
        })
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}

/// Where a command reads and writes, and what it touched.
struct Ctx {
    cfg: ExperimentConfig,
    input_dir: PathBuf,
    out: PathBuf,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
}

impl Ctx {
    fn output(&mut self, rel: impl AsRef<Path>) -> Result<PathBuf> {
        let path = self.out.join(rel.as_ref());
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        self.outputs.push(rel.as_ref().to_path_buf());
        Ok(path)
    }

    fn input(&mut self, rel: impl AsRef<Path>) -> PathBuf {
        let path = self.input_dir.join(rel.as_ref());
        self.inputs.push(path.clone());
        path
    }

    fn text(&mut self, rel: &str, text: &str) -> Result<()> {
        let p = self.output(rel)?;
        write_text(&p, text)
    }

    fn load_supernet(&mut self, name: &str) -> Result<Supernet> {
        self.input(format!("{name}.scnt"));
        self.input(format!("{name}.toml"));
        Supernet::load(&self.input_dir, name)
    }

    fn manifest(&self, invocation: &Command) -> Result<Manifest> {
        let digest = |p: &Path, shown: String| sha256_file(p).map(|sha256| FileDigest { path: shown, sha256 });
        let mut outputs = self
            .outputs
            .iter()
            .map(|rel| digest(&self.out.join(rel), rel.to_string_lossy().into_owned()))
            .collect::<Result<Vec<_>>>()?;
        outputs.sort_by(|a, b| a.path.cmp(&b.path));
        outputs.dedup();
        let inputs = self
            .inputs
            .iter()
            .map(|p| digest(p, p.to_string_lossy().into_owned()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Manifest {
            version: env!("CARGO_PKG_VERSION").into(),
            config_hash: self.cfg.hash()?,
            input_dir: self.input_dir.to_string_lossy().into_owned(),
            seeds: Seeds {
                data: self.cfg.data.seed,
                train: self.cfg.train.seed,
                search: self.cfg.search.seed,
                oracle: self.cfg.oracle.seed,
                fold: self.cfg.fold.seed,
            },
            invocation: invocation.clone(),
            inputs,
            outputs,
            config: self.cfg.to_toml()?,
        })
    }
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config() {
                EXIT_CONFIG
            } else {
                EXIT_RUNTIME
            }
        }
    }
}

fn resolve_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p).map_err(|e| match e {
            Error::Io { .. } => Error::config(format!("cannot read config: {e}")),
            other => other,
        })?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.override_seed(seed);
    }
    if let Some(w) = cli.workers {
        cfg.override_workers(w);
    }
    if let Some(out) = &cli.out {
        cfg.out = Some(out.clone());
    } else if cfg.out.is_none() {
        cfg.out = std::env::var_os(OUT_ENV).map(PathBuf::from);
    }
    if cfg.out.is_none() {
        return Err(Error::config(format!("no output directory: pass --out, set `out` or ${OUT_ENV}")));
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    if let Command::Replay { manifest } = &cli.command {
        return replay(manifest, cli.out.as_deref());
    }
    let cfg = resolve_config(&cli)?;
    let out = cfg.out.clone().unwrap_or_default();
    execute(cfg, &cli.command, out.clone(), out).map(|_| ())
}

/// Runs one command and writes its manifest. Returns the manifest.
pub fn execute(cfg: ExperimentConfig, command: &Command, input_dir: PathBuf, out: PathBuf) -> Result<Manifest> {
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let mut ctx = Ctx {
        cfg,
        input_dir,
        out,
        inputs: Vec::new(),
        outputs: Vec::new(),
    };
    match command {
        Command::GenData => gen_data(&mut ctx)?,
        Command::Train { name, els } => train(&mut ctx, name, *els)?,
        Command::Search { supernet } => search(&mut ctx, supernet)?,
        Command::Fold { supernet, arch } => fold(&mut ctx, supernet, arch.as_deref())?,
        Command::RankEval { supernet, table } => rank_eval(&mut ctx, supernet, table.as_deref())?,
        Command::Diagnose { supernet, baseline } => diagnose(&mut ctx, supernet, baseline.as_deref())?,
        Command::Replay { .. } => return Err(Error::config("replay manifests cannot be replayed")),
    }
    let manifest = ctx.manifest(command)?;
    let text = toml::to_string_pretty(&manifest).map_err(|e| Error::input(format!("cannot write manifest: {e}")))?;
    write_text(&ctx.out.join(format!("manifest-{}.toml", command.label())), &text)?;
    Ok(manifest)
}

/// Reruns `manifest_path` into `out` (default: `replay/` beside the
/// manifest) and fails unless every CSV matches its recorded digest.
pub fn replay(manifest_path: &Path, out: Option<&Path>) -> Result<()> {
    let m = Manifest::load(manifest_path)?;
    let mut cfg = ExperimentConfig::from_toml(&m.config, &manifest_path.display().to_string())?;
    let out = match out {
        Some(o) => o.to_path_buf(),
        None => manifest_path.parent().unwrap_or(Path::new(".")).join("replay"),
    };
    cfg.out = Some(out.clone());
    for input in &m.inputs {
        let now = sha256_file(Path::new(&input.path))?;
        if now != input.sha256 {
            return Err(Error::input(format!("input {} changed since the recorded run", input.path)));
        }
    }
    let fresh = execute(cfg, &m.invocation, PathBuf::from(&m.input_dir), out.clone())?;
    let mut checked = 0;
    for rec in m.outputs.iter().filter(|o| o.path.ends_with(".csv")) {
        let now = fresh
            .outputs
            .iter()
            .find(|o| o.path == rec.path)
            .ok_or_else(|| Error::State(format!("replay did not produce {}", rec.path)))?;
        if now.sha256 != rec.sha256 {
            return Err(Error::State(format!("replayed {} differs from the recorded run", rec.path)));
        }
        checked += 1;
    }
    println!("replay: {checked} CSV files byte-identical in {}", out.display());
    Ok(())
}

fn splits(ctx: &Ctx) -> Result<crate::dataset::Splits> {
    ctx.cfg.data.load(ctx.cfg.base_space()?.input_channels)
}

fn gen_data(ctx: &mut Ctx) -> Result<()> {
    if let Some(p) = ctx.cfg.data.external.clone() {
        ctx.inputs.push(p);
    }
    let s = splits(ctx)?;
    #[derive(Serialize)]
    struct Row {
        split: &'static str,
        samples: usize,
        class_counts: String,
        sha256: String,
    }
    let mut rows = Vec::new();
    for (name, d) in [("train", &s.train), ("val", &s.val), ("test", &s.test)] {
        let p = ctx.output(format!("data/{name}.scnt"))?;
        d.save(&p)?;
        rows.push(Row {
            split: name,
            samples: d.len(),
            class_counts: d.class_histogram().iter().map(|c| c.to_string()).collect::<Vec<_>>().join(" "),
            sha256: d.content_hash(),
        });
    }
    write_csv(&ctx.output("data/summary.csv")?, &rows)?;
    println!(
        "gen-data: {} train / {} val / {} test samples",
        s.train.len(),
        s.val.len(),
        s.test.len()
    );
    Ok(())
}

fn train(ctx: &mut Ctx, name: &str, els: Option<bool>) -> Result<()> {
    if let Some(e) = els {
        ctx.cfg.train.els_enabled = e;
    }
    let spec = ctx.cfg.base_space()?.with_stabilizers(ctx.cfg.train.els_enabled);
    let s = splits(ctx)?;
    let mut net = build_supernet(&spec, ctx.cfg.train.seed)?;
    let log = train_supernet(&mut net, &s.train, &s.val, &ctx.cfg.train)?;
    ctx.output(format!("{name}.scnt"))?;
    ctx.output(format!("{name}.toml"))?;
    net.save(&ctx.out, name)?;
    log.write_steps_csv(&ctx.output(format!("{name}_steps.csv"))?)?;
    log.write_epochs_csv(&ctx.output(format!("{name}_epochs.csv"))?)?;
    ctx.text(&format!("{name}_summary.toml"), &log.summary_toml()?)?;
    let last = log.epochs.last().map(|e| (e.train_acc_mean, e.val_acc_mean)).unwrap_or_default();
    println!(
        "train: {name} ({} steps), final train acc {:.3}, val acc {:.3}",
        log.steps.len(),
        last.0,
        last.1
    );
    Ok(())
}

fn search(ctx: &mut Ctx, supernet: &str) -> Result<()> {
    let net = ctx.load_supernet(supernet)?;
    let s = splits(ctx)?;
    let recal = ctx.cfg.eval.recalibration(&s.train)?;
    let result = evolve(&net, &s.val, &ctx.cfg.search, recal.as_ref())?;
    result.write_generations_csv(&ctx.output("search_generations.csv")?)?;
    result.write_front_csv(&ctx.output("search_front.csv")?)?;
    result.write_archive_csv(&ctx.output("search_archive.csv")?)?;
    result.write_audit_csv(&ctx.output("search_audit.csv")?)?;
    let front = result.pareto_front();
    let k = ctx.cfg.select_k.min(front.len());
    for (i, ind) in select_equispaced(&front, k)?.iter().enumerate() {
        let text = format!(
            "arch = \"{}\"\nacc = {}\nmadds = {}\nparams = {}\n",
            ind.arch, ind.objectives.acc, ind.objectives.madds, ind.objectives.params
        );
        ctx.text(&format!("selected/model_{i}.toml"), &text)?;
    }
    println!(
        "search: {} generations, front of {}, best acc {:.3} at {}",
        result.generations.len(),
        front.len(),
        result.best.objectives.acc,
        result.best.arch
    );
    Ok(())
}

#[derive(Deserialize)]
struct FrontRecord {
    genes: String,
    acc: f32,
}

fn best_from_front(path: &Path) -> Result<Architecture> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::io(path, std::io::Error::other(e.to_string())))?;
    let mut best: Option<FrontRecord> = None;
    for row in r.deserialize::<FrontRecord>() {
        let row = row.map_err(|e| Error::input(format!("{}: {e}", path.display())))?;
        if best.as_ref().map_or(true, |b| row.acc > b.acc) {
            best = Some(row);
        }
    }
    best.ok_or_else(|| Error::input(format!("{} lists no architectures", path.display())))?
        .genes
        .parse()
}

fn fold(ctx: &mut Ctx, supernet: &str, arch: Option<&str>) -> Result<()> {
    let net = ctx.load_supernet(supernet)?;
    let arch: Architecture = match arch {
        Some(a) => a.parse()?,
        None => {
            let p = ctx.input("search_front.csv");
            best_from_front(&p)?
        }
    };
    let path = net.extract(&arch)?;
    let folded = strip_stabilizers(&arch, &net)?;
    let report = verify_equivalence(
        &path,
        &folded,
        ctx.cfg.fold.probes,
        ctx.cfg.fold.tolerance,
        &mut Rng::new(ctx.cfg.fold.seed),
    )?;
    let stem = format!("fold/{}", arch.key());
    ctx.output(format!("{stem}.scnt"))?;
    ctx.output(format!("{stem}.toml"))?;
    folded.save(&ctx.out.join("fold"), &arch.key())?;
    ctx.text(&format!("{stem}_report.toml"), &report.to_toml()?)?;
    println!(
        "fold: {} -> {} blocks, max logit diff {:.2e} over {} probes",
        arch,
        folded.blocks.len(),
        report.max_abs_output_diff,
        report.probes
    );
    if !report.passed {
        return Err(Error::State(format!(
            "folded network differs from the path on {} of {} probes",
            report.failed_probes(),
            report.probes
        )));
    }
    Ok(())
}

fn ground_truth(ctx: &mut Ctx, spec: &SpaceSpec, splits: &crate::dataset::Splits) -> Result<GroundTruthTable> {
    let want = ctx.cfg.rank.truth_archs;
    if want as u128 >= spec.size() && spec.size() <= EXHAUSTIVE_BUDGET {
        return exhaustive_ground_truth(spec, &splits.train, &splits.test, &ctx.cfg.oracle, ctx.cfg.workers);
    }
    let mut rng = Rng::new(ctx.cfg.oracle.seed).fork(7);
    let mut archs: Vec<Architecture> = Vec::with_capacity(want);
    let mut draws = 0;
    while archs.len() < want && draws < 100 * want.max(1) {
        let a = sample_uniform(spec, &mut rng);
        if !archs.contains(&a) {
            archs.push(a);
        }
        draws += 1;
    }
    archs.sort();
    ground_truth_for(spec, &archs, &splits.train, &splits.test, &ctx.cfg.oracle, ctx.cfg.workers)
}

fn rank_eval(ctx: &mut Ctx, supernet: &str, table: Option<&Path>) -> Result<()> {
    let net = ctx.load_supernet(supernet)?;
    let s = splits(ctx)?;
    let table = match table {
        Some(p) => {
            ctx.inputs.push(p.to_path_buf());
            GroundTruthTable::read_csv(p)?
        }
        None => {
            let spec = net.spec.with_stabilizers(false);
            let t = ground_truth(ctx, &spec, &s)?;
            t.write_csv(&ctx.output("ground_truth.csv")?)?;
            t
        }
    };
    let recal = ctx.cfg.eval.recalibration(&s.train)?;
    let mut rng = Rng::new(ctx.cfg.train.seed).fork(11);
    let result = ranking_experiment(
        &net,
        &s.val,
        &table,
        ctx.cfg.rank.sample_size,
        &mut rng,
        ctx.cfg.workers,
        recal.as_ref(),
    )?;
    result.write_csv(&ctx.output(format!("{supernet}_ranking.csv"))?)?;
    let (agree, pairs) = result.ordered_pairs(ctx.cfg.rank.pair_margin);
    ctx.text(
        &format!("{supernet}_ranking.toml"),
        &format!(
            "kendall_tau = {}\nsample_size = {}\npair_margin = {}\nordered_pairs = {agree}\ncompared_pairs = {pairs}\n",
            result.tau,
            result.points.len(),
            ctx.cfg.rank.pair_margin
        ),
    )?;
    println!(
        "rank-eval: {supernet} tau {:.3} over {} architectures, {agree}/{pairs} pairs ordered",
        result.tau,
        result.points.len()
    );
    Ok(())
}

fn diagnose(ctx: &mut Ctx, supernet: &str, baseline: Option<&str>) -> Result<()> {
    let net = ctx.load_supernet(supernet)?;
    let s = splits(ctx)?;
    let n = ctx.cfg.diagnose.probe_batch.min(s.val.len());
    let (probe, _) = s.val.batch(&(0..n).collect::<Vec<_>>());
    #[derive(Serialize)]
    struct RowMean {
        layer: usize,
        block: String,
        row_mean: f32,
    }
    let mut means = Vec::new();
    for layer in 0..net.spec.num_layers() {
        let m = layer_similarity(&net, layer, &probe)?;
        let p = ctx.output(format!("{supernet}_similarity_layer{layer}.csv"))?;
        write_text(&p, &m.to_csv()?)?;
        means.extend(m.labels.iter().zip(&m.row_means).map(|(b, &r)| RowMean {
            layer,
            block: b.clone(),
            row_mean: r,
        }));
    }
    write_csv(&ctx.output(format!("{supernet}_similarity_rows.csv"))?, &means)?;
    let recal = ctx.cfg.eval.recalibration(&s.train)?;
    let mut rng = Rng::new(ctx.cfg.train.seed).fork(13);
    let hist = accuracy_histogram(
        &net,
        &s.val,
        ctx.cfg.diagnose.histogram_samples,
        &mut rng,
        ctx.cfg.workers,
        recal.as_ref(),
    )?;
    hist.write_csv(&ctx.output(format!("{supernet}_histogram.csv"))?)?;
    let (mean, std) = hist.mean_std();
    let mut summary = format!(
        "prefix_gene = 0\nhistogram_samples = {}\nmean_acc = {mean}\nstd_acc = {std}\nmass_below_0_3 = {}\n",
        hist.total(),
        hist.mass_below(0.3)
    );
    if let Some(base) = baseline {
        let read = |ctx: &mut Ctx, name: &str| -> Result<TrainLog> {
            let p = ctx.input(format!("{name}_epochs.csv"));
            Ok(TrainLog {
                strategy: ctx.cfg.train.strategy,
                els_enabled: false,
                steps: Vec::new(),
                epochs: TrainLog::read_epochs_csv(&p)?,
                update_counts: Vec::new(),
            })
        };
        let a = read(ctx, supernet)?;
        let b = read(ctx, base)?;
        let r = instability_report(&a, &b)?;
        #[derive(Serialize)]
        struct Row {
            epoch: usize,
            mean_a: f32,
            std_a: f32,
            mean_b: f32,
            std_b: f32,
        }
        let rows: Vec<Row> = (0..r.mean_a.len())
            .map(|e| Row {
                epoch: e,
                mean_a: r.mean_a[e],
                std_a: r.std_a[e],
                mean_b: r.mean_b[e],
                std_b: r.std_b[e],
            })
            .collect();
        write_csv(&ctx.output(format!("{supernet}_vs_{base}_instability.csv"))?, &rows)?;
        summary.push_str(&format!(
            "baseline = \"{base}\"\navg_std = {}\nbaseline_avg_std = {}\nfinal_mean_higher = {}\nfinal_std_lower = {}\n",
            r.avg_std_a, r.avg_std_b, r.final_mean_a_higher, r.final_std_a_lower
        ));
    }
    ctx.text(&format!("{supernet}_diagnose.toml"), &summary)?;
    println!("diagnose: {supernet} one-shot mean {mean:.3} std {std:.3}");
    Ok(())
}

/// Multiply-adds and parameter count of `arch`, for scripting.
pub fn describe(spec: &SpaceSpec, arch: &Architecture) -> Result<(u64, u64)> {
    Ok((count_madds(spec, arch)?, count_params(spec, arch)?))
}
