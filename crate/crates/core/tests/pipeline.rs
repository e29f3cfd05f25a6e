use std::path::Path;

use scarlet_kit::cli::{dispatch, Manifest, EXIT_CONFIG, EXIT_RUNTIME, EXIT_USAGE};
use scarlet_kit::dataset::{generate_synthetic, split};
use scarlet_kit::oracle::{network_accuracy, standalone_network, train_network, StandaloneConfig};
use scarlet_kit::space::{build_supernet, Architecture, SpaceSpec};
use scarlet_kit::Rng;

const SMOKE: &str = r#"
select_k = 2

[data]
samples = 480

[train]
epochs = 1
batch_size = 32
val_paths = 2

[eval]
bn_recalibration_batches = 2
bn_recalibration_batch_size = 32

[search]
population = 6
generations = 2
acc_min = 0.0

[oracle]
epochs = 1
batch_size = 32

[rank]
truth_archs = 10
sample_size = 10

[diagnose]
probe_batch = 16
histogram_samples = 12

[fold]
probes = 10
"#;

fn run(args: &[&str]) -> i32 {
    dispatch(std::iter::once("scarlet-kit").chain(args.iter().copied()))
}

fn csv_header(path: &Path) -> String {
    std::fs::read_to_string(path)
        .unwrap_or_else(|e| panic!("{}: {e}", path.display()))
        .lines()
        .next()
        .unwrap()
        .to_string()
}

#[test]
fn help_and_usage_errors() {
    assert_eq!(run(&["--help"]), 0);
    assert_eq!(run(&["no-such-command"]), EXIT_USAGE);
    assert_eq!(run(&["train", "--bogus"]), EXIT_USAGE);
}

#[test]
fn config_errors_exit_with_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[train]\nepochz = 1\n").unwrap();
    let out = dir.path().join("out");
    assert_eq!(run(&["--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "gen-data"]), EXIT_CONFIG);
    std::fs::write(&cfg, "[search]\nw_acc = 0.9\n").unwrap();
    assert_eq!(run(&["--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "gen-data"]), EXIT_CONFIG);
    let missing = dir.path().join("missing.toml");
    assert_eq!(run(&["--config", missing.to_str().unwrap(), "--out", out.to_str().unwrap(), "gen-data"]), EXIT_CONFIG);
}

#[test]
fn missing_supernet_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    assert_eq!(run(&["--out", out, "search", "--supernet", "absent"]), EXIT_RUNTIME);
}

#[test]
fn end_to_end_pipeline_and_replay() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("smoke.toml");
    std::fs::write(&cfg, SMOKE).unwrap();
    let out = dir.path().join("run");
    let (c, o) = (cfg.to_str().unwrap(), out.to_str().unwrap());
    let base = ["--config", c, "--out", o];
    let with = |extra: &[&'static str]| -> Vec<&str> { base.iter().copied().chain(extra.iter().copied()).collect() };

    assert_eq!(run(&with(&["gen-data"])), 0);
    assert_eq!(run(&with(&["train"])), 0);
    assert_eq!(run(&with(&["train", "--name", "skipnet", "--els", "false"])), 0);
    assert_eq!(run(&with(&["search"])), 0);
    assert_eq!(run(&with(&["fold"])), 0);
    assert_eq!(run(&with(&["rank-eval"])), 0);
    assert_eq!(run(&with(&["diagnose", "--supernet", "skipnet", "--baseline", "supernet"])), 0);

    for (file, header) in [
        ("data/summary.csv", "split,samples,class_counts,sha256"),
        ("supernet_steps.csv", "step,epoch,genes,loss,acc"),
        ("supernet_epochs.csv", "epoch,train_loss,train_acc_mean,train_acc_std,val_acc_mean,val_acc_std"),
        ("ground_truth.csv", "genes,test_acc,train_acc,madds,params,seed"),
        ("supernet_ranking.csv", "genes,oneshot_acc,standalone_acc"),
        ("skipnet_similarity_layer0.csv", "block,E3K3,E3K5,skip,row_mean"),
    ] {
        assert_eq!(csv_header(&out.join(file)), header, "{file}");
    }
    for file in [
        "supernet.scnt",
        "supernet.toml",
        "supernet_summary.toml",
        "search_generations.csv",
        "search_front.csv",
        "search_archive.csv",
        "search_audit.csv",
        "selected/model_0.toml",
        "supernet_ranking.toml",
        "skipnet_histogram.csv",
        "skipnet_vs_supernet_instability.csv",
        "skipnet_diagnose.toml",
        "manifest-gen-data.toml",
        "manifest-train-supernet.toml",
        "manifest-search-supernet.toml",
        "manifest-fold-supernet.toml",
        "manifest-rank-eval-supernet.toml",
    ] {
        assert!(out.join(file).exists(), "{file} missing");
    }
    let folded: Vec<_> = std::fs::read_dir(out.join("fold")).unwrap().collect();
    assert_eq!(folded.len(), 3, "folded network files and report");
    let ranked = std::fs::read_to_string(out.join("supernet_ranking.csv")).unwrap();
    assert_eq!(ranked.lines().count(), 11);

    let manifest = out.join("manifest-search-supernet.toml");
    let m = Manifest::load(&manifest).unwrap();
    assert_eq!(m.seeds.search, 0);
    assert!(m.outputs.iter().any(|o| o.path == "search_front.csv"));
    assert!(m.inputs.iter().any(|i| i.path.ends_with("supernet.scnt")));
    let replay = dir.path().join("replay");
    let r = replay.to_str().unwrap();
    assert_eq!(run(&["--out", r, "replay", "--manifest", manifest.to_str().unwrap()]), 0);
    for name in ["search_front.csv", "search_archive.csv", "search_generations.csv"] {
        assert_eq!(
            std::fs::read(out.join(name)).unwrap(),
            std::fs::read(replay.join(name)).unwrap(),
            "{name}"
        );
    }

    // a changed input is refused rather than replayed
    std::fs::write(out.join("supernet.scnt"), b"tampered").unwrap();
    assert_eq!(run(&["--out", r, "replay", "--manifest", manifest.to_str().unwrap()]), EXIT_RUNTIME);
}

#[test]
fn out_dir_falls_back_to_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, "[data]\nsamples = 200\n").unwrap();
    std::env::set_var(scarlet_kit::cli::OUT_ENV, dir.path().join("env_out"));
    assert_eq!(run(&["--config", cfg.to_str().unwrap(), "gen-data"]), 0);
    std::env::remove_var(scarlet_kit::cli::OUT_ENV);
    assert!(dir.path().join("env_out/manifest-gen-data.toml").exists());
}

#[test]
fn oneshot_output_ignores_unchosen_weights() {
    let spec = SpaceSpec::t1().with_stabilizers(true);
    let mut net = build_supernet(&spec, 5).unwrap();
    let arch = Architecture::new(vec![0, 2, 1, 0]);
    let x = scarlet_kit::engine::Tensor::randn(net.input_shape(3), 1.0, &mut Rng::new(1));
    let before = net.infer_path(&arch, &x).unwrap();
    let chosen: Vec<String> = arch.genes.iter().enumerate().map(|(l, g)| format!("layer{l}.choice{g}.")).collect();
    let mut touched = 0;
    net.visit_params_mut(&mut |p| {
        let is_choice = p.name.starts_with("layer");
        if is_choice && !chosen.iter().any(|c| p.name.starts_with(c.as_str())) {
            p.value.data_mut().iter_mut().for_each(|v| *v = *v * 3.0 + 1.0);
            touched += 1;
        }
    });
    assert!(touched > 0);
    assert_eq!(net.infer_path(&arch, &x).unwrap().data(), before.data());
}

#[test]
fn standalone_training_can_memorize_a_small_set() {
    let data = generate_synthetic(3, 64, 4, 16).unwrap();
    let s = split(&data, 0.1, 0.1, 3).unwrap();
    let spec = SpaceSpec::t1();
    let mut net = standalone_network(&spec, &Architecture::new(vec![1, 1, 1, 1]), 0).unwrap();
    let cfg = StandaloneConfig {
        epochs: 60,
        batch_size: 16,
        ..StandaloneConfig::default()
    };
    train_network(&mut net, &s.train, &cfg).unwrap();
    assert!(network_accuracy(&net, &s.train).unwrap() >= 0.95);
}
