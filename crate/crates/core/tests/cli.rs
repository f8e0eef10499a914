use std::path::Path;
use std::process::{Command, Output};

use opflow::datasets::Dataset;

const CONFIG: &str = r#"
[grid]
resolution = [16]

[data]
kind = "gp"
gp = { length_scale = 0.5, nu = 1.5 }
count = 48
seed = 1

[latent]
length_scale = 0.1
nu = 0.5

[model]
partition = "domain"
blocks = 2
modes = 4
width = 4
depth = 1
seed = 2

[train]
batch_size = 8
warmup_iterations = 6
finetune_iterations = 4
lr_warmup = 1e-3
lr_finetune = 5e-4
seed = 3

[regression]
sgld = { total_iterations = 400, burn_in = 100, thinning = 10, step_initial = 5e-3, step_final = 4e-3, seed = 5 }
map = { max_iterations = 50 }
observations = { rule = "random", count = 4, seed = 6 }
truth_seed = 7
"#;

fn opflow(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_opflow"))
        .arg("--root")
        .arg(root)
        .args(args)
        .output()
        .expect("spawn opflow")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn full_pipeline_on_a_tiny_model() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    std::fs::write(root.join("exp.toml"), CONFIG).unwrap();

    ok(&opflow(root, &["gen-data", "--config", "exp.toml", "--out", "data/train.ufds"]));
    let data = Dataset::load(&root.join("data/train.ufds")).unwrap();
    assert_eq!((data.batch.count(), data.batch.grid().resolution()), (48, &[16][..]));
    assert!(root.join("data/train.config.toml").exists());

    ok(&opflow(root, &["train", "--config", "exp.toml", "--data", "data/train.ufds", "--out", "run"]));
    for f in ["config.toml", "history.jsonl", "final.opfl", "train_summary.json"] {
        assert!(root.join("run").join(f).exists(), "missing {f}");
    }
    let history = std::fs::read_to_string(root.join("run/history.jsonl")).unwrap();
    assert!(history.lines().count() >= 10);

    // resolution-agnostic sampling from the same checkpoint
    ok(&opflow(
        root,
        &["sample", "--ckpt", "run/final.opfl", "--count", "5", "--resolution", "32", "--seed", "9", "--out", "s32.ufds"],
    ));
    let s = Dataset::load(&root.join("s32.ufds")).unwrap();
    assert_eq!((s.batch.count(), s.batch.grid().resolution()), (5, &[32][..]));
    ok(&opflow(
        root,
        &["sample", "--ckpt", "run/final.opfl", "--count", "20", "--resolution", "16", "--seed", "9", "--out", "s16.ufds"],
    ));

    ok(&opflow(root, &["regress", "--ckpt", "run/final.opfl", "--config", "exp.toml", "--out", "reg"]));
    let summary = json(&root.join("reg/summary.json"));
    assert_eq!(summary["map"].as_array().unwrap().len(), 16);
    assert_eq!(summary["sample_count"].as_u64().unwrap(), 30);
    let metrics = json(&root.join("reg/metrics.json"));
    assert!(metrics["scalars"]["smse_truth"].as_f64().unwrap().is_finite());
    for f in ["observations.json", "posterior_samples.ufds", "sgld_log.jsonl", "truth.ufds"] {
        assert!(root.join("reg").join(f).exists(), "missing {f}");
    }

    ok(&opflow(root, &["eval", "--data", "s16.ufds", "--reference", "data/train.ufds", "--out", "eval/report.json"]));
    let report = json(&root.join("eval/report.json"));
    for k in ["msll", "autocovariance_rel_l2", "f2id"] {
        assert!(report["scalars"][k].as_f64().unwrap().is_finite(), "{k}");
    }

    ok(&opflow(
        root,
        &["plot", "--input", "data/train.ufds", "--input", "reg/summary.json", "--input", "eval/report.json", "--out", "fig"],
    ));
    for f in ["train.svg", "summary.svg", "report.svg"] {
        let svg = std::fs::read_to_string(root.join("fig").join(f)).unwrap();
        assert!(svg.starts_with("<svg") || svg.contains("<svg"), "{f} is not SVG");
    }
}

#[test]
fn same_seed_gives_identical_samples() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    std::fs::write(root.join("exp.toml"), CONFIG.replace("warmup_iterations = 6", "warmup_iterations = 2")).unwrap();
    ok(&opflow(root, &["gen-data", "--config", "exp.toml", "--out", "d.ufds"]));
    ok(&opflow(root, &["train", "--config", "exp.toml", "--data", "d.ufds", "--out", "run", "--ablation"]));
    let summary = json(&root.join("run/train_summary.json"));
    assert_eq!(summary["lambda"].as_f64(), Some(0.0));
    assert!(std::fs::read_to_string(root.join("run/history.jsonl")).unwrap().contains("ablation"));
    for out in ["a.ufds", "b.ufds"] {
        ok(&opflow(
            root,
            &["sample", "--ckpt", "run/final.opfl", "--count", "3", "--resolution", "16", "--seed", "4", "--out", out],
        ));
    }
    let a = Dataset::load(&root.join("a.ufds")).unwrap();
    let b = Dataset::load(&root.join("b.ufds")).unwrap();
    assert_eq!(a.batch.values(), b.batch.values());
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();

    assert_eq!(opflow(root, &["--help"]).status.code(), Some(0));
    assert_eq!(opflow(root, &["frobnicate"]).status.code(), Some(2));
    assert_eq!(opflow(root, &["sample", "--ckpt", "x.opfl"]).status.code(), Some(2));

    std::fs::write(root.join("bad.toml"), CONFIG.replace("nu = 1.5", "nu = 1.7")).unwrap();
    let out = opflow(root, &["gen-data", "--config", "bad.toml", "--out", "d.ufds"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));

    let out = opflow(
        root,
        &["sample", "--ckpt", "missing.opfl", "--count", "1", "--resolution", "8", "--seed", "1", "--out", "s.ufds"],
    );
    assert_eq!(out.status.code(), Some(4));

    std::fs::write(root.join("junk.opfl"), b"junk").unwrap();
    let out = opflow(
        root,
        &["sample", "--ckpt", "junk.opfl", "--count", "1", "--resolution", "8", "--seed", "1", "--out", "s.ufds"],
    );
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn shipped_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for entry in std::fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            let cfg = opflow::config::ExperimentConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            cfg.model_config().unwrap();
            seen += 1;
        }
    }
    assert!(seen >= 4);
}
