use std::path::Path;
use std::process::{Command, Output};

use multinv::dataset::synthetic::SyntheticSpec;
use multinv::harness::{DatasetSource, ExperimentConfig};

fn multinv(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_multinv"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn tiny_config(dir: &Path) -> String {
    let mut c = ExperimentConfig::toy();
    c.dataset.source = DatasetSource::Synthetic(SyntheticSpec {
        classes: 6,
        per_class: 10,
        height: 16,
        width: 16,
        ..Default::default()
    });
    c.dataset.probe_class_count = 2;
    c.dataset.probe_size = 20;
    c.target.schedule = vec![0.5, 1.0];
    c.target.train.epochs = 2;
    c.target.train.conv_channels = vec![4, 8];
    c.target.train.hidden = 16;
    c.target.train.embedding_dim = 8;
    c.target.perceptual_net.epochs = 1;
    c.target.perceptual_net.conv_channels = vec![4];
    c.attack.inversion.epochs = 1;
    c.attack.inversion.hidden = 16;
    c.attack.inversion.proj_channels = 4;
    c.attack.inversion.block_channels = vec![4, 4];
    c.attack.inversion.perceptual_depth = 1;
    c.attack.membership.epochs = 2;
    c.attack.mi_samples_per_side = 10;
    c.evaluation.ablation_subsets = vec![vec![0], vec![0, 1]];
    let path = dir.join("tiny.toml");
    std::fs::write(&path, c.to_toml().unwrap()).unwrap();
    path.display().to_string()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn show_config_prints_toml() {
    let tmp = tempfile::tempdir().unwrap();
    let out = multinv(&["show-config", "--seed", "5", "--mode", "sr"], tmp.path());
    assert!(out.status.success(), "{}", stderr(&out));
    let text = String::from_utf8(out.stdout).unwrap();
    let parsed = ExperimentConfig::from_toml(&text).unwrap();
    assert_eq!(parsed.seed, 5);
    assert_eq!(parsed.attack.mode.as_str(), "sr");
}

#[test]
fn failures_exit_nonzero() {
    let tmp = tempfile::tempdir().unwrap();
    let out = multinv(&["report", "no-such-run"], tmp.path());
    assert!(!out.status.success());
    assert!(stderr(&out).contains("no-such-run"));

    let out = multinv(&["evaluate", "--runs", "runs"], tmp.path());
    assert!(!out.status.success());
    assert!(stderr(&out).contains("train-target"), "{}", stderr(&out));

    let out = multinv(&["attack-invert", "--mode", "bogus"], tmp.path());
    assert!(!out.status.success());

    let out = multinv(&["attack-invert", "--snapshots", "7"], tmp.path());
    assert!(!out.status.success());
    assert!(stderr(&out).contains("out of range"), "{}", stderr(&out));
}

#[test]
fn stages_run_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let config = tiny_config(tmp.path());
    let cfg = ["--config", config.as_str(), "--runs", "runs"];
    let with = |cmd: &str, extra: &[&str]| {
        let mut args = vec![cmd];
        args.extend_from_slice(&cfg);
        args.extend_from_slice(extra);
        let out = multinv(&args, tmp.path());
        assert!(out.status.success(), "{cmd}: {}", stderr(&out));
        String::from_utf8(out.stdout).unwrap()
    };
    with("ingest", &["--export-images"]);
    with("train-target", &[]);
    let invert = with("attack-invert", &[]);
    assert!(invert.contains("type1") && invert.contains("rank1"), "{invert}");
    let again = with("evaluate", &[]);
    assert!(again.contains("type1"));
    let mi = with("attack-mi", &[]);
    assert!(mi.contains("mi_acc"), "{mi}");

    let runs: Vec<String> = std::fs::read_dir(tmp.path().join("runs"))
        .unwrap()
        .map(|e| e.unwrap().path().display().to_string())
        .collect();
    assert_eq!(runs.len(), 2);
    let mut args = vec!["report"];
    args.extend(runs.iter().map(String::as_str));
    args.extend(["--out", "report"]);
    let out = multinv(&args, tmp.path());
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(tmp.path().join("report/comparison.csv").exists());
    assert!(tmp.path().join("report/type1.svg").exists());
}
