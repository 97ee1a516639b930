use std::fs;
use std::path::Path;

use thsg::checkpoint;
use thsg::cli::{run, EXIT_CONFIG, EXIT_DATA, EXIT_OK};
use thsg::config::TrainConfig;
use thsg::networks::Architecture;
use thsg::ModelBundle;

fn thsg(args: &[&str]) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let argv = std::iter::once("thsg").chain(args.iter().copied());
    let code = run(argv, &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn tiny_config() -> TrainConfig {
    TrainConfig {
        batch_size: 8,
        classes_per_batch: 2,
        samples_per_class: 4,
        embedding_dim: 4,
        feature_hidden: 8,
        gen_hidden1: 8,
        gen_hidden2: 8,
        epochs: 1,
        pretrain_epochs: 1,
        lr_f: 1e-3,
        ..TrainConfig::default()
    }
}

fn gen_data(dir: &Path, name: &str, classes: usize, per_class: usize, dim: usize) -> std::path::PathBuf {
    let path = dir.join(name);
    let (c, k, d) = (classes.to_string(), per_class.to_string(), dim.to_string());
    let (code, _, err) =
        thsg(&["gen-data", "--classes", &c, "--per-class", &k, "--dim", &d, "--seed", "3", "--out", p(&path)]);
    assert_eq!(code, EXIT_OK, "{err}");
    path
}

#[test]
fn missing_required_key_exits_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_data(dir.path(), "d.csv", 4, 10, 5);
    let text: String =
        tiny_config().to_string().lines().filter(|l| !l.starts_with("eta")).map(|l| format!("{l}\n")).collect();
    let cfg = dir.path().join("c.cfg");
    fs::write(&cfg, text).unwrap();
    let (code, _, err) = thsg(&["train", "--config", p(&cfg), "--data", p(&data), "--out", p(&dir.path().join("o"))]);
    assert_eq!(code, EXIT_CONFIG);
    assert!(err.contains("eta"), "{err}");
}

#[test]
fn bad_flag_is_a_usage_error() {
    let (code, _, _) = thsg(&["eval", "--no-such-flag"]);
    assert_eq!(code, EXIT_CONFIG);
}

#[test]
fn training_is_deterministic_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_data(dir.path(), "d.thsgdata", 4, 12, 5);
    let cfg = dir.path().join("c.cfg");
    fs::write(&cfg, tiny_config().to_string()).unwrap();
    let mut logs = Vec::new();
    for (run_name, seed) in [("a", "7"), ("b", "7"), ("c", "8")] {
        let out = dir.path().join(run_name);
        let (code, stdout, err) =
            thsg(&["train", "--config", p(&cfg), "--data", p(&data), "--out", p(&out), "--seed", seed]);
        assert_eq!(code, EXIT_OK, "{err}");
        assert!(stdout.contains("recall@1="));
        assert!(out.join("epoch_0/model.thsg").exists());
        logs.push(fs::read(out.join("epoch_1/log.csv")).unwrap());
    }
    assert_eq!(logs[0], logs[1]);
    assert_ne!(logs[0], logs[2]);
}

#[test]
fn set_overrides_config_values() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_data(dir.path(), "d.csv", 4, 12, 5);
    let cfg = dir.path().join("c.cfg");
    fs::write(&cfg, tiny_config().to_string()).unwrap();
    let out = dir.path().join("o");
    let args = ["train", "--config", p(&cfg), "--data", p(&data), "--out", p(&out), "--set", "epochs=2"];
    let (code, _, err) = thsg(&args);
    assert_eq!(code, EXIT_OK, "{err}");
    assert!(out.join("epoch_2/log.csv").exists());
    let (code, _, _) = thsg(&["train", "--config", p(&cfg), "--data", p(&data), "--out", p(&out), "--set", "bogus=1"]);
    assert_eq!(code, EXIT_CONFIG);
}

fn untrained_model(dir: &Path, input_dim: usize, classes: usize) -> std::path::PathBuf {
    let arch = Architecture { input_dim, feature_hidden: 32, embedding_dim: 16, gen_hidden: (8, 8), classes };
    let path = dir.join("m.thsg");
    checkpoint::save(&ModelBundle::init(arch, 11).unwrap(), &path).unwrap();
    path
}

#[test]
fn eval_prints_requested_recalls() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_data(dir.path(), "d.csv", 4, 10, 5);
    let model = untrained_model(dir.path(), 5, 4);
    let (code, out, err) = thsg(&["eval", "--model", p(&model), "--data", p(&data), "--ks", "1,2,4,8"]);
    assert_eq!(code, EXIT_OK, "{err}");
    let recalls: Vec<&str> = out.lines().filter(|l| l.starts_with("recall@")).collect();
    assert_eq!(recalls.len(), 4);
    for k in [1, 2, 4, 8] {
        assert!(out.contains(&format!("recall@{k}=")), "{out}");
    }
    assert!(out.contains("map=") && out.contains("nmi=") && out.contains("f1="));
}

#[test]
fn untrained_model_on_pure_noise_is_at_chance() {
    let dir = tempfile::tempdir().unwrap();
    // Zero centre scale: all classes share one distribution.
    let data = dir.path().join("noise.csv");
    let (code, _, err) = thsg(&[
        "gen-data",
        "--classes",
        "8",
        "--per-class",
        "50",
        "--dim",
        "16",
        "--center-scale",
        "0",
        "--noise-scale",
        "1",
        "--out",
        p(&data),
    ]);
    assert_eq!(code, EXIT_OK, "{err}");
    let model = untrained_model(dir.path(), 16, 8);
    let (code, out, err) = thsg(&["eval", "--model", p(&model), "--data", p(&data), "--ks", "1"]);
    assert_eq!(code, EXIT_OK, "{err}");
    let report: thsg::evaluation::MetricsReport = out.parse().unwrap();
    let r1 = report.recall_at(1).unwrap();
    assert!((r1 - 1.0 / 8.0).abs() <= 0.1, "R@1 = {r1}");
}

#[test]
fn width_mismatch_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_data(dir.path(), "d.csv", 4, 10, 5);
    let model = untrained_model(dir.path(), 7, 4);
    let (code, _, err) = thsg(&["eval", "--model", p(&model), "--data", p(&data)]);
    assert_eq!(code, EXIT_DATA);
    assert!(err.contains("7"), "{err}");
    let (code, _, _) = thsg(&["project", "--model", p(&model), "--data", p(&data), "--out", p(&dir.path().join("x"))]);
    assert_eq!(code, EXIT_DATA);
}

#[test]
fn corrupt_files_are_data_errors() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_data(dir.path(), "d.csv", 4, 10, 5);
    let model = dir.path().join("bad.thsg");
    fs::write(&model, b"THSG\x01").unwrap();
    let (code, _, _) = thsg(&["eval", "--model", p(&model), "--data", p(&data)]);
    assert_eq!(code, EXIT_DATA);
    let bad_csv = dir.path().join("bad.csv");
    fs::write(&bad_csv, "0,1.0,2.0\n1,oops,3.0\n").unwrap();
    let good_model = untrained_model(dir.path(), 2, 2);
    let (code, _, err) = thsg(&["eval", "--model", p(&good_model), "--data", p(&bad_csv)]);
    assert_eq!(code, EXIT_DATA);
    assert!(err.contains("line 2"), "{err}");
}

#[test]
fn projection_is_centred_with_ordered_variance() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_data(dir.path(), "d.csv", 4, 25, 6);
    let model = untrained_model(dir.path(), 6, 4);
    let out = dir.path().join("proj.csv");
    let (code, _, err) = thsg(&["project", "--model", p(&model), "--data", p(&data), "--out", p(&out)]);
    assert_eq!(code, EXIT_OK, "{err}");
    let text = fs::read_to_string(&out).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("label,x,y"));
    let rows: Vec<(f64, f64)> = lines
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[1].parse().unwrap(), f[2].parse().unwrap())
        })
        .collect();
    assert_eq!(rows.len(), 100);
    let n = rows.len() as f64;
    let (mx, my) = rows.iter().fold((0.0, 0.0), |(a, b), (x, y)| (a + x / n, b + y / n));
    assert!(mx.abs() < 1e-9 && my.abs() < 1e-9);
    let vx: f64 = rows.iter().map(|(x, _)| x * x).sum();
    let vy: f64 = rows.iter().map(|(_, y)| y * y).sum();
    assert!(vx >= vy);
}

#[test]
fn shipped_config_is_the_desk_preset() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.cfg");
    let cfg = TrainConfig::parse(&fs::read_to_string(path).unwrap()).unwrap();
    assert_eq!(cfg, TrainConfig::desk());
}
