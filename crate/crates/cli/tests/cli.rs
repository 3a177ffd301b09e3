use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SMALL: &str = "\
# small enough for a few seconds per run
policy.d_model = 16
policy.heads = 2
policy.d_ff = 16
policy.encoder_layers = 1
policy.decoder_layers = 1
surrogate.epochs = 5
surrogate.hidden = 8
surrogate.random_views = 1
downstream.trees = 10
pretrain.epochs = 2
pretrain.sequences = 4
pretrain.val_sequences = 2
ppo.iterations = 2
ppo.trajectories = 6
ppo.epochs = 1
";

fn featgen(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_featgen"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = featgen(args);
    assert!(
        out.status.success(),
        "featgen {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    dir: tempfile::TempDir,
    data: PathBuf,
    config: PathBuf,
}

fn fixture(rows: usize, features: usize) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data.csv");
    let (rows, features) = (rows.to_string(), features.to_string());
    ok(&["synth", "--kind", "product", "--rows", &rows, "--features", &features, "--seed", "3", "--out", s(&data)]);
    let config = dir.path().join("small.cfg");
    fs::write(&config, SMALL).unwrap();
    Fixture { dir, data, config }
}

fn run(f: &Fixture, name: &str, extra: &[&str]) -> (PathBuf, String) {
    let out = f.dir.path().join(name);
    let mut args = vec!["run", "--config", s(&f.config), "--data", s(&f.data), "--target", "y", "--seed", "1", "--out", s(&out)];
    args.extend_from_slice(extra);
    let stdout = ok(&args);
    (out, stdout)
}

fn csv_rows(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header = r.headers().unwrap().iter().map(String::from).collect();
    let rows = r.records().map(|rec| rec.unwrap().iter().map(String::from).collect()).collect();
    (header, rows)
}

#[test]
fn run_writes_a_complete_directory_and_transform_reproduces_it() {
    let f = fixture(300, 4);
    let (out, stdout) = run(&f, "run", &[]);
    assert!(stdout.contains("label=TSFG\n"), "{stdout}");
    for file in [
        "seed",
        "run_config.resolved",
        "split_assignment.csv",
        "pretrain.log",
        "ppo.log",
        "checkpoints/pretrain_best.ckpt",
        "checkpoints/policy_final.ckpt",
        "best_program.txt",
        "best_program.json",
        "augmented_train.csv",
        "augmented_val.csv",
        "augmented_test.csv",
        "base_report.txt",
        "augmented_report.txt",
        "run_report.txt",
    ] {
        assert!(out.join(file).exists(), "missing {file}");
    }
    assert_eq!(fs::read_to_string(out.join("seed")).unwrap().trim(), "1");
    let resolved = fs::read_to_string(out.join("run_config.resolved")).unwrap();
    assert!(resolved.contains("ppo.iterations = 2") && resolved.contains("policy.d_model = 16"));
    assert_eq!(fs::read_to_string(out.join("ppo.log")).unwrap().lines().count(), 2);
    let program = fs::read_to_string(out.join("best_program.txt")).unwrap();
    assert!(!program.trim().is_empty(), "seed 1 is expected to find a program");

    // Applying the saved program to the full input reproduces the train rows.
    let all = f.dir.path().join("all.csv");
    ok(&["transform", "--program", s(&out.join("best_program.txt")), "--data", s(&f.data), "--out", s(&all)]);
    let (header_all, rows_all) = csv_rows(&all);
    let (header_train, rows_train) = csv_rows(&out.join("augmented_train.csv"));
    assert_eq!(header_all, header_train);
    let (_, assignment) = csv_rows(&out.join("split_assignment.csv"));
    let train: Vec<Vec<String>> = assignment
        .iter()
        .filter(|a| a[1] == "train")
        .map(|a| rows_all[a[0].parse::<usize>().unwrap()].clone())
        .collect();
    assert_eq!(train, rows_train);
}

#[test]
fn same_seed_same_program_and_metrics() {
    let f = fixture(200, 4);
    let (a, _) = run(&f, "a", &[]);
    let (b, _) = run(&f, "b", &[]);
    for file in ["best_program.txt", "augmented_report.txt", "base_report.txt", "ppo.log"] {
        assert_eq!(fs::read(a.join(file)).unwrap(), fs::read(b.join(file)).unwrap(), "{file}");
    }
}

#[test]
fn ablations_are_labeled_and_skip_their_stage() {
    let f = fixture(200, 4);
    let (no_ppo, stdout) = run(&f, "no-ppo", &["--ablate", "no-ppo"]);
    assert!(stdout.contains("label=TSFG#\n"), "{stdout}");
    assert!(!no_ppo.join("ppo.log").exists());
    assert!(no_ppo.join("pretrain.log").exists());
    let (no_pre, stdout) = run(&f, "no-pretrain", &["--ablate", "no-pretrain"]);
    assert!(stdout.contains("label=TSFG+\n"), "{stdout}");
    assert!(!no_pre.join("pretrain.log").exists());
    assert!(no_pre.join("ppo.log").exists());
}

#[test]
fn set_flags_override_the_config_file() {
    let f = fixture(200, 4);
    let (out, _) = run(&f, "set", &["--set", "ppo.iterations=1", "--cap", "3"]);
    let resolved = fs::read_to_string(out.join("run_config.resolved")).unwrap();
    assert!(resolved.contains("ppo.iterations = 1"));
    assert!(resolved.contains("cap = 3"));
    let bad = featgen(&["run", "--data", s(&f.data), "--target", "y", "--seed", "1", "--set", "nope=1"]);
    assert!(!bad.status.success());
    assert!(String::from_utf8_lossy(&bad.stderr).contains("nope"));
}

#[test]
fn run_requires_a_seed() {
    let f = fixture(100, 3);
    let out = featgen(&["run", "--data", s(&f.data), "--target", "y"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("--seed"));
}

#[test]
fn empty_program_copies_the_input() {
    let f = fixture(100, 3);
    let program = f.dir.path().join("empty.txt");
    fs::write(&program, "").unwrap();
    let out = f.dir.path().join("out.csv");
    ok(&["transform", "--program", s(&program), "--data", s(&f.data), "--out", s(&out)]);
    assert_eq!(fs::read(&f.data).unwrap(), fs::read(&out).unwrap());
}

#[test]
fn out_of_range_feature_is_a_schema_error() {
    let f = fixture(100, 8);
    let program = f.dir.path().join("p.txt");
    fs::write(&program, "+V9\n").unwrap();
    let out = f.dir.path().join("out.csv");
    let res = featgen(&["transform", "--program", s(&program), "--data", s(&f.data), "--out", s(&out), "--target", "y"]);
    assert!(!res.status.success());
    let err = String::from_utf8_lossy(&res.stderr);
    assert!(err.contains("V9"), "{err}");
    assert!(!out.exists());
}

#[test]
fn evaluate_prints_metrics() {
    let f = fixture(200, 4);
    let stdout = ok(&["evaluate", "--data", s(&f.data), "--target", "y", "--seed", "2"]);
    assert!(stdout.contains("macro_f1="), "{stdout}");
    assert!(stdout.contains("importance."), "{stdout}");
}
