use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const TINY: &str = "\
[data]
hw = 16
patch_size = 4
[backbone]
input_hw = 16
channels = 8,8,8,8
[policy]
conv_channels = 2,2,2
[train]
iterations = 2
eval_every = 1
val_pool = 4
[eval]
episodes = 100
";

fn rap(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rap"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn ok(out: Output) -> Output {
    assert!(out.status.success(), "exit {:?}: {}", out.status.code(), stderr(&out));
    out
}

fn tiny_config(dir: &Path) -> PathBuf {
    let path = dir.join("tiny.cfg");
    fs::write(&path, TINY).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn train_tiny(dir: &Path, name: &str, extra: &[&str]) -> PathBuf {
    let cfg = tiny_config(dir);
    let out = dir.join(name);
    let mut args = vec!["train", "--config", s(&cfg), "--out", s(&out)];
    args.extend_from_slice(extra);
    ok(rap(&args));
    out
}

#[test]
fn help_matches_golden_files() {
    let golden = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden");
    for cmd in ["", "train", "eval", "ablate", "make-synth", "inspect-attention"] {
        let mut args: Vec<&str> = if cmd.is_empty() { vec![] } else { vec![cmd] };
        args.push("--help");
        let text = stdout(&ok(rap(&args)));
        let name = if cmd.is_empty() { "rap" } else { cmd };
        let path = golden.join(format!("{name}.txt"));
        if std::env::var_os("UPDATE_GOLDEN").is_some() {
            fs::write(&path, &text).unwrap();
        }
        let expected = fs::read_to_string(&path).unwrap_or_else(|_| panic!("missing {}", path.display()));
        assert_eq!(text, expected, "help of `{name}` drifted from {}", path.display());
    }
}

#[test]
fn missing_config_file_exits_2_naming_the_path() {
    let dir = TempDir::new().unwrap();
    let missing = dir.path().join("nowhere.cfg");
    let out = rap(&["train", "--config", s(&missing), "--out", s(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("nowhere.cfg"), "{}", stderr(&out));
}

#[test]
fn unknown_key_exits_2_naming_the_key() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "[train]\nlearning_rate = 0.1\n").unwrap();
    let out = rap(&["train", "--config", s(&cfg), "--out", s(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("learning_rate"), "{}", stderr(&out));

    let cfg = tiny_config(dir.path());
    let out = rap(&[
        "train",
        "--config",
        s(&cfg),
        "--set",
        "policy.width=3",
        "--out",
        s(&dir.path().join("o")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("width"), "{}", stderr(&out));
}

#[test]
fn tiny_run_writes_metrics_and_checkpoints() {
    let dir = TempDir::new().unwrap();
    let out = train_tiny(dir.path(), "run", &[]);
    for f in ["metrics.jsonl", "best.rapc", "last.rapc", "config.txt"] {
        assert!(out.join(f).is_file(), "{f} missing");
    }
    let metrics = fs::read_to_string(out.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 2);
    let first: serde_json::Value = serde_json::from_str(metrics.lines().next().unwrap()).unwrap();
    assert_eq!(first["iteration"], 1);
    let echo = fs::read_to_string(out.join("config.txt")).unwrap();
    assert!(echo.contains("iterations = 2"));
    assert!(echo.contains("lr = 0.001"), "defaults merged into the echo");
}

#[test]
fn same_seed_gives_identical_checkpoints() {
    let dir = TempDir::new().unwrap();
    let a = train_tiny(dir.path(), "a", &["--seed", "7"]);
    let b = train_tiny(dir.path(), "b", &["--seed", "7"]);
    let c = train_tiny(dir.path(), "c", &["--seed", "8"]);
    let read = |p: &Path| fs::read(p.join("best.rapc")).unwrap();
    assert_eq!(read(&a), read(&b));
    assert_ne!(read(&a), read(&c));
    assert_eq!(
        fs::read(a.join("metrics.jsonl")).unwrap(),
        fs::read(b.join("metrics.jsonl")).unwrap()
    );
}

#[test]
fn divergence_exits_3_and_keeps_last_good() {
    let dir = TempDir::new().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("div");
    let res = rap(&[
        "train",
        "--config",
        s(&cfg),
        "--set",
        "train.divergence_threshold=1e-6",
        "--out",
        s(&out),
    ]);
    assert_eq!(res.status.code(), Some(3), "{}", stderr(&res));
    assert!(stderr(&res).contains("diverged"));
    assert!(out.join("last_good.rapc").is_file());
}

#[test]
fn make_synth_manifest_lists_25_classes() {
    let dir = TempDir::new().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("ds");
    ok(rap(&["make-synth", "--config", s(&cfg), "--classes", "25", "--out", s(&out)]));
    let manifest = fs::read_to_string(out.join("manifest.txt")).unwrap();
    assert!(manifest.lines().any(|l| l == "classes=25"));
    let mut ids: Vec<usize> = manifest
        .lines()
        .filter_map(|l| l.split_once('='))
        .filter(|(k, _)| ["split_train", "split_val", "split_test"].contains(k))
        .map(|(_, v)| v)
        .flat_map(|v| v.split(',').map(|x| x.parse::<usize>().unwrap()).collect::<Vec<_>>())
        .collect();
    ids.sort_unstable();
    assert_eq!(ids, (0..25).collect::<Vec<_>>());

    let run = dir.path().join("from_dir");
    ok(rap(&[
        "train",
        "--config",
        s(&cfg),
        "--set",
        "data.source=dir",
        "--set",
        &format!("data.path={}", s(&out)),
        "--out",
        s(&run),
    ]));
    assert!(run.join("best.rapc").is_file());
}

#[test]
fn eval_of_untrained_checkpoint_is_near_chance() {
    let dir = TempDir::new().unwrap();
    let fresh = train_tiny(dir.path(), "fresh", &["--set", "train.iterations=0"]);
    let ckpt = fresh.join("best.rapc");
    let before = fs::read(&ckpt).unwrap();
    let out = dir.path().join("eval");
    ok(rap(&["eval", "--checkpoint", s(&ckpt), "--out", s(&out)]));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("eval.json")).unwrap()).unwrap();
    let acc = report["mean"].as_f64().unwrap();
    assert!((0.15..=0.45).contains(&acc), "accuracy {acc}");
    assert_eq!(report["count"], 100);
    assert_eq!(fs::read(&ckpt).unwrap(), before, "eval must not touch its input");
}

#[test]
fn thread_cap_does_not_change_results() {
    let dir = TempDir::new().unwrap();
    let run = train_tiny(dir.path(), "run", &[]);
    let ckpt = run.join("best.rapc");
    let eval = |threads: &str| {
        let out = Command::new(env!("CARGO_BIN_EXE_rap"))
            .env("RAP_THREADS", threads)
            .args(["eval", "--checkpoint", s(&ckpt), "--episodes", "40"])
            .output()
            .unwrap();
        stdout(&ok(out))
    };
    assert_eq!(eval("1"), eval("2"));
}

#[test]
fn missing_checkpoint_exits_2() {
    let dir = TempDir::new().unwrap();
    let missing = dir.path().join("gone.rapc");
    for cmd in ["eval", "inspect-attention"] {
        let out = rap(&[cmd, "--checkpoint", s(&missing), "--out", s(&dir.path().join("o"))]);
        assert_eq!(out.status.code(), Some(2), "{cmd}");
        assert!(stderr(&out).contains("gone.rapc"));
    }
}

#[test]
fn ablate_2x2_grid_gives_4_rows() {
    let dir = TempDir::new().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("grid");
    ok(rap(&[
        "ablate",
        "--config",
        s(&cfg),
        "--set",
        "eval.episodes=20",
        "--steps",
        "1,2",
        "--alphas",
        "0,1e-4",
        "--out",
        s(&out),
    ]));
    let rows = fs::read_to_string(out.join("ablation.jsonl")).unwrap();
    assert_eq!(rows.lines().count(), 4);
    let table = fs::read_to_string(out.join("table.txt")).unwrap();
    assert_eq!(table.lines().count(), 5);

    let bad = rap(&["ablate", "--config", s(&cfg), "--attention", "sideways", "--out", s(&out)]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn inspect_attention_writes_matrices() {
    let dir = TempDir::new().unwrap();
    let run = train_tiny(dir.path(), "run", &[]);
    let out = dir.path().join("att");
    let res = ok(rap(&[
        "inspect-attention",
        "--checkpoint",
        s(&run.join("best.rapc")),
        "--images",
        "10",
        "--out",
        s(&out),
    ]));
    assert!(stdout(&res).contains("patch hit"));
    let text = fs::read_to_string(out.join("attention.txt")).unwrap();
    assert_eq!(text.lines().filter(|l| l.starts_with("image=")).count(), 10);
    assert_eq!(text.lines().filter(|l| l.starts_with("step=")).count(), 50);
    let overlay: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("overlay.json")).unwrap()).unwrap();
    assert_eq!(overlay["mean_hit"].as_array().unwrap().len(), 5);
}
