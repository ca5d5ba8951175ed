use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use magnet_core::config::ExperimentConfig;
use magnet_core::run::RunManifest;

const TINY: &str = r#"seeds = [0, 1]

[env]
size = 8
episode_limit = 30
obstacles = 2

[model]
hidden = 8
init_hidden = [8]
message_hidden = [8]
choice_hidden = [8]
mp_iterations = 2
ggn_mlp_sizes = [16]
critic_hidden = [16]

[training]
pretrain_episodes = 2
episodes = 2
warmup = 16
batch_size = 8
eval_episodes = 2
"#;

struct Sandbox {
    dir: tempfile::TempDir,
}

impl Sandbox {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
        Self { dir }
    }

    fn path(&self) -> &Path {
        self.dir.path()
    }

    fn runs(&self) -> PathBuf {
        self.path().join("runs")
    }

    fn magnet(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_magnet"))
            .args(args)
            .current_dir(self.path())
            .env("MAGNET_RUN_DIR", self.runs())
            .env("RUST_LOG", "warn")
            .output()
            .unwrap()
    }
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn error_kind(o: &Output) -> String {
    let line = stderr(o).lines().last().unwrap_or_default().to_string();
    let v: serde_json::Value = serde_json::from_str(&line).unwrap_or_else(|_| panic!("not JSON: {line}"));
    assert!(v["error"].is_string());
    v["kind"].as_str().unwrap().to_string()
}

fn train_dirs(runs: &Path) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = fs::read_dir(runs)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap().to_string_lossy().starts_with("train-"))
        .collect();
    v.sort();
    v
}

#[test]
fn train_writes_a_complete_run_directory_and_a_verifiable_replay() {
    let sb = Sandbox::new();
    let out = sb.magnet(&["train", "--config", "tiny.toml"]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(stdout(&out).lines().filter(|l| l.starts_with("seed ")).count(), 2);
    let dirs = train_dirs(&sb.runs());
    assert_eq!(dirs.len(), 2, "one run directory per seed");
    for (seed, dir) in dirs.iter().enumerate() {
        let m = RunManifest::load(dir).unwrap();
        assert_eq!(m.command, "train");
        assert_eq!(m.seed, seed as u64);
        let name = dir.file_name().unwrap().to_string_lossy().into_owned();
        assert_eq!(name, m.run_id);
        assert!(name.ends_with(&format!("-s{seed}")));
        let cfg_text = fs::read_to_string(dir.join("config.toml")).unwrap();
        let cfg = ExperimentConfig::parse_str(&cfg_text).unwrap();
        assert_eq!(cfg.echo(), cfg_text, "config.toml is the canonical echo");
        assert_eq!(cfg.digest(), m.config_digest);
        assert!(name.contains(&m.config_digest[..12]));
        for f in ["metrics.csv", "checkpoint.txt", "pretrain_loss.csv", "replay.jsonl"] {
            assert!(dir.join(f).is_file(), "{name} lacks {f}");
        }
        let metrics = fs::read_to_string(dir.join("metrics.csv")).unwrap();
        assert_eq!(metrics.lines().count(), 3);
        assert!(m.outputs.values().all(|rel| dir.join(rel).exists()));
    }

    let replay = dirs[0].join("replay.jsonl");
    let out = sb.magnet(&["replay", replay.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).starts_with("replay ok: 30 steps verified"), "{}", stdout(&out));

    // a tampered log is a runtime failure
    let text = fs::read_to_string(&replay).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    let mut v: serde_json::Value = serde_json::from_str(&lines[3]).unwrap();
    let key = v
        .as_object()
        .unwrap()
        .keys()
        .find(|k| k.contains("digest"))
        .cloned()
        .expect("steps carry a digest");
    v[&key] = serde_json::Value::String("0".repeat(64));
    lines[3] = v.to_string();
    let bad = sb.path().join("bad.jsonl");
    fs::write(&bad, lines.join("\n") + "\n").unwrap();
    let out = sb.magnet(&["replay", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
    assert_eq!(error_kind(&out), "runtime");

    // the checkpoint drives eval and graph export
    let ckpt = dirs[0].join("checkpoint.txt");
    let out = sb.magnet(&["eval", "--config", "tiny.toml", "--checkpoint", ckpt.to_str().unwrap(), "--episodes", "2"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let dot = sb.path().join("g.dot");
    let out = sb.magnet(&[
        "export-graph",
        "--config",
        "tiny.toml",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--out",
        dot.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(fs::read_to_string(&dot).unwrap().starts_with("digraph"));
}

#[test]
fn eval_prints_the_seed_confidence_interval() {
    let sb = Sandbox::new();
    let out = sb.magnet(&["eval", "--config", "tiny.toml", "--seeds", "3", "--episodes", "2"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    let rates: Vec<f64> = text
        .lines()
        .filter(|l| l.starts_with("seed "))
        .map(|l| l.split_whitespace().nth(4).unwrap().parse().unwrap())
        .collect();
    assert_eq!(rates.len(), 3);
    let n = rates.len() as f64;
    let mean = rates.iter().sum::<f64>() / n;
    let sd = (rates.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let want = format!("win rate {mean:.4} ± {:.4} (95% CI, 3 seeds, 2 episodes each)", 1.96 * sd / n.sqrt());
    assert!(text.contains(&want), "{text}\nexpected: {want}");
}

#[test]
fn ablate_emits_eight_rows_in_grid_order() {
    let sb = Sandbox::new();
    let out = sb.magnet(&["ablate", "--config", "tiny.toml", "--seed-list", "0", "--episodes", "1"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let flags: Vec<String> = stdout(&out)
        .lines()
        .map(|l| l.split_whitespace().take(3).collect::<String>())
        .filter(|w| w.len() == 3 && w.chars().all(|c| c == '+' || c == '-'))
        .collect();
    assert_eq!(flags, ["+++", "++-", "+-+", "+--", "-++", "-+-", "--+", "---"]);
    let summary = fs::read_dir(sb.runs())
        .unwrap()
        .map(|e| e.unwrap().path())
        .map(|p| p.join("summary.csv"))
        .find(|p| p.is_file())
        .expect("ablation summary");
    let csv = fs::read_to_string(summary).unwrap();
    assert_eq!(csv.lines().count(), 9, "header plus eight rows");
}

#[test]
fn gradcheck_reports_every_case() {
    let sb = Sandbox::new();
    let out = sb.magnet(&["gradcheck", "--seeds", "1"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    assert!(!text.contains("FAIL"));
    for name in ["dense", "lstm-cell", "ggn-mlp", "actor-message-passing-continuous"] {
        assert!(text.contains(name), "{name} missing:\n{text}");
    }
}

#[test]
fn usage_errors_exit_with_one() {
    let sb = Sandbox::new();
    let out = sb.magnet(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(1));

    let out = sb.magnet(&["train", "--config", "tiny.toml", "--set", "training.gamma=1.5"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_kind(&out), "usage");
    assert!(stderr(&out).contains("training.gamma"));

    let out = sb.magnet(&["eval", "--set", "model.no_such_key=3"]);
    assert_eq!(out.status.code(), Some(1));

    let out = sb.magnet(&["eval", "--config", "missing.toml"]);
    assert_eq!(out.status.code(), Some(1));

    let out = sb.magnet(&["replay", "nowhere.jsonl"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_kind(&out), "usage");

    let out = sb.magnet(&["train", "--config", "tiny.toml", "--seeds", "0"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn runtime_errors_exit_with_two() {
    let sb = Sandbox::new();
    fs::write(sb.path().join("junk.txt"), "this is not a checkpoint").unwrap();
    let out = sb.magnet(&["eval", "--config", "tiny.toml", "--checkpoint", "junk.txt"]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
    assert_eq!(error_kind(&out), "runtime");
}

#[test]
fn help_and_version_succeed() {
    let sb = Sandbox::new();
    assert!(sb.magnet(&["--help"]).status.success());
    assert!(sb.magnet(&["--version"]).status.success());
}
