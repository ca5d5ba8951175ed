//! Run directories and experiment orchestration.
//!
//! Every (config, seed) pair gets its own directory under the run root
//! (`$MAGNET_RUN_DIR`, default `runs/`):
//!
//! ```text
//! <command>-<digest12>-s<seed>/
//!   config.toml      resolved configuration, echoed verbatim
//!   manifest.json    run id, config digest, code version, outputs, wall clock
//!   metrics.csv      one row per training episode
//!   checkpoint.txt   learnable parameters
//!   replay.jsonl     replay log of the first training episode
//!   graphs/*.dot     relevance graphs dumped during training
//!   incident.json    only when the run aborted
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::error::{MagnetError, Result};
use crate::graph::write_graph_dot;
use crate::training::{make_trainer, EpisodeMetrics, EvalSummary, MetricsLog, Trainer};

pub const RUN_DIR_ENV: &str = "MAGNET_RUN_DIR";

/// Output root: `$MAGNET_RUN_DIR` when set and non-empty, else `runs`.
pub fn run_root() -> PathBuf {
    match std::env::var_os(RUN_DIR_ENV) {
        Some(p) if !p.is_empty() => PathBuf::from(p),
        _ => PathBuf::from("runs"),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub command: String,
    pub seed: u64,
    /// SHA-256 of `config.toml`.
    pub config_digest: String,
    pub code_version: String,
    pub started_unix: u64,
    pub wall_clock_secs: f64,
    /// Output name → path relative to the run directory.
    pub outputs: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join("manifest.json"))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Structured record written when a run aborts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Incident {
    pub seed: u64,
    pub phase: String,
    pub episode: Option<usize>,
    pub error: String,
    pub checkpoint: String,
}

/// An open run directory; [`RunDir::finish`] writes the manifest.
#[derive(Debug)]
pub struct RunDir {
    pub path: PathBuf,
    pub manifest: RunManifest,
    started: Instant,
}

impl RunDir {
    pub fn create(root: &Path, command: &str, cfg: &ExperimentConfig, seed: u64) -> Result<Self> {
        let echo = cfg.echo();
        let digest = hex::encode(Sha256::digest(echo.as_bytes()));
        let run_id = format!("{command}-{}-s{seed}", &digest[..12]);
        let path = root.join(&run_id);
        fs::create_dir_all(&path)?;
        fs::write(path.join("config.toml"), &echo)?;
        let started_unix = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        let mut outputs = BTreeMap::new();
        outputs.insert("config".to_string(), "config.toml".to_string());
        Ok(Self {
            path,
            manifest: RunManifest {
                run_id,
                command: command.to_string(),
                seed,
                config_digest: digest,
                code_version: env!("CARGO_PKG_VERSION").to_string(),
                started_unix,
                wall_clock_secs: 0.0,
                outputs,
            },
            started: Instant::now(),
        })
    }

    /// Writes `contents` to `rel` and records it as output `name`.
    pub fn write(&mut self, name: &str, rel: &str, contents: &[u8]) -> Result<PathBuf> {
        let p = self.path.join(rel);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&p, contents)?;
        self.manifest.outputs.insert(name.to_string(), rel.to_string());
        Ok(p)
    }

    pub fn finish(mut self) -> Result<RunManifest> {
        self.manifest.wall_clock_secs = self.started.elapsed().as_secs_f64();
        let text = serde_json::to_string_pretty(&self.manifest)?;
        fs::write(self.path.join("manifest.json"), text)?;
        Ok(self.manifest)
    }
}

fn write_incident(run: &mut RunDir, trainer: &dyn Trainer, phase: &str, episode: Option<usize>, err: &MagnetError) {
    let ckpt = "incident-checkpoint.txt";
    let incident = Incident {
        seed: run.manifest.seed,
        phase: phase.to_string(),
        episode,
        error: err.to_string(),
        checkpoint: ckpt.to_string(),
    };
    let _ = run.write("incident_checkpoint", ckpt, trainer.checkpoint().as_bytes());
    if let Ok(text) = serde_json::to_string_pretty(&incident) {
        let _ = run.write("incident", "incident.json", text.as_bytes());
    }
}

fn dump_graphs(run: &mut RunDir, trainer: &dyn Trainer, tag: &str) -> Result<()> {
    for (i, g) in trainer.latest_graphs().iter().enumerate() {
        let rel = format!("graphs/{tag}-g{i}.dot");
        let p = run.path.join(&rel);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent)?;
        }
        write_graph_dot(g, &p)?;
        run.manifest.outputs.insert(format!("graph_{tag}_{i}"), rel);
    }
    Ok(())
}

/// Outcome of one seed of `train`.
#[derive(Debug)]
pub struct SeedRun {
    pub manifest: RunManifest,
    pub dir: PathBuf,
    pub log: MetricsLog,
    pub pretrain_trace: Vec<f64>,
}

/// Pre-training plus `episodes` training episodes for one seed, with all
/// artefacts written to a fresh run directory. On failure an incident
/// record and a checkpoint are written before the error is returned.
pub fn train_seed(
    cfg: &ExperimentConfig,
    seed: u64,
    root: &Path,
    command: &str,
    on_episode: &mut dyn FnMut(&EpisodeMetrics),
) -> Result<SeedRun> {
    let mut run = RunDir::create(root, command, cfg, seed)?;
    let mut trainer = make_trainer(cfg, seed)?;
    let tc = &cfg.training;
    let lc = &cfg.logging;

    let pretrain_trace = match trainer.pretrain(tc.pretrain_episodes) {
        Ok(t) => t,
        Err(e) => {
            write_incident(&mut run, trainer.as_ref(), "pretrain", None, &e);
            run.finish()?;
            return Err(e);
        }
    };
    if !pretrain_trace.is_empty() {
        run.write("pretrain_loss", "pretrain_loss.csv", loss_trace_csv(&pretrain_trace).as_bytes())?;
    }

    let mut log = MetricsLog::new(seed);
    for e in 0..tc.episodes {
        if e == 0 && lc.record_replay {
            trainer.record_next_episode();
        }
        let m = match trainer.train_episode(e) {
            Ok(m) => m,
            Err(err) => {
                write_incident(&mut run, trainer.as_ref(), "train", Some(e), &err);
                run.write("metrics", "metrics.csv", log.to_csv_string()?.as_bytes())?;
                run.finish()?;
                return Err(err);
            }
        };
        on_episode(&m);
        log.push(m);
        if let Some(replay) = trainer.take_replay() {
            let mut buf = Vec::new();
            replay.write_jsonl(&mut buf)?;
            run.write("replay", "replay.jsonl", &buf)?;
        }
        if lc.graph_dump_every > 0 && e % lc.graph_dump_every == 0 {
            dump_graphs(&mut run, trainer.as_ref(), &format!("ep{e}"))?;
        }
        if lc.ckpt_every > 0 && (e + 1) % lc.ckpt_every == 0 {
            run.write("checkpoint", "checkpoint.txt", trainer.checkpoint().as_bytes())?;
        }
    }
    run.write("metrics", "metrics.csv", log.to_csv_string()?.as_bytes())?;
    run.write("checkpoint", "checkpoint.txt", trainer.checkpoint().as_bytes())?;
    dump_graphs(&mut run, trainer.as_ref(), "final")?;
    let dir = run.path.clone();
    let manifest = run.finish()?;
    Ok(SeedRun {
        manifest,
        dir,
        log,
        pretrain_trace,
    })
}

fn loss_trace_csv(trace: &[f64]) -> String {
    let mut s = String::from("episode,loss\n");
    for (i, l) in trace.iter().enumerate() {
        s.push_str(&format!("{i},{l}\n"));
    }
    s
}

/// Graph pre-training only, writing the loss trace, a checkpoint and the
/// final graphs.
pub fn pretrain_seed(cfg: &ExperimentConfig, seed: u64, root: &Path) -> Result<SeedRun> {
    let mut run = RunDir::create(root, "pretrain", cfg, seed)?;
    let mut trainer = make_trainer(cfg, seed)?;
    let trace = match trainer.pretrain(cfg.training.pretrain_episodes) {
        Ok(t) => t,
        Err(e) => {
            write_incident(&mut run, trainer.as_ref(), "pretrain", None, &e);
            run.finish()?;
            return Err(e);
        }
    };
    run.write("pretrain_loss", "pretrain_loss.csv", loss_trace_csv(&trace).as_bytes())?;
    run.write("metrics", "metrics.csv", MetricsLog::new(seed).to_csv_string()?.as_bytes())?;
    run.write("checkpoint", "checkpoint.txt", trainer.checkpoint().as_bytes())?;
    dump_graphs(&mut run, trainer.as_ref(), "final")?;
    let dir = run.path.clone();
    let manifest = run.finish()?;
    Ok(SeedRun {
        manifest,
        dir,
        log: MetricsLog::new(seed),
        pretrain_trace: trace,
    })
}

/// Greedy evaluation of a fresh (or checkpoint-restored) learner, one
/// summary per seed.
pub fn evaluate_seeds(
    cfg: &ExperimentConfig,
    seeds: &[u64],
    episodes: usize,
    checkpoint: Option<&str>,
) -> Result<Vec<EvalSummary>> {
    seeds
        .iter()
        .map(|&s| {
            let mut t = make_trainer(cfg, s)?;
            if let Some(c) = checkpoint {
                t.load_checkpoint(c)?;
            }
            t.evaluate(episodes, s)
        })
        .collect()
}

/// Mean and 95% half-width `1.96·sd/√n` (sample standard deviation);
/// the half-width is zero for fewer than two values.
pub fn mean_ci95(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, 1.96 * var.sqrt() / (n as f64).sqrt())
}

/// The eight `(SA, GS, MG)` flag combinations in table order:
/// `+++, ++-, +-+, +--, -++, -+-, --+, ---`.
pub fn ablation_grid() -> [(bool, bool, bool); 8] {
    let mut g = [(false, false, false); 8];
    for (i, slot) in g.iter_mut().enumerate() {
        *slot = (i & 4 == 0, i & 2 == 0, i & 1 == 0);
    }
    g
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub flags: String,
    pub sa: bool,
    pub gs: bool,
    pub mg: bool,
    pub seeds: usize,
    pub episodes: usize,
    /// Mean win rate over seeds and its 95% half-width.
    pub win_rate: f64,
    pub win_ci: f64,
    pub mean_return: f64,
}

/// Trains every flag combination for `episodes` episodes per seed and
/// aggregates the per-seed win rates (evaluation win rate when
/// `eval_episodes > 0`, else the training win rate) like [`mean_ci95`].
pub fn run_ablation(
    cfg: &ExperimentConfig,
    seeds: &[u64],
    episodes: usize,
    eval_episodes: usize,
    root: Option<&Path>,
    progress: &mut dyn FnMut(&str),
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(8);
    for (sa, gs, mg) in ablation_grid() {
        let mut c = cfg.clone();
        c.model.sa = sa;
        c.model.gs = gs;
        c.model.mg = mg;
        c.training.episodes = episodes;
        let flags = c.model.flag_string();
        let mut wins = Vec::new();
        let mut rets = Vec::new();
        for &s in seeds {
            let (win, ret) = match root {
                Some(root) => {
                    let run = train_seed(&c, s, root, "ablate", &mut |_| {})?;
                    summarise(&c, s, eval_episodes, &run.log, Some(&run.dir))?
                }
                None => {
                    let mut t = make_trainer(&c, s)?;
                    let log = crate::training::train(t.as_mut(), c.training.pretrain_episodes, episodes, s)?;
                    if eval_episodes > 0 {
                        let e = t.evaluate(eval_episodes, s)?;
                        (e.win_rate(), e.mean_return)
                    } else {
                        (log.win_rate(), mean_return(&log))
                    }
                }
            };
            progress(&format!("{flags} seed {s}: win {win:.3} return {ret:.3}"));
            wins.push(win);
            rets.push(ret);
        }
        let (win_rate, win_ci) = mean_ci95(&wins);
        rows.push(AblationRow {
            flags,
            sa,
            gs,
            mg,
            seeds: seeds.len(),
            episodes,
            win_rate,
            win_ci,
            mean_return: rets.iter().sum::<f64>() / rets.len().max(1) as f64,
        });
    }
    Ok(rows)
}

fn mean_return(log: &MetricsLog) -> f64 {
    if log.rows.is_empty() {
        0.0
    } else {
        log.rows.iter().map(|r| r.ret).sum::<f64>() / log.rows.len() as f64
    }
}

fn summarise(
    cfg: &ExperimentConfig,
    seed: u64,
    eval_episodes: usize,
    log: &MetricsLog,
    dir: Option<&Path>,
) -> Result<(f64, f64)> {
    if eval_episodes == 0 {
        return Ok((log.win_rate(), mean_return(log)));
    }
    let mut t = make_trainer(cfg, seed)?;
    if let Some(d) = dir {
        t.load_checkpoint(&fs::read_to_string(d.join("checkpoint.txt"))?)?;
    }
    let e = t.evaluate(eval_episodes, seed)?;
    Ok((e.win_rate(), e.mean_return))
}

/// Fixed-width text table of an ablation sweep.
pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut s = String::from("SA GS MG | win rate        | return   | seeds | episodes\n");
    for r in rows {
        let f = |b: bool| if b { '+' } else { '-' };
        s.push_str(&format!(
            "{}  {}  {}  | {:>5.1}% ± {:>5.1}% | {:>8.3} | {:>5} | {:>8}\n",
            f(r.sa),
            f(r.gs),
            f(r.mg),
            100.0 * r.win_rate,
            100.0 * r.win_ci,
            r.mean_return,
            r.seeds,
            r.episodes
        ));
    }
    s
}

/// Writes the sweep summary as CSV.
pub fn write_ablation_csv(rows: &[AblationRow], path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
