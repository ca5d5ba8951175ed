use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use magnet_core::config::{parse_config, ExperimentConfig};
use magnet_core::diagnostics::{gradcheck_suite, GRADCHECK_EPS, GRADCHECK_TOL};
use magnet_core::envs::replay::Replay;
use magnet_core::graph::export_graph_dot;
use magnet_core::run::{
    ablation_table, evaluate_seeds, mean_ci95, pretrain_seed, run_ablation, run_root, train_seed,
    write_ablation_csv,
};
use magnet_core::training::make_trainer;

const EXIT_USAGE: u8 = 1;
const EXIT_RUNTIME: u8 = 2;

#[derive(Parser)]
#[command(name = "magnet", version, about = "Relevance-graph multi-agent learner and experiment harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// TOML experiment config; defaults apply to every key it omits.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted override, e.g. `--set model.mp_iterations=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Use seeds 0..N instead of the configured list.
    #[arg(long, conflicts_with = "seed_list")]
    seeds: Option<u64>,
    /// Explicit comma-separated seeds.
    #[arg(long, value_delimiter = ',')]
    seed_list: Option<Vec<u64>>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = parse_config(self.config.as_deref(), &self.overrides)?;
        if let Some(n) = self.seeds {
            if n == 0 {
                bail!(Usage("--seeds must be at least 1".into()));
            }
            cfg.seeds = (0..n).collect();
        }
        if let Some(list) = &self.seed_list {
            cfg.seeds = list.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Graph pre-training followed by training, one run directory per seed.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Training episodes (overrides training.episodes).
        #[arg(long)]
        episodes: Option<usize>,
        /// Pre-training episodes (overrides training.pretrain_episodes).
        #[arg(long)]
        pretrain_episodes: Option<usize>,
    },
    /// Greedy episodes against the scripted opponents; prints the win rate
    /// with a 95% confidence interval over seeds.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        episodes: Option<usize>,
        /// Parameters written by `train`; a fresh learner otherwise.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Sweeps the eight (SA, GS, MG) flag combinations.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        episodes: Option<usize>,
        /// Greedy evaluation episodes per seed; 0 reports the training win rate.
        #[arg(long, default_value_t = 0)]
        eval_episodes: usize,
    },
    /// Graph pre-training only.
    Pretrain {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Re-simulates a replay log and verifies every digest.
    Replay { log: PathBuf },
    /// Plays one greedy episode and writes the final relevance graph as DOT.
    ExportGraph {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference gradient checks of every layer, the GGN and the actor.
    Gradcheck {
        #[arg(long, default_value_t = 10)]
        seeds: u64,
    },
}

/// A failure that is the caller's fault rather than the run's.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return if usage { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let usage = e.downcast_ref::<Usage>().is_some()
                || matches!(
                    e.downcast_ref::<magnet_core::MagnetError>(),
                    Some(magnet_core::MagnetError::Config { .. })
                );
            let report = serde_json::json!({
                "error": format!("{e:#}"),
                "kind": if usage { "usage" } else { "runtime" },
            });
            eprintln!("{report}");
            ExitCode::from(if usage { EXIT_USAGE } else { EXIT_RUNTIME })
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Train {
            cfg,
            episodes,
            pretrain_episodes,
        } => {
            let mut cfg = cfg.load()?;
            if let Some(e) = episodes {
                cfg.training.episodes = e;
            }
            if let Some(p) = pretrain_episodes {
                cfg.training.pretrain_episodes = p;
            }
            let root = run_root();
            for &seed in &cfg.seeds {
                let run = train_seed(&cfg, seed, &root, "train", &mut |m| {
                    log::info!(
                        "seed {} episode {}: win {} return {:.3} steps {} critic {:.4} actor {:.4} graph {:.4}",
                        m.seed,
                        m.episode,
                        m.win,
                        m.ret,
                        m.steps,
                        m.loss_critic,
                        m.loss_actor,
                        m.loss_graph
                    )
                })
                .with_context(|| format!("training seed {seed}"))?;
                println!(
                    "seed {seed}: {} episodes, win rate {:.3}, run {}",
                    run.log.rows.len(),
                    run.log.win_rate(),
                    run.dir.display()
                );
            }
        }
        Command::Eval {
            cfg,
            episodes,
            checkpoint,
        } => {
            let cfg = cfg.load()?;
            let episodes = episodes.unwrap_or(cfg.training.eval_episodes);
            let ckpt = checkpoint
                .map(|p| fs::read_to_string(&p).with_context(|| format!("reading {}", p.display())))
                .transpose()?;
            let results = evaluate_seeds(&cfg, &cfg.seeds, episodes, ckpt.as_deref())?;
            let rates: Vec<f64> = results.iter().map(|r| r.win_rate()).collect();
            for (seed, r) in cfg.seeds.iter().zip(&results) {
                println!(
                    "seed {seed}: win rate {:.4} ({}/{}) mean return {:.3}",
                    r.win_rate(),
                    r.wins,
                    r.episodes,
                    r.mean_return
                );
            }
            let (mean, ci) = mean_ci95(&rates);
            println!("win rate {mean:.4} ± {ci:.4} (95% CI, {} seeds, {episodes} episodes each)", rates.len());
        }
        Command::Ablate {
            cfg,
            episodes,
            eval_episodes,
        } => {
            let cfg = cfg.load()?;
            let episodes = episodes.unwrap_or(cfg.training.episodes);
            let root = run_root();
            let rows = run_ablation(&cfg, &cfg.seeds, episodes, eval_episodes, Some(&root), &mut |msg| {
                log::info!("{msg}")
            })?;
            let summary = root.join(format!("ablate-{}", &cfg.digest()[..12])).join("summary.csv");
            write_ablation_csv(&rows, &summary)?;
            print!("{}", ablation_table(&rows));
            println!("summary written to {}", summary.display());
        }
        Command::Pretrain { cfg, episodes } => {
            let mut cfg = cfg.load()?;
            if let Some(e) = episodes {
                cfg.training.pretrain_episodes = e;
            }
            let root = run_root();
            for &seed in &cfg.seeds {
                let run = pretrain_seed(&cfg, seed, &root).with_context(|| format!("pre-training seed {seed}"))?;
                let first = run.pretrain_trace.first().copied().unwrap_or(f64::NAN);
                let last = run.pretrain_trace.last().copied().unwrap_or(f64::NAN);
                println!(
                    "seed {seed}: {} episodes, graph loss {first:.5} -> {last:.5}, run {}",
                    run.pretrain_trace.len(),
                    run.dir.display()
                );
            }
        }
        Command::Replay { log } => {
            let file = fs::File::open(&log).map_err(|e| Usage(format!("{}: {e}", log.display())))?;
            let replay = Replay::read_jsonl(std::io::BufReader::new(file))?;
            let steps = replay.verify()?;
            println!("replay ok: {steps} steps verified");
        }
        Command::ExportGraph { cfg, checkpoint, out } => {
            let cfg = cfg.load()?;
            let seed = cfg.seeds[0];
            let mut trainer = make_trainer(&cfg, seed)?;
            if let Some(p) = checkpoint {
                let text = fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
                trainer.load_checkpoint(&text)?;
            }
            trainer.evaluate(1, seed)?;
            let graphs = trainer.latest_graphs();
            let Some(graph) = graphs.first() else {
                bail!("trainer `{}` produces no relevance graph", trainer.name());
            };
            let dot = export_graph_dot(graph);
            match out {
                Some(p) => fs::write(&p, dot).with_context(|| format!("writing {}", p.display()))?,
                None => print!("{dot}"),
            }
        }
        Command::Gradcheck { seeds } => {
            let seeds: Vec<u64> = (0..seeds).collect();
            let cases = gradcheck_suite(&seeds)?;
            let mut worst: std::collections::BTreeMap<&str, f64> = Default::default();
            for c in &cases {
                let w = worst.entry(c.name.as_str()).or_insert(0.0);
                *w = w.max(c.max_rel_err);
            }
            println!("max relative error over {} seeds (eps {GRADCHECK_EPS:e}, tolerance {GRADCHECK_TOL:e})", seeds.len());
            for (name, err) in &worst {
                let status = if *err < GRADCHECK_TOL { "ok" } else { "FAIL" };
                println!("{status:>4}  {name:<36} {err:.3e}");
            }
            let failed = cases.iter().filter(|c| !c.passed()).count();
            if failed > 0 {
                bail!("{failed} gradient checks exceeded the tolerance");
            }
        }
    }
    Ok(())
}
