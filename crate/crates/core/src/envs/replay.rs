//! Episode replay logs.
//!
//! A log is JSON lines: one [`ReplayHeader`] followed by one [`ReplayRecord`]
//! per step. Re-simulating the recorded actions from the header's seed must
//! reproduce every state and RNG digest.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::{make_env, Action, EnvConfig, Environment, Event};
use crate::error::{MagnetError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplayHeader {
    pub env: EnvConfig,
    pub seed: u64,
    pub initial_digest: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplayRecord {
    pub tick: u64,
    pub actions: Vec<Action>,
    pub rewards: Vec<f64>,
    pub events: Vec<Event>,
    pub state_digest: String,
    pub rng_digest: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Replay {
    pub header: ReplayHeader,
    pub records: Vec<ReplayRecord>,
}

/// Accumulates records while an episode runs.
#[derive(Debug)]
pub struct ReplayRecorder {
    replay: Replay,
}

impl ReplayRecorder {
    /// Call right after `env.reset(seed)`.
    pub fn start(env: &dyn Environment, seed: u64) -> Self {
        Self {
            replay: Replay {
                header: ReplayHeader {
                    env: env.config().clone(),
                    seed,
                    initial_digest: env.state_digest(),
                },
                records: Vec::new(),
            },
        }
    }

    /// Call after each `env.step(actions)`.
    pub fn record(&mut self, env: &dyn Environment, actions: &[Action], rewards: &[f64], events: &[Event]) {
        self.replay.records.push(ReplayRecord {
            tick: env.tick(),
            actions: actions.to_vec(),
            rewards: rewards.to_vec(),
            events: events.to_vec(),
            state_digest: env.state_digest(),
            rng_digest: env.rng_digest(),
        });
    }

    pub fn finish(self) -> Replay {
        self.replay
    }
}

impl Replay {
    pub fn write_jsonl(&self, mut w: impl Write) -> Result<()> {
        serde_json::to_writer(&mut w, &self.header)?;
        writeln!(w)?;
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn read_jsonl(r: impl BufRead) -> Result<Self> {
        let mut lines = r.lines();
        let first = lines
            .next()
            .ok_or_else(|| MagnetError::Schema("empty replay log".into()))??;
        let header: ReplayHeader = serde_json::from_str(&first)?;
        let mut records = Vec::new();
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            records.push(serde_json::from_str(&line)?);
        }
        Ok(Self { header, records })
    }

    /// Re-runs the episode and checks every digest, returning the number of
    /// verified steps. The first divergence is reported with its tick.
    pub fn verify(&self) -> Result<usize> {
        let mut env = make_env(&self.header.env)?;
        env.reset(self.header.seed)?;
        if env.state_digest() != self.header.initial_digest {
            return Err(MagnetError::Replay {
                tick: 0,
                detail: "initial state differs".into(),
            });
        }
        for rec in &self.records {
            let out = env.step(&rec.actions).map_err(|e| MagnetError::Replay {
                tick: rec.tick,
                detail: e.to_string(),
            })?;
            if env.tick() != rec.tick {
                return Err(MagnetError::Replay {
                    tick: rec.tick,
                    detail: format!("tick counter is {}", env.tick()),
                });
            }
            if env.state_digest() != rec.state_digest {
                return Err(MagnetError::Replay {
                    tick: rec.tick,
                    detail: "state digest differs".into(),
                });
            }
            if env.rng_digest() != rec.rng_digest {
                return Err(MagnetError::Replay {
                    tick: rec.tick,
                    detail: "rng digest differs".into(),
                });
            }
            if out.events != rec.events || out.rewards != rec.rewards {
                return Err(MagnetError::Replay {
                    tick: rec.tick,
                    detail: "events or rewards differ".into(),
                });
            }
        }
        Ok(self.records.len())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::RngStream;

    fn scripted_episode(cfg: EnvConfig, seed: u64, steps: usize) -> Replay {
        let mut env = make_env(&cfg).unwrap();
        env.reset(seed).unwrap();
        let mut rec = ReplayRecorder::start(env.as_ref(), seed);
        let mut rng = RngStream::new(seed, "replay-test");
        for _ in 0..steps {
            if env.is_done() {
                break;
            }
            let a = env.scripted_joint_action(&mut rng);
            let out = env.step(&a).unwrap();
            rec.record(env.as_ref(), &a, &out.rewards, &out.events);
        }
        rec.finish()
    }

    #[test]
    fn round_trip_and_verify() {
        for cfg in [EnvConfig::predator_prey(10), EnvConfig::bomber(9)] {
            let replay = scripted_episode(cfg, 11, 60);
            let mut buf = Vec::new();
            replay.write_jsonl(&mut buf).unwrap();
            let back = Replay::read_jsonl(buf.as_slice()).unwrap();
            assert_eq!(back, replay);
            assert_eq!(back.verify().unwrap(), replay.records.len());
        }
    }

    #[test]
    fn tampered_action_is_located() {
        let mut replay = scripted_episode(EnvConfig::predator_prey(10), 4, 30);
        let n = replay.records.len();
        assert!(n > 5);
        let target = 4;
        replay.records[target].actions[0] = Action::Continuous {
            direction: 1.0,
            speed: 1.0,
        };
        replay.records[target].actions[1] = Action::Continuous {
            direction: 4.0,
            speed: 1.0,
        };
        match replay.verify() {
            Err(MagnetError::Replay { tick, .. }) => assert!(tick as usize >= target + 1),
            other => panic!("expected divergence, got {other:?}"),
        }
    }
}
