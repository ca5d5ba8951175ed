//! Experiment configuration in TOML with dotted `key=value` overrides.
//!
//! Resolution is layered: defaults, then the file, then overrides. Every key
//! is checked against the defaults, so typos and type mismatches are
//! reported with the offending dotted key.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use toml::Value;

use crate::actor::ActorConfig;
use crate::envs::EnvConfig;
use crate::error::{MagnetError, Result};
use crate::graph::{GgnConfig, GraphMode};
use crate::training::TrainConfig;

/// Network sizes and the three ablation switches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Self-attention core in the GGN (otherwise an MLP core).
    pub sa: bool,
    /// One team graph shared by all agents (otherwise one GGN per agent).
    pub gs: bool,
    /// Typed message passing as the decision module (otherwise an MLP).
    pub mg: bool,
    pub hidden: usize,
    pub mp_iterations: usize,
    pub init_hidden: Vec<usize>,
    pub message_hidden: Vec<usize>,
    pub choice_hidden: Vec<usize>,
    pub fallback_hidden: Vec<usize>,
    pub ggn_kernel: usize,
    pub ggn_filters: usize,
    pub ggn_token_width: usize,
    pub ggn_mlp_sizes: Vec<usize>,
    pub ggn_heads: usize,
    pub ggn_attention_ff: usize,
    pub ggn_head_hidden: usize,
    pub ggn_dropout: f64,
    /// Registered critic: `team` or `per-agent`.
    pub critic: String,
    pub critic_kernel: usize,
    pub critic_filters: usize,
    pub critic_hidden: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let g = GgnConfig::default();
        let a = ActorConfig::default();
        Self {
            sa: true,
            gs: true,
            mg: true,
            hidden: a.hidden,
            mp_iterations: a.mp_iterations,
            init_hidden: a.init_hidden,
            message_hidden: a.message_hidden,
            choice_hidden: a.choice_hidden,
            fallback_hidden: a.fallback_hidden,
            ggn_kernel: g.kernel,
            ggn_filters: g.filters,
            ggn_token_width: g.token_width,
            ggn_mlp_sizes: g.mlp_sizes,
            ggn_heads: g.heads,
            ggn_attention_ff: g.attention_ff,
            ggn_head_hidden: g.head_hidden,
            ggn_dropout: g.dropout,
            critic: "team".into(),
            critic_kernel: 3,
            critic_filters: 4,
            critic_hidden: vec![64, 64],
        }
    }
}

impl ModelConfig {
    pub fn ggn_config(&self) -> GgnConfig {
        GgnConfig {
            core: if self.sa { "self-attention" } else { "mlp" }.into(),
            kernel: self.ggn_kernel,
            filters: self.ggn_filters,
            token_width: self.ggn_token_width,
            mlp_sizes: self.ggn_mlp_sizes.clone(),
            heads: self.ggn_heads,
            attention_ff: self.ggn_attention_ff,
            head_hidden: self.ggn_head_hidden,
            dropout: self.ggn_dropout,
        }
    }

    pub fn actor_config(&self) -> ActorConfig {
        ActorConfig {
            decision: if self.mg { "message-passing" } else { "mlp" }.into(),
            hidden: self.hidden,
            mp_iterations: self.mp_iterations,
            init_hidden: self.init_hidden.clone(),
            message_hidden: self.message_hidden.clone(),
            choice_hidden: self.choice_hidden.clone(),
            fallback_hidden: self.fallback_hidden.clone(),
        }
    }

    pub fn graph_mode(&self) -> GraphMode {
        if self.gs {
            GraphMode::Shared
        } else {
            GraphMode::Individual
        }
    }

    /// `SA,GS,MG` flags as `+`/`-`, e.g. `++-`.
    pub fn flag_string(&self) -> String {
        [self.sa, self.gs, self.mg]
            .iter()
            .map(|f| if *f { '+' } else { '-' })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 {
            return Err(MagnetError::config("model.hidden", "must be positive"));
        }
        if self.ggn_heads == 0 || self.ggn_token_width % self.ggn_heads != 0 {
            return Err(MagnetError::config("model.ggn_heads", "must divide ggn_token_width"));
        }
        if !(0.0..1.0).contains(&self.ggn_dropout) {
            return Err(MagnetError::config("model.ggn_dropout", "must lie in [0, 1)"));
        }
        for (key, sizes) in [
            ("model.init_hidden", &self.init_hidden),
            ("model.message_hidden", &self.message_hidden),
            ("model.choice_hidden", &self.choice_hidden),
            ("model.fallback_hidden", &self.fallback_hidden),
            ("model.ggn_mlp_sizes", &self.ggn_mlp_sizes),
            ("model.critic_hidden", &self.critic_hidden),
        ] {
            if sizes.contains(&0) {
                return Err(MagnetError::config(key, "layer widths must be positive"));
            }
        }
        Ok(())
    }
}

/// Artefact cadence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoggingConfig {
    /// Episodes between checkpoints (0 = only at the end).
    pub ckpt_every: usize,
    /// Episodes between DOT dumps of the first graph (0 = never).
    pub graph_dump_every: usize,
    /// Record a replay log of the first training episode.
    pub record_replay: bool,
}

impl Default for LoggingConfig {
    fn default() -> Self {
        Self {
            ckpt_every: 1_000,
            graph_dump_every: 0,
            record_replay: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub env: EnvConfig,
    pub model: ModelConfig,
    pub training: TrainConfig,
    pub logging: LoggingConfig,
    pub seeds: Vec<u64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::for_env("predator-prey")
    }
}

impl ExperimentConfig {
    /// Defaults for an environment kind (desk-scale grid sizes).
    pub fn for_env(kind: &str) -> Self {
        let env = if kind == "bomber" {
            EnvConfig::bomber(9)
        } else {
            EnvConfig {
                kind: kind.to_string(),
                ..EnvConfig::predator_prey(16)
            }
        };
        Self {
            env,
            model: ModelConfig::default(),
            training: TrainConfig::default(),
            logging: LoggingConfig::default(),
            seeds: vec![0],
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.model.validate()?;
        self.training.validate()?;
        if self.seeds.is_empty() {
            return Err(MagnetError::config("seeds", "at least one seed is required"));
        }
        Ok(())
    }

    /// Canonical TOML text; `parse_str(&echo())` reproduces the config.
    pub fn echo(&self) -> String {
        toml::to_string(self).expect("config is serialisable")
    }

    /// SHA-256 of [`ExperimentConfig::echo`], hex encoded.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.echo().as_bytes()))
    }

    pub fn parse_str(text: &str) -> Result<Self> {
        parse_config_layers(text, &[])
    }

    pub fn load(path: &Path) -> Result<Self> {
        parse_config(Some(path), &[])
    }
}

/// Layered resolution: defaults < file < overrides (`a.b.c=value`).
pub fn parse_config(path: Option<&Path>, overrides: &[String]) -> Result<ExperimentConfig> {
    let text = match path {
        Some(p) => std::fs::read_to_string(p).map_err(|e| MagnetError::config("<file>", format!("{}: {e}", p.display())))?,
        None => String::new(),
    };
    parse_config_layers(&text, overrides)
}

pub fn parse_config_layers(text: &str, overrides: &[String]) -> Result<ExperimentConfig> {
    let mut user: Value = toml::from_str::<toml::Table>(text)
        .map(Value::Table)
        .map_err(|e| MagnetError::config("<file>", e.message().to_string()))?;
    for o in overrides {
        let (key, raw) = o
            .split_once('=')
            .ok_or_else(|| MagnetError::config(o.clone(), "override must look like key=value"))?;
        set_path(&mut user, key.trim(), parse_scalar(raw.trim()))?;
    }
    // the environment kind picks the defaults for the remaining env keys
    let kind = user
        .get("env")
        .and_then(|e| e.get("kind"))
        .and_then(Value::as_str)
        .unwrap_or("predator-prey")
        .to_string();
    let defaults = ExperimentConfig::for_env(&kind);
    let mut merged = Value::try_from(&defaults).expect("defaults are serialisable");
    merge(&mut merged, &user, "")?;
    let cfg: ExperimentConfig = merged
        .try_into()
        .map_err(|e: toml::de::Error| MagnetError::config("<config>", e.message().to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

fn parse_scalar(raw: &str) -> Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn set_path(root: &mut Value, key: &str, value: Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(MagnetError::config(key, "malformed dotted key"));
    }
    let mut cur = root;
    for p in &parts[..parts.len() - 1] {
        let table = cur
            .as_table_mut()
            .ok_or_else(|| MagnetError::config(key, "path crosses a non-table value"))?;
        cur = table
            .entry(p.to_string())
            .or_insert_with(|| Value::Table(Default::default()));
    }
    cur.as_table_mut()
        .ok_or_else(|| MagnetError::config(key, "path crosses a non-table value"))?
        .insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn type_name(v: &Value) -> &'static str {
    match v {
        Value::String(_) => "string",
        Value::Integer(_) => "integer",
        Value::Float(_) => "float",
        Value::Boolean(_) => "boolean",
        Value::Datetime(_) => "datetime",
        Value::Array(_) => "array",
        Value::Table(_) => "table",
    }
}

/// Overlays `user` onto `base`, rejecting keys absent from `base` and
/// values whose type differs (integers are accepted for floats).
fn merge(base: &mut Value, user: &Value, prefix: &str) -> Result<()> {
    let (Some(bt), Some(ut)) = (base.as_table_mut(), user.as_table()) else {
        return Err(MagnetError::config(prefix, "expected a table"));
    };
    for (k, uv) in ut {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        let bv = bt
            .get_mut(k)
            .ok_or_else(|| MagnetError::config(key.clone(), "unknown key"))?;
        match (&*bv, uv) {
            (Value::Table(_), Value::Table(_)) => merge(bv, uv, &key)?,
            (Value::Float(_), Value::Integer(i)) => *bv = Value::Float(*i as f64),
            (Value::Array(ba), Value::Array(ua)) => {
                if let (Some(b0), Some(u0)) = (ba.first(), ua.first()) {
                    if type_name(b0) != type_name(u0) {
                        return Err(MagnetError::config(
                            key,
                            format!("expected an array of {}, got {}", type_name(b0), type_name(u0)),
                        ));
                    }
                }
                *bv = uv.clone();
            }
            (b, u) if type_name(b) == type_name(u) => *bv = uv.clone(),
            (b, u) => {
                return Err(MagnetError::config(
                    key,
                    format!("type mismatch: expected {}, got {}", type_name(b), type_name(u)),
                ))
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c = ExperimentConfig::parse_str("").unwrap();
        assert_eq!(c, ExperimentConfig::default());
        assert_eq!(c.env.size, 16);
        assert_eq!(c.training.pretrain_episodes, 2_000);
    }

    #[test]
    fn override_sets_field() {
        let c = parse_config_layers("", &["model.mp_iterations=5".into(), "training.lambda=0".into()]).unwrap();
        assert_eq!(c.model.mp_iterations, 5);
        assert_eq!(c.training.lambda, 0.0);
        let c = parse_config_layers("", &["model.mp_iterations=2".into()]).unwrap();
        assert_eq!(c.model.mp_iterations, 2);
    }

    #[test]
    fn bad_gamma_rejected_with_key() {
        let e = parse_config_layers("", &["training.gamma=1.5".into()]).unwrap_err();
        assert!(e.to_string().contains("training.gamma"), "{e}");
    }

    #[test]
    fn unknown_key_and_type_mismatch_name_the_key() {
        let e = parse_config_layers("[model]\nmp_iteration = 3\n", &[]).unwrap_err();
        assert!(e.to_string().contains("model.mp_iteration"), "{e}");
        let e = parse_config_layers("", &["model.sa=\"yes\"".into()]).unwrap_err();
        assert!(e.to_string().contains("model.sa"), "{e}");
        let e = parse_config_layers("", &["nokey".into()]).unwrap_err();
        assert!(e.to_string().contains("nokey"), "{e}");
    }

    #[test]
    fn bomber_kind_picks_bomber_defaults() {
        let c = parse_config_layers("", &["env.kind=bomber".into()]).unwrap();
        assert_eq!(c.env.channels, 30);
        assert_eq!(c.env.size, 9);
    }

    #[test]
    fn echo_round_trip() {
        let mut c = ExperimentConfig::for_env("bomber");
        c.training.gamma = 0.9;
        c.training.actor_lr = 3.3e-4;
        c.model.sa = false;
        c.seeds = vec![1, 2, 3];
        let back = ExperimentConfig::parse_str(&c.echo()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.digest(), c.digest());
    }
}
