//! Plain-text parameter checkpoints.
//!
//! ```text
//! MAGNET-CKPT-1
//! <name> <ndims> <d0> <d1> ...
//! <row-major values separated by spaces>
//! ...
//! ```
//! Values use Rust's shortest round-trip float formatting, so a
//! save/load cycle is bit-exact.

use std::fmt::Write as _;
use std::path::Path;

use super::{ParamStore, Tensor};
use crate::error::{MagnetError, Result};

pub const CHECKPOINT_HEADER: &str = "MAGNET-CKPT-1";

pub fn to_checkpoint_string(store: &ParamStore) -> String {
    let mut out = String::new();
    out.push_str(CHECKPOINT_HEADER);
    out.push('\n');
    for (_, p) in store.iter() {
        let shape = p.value.shape();
        let _ = write!(out, "{} {}", p.name, shape.len());
        for d in shape {
            let _ = write!(out, " {d}");
        }
        out.push('\n');
        let vals: Vec<String> = p.value.data().iter().map(|v| format!("{v:?}")).collect();
        out.push_str(&vals.join(" "));
        out.push('\n');
    }
    out
}

/// Loads values by name into an existing store with the same layout.
pub fn load_checkpoint_str(store: &mut ParamStore, text: &str) -> Result<()> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == CHECKPOINT_HEADER => {}
        other => {
            return Err(MagnetError::Checkpoint(format!(
                "bad header {:?}, expected {CHECKPOINT_HEADER}",
                other.unwrap_or("")
            )))
        }
    }
    let mut seen = 0;
    while let Some(head) = lines.next() {
        if head.trim().is_empty() {
            continue;
        }
        let mut parts = head.split_whitespace();
        let name = parts.next().unwrap_or_default().to_string();
        let nd: usize = parse_num(parts.next(), &name)?;
        let shape: Vec<usize> = (0..nd)
            .map(|_| parse_num(parts.next(), &name))
            .collect::<Result<_>>()?;
        let body = lines
            .next()
            .ok_or_else(|| MagnetError::Checkpoint(format!("missing values for {name}")))?;
        let values: Vec<f64> = body
            .split_whitespace()
            .map(|s| parse_num(Some(s), &name))
            .collect::<Result<_>>()?;
        let id = store
            .lookup(&name)
            .ok_or_else(|| MagnetError::Checkpoint(format!("unknown parameter {name}")))?;
        if store.value(id).shape() != shape.as_slice() {
            return Err(MagnetError::Checkpoint(format!(
                "{name}: shape {shape:?} does not match {:?}",
                store.value(id).shape()
            )));
        }
        store.get_mut(id).value = Tensor::new(shape, values)
            .map_err(|e| MagnetError::Checkpoint(format!("{name}: {e}")))?;
        seen += 1;
    }
    if seen != store.len() {
        return Err(MagnetError::Checkpoint(format!(
            "checkpoint holds {seen} parameters, store has {}",
            store.len()
        )));
    }
    Ok(())
}

fn parse_num<T: std::str::FromStr>(s: Option<&str>, name: &str) -> Result<T> {
    s.and_then(|s| s.parse().ok())
        .ok_or_else(|| MagnetError::Checkpoint(format!("malformed entry for {name}")))
}

pub fn save_checkpoint(store: &ParamStore, path: &Path) -> Result<()> {
    std::fs::write(path, to_checkpoint_string(store))?;
    Ok(())
}

pub fn load_checkpoint(store: &mut ParamStore, path: &Path) -> Result<()> {
    let text = std::fs::read_to_string(path)?;
    load_checkpoint_str(store, &text)
}
