use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;

/// One row of the metrics CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub episode: usize,
    pub seed: u64,
    pub win: u8,
    #[serde(rename = "return")]
    pub ret: f64,
    pub steps: u64,
    pub loss_critic: f64,
    pub loss_actor: f64,
    pub loss_graph: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsLog {
    pub seed: u64,
    pub rows: Vec<EpisodeMetrics>,
}

impl MetricsLog {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, mut m: EpisodeMetrics) {
        m.seed = self.seed;
        self.rows.push(m);
    }

    pub fn win_rate(&self) -> f64 {
        if self.rows.is_empty() {
            return 0.0;
        }
        self.rows.iter().map(|r| r.win as f64).sum::<f64>() / self.rows.len() as f64
    }

    /// CSV with header `episode,seed,win,return,steps,loss_critic,loss_actor,loss_graph`.
    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for r in &self.rows {
            out.serialize(r)?;
        }
        if self.rows.is_empty() {
            out.write_record([
                "episode",
                "seed",
                "win",
                "return",
                "steps",
                "loss_critic",
                "loss_actor",
                "loss_graph",
            ])?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(String::from_utf8(buf).expect("csv output is utf-8"))
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }

    pub fn read_csv(path: &Path) -> Result<Vec<EpisodeMetrics>> {
        let mut rdr = csv::Reader::from_path(path)?;
        let mut rows = Vec::new();
        for r in rdr.deserialize() {
            rows.push(r?);
        }
        Ok(rows)
    }
}

/// Result of greedy evaluation episodes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub episodes: usize,
    pub wins: usize,
    pub mean_return: f64,
    pub mean_steps: f64,
}

impl EvalSummary {
    pub fn win_rate(&self) -> f64 {
        if self.episodes == 0 {
            0.0
        } else {
            self.wins as f64 / self.episodes as f64
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_header_and_rows() {
        let mut log = MetricsLog::new(7);
        assert!(log
            .to_csv_string()
            .unwrap()
            .starts_with("episode,seed,win,return,steps,loss_critic,loss_actor,loss_graph"));
        log.push(EpisodeMetrics {
            episode: 0,
            seed: 0,
            win: 1,
            ret: 0.5,
            steps: 12,
            loss_critic: 0.25,
            loss_actor: -1.0,
            loss_graph: 0.0,
        });
        let s = log.to_csv_string().unwrap();
        let lines: Vec<&str> = s.lines().collect();
        assert_eq!(lines[0], "episode,seed,win,return,steps,loss_critic,loss_actor,loss_graph");
        assert_eq!(lines[1], "0,7,1,0.5,12,0.25,-1.0,0.0");
    }
}
