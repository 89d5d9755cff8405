//! metrics.csv writer.
//!
//! Header, for `n` agents:
//!
//! ```text
//! wall_time,episode,update_step,variant,seed,eval_mean_return,eval_std_return,
//! critic_loss_0,actor_loss_0,policy_entropy_0,om_kld_0,om_entropy_0,om_accuracy_0,
//! ... repeated for agents 1 .. n-1
//! ```
//!
//! One row follows the initial evaluation (update step 0) and one follows
//! every update. Reals are written in plain decimal notation with nine
//! significant digits. Values that do not exist for a row are written as
//! empty fields: evaluation columns between evaluations, losses on the
//! initial row, opponent-model columns for variants without models, KLD and
//! accuracy when the model width differs from the prey action count, and
//! wall time unless enabled in the config.

use std::fs::{File, OpenOptions};
use std::path::{Path, PathBuf};

use crate::config::AlgorithmVariant;
use crate::error::{Error, Result};

pub const AGENT_COLUMNS: [&str; 6] = ["critic_loss", "actor_loss", "policy_entropy", "om_kld", "om_entropy", "om_accuracy"];

pub fn header(n_agents: usize) -> Vec<String> {
    let mut h: Vec<String> = ["wall_time", "episode", "update_step", "variant", "seed", "eval_mean_return", "eval_std_return"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    for i in 0..n_agents {
        h.extend(AGENT_COLUMNS.iter().map(|c| format!("{c}_{i}")));
    }
    h
}

/// `x` in decimal notation with nine significant digits.
pub fn format_sig9(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return if x == 0.0 { "0".to_string() } else { x.to_string() };
    }
    let sci = format!("{x:.8e}");
    let exp: i32 = sci.rsplit('e').next().and_then(|e| e.parse().ok()).unwrap_or(0);
    let decimals = (8 - exp).max(0) as usize;
    format!("{x:.decimals$}")
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AgentMetrics {
    pub critic_loss: Option<f64>,
    pub actor_loss: Option<f64>,
    pub policy_entropy: Option<f64>,
    pub om_kld: Option<f64>,
    pub om_entropy: Option<f64>,
    pub om_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub wall_time: Option<f64>,
    pub episode: u64,
    pub update_step: u64,
    pub variant: AlgorithmVariant,
    pub seed: u64,
    pub eval_mean_return: Option<f64>,
    pub eval_std_return: Option<f64>,
    pub agents: Vec<AgentMetrics>,
}

fn opt(x: Option<f64>) -> String {
    x.map(format_sig9).unwrap_or_default()
}

impl MetricsRow {
    pub fn fields(&self) -> Vec<String> {
        let mut f = vec![
            opt(self.wall_time),
            self.episode.to_string(),
            self.update_step.to_string(),
            self.variant.name().to_string(),
            self.seed.to_string(),
            opt(self.eval_mean_return),
            opt(self.eval_std_return),
        ];
        for a in &self.agents {
            f.extend([a.critic_loss, a.actor_loss, a.policy_entropy, a.om_kld, a.om_entropy, a.om_accuracy].map(opt));
        }
        f
    }
}

pub struct MetricsWriter {
    path: PathBuf,
    n_agents: usize,
    inner: csv::Writer<File>,
}

impl MetricsWriter {
    /// Creates (or replaces) the file and writes the header.
    pub fn create(path: &Path, n_agents: usize) -> Result<Self> {
        let mut inner = csv::Writer::from_path(path)?;
        inner.write_record(header(n_agents))?;
        inner.flush()?;
        Ok(MetricsWriter { path: path.to_path_buf(), n_agents, inner })
    }

    /// Reopens an existing file, dropping rows past `update_step` so that a
    /// resumed run rewrites them.
    pub fn resume(path: &Path, n_agents: usize, update_step: u64) -> Result<Self> {
        let mut reader = csv::Reader::from_path(path)?;
        let expected = header(n_agents);
        let found: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
        if found != expected {
            return Err(Error::config(format!("{} does not have the expected header", path.display())));
        }
        let step_col = expected.iter().position(|c| c == "update_step").unwrap();
        let mut keep = Vec::new();
        for rec in reader.records() {
            let rec = rec?;
            let step: u64 = rec[step_col].parse().map_err(|_| Error::config(format!("bad update_step in {}", path.display())))?;
            if step <= update_step {
                keep.push(rec);
            }
        }
        let mut w = Self::create(path, n_agents)?;
        for rec in keep {
            w.inner.write_record(&rec)?;
        }
        w.inner.flush()?;
        drop(w);
        let file = OpenOptions::new().append(true).open(path)?;
        Ok(MetricsWriter { path: path.to_path_buf(), n_agents, inner: csv::Writer::from_writer(file) })
    }

    pub fn write(&mut self, row: &MetricsRow) -> Result<()> {
        if row.agents.len() != self.n_agents {
            return Err(Error::config(format!("row for {} agents written to a {}-agent log", row.agents.len(), self.n_agents)));
        }
        self.inner.write_record(row.fields())?;
        self.inner.flush()?;
        Ok(())
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sig9_examples() {
        assert_eq!(format_sig9(0.0), "0");
        assert_eq!(format_sig9(1.0), "1.00000000");
        assert_eq!(format_sig9(-0.012345678912), "-0.0123456789");
        assert_eq!(format_sig9(123456.789), "123456.789");
        assert_eq!(format_sig9(9.9999999999), "10.0000000");
        assert_eq!(format_sig9(1.5e10), "15000000000");
        assert_eq!(format_sig9(2.5e-7), "0.000000250000000");
    }

    fn row(step: u64, eval: Option<f64>) -> MetricsRow {
        MetricsRow {
            wall_time: None,
            episode: step * 10,
            update_step: step,
            variant: AlgorithmVariant::Maac,
            seed: 3,
            eval_mean_return: eval,
            eval_std_return: eval.map(|_| 0.5),
            agents: vec![AgentMetrics { critic_loss: Some(0.25), ..Default::default() }],
        }
    }

    #[test]
    fn header_and_empty_fields() {
        let h = header(2);
        assert_eq!(h.len(), 7 + 12);
        assert_eq!(h[7], "critic_loss_0");
        assert_eq!(h[18], "om_accuracy_1");
        let f = row(1, None).fields();
        assert_eq!(f, vec!["", "10", "1", "maac", "3", "", "", "0.250000000", "", "", "", "", ""]);
    }

    #[test]
    fn resume_truncates_later_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let mut w = MetricsWriter::create(&path, 1).unwrap();
        for s in 0..5 {
            w.write(&row(s, Some(-1.0))).unwrap();
        }
        drop(w);
        let mut w = MetricsWriter::resume(&path, 1, 2).unwrap();
        w.write(&row(3, None)).unwrap();
        drop(w);
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 5);
        assert!(lines[4].starts_with(",30,3,maac"));
        assert!(MetricsWriter::resume(&path, 2, 2).is_err());
    }
}
