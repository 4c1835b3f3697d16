use std::io::Write;

use serde::{Deserialize, Serialize};

pub const METRICS_COLUMNS: [&str; 17] = [
    "run_id",
    "mode",
    "env_name",
    "seed",
    "global_step",
    "episodic_return_mean",
    "episodic_return_count",
    "ppo_loss",
    "value_loss",
    "entropy",
    "l_dyn",
    "l_coh",
    "l_causal",
    "ice_mean",
    "utility_mean",
    "lr",
    "sps",
];

/// One row of the metrics CSV, written after every update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub run_id: String,
    pub mode: String,
    pub env_name: String,
    pub seed: u64,
    pub global_step: u64,
    pub episodic_return_mean: Option<f64>,
    pub episodic_return_count: usize,
    pub ppo_loss: Option<f64>,
    pub value_loss: Option<f64>,
    pub entropy: Option<f64>,
    pub l_dyn: Option<f64>,
    pub l_coh: Option<f64>,
    pub l_causal: Option<f64>,
    pub ice_mean: f64,
    pub utility_mean: f64,
    pub lr: f64,
    pub sps: f64,
}

/// Per-update averages over all minibatches.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossDiagnostics {
    pub ppo_policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
    pub l_dyn: Option<f64>,
    pub l_dyn_obs: Option<f64>,
    pub l_dyn_reward: Option<f64>,
    pub l_dyn_done: Option<f64>,
    pub l_coh: Option<f64>,
    pub l_causal: Option<f64>,
    pub ca_grad_norm: f64,
    pub ia_grad_norm: f64,
    pub ice_mean: f64,
    pub utility_mean: f64,
}

/// Append-only CSV sink with a fixed header.
pub struct MetricsWriter<W: Write> {
    inner: csv::Writer<W>,
}

impl<W: Write> MetricsWriter<W> {
    pub fn new(w: W) -> Self {
        Self { inner: csv::WriterBuilder::new().has_headers(true).from_writer(w) }
    }

    pub fn write(&mut self, r: &MetricsRecord) -> Result<(), csv::Error> {
        self.inner.serialize(r)?;
        self.inner.flush()?;
        Ok(())
    }
}

impl MetricsWriter<std::fs::File> {
    pub fn create(path: impl AsRef<std::path::Path>) -> Result<Self, csv::Error> {
        Ok(Self::new(std::fs::File::create(path)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_matches_columns_and_missing_values_are_empty() {
        let mut buf = Vec::new();
        {
            let mut w = MetricsWriter::new(&mut buf);
            w.write(&MetricsRecord {
                run_id: "r".into(),
                mode: "deploy".into(),
                env_name: "Empty8x8".into(),
                seed: 3,
                global_step: 2048,
                episodic_return_mean: None,
                episodic_return_count: 0,
                ppo_loss: Some(0.5),
                value_loss: None,
                entropy: None,
                l_dyn: None,
                l_coh: None,
                l_causal: None,
                ice_mean: 0.0,
                utility_mean: 0.0,
                lr: 2.5e-4,
                sps: 0.0,
            })
            .unwrap();
        }
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), METRICS_COLUMNS.join(","));
        assert_eq!(lines.next().unwrap(), "r,deploy,Empty8x8,3,2048,,0,0.5,,,,,,0.0,0.0,0.00025,0.0");
    }
}
