//! Rollout collection, advantage estimation, the PPO and information-agent
//! updates, and the run loop shared by every training mode.

mod batch;
mod gae;
pub mod losses;
mod metrics;
mod trainer;

use serde::{Deserialize, Serialize};

use crate::agents::AgentError;
use crate::gridworld::GridError;
use crate::tensor::{CheckpointError, TensorError};

pub use batch::RolloutBatch;
pub use gae::{compute_gae, utility, zscore};
pub use losses::Minibatch;
pub use metrics::{LossDiagnostics, MetricsRecord, MetricsWriter, METRICS_COLUMNS};
pub use trainer::{ca_checkpoint, ca_config_from_checkpoint, ia_checkpoint, ia_config_from_checkpoint, Trainer};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),
    #[error("missing checkpoint: {0}")]
    MissingCheckpoint(String),
    #[error("incompatible checkpoint: {0}")]
    IncompatibleCheckpoint(String),
    #[error("non-finite loss at update {update}: {detail}")]
    NonFiniteLoss { update: usize, detail: String },
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Tensor(TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("metrics output: {0}")]
    Metrics(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<TensorError> for TrainError {
    fn from(e: TensorError) -> Self {
        match e {
            TensorError::NonFiniteValue(detail) => TrainError::NonFiniteLoss { update: 0, detail },
            other => TrainError::Tensor(other),
        }
    }
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    pub num_envs: usize,
    pub rollout_len: usize,
    pub minibatches: usize,
    pub epochs: usize,
    pub total_steps: u64,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub clip_eps: f64,
    pub ent_coef: f64,
    pub vf_coef: f64,
    pub lambda_dyn: f64,
    pub lambda_coh: f64,
    pub lambda_causal: f64,
    pub alpha: f64,
    pub base_lr: f64,
    pub max_grad_norm: f64,
    pub anneal_lr: bool,
    /// Average the next-observation error over components (otherwise sum).
    pub obs_loss_mean: bool,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self::pretrain()
    }
}

impl HyperParams {
    pub fn pretrain() -> Self {
        Self {
            num_envs: 128,
            rollout_len: 128,
            minibatches: 8,
            epochs: 4,
            total_steps: 50_000_000,
            gamma: 0.99,
            gae_lambda: 0.95,
            clip_eps: 0.2,
            ent_coef: 0.02,
            vf_coef: 0.5,
            lambda_dyn: 0.5,
            lambda_coh: 0.05,
            lambda_causal: 0.1,
            alpha: 0.5,
            base_lr: 2.5e-4,
            max_grad_norm: 0.5,
            anneal_lr: true,
            obs_loss_mean: true,
        }
    }

    pub fn deploy() -> Self {
        Self { num_envs: 16, total_steps: 10_000_000, ..Self::pretrain() }
    }

    pub fn batch_size(&self) -> usize {
        self.num_envs * self.rollout_len
    }

    /// Number of rollout-plus-update iterations covering `total_steps`.
    pub fn num_updates(&self) -> usize {
        (self.total_steps / self.batch_size() as u64) as usize
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_envs", self.num_envs as f64),
            ("rollout_len", self.rollout_len as f64),
            ("minibatches", self.minibatches as f64),
            ("epochs", self.epochs as f64),
            ("total_steps", self.total_steps as f64),
            ("gamma", self.gamma),
            ("clip_eps", self.clip_eps),
            ("base_lr", self.base_lr),
            ("max_grad_norm", self.max_grad_norm),
        ];
        for (name, v) in positive {
            if !(v > 0.0) {
                return Err(TrainError::ConfigInvalid(format!("{name} must be positive, got {v}")));
            }
        }
        let nonneg = [
            ("gae_lambda", self.gae_lambda),
            ("ent_coef", self.ent_coef),
            ("vf_coef", self.vf_coef),
            ("lambda_dyn", self.lambda_dyn),
            ("lambda_coh", self.lambda_coh),
            ("lambda_causal", self.lambda_causal),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0) {
                return Err(TrainError::ConfigInvalid(format!("{name} must be non-negative, got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(TrainError::ConfigInvalid(format!("alpha must lie in [0, 1], got {}", self.alpha)));
        }
        if !self.batch_size().is_multiple_of(self.minibatches) {
            return Err(TrainError::ConfigInvalid(format!("num_envs * rollout_len = {} is not divisible by {} minibatches", self.batch_size(), self.minibatches)));
        }
        if self.num_updates() == 0 {
            return Err(TrainError::ConfigInvalid(format!("total_steps {} is below one rollout of {} steps", self.total_steps, self.batch_size())));
        }
        Ok(())
    }
}

/// Which agents exist and how the control signal is produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Information agent messages a control agent.
    Coral,
    /// Control agent alone with an all-zero message.
    Ppo,
    /// One network: information-agent trunk with policy heads on the message.
    WorldModel,
    /// Control agent fed uniform random messages.
    RandomMessage,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// Task distribution; both agents learn.
    Pretrain,
    /// Single task; information agent frozen, control agent learns.
    Deploy,
    /// Single task; everything frozen, evaluation only.
    Zeroshot,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub run_id: String,
    /// Value of the `mode` column in the metrics.
    pub label: String,
    pub method: Method,
    pub phase: Phase,
    /// Pretraining draws from all of these; other phases use the first.
    pub tasks: Vec<String>,
    pub seed: u64,
    pub hp: HyperParams,
    pub ia: crate::agents::IaConfig,
    pub ca_hidden_dim: usize,
    /// Keep the information agent's context across episode boundaries.
    pub persistent_context: bool,
    /// Write wall-clock steps per second; off keeps metrics reproducible.
    pub record_timing: bool,
    /// Environment steps to run in the evaluation-only phase.
    pub eval_steps: u64,
}

impl TrainConfig {
    pub fn new(method: Method, phase: Phase, tasks: Vec<String>, seed: u64) -> Self {
        let hp = if phase == Phase::Pretrain { HyperParams::pretrain() } else { HyperParams::deploy() };
        Self {
            run_id: format!("{method:?}-{phase:?}-{seed}").to_lowercase(),
            label: format!("{phase:?}").to_lowercase(),
            method,
            phase,
            tasks,
            seed,
            hp,
            ia: Default::default(),
            ca_hidden_dim: 128,
            persistent_context: false,
            record_timing: false,
            eval_steps: 1_000_000,
        }
    }
}
