use crate::agents::ice;
use crate::tensor::Scalar;

use super::gae::{compute_gae, utility};
use super::losses::Minibatch;
use super::HyperParams;

/// Everything recorded over one rollout of `steps` steps in `n_envs`
/// environments. Per-step arrays are step-major: `index = t * n_envs + env`.
#[derive(Debug, Clone, Default)]
pub struct RolloutBatch {
    pub n_envs: usize,
    pub steps: usize,
    pub obs_dim: usize,
    pub message_dim: usize,
    pub action_dim: usize,
    pub context_len: usize,
    pub hidden_dim: usize,

    pub obs: Vec<f32>,
    pub windows: Vec<f32>,
    pub valid: Vec<f32>,
    pub hidden: Vec<f32>,
    pub messages: Vec<f32>,
    pub next_messages: Vec<f32>,
    pub logp_msg: Vec<f32>,
    pub logp_zero: Vec<f32>,
    pub actions: Vec<usize>,
    pub log_probs: Vec<f32>,
    pub values: Vec<f32>,
    pub values_zero: Vec<f32>,
    pub rewards: Vec<f32>,
    /// Reward plus the discounted value of the final observation for
    /// episodes cut by the step cap.
    pub gae_rewards: Vec<f32>,
    /// Episode ended after this step for any reason.
    pub dones: Vec<bool>,
    /// Episode ended in a terminal state (not by the step cap).
    pub terminals: Vec<bool>,
    /// Observation produced by the step, before any automatic reset.
    pub next_obs: Vec<f32>,
    pub bootstrap_values: Vec<f32>,

    pub advantages: Vec<f32>,
    pub returns: Vec<f32>,
    pub dv: Vec<f32>,
    pub ice: Vec<f32>,
    pub utility: Vec<f32>,

    /// Returns of episodes that finished during the rollout.
    pub episode_returns: Vec<f32>,
}

impl RolloutBatch {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    /// Fills advantages, returns, value gaps, ICE and utility.
    pub fn finalize(&mut self, hp: &HyperParams) {
        let (adv, ret) = compute_gae(&self.gae_rewards, &self.values, &self.dones, &self.bootstrap_values, self.n_envs, hp.gamma as f32, hp.gae_lambda as f32);
        self.advantages = adv;
        self.returns = ret;
        self.dv = self.values.iter().zip(&self.values_zero).map(|(v, z)| v - z).collect();
        let a = self.action_dim;
        self.ice = (0..self.len()).map(|i| ice(&self.logp_zero[i * a..(i + 1) * a], &self.logp_msg[i * a..(i + 1) * a])).collect();
        self.utility = utility(&self.dv, &self.advantages, hp.alpha as f32);
    }

    pub fn ice_mean(&self) -> f64 {
        mean(&self.ice)
    }

    pub fn utility_mean(&self) -> f64 {
        mean(&self.utility)
    }

    /// Gathers rows `idx` into a minibatch of scalar type `T`.
    pub fn minibatch<T: Scalar>(&self, idx: &[usize]) -> Minibatch<T> {
        fn rows<T: Scalar>(src: &[f32], idx: &[usize], width: usize) -> Vec<T> {
            if src.is_empty() {
                return Vec::new();
            }
            let mut out = Vec::with_capacity(idx.len() * width);
            for &i in idx {
                out.extend(src[i * width..(i + 1) * width].iter().map(|&x| T::of(x as f64)));
            }
            out
        }
        let flag = |xs: &[bool], on: f64, off: f64| idx.iter().map(|&i| T::of(if xs[i] { on } else { off })).collect();
        let l = self.context_len;
        Minibatch {
            size: idx.len(),
            obs: rows(&self.obs, idx, self.obs_dim),
            windows: rows(&self.windows, idx, l * self.obs_dim),
            valid: rows(&self.valid, idx, l),
            hidden: rows(&self.hidden, idx, self.hidden_dim),
            messages: rows(&self.messages, idx, self.message_dim),
            next_messages: rows(&self.next_messages, idx, self.message_dim),
            actions: idx.iter().map(|&i| self.actions[i]).collect(),
            old_logp: rows(&self.log_probs, idx, 1),
            old_values: rows(&self.values, idx, 1),
            advantages: rows(&self.advantages, idx, 1),
            returns: rows(&self.returns, idx, 1),
            next_obs: rows(&self.next_obs, idx, self.obs_dim),
            rewards: rows(&self.rewards, idx, 1),
            terminals: flag(&self.terminals, 1.0, 0.0),
            coh_weights: flag(&self.dones, 0.0, 1.0),
            utility: rows(&self.utility, idx, 1),
        }
    }
}

pub(crate) fn mean(xs: &[f32]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().map(|&x| x as f64).sum::<f64>() / xs.len() as f64
    }
}
