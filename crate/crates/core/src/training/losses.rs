//! Loss graphs for the control agent (PPO), the information agent
//! (dynamics, coherence and causal-influence terms) and the world-model
//! baseline. All builders are generic so they can be checked in `f64`.

use crate::agents::{ca_heads, ca_obs_features, gru_message, ia_window_message, wm_heads, world_heads, IaConfig, Trunk};
use crate::tensor::{Graph, ParamVars, Result, Scalar, Var};

use super::HyperParams;

/// Gathered training rows, converted to the graph's scalar type.
#[derive(Debug, Clone, Default)]
pub struct Minibatch<T> {
    pub size: usize,
    pub obs: Vec<T>,
    /// `size * L` observations per row window, oldest first (transformer trunk).
    pub windows: Vec<T>,
    pub valid: Vec<T>,
    /// Hidden state entering the step (GRU trunk).
    pub hidden: Vec<T>,
    /// Messages the control agent saw during the rollout.
    pub messages: Vec<T>,
    /// Message of the following step; the coherence target.
    pub next_messages: Vec<T>,
    pub actions: Vec<usize>,
    pub old_logp: Vec<T>,
    pub old_values: Vec<T>,
    pub advantages: Vec<T>,
    pub returns: Vec<T>,
    pub next_obs: Vec<T>,
    pub rewards: Vec<T>,
    pub terminals: Vec<T>,
    /// 0 where the episode ended after this step, 1 otherwise.
    pub coh_weights: Vec<T>,
    pub utility: Vec<T>,
}

#[derive(Debug, Clone, Copy)]
pub struct PpoTerms {
    pub total: Var,
    pub policy: Var,
    pub value: Var,
    pub entropy: Var,
    /// Log-probability of the taken action under the current parameters.
    pub logp: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct DynTerms {
    pub obs: Var,
    pub reward: Var,
    pub done: Var,
    pub total: Var,
    pub coherence: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct IaTerms {
    pub dynamics: DynTerms,
    pub causal: Var,
    pub total: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct WmTerms {
    pub ppo: PpoTerms,
    pub dynamics: DynTerms,
    pub total: Var,
}

fn normalize<T: Scalar>(xs: &[T]) -> Vec<T> {
    let n = T::of(xs.len() as f64);
    let mean = xs.iter().copied().sum::<T>() / n;
    let var = xs.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / n;
    let d = var.sqrt() + T::of(1e-8);
    xs.iter().map(|&x| (x - mean) / d).collect()
}

/// Clipped PPO objective from policy logits `[B, A]` and values `[B]`.
/// Advantages are standardized over the minibatch.
pub fn ppo_terms<T: Scalar>(g: &mut Graph<T>, logits: Var, values: Var, mb: &Minibatch<T>, hp: &HyperParams) -> Result<PpoTerms> {
    let logp_all = g.log_softmax(logits);
    let logp = g.pick(logp_all, &mb.actions)?;
    let adv = normalize(&mb.advantages);
    let eps = T::of(hp.clip_eps);
    let policy = g.ppo_surrogate(logp, &mb.old_logp, &adv, eps)?;
    let value = g.clipped_value_loss(values, &mb.old_values, &mb.returns, eps)?;
    let entropy = g.entropy_mean(logp_all);
    let v = g.scale(value, T::of(hp.vf_coef));
    let e = g.scale(entropy, T::of(-hp.ent_coef));
    let total = g.add(policy, v)?;
    let total = g.add(total, e)?;
    Ok(PpoTerms { total, policy, value, entropy, logp })
}

/// PPO loss of the control agent given the messages stored in the rollout.
pub fn ca_ppo_loss<T: Scalar>(g: &mut Graph<T>, theta: &ParamVars, obs_dim: usize, message_dim: usize, mb: &Minibatch<T>, hp: &HyperParams) -> Result<PpoTerms> {
    let obs = g.constant(&[mb.size, obs_dim], mb.obs.clone())?;
    let msg = g.constant(&[mb.size, message_dim], mb.messages.clone())?;
    let f = ca_obs_features(g, theta, obs)?;
    let (logits, values) = ca_heads(g, theta, f, msg)?;
    ppo_terms(g, logits, values, mb, hp)
}

/// Information-agent message recomputed from the stored inputs.
pub fn ia_message<T: Scalar>(g: &mut Graph<T>, phi: &ParamVars, cfg: &IaConfig, mb: &Minibatch<T>) -> Result<Var> {
    match cfg.trunk {
        Trunk::Transformer => Ok(ia_window_message(g, phi, cfg, &mb.windows, &mb.valid)?.0),
        Trunk::Gru => {
            let obs = g.constant(&[mb.size, cfg.obs_dim], mb.obs.clone())?;
            let h = g.constant(&[mb.size, cfg.hidden_dim], mb.hidden.clone())?;
            Ok(gru_message(g, phi, obs, h)?.0)
        }
    }
}

/// World-model prediction losses from `message`, plus the coherence loss.
pub fn dynamics_terms<T: Scalar>(g: &mut Graph<T>, phi: &ParamVars, cfg: &IaConfig, message: Var, mb: &Minibatch<T>, hp: &HyperParams) -> Result<DynTerms> {
    let w = world_heads(g, phi, cfg, message, &mb.actions)?;
    let obs = g.row_mse(w.next_obs, &mb.next_obs, None, hp.obs_loss_mean)?;
    let reward = g.row_mse(w.reward, &mb.rewards, None, true)?;
    let done = g.bce(w.done, &mb.terminals)?;
    let total = g.add(obs, reward)?;
    let total = g.add(total, done)?;
    let coherence = g.row_mse(w.next_msg, &mb.next_messages, Some(&mb.coh_weights), true)?;
    Ok(DynTerms { obs, reward, done, total, coherence })
}

/// `-mean(U * KL(pi(.|o, 0) || pi(.|o, m)))`. The control-agent parameters
/// in `theta` must be registered as constants; the zero-message policy is
/// evaluated as a plain constant forward.
pub fn causal_term<T: Scalar>(g: &mut Graph<T>, theta: &ParamVars, cfg: &IaConfig, message: Var, mb: &Minibatch<T>) -> Result<Var> {
    let obs = g.constant(&[mb.size, cfg.obs_dim], mb.obs.clone())?;
    let f = ca_obs_features(g, theta, obs)?;
    let zero = g.constant(&[mb.size, cfg.message_dim], vec![T::zero(); mb.size * cfg.message_dim])?;
    let (logits_zero, _) = ca_heads(g, theta, f, zero)?;
    let logp_zero = g.log_softmax(logits_zero);
    let ref_logp = g.value(logp_zero).data().to_vec();
    let (logits_msg, _) = ca_heads(g, theta, f, message)?;
    let logq = g.log_softmax(logits_msg);
    let kl = g.weighted_kl(logq, &ref_logp, &mb.utility)?;
    Ok(g.scale(kl, -T::one()))
}

/// `lambda_dyn * L_dyn + lambda_coh * L_coh + lambda_causal * L_causal`.
pub fn ia_loss<T: Scalar>(g: &mut Graph<T>, phi: &ParamVars, theta: &ParamVars, cfg: &IaConfig, mb: &Minibatch<T>, hp: &HyperParams) -> Result<IaTerms> {
    let m = ia_message(g, phi, cfg, mb)?;
    let dynamics = dynamics_terms(g, phi, cfg, m, mb, hp)?;
    let causal = causal_term(g, theta, cfg, m, mb)?;
    let a = g.scale(dynamics.total, T::of(hp.lambda_dyn));
    let b = g.scale(dynamics.coherence, T::of(hp.lambda_coh));
    let c = g.scale(causal, T::of(hp.lambda_causal));
    let total = g.add(a, b)?;
    let total = g.add(total, c)?;
    Ok(IaTerms { dynamics, causal, total })
}

/// World-model baseline: PPO on heads attached to the message plus
/// `lambda_dyn * L_dyn`, all through one parameter store.
pub fn wm_loss<T: Scalar>(g: &mut Graph<T>, phi: &ParamVars, cfg: &IaConfig, mb: &Minibatch<T>, hp: &HyperParams) -> Result<WmTerms> {
    let m = ia_message(g, phi, cfg, mb)?;
    let (logits, values) = wm_heads(g, phi, m)?;
    let ppo = ppo_terms(g, logits, values, mb, hp)?;
    let dynamics = dynamics_terms(g, phi, cfg, m, mb, hp)?;
    let d = g.scale(dynamics.total, T::of(hp.lambda_dyn));
    let total = g.add(ppo.total, d)?;
    Ok(WmTerms { ppo, dynamics, total })
}
