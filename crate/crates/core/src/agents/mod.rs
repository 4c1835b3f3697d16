//! Information agent (transformer or GRU world model that emits messages),
//! control agent (actor-critic reading observation and message), and the
//! world-model baseline that puts policy heads directly on the message.
//!
//! Network builders take a [`Graph`] plus the registered parameters so the
//! same code serves rollouts, training and finite-difference checks.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::gridworld::{NUM_ACTIONS, OBS_DIM};
use crate::tensor::{orthogonal, Graph, ParamStore, ParamVars, Result as TResult, Scalar, Tensor, TensorError, Var};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AgentError {
    #[error("invalid agent configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = AgentError> = std::result::Result<T, E>;

const LN_EPS: f64 = 1e-5;
const SQRT2: f64 = std::f64::consts::SQRT_2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Trunk {
    Transformer,
    Gru,
}

impl std::fmt::Display for Trunk {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Trunk::Transformer => "transformer",
            Trunk::Gru => "gru",
        })
    }
}

impl std::str::FromStr for Trunk {
    type Err = AgentError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "transformer" => Ok(Trunk::Transformer),
            "gru" => Ok(Trunk::Gru),
            _ => Err(AgentError::InvalidConfig(format!("unknown trunk `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IaConfig {
    pub obs_dim: usize,
    pub hidden_dim: usize,
    pub message_dim: usize,
    pub context_len: usize,
    pub num_heads: usize,
    pub action_dim: usize,
    pub trunk: Trunk,
}

impl Default for IaConfig {
    fn default() -> Self {
        Self { obs_dim: OBS_DIM, hidden_dim: 128, message_dim: 32, context_len: 4, num_heads: 4, action_dim: NUM_ACTIONS, trunk: Trunk::Transformer }
    }
}

impl IaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 || self.num_heads == 0 || !self.hidden_dim.is_multiple_of(self.num_heads) {
            return Err(AgentError::InvalidConfig(format!("{} heads do not divide hidden_dim {}", self.num_heads, self.hidden_dim)));
        }
        if self.message_dim == 0 || self.context_len == 0 || self.obs_dim == 0 || self.action_dim == 0 {
            return Err(AgentError::InvalidConfig("dimensions must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaConfig {
    pub obs_dim: usize,
    pub message_dim: usize,
    pub hidden_dim: usize,
    pub action_dim: usize,
}

impl Default for CaConfig {
    fn default() -> Self {
        Self { obs_dim: OBS_DIM, message_dim: 32, hidden_dim: 128, action_dim: NUM_ACTIONS }
    }
}

fn dense<R: Rng>(store: &mut ParamStore<f32>, rng: &mut R, name: &str, fan_in: usize, fan_out: usize, gain: f64, bias: bool) {
    store.insert(format!("{name}.w"), Tensor::new(&[fan_in, fan_out], orthogonal(rng, fan_in, fan_out, gain)).expect("shape"));
    if bias {
        store.insert(format!("{name}.b"), Tensor::zeros(&[fan_out]));
    }
}

fn world_heads_init<R: Rng>(store: &mut ParamStore<f32>, rng: &mut R, cfg: &IaConfig) {
    let input = cfg.message_dim + cfg.action_dim;
    dense(store, rng, "next_obs_head", input, cfg.obs_dim, 1.0, true);
    dense(store, rng, "reward_head", input, 1, 1.0, true);
    dense(store, rng, "done_head", input, 1, 1.0, true);
    dense(store, rng, "next_msg_head", input, cfg.message_dim, 1.0, true);
}

/// Fresh information-agent parameters.
pub fn init_ia<R: Rng>(cfg: &IaConfig, rng: &mut R) -> Result<ParamStore<f32>> {
    cfg.validate()?;
    let h = cfg.hidden_dim;
    let mut s = ParamStore::new();
    dense(&mut s, rng, "obs_tok", cfg.obs_dim, h, SQRT2, true);
    match cfg.trunk {
        Trunk::Transformer => {
            let normal = Normal::new(0.0f32, 0.02).expect("valid std");
            let pos: Vec<f32> = (0..cfg.context_len * h).map(|_| normal.sample(rng)).collect();
            s.insert("pos_embed", Tensor::new(&[cfg.context_len, h], pos).expect("shape"));
            for ln in ["ln1", "ln2"] {
                s.insert(format!("{ln}.scale"), Tensor::from_elem(&[h], 1.0));
                s.insert(format!("{ln}.bias"), Tensor::zeros(&[h]));
            }
            // no key bias: it shifts all scores of a query equally
            for p in ["attn.q", "attn.k", "attn.v", "attn.out"] {
                dense(&mut s, rng, p, h, h, 1.0, p != "attn.k");
            }
            dense(&mut s, rng, "mlp_1", h, 2 * h, SQRT2, true);
            dense(&mut s, rng, "mlp_2", 2 * h, h, SQRT2, true);
        }
        Trunk::Gru => {
            for g in ["gru.ir", "gru.iz", "gru.in"] {
                dense(&mut s, rng, g, h, h, 1.0, true);
            }
            dense(&mut s, rng, "gru.hr", h, h, 1.0, false);
            dense(&mut s, rng, "gru.hz", h, h, 1.0, false);
            dense(&mut s, rng, "gru.hn", h, h, 1.0, true);
            dense(&mut s, rng, "gru_out", h, h, SQRT2, true);
        }
    }
    dense(&mut s, rng, "message_head", h, cfg.message_dim, 1.0, true);
    world_heads_init(&mut s, rng, cfg);
    Ok(s)
}

/// Fresh control-agent parameters.
pub fn init_ca<R: Rng>(cfg: &CaConfig, rng: &mut R) -> ParamStore<f32> {
    let h = cfg.hidden_dim;
    let mut s = ParamStore::new();
    dense(&mut s, rng, "obs_layer", cfg.obs_dim, h, SQRT2, true);
    dense(&mut s, rng, "msg_layer", cfg.message_dim, h, SQRT2, true);
    dense(&mut s, rng, "shared_1", 2 * h, h, SQRT2, true);
    dense(&mut s, rng, "shared_2", h, h, SQRT2, true);
    dense(&mut s, rng, "actor_head", h, cfg.action_dim, 0.01, true);
    dense(&mut s, rng, "critic_head", h, 1, 1.0, true);
    s
}

/// World-model baseline: an information agent whose message also feeds an
/// actor and a critic head.
pub fn init_wm<R: Rng>(cfg: &IaConfig, rng: &mut R) -> Result<ParamStore<f32>> {
    let mut s = init_ia(cfg, rng)?;
    dense(&mut s, rng, "actor_head", cfg.message_dim, cfg.action_dim, 0.01, true);
    dense(&mut s, rng, "critic_head", cfg.message_dim, 1, 1.0, true);
    Ok(s)
}

fn linear<T: Scalar>(g: &mut Graph<T>, p: &ParamVars, name: &str, x: Var) -> TResult<Var> {
    let b = p.try_get(&format!("{name}.b"));
    g.linear(x, p.get(&format!("{name}.w")), b)
}

/// `tanh(obs_tok(obs))` for a `[rows, obs_dim]` constant input.
pub fn embed<T: Scalar>(g: &mut Graph<T>, p: &ParamVars, obs: Var) -> TResult<Var> {
    let e = linear(g, p, "obs_tok", obs)?;
    Ok(g.tanh(e))
}

/// Transformer block over a `[batch, L, hidden]` context of token embeddings.
/// Returns the latent of the newest (last) position, `[batch, hidden]`.
///
/// Attention is non-causal, and only the last row of the block output is
/// read, so only that row's query and MLP are evaluated.
pub fn transformer_latent<T: Scalar>(g: &mut Graph<T>, p: &ParamVars, cfg: &IaConfig, tokens: Var) -> TResult<Var> {
    let shape = g.shape(tokens).to_vec();
    let (batch, l, h) = (shape[0], shape[1], shape[2]);
    let x = g.add_broadcast(tokens, p.get("pos_embed"))?;
    let xn = g.layer_norm(x, p.get("ln1.scale"), p.get("ln1.bias"), T::of(LN_EPS))?;
    let k = linear(g, p, "attn.k", xn)?;
    let v = linear(g, p, "attn.v", xn)?;
    let xn_last = g.select_seq(xn, l - 1)?;
    let q = linear(g, p, "attn.q", xn_last)?;
    let q = g.reshape(q, &[batch, 1, h])?;
    let att = g.attention(q, k, v, cfg.num_heads)?;
    let att = g.reshape(att, &[batch, h])?;
    let att = linear(g, p, "attn.out", att)?;
    let x_last = g.select_seq(x, l - 1)?;
    let y = g.add(att, x_last)?;
    let yn = g.layer_norm(y, p.get("ln2.scale"), p.get("ln2.bias"), T::of(LN_EPS))?;
    let m1 = linear(g, p, "mlp_1", yn)?;
    let m1 = g.tanh(m1);
    let m2 = linear(g, p, "mlp_2", m1)?;
    g.add(m2, y)
}

/// Same block evaluated on every position, returning the full `[batch, L, hidden]` output.
/// Used to check [`transformer_latent`].
pub fn transformer_sequence<T: Scalar>(g: &mut Graph<T>, p: &ParamVars, cfg: &IaConfig, tokens: Var) -> TResult<Var> {
    let x = g.add_broadcast(tokens, p.get("pos_embed"))?;
    let xn = g.layer_norm(x, p.get("ln1.scale"), p.get("ln1.bias"), T::of(LN_EPS))?;
    let q = linear(g, p, "attn.q", xn)?;
    let k = linear(g, p, "attn.k", xn)?;
    let v = linear(g, p, "attn.v", xn)?;
    let att = g.attention(q, k, v, cfg.num_heads)?;
    let att = linear(g, p, "attn.out", att)?;
    let y = g.add(att, x)?;
    let yn = g.layer_norm(y, p.get("ln2.scale"), p.get("ln2.bias"), T::of(LN_EPS))?;
    let m1 = linear(g, p, "mlp_1", yn)?;
    let m1 = g.tanh(m1);
    let m2 = linear(g, p, "mlp_2", m1)?;
    g.add(m2, y)
}

/// `tanh(message_head(z))`.
pub fn message_head<T: Scalar>(g: &mut Graph<T>, p: &ParamVars, latent: Var) -> TResult<Var> {
    let m = linear(g, p, "message_head", latent)?;
    Ok(g.tanh(m))
}

/// Messages for a batch of observation windows.
///
/// `windows` holds `batch * L` observations, oldest first per environment;
/// `valid` marks which slots hold a real observation. Invalid slots enter
/// the context as zero embeddings, exactly like a freshly zeroed buffer.
/// Returns `(message, latent)`.
pub fn ia_window_message<T: Scalar>(
    g: &mut Graph<T>,
    p: &ParamVars,
    cfg: &IaConfig,
    windows: &[T],
    valid: &[T],
) -> TResult<(Var, Var)> {
    let rows = valid.len();
    let batch = rows / cfg.context_len;
    let obs = g.constant(&[rows, cfg.obs_dim], windows.to_vec())?;
    let e = embed(g, p, obs)?;
    let e = g.scale_rows(e, valid)?;
    let tokens = g.reshape(e, &[batch, cfg.context_len, cfg.hidden_dim])?;
    let z = transformer_latent(g, p, cfg, tokens)?;
    Ok((message_head(g, p, z)?, z))
}

/// One GRU step for a batch: returns `(message, new_hidden)`.
pub fn gru_message<T: Scalar>(g: &mut Graph<T>, p: &ParamVars, obs: Var, hidden: Var) -> TResult<(Var, Var)> {
    let x = embed(g, p, obs)?;
    let ir = linear(g, p, "gru.ir", x)?;
    let hr = linear(g, p, "gru.hr", hidden)?;
    let r = g.add(ir, hr)?;
    let r = g.sigmoid(r);
    let iz = linear(g, p, "gru.iz", x)?;
    let hz = linear(g, p, "gru.hz", hidden)?;
    let z = g.add(iz, hz)?;
    let z = g.sigmoid(z);
    let hn = linear(g, p, "gru.hn", hidden)?;
    let rhn = g.mul(r, hn)?;
    let inn = linear(g, p, "gru.in", x)?;
    let n = g.add(inn, rhn)?;
    let n = g.tanh(n);
    // h' = (1 - z) * n + z * h
    let one_minus_z = g.affine(z, -T::one(), T::one());
    let a = g.mul(one_minus_z, n)?;
    let b = g.mul(z, hidden)?;
    let h_new = g.add(a, b)?;
    let out = linear(g, p, "gru_out", h_new)?;
    let out = g.tanh(out);
    Ok((message_head(g, p, out)?, h_new))
}

/// Outputs of the four world-model heads.
#[derive(Debug, Clone, Copy)]
pub struct WorldVars {
    pub next_obs: Var,
    pub reward: Var,
    pub done: Var,
    pub next_msg: Var,
}

pub fn one_hot<T: Scalar>(actions: &[usize], n: usize) -> Vec<T> {
    let mut v = vec![T::zero(); actions.len() * n];
    for (r, &a) in actions.iter().enumerate() {
        v[r * n + a] = T::one();
    }
    v
}

/// World-model heads on `concat(message, one_hot(action))`.
pub fn world_heads<T: Scalar>(g: &mut Graph<T>, p: &ParamVars, cfg: &IaConfig, message: Var, actions: &[usize]) -> TResult<WorldVars> {
    let a = g.constant(&[actions.len(), cfg.action_dim], one_hot(actions, cfg.action_dim))?;
    let input = g.concat(message, a)?;
    let ten = T::of(10.0);
    let next_obs = linear(g, p, "next_obs_head", input)?;
    let next_obs = g.clip(next_obs, -ten, ten);
    let reward = linear(g, p, "reward_head", input)?;
    let reward = g.clip(reward, -ten, ten);
    let done = linear(g, p, "done_head", input)?;
    let done = g.sigmoid(done);
    let done = g.clip(done, T::of(1e-7), T::of(1.0 - 1e-7));
    let next_msg = linear(g, p, "next_msg_head", input)?;
    let next_msg = g.tanh(next_msg);
    Ok(WorldVars { next_obs, reward, done, next_msg })
}

/// `tanh(obs_layer(obs))`; shared by the message and zero-message branches.
pub fn ca_obs_features<T: Scalar>(g: &mut Graph<T>, p: &ParamVars, obs: Var) -> TResult<Var> {
    let f = linear(g, p, "obs_layer", obs)?;
    Ok(g.tanh(f))
}

/// Control-agent trunk and heads: returns `(logits [B, A], value [B])`.
pub fn ca_heads<T: Scalar>(g: &mut Graph<T>, p: &ParamVars, obs_features: Var, message: Var) -> TResult<(Var, Var)> {
    let m = linear(g, p, "msg_layer", message)?;
    let m = g.tanh(m);
    let x = g.concat(obs_features, m)?;
    let x = linear(g, p, "shared_1", x)?;
    let x = g.tanh(x);
    let x = linear(g, p, "shared_2", x)?;
    let x = g.tanh(x);
    let logits = linear(g, p, "actor_head", x)?;
    let value = linear(g, p, "critic_head", x)?;
    let rows = g.shape(value)[0];
    let value = g.reshape(value, &[rows])?;
    Ok((logits, value))
}

/// Policy and value heads of the world-model baseline, read from the message.
pub fn wm_heads<T: Scalar>(g: &mut Graph<T>, p: &ParamVars, message: Var) -> TResult<(Var, Var)> {
    let logits = linear(g, p, "actor_head", message)?;
    let value = linear(g, p, "critic_head", message)?;
    let rows = g.shape(value)[0];
    let value = g.reshape(value, &[rows])?;
    Ok((logits, value))
}

/// Sliding window of the last `L` observation embeddings of one environment.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextBuffer {
    rows: Vec<f32>,
    len: usize,
    width: usize,
}

impl ContextBuffer {
    pub fn zeros(cfg: &IaConfig) -> Self {
        Self { rows: vec![0.0; cfg.context_len * cfg.hidden_dim], len: cfg.context_len, width: cfg.hidden_dim }
    }

    /// Drops the oldest row and appends `e` as the newest.
    pub fn slide(&self, e: &[f32]) -> Self {
        let mut rows = self.rows[self.width..].to_vec();
        rows.extend_from_slice(e);
        Self { rows, len: self.len, width: self.width }
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.rows[i * self.width..(i + 1) * self.width]
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.rows
    }
}

/// Message for one environment step. Returns the message, the slid context
/// and the latent of the newest position.
pub fn ia_forward(params: &ParamStore<f32>, cfg: &IaConfig, ctx: &ContextBuffer, obs: &[f32]) -> Result<(Vec<f32>, ContextBuffer, Vec<f32>)> {
    if cfg.trunk != Trunk::Transformer {
        return Err(AgentError::InvalidConfig("ia_forward needs the transformer trunk".into()));
    }
    if obs.len() != cfg.obs_dim || ctx.rows.len() != cfg.context_len * cfg.hidden_dim {
        return Err(TensorError::ShapeMismatch { op: "ia_forward", detail: format!("obs {} ctx {}", obs.len(), ctx.rows.len()) }.into());
    }
    let mut g = Graph::new();
    let p = params.register(&mut g, false);
    let o = g.constant(&[1, cfg.obs_dim], obs.to_vec())?;
    let e = embed(&mut g, &p, o)?;
    let ctx = ctx.slide(g.value(e).data());
    let tokens = g.constant(&[1, cfg.context_len, cfg.hidden_dim], ctx.rows.clone())?;
    let z = transformer_latent(&mut g, &p, cfg, tokens)?;
    let m = message_head(&mut g, &p, z)?;
    Ok((g.value(m).data().to_vec(), ctx, g.value(z).data().to_vec()))
}

/// One GRU step for a single environment: returns `(message, new_hidden)`.
pub fn gru_ia_forward(params: &ParamStore<f32>, cfg: &IaConfig, hidden: &[f32], obs: &[f32]) -> Result<(Vec<f32>, Vec<f32>)> {
    let mut g = Graph::new();
    let p = params.register(&mut g, false);
    let o = g.constant(&[1, cfg.obs_dim], obs.to_vec())?;
    let h = g.constant(&[1, cfg.hidden_dim], hidden.to_vec())?;
    let (m, h) = gru_message(&mut g, &p, o, h)?;
    Ok((g.value(m).data().to_vec(), g.value(h).data().to_vec()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorldPrediction {
    pub next_obs: Vec<f32>,
    pub reward: f32,
    pub done: f32,
    pub next_msg: Vec<f32>,
}

pub fn ia_world_forward(params: &ParamStore<f32>, cfg: &IaConfig, message: &[f32], action: usize) -> Result<WorldPrediction> {
    if action >= cfg.action_dim {
        return Err(AgentError::InvalidConfig(format!("action {action} out of range")));
    }
    let mut g = Graph::new();
    let p = params.register(&mut g, false);
    let m = g.constant(&[1, cfg.message_dim], message.to_vec())?;
    let w = world_heads(&mut g, &p, cfg, m, &[action])?;
    Ok(WorldPrediction {
        next_obs: g.value(w.next_obs).data().to_vec(),
        reward: g.scalar(w.reward),
        done: g.scalar(w.done),
        next_msg: g.value(w.next_msg).data().to_vec(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyOutput {
    pub logits: Vec<f32>,
    pub log_probs: Vec<f32>,
    pub value: f32,
}

impl PolicyOutput {
    pub fn probs(&self) -> Vec<f32> {
        self.log_probs.iter().map(|l| l.exp()).collect()
    }
}

pub fn log_softmax(logits: &[f32]) -> Vec<f32> {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let lse = max + logits.iter().map(|&l| (l - max).exp()).sum::<f32>().ln();
    logits.iter().map(|&l| l - lse).collect()
}

pub fn ca_forward(params: &ParamStore<f32>, obs: &[f32], message: &[f32]) -> Result<PolicyOutput> {
    let mut g = Graph::new();
    let p = params.register(&mut g, false);
    let o = g.constant(&[1, obs.len()], obs.to_vec())?;
    let m = g.constant(&[1, message.len()], message.to_vec())?;
    let f = ca_obs_features(&mut g, &p, o)?;
    let (logits, value) = ca_heads(&mut g, &p, f, m)?;
    let logits = g.value(logits).data().to_vec();
    Ok(PolicyOutput { log_probs: log_softmax(&logits), logits, value: g.scalar(value) })
}

/// Draws an action from row-wise log-probabilities. Returns
/// `(action, log_prob, entropy)`.
pub fn sample_action<R: Rng + ?Sized>(log_probs: &[f32], rng: &mut R) -> (usize, f32, f32) {
    let u: f32 = rng.random();
    let mut acc = 0.0f32;
    let mut action = log_probs.len() - 1;
    for (i, &l) in log_probs.iter().enumerate() {
        acc += l.exp();
        if u < acc {
            action = i;
            break;
        }
    }
    let entropy = -log_probs.iter().map(|&l| l.exp() * l).sum::<f32>();
    (action, log_probs[action], entropy)
}

/// KL(p0 || pm) between two categorical distributions given as
/// log-probabilities (or unnormalized logits). Both are renormalized in f64.
pub fn ice(logp_zero: &[f32], logp_msg: &[f32]) -> f32 {
    fn normalized(l: &[f32]) -> Vec<f64> {
        let max = l.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x as f64));
        let lse = max + l.iter().map(|&x| (x as f64 - max).exp()).sum::<f64>().ln();
        l.iter().map(|&x| x as f64 - lse).collect()
    }
    let (l0, lm) = (normalized(logp_zero), normalized(logp_msg));
    l0.iter().zip(&lm).map(|(a, b)| a.exp() * (a - b)).sum::<f64>() as f32
}
