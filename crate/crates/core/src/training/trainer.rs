use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::agents::{
    ca_heads, ca_obs_features, gru_message, ia_window_message, init_ca, init_ia, init_wm, sample_action, wm_heads, CaConfig, IaConfig, Trunk,
};
use crate::gridworld::{batch_step, make_task, GridState, TaskSpec, NUM_ACTIONS};
use crate::tensor::{clip_global_norm, lr_schedule, AdamConfig, Checkpoint, Graph, ParamStore, RngState};

use super::batch::{mean, RolloutBatch};
use super::losses::{ca_ppo_loss, ia_loss, wm_loss, Minibatch};
use super::{LossDiagnostics, Method, MetricsRecord, Phase, Result, TrainConfig, TrainError};

const INIT_STREAM_IA: u64 = 1;
const INIT_STREAM_CA: u64 = 2;
const ENV_STREAM_BASE: u64 = 100;

struct PolicyEval {
    logp_msg: Vec<f32>,
    logp_zero: Vec<f32>,
    values: Vec<f32>,
    values_zero: Vec<f32>,
}

/// Owns the agents, the environments and every random stream of one run.
pub struct Trainer {
    cfg: TrainConfig,
    tasks: Vec<Arc<TaskSpec>>,
    ia: Option<ParamStore<f32>>,
    ca: Option<ParamStore<f32>>,
    envs: Vec<GridState>,
    obs: Vec<f32>,
    window: Vec<f32>,
    valid: Vec<f32>,
    hidden: Vec<f32>,
    ep_return: Vec<f32>,
    rng: ChaCha8Rng,
    update: usize,
    global_step: u64,
}

fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

impl Trainer {
    /// Builds a run. Missing agents are freshly initialized where the phase
    /// allows it; a frozen agent that must come from a checkpoint is an error.
    pub fn new(cfg: TrainConfig, ia: Option<ParamStore<f32>>, ca: Option<ParamStore<f32>>) -> Result<Self> {
        cfg.hp.validate()?;
        cfg.ia.validate()?;
        if cfg.tasks.is_empty() {
            return Err(TrainError::ConfigInvalid("at least one task is required".into()));
        }
        let tasks = cfg.tasks.iter().map(|t| make_task(t).map(Arc::new)).collect::<std::result::Result<Vec<_>, _>>()?;
        if let Some(t) = tasks.iter().find(|t| t.obs_dim != cfg.ia.obs_dim) {
            return Err(TrainError::ConfigInvalid(format!("task {} has obs_dim {} but agents expect {}", t.name, t.obs_dim, cfg.ia.obs_dim)));
        }

        let needs_ia = matches!(cfg.method, Method::Coral | Method::WorldModel);
        let needs_ca = !matches!(cfg.method, Method::WorldModel);
        let ia = match (needs_ia, ia) {
            (false, _) => None,
            (true, Some(p)) => Some(p),
            (true, None) => {
                let fresh = match (cfg.method, cfg.phase) {
                    (Method::Coral, Phase::Pretrain) => init_ia(&cfg.ia, &mut stream(cfg.seed, INIT_STREAM_IA))?,
                    (Method::WorldModel, Phase::Pretrain | Phase::Deploy) => init_wm(&cfg.ia, &mut stream(cfg.seed, INIT_STREAM_IA))?,
                    _ => return Err(TrainError::MissingCheckpoint(format!("{:?} in {:?} needs a trained information agent", cfg.method, cfg.phase))),
                };
                Some(fresh)
            }
        };
        let ca_cfg = CaConfig { obs_dim: cfg.ia.obs_dim, message_dim: cfg.ia.message_dim, hidden_dim: cfg.ca_hidden_dim, action_dim: cfg.ia.action_dim };
        let ca = match (needs_ca, ca) {
            (false, _) => None,
            (true, Some(p)) => Some(p),
            (true, None) if cfg.phase == Phase::Zeroshot => return Err(TrainError::MissingCheckpoint("evaluation needs a trained control agent".into())),
            (true, None) => Some(init_ca(&ca_cfg, &mut stream(cfg.seed, INIT_STREAM_CA))),
        };
        if let Some(ia) = &ia {
            check_shape(ia, "obs_tok.w", &[cfg.ia.obs_dim, cfg.ia.hidden_dim])?;
            check_shape(ia, "message_head.w", &[cfg.ia.hidden_dim, cfg.ia.message_dim])?;
        }
        if let Some(ca) = &ca {
            check_shape(ca, "obs_layer.w", &[cfg.ia.obs_dim, cfg.ca_hidden_dim])?;
            check_shape(ca, "msg_layer.w", &[cfg.ia.message_dim, cfg.ca_hidden_dim])?;
        }

        let n = cfg.hp.num_envs;
        let mut envs = Vec::with_capacity(n);
        let mut obs = Vec::with_capacity(n * cfg.ia.obs_dim);
        for i in 0..n {
            let (s, o) = GridState::new(tasks[0].clone(), stream(cfg.seed, ENV_STREAM_BASE + i as u64))?;
            envs.push(s);
            obs.extend(o);
        }
        let (l, od, h) = (cfg.ia.context_len, cfg.ia.obs_dim, cfg.ia.hidden_dim);
        let mut t = Self {
            rng: stream(cfg.seed, 0),
            tasks,
            ia,
            ca,
            envs,
            obs,
            window: vec![0.0; n * l * od],
            valid: vec![0.0; n * l],
            hidden: vec![0.0; n * h],
            ep_return: vec![0.0; n],
            update: 0,
            global_step: 0,
            cfg,
        };
        for i in 0..n {
            t.begin_episode(i);
        }
        Ok(t)
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn ia(&self) -> Option<&ParamStore<f32>> {
        self.ia.as_ref()
    }

    pub fn ca(&self) -> Option<&ParamStore<f32>> {
        self.ca.as_ref()
    }

    pub fn global_step(&self) -> u64 {
        self.global_step
    }

    pub fn updates_done(&self) -> usize {
        self.update
    }

    pub fn rng_state(&self) -> RngState {
        RngState { seed: self.cfg.seed, stream: self.rng.get_stream(), word_pos: self.rng.get_word_pos() }
    }

    /// Number of iterations [`Trainer::step`] should run for this phase.
    pub fn total_updates(&self) -> usize {
        match self.cfg.phase {
            Phase::Zeroshot => ((self.cfg.eval_steps / self.cfg.hp.batch_size() as u64) as usize).max(1),
            _ => self.cfg.hp.num_updates(),
        }
    }

    fn ia_trainable(&self) -> bool {
        match self.cfg.method {
            Method::Coral => self.cfg.phase == Phase::Pretrain,
            Method::WorldModel => self.cfg.phase != Phase::Zeroshot,
            _ => false,
        }
    }

    fn ca_trainable(&self) -> bool {
        self.ca.is_some() && self.cfg.phase != Phase::Zeroshot
    }

    fn uses_window(&self) -> bool {
        self.ia.is_some() && self.cfg.ia.trunk == Trunk::Transformer
    }

    fn uses_hidden(&self) -> bool {
        self.ia.is_some() && self.cfg.ia.trunk == Trunk::Gru
    }

    /// Clears environment `i`'s memory and seeds it with the current observation.
    fn begin_episode(&mut self, i: usize) {
        let (l, od, h) = (self.cfg.ia.context_len, self.cfg.ia.obs_dim, self.cfg.ia.hidden_dim);
        self.window[i * l * od..(i + 1) * l * od].fill(0.0);
        self.valid[i * l..(i + 1) * l].fill(0.0);
        self.hidden[i * h..(i + 1) * h].fill(0.0);
        self.ep_return[i] = 0.0;
        self.push_obs(i);
    }

    /// Slides the current observation of environment `i` into its window.
    fn push_obs(&mut self, i: usize) {
        let (l, od) = (self.cfg.ia.context_len, self.cfg.ia.obs_dim);
        let w = &mut self.window[i * l * od..(i + 1) * l * od];
        w.copy_within(od.., 0);
        w[(l - 1) * od..].copy_from_slice(&self.obs[i * od..(i + 1) * od]);
        let v = &mut self.valid[i * l..(i + 1) * l];
        v.copy_within(1.., 0);
        v[l - 1] = 1.0;
    }

    /// Messages for `rows` environments; also returns the next GRU state.
    fn messages(&mut self, windows: &[f32], valid: &[f32], obs: &[f32], hidden: &[f32], rows: usize) -> Result<(Vec<f32>, Vec<f32>)> {
        let md = self.cfg.ia.message_dim;
        match self.cfg.method {
            Method::Ppo => Ok((vec![0.0; rows * md], Vec::new())),
            Method::RandomMessage => Ok(((0..rows * md).map(|_| self.rng.random_range(-1.0f32..1.0)).collect(), Vec::new())),
            Method::Coral | Method::WorldModel => {
                let ia = self.ia.as_ref().expect("information agent present");
                let cfg = &self.cfg.ia;
                let mut g = Graph::new();
                let p = ia.register(&mut g, false);
                match cfg.trunk {
                    Trunk::Transformer => {
                        let (m, _) = ia_window_message(&mut g, &p, cfg, windows, valid)?;
                        Ok((g.value(m).data().to_vec(), Vec::new()))
                    }
                    Trunk::Gru => {
                        let o = g.constant(&[rows, cfg.obs_dim], obs.to_vec())?;
                        let h = g.constant(&[rows, cfg.hidden_dim], hidden.to_vec())?;
                        let (m, h) = gru_message(&mut g, &p, o, h)?;
                        Ok((g.value(m).data().to_vec(), g.value(h).data().to_vec()))
                    }
                }
            }
        }
    }

    fn current_messages(&mut self) -> Result<(Vec<f32>, Vec<f32>)> {
        let (w, v, o, h) = (std::mem::take(&mut self.window), std::mem::take(&mut self.valid), std::mem::take(&mut self.obs), std::mem::take(&mut self.hidden));
        let out = self.messages(&w, &v, &o, &h, self.cfg.hp.num_envs);
        (self.window, self.valid, self.obs, self.hidden) = (w, v, o, h);
        out
    }

    fn policy(&self, obs: &[f32], msgs: &[f32], rows: usize) -> Result<PolicyEval> {
        let (od, md) = (self.cfg.ia.obs_dim, self.cfg.ia.message_dim);
        let mut g = Graph::new();
        let o = g.constant(&[rows, od], obs.to_vec())?;
        let m = g.constant(&[rows, md], msgs.to_vec())?;
        let z = g.constant(&[rows, md], vec![0.0; rows * md])?;
        let zero_is_same = self.cfg.method == Method::Ppo;
        let (lm, vm, lz, vz) = if self.cfg.method == Method::WorldModel {
            let p = self.ia.as_ref().expect("world model present").register(&mut g, false);
            let (lm, vm) = wm_heads(&mut g, &p, m)?;
            let (lz, vz) = wm_heads(&mut g, &p, z)?;
            (lm, vm, lz, vz)
        } else {
            let p = self.ca.as_ref().expect("control agent present").register(&mut g, false);
            let f = ca_obs_features(&mut g, &p, o)?;
            let (lm, vm) = ca_heads(&mut g, &p, f, m)?;
            let (lz, vz) = if zero_is_same { (lm, vm) } else { ca_heads(&mut g, &p, f, z)? };
            (lm, vm, lz, vz)
        };
        let lpm = g.log_softmax(lm);
        let lpz = if lz == lm { lpm } else { g.log_softmax(lz) };
        Ok(PolicyEval {
            logp_msg: g.value(lpm).data().to_vec(),
            logp_zero: g.value(lpz).data().to_vec(),
            values: g.value(vm).data().to_vec(),
            values_zero: g.value(vz).data().to_vec(),
        })
    }

    /// Value of the final observation of episodes cut by the step cap, with
    /// the message the information agent would send on it.
    fn truncated_values(&mut self, envs: &[usize], finals: &[&[f32]], h_new: &[f32]) -> Result<Vec<f32>> {
        let (l, od, h) = (self.cfg.ia.context_len, self.cfg.ia.obs_dim, self.cfg.ia.hidden_dim);
        let rows = envs.len();
        let mut windows = Vec::new();
        let mut valid = Vec::new();
        let mut hidden = Vec::new();
        let mut obs = Vec::with_capacity(rows * od);
        for (&i, f) in envs.iter().zip(finals) {
            obs.extend_from_slice(f);
            if self.uses_window() {
                windows.extend_from_slice(&self.window[i * l * od + od..(i + 1) * l * od]);
                windows.extend_from_slice(f);
                valid.extend_from_slice(&self.valid[i * l + 1..(i + 1) * l]);
                valid.push(1.0);
            }
            if self.uses_hidden() {
                hidden.extend_from_slice(&h_new[i * h..(i + 1) * h]);
            }
        }
        let (msgs, _) = self.messages(&windows, &valid, &obs, &hidden, rows)?;
        Ok(self.policy(&obs, &msgs, rows)?.values)
    }

    /// Runs every environment for one rollout with the current parameters.
    pub fn collect_rollout(&mut self) -> Result<RolloutBatch> {
        let hp = self.cfg.hp;
        let (n, steps) = (hp.num_envs, hp.rollout_len);
        let ia = self.cfg.ia;
        let (od, md, a, l, h) = (ia.obs_dim, ia.message_dim, ia.action_dim, ia.context_len, ia.hidden_dim);

        if self.cfg.phase == Phase::Pretrain {
            for i in 0..n {
                let k = self.rng.random_range(0..self.tasks.len());
                let o = self.envs[i].reset_to(self.tasks[k].clone())?;
                self.obs[i * od..(i + 1) * od].copy_from_slice(&o);
                self.begin_episode(i);
            }
        }

        let s = n * steps;
        let mut b = RolloutBatch {
            n_envs: n,
            steps,
            obs_dim: od,
            message_dim: md,
            action_dim: a,
            context_len: l,
            hidden_dim: h,
            ..Default::default()
        };
        b.obs.reserve(s * od);
        b.next_obs.reserve(s * od);
        if self.uses_window() {
            b.windows.reserve(s * l * od);
        }

        for _ in 0..steps {
            b.obs.extend_from_slice(&self.obs);
            if self.uses_window() {
                b.windows.extend_from_slice(&self.window);
                b.valid.extend_from_slice(&self.valid);
            }
            if self.uses_hidden() {
                b.hidden.extend_from_slice(&self.hidden);
            }
            let (msgs, h_new) = self.current_messages()?;
            let pol = self.policy(&self.obs, &msgs, n)?;
            let mut actions = Vec::with_capacity(n);
            for i in 0..n {
                let (act, lp, _) = sample_action(&pol.logp_msg[i * a..(i + 1) * a], &mut self.rng);
                actions.push(act);
                b.log_probs.push(lp);
            }
            let out = batch_step(&mut self.envs, &actions)?;

            let mut gae_rewards: Vec<f32> = out.iter().map(|o| o.outcome.reward).collect();
            let cut: Vec<usize> = (0..n).filter(|&i| out[i].outcome.truncated).collect();
            if !cut.is_empty() {
                let finals: Vec<&[f32]> = cut.iter().map(|&i| out[i].outcome.obs.as_slice()).collect();
                let v = self.truncated_values(&cut, &finals, &h_new)?;
                for (&i, v) in cut.iter().zip(v) {
                    gae_rewards[i] += hp.gamma as f32 * v;
                }
            }

            for (i, st) in out.iter().enumerate() {
                let o = &st.outcome;
                b.rewards.push(o.reward);
                b.dones.push(o.done);
                b.terminals.push(o.done && !o.truncated);
                b.next_obs.extend_from_slice(&o.obs);
                self.ep_return[i] += o.reward;
                self.obs[i * od..(i + 1) * od].copy_from_slice(st.next_obs());
                if o.done {
                    b.episode_returns.push(self.ep_return[i]);
                }
                if o.done && !self.cfg.persistent_context {
                    self.begin_episode(i);
                } else {
                    if o.done {
                        self.ep_return[i] = 0.0;
                    }
                    if self.uses_hidden() {
                        self.hidden[i * h..(i + 1) * h].copy_from_slice(&h_new[i * h..(i + 1) * h]);
                    }
                    self.push_obs(i);
                }
            }
            b.gae_rewards.extend(gae_rewards);
            b.messages.extend(msgs);
            b.logp_msg.extend(pol.logp_msg);
            b.logp_zero.extend(pol.logp_zero);
            b.values.extend(pol.values);
            b.values_zero.extend(pol.values_zero);
            b.actions.extend(actions);
        }

        let (msgs, _) = self.current_messages()?;
        let pol = self.policy(&self.obs, &msgs, n)?;
        b.bootstrap_values = pol.values;
        b.next_messages = b.messages[n * md..].to_vec();
        b.next_messages.extend(msgs);
        b.finalize(&hp);
        self.global_step += s as u64;
        Ok(b)
    }

    fn current_lr(&self) -> f64 {
        if self.cfg.hp.anneal_lr {
            lr_schedule(self.update.min(self.cfg.hp.num_updates().saturating_sub(1)), self.cfg.hp.num_updates(), self.cfg.hp.base_lr)
        } else {
            self.cfg.hp.base_lr
        }
    }

    /// Epochs of shuffled minibatch updates on `batch`.
    pub fn update(&mut self, batch: &RolloutBatch) -> Result<LossDiagnostics> {
        let hp = self.cfg.hp;
        let lr = self.current_lr();
        let mut idx: Vec<usize> = (0..batch.len()).collect();
        let size = batch.len() / hp.minibatches;
        let mut acc = Acc::default();
        for _ in 0..hp.epochs {
            idx.shuffle(&mut self.rng);
            for chunk in idx.chunks_exact(size) {
                let mb = batch.minibatch::<f32>(chunk);
                self.update_minibatch(&mb, lr, &mut acc).map_err(|e| match e {
                    TrainError::NonFiniteLoss { detail, .. } => TrainError::NonFiniteLoss { update: self.update, detail },
                    other => other,
                })?;
            }
        }
        self.update += 1;
        let mut d = acc.finish();
        d.ice_mean = batch.ice_mean();
        d.utility_mean = batch.utility_mean();
        Ok(d)
    }

    fn update_minibatch(&mut self, mb: &Minibatch<f32>, lr: f64, acc: &mut Acc) -> Result<()> {
        let hp = self.cfg.hp;
        let ia_cfg = self.cfg.ia;
        let adam = AdamConfig::default();
        acc.n += 1.0;

        if self.cfg.method == Method::WorldModel {
            let ia = self.ia.as_mut().expect("world model present");
            let mut g = Graph::new();
            let phi = ia.register(&mut g, true);
            let t = wm_loss(&mut g, &phi, &ia_cfg, mb, &hp)?;
            acc.ppo(&g, t.ppo.policy, t.ppo.value, t.ppo.entropy, t.ppo.logp, mb);
            acc.dynamics(&g, &t.dynamics);
            let mut grads = g.backward(t.total)?;
            let mut grads = phi.collect(&g, &mut grads);
            acc.ia_norm += clip_global_norm(&mut grads, hp.max_grad_norm);
            ia.adam_step(&grads, lr, adam)?;
            return Ok(());
        }

        let ca_grads = if self.ca_trainable() {
            let ca = self.ca.as_ref().expect("control agent present");
            let mut g = Graph::new();
            let theta = ca.register(&mut g, true);
            let t = ca_ppo_loss(&mut g, &theta, ia_cfg.obs_dim, ia_cfg.message_dim, mb, &hp)?;
            acc.ppo(&g, t.policy, t.value, t.entropy, t.logp, mb);
            let mut grads = g.backward(t.total)?;
            let mut grads = theta.collect(&g, &mut grads);
            acc.ca_norm += clip_global_norm(&mut grads, hp.max_grad_norm);
            Some(grads)
        } else {
            None
        };

        let ia_grads = if self.ia_trainable() {
            let ia = self.ia.as_ref().expect("information agent present");
            let ca = self.ca.as_ref().expect("control agent present");
            let mut g = Graph::new();
            let phi = ia.register(&mut g, true);
            let theta = ca.register(&mut g, false);
            let t = ia_loss(&mut g, &phi, &theta, &ia_cfg, mb, &hp)?;
            acc.dynamics(&g, &t.dynamics);
            acc.causal += g.scalar(t.causal) as f64;
            acc.has_causal = true;
            let mut grads = g.backward(t.total)?;
            let mut grads = phi.collect(&g, &mut grads);
            acc.ia_norm += clip_global_norm(&mut grads, hp.max_grad_norm);
            Some(grads)
        } else {
            None
        };

        if let Some(grads) = ca_grads {
            self.ca.as_mut().expect("control agent present").adam_step(&grads, lr, adam)?;
        }
        if let Some(grads) = ia_grads {
            self.ia.as_mut().expect("information agent present").adam_step(&grads, lr, adam)?;
        }
        Ok(())
    }

    /// One rollout followed by an update (no update in the evaluation phase).
    pub fn step(&mut self) -> Result<MetricsRecord> {
        let start = Instant::now();
        let lr = self.current_lr();
        let batch = self.collect_rollout()?;
        let diag = if self.cfg.phase == Phase::Zeroshot { None } else { Some(self.update(&batch)?) };
        let elapsed = start.elapsed().as_secs_f64();
        let rets = &batch.episode_returns;
        let d = diag.as_ref();
        Ok(MetricsRecord {
            run_id: self.cfg.run_id.clone(),
            mode: self.cfg.label.clone(),
            env_name: self.env_label(),
            seed: self.cfg.seed,
            global_step: self.global_step,
            episodic_return_mean: (!rets.is_empty()).then(|| mean(rets)),
            episodic_return_count: rets.len(),
            ppo_loss: d.map(|d| d.ppo_policy_loss),
            value_loss: d.map(|d| d.value_loss),
            entropy: d.map(|d| d.entropy),
            l_dyn: d.and_then(|d| d.l_dyn),
            l_coh: d.and_then(|d| d.l_coh),
            l_causal: d.and_then(|d| d.l_causal),
            ice_mean: batch.ice_mean(),
            utility_mean: batch.utility_mean(),
            lr: if self.cfg.phase == Phase::Zeroshot { 0.0 } else { lr },
            sps: if self.cfg.record_timing && elapsed > 0.0 { batch.len() as f64 / elapsed } else { 0.0 },
        })
    }

    fn env_label(&self) -> String {
        if self.cfg.phase == Phase::Pretrain && self.tasks.len() > 1 {
            self.cfg.tasks.join("+")
        } else {
            self.cfg.tasks[0].clone()
        }
    }
}

fn check_shape(p: &ParamStore<f32>, name: &str, shape: &[usize]) -> Result<()> {
    match p.get(name) {
        Some(t) if t.shape() == shape => Ok(()),
        Some(t) => Err(TrainError::IncompatibleCheckpoint(format!("{name} has shape {:?}, expected {shape:?}", t.shape()))),
        None => Err(TrainError::IncompatibleCheckpoint(format!("parameter {name} is missing"))),
    }
}

#[derive(Default)]
struct Acc {
    n: f64,
    pg: f64,
    vf: f64,
    ent: f64,
    kl: f64,
    clip: f64,
    dyn_total: f64,
    dyn_obs: f64,
    dyn_rew: f64,
    dyn_done: f64,
    coh: f64,
    causal: f64,
    has_dyn: bool,
    has_causal: bool,
    ca_norm: f64,
    ia_norm: f64,
}

impl Acc {
    fn ppo(&mut self, g: &Graph<f32>, pg: crate::tensor::Var, vf: crate::tensor::Var, ent: crate::tensor::Var, logp: crate::tensor::Var, mb: &Minibatch<f32>) {
        self.pg += g.scalar(pg) as f64;
        self.vf += g.scalar(vf) as f64;
        self.ent += g.scalar(ent) as f64;
        let lp = g.value(logp).data();
        let (mut kl, mut clipped) = (0.0f64, 0.0f64);
        for (&l, &o) in lp.iter().zip(&mb.old_logp) {
            let log_ratio = (l - o) as f64;
            let ratio = log_ratio.exp();
            kl += (ratio - 1.0) - log_ratio;
            if (ratio - 1.0).abs() > 0.2 {
                clipped += 1.0;
            }
        }
        self.kl += kl / lp.len() as f64;
        self.clip += clipped / lp.len() as f64;
    }

    fn dynamics(&mut self, g: &Graph<f32>, d: &super::losses::DynTerms) {
        self.has_dyn = true;
        self.dyn_total += g.scalar(d.total) as f64;
        self.dyn_obs += g.scalar(d.obs) as f64;
        self.dyn_rew += g.scalar(d.reward) as f64;
        self.dyn_done += g.scalar(d.done) as f64;
        self.coh += g.scalar(d.coherence) as f64;
    }

    fn finish(self) -> LossDiagnostics {
        let n = self.n.max(1.0);
        let opt = |on: bool, v: f64| on.then_some(v / n);
        LossDiagnostics {
            ppo_policy_loss: self.pg / n,
            value_loss: self.vf / n,
            entropy: self.ent / n,
            approx_kl: self.kl / n,
            clip_fraction: self.clip / n,
            l_dyn: opt(self.has_dyn, self.dyn_total),
            l_dyn_obs: opt(self.has_dyn, self.dyn_obs),
            l_dyn_reward: opt(self.has_dyn, self.dyn_rew),
            l_dyn_done: opt(self.has_dyn, self.dyn_done),
            l_coh: opt(self.has_dyn, self.coh),
            l_causal: opt(self.has_causal, self.causal),
            ca_grad_norm: self.ca_norm / n,
            ia_grad_norm: self.ia_norm / n,
            ice_mean: 0.0,
            utility_mean: 0.0,
        }
    }
}

/// Checkpoint of an information agent (or world-model baseline) with the
/// architecture recorded so it can be validated on load.
pub fn ia_checkpoint(params: &ParamStore<f32>, cfg: &IaConfig, kind: &str, rng: RngState, hp: &super::HyperParams) -> Checkpoint {
    let mut c = Checkpoint::new(kind, params.clone());
    c.rng = rng;
    for (k, v) in [
        ("obs_dim", cfg.obs_dim.to_string()),
        ("hidden_dim", cfg.hidden_dim.to_string()),
        ("message_dim", cfg.message_dim.to_string()),
        ("context_len", cfg.context_len.to_string()),
        ("num_heads", cfg.num_heads.to_string()),
        ("action_dim", cfg.action_dim.to_string()),
        ("trunk", cfg.trunk.to_string()),
        ("hyperparams", serde_json::to_string(hp).expect("serializable")),
    ] {
        c.attrs.insert(k.into(), v);
    }
    c
}

pub fn ca_checkpoint(params: &ParamStore<f32>, cfg: &CaConfig, rng: RngState, hp: &super::HyperParams) -> Checkpoint {
    let mut c = Checkpoint::new("ca", params.clone());
    c.rng = rng;
    for (k, v) in [
        ("obs_dim", cfg.obs_dim.to_string()),
        ("hidden_dim", cfg.hidden_dim.to_string()),
        ("message_dim", cfg.message_dim.to_string()),
        ("action_dim", cfg.action_dim.to_string()),
        ("hyperparams", serde_json::to_string(hp).expect("serializable")),
    ] {
        c.attrs.insert(k.into(), v);
    }
    c
}

fn attr_usize(c: &Checkpoint, key: &str) -> Result<usize> {
    c.attr(key)
        .ok_or_else(|| TrainError::IncompatibleCheckpoint(format!("{} checkpoint lacks `{key}`", c.kind)))?
        .parse()
        .map_err(|_| TrainError::IncompatibleCheckpoint(format!("{} checkpoint has a malformed `{key}`", c.kind)))
}

pub fn ia_config_from_checkpoint(c: &Checkpoint) -> Result<IaConfig> {
    if c.kind != "ia" && c.kind != "wm" {
        return Err(TrainError::IncompatibleCheckpoint(format!("expected an information-agent checkpoint, found `{}`", c.kind)));
    }
    let trunk = c.attr("trunk").unwrap_or("transformer").parse().map_err(|e: crate::agents::AgentError| TrainError::IncompatibleCheckpoint(e.to_string()))?;
    let cfg = IaConfig {
        obs_dim: attr_usize(c, "obs_dim")?,
        hidden_dim: attr_usize(c, "hidden_dim")?,
        message_dim: attr_usize(c, "message_dim")?,
        context_len: attr_usize(c, "context_len")?,
        num_heads: attr_usize(c, "num_heads")?,
        action_dim: attr_usize(c, "action_dim").unwrap_or(NUM_ACTIONS),
        trunk,
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn ca_config_from_checkpoint(c: &Checkpoint) -> Result<CaConfig> {
    if c.kind != "ca" {
        return Err(TrainError::IncompatibleCheckpoint(format!("expected a control-agent checkpoint, found `{}`", c.kind)));
    }
    Ok(CaConfig {
        obs_dim: attr_usize(c, "obs_dim")?,
        hidden_dim: attr_usize(c, "hidden_dim")?,
        message_dim: attr_usize(c, "message_dim")?,
        action_dim: attr_usize(c, "action_dim")?,
    })
}
