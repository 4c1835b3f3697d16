use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::agents::Trunk;
use crate::gridworld::{make_task, PRETRAIN_TASKS};
use crate::training::HyperParams;

use super::{ExperimentError, Result};

/// Top-level experiment kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Pretrain,
    Deploy,
    Zeroshot,
    Baseline,
    Ablate,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Pretrain => "pretrain",
            Mode::Deploy => "deploy",
            Mode::Zeroshot => "zeroshot",
            Mode::Baseline => "baseline",
            Mode::Ablate => "ablate",
        }
    }
}

impl FromStr for Mode {
    type Err = ExperimentError;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "pretrain" => Mode::Pretrain,
            "deploy" => Mode::Deploy,
            "zeroshot" => Mode::Zeroshot,
            "baseline" => Mode::Baseline,
            "ablate" => Mode::Ablate,
            _ => return Err(ExperimentError::Config(format!("unknown mode `{s}`"))),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Baseline {
    Ppo,
    WorldModel,
    RandomMessage,
}

impl Baseline {
    pub const ALL: [Baseline; 3] = [Baseline::Ppo, Baseline::WorldModel, Baseline::RandomMessage];

    pub fn as_str(self) -> &'static str {
        match self {
            Baseline::Ppo => "ppo",
            Baseline::WorldModel => "wm",
            Baseline::RandomMessage => "random-msg",
        }
    }
}

impl FromStr for Baseline {
    type Err = ExperimentError;
    fn from_str(s: &str) -> Result<Self> {
        Baseline::ALL.into_iter().find(|b| b.as_str() == s).ok_or_else(|| ExperimentError::Config(format!("unknown baseline `{s}` (expected ppo, wm or random-msg)")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Ablation {
    /// Coherence weight set to zero.
    NoCoherence,
    /// Recurrent trunk in place of the transformer.
    Gru,
    MessageDim(usize),
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [Ablation::NoCoherence, Ablation::Gru, Ablation::MessageDim(16), Ablation::MessageDim(32), Ablation::MessageDim(64)];

    pub fn name(self) -> String {
        match self {
            Ablation::NoCoherence => "no-coh".into(),
            Ablation::Gru => "gru".into(),
            Ablation::MessageDim(d) => format!("msgdim-{d}"),
        }
    }
}

impl FromStr for Ablation {
    type Err = ExperimentError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "no-coh" => Ok(Ablation::NoCoherence),
            "gru" => Ok(Ablation::Gru),
            _ => s
                .strip_prefix("msgdim-")
                .and_then(|d| d.parse().ok())
                .filter(|d| [16, 32, 64].contains(d))
                .map(Ablation::MessageDim)
                .ok_or_else(|| ExperimentError::Config(format!("unknown ablation `{s}` (expected no-coh, gru or msgdim-16/32/64)"))),
        }
    }
}

/// Which agent pair a zero-shot evaluation loads.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalAgent {
    Coral,
    Baseline(Baseline),
}

/// Fully resolved experiment settings. Built from `key = value` text plus
/// overrides; [`ExperimentConfig::to_text`] writes the resolved form back.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub mode: Mode,
    pub tasks: Vec<String>,
    pub seeds: Vec<u64>,
    pub hp: HyperParams,
    pub ia_ckpt: Option<PathBuf>,
    pub ca_ckpt: Option<PathBuf>,
    pub out: PathBuf,
    pub hidden_dim: usize,
    pub message_dim: usize,
    pub context_len: usize,
    pub num_heads: usize,
    pub trunk: Trunk,
    pub ca_hidden_dim: usize,
    pub no_coherence: bool,
    pub random_message: bool,
    pub baselines: Vec<Baseline>,
    pub ablations: Vec<Ablation>,
    pub eval_agent: EvalAgent,
    pub eval_steps: u64,
    /// Deployment tasks for each ablated pretraining run.
    pub eval_tasks: Vec<String>,
    /// Deployment length for each ablated pretraining run.
    pub deploy_steps: u64,
    pub persistent_context: bool,
    pub record_timing: bool,
    /// Write checkpoints every this many updates (0: only at the end).
    pub checkpoint_every: usize,
    pub parallel_seeds: bool,
}

/// Every accepted key, in the order the resolved file lists them.
pub const CONFIG_KEYS: &[&str] = &[
    "mode",
    "tasks",
    "seeds",
    "out",
    "ia_ckpt",
    "ca_ckpt",
    "num_envs",
    "rollout_len",
    "minibatches",
    "epochs",
    "total_steps",
    "gamma",
    "gae_lambda",
    "clip_eps",
    "ent_coef",
    "vf_coef",
    "lambda_dyn",
    "lambda_coh",
    "lambda_causal",
    "alpha",
    "lr",
    "max_grad_norm",
    "anneal_lr",
    "obs_loss",
    "hidden_dim",
    "message_dim",
    "context_len",
    "num_heads",
    "trunk",
    "ca_hidden_dim",
    "no_coh",
    "random_message",
    "baselines",
    "ablations",
    "eval_agent",
    "eval_steps",
    "eval_tasks",
    "deploy_steps",
    "persistent_context",
    "record_timing",
    "checkpoint_every",
    "parallel_seeds",
];

/// Parses `key = value` lines. `#` starts a comment; blank lines are skipped.
pub fn parse_pairs(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| ExperimentError::Config(format!("line {}: expected key = value, got `{raw}`", n + 1)))?;
        let k = k.trim();
        if !CONFIG_KEYS.contains(&k) {
            return Err(ExperimentError::Config(format!("line {}: unknown key `{k}`", n + 1)));
        }
        out.insert(k.to_owned(), v.trim().to_owned());
    }
    Ok(out)
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| ExperimentError::Config(format!("`{key}`: cannot parse `{v}`")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(ExperimentError::Config(format!("`{key}`: expected true or false, got `{v}`"))),
    }
}

fn list(v: &str) -> Vec<&str> {
    v.split(',').map(str::trim).filter(|s| !s.is_empty()).collect()
}

/// Integer step count; accepts `1000000` or `1e6`.
fn parse_count(key: &str, v: &str) -> Result<u64> {
    if let Ok(n) = v.parse() {
        return Ok(n);
    }
    match v.parse::<f64>() {
        Ok(x) if x >= 0.0 && x.fract() == 0.0 && x < u64::MAX as f64 => Ok(x as u64),
        _ => Err(ExperimentError::Config(format!("`{key}`: expected a non-negative integer, got `{v}`"))),
    }
}

/// `0,1,2` or `0..5` (exclusive end).
fn parse_seeds(v: &str) -> Result<Vec<u64>> {
    if let Some((a, b)) = v.split_once("..") {
        let (a, b): (u64, u64) = (parse("seeds", a.trim())?, parse("seeds", b.trim())?);
        return Ok((a..b).collect());
    }
    list(v).into_iter().map(|s| parse("seeds", s)).collect()
}

impl ExperimentConfig {
    /// Defaults for `mode` before any key is applied.
    pub fn defaults(mode: Mode) -> Self {
        let pretraining = matches!(mode, Mode::Pretrain | Mode::Ablate);
        let hp = if pretraining { HyperParams::pretrain() } else { HyperParams::deploy() };
        let ia = crate::agents::IaConfig::default();
        Self {
            mode,
            tasks: if pretraining { PRETRAIN_TASKS.iter().map(|s| s.to_string()).collect() } else { Vec::new() },
            seeds: vec![0],
            hp,
            ia_ckpt: None,
            ca_ckpt: None,
            out: PathBuf::from("runs"),
            hidden_dim: ia.hidden_dim,
            message_dim: ia.message_dim,
            context_len: ia.context_len,
            num_heads: ia.num_heads,
            trunk: ia.trunk,
            ca_hidden_dim: 128,
            no_coherence: false,
            random_message: false,
            baselines: Baseline::ALL.to_vec(),
            ablations: Ablation::ALL.to_vec(),
            eval_agent: EvalAgent::Coral,
            eval_steps: 1_000_000,
            eval_tasks: vec!["DoorKey8x8".into()],
            deploy_steps: HyperParams::deploy().total_steps,
            persistent_context: false,
            record_timing: false,
            checkpoint_every: 0,
            parallel_seeds: false,
        }
    }

    /// Applies `pairs` over the defaults of the mode they name (or `mode`
    /// when the pairs do not set one) and validates the result.
    pub fn from_pairs(mode: Option<Mode>, pairs: &BTreeMap<String, String>) -> Result<Self> {
        let mode = match (mode, pairs.get("mode")) {
            (Some(m), Some(v)) if m.as_str() != v => return Err(ExperimentError::Config(format!("config file is for mode `{v}` but `{}` was requested", m.as_str()))),
            (Some(m), _) => m,
            (None, Some(v)) => v.parse()?,
            (None, None) => return Err(ExperimentError::Config("no mode given".into())),
        };
        let mut c = Self::defaults(mode);
        for (k, v) in pairs {
            c.set(k, v)?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let hp = &mut self.hp;
        match key {
            "mode" => {
                let m: Mode = v.parse()?;
                if m != self.mode {
                    return Err(ExperimentError::Config(format!("mode cannot change from `{}` to `{v}`", self.mode.as_str())));
                }
            }
            "tasks" => self.tasks = list(v).into_iter().map(String::from).collect(),
            "seeds" => self.seeds = parse_seeds(v)?,
            "out" => self.out = PathBuf::from(v),
            "ia_ckpt" => self.ia_ckpt = (!v.is_empty()).then(|| PathBuf::from(v)),
            "ca_ckpt" => self.ca_ckpt = (!v.is_empty()).then(|| PathBuf::from(v)),
            "num_envs" => hp.num_envs = parse(key, v)?,
            "rollout_len" => hp.rollout_len = parse(key, v)?,
            "minibatches" => hp.minibatches = parse(key, v)?,
            "epochs" => hp.epochs = parse(key, v)?,
            "total_steps" => hp.total_steps = parse_count(key, v)?,
            "gamma" => hp.gamma = parse(key, v)?,
            "gae_lambda" => hp.gae_lambda = parse(key, v)?,
            "clip_eps" => hp.clip_eps = parse(key, v)?,
            "ent_coef" => hp.ent_coef = parse(key, v)?,
            "vf_coef" => hp.vf_coef = parse(key, v)?,
            "lambda_dyn" => hp.lambda_dyn = parse(key, v)?,
            "lambda_coh" => hp.lambda_coh = parse(key, v)?,
            "lambda_causal" => hp.lambda_causal = parse(key, v)?,
            "alpha" => hp.alpha = parse(key, v)?,
            "lr" => hp.base_lr = parse(key, v)?,
            "max_grad_norm" => hp.max_grad_norm = parse(key, v)?,
            "anneal_lr" => hp.anneal_lr = parse_bool(key, v)?,
            "obs_loss" => {
                hp.obs_loss_mean = match v {
                    "mean" => true,
                    "sum" => false,
                    _ => return Err(ExperimentError::Config(format!("`obs_loss`: expected mean or sum, got `{v}`"))),
                }
            }
            "hidden_dim" => self.hidden_dim = parse(key, v)?,
            "message_dim" => self.message_dim = parse(key, v)?,
            "context_len" => self.context_len = parse(key, v)?,
            "num_heads" => self.num_heads = parse(key, v)?,
            "trunk" => self.trunk = v.parse().map_err(|e: crate::agents::AgentError| ExperimentError::Config(e.to_string()))?,
            "ca_hidden_dim" => self.ca_hidden_dim = parse(key, v)?,
            "no_coh" => self.no_coherence = parse_bool(key, v)?,
            "random_message" => self.random_message = parse_bool(key, v)?,
            "baselines" => self.baselines = list(v).into_iter().map(str::parse).collect::<Result<_>>()?,
            "ablations" => self.ablations = list(v).into_iter().map(str::parse).collect::<Result<_>>()?,
            "eval_agent" => {
                self.eval_agent = match v {
                    "coral" => EvalAgent::Coral,
                    other => EvalAgent::Baseline(other.parse()?),
                }
            }
            "eval_steps" => self.eval_steps = parse_count(key, v)?,
            "eval_tasks" => self.eval_tasks = list(v).into_iter().map(String::from).collect(),
            "deploy_steps" => self.deploy_steps = parse_count(key, v)?,
            "persistent_context" => self.persistent_context = parse_bool(key, v)?,
            "record_timing" => self.record_timing = parse_bool(key, v)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, v)?,
            "parallel_seeds" => self.parallel_seeds = parse_bool(key, v)?,
            _ => return Err(ExperimentError::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ExperimentError::Config(m));
        if self.seeds.is_empty() {
            return bad("at least one seed is required".into());
        }
        if self.tasks.is_empty() {
            return bad(format!("{} needs `tasks`", self.mode.as_str()));
        }
        for t in self.tasks.iter().chain(&self.eval_tasks) {
            make_task(t).map_err(|e| ExperimentError::Config(e.to_string()))?;
        }
        self.hp.validate().map_err(|e| ExperimentError::Config(e.to_string()))?;
        match self.mode {
            Mode::Deploy if self.ia_ckpt.is_none() && !self.random_message => return bad("deploy needs `ia_ckpt`".into()),
            Mode::Zeroshot => {
                let need_ia = matches!(self.eval_agent, EvalAgent::Coral | EvalAgent::Baseline(Baseline::WorldModel));
                let need_ca = !matches!(self.eval_agent, EvalAgent::Baseline(Baseline::WorldModel));
                if need_ia && self.ia_ckpt.is_none() {
                    return bad("zeroshot needs `ia_ckpt`".into());
                }
                if need_ca && self.ca_ckpt.is_none() {
                    return bad("zeroshot needs `ca_ckpt`".into());
                }
            }
            Mode::Baseline if self.baselines.is_empty() => return bad("baseline needs at least one entry in `baselines`".into()),
            Mode::Ablate if self.ablations.is_empty() => return bad("ablate needs at least one entry in `ablations`".into()),
            Mode::Ablate if self.deploy_steps < (16 * self.hp.rollout_len) as u64 && !self.eval_tasks.is_empty() => {
                return bad(format!("deploy_steps {} is below one deployment rollout", self.deploy_steps))
            }
            _ => {}
        }
        Ok(())
    }

    /// Resolved `key = value` form; parsing it back yields an equal config.
    pub fn to_text(&self) -> String {
        let hp = &self.hp;
        let path = |p: &Option<PathBuf>| p.as_deref().map(|p| p.display().to_string()).unwrap_or_default();
        let join = |xs: Vec<String>| xs.join(",");
        let values: Vec<(&str, String)> = vec![
            ("mode", self.mode.as_str().into()),
            ("tasks", self.tasks.join(",")),
            ("seeds", join(self.seeds.iter().map(u64::to_string).collect())),
            ("out", self.out.display().to_string()),
            ("ia_ckpt", path(&self.ia_ckpt)),
            ("ca_ckpt", path(&self.ca_ckpt)),
            ("num_envs", hp.num_envs.to_string()),
            ("rollout_len", hp.rollout_len.to_string()),
            ("minibatches", hp.minibatches.to_string()),
            ("epochs", hp.epochs.to_string()),
            ("total_steps", hp.total_steps.to_string()),
            ("gamma", hp.gamma.to_string()),
            ("gae_lambda", hp.gae_lambda.to_string()),
            ("clip_eps", hp.clip_eps.to_string()),
            ("ent_coef", hp.ent_coef.to_string()),
            ("vf_coef", hp.vf_coef.to_string()),
            ("lambda_dyn", hp.lambda_dyn.to_string()),
            ("lambda_coh", hp.lambda_coh.to_string()),
            ("lambda_causal", hp.lambda_causal.to_string()),
            ("alpha", hp.alpha.to_string()),
            ("lr", hp.base_lr.to_string()),
            ("max_grad_norm", hp.max_grad_norm.to_string()),
            ("anneal_lr", hp.anneal_lr.to_string()),
            ("obs_loss", if hp.obs_loss_mean { "mean" } else { "sum" }.into()),
            ("hidden_dim", self.hidden_dim.to_string()),
            ("message_dim", self.message_dim.to_string()),
            ("context_len", self.context_len.to_string()),
            ("num_heads", self.num_heads.to_string()),
            ("trunk", self.trunk.to_string()),
            ("ca_hidden_dim", self.ca_hidden_dim.to_string()),
            ("no_coh", self.no_coherence.to_string()),
            ("random_message", self.random_message.to_string()),
            ("baselines", join(self.baselines.iter().map(|b| b.as_str().to_string()).collect())),
            ("ablations", join(self.ablations.iter().map(|a| a.name()).collect())),
            (
                "eval_agent",
                match self.eval_agent {
                    EvalAgent::Coral => "coral".into(),
                    EvalAgent::Baseline(b) => b.as_str().into(),
                },
            ),
            ("eval_steps", self.eval_steps.to_string()),
            ("eval_tasks", self.eval_tasks.join(",")),
            ("deploy_steps", self.deploy_steps.to_string()),
            ("persistent_context", self.persistent_context.to_string()),
            ("record_timing", self.record_timing.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
            ("parallel_seeds", self.parallel_seeds.to_string()),
        ];
        debug_assert_eq!(values.len(), CONFIG_KEYS.len());
        let mut s = String::new();
        for (k, v) in values {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    pub fn load(path: impl AsRef<Path>, mode: Option<Mode>, overrides: &BTreeMap<String, String>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref()).map_err(|e| ExperimentError::Config(format!("{}: {e}", path.as_ref().display())))?;
        let mut pairs = parse_pairs(&text)?;
        pairs.extend(overrides.iter().map(|(k, v)| (k.clone(), v.clone())));
        Self::from_pairs(mode, &pairs)
    }
}
