//! Experiment orchestration: configuration files, per-seed run directories,
//! checkpoint loading with compatibility checks, and run summaries.

mod config;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::agents::{AgentError, IaConfig};
use crate::analysis::AnalysisError;
use crate::gridworld::{GridError, OBS_DIM};
use crate::tensor::{Checkpoint, CheckpointError, ParamStore};
use crate::training::{
    ca_checkpoint, ca_config_from_checkpoint, ia_checkpoint, ia_config_from_checkpoint, HyperParams, Method, MetricsRecord, MetricsWriter, Phase, TrainConfig,
    TrainError, Trainer,
};

pub use config::{parse_pairs, Ablation, Baseline, EvalAgent, ExperimentConfig, Mode, CONFIG_KEYS};

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("missing checkpoint: {0}")]
    MissingCheckpoint(String),
    #[error("incompatible checkpoint: {0}")]
    IncompatibleCheckpoint(String),
    #[error("checkpoint {path}: {source}")]
    Checkpoint { path: PathBuf, source: CheckpointError },
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Train(TrainError),
}

impl ExperimentError {
    /// Process exit status for this failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            ExperimentError::Config(_) => 2,
            ExperimentError::MissingCheckpoint(_) | ExperimentError::IncompatibleCheckpoint(_) | ExperimentError::Checkpoint { .. } => 3,
            ExperimentError::Numerical(_) => 4,
            _ => 1,
        }
    }
}

impl From<TrainError> for ExperimentError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::ConfigInvalid(m) => ExperimentError::Config(m),
            TrainError::Grid(GridError::UnknownTask(t)) => ExperimentError::Config(format!("unknown task `{t}`")),
            TrainError::Agent(AgentError::InvalidConfig(m)) => ExperimentError::Config(m),
            TrainError::MissingCheckpoint(m) => ExperimentError::MissingCheckpoint(m),
            TrainError::IncompatibleCheckpoint(m) => ExperimentError::IncompatibleCheckpoint(m),
            e @ TrainError::NonFiniteLoss { .. } => ExperimentError::Numerical(e.to_string()),
            other => ExperimentError::Train(other),
        }
    }
}

pub type Result<T, E = ExperimentError> = std::result::Result<T, E>;

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io { path: path.to_owned(), source }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(ExperimentError::MissingCheckpoint(format!("{} does not exist", path.display())));
    }
    Checkpoint::load(path).map_err(|source| ExperimentError::Checkpoint { path: path.to_owned(), source })
}

fn save_checkpoint(c: &Checkpoint, path: &Path) -> Result<String> {
    c.save(path).map_err(|source| ExperimentError::Checkpoint { path: path.to_owned(), source })?;
    Ok(c.digest())
}

/// Information-agent checkpoint checked against the message width the
/// experiment expects.
fn load_ia(path: &Path, kind: &str, message_dim: usize) -> Result<(Checkpoint, IaConfig)> {
    let c = load_checkpoint(path)?;
    if c.kind != kind {
        return Err(ExperimentError::IncompatibleCheckpoint(format!("{} holds a `{}` checkpoint, expected `{kind}`", path.display(), c.kind)));
    }
    let cfg = ia_config_from_checkpoint(&c)?;
    if cfg.obs_dim != OBS_DIM {
        return Err(ExperimentError::IncompatibleCheckpoint(format!("{}: obs_dim {} but the environments produce {OBS_DIM}", path.display(), cfg.obs_dim)));
    }
    if cfg.message_dim != message_dim {
        return Err(ExperimentError::IncompatibleCheckpoint(format!(
            "{}: information agent sends {}-dim messages but the control agent expects {message_dim}",
            path.display(),
            cfg.message_dim
        )));
    }
    Ok((c, cfg))
}

/// Build and configuration facts written next to every run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub run_id: String,
    pub mode: String,
    pub env: String,
    pub seed: u64,
    pub build: String,
    pub config_file: String,
    pub updates: usize,
    pub global_steps: u64,
    pub final_return: Option<f64>,
    pub mean_ice: f64,
    /// Digests of the checkpoints this run loaded.
    pub inputs: BTreeMap<String, String>,
    /// Digests of the checkpoints this run wrote.
    pub checkpoints: BTreeMap<String, String>,
}

/// One training or evaluation run with its own output directory.
pub struct RunPlan {
    pub run_id: String,
    pub train: TrainConfig,
    pub ia: Option<Checkpoint>,
    pub ca: Option<Checkpoint>,
    /// Resolved configuration that reproduces this run.
    pub config_text: String,
    pub checkpoint_every: usize,
}

fn seed_config(cfg: &ExperimentConfig, seed: u64) -> ExperimentConfig {
    ExperimentConfig { seeds: vec![seed], ..cfg.clone() }
}

fn ia_config(cfg: &ExperimentConfig) -> IaConfig {
    IaConfig {
        obs_dim: OBS_DIM,
        hidden_dim: cfg.hidden_dim,
        message_dim: cfg.message_dim,
        context_len: cfg.context_len,
        num_heads: cfg.num_heads,
        action_dim: crate::gridworld::NUM_ACTIONS,
        trunk: cfg.trunk,
    }
}

fn train_config(cfg: &ExperimentConfig, method: Method, phase: Phase, tasks: Vec<String>, seed: u64, label: String, run_id: String, hp: HyperParams) -> TrainConfig {
    let mut hp = hp;
    if cfg.no_coherence {
        hp.lambda_coh = 0.0;
    }
    TrainConfig {
        run_id,
        label,
        method,
        phase,
        tasks,
        seed,
        hp,
        ia: ia_config(cfg),
        ca_hidden_dim: cfg.ca_hidden_dim,
        persistent_context: cfg.persistent_context,
        record_timing: cfg.record_timing,
        eval_steps: cfg.eval_steps,
    }
}

/// Expands an experiment into its runs. Ablations expand lazily because their
/// deployments depend on the pretraining outputs; see [`run_experiment`].
pub fn plan(cfg: &ExperimentConfig) -> Result<Vec<RunPlan>> {
    cfg.validate()?;
    let mut plans = Vec::new();
    for &seed in &cfg.seeds {
        let text = seed_config(cfg, seed).to_text();
        match cfg.mode {
            Mode::Pretrain => {
                let run_id = format!("pretrain-s{seed}");
                let t = train_config(cfg, Method::Coral, Phase::Pretrain, cfg.tasks.clone(), seed, "pretrain".into(), run_id.clone(), cfg.hp);
                plans.push(RunPlan { run_id, train: t, ia: None, ca: None, config_text: text, checkpoint_every: cfg.checkpoint_every });
            }
            Mode::Deploy => {
                let (ia, ia_cfg, method, label) = if cfg.random_message {
                    (None, None, Method::RandomMessage, "baseline-random-msg")
                } else {
                    let path = cfg.ia_ckpt.as_deref().ok_or_else(|| ExperimentError::Config("deploy needs `ia_ckpt`".into()))?;
                    let (c, ic) = load_ia(path, "ia", cfg.message_dim)?;
                    (Some(c), Some(ic), Method::Coral, "deploy")
                };
                for env in &cfg.tasks {
                    let run_id = format!("{label}-{env}-s{seed}");
                    let mut t = train_config(cfg, method, Phase::Deploy, vec![env.clone()], seed, label.into(), run_id.clone(), cfg.hp);
                    if let Some(ic) = ia_cfg {
                        t.ia = ic;
                    }
                    plans.push(RunPlan { run_id, train: t, ia: ia.clone(), ca: None, config_text: text.clone(), checkpoint_every: cfg.checkpoint_every });
                }
            }
            Mode::Zeroshot => {
                let (method, label) = match cfg.eval_agent {
                    EvalAgent::Coral => (Method::Coral, "zeroshot".to_string()),
                    EvalAgent::Baseline(b) => (baseline_method(b), format!("zeroshot-{}", b.as_str())),
                };
                let ia = match (method, cfg.ia_ckpt.as_deref()) {
                    (Method::Coral, Some(p)) => Some(load_ia(p, "ia", cfg.message_dim)?),
                    (Method::WorldModel, Some(p)) => Some(load_ia(p, "wm", cfg.message_dim)?),
                    (Method::Coral | Method::WorldModel, None) => return Err(ExperimentError::Config("zeroshot needs `ia_ckpt`".into())),
                    _ => None,
                };
                let ca = match (method, cfg.ca_ckpt.as_deref()) {
                    (Method::WorldModel, _) => None,
                    (_, Some(p)) => Some(load_checkpoint(p)?),
                    (_, None) => return Err(ExperimentError::Config("zeroshot needs `ca_ckpt`".into())),
                };
                let ca_cfg = ca.as_ref().map(ca_config_from_checkpoint).transpose()?;
                if let Some(cc) = &ca_cfg {
                    let sent = ia.as_ref().map(|(_, ic)| ic.message_dim).unwrap_or(cfg.message_dim);
                    if cc.message_dim != sent {
                        return Err(ExperimentError::IncompatibleCheckpoint(format!("control agent expects {}-dim messages but receives {sent}", cc.message_dim)));
                    }
                    if cc.obs_dim != OBS_DIM {
                        return Err(ExperimentError::IncompatibleCheckpoint(format!("control agent expects obs_dim {} but the environments produce {OBS_DIM}", cc.obs_dim)));
                    }
                }
                for env in &cfg.tasks {
                    let run_id = format!("{label}-{env}-s{seed}");
                    let mut t = train_config(cfg, method, Phase::Zeroshot, vec![env.clone()], seed, label.clone(), run_id.clone(), cfg.hp);
                    if let Some((_, ic)) = &ia {
                        t.ia = *ic;
                    }
                    if let Some(cc) = &ca_cfg {
                        t.ca_hidden_dim = cc.hidden_dim;
                        t.ia.message_dim = cc.message_dim;
                    }
                    plans.push(RunPlan { run_id, train: t, ia: ia.as_ref().map(|x| x.0.clone()), ca: ca.clone(), config_text: text.clone(), checkpoint_every: 0 });
                }
            }
            Mode::Baseline => {
                for &b in &cfg.baselines {
                    for env in &cfg.tasks {
                        let label = format!("baseline-{}", b.as_str());
                        let run_id = format!("{label}-{env}-s{seed}");
                        let t = train_config(cfg, baseline_method(b), Phase::Deploy, vec![env.clone()], seed, label, run_id.clone(), cfg.hp);
                        plans.push(RunPlan { run_id, train: t, ia: None, ca: None, config_text: text.clone(), checkpoint_every: cfg.checkpoint_every });
                    }
                }
            }
            Mode::Ablate => {
                for &a in &cfg.ablations {
                    let acfg = ablated(cfg, a);
                    let run_id = format!("ablation-{}-pretrain-s{seed}", a.name());
                    let text = ExperimentConfig { ablations: vec![a], ..seed_config(cfg, seed) }.to_text();
                    let t = train_config(&acfg, Method::Coral, Phase::Pretrain, cfg.tasks.clone(), seed, format!("ablation-{}-pretrain", a.name()), run_id.clone(), cfg.hp);
                    plans.push(RunPlan { run_id, train: t, ia: None, ca: None, config_text: text, checkpoint_every: cfg.checkpoint_every });
                }
            }
        }
    }
    Ok(plans)
}

fn baseline_method(b: Baseline) -> Method {
    match b {
        Baseline::Ppo => Method::Ppo,
        Baseline::WorldModel => Method::WorldModel,
        Baseline::RandomMessage => Method::RandomMessage,
    }
}

fn ablated(cfg: &ExperimentConfig, a: Ablation) -> ExperimentConfig {
    let mut c = cfg.clone();
    match a {
        Ablation::NoCoherence => c.no_coherence = true,
        Ablation::Gru => c.trunk = crate::agents::Trunk::Gru,
        Ablation::MessageDim(d) => c.message_dim = d,
    }
    c
}

/// Deployment runs that follow an ablated pretraining run.
fn ablation_deploys(cfg: &ExperimentConfig, pre: &RunPlan, ia: &Checkpoint) -> Vec<RunPlan> {
    let name = pre.train.label.trim_start_matches("ablation-").trim_end_matches("-pretrain").to_owned();
    let seed = pre.train.seed;
    let hp = HyperParams { total_steps: cfg.deploy_steps, ..HyperParams::deploy() };
    cfg.eval_tasks
        .iter()
        .map(|env| {
            let run_id = format!("ablation-{name}-{env}-s{seed}");
            let mut t = pre.train.clone();
            t.run_id = run_id.clone();
            t.label = format!("ablation-{name}");
            t.phase = Phase::Deploy;
            t.tasks = vec![env.clone()];
            t.hp = HyperParams { lambda_coh: t.hp.lambda_coh, ..hp };
            RunPlan { run_id, train: t, ia: Some(ia.clone()), ca: None, config_text: pre.config_text.clone(), checkpoint_every: pre.checkpoint_every }
        })
        .collect()
}

/// Output of one finished run.
pub struct RunOutput {
    pub summary: RunSummary,
    pub ia: Option<Checkpoint>,
    pub ca: Option<Checkpoint>,
    pub metrics: Vec<MetricsRecord>,
}

fn checkpoints(t: &Trainer, plan: &RunPlan) -> (Option<Checkpoint>, Option<Checkpoint>) {
    let cfg = t.config();
    let hp = &cfg.hp;
    let ia = t.ia().map(|p| match (&plan.ia, cfg.phase) {
        // Frozen agents are written back exactly as loaded.
        (Some(orig), Phase::Deploy | Phase::Zeroshot) if cfg.method == Method::Coral => orig.clone(),
        _ => {
            let kind = if cfg.method == Method::WorldModel { "wm" } else { "ia" };
            let mut c = ia_checkpoint(p, &cfg.ia, kind, t.rng_state(), hp);
            c.attrs.insert("run_id".into(), cfg.run_id.clone());
            c
        }
    });
    let ca = t.ca().map(|p| match (&plan.ca, cfg.phase) {
        (Some(orig), Phase::Zeroshot) => orig.clone(),
        _ => {
            let cc = crate::agents::CaConfig { obs_dim: cfg.ia.obs_dim, message_dim: cfg.ia.message_dim, hidden_dim: cfg.ca_hidden_dim, action_dim: cfg.ia.action_dim };
            let mut c = ca_checkpoint(p, &cc, t.rng_state(), hp);
            c.attrs.insert("run_id".into(), cfg.run_id.clone());
            c
        }
    });
    (ia, ca)
}

fn params(c: &Option<Checkpoint>) -> Option<ParamStore<f32>> {
    c.as_ref().map(|c| c.params.clone())
}

/// Runs `plan` to completion, writing `config.txt`, `metrics.csv`, the
/// checkpoints and `summary.json` under `root/<run_id>`.
pub fn execute(plan: &RunPlan, root: &Path, build: &str) -> Result<RunOutput> {
    let dir = root.join(&plan.run_id);
    std::fs::create_dir_all(&dir).map_err(io(&dir))?;
    let cfg_path = dir.join("config.txt");
    std::fs::write(&cfg_path, &plan.config_text).map_err(io(&cfg_path))?;

    let mut inputs = BTreeMap::new();
    if let Some(c) = &plan.ia {
        inputs.insert("ia".to_string(), c.digest());
    }
    if let Some(c) = &plan.ca {
        inputs.insert("ca".to_string(), c.digest());
    }
    let mut trainer = Trainer::new(plan.train.clone(), params(&plan.ia), params(&plan.ca))?;
    let metrics_path = dir.join("metrics.csv");
    let mut writer = MetricsWriter::create(&metrics_path).map_err(|e| ExperimentError::Train(TrainError::Metrics(e)))?;
    let write_ckpts = |t: &Trainer| -> Result<BTreeMap<String, String>> {
        let (ia, ca) = checkpoints(t, plan);
        let mut out = BTreeMap::new();
        for (name, c) in [("ia.ckpt", ia), ("ca.ckpt", ca)] {
            if let Some(c) = c {
                out.insert(name.to_string(), save_checkpoint(&c, &dir.join(name))?);
            }
        }
        Ok(out)
    };

    let total = trainer.total_updates();
    let mut metrics = Vec::with_capacity(total);
    for u in 0..total {
        let r = trainer.step()?;
        writer.write(&r).map_err(|e| ExperimentError::Train(TrainError::Metrics(e)))?;
        metrics.push(r);
        if plan.checkpoint_every > 0 && (u + 1) % plan.checkpoint_every == 0 && u + 1 < total {
            write_ckpts(&trainer)?;
        }
    }
    let digests = write_ckpts(&trainer)?;
    let (ia, ca) = checkpoints(&trainer, plan);

    let summary = RunSummary {
        run_id: plan.run_id.clone(),
        mode: plan.train.label.clone(),
        env: plan.train.tasks.join(","),
        seed: plan.train.seed,
        build: build.to_owned(),
        config_file: "config.txt".into(),
        updates: trainer.updates_done(),
        global_steps: trainer.global_step(),
        final_return: metrics.iter().rev().find_map(|m| m.episodic_return_mean),
        mean_ice: if metrics.is_empty() { 0.0 } else { metrics.iter().map(|m| m.ice_mean).sum::<f64>() / metrics.len() as f64 },
        inputs,
        checkpoints: digests,
    };
    let summary_path = dir.join("summary.json");
    let mut json = serde_json::to_string_pretty(&summary).expect("serializable summary");
    json.push('\n');
    std::fs::write(&summary_path, json).map_err(io(&summary_path))?;
    Ok(RunOutput { summary, ia, ca, metrics })
}

/// Executes every run of `cfg` under `root`; ablation deployments start once
/// their pretraining run has produced a checkpoint.
pub fn run_experiment(cfg: &ExperimentConfig, root: &Path, build: &str, mut progress: impl FnMut(&RunSummary)) -> Result<Vec<RunSummary>> {
    let plans = plan(cfg)?;
    let outputs: Vec<Result<(RunSummary, Vec<RunPlan>)>> = if cfg.parallel_seeds {
        std::thread::scope(|s| {
            let handles: Vec<_> = plans.iter().map(|p| s.spawn(move || run_one(cfg, p, root, build))).collect();
            handles.into_iter().map(|h| h.join().expect("run thread panicked")).collect()
        })
    } else {
        plans.iter().map(|p| run_one(cfg, p, root, build)).collect()
    };
    let mut summaries = Vec::new();
    for out in outputs {
        let (summary, follow_ups) = out?;
        progress(&summary);
        summaries.push(summary);
        for f in follow_ups {
            let s = execute(&f, root, build)?.summary;
            progress(&s);
            summaries.push(s);
        }
    }
    Ok(summaries)
}

fn run_one(cfg: &ExperimentConfig, plan: &RunPlan, root: &Path, build: &str) -> Result<(RunSummary, Vec<RunPlan>)> {
    let out = execute(plan, root, build)?;
    let follow = match (&cfg.mode, &out.ia) {
        (Mode::Ablate, Some(ia)) => ablation_deploys(cfg, plan, ia),
        _ => Vec::new(),
    };
    Ok((out.summary, follow))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(mode: Mode, extra: &str) -> ExperimentConfig {
        let text = format!("num_envs = 2\nrollout_len = 8\nminibatches = 2\nepochs = 1\ntotal_steps = 32\nhidden_dim = 16\nca_hidden_dim = 16\neval_steps = 16\n{extra}");
        ExperimentConfig::from_pairs(Some(mode), &parse_pairs(&text).unwrap()).unwrap()
    }

    #[test]
    fn pretrain_writes_every_artifact() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny(Mode::Pretrain, "tasks = Empty8x8,LavaGapS6\nseeds = 3");
        let s = run_experiment(&cfg, dir.path(), "test", |_| {}).unwrap();
        assert_eq!(s.len(), 1);
        let run = dir.path().join("pretrain-s3");
        for f in ["config.txt", "metrics.csv", "ia.ckpt", "ca.ckpt", "summary.json"] {
            assert!(run.join(f).exists(), "{f}");
        }
        assert_eq!(s[0].updates, 2);
        let again = ExperimentConfig::from_pairs(None, &parse_pairs(&std::fs::read_to_string(run.join("config.txt")).unwrap()).unwrap()).unwrap();
        assert_eq!(again.seeds, vec![3]);
    }

    #[test]
    fn message_width_mismatch_is_refused() {
        let dir = tempfile::tempdir().unwrap();
        let pre = tiny(Mode::Pretrain, "tasks = Empty8x8\nmessage_dim = 16");
        run_experiment(&pre, dir.path(), "test", |_| {}).unwrap();
        let ia = dir.path().join("pretrain-s0/ia.ckpt");
        let dep = tiny(Mode::Deploy, &format!("tasks = Empty8x8\nia_ckpt = {}\nmessage_dim = 32", ia.display()));
        let e = plan(&dep).err().unwrap();
        assert!(matches!(e, ExperimentError::IncompatibleCheckpoint(_)), "{e}");
        assert_eq!(e.exit_code(), 3);
    }

    #[test]
    fn missing_checkpoint_file_exits_with_checkpoint_code() {
        let dep = tiny(Mode::Deploy, "tasks = Empty8x8\nia_ckpt = /nonexistent/ia.ckpt");
        assert_eq!(plan(&dep).err().unwrap().exit_code(), 3);
    }

    #[test]
    fn non_finite_training_maps_to_numerical_exit() {
        let e: ExperimentError = TrainError::NonFiniteLoss { update: 3, detail: "nan".into() }.into();
        assert_eq!(e.exit_code(), 4);
    }
}
