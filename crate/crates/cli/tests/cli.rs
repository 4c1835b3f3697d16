use std::path::Path;
use std::process::{Command, Output};

const TINY: &[&str] = &[
    "--set", "num_envs=2", "--set", "rollout_len=8", "--set", "minibatches=2", "--set", "epochs=1", "--set", "total_steps=48", "--set", "hidden_dim=16",
    "--set", "ca_hidden_dim=16", "--set", "eval_steps=32",
];

fn coral(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_coral")).args(args).env("CORAL_OUT", out).output().expect("spawn coral")
}

fn tiny(sub: &str, extra: &[&str], out: &Path) -> Output {
    let mut args = vec![sub];
    args.extend_from_slice(TINY);
    args.extend_from_slice(extra);
    coral(&args, out)
}

fn ok(o: &Output) {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn manifest_lists_the_registry() {
    let dir = tempfile::tempdir().unwrap();
    let o = coral(&["manifest"], dir.path());
    ok(&o);
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let names: Vec<&str> = v.as_array().unwrap().iter().map(|e| e["name"].as_str().unwrap()).collect();
    assert_eq!(names.len(), 16);
    assert!(names.contains(&"DoorKey-Random-6x6") && names.contains(&"DynObs16x16"));
}

#[test]
fn deploy_without_information_agent_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = tiny("deploy", &["--tasks", "DoorKey6x6"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("ia_ckpt"));
}

#[test]
fn unknown_key_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(tiny("pretrain", &["--set", "learning_rate=1"], dir.path()).status.code(), Some(2));
}

#[test]
fn pretrain_is_reproducible_and_feeds_deploy_and_zeroshot() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let args = ["--tasks", "Empty8x8,LavaGapS6", "--seeds", "1"];
    ok(&tiny("pretrain", &args, a.path()));
    ok(&tiny("pretrain", &args, b.path()));
    let run_a = a.path().join("pretrain-s1");
    let run_b = b.path().join("pretrain-s1");
    for f in ["config.txt", "metrics.csv", "ia.ckpt", "ca.ckpt", "summary.json"] {
        assert!(run_a.join(f).is_file(), "missing {f}");
    }
    for f in ["metrics.csv", "ia.ckpt", "ca.ckpt"] {
        assert_eq!(std::fs::read(run_a.join(f)).unwrap(), std::fs::read(run_b.join(f)).unwrap(), "{f} differs");
    }
    let summary: serde_json::Value = serde_json::from_slice(&std::fs::read(run_a.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["seed"], 1);
    assert!(summary["build"].as_str().unwrap().starts_with("coral "));

    // The resolved config reproduces the run.
    let c = tempfile::tempdir().unwrap();
    ok(&coral(&["pretrain", "--config", run_a.join("config.txt").to_str().unwrap(), "--out", c.path().to_str().unwrap()], c.path()));
    assert_eq!(std::fs::read(run_a.join("metrics.csv")).unwrap(), std::fs::read(c.path().join("pretrain-s1/metrics.csv")).unwrap());

    let ia = run_a.join("ia.ckpt");
    let ca = run_a.join("ca.ckpt");
    let dep = tempfile::tempdir().unwrap();
    ok(&tiny("deploy", &["--tasks", "Empty8x8", "--ia-ckpt", ia.to_str().unwrap()], dep.path()));
    let frozen = dep.path().join("deploy-Empty8x8-s0/ia.ckpt");
    assert_eq!(std::fs::read(&ia).unwrap(), std::fs::read(frozen).unwrap());

    let zs = tempfile::tempdir().unwrap();
    ok(&tiny("zeroshot", &["--tasks", "DoorKey8x8", "--ia-ckpt", ia.to_str().unwrap(), "--ca-ckpt", ca.to_str().unwrap()], zs.path()));
    let run = zs.path().join("zeroshot-DoorKey8x8-s0");
    assert_eq!(std::fs::read(&ca).unwrap(), std::fs::read(run.join("ca.ckpt")).unwrap());
    let metrics = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    // two evaluation rollouts, no loss values
    assert_eq!(metrics.lines().count(), 3);
    assert!(metrics.lines().nth(1).unwrap().contains(",zeroshot,DoorKey8x8,0,16,"));

    let o = tiny("deploy", &["--tasks", "Empty8x8", "--ia-ckpt", ia.to_str().unwrap(), "--set", "message_dim=16"], dep.path());
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn baselines_then_analysis() {
    let dir = tempfile::tempdir().unwrap();
    // 256-step episodes: every env finishes at least once
    ok(&tiny("baseline", &["--tasks", "Empty8x8", "--seeds", "0,1", "--set", "total_steps=512"], dir.path()));
    for b in ["ppo", "wm", "random-msg"] {
        assert!(dir.path().join(format!("baseline-{b}-Empty8x8-s1/metrics.csv")).is_file());
    }
    assert!(dir.path().join("baseline-wm-Empty8x8-s0/ia.ckpt").is_file());
    let report = tempfile::tempdir().unwrap();
    let o = coral(&["analyze", "--in", dir.path().to_str().unwrap(), "--out", report.path().to_str().unwrap(), "--window", "5", "--reference", "baseline-ppo"], dir.path());
    ok(&o);
    let rep: serde_json::Value = serde_json::from_slice(&std::fs::read(report.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(rep["rows"].as_array().unwrap().len(), 3);
    assert!(report.path().join("results.csv").is_file());

    let empty = tempfile::tempdir().unwrap();
    assert_eq!(coral(&["analyze", "--in", empty.path().to_str().unwrap()], empty.path()).status.code(), Some(2));
}

#[test]
fn ablation_pretrains_then_deploys() {
    let dir = tempfile::tempdir().unwrap();
    ok(&tiny("ablate", &["--tasks", "Empty8x8", "--set", "ablations=msgdim-16", "--set", "eval_tasks=Empty8x8", "--set", "deploy_steps=4096"], dir.path()));
    assert!(dir.path().join("ablation-msgdim-16-pretrain-s0/ia.ckpt").is_file());
    assert!(dir.path().join("ablation-msgdim-16-Empty8x8-s0/metrics.csv").is_file());
}
