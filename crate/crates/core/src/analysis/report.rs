use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::training::MetricsRecord;

use super::stats::mean;
use super::{
    confidence_interval, ice_curve, return_curve, time_to_threshold, welch_t_test, AggregateCurve, CurvePoint, Result, RunCurve, TttResult,
    DEFAULT_GRID_POINTS, DEFAULT_SMOOTHING_EPISODES,
};

pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<MetricsRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

/// One curve per (run_id, mode, env, seed); the `mode` column names the method.
pub fn load_curves(records: &[MetricsRecord]) -> Result<Vec<RunCurve>> {
    let mut runs: BTreeMap<(String, String, String, u64), Vec<&MetricsRecord>> = BTreeMap::new();
    for r in records {
        runs.entry((r.run_id.clone(), r.mode.clone(), r.env_name.clone(), r.seed)).or_default().push(r);
    }
    runs.into_iter()
        .map(|((_, mode, env, seed), rows)| {
            let returns = rows
                .iter()
                .filter_map(|r| r.episodic_return_mean.filter(|_| r.episodic_return_count > 0).map(|v| CurvePoint { step: r.global_step, value: v, episodes: r.episodic_return_count }))
                .collect();
            let ice = rows.iter().map(|r| (r.global_step, r.ice_mean)).collect();
            RunCurve::new(mode, env, seed, returns, Some(ice))
        })
        .collect()
}

/// Every `metrics.csv` below `dir`, visited in sorted path order.
pub fn load_dir(dir: impl AsRef<Path>) -> Result<Vec<RunCurve>> {
    fn walk(dir: &Path, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
        let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)?.map(|e| e.map(|e| e.path())).collect::<std::io::Result<_>>()?;
        entries.sort();
        for p in entries {
            if p.is_dir() {
                walk(&p, out)?;
            } else if p.file_name().is_some_and(|n| n == "metrics.csv") {
                out.push(p);
            }
        }
        Ok(())
    }
    let mut files = Vec::new();
    walk(dir.as_ref(), &mut files)?;
    let mut records = Vec::new();
    for f in files {
        records.extend(read_metrics(f)?);
    }
    load_curves(&records)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnalysisConfig {
    /// Trailing smoothing window in episodes.
    pub window: usize,
    pub grid_points: usize,
    /// Method the others are tested against.
    pub reference: String,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self { window: DEFAULT_SMOOTHING_EPISODES, grid_points: DEFAULT_GRID_POINTS, reference: "deploy".into() }
    }
}

/// One (method, env) line of the results table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRow {
    pub method: String,
    pub env: String,
    pub seeds: usize,
    pub threshold: f64,
    pub ttt_mean: Option<f64>,
    pub ttt_ci: Option<f64>,
    pub success_rate: f64,
    pub mean_return: Option<f64>,
    pub return_ci: Option<f64>,
    pub ice_mean: Option<f64>,
    /// Welch test of successful TTTs against the reference method.
    pub ttt_p_value: Option<f64>,
    pub ttt_significant: Option<bool>,
    /// Welch test of per-seed mean returns against the reference method.
    pub return_p_value: Option<f64>,
    pub return_significant: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub window: usize,
    pub reference: String,
    pub rows: Vec<ReportRow>,
    pub ttt: Vec<TttResult>,
    pub returns: Vec<AggregateCurve>,
    pub ice: Vec<AggregateCurve>,
}

pub fn analyze(curves: &[RunCurve], cfg: &AnalysisConfig) -> Result<Report> {
    let ttt = time_to_threshold(curves, cfg.window)?;
    let returns = return_curve(curves, cfg.window, cfg.grid_points)?;
    let with_ice: Vec<RunCurve> = curves.iter().filter(|c| c.ice.as_ref().is_some_and(|i| !i.is_empty())).cloned().collect();
    let ice = if with_ice.is_empty() { Vec::new() } else { ice_curve(&with_ice, cfg.grid_points)? };

    let seed_returns = |method: &str, env: &str| -> Vec<f64> { curves.iter().filter(|c| c.method == method && c.env == env).filter_map(RunCurve::mean_return).collect() };
    let successes = |method: &str, env: &str| ttt.iter().find(|t| t.method == method && t.env == env).map(TttResult::successes).unwrap_or_default();

    let rows = ttt
        .iter()
        .map(|t| {
            let rets = seed_returns(&t.method, &t.env);
            let ice_vals: Vec<f64> = curves
                .iter()
                .filter(|c| c.method == t.method && c.env == t.env)
                .filter_map(|c| c.ice.as_ref().filter(|i| !i.is_empty()).map(|i| i.iter().map(|x| x.1).sum::<f64>() / i.len() as f64))
                .collect();
            let vs_reference = |mine: &[f64], theirs: &[f64]| (t.method != cfg.reference).then(|| welch_t_test(mine, theirs).ok()).flatten();
            let ttt_test = vs_reference(&t.successes(), &successes(&cfg.reference, &t.env));
            let ret_test = vs_reference(&rets, &seed_returns(&cfg.reference, &t.env));
            ReportRow {
                method: t.method.clone(),
                env: t.env.clone(),
                seeds: t.per_seed.len(),
                threshold: t.threshold,
                ttt_mean: t.mean_ttt,
                ttt_ci: t.ci_halfwidth,
                success_rate: t.success_rate,
                mean_return: (!rets.is_empty()).then(|| mean(&rets)),
                return_ci: confidence_interval(&rets).ok().map(|x| x.1),
                ice_mean: (!ice_vals.is_empty()).then(|| mean(&ice_vals)),
                ttt_p_value: ttt_test.map(|w| w.p_value),
                ttt_significant: ttt_test.map(|w| w.significant()),
                return_p_value: ret_test.map(|w| w.p_value),
                return_significant: ret_test.map(|w| w.significant()),
            }
        })
        .collect();
    Ok(Report { window: cfg.window, reference: cfg.reference.clone(), rows, ttt, returns, ice })
}

impl Report {
    /// Writes `results.csv` and `report.json` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let mut w = csv::Writer::from_path(dir.join("results.csv"))?;
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush()?;
        let mut json = serde_json::to_string_pretty(self)?;
        json.push('\n');
        std::fs::write(dir.join("report.json"), json)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(mode: &str, seed: u64, step: u64, ret: Option<f64>, count: usize) -> MetricsRecord {
        MetricsRecord {
            run_id: format!("{mode}-{seed}"),
            mode: mode.into(),
            env_name: "DoorKey6x6".into(),
            seed,
            global_step: step,
            episodic_return_mean: ret,
            episodic_return_count: count,
            ppo_loss: None,
            value_loss: None,
            entropy: None,
            l_dyn: None,
            l_coh: None,
            l_causal: None,
            ice_mean: 0.0,
            utility_mean: 0.0,
            lr: 0.0,
            sps: 0.0,
        }
    }

    #[test]
    fn empty_return_rows_are_skipped_but_ice_is_kept() {
        let recs = [record("deploy", 0, 10, None, 0), record("deploy", 0, 20, Some(0.5), 2)];
        let c = load_curves(&recs).unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].returns, vec![CurvePoint { step: 20, value: 0.5, episodes: 2 }]);
        assert_eq!(c[0].ice.as_ref().unwrap().len(), 2);
    }

    #[test]
    fn report_compares_against_reference() {
        let mut recs = Vec::new();
        for seed in 0..3 {
            for (i, step) in [100u64, 200, 300, 400].into_iter().enumerate() {
                recs.push(record("deploy", seed, step, Some(if i >= 1 { 1.0 } else { 0.0 }), 1));
                recs.push(record("baseline-ppo", seed, step, Some(if i as u64 >= 2 + seed % 2 { 1.0 } else { 0.0 }), 1));
            }
        }
        let curves = load_curves(&recs).unwrap();
        let rep = analyze(&curves, &AnalysisConfig { window: 1, ..Default::default() }).unwrap();
        let ppo = rep.rows.iter().find(|r| r.method == "baseline-ppo").unwrap();
        let coral = rep.rows.iter().find(|r| r.method == "deploy").unwrap();
        assert_eq!(coral.ttt_mean, Some(200.0));
        assert_eq!(coral.ttt_ci, Some(0.0));
        assert!(coral.ttt_p_value.is_none());
        assert!((ppo.ttt_mean.unwrap() - 1000.0 / 3.0).abs() < 1e-9);
        assert!(ppo.ttt_p_value.unwrap() < 1.0);

        let dir = tempfile::tempdir().unwrap();
        rep.write(dir.path()).unwrap();
        let first = std::fs::read(dir.path().join("report.json")).unwrap();
        analyze(&curves, &AnalysisConfig { window: 1, ..Default::default() }).unwrap().write(dir.path()).unwrap();
        assert_eq!(first, std::fs::read(dir.path().join("report.json")).unwrap());
        let csv = std::fs::read_to_string(dir.path().join("results.csv")).unwrap();
        assert!(csv.starts_with("method,env,seeds,threshold,ttt_mean,ttt_ci,success_rate,mean_return"));
    }
}
