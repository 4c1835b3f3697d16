//! Evaluation statistics over metrics files: confidence intervals, Welch's
//! t-test, two-pass time-to-threshold with success rate, and aggregated ICE
//! curves.

mod report;
mod stats;

use std::collections::BTreeMap;

use serde::Serialize;

pub use report::{analyze, load_curves, load_dir, read_metrics, AnalysisConfig, Report, ReportRow};
pub use stats::{confidence_interval, ln_gamma, regularized_incomplete_beta, student_t_cdf, student_t_two_sided, welch_t_test, WelchTest, Z95};

#[derive(Debug, thiserror::Error)]
pub enum AnalysisError {
    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("no curves to analyze")]
    EmptyInput,
    #[error("{method} on {env} has no ICE channel")]
    MissingChannel { method: String, env: String },
    #[error("steps of {method}/{env}/seed {seed} are not strictly increasing at {step}")]
    NonIncreasingSteps { method: String, env: String, seed: u64, step: u64 },
    #[error("smoothing window must be at least 1")]
    InvalidWindow,
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = AnalysisError> = std::result::Result<T, E>;

/// Default trailing window, in episodes, for return smoothing.
pub const DEFAULT_SMOOTHING_EPISODES: usize = 100;
/// Threshold is this fraction of the best smoothed return in the group.
pub const THRESHOLD_FRACTION: f64 = 0.9;
/// Grid points used when aggregating curves.
pub const DEFAULT_GRID_POINTS: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CurvePoint {
    pub step: u64,
    pub value: f64,
    /// Episodes averaged into `value`.
    pub episodes: usize,
}

/// Learning curve of one run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunCurve {
    pub method: String,
    pub env: String,
    pub seed: u64,
    pub returns: Vec<CurvePoint>,
    pub ice: Option<Vec<(u64, f64)>>,
}

impl RunCurve {
    pub fn new(method: impl Into<String>, env: impl Into<String>, seed: u64, returns: Vec<CurvePoint>, ice: Option<Vec<(u64, f64)>>) -> Result<Self> {
        let c = Self { method: method.into(), env: env.into(), seed, returns, ice };
        let bad = |step| AnalysisError::NonIncreasingSteps { method: c.method.clone(), env: c.env.clone(), seed, step };
        if let Some(w) = c.returns.windows(2).find(|w| w[1].step <= w[0].step) {
            return Err(bad(w[1].step));
        }
        if let Some(w) = c.ice.as_deref().and_then(|i| i.windows(2).find(|w| w[1].0 <= w[0].0)) {
            return Err(bad(w[1].0));
        }
        Ok(c)
    }

    /// Curve of single-episode points.
    pub fn from_pairs(method: &str, env: &str, seed: u64, pairs: &[(u64, f64)]) -> Result<Self> {
        Self::new(method, env, seed, pairs.iter().map(|&(step, value)| CurvePoint { step, value, episodes: 1 }).collect(), None)
    }

    /// Episode-weighted mean return over the whole run.
    pub fn mean_return(&self) -> Option<f64> {
        let n: usize = self.returns.iter().map(|p| p.episodes).sum();
        (n > 0).then(|| self.returns.iter().map(|p| p.value * p.episodes as f64).sum::<f64>() / n as f64)
    }
}

/// Trailing moving average covering the most recent `window` episodes at each
/// point. Points are included whole, newest first, until the window is full.
pub fn smooth(points: &[CurvePoint], window: usize) -> Result<Vec<(u64, f64)>> {
    if window == 0 {
        return Err(AnalysisError::InvalidWindow);
    }
    let mut out = Vec::with_capacity(points.len());
    for i in 0..points.len() {
        let (mut sum, mut n) = (0.0, 0usize);
        for p in points[..=i].iter().rev() {
            let w = p.episodes.max(1);
            sum += p.value * w as f64;
            n += w;
            if n >= window {
                break;
            }
        }
        out.push((points[i].step, sum / n as f64));
    }
    Ok(out)
}

/// First step whose smoothed return reaches `threshold`.
pub fn first_crossing(smoothed: &[(u64, f64)], threshold: f64) -> Option<u64> {
    smoothed.iter().find(|(_, v)| *v >= threshold).map(|(s, _)| *s)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeedTtt {
    pub seed: u64,
    pub ttt: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TttResult {
    pub method: String,
    pub env: String,
    pub threshold: f64,
    pub per_seed: Vec<SeedTtt>,
    /// Mean over successful seeds.
    pub mean_ttt: Option<f64>,
    /// 95% half-width over successful seeds (needs two successes).
    pub ci_halfwidth: Option<f64>,
    pub success_rate: f64,
}

impl TttResult {
    pub fn successes(&self) -> Vec<f64> {
        self.per_seed.iter().filter_map(|s| s.ttt.map(|t| t as f64)).collect()
    }
}

/// Per-env thresholds: the best smoothed return across all methods and seeds,
/// scaled by [`THRESHOLD_FRACTION`].
pub fn thresholds(curves: &[RunCurve], window: usize) -> Result<BTreeMap<String, f64>> {
    let mut best: BTreeMap<String, f64> = BTreeMap::new();
    for c in curves {
        let peak = smooth(&c.returns, window)?.into_iter().map(|(_, v)| v).fold(f64::NEG_INFINITY, f64::max);
        let e = best.entry(c.env.clone()).or_insert(f64::NEG_INFINITY);
        *e = e.max(peak);
    }
    Ok(best.into_iter().map(|(k, v)| (k, THRESHOLD_FRACTION * v)).collect())
}

/// Two-pass time-to-threshold, one result per (method, env) ordered by name.
pub fn time_to_threshold(curves: &[RunCurve], window: usize) -> Result<Vec<TttResult>> {
    if curves.is_empty() {
        return Err(AnalysisError::EmptyInput);
    }
    let th = thresholds(curves, window)?;
    ttt_with_thresholds(curves, window, &th)
}

/// Second pass of [`time_to_threshold`] against given per-env thresholds.
pub fn ttt_with_thresholds(curves: &[RunCurve], window: usize, thresholds: &BTreeMap<String, f64>) -> Result<Vec<TttResult>> {
    let mut groups: BTreeMap<(String, String), Vec<SeedTtt>> = BTreeMap::new();
    for c in curves {
        let threshold = thresholds.get(&c.env).copied().unwrap_or(f64::INFINITY);
        let ttt = first_crossing(&smooth(&c.returns, window)?, threshold);
        groups.entry((c.method.clone(), c.env.clone())).or_default().push(SeedTtt { seed: c.seed, ttt });
    }
    Ok(groups
        .into_iter()
        .map(|((method, env), mut per_seed)| {
            per_seed.sort_by_key(|s| s.seed);
            let ok: Vec<f64> = per_seed.iter().filter_map(|s| s.ttt.map(|t| t as f64)).collect();
            let mean_ttt = (!ok.is_empty()).then(|| stats::mean(&ok));
            let ci_halfwidth = confidence_interval(&ok).ok().map(|(_, h)| h);
            TttResult {
                threshold: thresholds.get(&env).copied().unwrap_or(f64::INFINITY),
                success_rate: ok.len() as f64 / per_seed.len() as f64,
                method,
                env,
                per_seed,
                mean_ttt,
                ci_halfwidth,
            }
        })
        .collect())
}

/// Mean and 95% band of one channel across seeds on a shared step grid.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AggregateCurve {
    pub method: String,
    pub env: String,
    pub steps: Vec<u64>,
    pub mean: Vec<f64>,
    /// Zero when fewer than two seeds contribute.
    pub halfwidth: Vec<f64>,
}

fn interpolate(series: &[(u64, f64)], step: f64) -> f64 {
    let i = series.partition_point(|(s, _)| (*s as f64) < step);
    if i == 0 {
        return series[0].1;
    }
    if i == series.len() {
        return series[i - 1].1;
    }
    let (s0, v0) = (series[i - 1].0 as f64, series[i - 1].1);
    let (s1, v1) = (series[i].0 as f64, series[i].1);
    v0 + (v1 - v0) * (step - s0) / (s1 - s0)
}

/// Interpolates every series onto `points` evenly spaced steps spanning the
/// range all series cover, then averages across series.
pub fn aggregate(method: &str, env: &str, series: &[Vec<(u64, f64)>], points: usize) -> Result<AggregateCurve> {
    let series: Vec<&Vec<(u64, f64)>> = series.iter().filter(|s| !s.is_empty()).collect();
    if series.is_empty() || points == 0 {
        return Err(AnalysisError::EmptyInput);
    }
    let lo = series.iter().map(|s| s[0].0).max().expect("non-empty");
    let hi = series.iter().map(|s| s[s.len() - 1].0).min().expect("non-empty").max(lo);
    let n = if hi == lo { 1 } else { points };
    let mut out = AggregateCurve { method: method.into(), env: env.into(), steps: Vec::new(), mean: Vec::new(), halfwidth: Vec::new() };
    for k in 0..n {
        let step = if n == 1 { lo as f64 } else { lo as f64 + (hi - lo) as f64 * k as f64 / (n - 1) as f64 };
        let vals: Vec<f64> = series.iter().map(|s| interpolate(s, step)).collect();
        let (m, h) = match confidence_interval(&vals) {
            Ok(x) => x,
            Err(_) => (vals[0], 0.0),
        };
        out.steps.push(step.round() as u64);
        out.mean.push(m);
        out.halfwidth.push(h);
    }
    Ok(out)
}

fn group(curves: &[RunCurve]) -> BTreeMap<(String, String), Vec<&RunCurve>> {
    let mut g: BTreeMap<(String, String), Vec<&RunCurve>> = BTreeMap::new();
    for c in curves {
        g.entry((c.method.clone(), c.env.clone())).or_default().push(c);
    }
    g
}

/// Per (method, env) mean ICE with a 95% band across seeds.
pub fn ice_curve(curves: &[RunCurve], points: usize) -> Result<Vec<AggregateCurve>> {
    if curves.is_empty() {
        return Err(AnalysisError::EmptyInput);
    }
    group(curves)
        .into_iter()
        .map(|((method, env), cs)| {
            let series = cs
                .iter()
                .map(|c| c.ice.clone().ok_or_else(|| AnalysisError::MissingChannel { method: method.clone(), env: env.clone() }))
                .collect::<Result<Vec<_>>>()?;
            aggregate(&method, &env, &series, points)
        })
        .collect()
}

/// Per (method, env) smoothed return with a 95% band across seeds.
pub fn return_curve(curves: &[RunCurve], window: usize, points: usize) -> Result<Vec<AggregateCurve>> {
    if curves.is_empty() {
        return Err(AnalysisError::EmptyInput);
    }
    group(curves)
        .into_iter()
        .filter(|(_, cs)| cs.iter().any(|c| !c.returns.is_empty()))
        .map(|((method, env), cs)| {
            let series = cs.iter().map(|c| smooth(&c.returns, window)).collect::<Result<Vec<_>>>()?;
            aggregate(&method, &env, &series, points)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn step_curve(method: &str, seed: u64, k: u64, hi: f64) -> RunCurve {
        let pairs: Vec<(u64, f64)> = (1..=20).map(|i| (i * 100, if i * 100 >= k { hi } else { 0.0 })).collect();
        RunCurve::from_pairs(method, "E", seed, &pairs).unwrap()
    }

    #[test]
    fn step_function_crosses_at_its_step() {
        let curves = [step_curve("a", 0, 700, 1.0), step_curve("a", 1, 1200, 1.0), step_curve("b", 0, 300, 0.5)];
        let r = time_to_threshold(&curves, 1).unwrap();
        assert_eq!(r[0].threshold, 0.9);
        assert_eq!(r[0].per_seed, vec![SeedTtt { seed: 0, ttt: Some(700) }, SeedTtt { seed: 1, ttt: Some(1200) }]);
        assert_eq!(r[0].mean_ttt, Some(950.0));
        assert_eq!(r[0].success_rate, 1.0);
        // b never reaches 0.9
        assert_eq!((r[1].success_rate, r[1].mean_ttt, r[1].ci_halfwidth), (0.0, None, None));
    }

    #[test]
    fn smoothing_weights_by_episodes() {
        let pts = [
            CurvePoint { step: 1, value: 0.0, episodes: 3 },
            CurvePoint { step: 2, value: 1.0, episodes: 1 },
            CurvePoint { step: 3, value: 1.0, episodes: 4 },
        ];
        let s = smooth(&pts, 4).unwrap();
        assert_eq!(s, vec![(1, 0.0), (2, 0.25), (3, 1.0)]);
        assert!(smooth(&pts, 0).is_err());
    }

    #[test]
    fn non_increasing_steps_are_rejected() {
        assert!(RunCurve::from_pairs("m", "e", 0, &[(5, 0.0), (5, 1.0)]).is_err());
    }

    #[test]
    fn constant_series_aggregate_to_constant_with_zero_band() {
        let s = vec![(0u64, 0.3), (100, 0.3), (250, 0.3)];
        let a = aggregate("m", "e", &[s.clone(), s], 6).unwrap();
        assert!(a.mean.iter().all(|&m| (m - 0.3).abs() < 1e-15));
        assert!(a.halfwidth.iter().all(|&h| h == 0.0));
        assert_eq!(a.steps, vec![0, 50, 100, 150, 200, 250]);
    }

    #[test]
    fn ice_needs_the_channel() {
        let c = step_curve("a", 0, 100, 1.0);
        assert!(matches!(ice_curve(&[c], 10), Err(AnalysisError::MissingChannel { .. })));
        assert!(matches!(time_to_threshold(&[], 1), Err(AnalysisError::EmptyInput)));
    }
}
