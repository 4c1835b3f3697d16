/// Generalized advantage estimation over a `[T, N]` step-major layout
/// (`index = t * n_envs + env`).
///
/// `dones[t]` ends the episode after step `t`, so `values[t+1]` is not
/// bootstrapped across it. Returns `(advantages, returns)`.
pub fn compute_gae(
    rewards: &[f32],
    values: &[f32],
    dones: &[bool],
    bootstrap: &[f32],
    n_envs: usize,
    gamma: f32,
    lambda: f32,
) -> (Vec<f32>, Vec<f32>) {
    let steps = rewards.len() / n_envs;
    let mut adv = vec![0.0f32; rewards.len()];
    for env in 0..n_envs {
        let mut last = 0.0f32;
        for t in (0..steps).rev() {
            let i = t * n_envs + env;
            let next_value = if t + 1 == steps { bootstrap[env] } else { values[i + n_envs] };
            let nonterminal = if dones[i] { 0.0 } else { 1.0 };
            let delta = rewards[i] + gamma * next_value * nonterminal - values[i];
            last = delta + gamma * lambda * nonterminal * last;
            adv[i] = last;
        }
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, returns)
}

/// `(x - mean) / (std + 1e-8)` with the population standard deviation.
pub fn zscore(xs: &[f32]) -> Vec<f32> {
    if xs.is_empty() {
        return Vec::new();
    }
    let n = xs.len() as f64;
    let mean = xs.iter().map(|&x| x as f64).sum::<f64>() / n;
    let var = xs.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n;
    let denom = var.sqrt() + 1e-8;
    xs.iter().map(|&x| ((x as f64 - mean) / denom) as f32).collect()
}

/// Hybrid utility `max(0, alpha * z(dv) + (1 - alpha) * z(adv))`.
pub fn utility(dv: &[f32], adv: &[f32], alpha: f32) -> Vec<f32> {
    zscore(dv).iter().zip(zscore(adv)).map(|(&a, b)| (alpha * a + (1.0 - alpha) * b).max(0.0)).collect()
}
