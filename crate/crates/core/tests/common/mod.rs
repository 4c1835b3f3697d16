//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use coral_core::agents::{IaConfig, Trunk};
use coral_core::tensor::ParamStore;
use coral_core::training::Minibatch;

pub fn small_ia(trunk: Trunk) -> IaConfig {
    IaConfig { obs_dim: 10, hidden_dim: 8, message_dim: 4, context_len: 3, num_heads: 2, action_dim: 7, trunk }
}

pub fn perturbed(p: ParamStore<f32>, rng: &mut ChaCha8Rng) -> ParamStore<f64> {
    let mut p = p.cast::<f64>();
    let names: Vec<String> = p.names().map(str::to_owned).collect();
    for n in names {
        for x in p.get_mut(&n).unwrap().data_mut() {
            *x += rng.random_range(-0.3..0.3);
        }
    }
    p
}

pub fn random_minibatch(cfg: &IaConfig, size: usize, rng: &mut ChaCha8Rng) -> Minibatch<f64> {
    let mut u = |n: usize, lo: f64, hi: f64| -> Vec<f64> { (0..n).map(|_| rng.random_range(lo..hi)).collect() };
    let (od, md, l, h) = (cfg.obs_dim, cfg.message_dim, cfg.context_len, cfg.hidden_dim);
    let obs = u(size * od, 0.0, 1.0);
    let windows = u(size * l * od, 0.0, 1.0);
    let hidden = u(size * h, -0.5, 0.5);
    let messages = u(size * md, -1.0, 1.0);
    let next_messages = u(size * md, -1.0, 1.0);
    let old_logp = u(size, -2.6, -1.3);
    let old_values = u(size, -0.5, 0.5);
    let advantages = u(size, -1.0, 1.0);
    let returns = u(size, -1.0, 1.0);
    let next_obs = u(size * od, 0.0, 1.0);
    let rewards = u(size, 0.0, 1.0);
    let utility: Vec<f64> = u(size, -0.5, 1.5).into_iter().map(|x| x.max(0.0)).collect();
    let mut valid = vec![1.0; size * l];
    for r in 0..size {
        // first rows start an episode: leading slots empty
        for s in 0..(r % l) {
            valid[r * l + s] = 0.0;
        }
    }
    let actions = (0..size).map(|_| rng.random_range(0..cfg.action_dim)).collect();
    let terminals: Vec<f64> = (0..size).map(|i| if i % 4 == 3 { 1.0 } else { 0.0 }).collect();
    let coh_weights = terminals.iter().map(|t| 1.0 - t).collect();
    Minibatch { size, obs, windows, valid, hidden, messages, next_messages, actions, old_logp, old_values, advantages, returns, next_obs, rewards, terminals, coh_weights, utility }
}
