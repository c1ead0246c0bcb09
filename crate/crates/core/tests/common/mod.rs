#![allow(dead_code)]

/// Central finite differences of `f` with respect to every entry of `x`.
pub fn central_differences(x: &mut [f64], step: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + step;
            let up = f(x);
            x[i] = orig - step;
            let down = f(x);
            x[i] = orig;
            (up - down) / (2.0 * step)
        })
        .collect()
}

/// Largest relative error between two gradients; entries where both are
/// below `floor` in magnitude are compared absolutely against `floor`.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

use coded_cache::harness::{
    build_topology, build_trace, seed_everything, CachingSetup, ExperimentConfig,
};

/// A small desk-profile variant that trains in seconds.
pub fn tiny_config(slots: usize, pretrain: usize) -> ExperimentConfig {
    let mut c = ExperimentConfig::desk();
    c.trace.synthetic.slots = slots;
    c.agent.pretrain_slots = pretrain;
    c.agent.actor_hidden = vec![24, 16];
    c.agent.critic_state_units = 16;
    c.agent.critic_action_units = 16;
    c.agent.critic_hidden = 12;
    c.agent.pretrain_actor_steps = 200;
    c
}

/// Caching setup whose forecasts are the true aggregate requests from slot
/// `rho` on, so no forecaster has to be trained.
pub fn oracle_setup(config: &ExperimentConfig, seed: u64, rho: usize) -> CachingSetup {
    let ctx = seed_everything(config, seed);
    let topology = build_topology(config, &ctx).unwrap();
    let trace = build_trace(config, &ctx).unwrap();
    let predicted = (0..trace.slots())
        .map(|t| (t >= rho).then(|| trace.aggregate_row(t).iter().map(|&c| c as f64).collect()))
        .collect();
    CachingSetup::from_parts(config, topology, trace, predicted).unwrap()
}
