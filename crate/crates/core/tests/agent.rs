mod common;

use coded_cache::agent::{
    quantize_action, run_interaction, scale_action, Agent, AgentConfig, Critic, DemandSource,
    OuProcess, RunSpec, StateEncoder, Transition,
};
use coded_cache::net_model::CacheMatrix;
use coded_cache::replay::ReplayBuffer;
use coded_cache::rng::{rng_from_seed, SeedBank};
use coded_cache::tensor_nn::{Activation, Mlp, Parameterized};
use proptest::prelude::*;
use rand::Rng;

use common::{central_differences, max_relative_error, oracle_setup, tiny_config};

// Smaller than the smooth-network step: the actor and critic use ReLU, and
// at 1e-5 a pre-activation occasionally straddles the kink.
const STEP: f64 = 1e-6;
const TOL: f64 = 1e-4;
const FLOOR: f64 = 1e-6;

fn small_config() -> AgentConfig {
    AgentConfig {
        actor_hidden: vec![6, 5],
        critic_state_units: 5,
        critic_action_units: 4,
        critic_hidden: 3,
        ..AgentConfig::default()
    }
}

fn random_state(agent: &Agent, rng: &mut impl Rng) -> Vec<f64> {
    (0..agent.state_dim())
        .map(|_| rng.gen_range(0.0..1.0))
        .collect()
}

/// `-(1/M) sum_i Q(s_i, scale(mu(s_i)))` evaluated from scratch.
fn policy_objective(agent: &Agent, actor: &Mlp, states: &[Vec<f64>]) -> f64 {
    let total: f64 = states
        .iter()
        .map(|s| {
            let a = scale_action(&actor.forward(s).unwrap(), agent.n_nodes, agent.capacity);
            agent.critic.forward(s, &a).unwrap()
        })
        .sum();
    -total / states.len() as f64
}

#[test]
fn critic_gradients_match_finite_differences() {
    for seed in 0..50u64 {
        let mut rng = rng_from_seed(seed);
        let (sd, ad) = (rng.gen_range(1..6), rng.gen_range(1..6));
        let mut critic = Critic::new(sd, ad, &small_config(), &mut rng);
        let mut s: Vec<f64> = (0..sd).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut a: Vec<f64> = (0..ad).map(|_| rng.gen_range(0.0..1.0)).collect();

        critic.forward_train(&s, &a).unwrap();
        let mut grads = critic.zero_grads();
        let (ds, da) = critic.backward(1.0, &mut grads).unwrap();

        let mut params = critic.params().to_vec();
        let mut probe = critic.clone();
        let numeric = central_differences(&mut params, STEP, |p| {
            probe.params_mut().copy_from_slice(p);
            probe.forward(&s, &a).unwrap()
        });
        let a_fixed = a.clone();
        let numeric_s = central_differences(&mut s, STEP, |x| critic.forward(x, &a_fixed).unwrap());
        let numeric_a = central_differences(&mut a, STEP, |x| critic.forward(&s, x).unwrap());
        let errs = [
            max_relative_error(&grads, &numeric, FLOOR),
            max_relative_error(&ds, &numeric_s, FLOOR),
            max_relative_error(&da, &numeric_a, FLOOR),
        ];
        assert!(errs.iter().all(|&e| e < TOL), "seed {seed}: {errs:?}");
    }
}

#[test]
fn actor_gradient_through_scaling_matches_finite_differences() {
    for seed in 0..50u64 {
        let mut rng = rng_from_seed(seed);
        let (n, f) = (rng.gen_range(1..3), rng.gen_range(2..5));
        let capacity = rng.gen_range(0.5..f as f64);
        let mut agent = Agent::new(n, f, capacity, &small_config(), &SeedBank::new(seed));
        let states: Vec<Vec<f64>> = (0..3).map(|_| random_state(&agent, &mut rng)).collect();
        let refs: Vec<&[f64]> = states.iter().map(Vec::as_slice).collect();
        let grads = agent.actor_gradient(&refs).unwrap();

        let mut params = agent.actor.params().to_vec();
        let mut probe = agent.actor.clone();
        let numeric = central_differences(&mut params, STEP, |p| {
            probe.params_mut().copy_from_slice(p);
            policy_objective(&agent, &probe, &states)
        });
        let err = max_relative_error(&grads, &numeric, FLOOR);
        assert!(err < TOL, "seed {seed}: {err}");
    }
}

/// Batched and single passes sum in different orders; allow rounding.
fn assert_close(a: &[f64], b: &[f64]) {
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(b) {
        assert!(
            (x - y).abs() <= 1e-12 * x.abs().max(y.abs()).max(1.0),
            "{x} vs {y}"
        );
    }
}

#[test]
fn batched_passes_match_single_passes() {
    let mut rng = rng_from_seed(3);
    let mut mlp = Mlp::new(&[5, 7, 4], Activation::Relu, Activation::Sigmoid, &mut rng);
    let mut critic = Critic::new(5, 4, &small_config(), &mut rng);
    let xs: Vec<f64> = (0..15).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let acts: Vec<f64> = (0..12).map(|_| rng.gen_range(0.0..1.0)).collect();
    let dys: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();

    let batch = mlp.forward_train_batch(&xs, 3).unwrap();
    let mut g_batch = mlp.zero_grads();
    let dx_batch = mlp.backward_batch(&dys, &mut g_batch).unwrap();
    let mut g_single = mlp.zero_grads();
    let mut dx_single = Vec::new();
    for b in 0..3 {
        let y = mlp.forward_train(&xs[b * 5..(b + 1) * 5]).unwrap();
        assert_close(&y, &batch[b * 4..(b + 1) * 4]);
        dx_single.extend(
            mlp.backward(&dys[b * 4..(b + 1) * 4], &mut g_single)
                .unwrap(),
        );
    }
    assert_close(&g_batch, &g_single);
    assert_close(&dx_batch, &dx_single);

    let q = critic.forward_train_batch(&xs, &acts, 3).unwrap();
    let mut g_batch = critic.zero_grads();
    let (ds_batch, da_batch) = critic
        .backward_batch(&[0.5, -1.0, 2.0], &mut g_batch)
        .unwrap();
    let mut g_single = critic.zero_grads();
    for (b, dq) in [0.5, -1.0, 2.0].into_iter().enumerate() {
        let qs = critic
            .forward_train(&xs[b * 5..(b + 1) * 5], &acts[b * 4..(b + 1) * 4])
            .unwrap();
        assert_close(&[qs], &q[b..=b]);
        let (ds, da) = critic.backward(dq, &mut g_single).unwrap();
        assert_close(&ds, &ds_batch[b * 5..(b + 1) * 5]);
        assert_close(&da, &da_batch[b * 4..(b + 1) * 4]);
    }
    assert_close(&g_batch, &g_single);
}

fn random_transitions(agent: &Agent, count: usize, rng: &mut impl Rng) -> Vec<Transition> {
    (0..count)
        .map(|_| Transition {
            state: random_state(agent, rng),
            action: (0..agent.n_nodes * agent.n_files)
                .map(|_| rng.gen_range(0.0..1.0))
                .collect(),
            reward: rng.gen_range(-1.0..0.0),
            next_state: random_state(agent, rng),
        })
        .collect()
}

#[test]
fn zero_discount_regresses_on_rewards() {
    let config = AgentConfig {
        gamma: 0.0,
        ..small_config()
    };
    let mut agent = Agent::new(2, 3, 1.0, &config, &SeedBank::new(1));
    let batch = random_transitions(&agent, 8, &mut rng_from_seed(2));
    let expected: f64 = batch
        .iter()
        .map(|t| (agent.critic.forward(&t.state, &t.action).unwrap() - t.reward).powi(2))
        .sum::<f64>()
        / 8.0;
    let loss = agent.critic_step(&batch).unwrap();
    assert!((loss - expected).abs() <= 1e-12 * expected.max(1.0));
}

#[test]
fn critic_fits_a_fixed_buffer() {
    let config = AgentConfig {
        critic_state_units: 32,
        critic_action_units: 32,
        critic_hidden: 32,
        critic_lr: 1e-3,
        ..small_config()
    };
    let mut agent = Agent::new(2, 3, 1.0, &config, &SeedBank::new(4));
    let batch = random_transitions(&agent, 10, &mut rng_from_seed(5));
    let initial = agent.critic_step(&batch).unwrap();
    let mut last = initial;
    for _ in 0..2000 {
        last = agent.critic_step(&batch).unwrap();
        if last < 0.01 * initial {
            break;
        }
    }
    assert!(last < 0.01 * initial, "initial {initial}, final {last}");
}

#[test]
fn actor_step_increases_q_on_random_instances() {
    let config = AgentConfig {
        actor_lr: 1e-4,
        ..small_config()
    };
    for seed in 0..100u64 {
        let mut rng = rng_from_seed(1000 + seed);
        let mut agent = Agent::new(2, 3, 1.5, &config, &SeedBank::new(seed));
        let states: Vec<Vec<f64>> = (0..4).map(|_| random_state(&agent, &mut rng)).collect();
        let refs: Vec<&[f64]> = states.iter().map(Vec::as_slice).collect();
        let before = policy_objective(&agent, &agent.actor, &states);
        let norm = agent.actor_step(&refs).unwrap();
        let after = policy_objective(&agent, &agent.actor, &states);
        // A small critic can be flat (all ReLUs off); then nothing moves.
        if norm > 0.0 {
            assert!(after < before, "seed {seed}: {before} -> {after}");
        } else {
            assert_eq!(after, before);
        }
    }
}

/// Labels from a fixed random teacher, scaled to the capacity.
fn teacher_samples(agent: &Agent, count: usize, seed: u64) -> Vec<(Vec<f64>, Vec<f64>)> {
    let mut rng = rng_from_seed(seed);
    let teacher = Mlp::new(
        &[agent.state_dim(), agent.n_nodes * agent.n_files],
        Activation::Linear,
        Activation::Sigmoid,
        &mut rng,
    );
    (0..count)
        .map(|_| {
            let s = random_state(agent, &mut rng);
            let y = scale_action(&teacher.forward(&s).unwrap(), agent.n_nodes, agent.capacity);
            (s, y)
        })
        .collect()
}

#[test]
fn pretraining_reduces_placement_error() {
    let config = AgentConfig {
        actor_hidden: vec![64, 32],
        pretrain_lr: 1e-3,
        pretrain_actor_steps: 2000,
        ..AgentConfig::default()
    };
    let mut agent = Agent::new(3, 10, 2.0, &config, &SeedBank::new(7));
    let samples = teacher_samples(&agent, 500, 8);
    let (before, after) = agent.pretrain_actor(&samples).unwrap();
    assert!(after * 5.0 <= before, "{before} -> {after}");
    assert_eq!(agent.target_actor.params(), agent.actor.params());
}

#[test]
fn pretraining_memorizes_one_sample() {
    let config = AgentConfig {
        actor_hidden: vec![32, 16],
        pretrain_lr: 1e-3,
        pretrain_actor_steps: 5000,
        ..AgentConfig::default()
    };
    let mut agent = Agent::new(3, 10, 2.0, &config, &SeedBank::new(9));
    let samples = teacher_samples(&agent, 1, 10);
    let (_, after) = agent.pretrain_actor(&samples).unwrap();
    assert!(after < 1e-3, "{after}");
}

#[test]
fn critic_pretraining_leaves_the_actor_alone() {
    for (buffer, pretrain) in [(1000, 20), (8, 20)] {
        let mut config = tiny_config(60, pretrain);
        config.agent.buffer = buffer;
        let setup = oracle_setup(&config, 0, 4);
        let mut env = setup.environment(1.5, config.agent.gamma).unwrap();
        let mut agent = Agent::new(3, 10, 2.0, &config.agent, &SeedBank::new(0));
        let actor = agent.actor.params().to_vec();
        let spec = RunSpec {
            slots: setup.rho..setup.pretrain_end,
            source: DemandSource::Predicted,
            train_actor: false,
            reward_scale: setup.reward_scale,
        };
        run_interaction(
            &mut agent,
            &mut env,
            &mut StateEncoder::new(),
            &spec,
            &mut (),
        )
        .unwrap();
        assert_eq!(agent.actor.params(), &actor[..]);
        assert_eq!(agent.replay.len(), buffer.min(pretrain));
    }
}

#[test]
fn ou_without_volatility_decays_geometrically() {
    let mut ou = OuProcess::new(3, 0.25, 0.0, rng_from_seed(0));
    ou.set_state(&[1.0, -2.0, 0.5]);
    for k in 1..20 {
        let x = ou.sample();
        assert!((x[0] - 0.75f64.powi(k)).abs() < 1e-12);
        assert!((x[1] + 2.0 * 0.75f64.powi(k)).abs() < 1e-12);
    }
}

#[test]
fn ou_long_run_mean_is_zero() {
    let n = 100_000;
    // theta = 1 draws independent N(0, sigma^2) values.
    let mut ou = OuProcess::new(1, 1.0, 0.3, rng_from_seed(11));
    let mean = (0..n).map(|_| ou.sample()[0]).sum::<f64>() / n as f64;
    assert!(mean.abs() < 3.0 * 0.3 / (n as f64).sqrt(), "{mean}");

    // With theta < 1 successive values are correlated and the standard
    // error of the mean grows to sigma / (theta sqrt(n)).
    let (theta, sigma) = (0.15, 0.2);
    let mut ou = OuProcess::new(1, theta, sigma, rng_from_seed(12));
    let mean = (0..n).map(|_| ou.sample()[0]).sum::<f64>() / n as f64;
    assert!(
        mean.abs() < 3.0 * sigma / (theta * (n as f64).sqrt()),
        "{mean}"
    );
}

#[test]
fn ou_is_reproducible() {
    let mut a = OuProcess::new(4, 0.15, 0.2, SeedBank::new(3).rng("agent.ou"));
    let mut b = OuProcess::new(4, 0.15, 0.2, SeedBank::new(3).rng("agent.ou"));
    for _ in 0..50 {
        assert_eq!(a.sample(), b.sample());
    }
}

#[test]
fn soft_update_halfway() {
    let mut agent = Agent::new(
        1,
        1,
        1.0,
        &AgentConfig {
            tau: 0.5,
            ..small_config()
        },
        &SeedBank::new(0),
    );
    agent.actor.params_mut().iter_mut().for_each(|p| *p = 2.0);
    agent
        .target_actor
        .params_mut()
        .iter_mut()
        .for_each(|p| *p = 0.0);
    agent.soft_update_targets().unwrap();
    assert!(agent.target_actor.params().iter().all(|&p| p == 1.0));
}

#[test]
fn replay_sampling_is_uniform() {
    let mut buffer = ReplayBuffer::new(20);
    for i in 0..20usize {
        buffer.push(i);
    }
    let mut rng = rng_from_seed(17);
    let mut counts = [0usize; 20];
    let draws = 100_000;
    for _ in 0..draws / 10 {
        for i in buffer.sample_indices(10, &mut rng) {
            counts[i] += 1;
        }
    }
    let expected = draws as f64 / 20.0;
    let chi2: f64 = counts
        .iter()
        .map(|&c| (c as f64 - expected).powi(2) / expected)
        .sum();
    // 99.9% quantile of chi-square with 19 degrees of freedom.
    assert!(chi2 < 43.82, "chi-square {chi2}");
}

fn row_strategy() -> impl Strategy<Value = (usize, Vec<f64>, f64)> {
    (1usize..4, 1usize..8).prop_flat_map(|(n, f)| {
        (
            Just(n),
            prop::collection::vec(0.0f64..1.0, n * f),
            (1usize..=f).prop_map(|m| m as f64),
        )
    })
}

proptest! {
    #[test]
    fn scaling_keeps_direction_and_capacity((n, raw, cap) in row_strategy()) {
        let f = raw.len() / n;
        let out = scale_action(&raw, n, cap);
        for (r_in, r_out) in raw.chunks(f).zip(out.chunks(f)) {
            let total: f64 = r_out.iter().sum();
            prop_assert!(total <= cap + 1e-9);
            prop_assert!(r_out.iter().all(|&v| (0.0..=1.0).contains(&v)));
            // Unclipped entries keep their ratios.
            let free: Vec<usize> = (0..f).filter(|&j| r_out[j] < 1.0 && r_in[j] > 1e-9).collect();
            for w in free.windows(2) {
                let (a, b) = (w[0], w[1]);
                prop_assert!((r_out[a] * r_in[b] - r_out[b] * r_in[a]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn quantized_caches_are_feasible_and_close(
        (n, raw, cap) in row_strategy(),
        l in prop::sample::select(vec![1usize, 2, 4]),
    ) {
        let f = raw.len() / n;
        let cache = CacheMatrix::from_rows(n, f, scale_action(&raw, n, cap), cap, 1.0).unwrap();
        let q = quantize_action(&cache, l).unwrap();
        prop_assert!(q.check().is_ok());
        for &v in q.as_slice() {
            let steps = v * l as f64;
            prop_assert!((steps - steps.round()).abs() < 1e-9);
            prop_assert!((0.0..=1.0).contains(&v));
        }
        let dist: f64 = q.as_slice().iter().zip(cache.as_slice()).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let bound = (f as f64).sqrt() * (1.0 / (2.0 * l as f64)) * (n as f64).sqrt();
        prop_assert!(dist <= bound + 1e-9, "{dist} > {bound}");
    }
}
