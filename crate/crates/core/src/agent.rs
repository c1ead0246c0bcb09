//! Actor-critic cache placement with supervised pre-training.
//!
//! The actor maps `[d~(t) / running max, Lambda(t-1)]` to sigmoid outputs,
//! one per (node, file); a scaling stage stretches each node's row to the
//! capacity and clips at 1. The critic scores (state, scaled action) pairs.
//! Pre-training fits the actor to per-slot LP solutions and then the critic
//! to the frozen actor; afterwards both learn from the environment.

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net_model::{
    network_cost, replacement_cost, transmission_cost, CacheMatrix, CostParams, Topology,
    CAPACITY_EPS,
};
use crate::per_slot::{solve_per_slot, PerSlotProblem};
use crate::replay::ReplayBuffer;
use crate::rng::{Rng, SeedBank};
use crate::tensor_nn::{
    load_checkpoint, mse_grad, save_checkpoint, soft_update, Activation, Adam, Dense, LayerSpec,
    LayoutBuilder, Mlp, Parameterized,
};
use crate::trace::DemandTrace;

/// Hyperparameters of the policy and its training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentConfig {
    pub gamma: f64,
    pub tau: f64,
    pub buffer: usize,
    pub minibatch: usize,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub pretrain_lr: f64,
    /// Slots used for pre-training (`T_A`).
    pub pretrain_slots: usize,
    /// Minibatch steps of supervised actor pre-training.
    pub pretrain_actor_steps: usize,
    pub actor_hidden: Vec<usize>,
    pub critic_state_units: usize,
    pub critic_action_units: usize,
    pub critic_hidden: usize,
    pub ou_theta: f64,
    pub ou_sigma_start: f64,
    pub ou_sigma_end: f64,
    /// Segments per file; `None` keeps fractions continuous.
    pub segments: Option<usize>,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            tau: 5e-4,
            buffer: 1000,
            minibatch: 32,
            actor_lr: 1e-5,
            critic_lr: 5e-4,
            pretrain_lr: 5e-5,
            pretrain_slots: 500,
            pretrain_actor_steps: 2000,
            actor_hidden: vec![800, 400],
            critic_state_units: 200,
            critic_action_units: 200,
            critic_hidden: 100,
            ou_theta: 0.15,
            ou_sigma_start: 0.2,
            ou_sigma_end: 0.02,
            segments: None,
        }
    }
}

/// Builds network inputs `[d~ / running max, Lambda(t-1)]`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StateEncoder {
    running_max: f64,
}

impl StateEncoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn running_max(&self) -> f64 {
        self.running_max
    }

    /// Encodes a state, first folding `demand` into the running maximum.
    pub fn encode(&mut self, demand: &[f64], prev: &CacheMatrix) -> Result<Vec<f64>> {
        if demand.len() != prev.n_files() {
            return Err(Error::Shape(format!(
                "{} demands for {} files",
                demand.len(),
                prev.n_files()
            )));
        }
        if let Some(bad) = demand.iter().find(|d| !(**d >= 0.0)) {
            return Err(Error::Input(format!("negative or NaN demand {bad}")));
        }
        self.running_max = demand.iter().copied().fold(self.running_max, f64::max);
        let scale = if self.running_max > 0.0 {
            self.running_max
        } else {
            1.0
        };
        let mut state: Vec<f64> = demand.iter().map(|d| d / scale).collect();
        state.extend_from_slice(prev.as_slice());
        Ok(state)
    }
}

/// Recovers `Lambda(t-1)` from an encoded state.
pub fn decode_cache(state: &[f64], template: &CacheMatrix) -> Result<CacheMatrix> {
    let f = template.n_files();
    let n = template.n_nodes();
    if state.len() != f + n * f {
        return Err(Error::Shape(format!(
            "state of length {} for F = {f}, N = {n}",
            state.len()
        )));
    }
    template.with_values(state[f..].to_vec())
}

/// Stretches each node's row of raw outputs to sum to `capacity`, then
/// clips entries at 1. A zero row stays zero.
pub fn scale_action(raw: &[f64], n_nodes: usize, capacity: f64) -> Vec<f64> {
    let f = raw.len() / n_nodes;
    let mut out = Vec::with_capacity(raw.len());
    for row in raw.chunks(f) {
        let sum: f64 = row.iter().sum();
        if sum <= 0.0 {
            out.extend(std::iter::repeat_n(0.0, f));
        } else {
            out.extend(row.iter().map(|v| (v * capacity / sum).min(1.0)));
        }
    }
    out
}

/// Gradient of [`scale_action`] pulled back to the raw outputs. Clipped
/// entries pass no gradient.
pub fn scale_action_backward(
    raw: &[f64],
    n_nodes: usize,
    capacity: f64,
    d_out: &[f64],
) -> Vec<f64> {
    let f = raw.len() / n_nodes;
    let mut d_raw = vec![0.0; raw.len()];
    for (r, row) in raw.chunks(f).enumerate() {
        let sum: f64 = row.iter().sum();
        if sum <= 0.0 {
            continue;
        }
        let k = capacity / sum;
        let d = &d_out[r * f..(r + 1) * f];
        let free: Vec<bool> = row.iter().map(|v| v * k < 1.0).collect();
        // d out_i / d raw_j = k (delta_ij - raw_i / sum) for unclipped i.
        let shared: f64 = (0..f)
            .filter(|&i| free[i])
            .map(|i| d[i] * row[i])
            .sum::<f64>()
            * k
            / sum;
        for j in 0..f {
            let own = if free[j] { d[j] * k } else { 0.0 };
            d_raw[r * f + j] = own - shared;
        }
    }
    d_raw
}

/// Nearest cache row on the `1/segments` grid, choosing per entry between
/// its floor and ceiling multiple, with the row sum kept within capacity.
pub fn quantize_action(cache: &CacheMatrix, segments: usize) -> Result<CacheMatrix> {
    if segments == 0 {
        return Err(Error::Parameter("segments must be at least 1".into()));
    }
    let mut out = cache.clone();
    for r in 0..cache.n_nodes() {
        let q = if cache.n_files() <= 20 {
            quantize_row_exhaustive(cache.row(r), segments, cache.capacity)
        } else {
            quantize_row_greedy(cache.row(r), segments, cache.capacity)
        };
        out.row_mut(r).copy_from_slice(&q);
    }
    Ok(out)
}

/// Floor and ceiling grid points of `x`; equal when `x` is on the grid.
fn bracket(x: f64, segments: usize) -> (f64, f64) {
    let l = segments as f64;
    let scaled = x * l;
    let near = scaled.round();
    if (scaled - near).abs() < 1e-9 {
        let v = (near / l).clamp(0.0, 1.0);
        return (v, v);
    }
    (
        (scaled.floor() / l).clamp(0.0, 1.0),
        (scaled.ceil() / l).clamp(0.0, 1.0),
    )
}

/// Enumerates every floor/ceiling combination.
pub fn quantize_row_exhaustive(row: &[f64], segments: usize, capacity: f64) -> Vec<f64> {
    let brackets: Vec<(f64, f64)> = row.iter().map(|&x| bracket(x, segments)).collect();
    let open: Vec<usize> = (0..row.len())
        .filter(|&i| brackets[i].0 != brackets[i].1)
        .collect();
    assert!(
        open.len() <= 24,
        "exhaustive quantization of {} open entries",
        open.len()
    );
    let base: Vec<f64> = brackets.iter().map(|b| b.0).collect();
    let base_sum: f64 = base.iter().sum();
    let base_dist: f64 = row.iter().zip(&base).map(|(x, b)| (x - b).powi(2)).sum();
    let mut best_mask = 0u32;
    let mut best = f64::INFINITY;
    for mask in 0u32..(1 << open.len()) {
        let mut sum = base_sum;
        let mut dist = base_dist;
        for (bit, &i) in open.iter().enumerate() {
            if mask & (1 << bit) != 0 {
                let (lo, hi) = brackets[i];
                sum += hi - lo;
                dist += (row[i] - hi).powi(2) - (row[i] - lo).powi(2);
            }
        }
        if sum <= capacity + CAPACITY_EPS && dist < best {
            best = dist;
            best_mask = mask;
        }
    }
    let mut out = base;
    for (bit, &i) in open.iter().enumerate() {
        if best_mask & (1 << bit) != 0 {
            out[i] = brackets[i].1;
        }
    }
    out
}

/// Starts from all floors and rounds up the entries with the largest
/// residuals while that is both closer and within capacity.
pub fn quantize_row_greedy(row: &[f64], segments: usize, capacity: f64) -> Vec<f64> {
    let brackets: Vec<(f64, f64)> = row.iter().map(|&x| bracket(x, segments)).collect();
    let mut out: Vec<f64> = brackets.iter().map(|b| b.0).collect();
    let mut sum: f64 = out.iter().sum();
    let mut order: Vec<usize> = (0..row.len())
        .filter(|&i| brackets[i].0 != brackets[i].1)
        .collect();
    order.sort_by(|&a, &b| {
        let ra = row[a] - brackets[a].0;
        let rb = row[b] - brackets[b].0;
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for i in order {
        let (lo, hi) = brackets[i];
        let closer = (row[i] - hi).powi(2) < (row[i] - lo).powi(2);
        if !closer {
            break;
        }
        if sum + (hi - lo) <= capacity + CAPACITY_EPS {
            out[i] = hi;
            sum += hi - lo;
        }
    }
    out
}

/// Ornstein-Uhlenbeck exploration noise around zero.
#[derive(Debug, Clone)]
pub struct OuProcess {
    pub theta: f64,
    pub sigma: f64,
    state: Vec<f64>,
    rng: Rng,
}

impl OuProcess {
    pub fn new(dim: usize, theta: f64, sigma: f64, rng: Rng) -> Self {
        Self {
            theta,
            sigma,
            state: vec![0.0; dim],
            rng,
        }
    }

    pub fn reset(&mut self) {
        self.state.iter_mut().for_each(|x| *x = 0.0);
    }

    pub fn state(&self) -> &[f64] {
        &self.state
    }

    pub fn set_state(&mut self, state: &[f64]) {
        self.state.copy_from_slice(state);
    }

    /// `x <- x - theta x + sigma N(0, 1)` per dimension.
    pub fn sample(&mut self) -> Vec<f64> {
        for x in &mut self.state {
            let z: f64 = self.rng.sample(StandardNormal);
            *x += -self.theta * *x + self.sigma * z;
        }
        self.state.clone()
    }
}

/// The critic: separate first layers for state and action whose outputs
/// feed one hidden layer, then a linear scalar head.
#[derive(Debug, Clone)]
pub struct Critic {
    state_layer: Dense,
    action_layer: Dense,
    hidden: Dense,
    head: Dense,
    params: Vec<f64>,
    tape: Option<CriticTape>,
}

#[derive(Debug, Clone)]
struct CriticTape {
    batch: usize,
    states: Vec<f64>,
    actions: Vec<f64>,
    /// Per sample `[state units | action units]`.
    joint: Vec<f64>,
    hidden: Vec<f64>,
    q: Vec<f64>,
}

impl Critic {
    pub fn new(state_dim: usize, action_dim: usize, config: &AgentConfig, rng: &mut Rng) -> Self {
        let mut b = LayoutBuilder::new();
        let state_layer = b.dense(state_dim, config.critic_state_units, Activation::Relu);
        let action_layer = b.dense(action_dim, config.critic_action_units, Activation::Relu);
        let hidden = b.dense(
            config.critic_state_units + config.critic_action_units,
            config.critic_hidden,
            Activation::Relu,
        );
        let head = b.dense(config.critic_hidden, 1, Activation::Linear);
        let params = b.init(rng);
        Self {
            state_layer,
            action_layer,
            hidden,
            head,
            params,
            tape: None,
        }
    }

    fn run(&self, states: &[f64], actions: &[f64], batch: usize) -> Result<CriticTape> {
        let (sd, ad) = (self.state_layer.input, self.action_layer.input);
        if states.len() != batch * sd || actions.len() != batch * ad {
            return Err(Error::Shape(format!(
                "critic expects {batch} states of {sd} and actions of {ad}, got {} and {} values",
                states.len(),
                actions.len()
            )));
        }
        let (su, au) = (self.state_layer.output, self.action_layer.output);
        let mut ys = vec![0.0; batch * su];
        let mut ya = vec![0.0; batch * au];
        self.state_layer
            .forward_batch(&self.params, states, &mut ys, batch);
        self.action_layer
            .forward_batch(&self.params, actions, &mut ya, batch);
        let mut joint = Vec::with_capacity(batch * (su + au));
        for b in 0..batch {
            joint.extend_from_slice(&ys[b * su..(b + 1) * su]);
            joint.extend_from_slice(&ya[b * au..(b + 1) * au]);
        }
        let mut hidden = vec![0.0; batch * self.hidden.output];
        self.hidden
            .forward_batch(&self.params, &joint, &mut hidden, batch);
        let mut q = vec![0.0; batch];
        self.head
            .forward_batch(&self.params, &hidden, &mut q, batch);
        Ok(CriticTape {
            batch,
            states: states.to_vec(),
            actions: actions.to_vec(),
            joint,
            hidden,
            q,
        })
    }

    pub fn forward(&self, state: &[f64], action: &[f64]) -> Result<f64> {
        Ok(self.run(state, action, 1)?.q[0])
    }

    /// Q values for row-major batches of states and actions.
    pub fn forward_batch(&self, states: &[f64], actions: &[f64], batch: usize) -> Result<Vec<f64>> {
        Ok(self.run(states, actions, batch)?.q)
    }

    pub fn forward_train(&mut self, state: &[f64], action: &[f64]) -> Result<f64> {
        Ok(self.forward_train_batch(state, action, 1)?[0])
    }

    pub fn forward_train_batch(
        &mut self,
        states: &[f64],
        actions: &[f64],
        batch: usize,
    ) -> Result<Vec<f64>> {
        let tape = self.run(states, actions, batch)?;
        let q = tape.q.clone();
        self.tape = Some(tape);
        Ok(q)
    }

    /// Accumulates parameter gradients of `dq * Q` and returns the gradients
    /// with respect to the state and the action.
    pub fn backward(&mut self, dq: f64, grads: &mut [f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        self.backward_batch(&[dq], grads)
    }

    /// Batched [`Critic::backward`] with one `dq` per recorded sample;
    /// returns row-major state and action gradients.
    pub fn backward_batch(
        &mut self,
        dqs: &[f64],
        grads: &mut [f64],
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        let t = self.tape.take().ok_or(Error::NoForwardPass)?;
        if grads.len() != self.params.len() || dqs.len() != t.batch {
            return Err(Error::Shape(
                "gradient buffers do not match the critic".into(),
            ));
        }
        let batch = t.batch;
        let p = &self.params;
        let mut d_hidden = vec![0.0; batch * self.hidden.output];
        self.head
            .backward_batch(p, &t.hidden, &t.q, dqs, grads, Some(&mut d_hidden), batch);
        let mut d_joint = vec![0.0; batch * self.hidden.input];
        self.hidden.backward_batch(
            p,
            &t.joint,
            &t.hidden,
            &d_hidden,
            grads,
            Some(&mut d_joint),
            batch,
        );
        let (su, au) = (self.state_layer.output, self.action_layer.output);
        let split = |m: &[f64], first: bool| -> Vec<f64> {
            let mut out = Vec::with_capacity(batch * if first { su } else { au });
            for row in m.chunks(su + au) {
                out.extend_from_slice(if first { &row[..su] } else { &row[su..] });
            }
            out
        };
        let (ys, ya) = (split(&t.joint, true), split(&t.joint, false));
        let (dys, dya) = (split(&d_joint, true), split(&d_joint, false));
        let mut ds = vec![0.0; batch * self.state_layer.input];
        let mut da = vec![0.0; batch * self.action_layer.input];
        self.state_layer
            .backward_batch(p, &t.states, &ys, &dys, grads, Some(&mut ds), batch);
        self.action_layer
            .backward_batch(p, &t.actions, &ya, &dya, grads, Some(&mut da), batch);
        Ok((ds, da))
    }
}

impl Parameterized for Critic {
    fn params(&self) -> &[f64] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn layer_specs(&self) -> Vec<LayerSpec> {
        [self.state_layer, self.action_layer, self.hidden, self.head]
            .iter()
            .map(|l| LayerSpec::Dense {
                input: l.input,
                output: l.output,
                activation: l.activation,
            })
            .collect()
    }
}

/// One experience tuple; `action` is the applied (scaled) cache.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_state: Vec<f64>,
}

/// Actor, critic, their targets, optimizers, replay and exploration.
#[derive(Debug, Clone)]
pub struct Agent {
    pub config: AgentConfig,
    pub n_nodes: usize,
    pub n_files: usize,
    pub capacity: f64,
    pub actor: Mlp,
    pub critic: Critic,
    pub target_actor: Mlp,
    pub target_critic: Critic,
    actor_opt: Adam,
    critic_opt: Adam,
    pub replay: ReplayBuffer<Transition>,
    pub noise: OuProcess,
    sample_rng: Rng,
}

impl Agent {
    pub fn new(
        n_nodes: usize,
        n_files: usize,
        capacity: f64,
        config: &AgentConfig,
        seeds: &SeedBank,
    ) -> Self {
        let state_dim = n_files + n_nodes * n_files;
        let action_dim = n_nodes * n_files;
        let mut sizes = vec![state_dim];
        sizes.extend_from_slice(&config.actor_hidden);
        sizes.push(action_dim);
        let actor = Mlp::new(
            &sizes,
            Activation::Relu,
            Activation::Sigmoid,
            &mut seeds.rng("agent.actor_init"),
        );
        let critic = Critic::new(
            state_dim,
            action_dim,
            config,
            &mut seeds.rng("agent.critic_init"),
        );
        Self {
            config: config.clone(),
            n_nodes,
            n_files,
            capacity,
            target_actor: actor.clone(),
            target_critic: critic.clone(),
            actor_opt: Adam::new(actor.num_params(), config.actor_lr),
            critic_opt: Adam::new(critic.num_params(), config.critic_lr),
            actor,
            critic,
            replay: ReplayBuffer::new(config.buffer),
            noise: OuProcess::new(
                action_dim,
                config.ou_theta,
                config.ou_sigma_start,
                seeds.rng("agent.ou"),
            ),
            sample_rng: seeds.rng("agent.replay"),
        }
    }

    pub fn state_dim(&self) -> usize {
        self.n_files + self.n_nodes * self.n_files
    }

    /// Raw sigmoid outputs, optionally perturbed by exploration noise and
    /// clamped back into `[0, 1]`.
    pub fn raw_action(&mut self, state: &[f64], explore: bool) -> Result<Vec<f64>> {
        let mut raw = self.actor.forward(state)?;
        if explore {
            for (r, n) in raw.iter_mut().zip(self.noise.sample()) {
                *r = (*r + n).clamp(0.0, 1.0);
            }
        }
        Ok(raw)
    }

    /// The cache to apply: scaled, and quantized when segments are set.
    pub fn act(
        &mut self,
        state: &[f64],
        template: &CacheMatrix,
        explore: bool,
    ) -> Result<CacheMatrix> {
        let raw = self.raw_action(state, explore)?;
        let cache = template.with_values(scale_action(&raw, self.n_nodes, self.capacity))?;
        match self.config.segments {
            Some(l) => quantize_action(&cache, l),
            None => Ok(cache),
        }
    }

    /// Policy output without noise, through the scaling stage.
    pub fn policy(&self, actor: &Mlp, state: &[f64]) -> Result<Vec<f64>> {
        Ok(scale_action(
            &actor.forward(state)?,
            self.n_nodes,
            self.capacity,
        ))
    }

    /// One critic step on a uniform minibatch with targets from the target
    /// networks. Returns the loss before the step, or `None` when the
    /// buffer is empty.
    pub fn critic_update(&mut self) -> Result<Option<f64>> {
        let idx = self
            .replay
            .sample_indices(self.config.minibatch, &mut self.sample_rng);
        if idx.is_empty() {
            return Ok(None);
        }
        let batch: Vec<Transition> = idx
            .iter()
            .map(|&i| self.replay.get(i).unwrap().clone())
            .collect();
        self.critic_step(&batch).map(Some)
    }

    /// Critic step on an explicit minibatch.
    pub fn critic_step(&mut self, batch: &[Transition]) -> Result<f64> {
        let m = batch.len();
        let n = m as f64;
        let states: Vec<f64> = batch.iter().flat_map(|t| t.state.iter().copied()).collect();
        let actions: Vec<f64> = batch
            .iter()
            .flat_map(|t| t.action.iter().copied())
            .collect();
        let targets: Vec<f64> = if self.config.gamma > 0.0 {
            let next: Vec<f64> = batch
                .iter()
                .flat_map(|t| t.next_state.iter().copied())
                .collect();
            let next_actions = self.scale_rows(&self.target_actor.forward_batch(&next, m)?);
            let q_next = self.target_critic.forward_batch(&next, &next_actions, m)?;
            batch
                .iter()
                .zip(q_next)
                .map(|(t, q)| t.reward + self.config.gamma * q)
                .collect()
        } else {
            batch.iter().map(|t| t.reward).collect()
        };
        let q = self.critic.forward_train_batch(&states, &actions, m)?;
        let loss = q
            .iter()
            .zip(&targets)
            .map(|(q, y)| (q - y).powi(2))
            .sum::<f64>()
            / n;
        let dq: Vec<f64> = q
            .iter()
            .zip(&targets)
            .map(|(q, y)| 2.0 * (q - y) / n)
            .collect();
        let mut grads = self.critic.zero_grads();
        self.critic.backward_batch(&dq, &mut grads)?;
        self.critic_opt.apply(&mut self.critic, &grads)?;
        Ok(loss)
    }

    /// [`scale_action`] applied to each row of a row-major batch.
    fn scale_rows(&self, raw: &[f64]) -> Vec<f64> {
        raw.chunks(self.n_nodes * self.n_files)
            .flat_map(|r| scale_action(r, self.n_nodes, self.capacity))
            .collect()
    }

    /// [`scale_action_backward`] applied to each row.
    fn scale_rows_backward(&self, raw: &[f64], d_out: &[f64]) -> Vec<f64> {
        let a = self.n_nodes * self.n_files;
        raw.chunks(a)
            .zip(d_out.chunks(a))
            .flat_map(|(r, d)| scale_action_backward(r, self.n_nodes, self.capacity, d))
            .collect()
    }

    /// Gradient of `-(1/M) sum_i Q(s_i, scale(mu(s_i)))` with respect to the
    /// actor parameters.
    pub fn actor_gradient(&mut self, states: &[&[f64]]) -> Result<Vec<f64>> {
        let m = states.len();
        let flat: Vec<f64> = states.iter().flat_map(|s| s.iter().copied()).collect();
        let raw = self.actor.forward_train_batch(&flat, m)?;
        let actions = self.scale_rows(&raw);
        self.critic.forward_train_batch(&flat, &actions, m)?;
        let mut scratch = self.critic.zero_grads();
        let (_, da) = self
            .critic
            .backward_batch(&vec![-1.0 / m as f64; m], &mut scratch)?;
        let d_raw = self.scale_rows_backward(&raw, &da);
        let mut grads = self.actor.zero_grads();
        self.actor.backward_batch(&d_raw, &mut grads)?;
        Ok(grads)
    }

    /// One policy-gradient step on a uniform minibatch. Returns the norm of
    /// the applied gradient, or `None` when the buffer is empty.
    pub fn actor_update(&mut self) -> Result<Option<f64>> {
        let idx = self
            .replay
            .sample_indices(self.config.minibatch, &mut self.sample_rng);
        if idx.is_empty() {
            return Ok(None);
        }
        let states: Vec<Vec<f64>> = idx
            .iter()
            .map(|&i| self.replay.get(i).unwrap().state.clone())
            .collect();
        let refs: Vec<&[f64]> = states.iter().map(Vec::as_slice).collect();
        self.actor_step(&refs).map(Some)
    }

    pub fn actor_step(&mut self, states: &[&[f64]]) -> Result<f64> {
        let grads = self.actor_gradient(states)?;
        let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
        self.actor_opt.apply(&mut self.actor, &grads)?;
        Ok(norm)
    }

    /// Soft-updates both targets toward the learned networks.
    pub fn soft_update_targets(&mut self) -> Result<()> {
        soft_update(
            self.target_actor.params_mut(),
            self.actor.params(),
            self.config.tau,
        )?;
        soft_update(
            self.target_critic.params_mut(),
            self.critic.params(),
            self.config.tau,
        )
    }

    /// Supervised actor fit: minimizes the squared error between the scaled
    /// output and the label, then copies the actor into its target. Returns
    /// the mean training loss before and after.
    pub fn pretrain_actor(&mut self, samples: &[(Vec<f64>, Vec<f64>)]) -> Result<(f64, f64)> {
        if samples.is_empty() {
            return Err(Error::Input("no pre-training samples".into()));
        }
        let before = self.placement_error(samples)?;
        let mut opt = Adam::new(self.actor.num_params(), self.config.pretrain_lr);
        let batch = self.config.minibatch.min(samples.len()).max(1);
        let a = self.n_nodes * self.n_files;
        for _ in 0..self.config.pretrain_actor_steps {
            let picks: Vec<usize> = (0..batch)
                .map(|_| self.sample_rng.gen_range(0..samples.len()))
                .collect();
            let xs: Vec<f64> = picks
                .iter()
                .flat_map(|&i| samples[i].0.iter().copied())
                .collect();
            let raw = self.actor.forward_train_batch(&xs, batch)?;
            let out = self.scale_rows(&raw);
            let mut d_out = Vec::with_capacity(batch * a);
            for (b, &i) in picks.iter().enumerate() {
                d_out.extend(
                    mse_grad(&out[b * a..(b + 1) * a], &samples[i].1)
                        .iter()
                        .map(|g| g / batch as f64),
                );
            }
            let d_raw = self.scale_rows_backward(&raw, &d_out);
            let mut grads = self.actor.zero_grads();
            self.actor.backward_batch(&d_raw, &mut grads)?;
            opt.apply(&mut self.actor, &grads)?;
        }
        self.target_actor = self.actor.clone();
        Ok((before, self.placement_error(samples)?))
    }

    /// Mean squared error of the scaled policy against labels.
    pub fn placement_error(&self, samples: &[(Vec<f64>, Vec<f64>)]) -> Result<f64> {
        let mut total = 0.0;
        for (x, y) in samples {
            let out = self.policy(&self.actor, x)?;
            total += crate::tensor_nn::mse_loss(&out, y)?;
        }
        Ok(total / samples.len() as f64)
    }

    /// Writes `actor`, `critic`, `target_actor` and `target_critic`
    /// checkpoints into `dir`.
    pub fn save(&self, dir: impl AsRef<std::path::Path>) -> Result<()> {
        let dir = dir.as_ref();
        save_checkpoint(&self.actor, "actor", dir.join("actor"))?;
        save_checkpoint(&self.critic, "critic", dir.join("critic"))?;
        save_checkpoint(&self.target_actor, "target_actor", dir.join("target_actor"))?;
        save_checkpoint(
            &self.target_critic,
            "target_critic",
            dir.join("target_critic"),
        )
    }

    /// Restores all four networks written by [`Agent::save`].
    pub fn load(&mut self, dir: impl AsRef<std::path::Path>) -> Result<()> {
        let dir = dir.as_ref();
        load_checkpoint(&mut self.actor, dir.join("actor"))?;
        load_checkpoint(&mut self.critic, dir.join("critic"))?;
        load_checkpoint(&mut self.target_actor, dir.join("target_actor"))?;
        load_checkpoint(&mut self.target_critic, dir.join("target_critic"))?;
        Ok(())
    }

    /// Fresh replay buffer and noise state, as at the start of a phase.
    pub fn reset_exploration(&mut self) {
        self.replay.clear();
        self.noise.reset();
    }
}

/// Where a run's state takes its demand from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DemandSource {
    Predicted,
    Actual,
}

/// The caching network over a trace: applies caches, serves the actual
/// per-user requests and reports costs.
#[derive(Debug, Clone)]
pub struct Environment<'a> {
    pub topology: &'a Topology,
    pub trace: &'a DemandTrace,
    /// `predicted[t]` for every slot that has a forecast.
    pub predicted: &'a [Option<Vec<f64>>],
    pub cost: CostParams,
    pub cache: CacheMatrix,
}

/// Costs of one slot.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlotCost {
    pub c_d: f64,
    pub c_r: f64,
    pub c_total: f64,
}

impl<'a> Environment<'a> {
    pub fn new(
        topology: &'a Topology,
        trace: &'a DemandTrace,
        predicted: &'a [Option<Vec<f64>>],
        cost: CostParams,
        initial: CacheMatrix,
    ) -> Result<Self> {
        if trace.users() != Some(topology.n_users()) {
            return Err(Error::Input(
                "the trace needs a per-user split matching the topology".into(),
            ));
        }
        if predicted.len() != trace.slots() {
            return Err(Error::Shape(
                "one prediction entry per slot is required".into(),
            ));
        }
        Ok(Self {
            topology,
            trace,
            predicted,
            cost,
            cache: initial,
        })
    }

    /// Demand vector the policy sees at `slot`.
    pub fn demand(&self, slot: usize, source: DemandSource) -> Result<Vec<f64>> {
        match source {
            DemandSource::Actual => Ok(self
                .trace
                .aggregate_row(slot)
                .iter()
                .map(|&c| c as f64)
                .collect()),
            DemandSource::Predicted => self.predicted[slot]
                .clone()
                .ok_or_else(|| Error::Input(format!("no forecast for slot {slot}"))),
        }
    }

    /// Per-user requests of the slot before `slot` (zeros at slot 0).
    pub fn previous_user_demand(&self, slot: usize) -> Vec<f64> {
        match slot.checked_sub(1) {
            Some(p) => self.trace.per_user_slot_f64(p).unwrap(),
            None => vec![0.0; self.topology.n_users() * self.trace.files()],
        }
    }

    /// Applies `cache` for `slot` and serves the slot's actual requests.
    pub fn step(&mut self, slot: usize, cache: CacheMatrix) -> Result<SlotCost> {
        cache.check()?;
        let demand = self.trace.per_user_slot_f64(slot).unwrap();
        let c_d = transmission_cost(self.topology, &cache, &demand)?;
        let c_r = replacement_cost(&self.cache, &cache)?;
        self.cache = cache;
        Ok(SlotCost {
            c_d,
            c_r,
            c_total: network_cost(c_d, c_r, &self.cost),
        })
    }

    /// Per-slot problem at `slot` from the current cache.
    pub fn per_slot_problem(
        &self,
        slot: usize,
        source: DemandSource,
    ) -> Result<PerSlotProblem<'a>> {
        PerSlotProblem::new(
            self.topology,
            self.cache.clone(),
            self.demand(slot, source)?,
            &self.previous_user_demand(slot),
            self.cost.beta,
        )
    }
}

/// One row of a cost log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostRecord {
    pub slot: usize,
    pub c_d: f64,
    pub c_r: f64,
    pub c_total: f64,
    pub running_avg: f64,
}

/// Appends costs with a running average of `c_total`.
#[derive(Debug, Clone, Default)]
pub struct CostLog {
    pub records: Vec<CostRecord>,
    total: f64,
}

impl CostLog {
    pub fn push(&mut self, slot: usize, cost: SlotCost) {
        self.total += cost.c_total;
        let running_avg = self.total / (self.records.len() + 1) as f64;
        self.records.push(CostRecord {
            slot,
            c_d: cost.c_d,
            c_r: cost.c_r,
            c_total: cost.c_total,
            running_avg,
        });
    }

    pub fn final_average(&self) -> Option<f64> {
        self.records.last().map(|r| r.running_avg)
    }

    pub fn mean_replacement(&self) -> f64 {
        if self.records.is_empty() {
            return 0.0;
        }
        self.records.iter().map(|r| r.c_r).sum::<f64>() / self.records.len() as f64
    }

    pub fn write_csv(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.records {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Hooks observing a training run; used by tests to check invariants.
pub trait RunObserver {
    fn applied(&mut self, _slot: usize, _cache: &CacheMatrix) {}
}

impl RunObserver for () {}

/// Settings of one interactive run over a slot range.
#[derive(Debug, Clone)]
pub struct RunSpec {
    pub slots: std::ops::Range<usize>,
    pub source: DemandSource,
    /// Whether the actor learns (false during critic pre-training).
    pub train_actor: bool,
    /// Rewards are `-cost / reward_scale`.
    pub reward_scale: f64,
}

/// The interaction loop: act with noise, apply, observe the reward, store
/// the transition and update critic, actor (if enabled) and targets.
///
/// The OU volatility decays linearly from its start to its end value over
/// the run.
pub fn run_interaction(
    agent: &mut Agent,
    env: &mut Environment,
    encoder: &mut StateEncoder,
    spec: &RunSpec,
    observer: &mut dyn RunObserver,
) -> Result<CostLog> {
    let mut log = CostLog::default();
    let len = spec.slots.len().max(1);
    let mut state = encoder.encode(&env.demand(spec.slots.start, spec.source)?, &env.cache)?;
    for (i, t) in spec.slots.clone().enumerate() {
        let frac = i as f64 / (len.saturating_sub(1).max(1)) as f64;
        agent.noise.sigma = agent.config.ou_sigma_start
            + (agent.config.ou_sigma_end - agent.config.ou_sigma_start) * frac;
        let cache = agent.act(&state, &env.cache, true)?;
        observer.applied(t, &cache);
        let action = cache.as_slice().to_vec();
        let cost = env.step(t, cache)?;
        log.push(t, cost);
        let next_state = if t + 1 < spec.slots.end {
            encoder.encode(&env.demand(t + 1, spec.source)?, &env.cache)?
        } else {
            // The last transition still needs a successor; reuse this
            // slot's demand with the new cache.
            let mut s = state.clone();
            s[agent.n_files..].copy_from_slice(env.cache.as_slice());
            s
        };
        agent.replay.push(Transition {
            state: state.clone(),
            action,
            reward: -cost.c_total / spec.reward_scale,
            next_state: next_state.clone(),
        });
        agent.critic_update()?;
        if spec.train_actor {
            agent.actor_update()?;
        }
        agent.soft_update_targets()?;
        state = next_state;
    }
    Ok(log)
}

/// Per-slot LP labels over `slots`, chaining each solution into the next
/// problem's previous cache. Returns `(encoded state, label)` pairs.
pub fn pretrain_samples(
    env: &Environment,
    encoder: &mut StateEncoder,
    slots: std::ops::Range<usize>,
    source: DemandSource,
) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
    let mut chain = env.clone();
    let mut samples = Vec::with_capacity(slots.len());
    for t in slots {
        let problem = chain.per_slot_problem(t, source)?;
        let state = encoder.encode(&problem.predicted, &chain.cache)?;
        let solution = solve_per_slot(&problem);
        samples.push((state, solution.cache.as_slice().to_vec()));
        chain.cache = solution.cache;
    }
    Ok(samples)
}

/// Runs the myopic per-slot policy over `slots`.
pub fn run_per_slot_policy(
    env: &mut Environment,
    slots: std::ops::Range<usize>,
    source: DemandSource,
) -> Result<CostLog> {
    let mut log = CostLog::default();
    for t in slots {
        let solution = solve_per_slot(&env.per_slot_problem(t, source)?);
        let cost = env.step(t, solution.cache)?;
        log.push(t, cost);
    }
    Ok(log)
}

/// Noise-free rollout of a trained actor without learning.
pub fn evaluate_policy(
    agent: &mut Agent,
    env: &mut Environment,
    encoder: &mut StateEncoder,
    slots: std::ops::Range<usize>,
    source: DemandSource,
) -> Result<CostLog> {
    let mut log = CostLog::default();
    for t in slots {
        let state = encoder.encode(&env.demand(t, source)?, &env.cache)?;
        let cache = agent.act(&state, &env.cache, false)?;
        let cost = env.step(t, cache)?;
        log.push(t, cost);
    }
    Ok(log)
}
