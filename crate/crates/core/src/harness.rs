//! Experiment configuration, seeding and the prediction and caching
//! experiments behind the CLI.
//!
//! Reported caching costs cover the evaluation window `[rho + T_A, T)`
//! only. Every policy starts from the same initial cache at slot `rho`;
//! the pre-training window `[rho, rho + T_A)` is shared by all of them.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::agent::{
    pretrain_samples, run_interaction, run_per_slot_policy, Agent, AgentConfig, CostLog,
    DemandSource, Environment, RunObserver, RunSpec, StateEncoder,
};
use crate::error::{Error, Result};
use crate::net_model::{
    transmission_cost, CacheMatrix, CostParams, HexLayout, RadioParams, Topology,
};
use crate::per_slot::{solve_per_slot, PerSlotProblem};
use crate::predictor::{run_online, write_nmse, Method, OnlineRun, PredictorConfig};
use crate::rng::SeedBank;
use crate::trace::{
    allocate_to_users, load_per_user_trace, load_trace, synth_trace, top_f_filter, DemandTrace,
    SynthSpec,
};

/// Where requests come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TraceConfig {
    /// A `slot,file_id,count` or `slot,user_id,file_id,count` CSV. When
    /// unset the synthetic generator is used.
    pub path: Option<PathBuf>,
    /// Keep only the most requested files.
    pub top_files: Option<usize>,
    pub synthetic: SynthSpec,
}

impl Default for TraceConfig {
    fn default() -> Self {
        Self {
            path: None,
            top_files: Some(50),
            synthetic: SynthSpec::default(),
        }
    }
}

/// How the cache is filled at the first slot every policy sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitialCache {
    Empty,
    /// Delay-optimal placement for the first forecast, ignoring replacement.
    PerSlot,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CacheConfig {
    /// Files per node (`M`).
    pub capacity: f64,
    /// Bits per file (`B`).
    pub file_size_bits: f64,
    pub beta: f64,
    pub initial: InitialCache,
}

impl Default for CacheConfig {
    fn default() -> Self {
        Self {
            capacity: 5.0,
            file_size_bits: 1e3,
            beta: 1.5,
            initial: InitialCache::PerSlot,
        }
    }
}

/// Caching policies compared by the harness.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Policy {
    /// Myopic per-slot optimum on predicted demand.
    PsoP,
    /// Actor-critic without pre-training.
    Ddpg,
    /// Actor-critic pre-trained on per-slot solutions.
    Sddpg,
    /// As `Sddpg`, but the state and labels use the actual demand.
    SddpgR,
}

impl Policy {
    pub fn name(self) -> &'static str {
        match self {
            Policy::PsoP => "pso-p",
            Policy::Ddpg => "ddpg",
            Policy::Sddpg => "sddpg",
            Policy::SddpgR => "sddpg-r",
        }
    }

    pub const ALL: [Policy; 4] = [Policy::PsoP, Policy::Ddpg, Policy::Sddpg, Policy::SddpgR];
}

/// Axes of the sweeps. A segment count of 0 means continuous fractions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub betas: Vec<f64>,
    pub segments: Vec<usize>,
    pub rhos: Vec<usize>,
    pub clusters: Vec<usize>,
    pub methods: Vec<Method>,
    pub policies: Vec<Policy>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            betas: vec![0.0, 0.5, 1.0, 1.5, 2.0, 3.0],
            segments: vec![1, 2, 4, 0],
            rhos: vec![2, 4, 6, 8, 10, 12],
            clusters: vec![1, 2, 4, 8, 16],
            methods: vec![
                Method::ClusteredLstm,
                Method::PerFileLstm,
                Method::LastValue,
            ],
            policies: Policy::ALL.to_vec(),
        }
    }
}

/// Everything one experiment needs. Defaults give the full-size profile;
/// [`ExperimentConfig::desk`] is the small one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seeds: Vec<u64>,
    /// Pins named sub-seeds, e.g. `"agent.ou" = 7`.
    pub seed_overrides: BTreeMap<String, u64>,
    pub out: PathBuf,
    pub topology: HexLayout,
    pub radio: RadioParams,
    pub trace: TraceConfig,
    pub cache: CacheConfig,
    pub predictor: PredictorConfig,
    pub agent: AgentConfig,
    pub sweep: SweepConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2],
            seed_overrides: BTreeMap::new(),
            out: PathBuf::from("out"),
            topology: HexLayout::default(),
            radio: RadioParams::default(),
            trace: TraceConfig::default(),
            cache: CacheConfig::default(),
            predictor: PredictorConfig::default(),
            agent: AgentConfig::default(),
            sweep: SweepConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Full-size profile: 7 nodes, 50 files, 20 users, 600 slots.
    pub fn full() -> Self {
        Self::default()
    }

    /// 3 nodes, 10 files, 6 users, 300 slots, 150 pre-training slots.
    pub fn desk() -> Self {
        let mut c = Self::default();
        c.topology.n_nodes = 3;
        c.topology.n_users = 6;
        c.trace.top_files = Some(10);
        c.trace.synthetic = SynthSpec {
            files: 10,
            slots: 300,
            users: 6,
            ..SynthSpec::default()
        };
        c.cache.capacity = 2.0;
        c.agent.pretrain_slots = 150;
        c
    }

    pub fn profile(name: &str) -> Result<Self> {
        match name {
            "full" => Ok(Self::full()),
            "desk" => Ok(Self::desk()),
            other => Err(Error::Parameter(format!(
                "unknown profile {other:?}; expected full or desk"
            ))),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parameter(format!("config: {e}")))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Parameter(format!("config: {e}")))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Parameter("at least one seed is required".into()));
        }
        if !(self.cache.capacity >= 0.0) || !(self.cache.file_size_bits > 0.0) {
            return Err(Error::Parameter(
                "capacity must be >= 0 and file size > 0".into(),
            ));
        }
        CostParams::new(self.cache.beta, self.agent.gamma)?;
        if self.agent.minibatch == 0 || self.agent.buffer == 0 {
            return Err(Error::Parameter(
                "agent buffer and minibatch must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Seeds and derived streams of one run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunContext {
    pub seed: u64,
    pub seeds: SeedBank,
}

/// Every stochastic component draws from a named sub-seed of `seed`.
pub fn seed_everything(config: &ExperimentConfig, seed: u64) -> RunContext {
    RunContext {
        seed,
        seeds: SeedBank::with_overrides(seed, config.seed_overrides.clone()),
    }
}

pub fn build_topology(config: &ExperimentConfig, ctx: &RunContext) -> Result<Topology> {
    Topology::build_hex(&config.topology, &config.radio, ctx.seeds.seed("topology"))
}

/// Loads or generates the trace, filters it and splits it over the users.
pub fn build_trace(config: &ExperimentConfig, ctx: &RunContext) -> Result<DemandTrace> {
    let users = config.topology.n_users;
    let trace = match &config.trace.path {
        None => {
            let spec = SynthSpec {
                users,
                ..config.trace.synthetic.clone()
            };
            synth_trace(&spec, ctx.seeds.seed("trace"))?
        }
        Some(path) => {
            let header = std::fs::read_to_string(path)?;
            if header.starts_with("slot,user_id") {
                load_per_user_trace(path)?
            } else {
                load_trace(path)?
            }
        }
    };
    let trace = match config.trace.top_files {
        Some(keep) if keep < trace.files() => top_f_filter(&trace, keep)?,
        _ => trace,
    };
    if trace.users() == Some(users) {
        Ok(trace)
    } else {
        allocate_to_users(&trace, users, ctx.seeds.seed("allocation"))
    }
}

/// Forecasts as one optional vector per slot.
pub fn forecasts(run: &OnlineRun, slots: usize) -> Vec<Option<Vec<f64>>> {
    (0..slots)
        .map(|t| run.predicted_at(t).map(<[f64]>::to_vec))
        .collect()
}

/// One row of a prediction summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionSummary {
    pub method: String,
    pub rho: usize,
    pub clusters: usize,
    pub seed: u64,
    pub avg_nmse: f64,
    pub skipped_slots: usize,
}

/// Mean and sample standard deviation over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub key: String,
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 {
        values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

fn aggregate_by(rows: impl IntoIterator<Item = (String, f64)>) -> Vec<Aggregate> {
    let mut groups: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for (k, v) in rows {
        groups.entry(k).or_default().push(v);
    }
    groups
        .into_iter()
        .map(|(key, vals)| {
            let (mean, std) = mean_std(&vals);
            Aggregate {
                key,
                mean,
                std,
                n: vals.len(),
            }
        })
        .collect()
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Results of a prediction experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionReport {
    pub rows: Vec<PredictionSummary>,
    pub aggregates: Vec<Aggregate>,
}

/// Average NMSE per method over the configured `rho` and cluster sweeps.
///
/// C-LSTM runs once per `rho` (at the configured cluster count) and once
/// per cluster count (at the configured `rho`); the other methods run at
/// the configured `rho`. Writes `prediction_summary.csv`,
/// `prediction_aggregate.csv` and one NMSE curve per run under `out`.
pub fn run_prediction_experiment(
    config: &ExperimentConfig,
    out: Option<&Path>,
) -> Result<PredictionReport> {
    config.validate()?;
    let mut rows = Vec::new();
    for &seed in &config.seeds {
        let ctx = seed_everything(config, seed);
        let trace = build_trace(config, &ctx)?;
        let mut points: Vec<(Method, usize, usize)> = Vec::new();
        for &m in &config.sweep.methods {
            if m == Method::ClusteredLstm {
                for &rho in &config.sweep.rhos {
                    points.push((m, rho, config.predictor.clusters));
                }
                for &c in &config.sweep.clusters {
                    points.push((m, config.predictor.rho, c));
                }
            } else {
                points.push((m, config.predictor.rho, config.predictor.clusters));
            }
        }
        points.dedup();
        let mut seen = std::collections::BTreeSet::new();
        for (method, rho, clusters) in points {
            if !seen.insert((method.name(), rho, clusters)) {
                continue;
            }
            let pc = PredictorConfig {
                rho,
                clusters,
                ..config.predictor.clone()
            };
            log::info!("seed {seed}: {} rho={rho} C={clusters}", method.name());
            let run = run_online(&trace, &pc, method, &ctx.seeds)?;
            if let Some(dir) = out {
                write_nmse(
                    &run,
                    dir.join(format!(
                        "nmse_{}_rho{rho}_c{clusters}_seed{seed}.csv",
                        method.name()
                    )),
                )?;
            }
            rows.push(PredictionSummary {
                method: method.name().to_string(),
                rho,
                clusters: if method == Method::ClusteredLstm {
                    clusters
                } else {
                    0
                },
                seed,
                avg_nmse: run.average_nmse(0).unwrap_or(f64::NAN),
                skipped_slots: run.skipped_slots,
            });
        }
    }
    let aggregates = aggregate_by(rows.iter().map(|r| {
        (
            format!("{}/rho{}/c{}", r.method, r.rho, r.clusters),
            r.avg_nmse,
        )
    }));
    if let Some(dir) = out {
        write_rows(&dir.join("prediction_summary.csv"), &rows)?;
        write_rows(&dir.join("prediction_aggregate.csv"), &aggregates)?;
    }
    Ok(PredictionReport { rows, aggregates })
}

/// Inputs shared by every policy of one seed.
#[derive(Debug, Clone)]
pub struct CachingSetup {
    pub topology: Topology,
    pub trace: DemandTrace,
    pub predicted: Vec<Option<Vec<f64>>>,
    pub rho: usize,
    pub pretrain_end: usize,
    /// Rewards are `-cost / reward_scale`: the mean empty-cache delay cost
    /// over the pre-training window.
    pub reward_scale: f64,
    pub initial: CacheMatrix,
}

impl CachingSetup {
    pub fn build(config: &ExperimentConfig, ctx: &RunContext) -> Result<Self> {
        config.validate()?;
        let topology = build_topology(config, ctx)?;
        let trace = build_trace(config, ctx)?;
        let run = run_online(&trace, &config.predictor, Method::ClusteredLstm, &ctx.seeds)?;
        Self::from_parts(config, topology, trace, forecasts(&run, run_slots(&run)))
    }

    /// Builds a setup from given forecasts (`predicted[t]` for every slot).
    pub fn from_parts(
        config: &ExperimentConfig,
        topology: Topology,
        trace: DemandTrace,
        predicted: Vec<Option<Vec<f64>>>,
    ) -> Result<Self> {
        let rho = predicted
            .iter()
            .position(Option::is_some)
            .ok_or_else(|| Error::Input("no forecasts".into()))?;
        let pretrain_end = rho + config.agent.pretrain_slots;
        if pretrain_end >= trace.slots() {
            return Err(Error::Parameter(format!(
                "pre-training window ends at slot {pretrain_end} but the trace has {} slots",
                trace.slots()
            )));
        }
        let files = trace.files();
        let empty = CacheMatrix::zeros(
            topology.n_nodes(),
            files,
            config.cache.capacity,
            config.cache.file_size_bits,
        );
        let mut total = 0.0;
        for t in rho..pretrain_end {
            total += transmission_cost(&topology, &empty, &trace.per_user_slot_f64(t).unwrap())?;
        }
        let reward_scale = total / config.agent.pretrain_slots as f64;
        let reward_scale = if reward_scale > 0.0 {
            reward_scale
        } else {
            1.0
        };
        let initial = match config.cache.initial {
            InitialCache::Empty => empty,
            InitialCache::PerSlot => {
                let prev_demand = trace.per_user_slot_f64(rho - 1).unwrap();
                let p = PerSlotProblem::new(
                    &topology,
                    empty,
                    predicted[rho].clone().unwrap(),
                    &prev_demand,
                    0.0,
                )?;
                solve_per_slot(&p).cache
            }
        };
        Ok(Self {
            topology,
            trace,
            predicted,
            rho,
            pretrain_end,
            reward_scale,
            initial,
        })
    }

    pub fn environment(&self, beta: f64, gamma: f64) -> Result<Environment<'_>> {
        Environment::new(
            &self.topology,
            &self.trace,
            &self.predicted,
            CostParams::new(beta, gamma)?,
            self.initial.clone(),
        )
    }
}

fn run_slots(run: &OnlineRun) -> usize {
    run.first_slot + run.predicted.len()
}

/// Per-slot costs of one policy over the evaluation window, plus the
/// trained agent when there is one.
#[derive(Debug)]
pub struct PolicyRun {
    pub policy: Policy,
    pub log: CostLog,
    pub agent: Option<Agent>,
}

/// Runs one policy over `[rho, T)` and keeps the evaluation window.
pub fn run_policy(
    setup: &CachingSetup,
    agent_config: &AgentConfig,
    policy: Policy,
    beta: f64,
    seeds: &SeedBank,
    observer: &mut dyn RunObserver,
) -> Result<PolicyRun> {
    let mut env = setup.environment(beta, agent_config.gamma)?;
    let (rho, mid, end) = (setup.rho, setup.pretrain_end, setup.trace.slots());
    let source = match policy {
        Policy::SddpgR => DemandSource::Actual,
        _ => DemandSource::Predicted,
    };
    let n = setup.topology.n_nodes();
    let f = setup.trace.files();
    let capacity = setup.initial.capacity;
    match policy {
        Policy::PsoP => {
            let mut sink = PolicyObserver(observer);
            let log = run_per_slot_logged(&mut env, rho..end, source, &mut sink)?;
            Ok(PolicyRun {
                policy,
                log: keep_from(log, mid),
                agent: None,
            })
        }
        Policy::Ddpg => {
            let mut agent = Agent::new(n, f, capacity, agent_config, seeds);
            let mut enc = StateEncoder::new();
            let spec = RunSpec {
                slots: rho..end,
                source,
                train_actor: true,
                reward_scale: setup.reward_scale,
            };
            let log = run_interaction(&mut agent, &mut env, &mut enc, &spec, observer)?;
            Ok(PolicyRun {
                policy,
                log: keep_from(log, mid),
                agent: Some(agent),
            })
        }
        Policy::Sddpg | Policy::SddpgR => {
            let mut agent = Agent::new(n, f, capacity, agent_config, seeds);
            let mut enc = StateEncoder::new();
            let samples = pretrain_samples(&env, &mut enc, rho..mid, source)?;
            let (before, after) = agent.pretrain_actor(&samples)?;
            log::info!(
                "{}: actor pre-training error {before:.4e} -> {after:.4e}",
                policy.name()
            );
            let warmup = RunSpec {
                slots: rho..mid,
                source,
                train_actor: false,
                reward_scale: setup.reward_scale,
            };
            run_interaction(&mut agent, &mut env, &mut enc, &warmup, observer)?;
            agent.reset_exploration();
            let spec = RunSpec {
                slots: mid..end,
                train_actor: true,
                ..warmup
            };
            let log = run_interaction(&mut agent, &mut env, &mut enc, &spec, observer)?;
            Ok(PolicyRun {
                policy,
                log,
                agent: Some(agent),
            })
        }
    }
}

struct PolicyObserver<'o>(&'o mut dyn RunObserver);

fn run_per_slot_logged(
    env: &mut Environment,
    slots: std::ops::Range<usize>,
    source: DemandSource,
    observer: &mut PolicyObserver,
) -> Result<CostLog> {
    let mut log = CostLog::default();
    for t in slots {
        let solution = solve_per_slot(&env.per_slot_problem(t, source)?);
        observer.0.applied(t, &solution.cache);
        let cost = env.step(t, solution.cache)?;
        log.push(t, cost);
    }
    Ok(log)
}

/// Drops records before `slot` and recomputes the running average.
pub fn keep_from(log: CostLog, slot: usize) -> CostLog {
    let mut out = CostLog::default();
    for r in log.records.into_iter().filter(|r| r.slot >= slot) {
        out.push(
            r.slot,
            crate::agent::SlotCost {
                c_d: r.c_d,
                c_r: r.c_r,
                c_total: r.c_total,
            },
        );
    }
    out
}

/// One row of a caching summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CachingSummary {
    pub policy: String,
    pub beta: f64,
    /// 0 for continuous fractions.
    pub segments: usize,
    pub seed: u64,
    pub avg_cost: f64,
    pub avg_c_d: f64,
    pub avg_c_r: f64,
}

impl CachingSummary {
    fn from_log(policy: Policy, beta: f64, segments: usize, seed: u64, log: &CostLog) -> Self {
        let n = log.records.len().max(1) as f64;
        Self {
            policy: policy.name().to_string(),
            beta,
            segments,
            seed,
            avg_cost: log.final_average().unwrap_or(f64::NAN),
            avg_c_d: log.records.iter().map(|r| r.c_d).sum::<f64>() / n,
            avg_c_r: log.records.iter().map(|r| r.c_r).sum::<f64>() / n,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CachingReport {
    pub rows: Vec<CachingSummary>,
    pub aggregates: Vec<Aggregate>,
}

impl CachingReport {
    /// Mean average cost of `policy` at (`beta`, `segments`) over seeds.
    pub fn mean_cost(&self, policy: Policy, beta: f64, segments: usize) -> Option<f64> {
        let v: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.policy == policy.name() && r.beta == beta && r.segments == segments)
            .map(|r| r.avg_cost)
            .collect();
        (!v.is_empty()).then(|| mean_std(&v).0)
    }
}

/// Runs every configured policy for every beta (continuous actions), then
/// the learning policies for every segment count at the configured beta.
///
/// Writes `costs_<policy>_beta<b>_l<l>_seed<s>.csv` per run plus
/// `caching_summary.csv` and `caching_aggregate.csv` under `out`.
pub fn run_caching_experiment(
    config: &ExperimentConfig,
    out: Option<&Path>,
) -> Result<CachingReport> {
    config.validate()?;
    let mut rows = Vec::new();
    for &seed in &config.seeds {
        let ctx = seed_everything(config, seed);
        let setup = CachingSetup::build(config, &ctx)?;
        let mut points: Vec<(Policy, f64, usize)> = Vec::new();
        for &beta in &config.sweep.betas {
            for &p in &config.sweep.policies {
                points.push((p, beta, 0));
            }
        }
        for &l in &config.sweep.segments {
            for &p in &config.sweep.policies {
                if p != Policy::PsoP {
                    points.push((p, config.cache.beta, l));
                }
            }
        }
        let mut seen = Vec::new();
        for (policy, beta, l) in points {
            if seen.contains(&(policy, beta.to_bits(), l)) {
                continue;
            }
            seen.push((policy, beta.to_bits(), l));
            let agent_config = AgentConfig {
                segments: (l > 0).then_some(l),
                ..config.agent.clone()
            };
            log::info!("seed {seed}: {} beta={beta} l={l}", policy.name());
            let run = run_policy(&setup, &agent_config, policy, beta, &ctx.seeds, &mut ())?;
            if let Some(dir) = out {
                run.log.write_csv(dir.join(format!(
                    "costs_{}_beta{beta}_l{l}_seed{seed}.csv",
                    policy.name()
                )))?;
            }
            rows.push(CachingSummary::from_log(policy, beta, l, seed, &run.log));
        }
    }
    let aggregates = aggregate_by(rows.iter().map(|r| {
        (
            format!("{}/beta{}/l{}", r.policy, r.beta, r.segments),
            r.avg_cost,
        )
    }));
    if let Some(dir) = out {
        write_rows(&dir.join("caching_summary.csv"), &rows)?;
        write_rows(&dir.join("caching_aggregate.csv"), &aggregates)?;
    }
    Ok(CachingReport { rows, aggregates })
}

/// Runs the myopic baseline alone; handy for calibration.
pub fn run_baseline(setup: &CachingSetup, beta: f64, gamma: f64) -> Result<CostLog> {
    let mut env = setup.environment(beta, gamma)?;
    let log = run_per_slot_policy(
        &mut env,
        setup.rho..setup.trace.slots(),
        DemandSource::Predicted,
    )?;
    Ok(keep_from(log, setup.pretrain_end))
}
