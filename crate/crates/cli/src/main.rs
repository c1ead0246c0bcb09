//! `coded-cache`: drives the forecasting and placement experiments.
//!
//! Every command prints one JSON line on success. Failures print
//! `{"status":"error","kind":...,"message":...}` to stderr and exit with
//! status 1 (2 for usage errors).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use coded_cache::agent::{evaluate_policy, pretrain_samples, Agent, DemandSource, StateEncoder};
use coded_cache::harness::{
    build_topology, build_trace, keep_from, run_caching_experiment, run_policy,
    run_prediction_experiment, seed_everything, CachingSetup, ExperimentConfig, Policy,
};
use coded_cache::predictor::{run_online, write_nmse, write_predictions, Method};
use coded_cache::trace::{allocate_to_users, load_trace, save_per_user_trace, save_trace};
use coded_cache::{Error, Result};

#[derive(Debug, Parser)]
#[command(
    name = "coded-cache",
    version,
    about = "Request forecasting and learned coded cache placement"
)]
struct Cli {
    /// TOML experiment config; missing keys take profile defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Built-in profile used when no config file is given.
    #[arg(long, global = true, value_enum, default_value_t = Profile::Desk)]
    profile: Profile,
    /// Overrides the config's seed list with a single seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (created if missing).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Profile {
    Desk,
    Full,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum PolicyArg {
    PsoP,
    Ddpg,
    Sddpg,
    SddpgR,
}

impl From<PolicyArg> for Policy {
    fn from(p: PolicyArg) -> Self {
        match p {
            PolicyArg::PsoP => Policy::PsoP,
            PolicyArg::Ddpg => Policy::Ddpg,
            PolicyArg::Sddpg => Policy::Sddpg,
            PolicyArg::SddpgR => Policy::SddpgR,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum MethodArg {
    CLstm,
    Lstm,
    LastValue,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::CLstm => Method::ClusteredLstm,
            MethodArg::Lstm => Method::PerFileLstm,
            MethodArg::LastValue => Method::LastValue,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SweepKind {
    Prediction,
    Caching,
    All,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build the hexagonal topology and write `topology.json`.
    Topo,
    /// Generate a synthetic trace, or convert an aggregate CSV, and write
    /// `trace.csv` and `trace_per_user.csv`.
    Trace {
        /// Aggregate `slot,file_id,count` CSV to filter and split over users.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Run the online forecaster and write predictions and NMSE curves.
    Predict {
        #[arg(long, value_enum, default_value_t = MethodArg::CLstm)]
        method: MethodArg,
    },
    /// Pre-train the actor on per-slot solutions and save it.
    Pretrain {
        #[arg(long, value_enum, default_value_t = PolicyArg::Sddpg)]
        policy: PolicyArg,
    },
    /// Run a policy over the trace; write its cost log and networks.
    Train {
        #[arg(long, value_enum, default_value_t = PolicyArg::Sddpg)]
        policy: PolicyArg,
        /// Replacement weight; defaults to the config value.
        #[arg(long)]
        beta: Option<f64>,
    },
    /// Noise-free rollout of saved networks over the evaluation window.
    Evaluate {
        /// Directory holding the checkpoints written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value_t = PolicyArg::Sddpg)]
        policy: PolicyArg,
        #[arg(long)]
        beta: Option<f64>,
    },
    /// Run the configured prediction and/or caching sweeps.
    Sweep {
        #[arg(long, value_enum, default_value_t = SweepKind::All)]
        kind: SweepKind,
    },
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut config = match &cli.config {
        Some(path) => {
            let base = match cli.profile {
                Profile::Desk => ExperimentConfig::desk(),
                Profile::Full => ExperimentConfig::full(),
            };
            merge_file(base, path)?
        }
        None => match cli.profile {
            Profile::Desk => ExperimentConfig::desk(),
            Profile::Full => ExperimentConfig::full(),
        },
    };
    if let Some(seed) = cli.seed {
        config.seeds = vec![seed];
    }
    if let Some(out) = &cli.out {
        config.out = out.clone();
    }
    config.validate()?;
    Ok(config)
}

/// Overlays the keys present in `path` onto `base`.
fn merge_file(base: ExperimentConfig, path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)?;
    let overlay: toml::Table = text
        .parse()
        .map_err(|e| Error::Parameter(format!("{}: {e}", path.display())))?;
    let mut merged: toml::Table =
        toml::Table::try_from(&base).map_err(|e| Error::Parameter(e.to_string()))?;
    merge_tables(&mut merged, overlay);
    ExperimentConfig::from_toml(
        &toml::to_string(&merged).map_err(|e| Error::Parameter(e.to_string()))?,
    )
}

fn merge_tables(base: &mut toml::Table, overlay: toml::Table) {
    for (k, v) in overlay {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge_tables(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn out_dir(config: &ExperimentConfig) -> Result<PathBuf> {
    std::fs::create_dir_all(&config.out)?;
    Ok(config.out.clone())
}

fn run(cli: &Cli) -> Result<serde_json::Value> {
    let config = load_config(cli)?;
    let seed = config.seeds[0];
    let ctx = seed_everything(&config, seed);
    match &cli.command {
        Command::Topo => {
            let dir = out_dir(&config)?;
            let topo = build_topology(&config, &ctx)?;
            let path = dir.join("topology.json");
            std::fs::write(&path, topo.to_json()?)?;
            Ok(
                json!({"command": "topo", "seed": seed, "nodes": topo.n_nodes(), "users": topo.n_users(), "outputs": [path]}),
            )
        }
        Command::Trace { input } => {
            let dir = out_dir(&config)?;
            let trace = match input {
                Some(path) => {
                    let raw = load_trace(path)?;
                    let keep = config
                        .trace
                        .top_files
                        .unwrap_or(raw.files())
                        .min(raw.files());
                    let filtered = coded_cache::trace::top_f_filter(&raw, keep)?;
                    allocate_to_users(
                        &filtered,
                        config.topology.n_users,
                        ctx.seeds.seed("allocation"),
                    )?
                }
                None => build_trace(&config, &ctx)?,
            };
            let agg = dir.join("trace.csv");
            let per_user = dir.join("trace_per_user.csv");
            save_trace(&trace, &agg)?;
            save_per_user_trace(&trace, &per_user)?;
            Ok(
                json!({"command": "trace", "seed": seed, "slots": trace.slots(), "files": trace.files(), "outputs": [agg, per_user]}),
            )
        }
        Command::Predict { method } => {
            let dir = out_dir(&config)?;
            let method = Method::from(*method);
            let trace = build_trace(&config, &ctx)?;
            let run = run_online(&trace, &config.predictor, method, &ctx.seeds)?;
            let preds = dir.join(format!("predictions_{}.csv", method.name()));
            let nmse = dir.join(format!("nmse_{}.csv", method.name()));
            write_predictions(&run, &preds)?;
            write_nmse(&run, &nmse)?;
            Ok(json!({
                "command": "predict",
                "seed": seed,
                "method": method.name(),
                "avg_nmse": run.average_nmse(0),
                "skipped_slots": run.skipped_slots,
                "outputs": [preds, nmse],
            }))
        }
        Command::Pretrain { policy } => {
            let dir = out_dir(&config)?;
            let policy = Policy::from(*policy);
            let source = match policy {
                Policy::SddpgR => DemandSource::Actual,
                _ => DemandSource::Predicted,
            };
            let setup = CachingSetup::build(&config, &ctx)?;
            let env = setup.environment(config.cache.beta, config.agent.gamma)?;
            let mut agent = Agent::new(
                setup.topology.n_nodes(),
                setup.trace.files(),
                config.cache.capacity,
                &config.agent,
                &ctx.seeds,
            );
            let samples = pretrain_samples(
                &env,
                &mut StateEncoder::new(),
                setup.rho..setup.pretrain_end,
                source,
            )?;
            let (before, after) = agent.pretrain_actor(&samples)?;
            agent.save(&dir)?;
            Ok(json!({
                "command": "pretrain",
                "seed": seed,
                "policy": policy.name(),
                "samples": samples.len(),
                "placement_error_before": before,
                "placement_error_after": after,
                "outputs": [dir],
            }))
        }
        Command::Train { policy, beta } => {
            let dir = out_dir(&config)?;
            let policy = Policy::from(*policy);
            let beta = beta.unwrap_or(config.cache.beta);
            let setup = CachingSetup::build(&config, &ctx)?;
            let run = run_policy(&setup, &config.agent, policy, beta, &ctx.seeds, &mut ())?;
            let costs = dir.join(format!("costs_{}.csv", policy.name()));
            run.log.write_csv(&costs)?;
            if let Some(agent) = &run.agent {
                agent.save(&dir)?;
            }
            Ok(json!({
                "command": "train",
                "seed": seed,
                "policy": policy.name(),
                "beta": beta,
                "avg_cost": run.log.final_average(),
                "avg_replacement": run.log.mean_replacement(),
                "outputs": if run.agent.is_some() { json!([costs, dir]) } else { json!([costs]) },
            }))
        }
        Command::Evaluate {
            checkpoint,
            policy,
            beta,
        } => {
            let dir = out_dir(&config)?;
            let policy = Policy::from(*policy);
            let beta = beta.unwrap_or(config.cache.beta);
            let source = match policy {
                Policy::SddpgR => DemandSource::Actual,
                _ => DemandSource::Predicted,
            };
            let setup = CachingSetup::build(&config, &ctx)?;
            let mut agent = Agent::new(
                setup.topology.n_nodes(),
                setup.trace.files(),
                config.cache.capacity,
                &config.agent,
                &ctx.seeds,
            );
            agent.load(checkpoint)?;
            let mut env = setup.environment(beta, config.agent.gamma)?;
            let log = evaluate_policy(
                &mut agent,
                &mut env,
                &mut StateEncoder::new(),
                setup.rho..setup.trace.slots(),
                source,
            )?;
            let log = keep_from(log, setup.pretrain_end);
            let costs = dir.join(format!("eval_costs_{}.csv", policy.name()));
            log.write_csv(&costs)?;
            Ok(json!({
                "command": "evaluate",
                "seed": seed,
                "policy": policy.name(),
                "beta": beta,
                "avg_cost": log.final_average(),
                "outputs": [costs],
            }))
        }
        Command::Sweep { kind } => {
            let dir = out_dir(&config)?;
            let mut result = json!({"command": "sweep", "seeds": config.seeds});
            if matches!(kind, SweepKind::Prediction | SweepKind::All) {
                let report = run_prediction_experiment(&config, Some(&dir))?;
                result["prediction"] = serde_json::to_value(&report.aggregates)?;
            }
            if matches!(kind, SweepKind::Caching | SweepKind::All) {
                let report = run_caching_experiment(&config, Some(&dir))?;
                result["caching"] = serde_json::to_value(&report.aggregates)?;
            }
            result["outputs"] = json!([dir]);
            Ok(result)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let line = json!({"status": "error", "kind": "usage", "message": e.to_string().trim()});
            eprintln!("{line}");
            return ExitCode::from(2);
        }
    };
    match run(&cli) {
        Ok(mut value) => {
            value["status"] = json!("ok");
            println!("{value}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!(
                "{}",
                json!({"status": "error", "kind": e.kind(), "message": e.to_string()})
            );
            ExitCode::FAILURE
        }
    }
}
