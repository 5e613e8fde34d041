//! `ldx` command line: environment generation, allocation solving, agent
//! runs, decay-rate estimation, and the replication benchmark.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use ldx_core::bench::{aggregate, default_schedule_for, emit_results, load_config, run_benchmark};
use ldx_core::env::EnvSpec;
use ldx_core::error::{LdxError, Result};
use ldx_core::lazygradient::{
    run_baseline, run_lazygradient, BaselineAlgo, InitPolicy, RunConfig, SampleMode,
};
use ldx_core::mdp::{state_averaged_value, write_mdp_file, TabularMdp};
use ldx_core::rate::{estimate_pfs, fit_decay_rate, AgentSpec, PfsEstimate, RateFit};
use ldx_core::solver::solve_allocation;

#[derive(Parser)]
#[command(
    name = "ldx",
    about = "Fixed-budget data acquisition for discounted MDPs",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a benchmark environment and write its MDP spec file.
    GenEnv(GenEnvArgs),
    /// Solve the sampling-allocation problem for a known model.
    Solve(SolveArgs),
    /// Run one agent for a fixed budget and report the learned policy.
    Run(RunArgs),
    /// Estimate the PFS decay rate over a ladder of budgets.
    Rate(RateArgs),
    /// Replication benchmark over algorithms and budgets.
    Bench(BenchArgs),
}

#[derive(Args)]
struct GenEnvArgs {
    /// gridworld | launch | hard
    #[arg(long)]
    kind: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// States for the launch environment.
    #[arg(long, default_value_t = 50)]
    states: usize,
    /// Branch count for the hard instance.
    #[arg(long, default_value_t = 1)]
    k: usize,
    /// Arms per branch for the hard instance.
    #[arg(long, default_value_t = 2)]
    l: usize,
    /// Advantage of the best arm in the hard instance.
    #[arg(long, default_value_t = 0.02)]
    alpha: f64,
    /// Discount for the hard instance (gridworld and launch are fixed at 0.99).
    #[arg(long, default_value_t = 0.9)]
    gamma: f64,
    /// Base loop probability for the hard instance; defaults to (4g-1)/(3g).
    #[arg(long)]
    p: Option<f64>,
    /// Output path for the MDP spec file.
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Args)]
struct SolveArgs {
    /// Environment: builtin name or path to an MDP spec file.
    #[arg(long)]
    env: String,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long, default_value_t = 5000)]
    iters: usize,
    /// Accepted for interface stability; the solver is deterministic.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output path (stdout when omitted).
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    env: String,
    /// lazygradient | uniform | qlearning | psrl
    #[arg(long)]
    algo: String,
    #[arg(long)]
    budget: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// trajectory | generative (lazygradient only)
    #[arg(long, default_value = "trajectory")]
    mode: String,
    /// uniform | max_coverage
    #[arg(long, default_value = "max_coverage")]
    init: String,
    #[arg(long)]
    n0: Option<usize>,
    #[arg(long)]
    t1: Option<usize>,
    #[arg(long)]
    c_tilde: Option<f64>,
    /// Exploration decay exponent.
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RateArgs {
    #[arg(long)]
    env: String,
    /// lazygradient | uniform | qlearning | psrl | oracle
    #[arg(long)]
    agent: String,
    /// Comma-separated budget ladder, e.g. 800,1600,2400.
    #[arg(long, value_delimiter = ',')]
    budgets: Vec<usize>,
    #[arg(long, default_value_t = 1000)]
    reps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    config: PathBuf,
    /// Worker count override.
    #[arg(long)]
    jobs: Option<usize>,
    /// Output directory override.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Parse `--env`: a builtin (`gridworld`, `gridworld:SEED`, `launch`,
/// `launch:STATES:SEED`, `hard:K:L:ALPHA:GAMMA`) or a spec-file path.
fn parse_env_ref(text: &str) -> Result<EnvSpec> {
    let parts: Vec<&str> = text.split(':').collect();
    let num = |s: &str, what: &str| -> Result<u64> {
        s.parse()
            .map_err(|e| LdxError::Validation(format!("{what} in --env: {e}")))
    };
    match parts[0] {
        "gridworld" => Ok(EnvSpec::Gridworld {
            seed: if parts.len() > 1 {
                num(parts[1], "seed")?
            } else {
                0
            },
        }),
        "launch" => Ok(EnvSpec::Launch {
            num_states: if parts.len() > 1 {
                num(parts[1], "states")? as usize
            } else {
                50
            },
            seed: if parts.len() > 2 {
                num(parts[2], "seed")?
            } else {
                0
            },
        }),
        "hard" => {
            let k = if parts.len() > 1 {
                num(parts[1], "k")? as usize
            } else {
                1
            };
            let l = if parts.len() > 2 {
                num(parts[2], "l")? as usize
            } else {
                2
            };
            let alpha = if parts.len() > 3 {
                parts[3]
                    .parse()
                    .map_err(|e| LdxError::Validation(format!("alpha in --env: {e}")))?
            } else {
                0.02
            };
            let gamma = if parts.len() > 4 {
                parts[4]
                    .parse()
                    .map_err(|e| LdxError::Validation(format!("gamma in --env: {e}")))?
            } else {
                0.9
            };
            Ok(EnvSpec::HardInstance {
                k,
                l,
                p: None,
                alpha,
                gamma,
            })
        }
        _ => Ok(EnvSpec::File {
            path: text.to_string(),
        }),
    }
}

fn emit_json<T: Serialize>(value: &T, out: Option<&PathBuf>) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| LdxError::Parse(e.to_string()))?;
    match out {
        Some(path) => {
            std::fs::write(path, text).map_err(|e| LdxError::io(path.display().to_string(), e))
        }
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn gen_env(args: &GenEnvArgs) -> Result<()> {
    let spec = match args.kind.as_str() {
        "gridworld" => EnvSpec::Gridworld { seed: args.seed },
        "launch" => EnvSpec::Launch {
            num_states: args.states,
            seed: args.seed,
        },
        "hard" | "hard_instance" => EnvSpec::HardInstance {
            k: args.k,
            l: args.l,
            p: args.p,
            alpha: args.alpha,
            gamma: args.gamma,
        },
        other => {
            return Err(LdxError::Validation(format!(
                "unknown environment kind '{other}'"
            )))
        }
    };
    let mdp = spec.build()?;
    write_mdp_file(&mdp, &args.out)?;
    eprintln!(
        "wrote {} ({} states, {} actions)",
        args.out.display(),
        mdp.num_states(),
        mdp.num_actions()
    );
    Ok(())
}

#[derive(Serialize)]
struct SolveOutput {
    env: String,
    num_states: usize,
    num_actions: usize,
    epsilon: f64,
    iters: usize,
    seed: u64,
    objective: f64,
    /// Allocation by state (rows) and action (columns).
    omega: Vec<Vec<f64>>,
}

fn solve(args: &SolveArgs) -> Result<()> {
    let spec = parse_env_ref(&args.env)?;
    let mdp = spec.build()?;
    let epsilon = args.epsilon.unwrap_or_else(|| {
        ldx_core::solver::default_epsilon(mdp.num_states(), mdp.num_actions())
    });
    let solution = solve_allocation(&mdp, epsilon, args.iters)?;
    let omega = (0..mdp.num_states())
        .map(|s| {
            (0..mdp.num_actions())
                .map(|a| solution.allocation.get(s, a))
                .collect()
        })
        .collect();
    emit_json(
        &SolveOutput {
            env: spec.id(),
            num_states: mdp.num_states(),
            num_actions: mdp.num_actions(),
            epsilon: solution.epsilon,
            iters: args.iters,
            seed: args.seed,
            objective: solution.objective,
            omega,
        },
        args.out.as_ref(),
    )
}

#[derive(Serialize)]
struct RunOutput {
    env: String,
    algo: String,
    budget: usize,
    seed: u64,
    pi_hat: Vec<usize>,
    correct: bool,
    state_averaged_value: f64,
    visit_counts: Vec<Vec<u64>>,
    update_times: Vec<usize>,
    objective_trace: Vec<f64>,
}

fn build_run_config(args: &RunArgs, env_spec: &EnvSpec, mdp: &TabularMdp) -> Result<RunConfig> {
    let mut schedule = default_schedule_for(env_spec, mdp);
    if let Some(n0) = args.n0 {
        schedule.n0 = n0;
        schedule.t1 = n0 + 1;
    }
    if let Some(t1) = args.t1 {
        schedule.t1 = t1;
    }
    if let Some(c) = args.c_tilde {
        schedule.c_tilde = c;
    }
    if let Some(a) = args.alpha {
        schedule.alpha = a;
    }
    let mode = match args.mode.as_str() {
        "trajectory" => SampleMode::Trajectory,
        "generative" => SampleMode::Generative,
        other => {
            return Err(LdxError::Validation(format!(
                "unknown mode '{other}' (trajectory | generative)"
            )))
        }
    };
    let init_policy = match args.init.as_str() {
        "uniform" => InitPolicy::Uniform,
        "max_coverage" => InitPolicy::MaxCoverage,
        other => {
            return Err(LdxError::Validation(format!(
                "unknown init policy '{other}' (uniform | max_coverage)"
            )))
        }
    };
    Ok(RunConfig {
        budget: args.budget,
        schedule,
        epsilon: args.epsilon,
        init_policy,
        seed: args.seed,
        mode,
    })
}

fn run(args: &RunArgs) -> Result<()> {
    let spec = parse_env_ref(&args.env)?;
    let mdp = spec.build()?;
    let result = match args.algo.as_str() {
        "lazygradient" => {
            let cfg = build_run_config(args, &spec, &mdp)?;
            run_lazygradient(&mdp, &cfg)?
        }
        "uniform" => run_baseline(&mdp, BaselineAlgo::Uniform, args.budget, args.seed)?,
        "qlearning" => run_baseline(&mdp, BaselineAlgo::QLearning, args.budget, args.seed)?,
        "psrl" => run_baseline(&mdp, BaselineAlgo::Psrl, args.budget, args.seed)?,
        other => {
            return Err(LdxError::Validation(format!(
                "unknown algorithm '{other}' (lazygradient | uniform | qlearning | psrl)"
            )))
        }
    };
    let truth = ldx_core::mdp::value_iteration(&mdp, ldx_core::mdp::DEFAULT_VI_TOL)?;
    let value = state_averaged_value(&mdp, &result.pi_hat)?;
    let visit_counts = (0..mdp.num_states())
        .map(|s| {
            (0..mdp.num_actions())
                .map(|a| result.visit_counts[[s, a]])
                .collect()
        })
        .collect();
    emit_json(
        &RunOutput {
            env: spec.id(),
            algo: args.algo.clone(),
            budget: args.budget,
            seed: args.seed,
            pi_hat: result.pi_hat_actions().to_vec(),
            correct: result.pi_hat_actions() == truth.pi_star_actions(),
            state_averaged_value: value,
            visit_counts,
            update_times: result.policy_change_times.clone(),
            objective_trace: result.objective_trace.clone(),
        },
        args.out.as_ref(),
    )
}

#[derive(Serialize)]
struct RateOutput {
    env: String,
    agent: String,
    reps: usize,
    base_seed: u64,
    points: Vec<PfsEstimate>,
    fit: Option<RateFit>,
}

fn rate(args: &RateArgs) -> Result<()> {
    let spec = parse_env_ref(&args.env)?;
    let mdp = spec.build()?;
    let agent = match args.agent.as_str() {
        "lazygradient" => {
            let mut cfg = RunConfig::default_for(&mdp, 0, 0);
            cfg.schedule = default_schedule_for(&spec, &mdp);
            if !mdp.is_ergodic() {
                cfg.mode = SampleMode::Generative;
            }
            AgentSpec::LazyGradient { config: cfg }
        }
        "uniform" => AgentSpec::Baseline {
            algo: BaselineAlgo::Uniform,
        },
        "qlearning" => AgentSpec::Baseline {
            algo: BaselineAlgo::QLearning,
        },
        "psrl" => AgentSpec::Baseline {
            algo: BaselineAlgo::Psrl,
        },
        "oracle" => AgentSpec::Oracle,
        other => {
            return Err(LdxError::Validation(format!(
                "unknown agent '{other}' (lazygradient | uniform | qlearning | psrl | oracle)"
            )))
        }
    };
    if args.budgets.is_empty() {
        return Err(LdxError::Validation("at least one budget required".into()));
    }
    let mut points = Vec::new();
    for &budget in &args.budgets {
        let est = estimate_pfs(&mdp, &agent, budget, args.reps, args.seed)?;
        eprintln!(
            "budget {budget}: pfs {:.4} ({} of {})",
            est.pfs, est.failures, est.replications
        );
        points.push(est);
    }
    let fit_input: Vec<(usize, f64)> = points.iter().map(|p| (p.budget, p.pfs)).collect();
    let fit = fit_decay_rate(&fit_input).ok();
    emit_json(
        &RateOutput {
            env: spec.id(),
            agent: args.agent.clone(),
            reps: args.reps,
            base_seed: args.seed,
            points,
            fit,
        },
        args.out.as_ref(),
    )
}

fn bench(args: &BenchArgs) -> Result<bool> {
    let mut cfg = load_config(&args.config)?;
    if let Some(jobs) = args.jobs {
        cfg.jobs = Some(jobs);
    }
    if let Some(out) = &args.out {
        cfg.output = Some(out.clone());
    }
    if let Ok(seed_text) = std::env::var("LDX_SEED") {
        cfg.base_seed = seed_text
            .parse()
            .map_err(|e| LdxError::Validation(format!("LDX_SEED: {e}")))?;
    }
    let rows = run_benchmark(&cfg)?;
    let summary = aggregate(&rows);
    let out_dir = cfg
        .output
        .clone()
        .unwrap_or_else(|| PathBuf::from("ldx-bench-out"));
    emit_results(&cfg, &rows, &summary, &out_dir)?;
    for s in &summary {
        println!(
            "{:>14} T={:<6} PCS {}  value {:.4} \u{b1} {:.4}{}",
            s.algo,
            s.budget,
            s.pcs_formatted(),
            s.mean_value,
            s.value_ci,
            if s.errors > 0 {
                format!("  ({} errors)", s.errors)
            } else {
                String::new()
            }
        );
    }
    println!("results written to {}", out_dir.display());
    Ok(rows.iter().all(|r| r.error.is_none()))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::GenEnv(args) => gen_env(args).map(|_| true),
        Command::Solve(args) => solve(args).map(|_| true),
        Command::Run(args) => run(args).map(|_| true),
        Command::Rate(args) => rate(args).map(|_| true),
        Command::Bench(args) => bench(args),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
