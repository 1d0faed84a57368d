//! Command-line frontend: solve, sweep, simulate, and enumerate pipelines
//! over a JSON channel/problem configuration, emitting JSON reports and
//! plot-ready CSV tables.

mod config;
mod report;

use std::fmt;
use std::path::PathBuf;

use clap::{Parser, Subcommand};
use rayon::prelude::*;
use serde_json::json;

use linksched::{eval, lp, mdp, sim, PolicyTable};

use config::RunSpec;
use report::{json_f64, json_matrix, sig12};

#[derive(Debug)]
pub enum CliError {
    Invalid(String),
    Infeasible(String),
    TooLarge(String),
    Numerical(String),
}

impl CliError {
    fn exit_code(&self) -> i32 {
        match self {
            CliError::Invalid(_) => 1,
            CliError::Infeasible(_) => 2,
            CliError::TooLarge(_) => 3,
            CliError::Numerical(_) => 4,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Invalid(m)
            | CliError::Infeasible(m)
            | CliError::TooLarge(m)
            | CliError::Numerical(m) => write!(f, "{m}"),
        }
    }
}

impl From<lp::LpError> for CliError {
    fn from(e: lp::LpError) -> Self {
        match e {
            lp::LpError::Infeasible { .. } => CliError::Infeasible(e.to_string()),
            _ => CliError::Numerical(e.to_string()),
        }
    }
}

impl From<mdp::MdpError> for CliError {
    fn from(e: mdp::MdpError) -> Self {
        match e {
            mdp::MdpError::InfeasibleBudget => CliError::Infeasible(e.to_string()),
            mdp::MdpError::Eval(inner) => inner.into(),
            _ => CliError::Numerical(e.to_string()),
        }
    }
}

impl From<eval::EvalError> for CliError {
    fn from(e: eval::EvalError) -> Self {
        match e {
            eval::EvalError::TooLarge { .. } => CliError::TooLarge(e.to_string()),
            eval::EvalError::InfeasibleBudget => CliError::Infeasible(e.to_string()),
            _ => CliError::Numerical(e.to_string()),
        }
    }
}

#[derive(Parser)]
#[command(
    name = "linksched",
    about = "Delay-optimal power-constrained transmission scheduling over Markov channels"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve one budget by both routes and report the policies.
    Solve {
        #[arg(long)]
        config: PathBuf,
        /// Override the configured power budget.
        #[arg(long)]
        epsilon: Option<f64>,
    },
    /// Sweep the power budget and emit a CSV tradeoff table.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "eps-from")]
        eps_from: f64,
        #[arg(long = "eps-to")]
        eps_to: f64,
        #[arg(long = "eps-step")]
        eps_step: f64,
        /// Slots per greedy-baseline simulation.
        #[arg(long = "sim-slots", default_value_t = 1_000_000)]
        sim_slots: u64,
        /// Base seed; row i simulates with seed + i.
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Also write the CSV to a file (stdout always gets it).
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Simulate a policy and report the measured averages.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        /// Policy source: lp, mdp, greedy, or file:<path>.
        #[arg(long)]
        policy: String,
        #[arg(long)]
        slots: u64,
        #[arg(long)]
        seed: u64,
    },
    /// Brute-force enumeration of threshold policies (small instances).
    Enumerate {
        #[arg(long)]
        config: PathBuf,
    },
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Solve { config, epsilon } => cmd_solve(&config::load(&config, epsilon)?),
        Command::Sweep {
            config,
            eps_from,
            eps_to,
            eps_step,
            sim_slots,
            seed,
            output,
        } => cmd_sweep(
            &config::load(&config, None)?,
            eps_from,
            eps_to,
            eps_step,
            sim_slots,
            seed,
            output.as_deref(),
        ),
        Command::Simulate {
            config,
            policy,
            slots,
            seed,
        } => cmd_simulate(&config::load(&config, None)?, &policy, slots, seed),
        Command::Enumerate { config } => cmd_enumerate(&config::load(&config, None)?),
    }
}

fn cmd_solve(spec: &RunSpec) -> Result<(), CliError> {
    let model = &spec.model;
    let cfg = &spec.config;

    let lp_sol = lp::solve_delay_lp(model, cfg)?;
    let policy = lp::extract_policy(&lp_sol, cfg.arrival_rate, cfg.lp_tolerance);

    let lagrangian = mdp::solve_lagrangian(model, cfg)?;
    let delta = (lp_sol.objective_delay - lagrangian.result.avg_delay).abs();

    let out = json!({
        "arrival_rate": json_f64(cfg.arrival_rate),
        "buffer_size": cfg.buffer_size,
        "power_budget": json_f64(cfg.power_budget),
        "lp": {
            "delay": json_f64(lp_sol.objective_delay),
            "avg_queue": json_f64(lp_sol.avg_queue),
            "power": json_f64(lp_sol.achieved_power),
            "policy": json_matrix(policy.rows()),
        },
        "mdp": {
            "eta": json_f64(lagrangian.eta),
            "lambda": json_f64(lagrangian.mixture.lambda),
            "thresholds_feasible": lagrangian.mixture.pi1.thresholds(),
            "thresholds_relaxed": lagrangian.mixture.pi2.thresholds(),
            "delay": json_f64(lagrangian.result.avg_delay),
            "avg_queue": json_f64(lagrangian.result.avg_queue),
            "power": json_f64(lagrangian.result.avg_power),
        },
        "cross_method_delay_delta": json_f64(delta),
    });
    println!("{}", serde_json::to_string_pretty(&out).expect("serializable"));
    Ok(())
}

struct SweepRow {
    epsilon: f64,
    feasible: bool,
    delay_lp: f64,
    queue_lp: f64,
    delay_mdp: f64,
    delay_greedy: f64,
    se_greedy: f64,
    lambda: f64,
    thresholds: Vec<usize>,
}

#[allow(clippy::too_many_arguments)]
fn cmd_sweep(
    spec: &RunSpec,
    eps_from: f64,
    eps_to: f64,
    eps_step: f64,
    sim_slots: u64,
    seed: u64,
    output: Option<&std::path::Path>,
) -> Result<(), CliError> {
    if !(eps_step > 0.0) || eps_to < eps_from {
        return Err(CliError::Invalid(
            "sweep needs eps-from <= eps-to and a positive eps-step".into(),
        ));
    }
    let points = ((eps_to - eps_from) / eps_step + 1e-9).floor() as usize + 1;
    let grid: Vec<f64> = (0..points).map(|i| eps_from + i as f64 * eps_step).collect();
    let s_count = spec.model.n_states();

    let rows: Vec<Result<SweepRow, CliError>> = grid
        .par_iter()
        .enumerate()
        .map(|(i, &epsilon)| sweep_row(spec, epsilon, sim_slots, seed + i as u64))
        .collect();

    let mut csv = String::new();
    csv.push_str("epsilon,delay_lp,queue_lp,delay_mdp,delay_greedy,se_greedy,lambda");
    for s in 1..=s_count {
        csv.push_str(&format!(",thresholds_{s}"));
    }
    csv.push_str(",status\n");

    let mut previous_delay: Option<f64> = None;
    for row in rows {
        let row = row?;
        if row.feasible {
            if let Some(last) = previous_delay {
                if row.delay_lp > last + 1e-9 {
                    eprintln!(
                        "warning: optimal delay increased from {} to {} at epsilon = {}",
                        sig12(last),
                        sig12(row.delay_lp),
                        sig12(row.epsilon)
                    );
                }
            }
            previous_delay = Some(row.delay_lp);
            csv.push_str(&format!(
                "{},{},{},{},{},{},{}",
                sig12(row.epsilon),
                sig12(row.delay_lp),
                sig12(row.queue_lp),
                sig12(row.delay_mdp),
                sig12(row.delay_greedy),
                sig12(row.se_greedy),
                sig12(row.lambda)
            ));
            for t in &row.thresholds {
                csv.push_str(&format!(",{t}"));
            }
            csv.push_str(",Optimal\n");
        } else {
            csv.push_str(&sig12(row.epsilon));
            csv.push_str(&",".repeat(6 + s_count));
            csv.push_str(",Infeasible\n");
        }
    }

    print!("{csv}");
    if let Some(path) = output {
        std::fs::write(path, &csv)
            .map_err(|e| CliError::Invalid(format!("cannot write {}: {e}", path.display())))?;
    }
    Ok(())
}

fn sweep_row(
    spec: &RunSpec,
    epsilon: f64,
    sim_slots: u64,
    seed: u64,
) -> Result<SweepRow, CliError> {
    let model = &spec.model;
    let cfg = spec
        .config
        .clone()
        .with_power_budget(epsilon)
        .map_err(|e| CliError::Invalid(e.to_string()))?;

    let lp_sol = match lp::solve_delay_lp(model, &cfg) {
        Ok(sol) => sol,
        Err(lp::LpError::Infeasible { .. }) => {
            return Ok(SweepRow {
                epsilon,
                feasible: false,
                delay_lp: f64::NAN,
                queue_lp: f64::NAN,
                delay_mdp: f64::NAN,
                delay_greedy: f64::NAN,
                se_greedy: f64::NAN,
                lambda: f64::NAN,
                thresholds: Vec::new(),
            })
        }
        Err(e) => return Err(e.into()),
    };

    let lagrangian = mdp::solve_lagrangian(model, &cfg)?;
    let mut greedy = sim::greedy_decision_rule(model, epsilon);
    let (greedy_run, greedy_stats) = sim::simulate_batched(
        model,
        &mut greedy,
        cfg.arrival_rate,
        cfg.buffer_size,
        sim_slots,
        seed,
        100,
    );

    Ok(SweepRow {
        epsilon,
        feasible: true,
        delay_lp: lp_sol.objective_delay,
        queue_lp: lp_sol.avg_queue,
        delay_mdp: lagrangian.result.avg_delay,
        delay_greedy: greedy_run.avg_delay,
        se_greedy: greedy_stats.se_delay,
        lambda: lagrangian.mixture.lambda,
        thresholds: lagrangian.mixture.pi1.thresholds().to_vec(),
    })
}

fn cmd_simulate(spec: &RunSpec, policy: &str, slots: u64, seed: u64) -> Result<(), CliError> {
    let model = &spec.model;
    let cfg = &spec.config;
    if slots == 0 {
        return Err(CliError::Invalid("--slots must be at least 1".into()));
    }

    let result = match policy {
        "lp" => {
            let sol = lp::solve_delay_lp(model, cfg)?;
            let table = lp::extract_policy(&sol, cfg.arrival_rate, cfg.lp_tolerance);
            let mut rule = sim::PolicyRule::new(&table);
            sim::simulate(model, &mut rule, cfg.arrival_rate, cfg.buffer_size, slots, seed)
        }
        "mdp" => {
            let lagrangian = mdp::solve_lagrangian(model, cfg)?;
            let table = lagrangian.mixture.realize(cfg.buffer_size);
            let mut rule = sim::PolicyRule::new(&table);
            sim::simulate(model, &mut rule, cfg.arrival_rate, cfg.buffer_size, slots, seed)
        }
        "greedy" => {
            let mut rule = sim::greedy_decision_rule(model, cfg.power_budget);
            sim::simulate(model, &mut rule, cfg.arrival_rate, cfg.buffer_size, slots, seed)
        }
        other => match other.strip_prefix("file:") {
            Some(path) => {
                let table = load_policy_file(std::path::Path::new(path), cfg.buffer_size, model.n_states())?;
                let mut rule = sim::PolicyRule::new(&table);
                sim::simulate(model, &mut rule, cfg.arrival_rate, cfg.buffer_size, slots, seed)
            }
            None => {
                return Err(CliError::Invalid(format!(
                    "unknown policy source '{other}'; expected lp, mdp, greedy, or file:<path>"
                )))
            }
        },
    };

    let out = json!({
        "slots": result.slots,
        "avg_queue": json_f64(result.avg_queue),
        "avg_delay": json_f64(result.avg_delay),
        "avg_power": json_f64(result.avg_power),
        "delivered": result.delivered,
        "discarded": result.discarded,
        "seed": result.seed,
    });
    println!("{}", serde_json::to_string_pretty(&out).expect("serializable"));
    Ok(())
}

fn load_policy_file(
    path: &std::path::Path,
    buffer_size: usize,
    n_states: usize,
) -> Result<PolicyTable, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Invalid(format!("cannot read {}: {e}", path.display())))?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| {
        CliError::Invalid(format!(
            "{}: parse error at line {}, column {}: {e}",
            path.display(),
            e.line(),
            e.column()
        ))
    })?;
    let matrix = value.get("transmit_prob").unwrap_or(&value);
    let rows: Vec<Vec<f64>> = serde_json::from_value(matrix.clone())
        .map_err(|e| CliError::Invalid(format!("{}: {e}", path.display())))?;
    if rows.len() != buffer_size + 1 || rows.iter().any(|r| r.len() != n_states) {
        return Err(CliError::Invalid(format!(
            "{}: policy must be (K+1) x S = {} x {}",
            path.display(),
            buffer_size + 1,
            n_states
        )));
    }
    PolicyTable::new(rows).map_err(|e| CliError::Invalid(format!("{}: {e}", path.display())))
}

fn cmd_enumerate(spec: &RunSpec) -> Result<(), CliError> {
    let model = &spec.model;
    let cfg = &spec.config;

    let table = eval::threshold_table(model, cfg)?;
    let (best_delay, best) = eval::enumerate_thresholds(model, cfg, 16)?;
    let (best_result, _) = eval::exact_evaluate(
        model,
        &best.realize(cfg.buffer_size),
        cfg.arrival_rate,
        cfg.buffer_size,
    )?;

    let entries: Vec<serde_json::Value> = table
        .iter()
        .map(|e| {
            json!({
                "thresholds": e.policy.thresholds(),
                "power": json_f64(e.result.avg_power),
                "delay": json_f64(e.result.avg_delay),
                "avg_queue": json_f64(e.result.avg_queue),
                "lossless": !e.lossy,
            })
        })
        .collect();

    let out = json!({
        "best": {
            "delay": json_f64(best_delay),
            "power": json_f64(best_result.avg_power),
            "lambda": json_f64(best.lambda),
            "pi1": best.pi1.thresholds(),
            "pi2": best.pi2.thresholds(),
        },
        "table": entries,
    });
    println!("{}", serde_json::to_string_pretty(&out).expect("serializable"));
    Ok(())
}
