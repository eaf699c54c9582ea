//! Single executable exposing every pipeline stage with file-based,
//! reproducible I/O.
//!
//! Exit codes: 0 success, 1 validation error, 2 solver non-convergence.

use anyhow::{anyhow, bail};
use clap::{Args, Parser, Subcommand};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use gspsim_core::cluster::cluster_by_frequency;
use gspsim_core::engine::{outcomes_dp, outcomes_oracle, FilterVector, OutcomeTable};
use gspsim_core::error::Error as CoreError;
use gspsim_core::io;
use gspsim_core::market::{ActiveMarket, BidTrace, Bidder, MarketSnapshot};
use gspsim_core::pacing::{solve_pacing, Method, SolveOptions};
use gspsim_core::recommend::{
    integrity_suite, recommend_bid, recommend_for_goal, GoalRequest, RecommendOptions,
};
use gspsim_core::regret::{
    adherence_curve, compare_with_recommendation, infer_regret, RegretReport, ValueGridConfig,
};
use gspsim_core::sim::{build_agent_history, replay, AgentSpec, TraceSet};
use gspsim_core::synth::{generate_market, SyntheticMarketSpec};

#[derive(Parser)]
#[command(
    name = "gspsim",
    version,
    about = "Budget-smoothed GSP auction toolkit"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct SolverArgs {
    /// Convergence tolerance on the pacing residual.
    #[arg(long, default_value_t = 1e-8)]
    tol: f64,
    /// Iteration cap for the pacing solver.
    #[arg(long, default_value_t = 500)]
    max_iter: usize,
    /// Pacing method.
    #[arg(long, default_value = "fixed-point", value_parser = ["fixed-point", "gauss-newton"])]
    method: String,
}

impl SolverArgs {
    fn options(&self) -> anyhow::Result<SolveOptions> {
        Ok(SolveOptions {
            tol: self.tol,
            max_iter: self.max_iter,
            method: self.method.parse::<Method>()?,
            ..Default::default()
        })
    }
}

#[derive(Subcommand)]
enum Command {
    /// Solve the budget-smoothing fixed point for one market snapshot.
    Pace {
        #[arg(long)]
        market: PathBuf,
        #[arg(long)]
        bidders: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[command(flatten)]
        solver: SolverArgs,
    },
    /// Expected outcomes of one market with nobody filtered.
    Outcomes {
        #[arg(long)]
        market: PathBuf,
        #[arg(long)]
        bidders: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Use the exponential enumeration engine instead of the linear one.
        #[arg(long)]
        oracle: bool,
    },
    /// Recommend a bid for a budget, or a bid and budget for an impression goal.
    Recommend {
        #[arg(long)]
        market: PathBuf,
        #[arg(long)]
        bidders: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Per-mille budget of the querying bidder.
        #[arg(long, conflicts_with_all = ["goal", "inventory"])]
        budget: Option<f64>,
        /// Impression goal (requires --inventory).
        #[arg(long, requires = "inventory")]
        goal: Option<f64>,
        /// Projected impression inventory.
        #[arg(long)]
        inventory: Option<f64>,
        #[command(flatten)]
        solver: SolverArgs,
    },
    /// Replay one or more regions day by day.
    Simulate {
        /// Region config (repeat for several regions).
        #[arg(long, required = true)]
        market: Vec<PathBuf>,
        /// bidders.csv per region, same order as --market.
        #[arg(long, required = true)]
        bidders: Vec<PathBuf>,
        /// Optional traces.csv per region, same order.
        #[arg(long)]
        traces: Vec<PathBuf>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Worker threads across regions.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[command(flatten)]
        solver: SolverArgs,
    },
    /// Infer minimum-regret values from bid traces.
    Infer {
        #[arg(long)]
        market: PathBuf,
        #[arg(long)]
        bidders: PathBuf,
        #[arg(long)]
        traces: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[command(flatten)]
        solver: SolverArgs,
    },
    /// Compare each agent's regret against always following the recommendation.
    CompareReco {
        #[arg(long)]
        market: PathBuf,
        #[arg(long)]
        bidders: PathBuf,
        #[arg(long)]
        traces: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Classification tolerance on the regret difference.
        #[arg(long, default_value_t = 1e-9)]
        delta: f64,
        /// Cluster count for the per-cluster adherence output.
        #[arg(long, default_value_t = 3)]
        k: usize,
        #[command(flatten)]
        solver: SolverArgs,
    },
    /// Cluster agents by bid-change frequency (exact 1-D k-means).
    Cluster {
        #[arg(long)]
        traces: PathBuf,
        #[arg(long, default_value_t = 3)]
        k: usize,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Generate a synthetic region: market.json, bidders.csv, traces.csv.
    GenMarket {
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Simulation horizon in days.
        #[arg(long, default_value_t = 150)]
        horizon: u32,
    },
    /// Run the recommendation-tool integrity tests on a market.
    Integrity {
        #[arg(long)]
        market: PathBuf,
        #[arg(long)]
        bidders: PathBuf,
        #[command(flatten)]
        solver: SolverArgs,
    },
}

fn main() {
    // exit 1 on any argument problem; clap's default code 2 is reserved for
    // solver non-convergence
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            let _ = err.print();
            std::process::exit(if err.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(code) => std::process::exit(code),
        Err(err) => {
            eprintln!("error: {err:#}");
            let code = err
                .downcast_ref::<CoreError>()
                .map(|e| match e {
                    CoreError::NonConvergence { .. } => 2,
                    _ => 1,
                })
                .unwrap_or(1);
            std::process::exit(code);
        }
    }
}

/// Refuse output paths that would clobber an input.
fn guard_outputs(inputs: &[&Path], outputs: &[PathBuf]) -> anyhow::Result<()> {
    for out in outputs {
        for input in inputs {
            if let (Ok(a), Ok(b)) = (out.canonicalize(), input.canonicalize()) {
                if a == b {
                    bail!("output {} would overwrite an input", out.display());
                }
            }
        }
    }
    Ok(())
}

/// Build a one-day market snapshot from a market file and a bidder list,
/// converting monthly budgets through the projected page views.
fn snapshot_market(
    market_path: &Path,
    bidders_path: &Path,
) -> anyhow::Result<(io::MarketFile, ActiveMarket)> {
    let market = io::read_market(market_path)?;
    let agents = io::read_bidders(bidders_path)?;
    let np = market.page_views_thousands.ok_or_else(|| {
        anyhow!(
            "{}: page_views_thousands is required to convert monthly budgets",
            market_path.display()
        )
    })?;
    let bidders = agents
        .iter()
        .map(|a| {
            Ok(Bidder::new(
                a.agent_id.clone(),
                a.bid,
                gspsim_core::market::convert_budget(a.monthly_budget, np)?,
                a.priority,
            ))
        })
        .collect::<gspsim_core::Result<Vec<_>>>()?;
    let active = MarketSnapshot::new(bidders, market.reserve, market.weights()?).canonicalize()?;
    Ok((market, active))
}

fn write_outcome_table(
    path: &Path,
    market: &ActiveMarket,
    table: &OutcomeTable,
) -> anyhow::Result<()> {
    let mut buf = String::from("agent_id,pi,eq,ecpm,unconditional_share,unconditional_spend\n");
    for (i, b) in market.bidders().iter().enumerate() {
        buf.push_str(&format!(
            "{},{},{},{},{},{}\n",
            b.id,
            io::fmt_sig(table.pi[i]),
            io::fmt_sig(table.eq[i]),
            io::fmt_sig(table.ecpm[i]),
            io::fmt_sig(table.unconditional_share(i)),
            io::fmt_sig(table.unconditional_spend(i)),
        ));
    }
    io::atomic_write(path, buf.as_bytes())?;
    Ok(())
}

/// Shared replay + history assembly for infer and compare-reco.
#[allow(clippy::type_complexity)]
fn histories_from_files(
    market_path: &Path,
    bidders_path: &Path,
    traces_path: &Path,
    solver: &SolverArgs,
) -> anyhow::Result<(
    Vec<BidTrace>,
    Vec<(AgentSpec, gspsim_core::regret::AgentHistory)>,
)> {
    let market = io::read_market(market_path)?;
    let config = market.region_config()?;
    let agents = io::read_bidders(bidders_path)?;
    let traces = io::read_traces(traces_path)?;
    let trace_set = TraceSet::new(traces.clone())?;
    let days = replay(&config, &agents, Some(&trace_set), &solver.options()?)?;
    let flagged = days.iter().filter(|d| !d.pacing_converged).count();
    if flagged > 0 {
        eprintln!("warning: pacing did not converge on {flagged} replayed days");
    }
    let mut out = Vec::new();
    for agent in &agents {
        if let Some(trace) = trace_set.get(&agent.agent_id) {
            let history = build_agent_history(agent, trace, &days)?;
            out.push((agent.clone(), history));
        }
    }
    Ok((traces, out))
}

fn run(command: Command) -> anyhow::Result<i32> {
    match command {
        Command::Pace {
            market,
            bidders,
            out,
            solver,
        } => {
            guard_outputs(&[&market, &bidders], &[out.join("pacing.csv")])?;
            let (_, active) = snapshot_market(&market, &bidders)?;
            let solution = solve_pacing(&active, &solver.options()?)?;
            io::write_pacing(&out.join("pacing.csv"), &active, &solution)?;
            if !solution.converged {
                eprintln!(
                    "pacing did not converge: residual {} after {} iterations",
                    io::fmt_sig(solution.residual_inf_norm),
                    solution.iterations
                );
                return Ok(2);
            }
            println!(
                "pacing converged in {} iterations, residual {}",
                solution.iterations,
                io::fmt_sig(solution.residual_inf_norm)
            );
            Ok(0)
        }
        Command::Outcomes {
            market,
            bidders,
            out,
            oracle,
        } => {
            guard_outputs(&[&market, &bidders], &[out.join("outcomes.csv")])?;
            let (_, active) = snapshot_market(&market, &bidders)?;
            let pi = FilterVector::ones(&active);
            let table = if oracle {
                outcomes_oracle(&active, &pi, None)?
            } else {
                outcomes_dp(&active, &pi)?
            };
            write_outcome_table(&out.join("outcomes.csv"), &active, &table)?;
            println!("wrote outcomes for {} active bidders", active.len());
            Ok(0)
        }
        Command::Recommend {
            market,
            bidders,
            out,
            budget,
            goal,
            inventory,
            solver,
        } => {
            let (_, opponents) = snapshot_market(&market, &bidders)?;
            let opts = RecommendOptions {
                pacing: solver.options()?,
                ..Default::default()
            };
            let json = match (budget, goal) {
                (Some(budget), None) => {
                    let rec = recommend_bid(&opponents, budget, &opts)?;
                    serde_json::json!({
                        "bid": round_sig(rec.bid),
                        "expected_share": round_sig(rec.expected_share),
                        "expected_spend": round_sig(rec.expected_spend),
                        "corner_case": rec.corner_case.to_string(),
                    })
                }
                (None, Some(goal)) => {
                    let req = GoalRequest {
                        goal,
                        inventory: inventory.expect("clap enforces --inventory"),
                    };
                    let rec = recommend_for_goal(&opponents, &req, &opts)?;
                    serde_json::json!({
                        "bid": round_sig(rec.bid),
                        "budget_per_mille": round_sig(rec.budget_per_mille),
                        "monthly_budget": round_sig(rec.monthly_budget),
                        "expected_share": round_sig(rec.expected_share),
                        "corner_case": rec.corner_case.to_string(),
                    })
                }
                _ => bail!("pass exactly one of --budget or --goal/--inventory"),
            };
            let text = format!("{}\n", serde_json::to_string_pretty(&json)?);
            io::atomic_write(&out.join("recommendation.json"), text.as_bytes())?;
            print!("{text}");
            Ok(0)
        }
        Command::Simulate {
            market,
            bidders,
            traces,
            out,
            jobs,
            solver,
        } => {
            if market.len() != bidders.len() {
                bail!("--market and --bidders must be given the same number of times");
            }
            if !traces.is_empty() && traces.len() != market.len() {
                bail!("--traces must match --market when given");
            }
            if jobs == 0 {
                bail!("--jobs must be at least 1");
            }
            let single = market.len() == 1;
            let regions: Vec<(usize, &PathBuf, &PathBuf, Option<&PathBuf>)> = market
                .iter()
                .enumerate()
                .map(|(i, m)| (i, m, &bidders[i], traces.get(i)))
                .collect();
            let opts = solver.options()?;
            let results: Vec<anyhow::Result<(PathBuf, usize, usize)>> =
                std::thread::scope(|scope| {
                    let mut handles = Vec::new();
                    for chunk in regions.chunks(regions.len().div_ceil(jobs)) {
                        let opts = opts.clone();
                        let out = out.clone();
                        handles.push(scope.spawn(move || {
                            chunk
                                .iter()
                                .map(|(i, m, b, t)| {
                                    simulate_region(m, b, *t, &out, single, *i, &opts)
                                })
                                .collect::<Vec<_>>()
                        }));
                    }
                    handles
                        .into_iter()
                        .flat_map(|h| h.join().expect("worker panicked"))
                        .collect()
                });
            for r in results {
                let (dir, days, flagged) = r?;
                println!(
                    "simulated {} days into {}{}",
                    days,
                    dir.display(),
                    if flagged > 0 {
                        format!(" ({flagged} days with non-converged pacing)")
                    } else {
                        String::new()
                    }
                );
            }
            Ok(0)
        }
        Command::Infer {
            market,
            bidders,
            traces,
            out,
            solver,
        } => {
            guard_outputs(&[&market, &bidders, &traces], &[out.join("report.csv")])?;
            let (_, histories) = histories_from_files(&market, &bidders, &traces, &solver)?;
            let mut reports: Vec<RegretReport> = Vec::new();
            for (_, history) in &histories {
                reports.push(infer_regret(history, &ValueGridConfig::default())?);
            }
            io::write_reports(&out.join("report.csv"), &reports)?;
            println!("inferred values for {} agents", reports.len());
            Ok(0)
        }
        Command::CompareReco {
            market,
            bidders,
            traces,
            out,
            delta,
            k,
            solver,
        } => {
            guard_outputs(
                &[&market, &bidders, &traces],
                &[out.join("report.csv"), out.join("adherence.csv")],
            )?;
            let (trace_list, histories) =
                histories_from_files(&market, &bidders, &traces, &solver)?;
            let pacing = solver.options()?;
            let mut reports = Vec::new();
            for (_, history) in &histories {
                reports.push(compare_with_recommendation(
                    history,
                    &ValueGridConfig::default(),
                    &pacing,
                    delta,
                )?);
            }
            io::write_reports(&out.join("report.csv"), &reports)?;
            let clusters = cluster_by_frequency(&trace_list, k).ok();
            let curve = adherence_curve(&trace_list, clusters.as_ref());
            io::write_adherence(&out.join("adherence.csv"), &curve)?;
            write_regret_histogram(&out.join("regret_diff_hist.csv"), &reports)?;
            let counts = reports.iter().fold(BTreeMap::new(), |mut acc, r| {
                if let Some(c) = r.classification {
                    *acc.entry(c.to_string()).or_insert(0usize) += 1;
                }
                acc
            });
            println!("compared {} agents: {counts:?}", reports.len());
            Ok(0)
        }
        Command::Cluster { traces, k, out } => {
            guard_outputs(&[&traces], &[out.join("clusters.csv")])?;
            let trace_list = io::read_traces(&traces)?;
            let clusters = cluster_by_frequency(&trace_list, k)?;
            io::write_clusters(&out.join("clusters.csv"), &clusters)?;
            if clusters.degenerate {
                eprintln!(
                    "only {} distinct clusters were possible (asked for {k})",
                    clusters.k
                );
            }
            println!(
                "clustered {} agents into {} clusters ({} filtered out)",
                clusters.agents.len(),
                clusters.k,
                clusters.filtered_out.len()
            );
            Ok(0)
        }
        Command::GenMarket { seed, out, horizon } => {
            let spec = SyntheticMarketSpec {
                horizon_days: horizon,
                ..Default::default()
            };
            let region = generate_market(&spec, seed)?;
            io::write_market(
                &out.join("market.json"),
                &io::MarketFile::from_region_config(&region.config, None),
            )?;
            io::write_bidders(&out.join("bidders.csv"), &region.agent_specs())?;
            io::write_traces(&out.join("traces.csv"), &region.traces)?;
            println!(
                "generated region with {} agents over {} days into {}",
                region.agents.len(),
                horizon,
                out.display()
            );
            Ok(0)
        }
        Command::Integrity {
            market,
            bidders,
            solver,
        } => {
            let (_, active) = snapshot_market(&market, &bidders)?;
            let opts = RecommendOptions {
                pacing: solver.options()?,
                ..Default::default()
            };
            let report = integrity_suite(&active, &[0.5, 2.0, 10.0], &opts)?;
            let rows = [
                ("bid-scaling leaves shares", report.share_invariance),
                ("bid-scaling scales spend", report.spend_scaling),
                (
                    "goal-scaling leaves recommendations",
                    report.goal_scale_invariance,
                ),
                ("eQ/eCPM ratio monotone", report.ratio_monotonicity),
            ];
            for (name, violation) in rows {
                println!(
                    "{}: {} (violation {})",
                    name,
                    if violation <= report.tolerance {
                        "pass"
                    } else {
                        "FAIL"
                    },
                    io::fmt_sig(violation)
                );
            }
            Ok(if report.passed() { 0 } else { 1 })
        }
    }
}

fn simulate_region(
    market: &Path,
    bidders: &Path,
    traces: Option<&PathBuf>,
    out: &Path,
    single: bool,
    index: usize,
    opts: &SolveOptions,
) -> anyhow::Result<(PathBuf, usize, usize)> {
    let market_file = io::read_market(market)?;
    let config = market_file.region_config()?;
    let agents = io::read_bidders(bidders)?;
    let trace_set = match traces {
        Some(p) => Some(TraceSet::new(io::read_traces(p)?)?),
        None => None,
    };
    let dir = if single {
        out.to_path_buf()
    } else {
        let stem = market
            .file_stem()
            .map(|s| s.to_string_lossy().to_string())
            .unwrap_or_else(|| format!("region{index}"));
        out.join(format!("{stem}-{index}"))
    };
    guard_outputs(
        &[market, bidders],
        &[dir.join("outcomes.csv"), dir.join("ledgers.csv")],
    )?;
    let days = replay(&config, &agents, trace_set.as_ref(), opts)?;
    let flagged = days.iter().filter(|d| !d.pacing_converged).count();
    io::write_outcomes(&dir.join("outcomes.csv"), &days)?;
    io::write_ledgers(&dir.join("ledgers.csv"), &days)?;
    Ok((dir, days.len(), flagged))
}

fn write_regret_histogram(path: &Path, reports: &[RegretReport]) -> anyhow::Result<()> {
    let diffs: Vec<f64> = reports
        .iter()
        .filter_map(|r| r.eps_reco.map(|reco| r.eps_star - reco))
        .collect();
    let mut buf = String::from("bin_low,bin_high,count\n");
    if !diffs.is_empty() {
        let lo = diffs.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = diffs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let span = (hi - lo).max(1e-12);
        let bins = 20usize;
        let mut counts = vec![0usize; bins];
        for d in &diffs {
            let idx = (((d - lo) / span) * bins as f64) as usize;
            counts[idx.min(bins - 1)] += 1;
        }
        for (i, c) in counts.iter().enumerate() {
            let a = lo + span * i as f64 / bins as f64;
            let b = lo + span * (i + 1) as f64 / bins as f64;
            buf.push_str(&format!("{},{},{}\n", io::fmt_sig(a), io::fmt_sig(b), c));
        }
    }
    io::atomic_write(path, buf.as_bytes())?;
    Ok(())
}

/// Round to the precision the CSV formatter prints, so JSON numbers carry
/// the same 12 significant digits.
fn round_sig(x: f64) -> f64 {
    io::fmt_sig(x).parse().unwrap_or(x)
}
