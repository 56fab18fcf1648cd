use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use cloudlet_lb::carla::{accuracy, run_learning, EpisodeTrace, LearningConfig};
use cloudlet_lb::game::{GameContext, RateBasis};
use cloudlet_lb::mechanism::{audit_truthfulness, check_price_conditions, AUDIT_GRID};
use cloudlet_lb::ne_solver::{solve_ne, verify_ne, NeError, NeSolution, SolverOptions, Verification};
use cloudlet_lb::queueing::UNSTABLE_LATENCY;
use cloudlet_lb::sim::{generate_trace, load_trace, run_simulation, write_trace, Policy, Predictor, SimConfig, SimError};
use cloudlet_lb::slicing::{solve_slicing, ClassLoad, SliceAllocation};

use crate::config::{load_context, CliError};
use crate::output::{emit, json_bytes, Format, Table};
use crate::{Cli, Command, LearningArgs, PolicyKind, SolverArgs, SweepKind};

pub fn run(cli: &Cli) -> Result<(), CliError> {
    let out = cli.out.as_deref();
    match &cli.command {
        Command::Slice(c) => slice(&load_context(&c.config)?, cli.format, out),
        Command::SolveNe { config, solver, verify, grid_step, slack } => {
            let ctx = load_context(&config.config)?;
            solve(&ctx, &solver_options(solver), verify.then_some((*grid_step, *slack)), cli.format, out)
        }
        Command::CheckPrices(c) => prices(&load_context(&c.config)?, cli.format, out),
        Command::AuditMechanism { config, solver, grid } => {
            let ctx = load_context(&config.config)?;
            let grid = grid.clone().unwrap_or_else(|| AUDIT_GRID.to_vec());
            audit(&ctx, &grid, &solver_options(solver), cli.format, out)
        }
        Command::Learn { config, learning, density_out } => {
            let ctx = load_context(&config.config)?;
            learn(&ctx, &learning_config(learning, cli.seed), density_out.as_deref(), cli.format, out)
        }
        Command::Simulate { config, solver, learning, duration, trace, policy, predictor, no_deadlines } => {
            let ctx = load_context(&config.config)?;
            let policy = match policy {
                PolicyKind::Identity => Policy::Fixed(cloudlet_lb::game::OffloadMatrix::identity(ctx.n(), ctx.m())),
                PolicyKind::Centralized => Policy::Centralized(solver_options(solver)),
                PolicyKind::Carla => Policy::Carla(learning_config(learning, cli.seed)),
            };
            let sim = SimConfig {
                duration: duration.unwrap_or(10.0 * ctx.interval),
                seed: cli.seed,
                policy,
                predictor: parse_predictor(predictor)?,
                enforce_deadlines: !no_deadlines,
            };
            simulate(&ctx, trace.as_deref(), &sim, cli.format, out)
        }
        Command::Sweep { config, solver, learning, over, target, from, to, steps, thetas, sigmas, stationarity } => {
            let ctx = load_context(&config.config)?;
            let opts = solver_options(solver);
            let base = learning_config(learning, cli.seed);
            let bytes = match over {
                SweepKind::Rate => {
                    let (Some(from), Some(to)) = (from, to) else {
                        return Err(CliError::Config("rate sweeps need --from and --to".into()));
                    };
                    sweep_rate(&ctx, &opts, &parse_target(target, &ctx)?, *from, *to, *steps, cli.format)?
                }
                SweepKind::ThetaSigma => {
                    let grid: Vec<LearningConfig> = thetas
                        .iter()
                        .flat_map(|&theta| sigmas.iter().map(move |&sigma| (theta, sigma)))
                        .map(|(theta, sigma)| LearningConfig { theta, sigma, ..base.clone() })
                        .collect();
                    sweep_learning(&ctx, &opts, grid, cli.format)?
                }
                SweepKind::Stationarity => {
                    let grid: Vec<LearningConfig> = stationarity
                        .iter()
                        .map(|&s| {
                            let cfg = LearningConfig { stationarity: s, ..base.clone() };
                            LearningConfig { iterations: cfg.iterations_for_stationarity(ctx.slot), ..cfg }
                        })
                        .collect();
                    sweep_learning(&ctx, &opts, grid, cli.format)?
                }
            };
            emit(out, &bytes)
        }
        Command::GenTrace { config, duration } => {
            let ctx = load_context(&config.config)?;
            if !(*duration > 0.0 && duration.is_finite()) {
                return Err(CliError::Config(format!("duration must be > 0, got {duration}")));
            }
            let events = generate_trace(&ctx.arrivals.rates, *duration, cli.seed);
            let bytes = match cli.format {
                Format::Json => json_bytes(&events),
                Format::Csv => {
                    let mut buf = Vec::new();
                    write_trace(&mut buf, &events).map_err(sim_error)?;
                    buf
                }
            };
            emit(out, &bytes)
        }
    }
}

fn solver_options(a: &SolverArgs) -> SolverOptions {
    SolverOptions { step: a.step, tolerance: a.tolerance, max_iters: a.max_iters, ..SolverOptions::default() }
}

fn learning_config(a: &LearningArgs, seed: u64) -> LearningConfig {
    LearningConfig { theta: a.theta, sigma: a.sigma, bins: a.bins, iterations: a.iterations, seed, ..LearningConfig::default() }
}

fn parse_predictor(s: &str) -> Result<Predictor, CliError> {
    if s == "oracle" {
        return Ok(Predictor::Oracle);
    }
    s.strip_prefix("window:")
        .and_then(|k| k.parse::<usize>().ok())
        .filter(|&k| k >= 1)
        .map(Predictor::SlidingWindow)
        .ok_or_else(|| CliError::Config(format!("predictor must be `oracle` or `window:K` with K >= 1, got `{s}`")))
}

/// `None` sweeps every (cloudlet, class).
fn parse_target(s: &str, ctx: &GameContext) -> Result<Option<(usize, usize)>, CliError> {
    if s == "all" {
        return Ok(None);
    }
    let bad = || CliError::Config(format!("target must be `all` or `CLOUDLET:CLASS` inside the federation, got `{s}`"));
    let (i, m) = s.split_once(':').ok_or_else(bad)?;
    let (i, m) = (i.parse::<usize>().map_err(|_| bad())?, m.parse::<usize>().map_err(|_| bad())?);
    if i >= ctx.n() || m >= ctx.m() {
        return Err(bad());
    }
    Ok(Some((i, m)))
}

fn ne_error(e: NeError) -> CliError {
    CliError::Config(e.to_string())
}

fn sim_error(e: SimError) -> CliError {
    match e {
        SimError::Io(e) => CliError::Io(e.to_string()),
        other => CliError::Config(other.to_string()),
    }
}

#[derive(Serialize)]
struct SliceReport {
    cloudlet: usize,
    allocation: SliceAllocation,
}

fn slice(ctx: &GameContext, format: Format, out: Option<&Path>) -> Result<(), CliError> {
    let mut reports = Vec::new();
    for i in 0..ctx.n() {
        let loads: Vec<ClassLoad> = (0..ctx.m())
            .map(|m| ClassLoad {
                service_rate: ctx.classes[m].service_rate,
                arrival_rate: ctx.arrivals.revealed[i][m],
                qos: ctx.qos(m),
                user_latency: ctx.user_latency(i, m),
            })
            .collect();
        let allocation = solve_slicing(ctx.cloudlets[i].total_servers, &loads).map_err(|e| CliError::Config(e.to_string()))?;
        reports.push(SliceReport { cloudlet: i, allocation });
    }
    let bytes = match format {
        Format::Json => json_bytes(&reports),
        Format::Csv => {
            let mut t = Table::new(&["cloudlet", "class", "servers", "slack_s", "unstable"]);
            for r in &reports {
                for (m, servers) in r.allocation.servers.iter().enumerate() {
                    t.row([
                        r.cloudlet.to_string(),
                        m.to_string(),
                        servers.to_string(),
                        r.allocation.slack[m].to_string(),
                        r.allocation.unstable.contains(&m).to_string(),
                    ]);
                }
            }
            t.into_bytes()
        }
    };
    emit(out, &bytes)
}

#[derive(Serialize)]
struct SolveReport {
    solution: NeSolution,
    verification: Option<Verification>,
}

fn solve(
    ctx: &GameContext,
    opts: &SolverOptions,
    verify: Option<(f64, f64)>,
    format: Format,
    out: Option<&Path>,
) -> Result<(), CliError> {
    let solution = solve_ne(ctx, opts).map_err(ne_error)?;
    let verification = verify.map(|(step, slack)| verify_ne(ctx, &solution.strategies, step, slack));
    let bytes = match format {
        Format::Json => json_bytes(&SolveReport { solution: solution.clone(), verification: verification.clone() }),
        Format::Csv => {
            let mut t = Table::new(&["class", "from", "to", "fraction"]);
            for (m, rows) in solution.strategies.classes.iter().enumerate() {
                for (i, row) in rows.iter().enumerate() {
                    for (j, v) in row.iter().enumerate() {
                        t.row([m.to_string(), i.to_string(), j.to_string(), v.to_string()]);
                    }
                }
            }
            t.into_bytes()
        }
    };
    emit(out, &bytes)?;
    eprintln!(
        "converged={} residual={:e} iterations={}",
        solution.converged, solution.kkt_residual, solution.iterations
    );
    if let Some(v) = &verification {
        eprintln!("verification passed={} worst_relative_gain={:e}", v.passed, v.worst_relative_gain);
    }
    if !solution.converged {
        return Err(CliError::NonConvergence(format!(
            "residual {:e} after {} iterations",
            solution.kkt_residual, solution.iterations
        )));
    }
    Ok(())
}

fn prices(ctx: &GameContext, format: Format, out: Option<&Path>) -> Result<(), CliError> {
    let check = check_price_conditions(ctx);
    let bytes = match format {
        Format::Json => json_bytes(&check),
        Format::Csv => {
            let mut t = Table::new(&["from", "to", "class", "condition", "lhs", "rhs", "unstable"]);
            for v in &check.violations {
                t.row([
                    v.from.to_string(),
                    v.to.to_string(),
                    v.class.to_string(),
                    v.condition.to_string(),
                    v.lhs.to_string(),
                    v.rhs.to_string(),
                    v.unstable.to_string(),
                ]);
            }
            t.into_bytes()
        }
    };
    emit(out, &bytes)?;
    eprintln!("price conditions hold={} worst_margin={}", check.holds, check.worst_margin);
    Ok(())
}

fn audit(ctx: &GameContext, grid: &[f64], opts: &SolverOptions, format: Format, out: Option<&Path>) -> Result<(), CliError> {
    let report = audit_truthfulness(ctx, grid, opts).map_err(ne_error)?;
    let bytes = match format {
        Format::Json => json_bytes(&report),
        Format::Csv => {
            let mut t =
                Table::new(&["cloudlet", "class", "true_rate", "revealed_rate", "subcase", "delta", "tolerance", "ok"]);
            for p in &report.points {
                t.row([
                    p.cloudlet.to_string(),
                    p.class.to_string(),
                    p.true_rate.to_string(),
                    p.revealed_rate.to_string(),
                    p.subcase.to_string(),
                    p.delta.to_string(),
                    p.tolerance.to_string(),
                    p.ok.to_string(),
                ]);
            }
            t.into_bytes()
        }
    };
    emit(out, &bytes)?;
    eprintln!(
        "truthfulness passed={} worst_relative_gain={:e} prices_hold={}",
        report.passed, report.worst_relative_gain, report.prices.holds
    );
    Ok(())
}

fn learn(
    ctx: &GameContext,
    cfg: &LearningConfig,
    density_out: Option<&Path>,
    format: Format,
    out: Option<&Path>,
) -> Result<(), CliError> {
    let trace = run_learning(ctx, cfg).map_err(|e| CliError::Config(e.to_string()))?;
    let bytes = match format {
        Format::Json => json_bytes(&trace),
        Format::Csv => episode_table(&trace),
    };
    emit(out, &bytes)?;
    if let Some(path) = density_out {
        let mut t = Table::new(&["cloudlet", "class", "target", "bin", "center", "density"]);
        for (i, classes) in trace.densities.iter().enumerate() {
            for (m, targets) in classes.iter().enumerate() {
                for (j, s) in targets.iter().enumerate().filter(|(j, _)| *j != i) {
                    for (k, d) in s.density.iter().enumerate() {
                        t.row([i.to_string(), m.to_string(), j.to_string(), k.to_string(), s.center(k).to_string(), d.to_string()]);
                    }
                }
            }
        }
        emit(Some(path), &t.into_bytes())?;
    }
    eprintln!("resets={} max_peak={} invariant_failures={}", trace.resets, trace.max_peak, trace.invariant_failures.len());
    Ok(())
}

fn episode_table(trace: &EpisodeTrace) -> Vec<u8> {
    let mut t = Table::new(&["iteration", "cloudlet", "class", "action", "reward", "utility"]);
    for r in &trace.records {
        for (m, rows) in r.actions.iter().enumerate() {
            for (i, row) in rows.iter().enumerate() {
                let action: f64 = row.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, v)| v).sum();
                t.row([
                    r.iteration.to_string(),
                    i.to_string(),
                    m.to_string(),
                    action.to_string(),
                    r.rewards[i].to_string(),
                    r.utilities[i].to_string(),
                ]);
            }
        }
    }
    t.into_bytes()
}

fn simulate(ctx: &GameContext, trace: Option<&Path>, cfg: &SimConfig, format: Format, out: Option<&Path>) -> Result<(), CliError> {
    let events = match trace {
        Some(path) => load_trace(path).map_err(sim_error)?,
        None => generate_trace(&ctx.arrivals.rates, cfg.duration, cfg.seed),
    };
    let metrics = run_simulation(ctx, &events, cfg).map_err(sim_error)?;
    let bytes = match format {
        Format::Json => json_bytes(&metrics),
        Format::Csv => {
            let mut buf = Vec::new();
            metrics.write_csv(&mut buf).map_err(sim_error)?;
            buf
        }
    };
    emit(out, &bytes)?;
    eprintln!(
        "arrived={} processed={} dropped={} in_flight={}",
        metrics.arrived, metrics.processed, metrics.dropped, metrics.in_flight
    );
    Ok(())
}

#[derive(Serialize)]
struct RatePoint {
    point: usize,
    rate: f64,
    /// Traffic-weighted mean end-to-end latency of flows that reach a stable
    /// slice at the equilibrium (s).
    mean_latency: f64,
    /// Share of traffic sent to slices that cannot keep up.
    unstable: f64,
    /// Share of all traffic executed away from home.
    offloaded: f64,
    residual: f64,
    converged: bool,
}

fn sweep_rate(
    ctx: &GameContext,
    opts: &SolverOptions,
    target: &Option<(usize, usize)>,
    from: f64,
    to: f64,
    steps: usize,
    format: Format,
) -> Result<Vec<u8>, CliError> {
    if steps == 0 || !(from >= 0.0) || !(to >= from) {
        return Err(CliError::Config("rate sweeps need 0 <= from <= to and steps >= 1".into()));
    }
    let values: Vec<f64> = if steps == 1 {
        vec![from]
    } else {
        (0..steps).map(|k| from + (to - from) * k as f64 / (steps - 1) as f64).collect()
    };
    let points: Result<Vec<RatePoint>, CliError> = values
        .par_iter()
        .enumerate()
        .map(|(point, &rate)| {
            let mut c = ctx.clone();
            for i in 0..c.n() {
                for m in 0..c.m() {
                    if target.is_none_or(|t| t == (i, m)) {
                        c.arrivals.rates[i][m] = rate;
                        c.arrivals.revealed[i][m] = rate;
                        c.arrivals.max[i][m] = c.arrivals.max[i][m].max(rate);
                    }
                }
            }
            c.reslice(RateBasis::Revealed)?;
            let sol = solve_ne(&c, opts).map_err(ne_error)?;
            let (mut weighted, mut stable, mut total, mut away) = (0.0, 0.0, 0.0, 0.0);
            for m in 0..c.m() {
                for i in 0..c.n() {
                    let lam = c.arrivals.rates[i][m];
                    for j in 0..c.n() {
                        let flow = sol.strategies.get(m, i, j) * lam;
                        let hop = if i == j { 0.0 } else { c.topology.latency[i][j] };
                        if sol.latencies[j][m] < UNSTABLE_LATENCY {
                            weighted += flow * (c.user_latency(i, m) + hop + sol.latencies[j][m]);
                            stable += flow;
                        }
                        total += flow;
                        if i != j {
                            away += flow;
                        }
                    }
                }
            }
            let share = |x: f64, of: f64| if of > 0.0 { x / of } else { 0.0 };
            Ok(RatePoint {
                point,
                rate,
                mean_latency: share(weighted, stable),
                unstable: share(total - stable, total),
                offloaded: share(away, total),
                residual: sol.kkt_residual,
                converged: sol.converged,
            })
        })
        .collect();
    let points = points?;
    Ok(match format {
        Format::Json => json_bytes(&points),
        Format::Csv => {
            let mut t = Table::new(&["point", "rate", "mean_latency_s", "unstable_flow_share", "offloaded", "residual", "converged"]);
            for p in &points {
                t.row([
                    p.point.to_string(),
                    p.rate.to_string(),
                    p.mean_latency.to_string(),
                    p.unstable.to_string(),
                    p.offloaded.to_string(),
                    p.residual.to_string(),
                    p.converged.to_string(),
                ]);
            }
            t.into_bytes()
        }
    })
}

#[derive(Serialize)]
struct LearningPoint {
    point: usize,
    theta: f64,
    sigma: f64,
    stationarity: f64,
    iterations: usize,
    accuracy: f64,
}

fn sweep_learning(ctx: &GameContext, opts: &SolverOptions, grid: Vec<LearningConfig>, format: Format) -> Result<Vec<u8>, CliError> {
    let ne = solve_ne(ctx, opts).map_err(ne_error)?;
    let points: Result<Vec<LearningPoint>, CliError> = grid
        .par_iter()
        .enumerate()
        .map(|(point, cfg)| {
            let trace = run_learning(ctx, cfg).map_err(|e| CliError::Config(e.to_string()))?;
            Ok(LearningPoint {
                point,
                theta: cfg.theta,
                sigma: cfg.sigma,
                stationarity: cfg.stationarity,
                iterations: cfg.iterations,
                accuracy: accuracy(&trace, &ne.utilities),
            })
        })
        .collect();
    let points = points?;
    Ok(match format {
        Format::Json => json_bytes(&points),
        Format::Csv => {
            let mut t = Table::new(&["point", "theta", "sigma", "stationarity_s", "iterations", "accuracy"]);
            for p in &points {
                t.row([
                    p.point.to_string(),
                    p.theta.to_string(),
                    p.sigma.to_string(),
                    p.stationarity.to_string(),
                    p.iterations.to_string(),
                    p.accuracy.to_string(),
                ]);
            }
            t.into_bytes()
        }
    })
}
