//! Mediator protocol and truthfulness machinery.
//!
//! A round takes the revealed rates, slices and solves the game on them,
//! injects extra load into cloudlets it sees as under-loaded, and settles every
//! cloudlet's utility against what actually arrives under the true rates.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::game::{utility, GameContext, LoadState, OffloadMatrix, RateBasis};
use crate::ne_solver::{solve_ne, NeError, SolverOptions};

/// Tolerance on "fails the QoS target" (seconds).
const QOS_TOL: f64 = 1e-9;
const ACTIVE: f64 = 1e-12;

/// Extra load x >= 0 that brings `entry + T_i(rate + x)` up to D; 0 when
/// the slice is already at or beyond D.
pub fn compute_aleph_with_entry(ctx: &GameContext, i: usize, m: usize, rate: f64, entry: f64) -> f64 {
    let qos = ctx.qos(m);
    let lat = |x: f64| entry + ctx.latency(i, m, rate + x);
    if lat(0.0) >= qos {
        return 0.0;
    }
    let mut lo = 0.0;
    let mut hi = (ctx.capacity(i, m) - rate).max(0.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if lat(mid) <= qos {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    lo
}

/// [`compute_aleph_with_entry`] measured from i's own users.
pub fn compute_aleph(ctx: &GameContext, i: usize, m: usize, rate: f64) -> f64 {
    compute_aleph_with_entry(ctx, i, m, rate, ctx.user_latency(i, m))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RevelationRound {
    pub true_rates: Vec<Vec<f64>>,
    pub revealed: Vec<Vec<f64>>,
    /// Slices solved on the revealed rates, `[i][m]`.
    pub servers: Vec<Vec<f64>>,
    pub strategies: OffloadMatrix,
    pub solver_converged: bool,
    /// Injected load ℵ per `[i][m]` (jobs/s).
    pub aleph: Vec<Vec<f64>>,
    /// Queue sojourn per `[i][m]` under the true rates.
    pub realized_latency: Vec<Vec<f64>>,
    pub fails_qos: Vec<Vec<bool>>,
    /// Ω4 charge per `[i][m]`.
    pub mediator_penalty: Vec<Vec<f64>>,
    /// Incentive paid per `[m][i][j]` for realized transfers i→j.
    pub transfers: Vec<Vec<Vec<f64>>>,
    /// Settled utility under the true rates, Ω4 charges included.
    pub realized_utility: Vec<f64>,
    /// The utility the mediator expects from the revealed rates.
    pub planned_utility: Vec<f64>,
}

/// Realized flows i→j under the true rates: revealed offload amounts,
/// scaled down when they exceed what i actually has.
fn realized_offloads(phi: &OffloadMatrix, truth: &[Vec<f64>], revealed: &[Vec<f64>], m: usize) -> Vec<Vec<f64>> {
    let n = truth.len();
    let mut flows = vec![vec![0.0; n]; n];
    for i in 0..n {
        let planned: f64 = (0..n).filter(|&j| j != i).map(|j| phi.get(m, i, j) * revealed[i][m]).sum();
        let scale = if planned > truth[i][m] && planned > 0.0 { truth[i][m] / planned } else { 1.0 };
        for j in (0..n).filter(|&j| j != i) {
            flows[i][j] = phi.get(m, i, j) * revealed[i][m] * scale;
        }
    }
    flows
}

pub fn run_mediator_round(
    ctx: &GameContext,
    revealed: &[Vec<f64>],
    opts: &SolverOptions,
) -> Result<RevelationRound, NeError> {
    let (n, mm) = (ctx.n(), ctx.m());
    let truth = ctx.arrivals.rates.clone();

    let mut planned_ctx = ctx.with_rates(revealed.to_vec());
    for (i, row) in revealed.iter().enumerate() {
        for (m, r) in row.iter().enumerate() {
            planned_ctx.arrivals.max[i][m] = planned_ctx.arrivals.max[i][m].max(*r);
        }
    }
    planned_ctx.reslice(RateBasis::Revealed)?;
    let sol = solve_ne(&planned_ctx, opts)?;
    let phi = sol.strategies.clone();
    let planned_utility: Vec<f64> = (0..n).map(|i| utility(&planned_ctx, &phi, i, RateBasis::True)).collect();

    let mut aleph = vec![vec![0.0; mm]; n];
    let mut realized_latency = vec![vec![0.0; mm]; n];
    let mut fails_qos = vec![vec![false; mm]; n];
    let mut mediator_penalty = vec![vec![0.0; mm]; n];
    let mut transfers = vec![vec![vec![0.0; n]; n]; mm];
    let mut realized_utility = vec![0.0; n];
    let p = &ctx.prices;
    let ev = &planned_ctx;

    for m in 0..mm {
        let qos = ev.qos(m);
        let flows = realized_offloads(&phi, &truth, revealed, m);
        for i in 0..n {
            let cap = ev.capacity(i, m);
            let t_ui = ev.user_latency(i, m);
            let sent: f64 = flows[i].iter().sum();
            let retained = (truth[i][m] - sent).max(0.0);
            let planned_in: Vec<f64> = (0..n).map(|j| if j == i { 0.0 } else { phi.get(m, j, i) * revealed[j][m] }).collect();

            // ℵ is planned on the revealed load, for every cloudlet the plan leaves under-loaded.
            let planned_load = (1.0 - phi.offloaded(m, i)) * revealed[i][m] + planned_in.iter().sum::<f64>();
            if crate::game::classify_load(ev, i, m, planned_load) == LoadState::UnderLoaded {
                let entry = (0..n)
                    .filter(|&j| planned_in[j] > ACTIVE)
                    .map(|j| ev.user_latency(j, m) + ev.topology.latency[j][i])
                    .fold(t_ui, f64::max);
                aleph[i][m] = compute_aleph_with_entry(ev, i, m, planned_load, entry);
            }

            let received: Vec<f64> = (0..n).map(|j| if j == i { 0.0 } else { flows[j][i] }).collect();
            let load = retained + received.iter().sum::<f64>() + aleph[i][m];
            let t = ev.latency(i, m, load);
            realized_latency[i][m] = t;

            let mut worst = f64::NEG_INFINITY;
            if retained > ACTIVE {
                worst = worst.max(t_ui + t);
            }
            let mut hinge = retained / cap * (t_ui + t - qos).max(0.0);
            let mut income = 0.0;
            for j in (0..n).filter(|&j| j != i) {
                if received[j] > ACTIVE {
                    let e2e = ev.user_latency(j, m) + t + ev.topology.latency[j][i];
                    worst = worst.max(e2e);
                    hinge += received[j] / cap * (e2e - qos).max(0.0);
                }
                income += p.offload[j][i][m] * ev.gamma(j, i) * received[j] / cap;
                let pay = p.offload[i][j][m] * ev.gamma(i, j) * flows[i][j] / ev.capacity(j, m);
                transfers[m][i][j] = pay;
            }
            let paid: f64 = transfers[m][i].iter().sum();
            fails_qos[i][m] = worst > qos + QOS_TOL;
            if fails_qos[i][m] {
                let charged = revealed[i][m] + planned_in.iter().sum::<f64>() + aleph[i][m];
                mediator_penalty[i][m] = p.mediator_penalty[i][m] * charged / cap;
            }
            realized_utility[i] += p.revenue[i][m] * truth[i][m] / cap + income
                - paid
                - p.latency_penalty[i][m] * hinge
                - mediator_penalty[i][m];
        }
    }

    Ok(RevelationRound {
        true_rates: truth,
        revealed: revealed.to_vec(),
        servers: planned_ctx.cloudlets.iter().map(|c| c.servers.clone()).collect(),
        strategies: phi,
        solver_converged: sol.converged,
        aleph,
        realized_latency,
        fails_qos,
        mediator_penalty,
        transfers,
        realized_utility,
        planned_utility,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SubCase {
    S1A,
    S1B,
    S2Ai,
    S2Aii,
    S2Aiii,
    S2Bi,
    S2Bii,
    S2Biii,
    S3A,
    S3B,
}

impl fmt::Display for SubCase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            SubCase::S1A => "1A",
            SubCase::S1B => "1B",
            SubCase::S2Ai => "2A(i)",
            SubCase::S2Aii => "2A(ii)",
            SubCase::S2Aiii => "2A(iii)",
            SubCase::S2Bi => "2B(i)",
            SubCase::S2Bii => "2B(ii)",
            SubCase::S2Biii => "2B(iii)",
            SubCase::S3A => "3A",
            SubCase::S3B => "3B",
        };
        f.write_str(s)
    }
}

/// Labels a unilateral deviation of cloudlet i in class m.
///
/// `true_state` is i's state at its true rate, `revealed_state` at the
/// revealed one, `neighbours` the revealed states of everyone else and
/// `receipt_change` the realized change in traffic i receives.
pub fn classify_subcase(
    true_state: LoadState,
    revealed_state: LoadState,
    neighbours: &[LoadState],
    inflated: bool,
    receipt_change: f64,
) -> SubCase {
    use LoadState::*;
    let any_under = neighbours.iter().any(|s| *s == UnderLoaded);
    let any_over = neighbours.iter().any(|s| *s == OverLoaded);
    match (true_state, any_under, any_over) {
        (UnderLoaded, _, false) => {
            if revealed_state == UnderLoaded {
                SubCase::S1A
            } else {
                SubCase::S1B
            }
        }
        (UnderLoaded, _, true) => {
            if receipt_change.abs() <= 1e-9 {
                SubCase::S2Bi
            } else if inflated {
                SubCase::S2Bii
            } else {
                SubCase::S2Biii
            }
        }
        (OverLoaded, true, _) => {
            if inflated {
                SubCase::S2Ai
            } else if revealed_state == OverLoaded {
                SubCase::S2Aii
            } else {
                SubCase::S2Aiii
            }
        }
        (OverLoaded, false, _) => {
            if revealed_state == OverLoaded {
                SubCase::S3A
            } else {
                SubCase::S3B
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriceViolation {
    pub from: usize,
    pub to: usize,
    pub class: usize,
    /// 1: offload price covers the worst latency penalty plus Ω4;
    /// 2: n_i times the offload price stays below Ω3 + Ω4.
    pub condition: u8,
    pub lhs: f64,
    pub rhs: f64,
    pub unstable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriceCheck {
    pub holds: bool,
    pub violations: Vec<PriceViolation>,
    /// Smallest margin (lhs − rhs for condition 1, rhs − lhs for 2).
    pub worst_margin: f64,
}

/// Evaluates both price conditions for every ordered pair and class.
pub fn check_price_conditions(ctx: &GameContext) -> PriceCheck {
    let p = &ctx.prices;
    let mut violations = Vec::new();
    let mut worst_margin = f64::INFINITY;
    for i in 0..ctx.n() {
        for m in 0..ctx.m() {
            let lam_max = ctx.arrivals.max[i][m];
            let unstable = !ctx.pool(i, m).is_stable(lam_max);
            let latency = ctx.user_latency(i, m) + ctx.latency(i, m, lam_max);
            for j in (0..ctx.n()).filter(|&j| j != i) {
                let o2 = p.offload[i][j][m];
                let rhs1 = p.latency_penalty[i][m] * latency + p.mediator_penalty[i][m];
                let margin1 = o2 - rhs1;
                let lhs2 = ctx.cloudlets[i].total_servers as f64 * o2;
                let rhs2 = p.latency_penalty[i][m] + p.mediator_penalty[i][m];
                let margin2 = rhs2 - lhs2;
                worst_margin = worst_margin.min(margin1).min(margin2);
                if margin1 < 0.0 || unstable {
                    violations.push(PriceViolation { from: i, to: j, class: m, condition: 1, lhs: o2, rhs: rhs1, unstable });
                }
                if margin2 < 0.0 {
                    violations.push(PriceViolation {
                        from: i,
                        to: j,
                        class: m,
                        condition: 2,
                        lhs: lhs2,
                        rhs: rhs2,
                        unstable: false,
                    });
                }
            }
        }
    }
    PriceCheck { holds: violations.is_empty(), violations, worst_margin }
}

/// Revealed-rate multiples of the true rate tried by the audit.
pub const AUDIT_GRID: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.25];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditPoint {
    pub cloudlet: usize,
    pub class: usize,
    pub true_rate: f64,
    pub revealed_rate: f64,
    pub subcase: SubCase,
    /// Realized utility under the deviation minus the truthful one.
    pub delta: f64,
    pub tolerance: f64,
    pub ok: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub prices: PriceCheck,
    pub truthful_utility: Vec<f64>,
    pub points: Vec<AuditPoint>,
    pub worst_relative_gain: f64,
    pub passed: bool,
}

/// Tries every unilateral misreport on the grid (multiples of the true rate,
/// clipped to the support) and compares realized utility with truthful play.
pub fn audit_truthfulness(ctx: &GameContext, grid: &[f64], opts: &SolverOptions) -> Result<AuditReport, NeError> {
    let prices = check_price_conditions(ctx);
    let truth = ctx.arrivals.rates.clone();
    let base = run_mediator_round(ctx, &truth, opts)?;
    let mut points = Vec::new();
    let mut worst = f64::NEG_INFINITY;

    // States at true rates use the truthful slices.
    let mut truthful_ctx = ctx.clone();
    for (c, s) in truthful_ctx.cloudlets.iter_mut().zip(&base.servers) {
        c.servers = s.clone();
    }

    for i in 0..ctx.n() {
        for m in 0..ctx.m() {
            let lam = truth[i][m];
            let mut seen = Vec::new();
            for &factor in grid {
                let hat = (factor * lam).clamp(0.0, ctx.arrivals.max[i][m]);
                if (hat - lam).abs() <= 1e-12 || seen.iter().any(|s: &f64| (s - hat).abs() <= 1e-12) {
                    continue;
                }
                seen.push(hat);
                let mut revealed = truth.clone();
                revealed[i][m] = hat;
                let round = run_mediator_round(ctx, &revealed, opts)?;

                let mut dev_ctx = ctx.clone();
                for (c, s) in dev_ctx.cloudlets.iter_mut().zip(&round.servers) {
                    c.servers = s.clone();
                }
                let true_state = crate::game::classify_load(&truthful_ctx, i, m, lam);
                let revealed_state = crate::game::classify_load(&dev_ctx, i, m, hat);
                let neighbours: Vec<LoadState> = (0..ctx.n())
                    .filter(|&j| j != i)
                    .map(|j| crate::game::classify_load(&dev_ctx, j, m, revealed[j][m]))
                    .collect();
                let receipts = |r: &RevelationRound| -> f64 {
                    let flows = realized_offloads(&r.strategies, &r.true_rates, &r.revealed, m);
                    (0..ctx.n()).filter(|&j| j != i).map(|j| flows[j][i]).sum()
                };
                let change = receipts(&round) - receipts(&base);
                let subcase = classify_subcase(true_state, revealed_state, &neighbours, hat > lam, change);

                let delta = round.realized_utility[i] - base.realized_utility[i];
                let tolerance = 1e-9 * base.realized_utility[i].abs().max(1.0);
                let ok = delta <= tolerance;
                worst = worst.max(delta / base.realized_utility[i].abs().max(1.0));
                points.push(AuditPoint {
                    cloudlet: i,
                    class: m,
                    true_rate: lam,
                    revealed_rate: hat,
                    subcase,
                    delta,
                    tolerance,
                    ok,
                });
            }
        }
    }
    let passed = points.iter().all(|p| p.ok);
    Ok(AuditReport { prices, truthful_utility: base.realized_utility, points, worst_relative_gain: worst, passed })
}
