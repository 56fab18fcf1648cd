//! Pure-strategy equilibrium of the offloading game.
//!
//! Classes where every cloudlet is under-loaded, or every cloudlet is
//! overloaded, have the identity as their unique equilibrium. Mixed classes
//! are solved by a damped fixed-point iteration `φ ← φ + ω(T(φ) − φ)`, where
//! `T` maps a profile to every cloudlet's best response given the others'
//! current loads. Receivers that are oversubscribed in `T` split their spare
//! capacity in proportion to the requested loads. Convergence is declared on
//! the KKT residual, and [`verify_ne`] gives an independent grid certificate.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::game::{
    aggregate_arrival, classify_load, reward_normalizer, utility, GameContext, GameError, LoadState,
    OffloadMatrix, RateBasis,
};

/// Offload fractions at or below this are treated as inactive.
const ACTIVE: f64 = 1e-12;
/// Step for the one-sided utility derivatives.
const FD_STEP: f64 = 1e-7;
const GOLDEN: f64 = 0.618_033_988_749_894_9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NeError {
    #[error("invalid solver option: {0}")]
    InvalidOptions(String),
    #[error(transparent)]
    Game(#[from] GameError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CaseLabel {
    AllUnder,
    AllOver,
    Mixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassCase {
    pub label: CaseLabel,
    pub overloaded: Vec<usize>,
    pub underloaded: Vec<usize>,
}

/// Partitions cloudlets per class by their load state at their own rates.
pub fn dispatch_case(ctx: &GameContext) -> Vec<ClassCase> {
    (0..ctx.m())
        .map(|m| {
            let (mut overloaded, mut underloaded) = (Vec::new(), Vec::new());
            for i in 0..ctx.n() {
                match classify_load(ctx, i, m, ctx.arrivals.rates[i][m]) {
                    LoadState::OverLoaded => overloaded.push(i),
                    LoadState::UnderLoaded => underloaded.push(i),
                }
            }
            let label = if overloaded.is_empty() {
                CaseLabel::AllUnder
            } else if underloaded.is_empty() {
                CaseLabel::AllOver
            } else {
                CaseLabel::Mixed
            };
            ClassCase { label, overloaded, underloaded }
        })
        .collect()
}

/// Lagrange multipliers, all nonnegative.
///
/// `alpha`, `xi` are indexed `[m][i][j]` (lower bound and the receiver's
/// shared latency constraint); `beta`, `zeta` are `[m][i]` (row sum and the
/// latency constraint on traffic i itself receives); `eta` is `[i][j]`
/// (link bandwidth).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Multipliers {
    pub alpha: Vec<Vec<Vec<f64>>>,
    pub beta: Vec<Vec<f64>>,
    pub xi: Vec<Vec<Vec<f64>>>,
    pub eta: Vec<Vec<f64>>,
    pub zeta: Vec<Vec<f64>>,
}

impl Multipliers {
    pub fn zeros(n: usize, m: usize) -> Self {
        Multipliers {
            alpha: vec![vec![vec![0.0; n]; n]; m],
            beta: vec![vec![0.0; n]; m],
            xi: vec![vec![vec![0.0; n]; n]; m],
            eta: vec![vec![0.0; n]; n],
            zeta: vec![vec![0.0; n]; m],
        }
    }

    pub fn all_nonnegative(&self) -> bool {
        let flat3 = |v: &Vec<Vec<Vec<f64>>>| v.iter().flatten().flatten().all(|x| *x >= 0.0);
        let flat2 = |v: &Vec<Vec<f64>>| v.iter().flatten().all(|x| *x >= 0.0);
        flat3(&self.alpha) && flat3(&self.xi) && flat2(&self.beta) && flat2(&self.eta) && flat2(&self.zeta)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    /// Damping step ω.
    pub step: f64,
    /// Residual tolerance ε.
    pub tolerance: f64,
    pub max_iters: usize,
    /// Halve ω (down to ω/64) whenever the residual increases.
    pub adaptive_step: bool,
    /// Iteration also continues until `max |T(φ) − φ|` drops below this.
    pub step_tolerance: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions { step: 0.1, tolerance: 1e-4, max_iters: 10_000, adaptive_step: true, step_tolerance: 1e-7 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeSolution {
    pub strategies: OffloadMatrix,
    pub multipliers: Multipliers,
    pub kkt_residual: f64,
    pub utilities: Vec<f64>,
    /// Queue sojourn time per `[i][m]` at the equilibrium loads (seconds).
    pub latencies: Vec<Vec<f64>>,
    pub cases: Vec<ClassCase>,
    pub iterations: usize,
    pub converged: bool,
}

// ---------------------------------------------------------------------------
// Shared receiver constraint helpers

fn rate(ctx: &GameContext, i: usize, m: usize) -> f64 {
    ctx.arrivals.rates[i][m]
}

fn is_active(phi: &OffloadMatrix, m: usize, k: usize, j: usize, ctx: &GameContext) -> bool {
    phi.get(m, k, j) > ACTIVE && rate(ctx, k, m) > 0.0
}

/// Worst `t_uk + t_kj` over senders currently active at j, optionally skipping one.
fn entry_latency(ctx: &GameContext, phi: &OffloadMatrix, j: usize, m: usize, skip: Option<usize>) -> Option<f64> {
    (0..ctx.n())
        .filter(|&k| k != j && Some(k) != skip && is_active(phi, m, k, j, ctx))
        .map(|k| ctx.user_latency(k, m) + ctx.topology.latency[k][j])
        .reduce(f64::max)
}

fn inbound_load(ctx: &GameContext, phi: &OffloadMatrix, j: usize, m: usize, skip: Option<usize>) -> f64 {
    (0..ctx.n())
        .filter(|&k| k != j && Some(k) != skip)
        .map(|k| phi.get(m, k, j) * rate(ctx, k, m))
        .sum()
}

/// Largest extra load R >= 0 with `entry + T_j(base + R) <= D`; 0 when even R = 0 fails.
fn max_extra_load(ctx: &GameContext, j: usize, m: usize, entry: f64, base: f64) -> f64 {
    let qos = ctx.qos(m);
    let ok = |r: f64| entry + ctx.latency(j, m, base + r) <= qos;
    if !ok(0.0) {
        return 0.0;
    }
    let mut lo = 0.0;
    let mut hi = (ctx.capacity(j, m) - base).max(0.0);
    if ok(hi) {
        return hi;
    }
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if ok(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    lo
}

/// Slack `e + T_j(λ̄_j) − D` of receiver j's shared constraint, if it has senders.
fn receiver_gap(ctx: &GameContext, phi: &OffloadMatrix, j: usize, m: usize) -> Option<f64> {
    let e = entry_latency(ctx, phi, j, m, None)?;
    let load = aggregate_arrival(ctx, phi, j, m, RateBasis::True);
    Some(e + ctx.latency(j, m, load) - ctx.qos(m))
}

/// Worst violation (seconds, >= 0) of any receiver's shared latency constraint.
pub fn receiver_violation(ctx: &GameContext, phi: &OffloadMatrix) -> f64 {
    let mut worst = 0.0f64;
    for m in 0..ctx.m() {
        for j in 0..ctx.n() {
            if let Some(g) = receiver_gap(ctx, phi, j, m) {
                worst = worst.max(g);
            }
        }
    }
    worst
}

/// Bits/s on link i→j used by classes other than `m`.
fn link_usage_except(ctx: &GameContext, phi: &OffloadMatrix, i: usize, j: usize, m: usize) -> f64 {
    (0..ctx.m())
        .filter(|&k| k != m)
        .map(|k| ctx.classes[k].bits_per_job * phi.get(k, i, j) * rate(ctx, i, k))
        .sum()
}

/// Largest fraction i may send to j in class m with everything else held fixed.
fn sender_headroom(ctx: &GameContext, phi: &OffloadMatrix, i: usize, j: usize, m: usize) -> f64 {
    let lam = rate(ctx, i, m);
    if lam <= 0.0 {
        return 0.0;
    }
    let mine = ctx.user_latency(i, m) + ctx.topology.latency[i][j];
    let entry = entry_latency(ctx, phi, j, m, Some(i)).map_or(mine, |e| e.max(mine));
    let base = aggregate_arrival(ctx, phi, j, m, RateBasis::True) - phi.get(m, i, j) * lam;
    let recv = max_extra_load(ctx, j, m, entry, base.max(0.0)) / lam;
    let bw_left = ctx.topology.bandwidth[i][j] - link_usage_except(ctx, phi, i, j, m);
    let bw = (bw_left / (ctx.classes[m].bits_per_job * lam)).max(0.0);
    recv.min(bw).min(1.0)
}

/// Smallest total offload fraction that keeps i's own shared constraint
/// (for traffic it receives) satisfied.
fn own_offload_floor(ctx: &GameContext, phi: &OffloadMatrix, i: usize, m: usize) -> f64 {
    let lam = rate(ctx, i, m);
    let Some(e) = entry_latency(ctx, phi, i, m, None) else { return 0.0 };
    if lam <= 0.0 {
        return 0.0;
    }
    let inbound = inbound_load(ctx, phi, i, m, None);
    let retained_max = max_extra_load(ctx, i, m, e, inbound);
    (1.0 - retained_max / lam).clamp(0.0, 1.0)
}

// ---------------------------------------------------------------------------
// Best responses

/// Splits a total offload `s` over receivers, cheapest first.
fn fill(order: &[(usize, f64)], caps: &[f64], s: f64, n: usize) -> Vec<f64> {
    let mut row = vec![0.0; n];
    let mut left = s;
    for &(j, _) in order {
        let take = left.min(caps[j]).max(0.0);
        row[j] = take;
        left -= take;
        if left <= 0.0 {
            break;
        }
    }
    row
}

/// i's utility-maximising class-m row given per-receiver caps. Utility is
/// concave in the total offload once receivers are filled cheapest first,
/// so a golden-section search over the total suffices.
fn best_row(ctx: &GameContext, phi: &OffloadMatrix, i: usize, m: usize, caps: &[f64], floor: f64) -> Vec<f64> {
    let n = ctx.n();
    let mut order: Vec<(usize, f64)> = (0..n)
        .filter(|&j| j != i && caps[j] > 0.0)
        .map(|j| (j, ctx.prices.offload[i][j][m] * ctx.gamma(i, j) / ctx.capacity(j, m)))
        .collect();
    order.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    let s_max = caps.iter().sum::<f64>().min(1.0);
    let s_min = floor.min(s_max);

    let mut trial = phi.clone();
    let mut eval = |s: f64| {
        trial.set_row(m, i, &fill(&order, caps, s, n));
        utility(ctx, &trial, i, RateBasis::True)
    };

    let (mut a, mut b) = (s_min, s_max);
    let mut x1 = b - GOLDEN * (b - a);
    let mut x2 = a + GOLDEN * (b - a);
    let (mut f1, mut f2) = (eval(x1), eval(x2));
    for _ in 0..80 {
        if b - a < 1e-13 {
            break;
        }
        if f1 < f2 {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + GOLDEN * (b - a);
            f2 = eval(x2);
        } else {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - GOLDEN * (b - a);
            f1 = eval(x1);
        }
    }
    let mid = 0.5 * (a + b);
    let mut best = (s_min, eval(s_min));
    for s in [mid, s_max] {
        let u = eval(s);
        if u > best.1 + 1e-12 * best.1.abs().max(1.0) {
            best = (s, u);
        }
    }
    fill(&order, caps, best.0, n)
}

/// The map T: every cloudlet's best response to the current profile in the
/// mixed classes, with proportional sharing at oversubscribed receivers.
fn target(ctx: &GameContext, phi: &OffloadMatrix, mixed: &[usize]) -> OffloadMatrix {
    let n = ctx.n();
    let mut t = phi.clone();
    for &m in mixed {
        for i in 0..n {
            if rate(ctx, i, m) <= 0.0 {
                continue;
            }
            let caps: Vec<f64> =
                (0..n).map(|j| if j == i { 0.0 } else { sender_headroom(ctx, phi, i, j, m) }).collect();
            let floor = own_offload_floor(ctx, phi, i, m);
            let row = best_row(ctx, phi, i, m, &caps, floor);
            t.set_row(m, i, &row);
        }
        for j in 0..n {
            let Some(entry) = entry_latency(ctx, &t, j, m, None) else { continue };
            let base = (1.0 - t.offloaded(m, j)) * rate(ctx, j, m);
            let room = max_extra_load(ctx, j, m, entry, base);
            let total = inbound_load(ctx, &t, j, m, None);
            if total > room {
                let scale = room / total;
                for k in (0..n).filter(|&k| k != j) {
                    let v = t.get(m, k, j) * scale;
                    t.set(m, k, j, v);
                }
            }
        }
    }
    t
}

/// Shrinks inbound traffic at any receiver whose shared constraint is violated.
fn repair(ctx: &GameContext, phi: &mut OffloadMatrix, mixed: &[usize]) {
    for &m in mixed {
        for j in 0..ctx.n() {
            let Some(entry) = entry_latency(ctx, phi, j, m, None) else { continue };
            let base = (1.0 - phi.offloaded(m, j)) * rate(ctx, j, m);
            let room = max_extra_load(ctx, j, m, entry, base);
            let total = inbound_load(ctx, phi, j, m, None);
            if total > room {
                let scale = room / total;
                for k in (0..ctx.n()).filter(|&k| k != j) {
                    let v = phi.get(m, k, j) * scale;
                    phi.set(m, k, j, v);
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// KKT residual

#[derive(Debug, Clone)]
struct VarInfo {
    m: usize,
    i: usize,
    j: usize,
    /// Normalised one-sided derivative interval of U_i in φ_ij.
    lo: f64,
    hi: f64,
    phi: f64,
    at_bound: bool,
    /// At the lower bound with no room to increase: contributes nothing.
    blocked: bool,
    /// Normalised slack of the receiver's shared constraint, if one applies.
    recv_slack: f64,
    /// Link usage per unit fraction, relative to link capacity.
    bw_weight: f64,
}

struct KktData {
    vars: Vec<VarInfo>,
    row_slack: Vec<Vec<f64>>,
    own_slack: Vec<Vec<Option<f64>>>,
    link_slack: Vec<Vec<f64>>,
    violations: f64,
}

fn kkt_data(ctx: &GameContext, phi: &OffloadMatrix, psi: &OffloadMatrix) -> KktData {
    let (n, mm) = (ctx.n(), ctx.m());
    let qos_scale: Vec<f64> = (0..mm).map(|m| ctx.qos(m)).collect();
    let mut vars = Vec::new();
    let mut violations = 0.0;

    for m in 0..mm {
        for j in 0..n {
            if let Some(g) = receiver_gap(ctx, phi, j, m) {
                violations += (g.max(0.0) / qos_scale[m]).powi(2);
            }
        }
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    violations += (phi.get(m, i, j) - psi.get(m, i, j)).powi(2);
                }
            }
        }
    }
    let mut link_slack = vec![vec![f64::INFINITY; n]; n];
    for i in 0..n {
        for j in (0..n).filter(|&j| j != i) {
            let usage = crate::game::link_demand(ctx, phi, i, j, RateBasis::True);
            let rel = usage / ctx.topology.bandwidth[i][j];
            violations += (rel - 1.0).max(0.0).powi(2);
            link_slack[i][j] = (1.0 - rel).max(0.0);
        }
    }

    let mut row_slack = vec![vec![0.0; n]; mm];
    let mut own_slack = vec![vec![None; n]; mm];
    for m in 0..mm {
        for i in 0..n {
            row_slack[m][i] = (1.0 - phi.offloaded(m, i)).max(0.0);
            if let Some(g) = receiver_gap(ctx, phi, i, m) {
                own_slack[m][i] = Some((-g).max(0.0) / qos_scale[m]);
            }
            let lam = rate(ctx, i, m);
            let norm = reward_normalizer(ctx, i).max(f64::MIN_POSITIVE);
            let u0 = utility(ctx, phi, i, RateBasis::True);
            for j in (0..n).filter(|&j| j != i) {
                let x = phi.get(m, i, j);
                let mut trial = phi.clone();
                let can_up = phi.offloaded(m, i) + FD_STEP <= 1.0;
                let can_down = x >= FD_STEP;
                let fwd = can_up.then(|| {
                    trial.set(m, i, j, x + FD_STEP);
                    (utility(ctx, &trial, i, RateBasis::True) - u0) / FD_STEP / norm
                });
                let bwd = can_down.then(|| {
                    trial.set(m, i, j, x - FD_STEP);
                    (u0 - utility(ctx, &trial, i, RateBasis::True)) / FD_STEP / norm
                });
                let (lo, hi) = match (fwd, bwd) {
                    (Some(f), Some(b)) => (f.min(b), f.max(b)),
                    (Some(f), None) => (f, f),
                    (None, Some(b)) => (b, b),
                    (None, None) => (0.0, 0.0),
                };
                let at_bound = x <= ACTIVE;
                let headroom = sender_headroom(ctx, phi, i, j, m);
                let blocked = at_bound && (lam <= 0.0 || headroom <= x + 1e-9);
                let mine = ctx.user_latency(i, m) + ctx.topology.latency[i][j];
                let entry = entry_latency(ctx, phi, j, m, Some(i)).map_or(mine, |e| e.max(mine));
                let load = aggregate_arrival(ctx, phi, j, m, RateBasis::True);
                let gap = entry + ctx.latency(j, m, load) - ctx.qos(m);
                let bw_weight = ctx.classes[m].bits_per_job * lam / ctx.topology.bandwidth[i][j];
                vars.push(VarInfo {
                    m,
                    i,
                    j,
                    lo,
                    hi,
                    phi: x,
                    at_bound,
                    blocked,
                    recv_slack: (-gap).max(0.0) / qos_scale[m],
                    bw_weight,
                });
            }
        }
    }
    KktData { vars, row_slack, own_slack, link_slack, violations }
}

fn var_term(v: &VarInfo, shift: f64) -> f64 {
    if v.blocked {
        return 0.0;
    }
    let (lo, hi) = (v.lo + shift, v.hi + shift);
    if v.at_bound {
        lo.max(0.0).powi(2)
    } else if lo > 0.0 {
        lo * lo
    } else if hi < 0.0 {
        hi * hi
    } else {
        0.0
    }
}

fn var_shift(v: &VarInfo, mu: &Multipliers) -> f64 {
    mu.alpha[v.m][v.i][v.j] - mu.beta[v.m][v.i] - mu.xi[v.m][v.i][v.j] - mu.eta[v.i][v.j] * v.bw_weight
        + mu.zeta[v.m][v.i]
}

fn kkt_value(data: &KktData, mu: &Multipliers) -> f64 {
    let mut total = data.violations;
    for v in &data.vars {
        total += var_term(v, var_shift(v, mu));
        total += mu.alpha[v.m][v.i][v.j] * v.phi + mu.xi[v.m][v.i][v.j] * v.recv_slack;
    }
    for (m, rows) in data.row_slack.iter().enumerate() {
        for (i, s) in rows.iter().enumerate() {
            total += mu.beta[m][i] * s;
            if let Some(o) = data.own_slack[m][i] {
                total += mu.zeta[m][i] * o;
            }
        }
    }
    for (i, row) in data.link_slack.iter().enumerate() {
        for (j, s) in row.iter().enumerate() {
            if s.is_finite() {
                total += mu.eta[i][j] * s;
            }
        }
    }
    total
}

/// Complementary-slackness terms plus squared stationarity and feasibility
/// residuals at `phi`, with `psi` mirroring the off-diagonal offloads. Zero
/// exactly at an equilibrium with matching multipliers.
pub fn kkt_residual(ctx: &GameContext, phi: &OffloadMatrix, psi: &OffloadMatrix, mu: &Multipliers) -> f64 {
    kkt_value(&kkt_data(ctx, phi, psi), mu)
}

#[derive(Clone, Copy)]
enum Coord {
    Alpha(usize),
    Xi(usize),
    Beta(usize, usize),
    Zeta(usize, usize),
    Eta(usize, usize),
}

fn coord_get(mu: &Multipliers, data: &KktData, c: Coord) -> f64 {
    match c {
        Coord::Alpha(v) => {
            let x = &data.vars[v];
            mu.alpha[x.m][x.i][x.j]
        }
        Coord::Xi(v) => {
            let x = &data.vars[v];
            mu.xi[x.m][x.i][x.j]
        }
        Coord::Beta(m, i) => mu.beta[m][i],
        Coord::Zeta(m, i) => mu.zeta[m][i],
        Coord::Eta(i, j) => mu.eta[i][j],
    }
}

fn coord_set(mu: &mut Multipliers, data: &KktData, c: Coord, val: f64) {
    match c {
        Coord::Alpha(v) => {
            let x = &data.vars[v];
            mu.alpha[x.m][x.i][x.j] = val;
        }
        Coord::Xi(v) => {
            let x = &data.vars[v];
            mu.xi[x.m][x.i][x.j] = val;
        }
        Coord::Beta(m, i) => mu.beta[m][i] = val,
        Coord::Zeta(m, i) => mu.zeta[m][i] = val,
        Coord::Eta(i, j) => mu.eta[i][j] = val,
    }
}

/// Multipliers minimising the residual at `phi`, by cyclic coordinate
/// descent; each coordinate sub-problem is convex and solved by golden section.
fn fit(data: &KktData, n: usize, mm: usize) -> Multipliers {
    let mut mu = Multipliers::zeros(n, mm);
    let mut coords: Vec<(Coord, Vec<(usize, f64)>, f64)> = Vec::new();
    for (idx, v) in data.vars.iter().enumerate() {
        if v.blocked {
            continue;
        }
        if !v.at_bound {
            coords.push((Coord::Alpha(idx), vec![(idx, 1.0)], v.phi));
        }
        coords.push((Coord::Xi(idx), vec![(idx, -1.0)], v.recv_slack));
    }
    for m in 0..mm {
        for i in 0..n {
            let row: Vec<usize> =
                (0..data.vars.len()).filter(|&k| data.vars[k].m == m && data.vars[k].i == i && !data.vars[k].blocked).collect();
            if row.is_empty() {
                continue;
            }
            coords.push((Coord::Beta(m, i), row.iter().map(|&k| (k, -1.0)).collect(), data.row_slack[m][i]));
            if let Some(o) = data.own_slack[m][i] {
                coords.push((Coord::Zeta(m, i), row.iter().map(|&k| (k, 1.0)).collect(), o));
            }
        }
    }
    for i in 0..n {
        for j in (0..n).filter(|&j| j != i) {
            let link: Vec<(usize, f64)> = (0..data.vars.len())
                .filter(|&k| data.vars[k].i == i && data.vars[k].j == j && !data.vars[k].blocked)
                .map(|k| (k, -data.vars[k].bw_weight))
                .filter(|&(_, w)| w < 0.0)
                .collect();
            if !link.is_empty() && data.link_slack[i][j].is_finite() {
                coords.push((Coord::Eta(i, j), link, data.link_slack[i][j]));
            }
        }
    }
    if coords.is_empty() {
        return mu;
    }
    let fmax = data.vars.iter().map(|v| v.lo.abs().max(v.hi.abs())).fold(0.0, f64::max);

    let mut shifts: Vec<f64> = vec![0.0; data.vars.len()];
    for _ in 0..25 {
        for (c, affected, weight) in &coords {
            let cur = coord_get(&mu, data, *c);
            let min_coef = affected.iter().map(|(_, k)| k.abs()).fold(f64::INFINITY, f64::min);
            let upper = (2.0 * fmax + 1.0) / min_coef.max(1e-12);
            let base: Vec<f64> = affected.iter().map(|&(v, k)| shifts[v] - k * cur).collect();
            let local = |x: f64| -> f64 {
                affected.iter().zip(&base).map(|(&(v, k), b)| var_term(&data.vars[v], b + k * x)).sum::<f64>()
                    + weight * x
            };
            let (mut a, mut b) = (0.0, upper);
            for _ in 0..120 {
                let x1 = b - GOLDEN * (b - a);
                let x2 = a + GOLDEN * (b - a);
                if local(x1) <= local(x2) {
                    b = x2;
                } else {
                    a = x1;
                }
            }
            let mut x = 0.5 * (a + b);
            if local(0.0) <= local(x) {
                x = 0.0;
            }
            coord_set(&mut mu, data, *c, x);
            for (&(v, k), b0) in affected.iter().zip(&base) {
                shifts[v] = b0 + k * x;
            }
        }
    }
    mu
}

/// Residual at `phi` (with ψ = φ) under the best-fitting multipliers.
pub fn fitted_residual(ctx: &GameContext, phi: &OffloadMatrix) -> (f64, Multipliers) {
    let data = kkt_data(ctx, phi, phi);
    let mu = fit(&data, ctx.n(), ctx.m());
    (kkt_value(&data, &mu), mu)
}

// ---------------------------------------------------------------------------
// Solver

fn finish(
    ctx: &GameContext,
    phi: OffloadMatrix,
    cases: Vec<ClassCase>,
    iterations: usize,
    tolerance: f64,
) -> NeSolution {
    let (res, mu) = fitted_residual(ctx, &phi);
    let utilities = (0..ctx.n()).map(|i| utility(ctx, &phi, i, RateBasis::True)).collect();
    let latencies = (0..ctx.n())
        .map(|i| {
            (0..ctx.m()).map(|m| ctx.latency(i, m, aggregate_arrival(ctx, &phi, i, m, RateBasis::True))).collect()
        })
        .collect();
    NeSolution {
        strategies: phi,
        multipliers: mu,
        kkt_residual: res,
        utilities,
        latencies,
        cases,
        iterations,
        converged: res <= tolerance,
    }
}

pub fn solve_ne(ctx: &GameContext, opts: &SolverOptions) -> Result<NeSolution, NeError> {
    if !(opts.step > 0.0 && opts.step <= 1.0) {
        return Err(NeError::InvalidOptions(format!("step must lie in (0, 1], got {}", opts.step)));
    }
    if !(opts.tolerance > 0.0) {
        return Err(NeError::InvalidOptions(format!("tolerance must be > 0, got {}", opts.tolerance)));
    }
    ctx.validate()?;
    let cases = dispatch_case(ctx);
    let mixed: Vec<usize> = (0..ctx.m()).filter(|&m| cases[m].label == CaseLabel::Mixed).collect();
    let mut phi = OffloadMatrix::identity(ctx.n(), ctx.m());
    if mixed.is_empty() {
        return Ok(finish(ctx, phi, cases, 0, opts.tolerance));
    }

    let min_step = opts.step / 64.0;
    let mut omega = opts.step;
    let (mut prev, _) = fitted_residual(ctx, &phi);
    let mut best = (prev, phi.clone());
    let mut iterations = 0;
    while iterations < opts.max_iters {
        let t = target(ctx, &phi, &mixed);
        let mut moved = 0.0f64;
        for &m in &mixed {
            for i in 0..ctx.n() {
                for j in 0..ctx.n() {
                    moved = moved.max((t.get(m, i, j) - phi.get(m, i, j)).abs());
                }
            }
        }
        if prev <= opts.tolerance && moved <= opts.step_tolerance {
            return Ok(finish(ctx, phi, cases, iterations, opts.tolerance));
        }
        iterations += 1;
        for &m in &mixed {
            for i in 0..ctx.n() {
                let row: Vec<f64> = (0..ctx.n())
                    .map(|j| {
                        let a = phi.get(m, i, j);
                        (a + omega * (t.get(m, i, j) - a)).max(0.0)
                    })
                    .collect();
                phi.set_row(m, i, &row);
            }
        }
        repair(ctx, &mut phi, &mixed);
        let (res, _) = fitted_residual(ctx, &phi);
        if opts.adaptive_step && res > prev {
            omega = (omega * 0.5).max(min_step);
        }
        prev = res;
        if res < best.0 {
            best = (res, phi.clone());
        }
    }
    let last = if prev <= opts.tolerance { phi } else { best.1 };
    Ok(finish(ctx, last, cases, iterations, opts.tolerance))
}

// ---------------------------------------------------------------------------
// Certificate

/// Whether i's class-m row `row` respects every shared constraint and i's
/// link budgets, with all other rows taken from `phi`.
fn row_feasible(ctx: &GameContext, phi: &OffloadMatrix, i: usize, m: usize, row: &[f64]) -> bool {
    let mut trial = phi.clone();
    trial.set_row(m, i, row);
    if trial.offloaded(m, i) > 1.0 + 1e-12 {
        return false;
    }
    for j in (0..ctx.n()).filter(|&j| j != i) {
        if row[j] > ACTIVE {
            if let Some(g) = receiver_gap(ctx, &trial, j, m) {
                if g > 1e-12 {
                    return false;
                }
            }
        }
        let demand = crate::game::link_demand(ctx, &trial, i, j, RateBasis::True);
        if demand > ctx.topology.bandwidth[i][j] * (1.0 + 1e-12) {
            return false;
        }
    }
    match receiver_gap(ctx, &trial, i, m) {
        Some(g) => g <= 1e-12,
        None => true,
    }
}

/// Exhaustive grid search over i's offload fractions, one class at a time,
/// keeping every other class and cloudlet fixed. Returns one row per class.
pub fn best_response(ctx: &GameContext, phi: &OffloadMatrix, i: usize, grid_step: f64) -> Vec<Vec<f64>> {
    let n = ctx.n();
    let steps = (1.0 / grid_step).round() as usize;
    let current = phi;
    let mut rows = Vec::with_capacity(ctx.m());
    for m in 0..ctx.m() {
        // Per-neighbour limits: feasibility is monotone in each fraction alone.
        let mut limits = vec![0usize; n];
        for j in (0..n).filter(|&j| j != i) {
            let mut k = 0;
            while k < steps {
                let mut row = vec![0.0; n];
                row[j] = (k + 1) as f64 * grid_step;
                if !row_feasible_single(ctx, &current, i, j, m, row[j]) {
                    break;
                }
                k += 1;
            }
            limits[j] = k;
        }
        let neighbours: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        let mut counter = vec![0usize; neighbours.len()];
        let mut best_row = vec![0.0; n];
        best_row[i] = 1.0;
        let mut best_u = f64::NEG_INFINITY;
        'outer: loop {
            let total: usize = counter.iter().sum();
            if total <= steps {
                let mut row = vec![0.0; n];
                for (pos, &j) in neighbours.iter().enumerate() {
                    row[j] = counter[pos] as f64 * grid_step;
                }
                if row_feasible(ctx, &current, i, m, &row) {
                    let mut trial = current.clone();
                    trial.set_row(m, i, &row);
                    let u = utility(ctx, &trial, i, RateBasis::True);
                    if u > best_u {
                        best_u = u;
                        best_row = trial.classes[m][i].clone();
                    }
                }
            }
            for pos in 0..counter.len() {
                if counter[pos] < limits[neighbours[pos]] {
                    counter[pos] += 1;
                    continue 'outer;
                }
                counter[pos] = 0;
            }
            break;
        }
        rows.push(best_row);
    }
    rows
}

fn row_feasible_single(ctx: &GameContext, phi: &OffloadMatrix, i: usize, j: usize, m: usize, x: f64) -> bool {
    let mut trial = phi.clone();
    let mut row = vec![0.0; ctx.n()];
    row[j] = x;
    trial.set_row(m, i, &row);
    if let Some(g) = receiver_gap(ctx, &trial, j, m) {
        if g > 1e-12 {
            return false;
        }
    }
    crate::game::link_demand(ctx, &trial, i, j, RateBasis::True) <= ctx.topology.bandwidth[i][j] * (1.0 + 1e-12)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verification {
    pub passed: bool,
    /// Largest utility gain any cloudlet can obtain by a grid deviation.
    pub worst_gain: f64,
    /// That gain divided by `max(1, |U_i|)`.
    pub worst_relative_gain: f64,
    pub worst_cloudlet: usize,
}

/// Grid certificate: no cloudlet gains more than `rel_slack · max(1, |U_i|)`
/// by deviating in any single class.
pub fn verify_ne(ctx: &GameContext, phi: &OffloadMatrix, grid_step: f64, rel_slack: f64) -> Verification {
    let mut out = Verification {
        passed: true,
        worst_gain: f64::NEG_INFINITY,
        worst_relative_gain: f64::NEG_INFINITY,
        worst_cloudlet: 0,
    };
    for i in 0..ctx.n() {
        let u0 = utility(ctx, phi, i, RateBasis::True);
        let rows = best_response(ctx, phi, i, grid_step);
        for (m, row) in rows.iter().enumerate() {
            let mut trial = phi.clone();
            trial.classes[m][i] = row.clone();
            let gain = utility(ctx, &trial, i, RateBasis::True) - u0;
            let rel = gain / u0.abs().max(1.0);
            if rel > out.worst_relative_gain {
                out.worst_relative_gain = rel;
                out.worst_gain = gain;
                out.worst_cloudlet = i;
            }
            if rel > rel_slack {
                out.passed = false;
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonotonicityReport {
    pub rates: Vec<f64>,
    /// Total equilibrium offload fraction of the probed cloudlet per rate.
    pub offloads: Vec<f64>,
    pub monotone: bool,
}

/// Re-solves the game with cloudlet i's class-m rate set to each entry of
/// `rates` and checks that i's total offload fraction never decreases.
pub fn ne_monotonicity_check(
    ctx: &GameContext,
    i: usize,
    m: usize,
    rates: &[f64],
    opts: &SolverOptions,
) -> Result<MonotonicityReport, NeError> {
    let mut offloads = Vec::with_capacity(rates.len());
    for &r in rates {
        let mut probe = ctx.clone();
        probe.arrivals.rates[i][m] = r;
        probe.arrivals.revealed[i][m] = r;
        probe.arrivals.max[i][m] = probe.arrivals.max[i][m].max(r);
        let sol = solve_ne(&probe, opts)?;
        offloads.push(sol.strategies.offloaded(m, i));
    }
    let monotone = offloads.windows(2).all(|w| w[1] >= w[0] - 1e-6);
    Ok(MonotonicityReport { rates: rates.to_vec(), offloads, monotone })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::game::fixtures::two_cloudlets;

    /// Independent oracle for the two-cloudlet scenario: dense scan of the
    /// sender's utility over feasible φ12 with the receiver's constraint.
    fn scan_oracle(ctx: &GameContext) -> f64 {
        let mut best = (0.0, f64::NEG_INFINITY);
        for k in 0..=200_000 {
            let p = k as f64 * 1e-6;
            let lam2 = ctx.arrivals.rates[1][0] + p * ctx.arrivals.rates[0][0];
            let t2 = crate::queueing::latency_or_sentinel(ctx.pool(1, 0), lam2);
            if 0.002 + 0.001 + t2 > ctx.qos(0) && p > 0.0 {
                break;
            }
            let mut phi = OffloadMatrix::identity(2, 1);
            phi.set(0, 0, 1, p);
            let u = utility(ctx, &phi, 0, RateBasis::True);
            if u > best.1 {
                best = (p, u);
            }
        }
        best.0
    }

    #[test]
    fn dispatch_examples() {
        let labels = |ctx: &GameContext| dispatch_case(ctx)[0].label;
        assert_eq!(labels(&two_cloudlets(0.0, 0.0)), CaseLabel::AllUnder);
        assert_eq!(labels(&two_cloudlets(1000.0, 1200.0)), CaseLabel::AllOver);
        let mixed = dispatch_case(&two_cloudlets(970.0, 800.0));
        assert_eq!(mixed[0].label, CaseLabel::Mixed);
        assert_eq!(mixed[0].overloaded, vec![0]);
    }

    #[test]
    fn short_circuits_return_identity_without_iterations() {
        for (a, b) in [(0.0, 0.0), (100.0, 300.0), (1000.0, 1200.0), (990.0, 995.0)] {
            let ctx = two_cloudlets(a, b);
            let sol = solve_ne(&ctx, &SolverOptions::default()).unwrap();
            assert_eq!(sol.iterations, 0);
            assert_eq!(sol.strategies, OffloadMatrix::identity(2, 1));
        }
        let ctx = two_cloudlets(300.0, 800.0);
        let sol = solve_ne(&ctx, &SolverOptions::default()).unwrap();
        assert!((sol.utilities[1] - 4000.0).abs() < 1e-9);
    }

    #[test]
    fn identity_residual_is_zero_when_all_underloaded() {
        let ctx = two_cloudlets(300.0, 800.0);
        let phi = OffloadMatrix::identity(2, 1);
        assert_eq!(kkt_residual(&ctx, &phi, &phi, &Multipliers::zeros(2, 1)), 0.0);
    }

    #[test]
    fn residual_positive_away_from_equilibrium() {
        let ctx = two_cloudlets(970.0, 800.0);
        let phi = OffloadMatrix::identity(2, 1);
        assert!(fitted_residual(&ctx, &phi).0 > 1e-3);
        let mut off = phi.clone();
        off.set(0, 0, 1, 0.01);
        assert!(fitted_residual(&ctx, &off).0 > 1e-4);
    }

    #[test]
    fn reference_scenario_matches_scan_oracle() {
        let ctx = two_cloudlets(970.0, 800.0);
        let sol = solve_ne(&ctx, &SolverOptions::default()).unwrap();
        assert!(sol.converged, "residual {}", sol.kkt_residual);
        assert!(sol.multipliers.all_nonnegative());
        let oracle = scan_oracle(&ctx);
        let p = sol.strategies.get(0, 0, 1);
        assert!((p - oracle).abs() < 0.01, "solver {p} oracle {oracle}");
        // The frozen oracle value for a single server of rate 1000.
        assert!((oracle - 0.02494).abs() < 1e-4, "{oracle}");
        assert_eq!(sol.strategies.get(0, 1, 0), 0.0);
        assert!(verify_ne(&ctx, &sol.strategies, 0.005, 1e-3).passed);
        assert!(receiver_violation(&ctx, &sol.strategies) <= 1e-9);
    }

    #[test]
    fn tight_tolerance_hits_oracle_closely() {
        let ctx = two_cloudlets(970.0, 800.0);
        let opts = SolverOptions { tolerance: 1e-10, ..Default::default() };
        let sol = solve_ne(&ctx, &opts).unwrap();
        assert!((sol.strategies.get(0, 0, 1) - scan_oracle(&ctx)).abs() < 2e-5);
    }

    #[test]
    fn receiver_limit_binds_when_receiver_is_busy() {
        let ctx = two_cloudlets(990.0, 850.0);
        let sol = solve_ne(&ctx, &SolverOptions::default()).unwrap();
        assert!(sol.converged, "residual {}", sol.kkt_residual);
        // 0.003 + 1/(1000 − 850 − R) = 0.01 ⇒ R = 150 − 1/0.007
        let room = 150.0 - 1.0 / 0.007;
        assert!((sol.strategies.get(0, 0, 1) * 990.0 - room).abs() < 0.2);
        assert!(verify_ne(&ctx, &sol.strategies, 0.005, 1e-3).passed);
    }

    #[test]
    fn perturbed_equilibrium_fails_certificate() {
        let ctx = two_cloudlets(970.0, 700.0);
        let sol = solve_ne(&ctx, &SolverOptions::default()).unwrap();
        let mut bumped = sol.strategies.clone();
        let p = bumped.get(0, 0, 1);
        bumped.set(0, 0, 1, p + 0.05);
        assert!(!verify_ne(&ctx, &bumped, 0.005, 1e-3).passed);
    }

    #[test]
    fn best_response_examples() {
        let ctx = two_cloudlets(970.0, 800.0);
        let phi = OffloadMatrix::identity(2, 1);
        let rows = best_response(&ctx, &phi, 1, 0.005);
        assert_eq!(rows[0], vec![0.0, 1.0]);
        let rows = best_response(&ctx, &phi, 0, 0.005);
        assert!((rows[0][1] - scan_oracle(&ctx)).abs() <= 0.005);
        let idle = two_cloudlets(0.0, 800.0);
        assert_eq!(best_response(&idle, &phi, 0, 0.005)[0][1], 0.0);
    }

    #[test]
    fn offload_grows_with_sender_rate() {
        let ctx = two_cloudlets(970.0, 800.0);
        let opts = SolverOptions { tolerance: 1e-9, ..Default::default() };
        let r = ne_monotonicity_check(&ctx, 0, 0, &[950.0, 970.0, 990.0], &opts).unwrap();
        assert!(r.monotone, "{:?}", r.offloads);
        assert!(r.offloads[2] > r.offloads[0]);
        let r = ne_monotonicity_check(&ctx, 0, 0, &[100.0, 200.0, 300.0], &opts).unwrap();
        assert!(r.offloads.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn deterministic() {
        let ctx = two_cloudlets(980.0, 850.0);
        let a = solve_ne(&ctx, &SolverOptions::default()).unwrap();
        let b = solve_ne(&ctx, &SolverOptions::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_bad_options() {
        let ctx = two_cloudlets(970.0, 800.0);
        let bad = SolverOptions { step: 0.0, ..Default::default() };
        assert!(matches!(solve_ne(&ctx, &bad), Err(NeError::InvalidOptions(_))));
    }
}
