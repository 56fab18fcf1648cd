//! Game data model: cloudlets, job classes, topology, prices and arrivals,
//! plus utility, load classification, bandwidth and reward evaluation.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::queueing::{latency_or_sentinel, ServerPool};
use crate::slicing::{solve_slicing, ClassLoad, SlicingError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GameError {
    #[error("invalid config at {path}: {reason}")]
    Config { path: String, reason: String },
    #[error(transparent)]
    Slicing(#[from] SlicingError),
}

pub(crate) fn config_err(path: impl Into<String>, reason: impl Into<String>) -> GameError {
    GameError::Config { path: path.into(), reason: reason.into() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobClass {
    /// Per-server service rate μ (jobs/s).
    pub service_rate: f64,
    /// QoS target as a multiple of the slot length.
    pub slot_multiple: u32,
    /// Mean job size b (bits).
    pub bits_per_job: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cloudlet {
    pub provider: String,
    pub total_servers: u32,
    /// Per-class slice sizes. Left empty in a config to have them solved from
    /// the revealed rates when the context is prepared.
    #[serde(default)]
    pub servers: Vec<f64>,
    /// Per-class round-trip latency to the cloudlet's users (seconds).
    pub user_latency: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Topology {
    /// Inter-cloudlet latency t_ij (seconds), symmetric with zero diagonal.
    pub latency: Vec<Vec<f64>>,
    /// Link bandwidth B_ij (bits/s).
    pub bandwidth: Vec<Vec<f64>>,
}

/// Price factors, all in cost per unit load λ/(nμ).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prices {
    /// Ω1 indexed `[i][m]`.
    pub revenue: Vec<Vec<f64>>,
    /// Ω2 indexed `[i][j][m]`: paid by i for offloading to j.
    pub offload: Vec<Vec<Vec<f64>>>,
    /// Ω3 indexed `[i][m]`.
    pub latency_penalty: Vec<Vec<f64>>,
    /// Ω4 indexed `[i][m]`.
    pub mediator_penalty: Vec<Vec<f64>>,
}

impl Prices {
    pub fn uniform(n: usize, m: usize, revenue: f64, offload: f64, latency: f64, mediator: f64) -> Self {
        Prices {
            revenue: vec![vec![revenue; m]; n],
            offload: vec![vec![vec![offload; m]; n]; n],
            latency_penalty: vec![vec![latency; m]; n],
            mediator_penalty: vec![vec![mediator; m]; n],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Arrivals {
    /// True rates λ indexed `[i][m]` (jobs/s).
    pub rates: Vec<Vec<f64>>,
    /// Rates revealed to the mediator; defaults to the true rates.
    #[serde(default)]
    pub revealed: Vec<Vec<f64>>,
    /// Upper end of each rate's support.
    pub max: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RateBasis {
    True,
    Revealed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LoadState {
    UnderLoaded,
    OverLoaded,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GameContext {
    pub cloudlets: Vec<Cloudlet>,
    pub classes: Vec<JobClass>,
    pub topology: Topology,
    pub prices: Prices,
    pub arrivals: Arrivals,
    /// Base timeslot D_Q (seconds).
    pub slot: f64,
    /// Planning interval τ (seconds).
    pub interval: f64,
    #[serde(default)]
    pub default_utility: Vec<f64>,
}

/// Per-class offload fractions, indexed `[m][i][j]`; the diagonal holds the
/// retained fraction so every row sums to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OffloadMatrix {
    pub classes: Vec<Vec<Vec<f64>>>,
}

impl OffloadMatrix {
    pub fn identity(n: usize, m: usize) -> Self {
        let eye: Vec<Vec<f64>> =
            (0..n).map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
        OffloadMatrix { classes: vec![eye; m] }
    }

    pub fn get(&self, m: usize, i: usize, j: usize) -> f64 {
        self.classes[m][i][j]
    }

    /// Total fraction of i's class-m traffic sent elsewhere.
    pub fn offloaded(&self, m: usize, i: usize) -> f64 {
        self.classes[m][i].iter().enumerate().filter(|&(j, _)| j != i).map(|(_, v)| v).sum()
    }

    /// Sets φ_ij and rebalances the diagonal.
    pub fn set(&mut self, m: usize, i: usize, j: usize, value: f64) {
        debug_assert!(i != j);
        self.classes[m][i][j] = value;
        self.classes[m][i][i] = 1.0 - self.offloaded(m, i);
    }

    /// Replaces the off-diagonal part of row i; `row[i]` is ignored.
    pub fn set_row(&mut self, m: usize, i: usize, row: &[f64]) {
        for (j, &v) in row.iter().enumerate() {
            if j != i {
                self.classes[m][i][j] = v;
            }
        }
        self.classes[m][i][i] = 1.0 - self.offloaded(m, i);
    }

    pub fn validate(&self, n: usize, m: usize) -> Result<(), GameError> {
        if self.classes.len() != m {
            return Err(config_err("strategies", format!("expected {m} classes")));
        }
        for (c, mat) in self.classes.iter().enumerate() {
            if mat.len() != n {
                return Err(config_err(format!("strategies[{c}]"), format!("expected {n} rows")));
            }
            for (i, row) in mat.iter().enumerate() {
                if row.len() != n {
                    return Err(config_err(format!("strategies[{c}][{i}]"), format!("expected {n} entries")));
                }
                if row.iter().any(|v| !(-1e-12..=1.0 + 1e-12).contains(v)) {
                    return Err(config_err(format!("strategies[{c}][{i}]"), "entries must lie in [0,1]"));
                }
                let s: f64 = row.iter().sum();
                if (s - 1.0).abs() > 1e-9 {
                    return Err(config_err(format!("strategies[{c}][{i}]"), format!("row sums to {s}")));
                }
            }
        }
        Ok(())
    }
}

fn check_matrix(path: &str, v: &[Vec<f64>], rows: usize, cols: usize) -> Result<(), GameError> {
    if v.len() != rows {
        return Err(config_err(path, format!("expected {rows} rows, got {}", v.len())));
    }
    for (i, r) in v.iter().enumerate() {
        if r.len() != cols {
            return Err(config_err(format!("{path}[{i}]"), format!("expected {cols} entries, got {}", r.len())));
        }
        if let Some(k) = r.iter().position(|x| !x.is_finite() || *x < 0.0) {
            return Err(config_err(format!("{path}[{i}][{k}]"), "must be finite and >= 0"));
        }
    }
    Ok(())
}

impl GameContext {
    pub fn n(&self) -> usize {
        self.cloudlets.len()
    }

    pub fn m(&self) -> usize {
        self.classes.len()
    }

    /// QoS target D_Qm of class m (seconds).
    pub fn qos(&self, m: usize) -> f64 {
        self.classes[m].slot_multiple as f64 * self.slot
    }

    pub fn pool(&self, i: usize, m: usize) -> ServerPool {
        ServerPool { servers: self.cloudlets[i].servers[m], service_rate: self.classes[m].service_rate }
    }

    pub fn capacity(&self, i: usize, m: usize) -> f64 {
        self.pool(i, m).capacity()
    }

    pub fn user_latency(&self, i: usize, m: usize) -> f64 {
        self.cloudlets[i].user_latency[m]
    }

    /// γ_ij: 1 when i and j belong to different providers.
    pub fn gamma(&self, i: usize, j: usize) -> f64 {
        if i != j && self.cloudlets[i].provider != self.cloudlets[j].provider {
            1.0
        } else {
            0.0
        }
    }

    pub fn rates(&self, basis: RateBasis) -> &Vec<Vec<f64>> {
        match basis {
            RateBasis::True => &self.arrivals.rates,
            RateBasis::Revealed => &self.arrivals.revealed,
        }
    }

    /// Mean sojourn at slice (i, m) for a given rate, with the unstable sentinel.
    pub fn latency(&self, i: usize, m: usize, rate: f64) -> f64 {
        latency_or_sentinel(self.pool(i, m), rate)
    }

    /// A copy whose true and revealed rates are both `rates`.
    pub fn with_rates(&self, rates: Vec<Vec<f64>>) -> Self {
        let mut ctx = self.clone();
        ctx.arrivals.revealed = rates.clone();
        ctx.arrivals.rates = rates;
        ctx
    }

    /// Fills defaults (revealed rates, default utilities, missing slices) and
    /// validates every invariant.
    pub fn prepare(mut self) -> Result<Self, GameError> {
        if self.arrivals.revealed.is_empty() {
            self.arrivals.revealed = self.arrivals.rates.clone();
        }
        if self.default_utility.is_empty() {
            self.default_utility = vec![0.0; self.cloudlets.len()];
        }
        self.validate_shape()?;
        if self.cloudlets.iter().any(|c| c.servers.is_empty()) {
            self.reslice(RateBasis::Revealed)?;
        }
        self.validate()?;
        Ok(self)
    }

    /// Re-solves every cloudlet's slicing on the chosen rates.
    pub fn reslice(&mut self, basis: RateBasis) -> Result<(), GameError> {
        let rates = self.rates(basis).clone();
        for i in 0..self.n() {
            let loads: Vec<ClassLoad> = (0..self.m())
                .map(|m| ClassLoad {
                    service_rate: self.classes[m].service_rate,
                    arrival_rate: rates[i][m],
                    qos: self.qos(m),
                    user_latency: self.cloudlets[i].user_latency[m],
                })
                .collect();
            let alloc = solve_slicing(self.cloudlets[i].total_servers, &loads)?;
            self.cloudlets[i].servers = alloc.servers;
        }
        Ok(())
    }

    fn validate_shape(&self) -> Result<(), GameError> {
        let (n, m) = (self.n(), self.m());
        if n < 2 {
            return Err(config_err("cloudlets", "at least two cloudlets are required"));
        }
        if m < 1 {
            return Err(config_err("classes", "at least one job class is required"));
        }
        for (k, c) in self.classes.iter().enumerate() {
            if !(c.service_rate > 0.0) {
                return Err(config_err(format!("classes[{k}].service_rate"), "must be > 0"));
            }
            if c.slot_multiple < 1 {
                return Err(config_err(format!("classes[{k}].slot_multiple"), "must be >= 1"));
            }
            if !(c.bits_per_job > 0.0) {
                return Err(config_err(format!("classes[{k}].bits_per_job"), "must be > 0"));
            }
        }
        for (i, c) in self.cloudlets.iter().enumerate() {
            if (c.total_servers as usize) < m {
                return Err(config_err(
                    format!("cloudlets[{i}].total_servers"),
                    format!("needs at least one server per class ({m})"),
                ));
            }
            check_matrix(&format!("cloudlets[{i}].user_latency"), std::slice::from_ref(&c.user_latency), 1, m)?;
        }
        check_matrix("topology.latency", &self.topology.latency, n, n)?;
        check_matrix("topology.bandwidth", &self.topology.bandwidth, n, n)?;
        for i in 0..n {
            if self.topology.latency[i][i] != 0.0 {
                return Err(config_err(format!("topology.latency[{i}][{i}]"), "diagonal must be zero"));
            }
            for j in 0..n {
                if self.topology.latency[i][j] != self.topology.latency[j][i] {
                    return Err(config_err(format!("topology.latency[{i}][{j}]"), "must be symmetric"));
                }
                if i != j && !(self.topology.bandwidth[i][j] > 0.0) {
                    return Err(config_err(format!("topology.bandwidth[{i}][{j}]"), "must be > 0"));
                }
            }
        }
        check_matrix("prices.revenue", &self.prices.revenue, n, m)?;
        check_matrix("prices.latency_penalty", &self.prices.latency_penalty, n, m)?;
        check_matrix("prices.mediator_penalty", &self.prices.mediator_penalty, n, m)?;
        if self.prices.offload.len() != n {
            return Err(config_err("prices.offload", format!("expected {n} rows")));
        }
        for (i, row) in self.prices.offload.iter().enumerate() {
            check_matrix(&format!("prices.offload[{i}]"), row, n, m)?;
        }
        check_matrix("arrivals.rates", &self.arrivals.rates, n, m)?;
        check_matrix("arrivals.revealed", &self.arrivals.revealed, n, m)?;
        check_matrix("arrivals.max", &self.arrivals.max, n, m)?;
        for i in 0..n {
            for k in 0..m {
                let cap = self.arrivals.max[i][k];
                if self.arrivals.rates[i][k] > cap || self.arrivals.revealed[i][k] > cap {
                    return Err(config_err(format!("arrivals.rates[{i}][{k}]"), "exceeds arrivals.max"));
                }
            }
        }
        if !(self.slot > 0.0) {
            return Err(config_err("slot", "must be > 0"));
        }
        for (k, c) in self.classes.iter().enumerate() {
            let ratio = self.interval / (c.slot_multiple as f64 * self.slot);
            if !(ratio >= 1.0) || (ratio - ratio.round()).abs() > 1e-6 {
                return Err(config_err(
                    "interval",
                    format!("must be an integer multiple of class {k}'s QoS target"),
                ));
            }
        }
        if self.default_utility.len() != n {
            return Err(config_err("default_utility", format!("expected {n} entries")));
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), GameError> {
        self.validate_shape()?;
        for (i, c) in self.cloudlets.iter().enumerate() {
            if c.servers.len() != self.m() {
                return Err(config_err(format!("cloudlets[{i}].servers"), format!("expected {} entries", self.m())));
            }
            if c.servers.iter().any(|&s| !(s >= 1.0 - 1e-9)) {
                return Err(config_err(format!("cloudlets[{i}].servers"), "every slice needs >= 1 server"));
            }
            let total: f64 = c.servers.iter().sum();
            if (total - c.total_servers as f64).abs() > 1e-6 {
                return Err(config_err(
                    format!("cloudlets[{i}].servers"),
                    format!("slices sum to {total}, expected {}", c.total_servers),
                ));
            }
        }
        Ok(())
    }
}

/// λ̄_im: retained own traffic plus traffic received from neighbours.
pub fn aggregate_arrival(ctx: &GameContext, phi: &OffloadMatrix, i: usize, m: usize, basis: RateBasis) -> f64 {
    let rates = ctx.rates(basis);
    let mut total = (1.0 - phi.offloaded(m, i)) * rates[i][m];
    for j in 0..ctx.n() {
        if j != i {
            total += phi.get(m, j, i) * rates[j][m];
        }
    }
    total.max(0.0)
}

pub fn classify_load(ctx: &GameContext, i: usize, m: usize, rate: f64) -> LoadState {
    if ctx.user_latency(i, m) + ctx.latency(i, m, rate) >= ctx.qos(m) {
        LoadState::OverLoaded
    } else {
        LoadState::UnderLoaded
    }
}

/// The four components of a cloudlet's utility for one class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct UtilityTerms {
    pub revenue: f64,
    pub received: f64,
    pub paid: f64,
    pub penalty: f64,
}

impl UtilityTerms {
    pub fn total(&self) -> f64 {
        self.revenue + self.received - self.paid - self.penalty
    }
}

pub fn class_utility_terms(
    ctx: &GameContext,
    phi: &OffloadMatrix,
    i: usize,
    m: usize,
    basis: RateBasis,
) -> UtilityTerms {
    let rates = ctx.rates(basis);
    let cap_i = ctx.capacity(i, m);
    let qos = ctx.qos(m);
    let lam_i = rates[i][m];
    let load = aggregate_arrival(ctx, phi, i, m, basis);
    let t_i = ctx.latency(i, m, load);
    let p = &ctx.prices;

    let mut terms = UtilityTerms { revenue: p.revenue[i][m] * lam_i / cap_i, ..Default::default() };
    let retained = 1.0 - phi.offloaded(m, i);
    let mut hinge = retained * lam_i / cap_i * (ctx.user_latency(i, m) + t_i - qos).max(0.0);
    for j in 0..ctx.n() {
        if j == i {
            continue;
        }
        let inbound = phi.get(m, j, i) * rates[j][m];
        terms.received += p.offload[j][i][m] * ctx.gamma(j, i) * inbound / cap_i;
        let outbound = phi.get(m, i, j) * lam_i;
        terms.paid += p.offload[i][j][m] * ctx.gamma(i, j) * outbound / ctx.capacity(j, m);
        if inbound > 0.0 {
            let late = ctx.user_latency(j, m) + t_i + ctx.topology.latency[j][i] - qos;
            hinge += inbound / cap_i * late.max(0.0);
        }
    }
    terms.penalty = p.latency_penalty[i][m] * hinge;
    terms
}

pub fn class_utility(ctx: &GameContext, phi: &OffloadMatrix, i: usize, m: usize, basis: RateBasis) -> f64 {
    class_utility_terms(ctx, phi, i, m, basis).total()
}

/// Cloudlet i's utility summed over classes.
pub fn utility(ctx: &GameContext, phi: &OffloadMatrix, i: usize, basis: RateBasis) -> f64 {
    (0..ctx.m()).map(|m| class_utility(ctx, phi, i, m, basis)).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandwidthViolation {
    pub from: usize,
    pub to: usize,
    pub demand: f64,
    pub capacity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandwidthReport {
    pub feasible: bool,
    pub violations: Vec<BandwidthViolation>,
}

/// Bits/s that i pushes to j across all classes.
pub fn link_demand(ctx: &GameContext, phi: &OffloadMatrix, i: usize, j: usize, basis: RateBasis) -> f64 {
    let rates = ctx.rates(basis);
    (0..ctx.m()).map(|m| ctx.classes[m].bits_per_job * phi.get(m, i, j) * rates[i][m]).sum()
}

pub fn bandwidth_feasible(ctx: &GameContext, phi: &OffloadMatrix) -> BandwidthReport {
    let mut violations = Vec::new();
    for i in 0..ctx.n() {
        for j in 0..ctx.n() {
            if i == j {
                continue;
            }
            let demand = link_demand(ctx, phi, i, j, RateBasis::True);
            let capacity = ctx.topology.bandwidth[i][j];
            if demand > capacity * (1.0 + 1e-12) {
                violations.push(BandwidthViolation { from: i, to: j, demand, capacity });
            }
        }
    }
    BandwidthReport { feasible: violations.is_empty(), violations }
}

/// Largest Ω1, Ω2 or Ω3 that applies to cloudlet i over all classes and neighbours.
pub fn reward_normalizer(ctx: &GameContext, i: usize) -> f64 {
    let p = &ctx.prices;
    let mut best = 0.0f64;
    for m in 0..ctx.m() {
        best = best.max(p.revenue[i][m]).max(p.latency_penalty[i][m]);
        for j in 0..ctx.n() {
            if j != i {
                best = best.max(p.offload[i][j][m]);
            }
        }
    }
    best
}

/// Utility scaled by the price normalizer and clamped to [0, 1].
pub fn reward(ctx: &GameContext, i: usize, utility_value: f64) -> f64 {
    let norm = reward_normalizer(ctx, i);
    if norm <= 0.0 {
        return 0.0;
    }
    (utility_value / norm).clamp(0.0, 1.0)
}

/// Samples cloudlet i's utility along `base + t·direction` (t ∈ [0, 1]) in
/// i's class-m offload fractions and reports whether the sequence is
/// unimodal, i.e. never rises again after it has started to fall.
pub fn quasiconcavity_probe(
    ctx: &GameContext,
    base: &OffloadMatrix,
    i: usize,
    m: usize,
    direction: &[f64],
    samples: usize,
) -> bool {
    let samples = samples.max(2);
    let mut phi = base.clone();
    let start: Vec<f64> = base.classes[m][i].clone();
    let values: Vec<f64> = (0..samples)
        .map(|k| {
            let t = k as f64 / (samples - 1) as f64;
            let row: Vec<f64> = start.iter().zip(direction).map(|(s, d)| s + t * d).collect();
            phi.set_row(m, i, &row);
            utility(ctx, &phi, i, RateBasis::True)
        })
        .collect();
    is_unimodal(&values, 1e-9)
}

pub(crate) fn is_unimodal(values: &[f64], tol: f64) -> bool {
    let mut falling = false;
    for w in values.windows(2) {
        let scale = 1.0f64.max(w[0].abs()).max(w[1].abs());
        let diff = w[1] - w[0];
        if diff < -tol * scale {
            falling = true;
        } else if diff > tol * scale && falling {
            return false;
        }
    }
    true
}
