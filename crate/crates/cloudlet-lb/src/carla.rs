//! Decentralized learning of the offload game with continuous-action
//! learning automata. Every overloaded cloudlet keeps one density per
//! (neighbour, class) over offload fractions in [0, 1], samples an action,
//! and reinforces the neighbourhood of that action by the change in reward.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::game::{classify_load, reward, utility, GameContext, LoadState, OffloadMatrix, RateBasis};
use crate::mechanism::compute_aleph_with_entry;

#[derive(Debug, Error, PartialEq)]
pub enum LearningError {
    #[error("invalid learning config: {0}")]
    Config(String),
}

/// A density over [0, 1] stored on `L` equal bins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixedStrategy {
    pub density: Vec<f64>,
}

impl MixedStrategy {
    pub fn bins(&self) -> usize {
        self.density.len()
    }

    pub fn width(&self) -> f64 {
        1.0 / self.density.len() as f64
    }

    pub fn center(&self, k: usize) -> f64 {
        (k as f64 + 0.5) * self.width()
    }

    pub fn mass(&self) -> f64 {
        self.density.iter().sum::<f64>() * self.width()
    }

    pub fn peak(&self) -> f64 {
        self.density.iter().cloned().fold(0.0, f64::max)
    }

    /// Probability of [lo, hi], counting whole bins whose centre lies inside.
    pub fn mass_between(&self, lo: f64, hi: f64) -> f64 {
        (0..self.bins())
            .filter(|&k| (lo..=hi).contains(&self.center(k)))
            .map(|k| self.density[k])
            .sum::<f64>()
            * self.width()
    }

    /// Centre of the heaviest bin.
    pub fn mode(&self) -> f64 {
        let k = (0..self.bins()).fold(0, |best, k| if self.density[k] > self.density[best] { k } else { best });
        self.center(k)
    }
}

pub fn init_strategy(bins: usize) -> MixedStrategy {
    MixedStrategy { density: vec![1.0; bins.max(2)] }
}

/// Inverse-CDF draw from the density truncated to [0, upper], uniform inside
/// the chosen bin. Falls back to a uniform draw when the truncated mass is 0.
pub fn sample_action<R: Rng>(strategy: &MixedStrategy, upper: f64, rng: &mut R) -> f64 {
    let upper = upper.clamp(0.0, 1.0);
    if upper <= 0.0 {
        return 0.0;
    }
    let w = strategy.width();
    let last = ((upper / w).ceil() as usize).min(strategy.bins());
    let weight = |k: usize| {
        let lo = k as f64 * w;
        strategy.density[k] * ((upper - lo).min(w)).max(0.0)
    };
    let total: f64 = (0..last).map(weight).sum();
    let u: f64 = rng.random();
    if total <= 0.0 {
        return u * upper;
    }
    let mut target = u * total;
    for k in 0..last {
        let wk = weight(k);
        if target < wk || k + 1 == last {
            let lo = k as f64 * w;
            let span = (upper - lo).min(w);
            let frac = if wk > 0.0 { (target / wk).clamp(0.0, 1.0) } else { 0.5 };
            return (lo + frac * span).min(upper);
        }
        target -= wk;
    }
    upper
}

/// One reinforcement step: add a Gaussian bump at `action` scaled by
/// `theta * (reward_now - reward_prev)`, clip at 0 and renormalize.
/// Returns `true` when every bin was clipped and the density was reset to
/// uniform.
pub fn update_pdf(
    strategy: &mut MixedStrategy,
    action: f64,
    reward_now: f64,
    reward_prev: f64,
    theta: f64,
    sigma: f64,
) -> bool {
    let diff = reward_now - reward_prev;
    if diff == 0.0 {
        return false;
    }
    let scale = theta * diff;
    let reach = 8.0 * sigma;
    for k in 0..strategy.bins() {
        let x = strategy.center(k);
        if (x - action).abs() > reach {
            continue;
        }
        let z = (x - action) / sigma;
        strategy.density[k] = (strategy.density[k] + scale * (-0.5 * z * z).exp()).max(0.0);
    }
    let mass = strategy.mass();
    if mass <= 0.0 || !mass.is_finite() {
        *strategy = init_strategy(strategy.bins());
        return true;
    }
    let chi = 1.0 / mass;
    for d in &mut strategy.density {
        *d *= chi;
    }
    false
}

/// Upper bound on the equilibrium density peak: 1/(σ√2π) above the initial
/// uniform level.
pub fn peak_bound(sigma: f64) -> f64 {
    1.0 / (sigma * (2.0 * std::f64::consts::PI).sqrt()) + 1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearningConfig {
    pub theta: f64,
    pub sigma: f64,
    pub bins: usize,
    pub seed: u64,
    pub iterations: usize,
    /// Seconds the arrival rates stay fixed; with slot length it sets the
    /// iteration count of sweeps over stationarity.
    pub stationarity: f64,
}

impl Default for LearningConfig {
    fn default() -> Self {
        LearningConfig { theta: 0.9, sigma: 0.01, bins: 1000, seed: 7, iterations: 500, stationarity: 1.0 }
    }
}

impl LearningConfig {
    pub fn validate(&self) -> Result<(), LearningError> {
        if !(self.theta > 0.0 && self.theta.is_finite()) {
            return Err(LearningError::Config(format!("theta must be > 0, got {}", self.theta)));
        }
        if !(self.sigma > 0.0 && self.sigma < 1.0) {
            return Err(LearningError::Config(format!("sigma must lie in (0, 1), got {}", self.sigma)));
        }
        if self.bins < 64 {
            return Err(LearningError::Config(format!("bins must be >= 64, got {}", self.bins)));
        }
        Ok(())
    }

    /// Iterations that fit in one stationarity period of `slot` seconds.
    pub fn iterations_for_stationarity(&self, slot: f64) -> usize {
        ((self.stationarity / slot).round() as usize).max(1)
    }

    /// Convergence restrictions, reported rather than enforced.
    pub fn restrictions(&self) -> Restrictions {
        // A full-scale loss at the centre of a uniform density must not need
        // clipping, otherwise one bad draw erases the neighbourhood.
        let mut probe = init_strategy(self.bins);
        let before = probe.mass_between(0.5 - 3.0 * self.sigma, 0.5 + 3.0 * self.sigma);
        let raw_min = 1.0 - self.theta;
        update_pdf(&mut probe, 0.5, 1.0, 0.0, self.theta, self.sigma);
        let after = probe.mass_between(0.5 - 3.0 * self.sigma, 0.5 + 3.0 * self.sigma);
        Restrictions {
            theta_small: raw_min >= 0.0 && after > before,
            peak_bound: peak_bound(self.sigma),
            peak_bound_above_uniform: peak_bound(self.sigma) > 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Restrictions {
    pub theta_small: bool,
    pub peak_bound: f64,
    pub peak_bound_above_uniform: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    /// Sampled offload fractions `[m][i][j]`.
    pub actions: Vec<Vec<Vec<f64>>>,
    /// Fractions the receivers actually processed `[m][i][j]`.
    pub processed: Vec<Vec<Vec<f64>>>,
    pub rewards: Vec<f64>,
    pub utilities: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeTrace {
    pub records: Vec<IterationRecord>,
    /// Final densities `[i][m][j]`; entries for i = j are untouched.
    pub densities: Vec<Vec<Vec<MixedStrategy>>>,
    pub resets: usize,
    /// Largest density peak seen after any update.
    pub max_peak: f64,
    /// Iterations at which a density broke normalization, sign or peak bound.
    pub invariant_failures: Vec<usize>,
}

/// Largest offload fraction worth exploring: the share that brings i's own
/// latency down to D, or 0 when i already meets it.
pub fn search_bound(ctx: &GameContext, i: usize, m: usize) -> f64 {
    let lam = ctx.arrivals.rates[i][m];
    if lam <= 0.0 || classify_load(ctx, i, m, lam) == LoadState::UnderLoaded {
        return 0.0;
    }
    let room = compute_aleph_with_entry(ctx, i, m, 0.0, ctx.user_latency(i, m));
    ((lam - room) / lam).clamp(0.0, 1.0)
}

/// Receivers process incoming traffic up to their room at D and share it in
/// proportion to what each sender asked for. Returns processed fractions.
pub fn receiver_feedback(ctx: &GameContext, phi: &OffloadMatrix) -> Vec<Vec<Vec<f64>>> {
    let n = ctx.n();
    let lam = &ctx.arrivals.rates;
    let mut processed = phi.classes.clone();
    for m in 0..ctx.m() {
        for j in 0..n {
            let incoming: f64 = (0..n).filter(|&k| k != j).map(|k| phi.get(m, k, j) * lam[k][m]).sum();
            if incoming <= 0.0 {
                continue;
            }
            let retained = phi.get(m, j, j) * lam[j][m];
            let entry = (0..n)
                .filter(|&k| k != j && phi.get(m, k, j) > 0.0)
                .map(|k| ctx.user_latency(k, m) + ctx.topology.latency[k][j])
                .fold(if retained > 0.0 { ctx.user_latency(j, m) } else { 0.0 }, f64::max);
            let room = compute_aleph_with_entry(ctx, j, m, 0.0, entry);
            let residual = (room - retained).max(0.0);
            if incoming > residual {
                let share = residual / incoming;
                for k in (0..n).filter(|&k| k != j) {
                    processed[m][k][j] = phi.get(m, k, j) * share;
                }
            }
        }
        // Whatever a receiver turns away stays with its sender.
        for i in 0..n {
            let out: f64 = (0..n).filter(|&j| j != i).map(|j| processed[m][i][j]).sum();
            processed[m][i][i] = 1.0 - out;
        }
    }
    processed
}

fn densities_ok(s: &MixedStrategy, bound: f64) -> bool {
    (s.mass() - 1.0).abs() <= 1e-9 && s.density.iter().all(|&d| d >= 0.0) && s.peak() <= bound
}

/// Runs the learning loop on fixed slices and rates.
pub fn run_learning(ctx: &GameContext, config: &LearningConfig) -> Result<EpisodeTrace, LearningError> {
    config.validate()?;
    let (n, mm) = (ctx.n(), ctx.m());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut densities = vec![vec![vec![init_strategy(config.bins); n]; mm]; n];
    let bounds: Vec<Vec<f64>> = (0..n).map(|i| (0..mm).map(|m| search_bound(ctx, i, m)).collect()).collect();
    let explores: Vec<bool> = bounds.iter().map(|b| b.iter().any(|&x| x > 0.0)).collect();
    let bound = peak_bound(config.sigma);
    let mut prev_reward = vec![0.0; n];
    let mut records = Vec::with_capacity(config.iterations);
    let mut resets = 0;
    let mut max_peak = 1.0f64;
    let mut invariant_failures = Vec::new();

    for it in 0..config.iterations {
        let mut phi = OffloadMatrix::identity(n, mm);
        for i in 0..n {
            for m in 0..mm {
                let b = bounds[i][m];
                if b <= 0.0 {
                    continue;
                }
                let mut row: Vec<f64> =
                    (0..n).map(|j| if j == i { 0.0 } else { sample_action(&densities[i][m][j], b, &mut rng) }).collect();
                let total: f64 = row.iter().sum();
                if total > b {
                    row.iter_mut().for_each(|x| *x *= b / total);
                }
                phi.set_row(m, i, &row);
            }
        }
        let processed = receiver_feedback(ctx, &phi);
        let realized = OffloadMatrix { classes: processed.clone() };
        let utilities: Vec<f64> = (0..n).map(|i| utility(ctx, &realized, i, RateBasis::True)).collect();
        let rewards: Vec<f64> = (0..n).map(|i| reward(ctx, i, utilities[i])).collect();

        let mut broken = false;
        for i in (0..n).filter(|&i| explores[i]) {
            for m in (0..mm).filter(|&m| bounds[i][m] > 0.0) {
                for j in (0..n).filter(|&j| j != i) {
                    // Feedback replaces the action when the receiver cut it back.
                    let played = processed[m][i][j].min(phi.get(m, i, j));
                    let s = &mut densities[i][m][j];
                    if update_pdf(s, played, rewards[i], prev_reward[i], config.theta, config.sigma) {
                        resets += 1;
                    }
                    max_peak = max_peak.max(s.peak());
                    broken |= !densities_ok(s, bound);
                }
            }
            prev_reward[i] = rewards[i];
        }
        if broken {
            invariant_failures.push(it);
        }
        records.push(IterationRecord { iteration: it, actions: phi.classes, processed, rewards, utilities });
    }
    Ok(EpisodeTrace { records, densities, resets, max_peak, invariant_failures })
}

/// Mean utility of each cloudlet over the last 10% of iterations.
pub fn steady_state_utilities(trace: &EpisodeTrace) -> Vec<f64> {
    let len = trace.records.len();
    if len == 0 {
        return vec![];
    }
    let tail = (len / 10).max(1);
    let recs = &trace.records[len - tail..];
    let n = recs[0].utilities.len();
    (0..n).map(|i| recs.iter().map(|r| r.utilities[i]).sum::<f64>() / tail as f64).collect()
}

/// Percentage agreement between learned steady-state utilities and the NE
/// utilities, averaged over cloudlets. A zero NE utility counts as a full
/// match when the learned one is within 1e-9.
pub fn accuracy(trace: &EpisodeTrace, ne_utilities: &[f64]) -> f64 {
    let learned = steady_state_utilities(trace);
    if learned.is_empty() {
        return 0.0;
    }
    let scores: Vec<f64> = learned
        .iter()
        .zip(ne_utilities)
        .map(|(&u, &ne)| {
            if ne.abs() <= 1e-9 {
                if u.abs() <= 1e-9 { 100.0 } else { 0.0 }
            } else {
                (100.0 * (1.0 - (u - ne).abs() / ne.abs())).max(0.0)
            }
        })
        .collect();
    scores.iter().sum::<f64>() / scores.len() as f64
}
