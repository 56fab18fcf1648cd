//! Per-cloudlet processor slicing: split n servers across job classes so the
//! worst latency slack `t_u + T − D` is as small as possible.
//!
//! Solved exactly by bisection on the epigraph level Z. For a given Z each
//! class needs the smallest server count whose slack is at most Z (found by a
//! second bisection, since latency is decreasing in the server count), and Z
//! is feasible when those counts fit in the budget.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::queueing::{latency_or_sentinel, ServerPool, STABILITY_MARGIN, UNSTABLE_LATENCY};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SlicingError {
    #[error("infeasible: {total} servers cannot give each of {classes} classes one server")]
    Infeasible { total: u32, classes: usize },
    #[error("domain error: {0}")]
    Domain(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassLoad {
    pub service_rate: f64,
    pub arrival_rate: f64,
    pub qos: f64,
    pub user_latency: f64,
}

impl ClassLoad {
    pub fn slack(&self, servers: f64) -> f64 {
        let t = latency_or_sentinel(ServerPool { servers, service_rate: self.service_rate }, self.arrival_rate);
        if t >= UNSTABLE_LATENCY {
            return UNSTABLE_LATENCY;
        }
        self.user_latency + t - self.qos
    }

    /// Smallest server count (>= 1) that keeps the class stable.
    fn min_stable(&self) -> f64 {
        let base = self.arrival_rate / (self.service_rate * (1.0 - STABILITY_MARGIN));
        (base * (1.0 + 1e-9) + 1e-12).max(1.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceAllocation {
    /// Servers per class; each >= 1 and summing to the cloudlet total.
    pub servers: Vec<f64>,
    /// Per-class slack `t_u + T − D` (seconds); unstable classes carry the sentinel.
    pub slack: Vec<f64>,
    /// Worst slack Z over all classes.
    pub worst_slack: f64,
    /// Classes that could not be stabilised and were left with one server.
    pub unstable: Vec<usize>,
}

const OUTER_ITERS: usize = 200;
const INNER_ITERS: usize = 100;

pub fn solve_slicing(total_servers: u32, classes: &[ClassLoad]) -> Result<SliceAllocation, SlicingError> {
    let m = classes.len();
    if m == 0 || (total_servers as usize) < m {
        return Err(SlicingError::Infeasible { total: total_servers, classes: m });
    }
    for (k, c) in classes.iter().enumerate() {
        if !(c.arrival_rate >= 0.0) || !c.arrival_rate.is_finite() {
            return Err(SlicingError::Domain(format!("class {k}: arrival rate must be >= 0")));
        }
        if !(c.service_rate > 0.0) || !c.service_rate.is_finite() {
            return Err(SlicingError::Domain(format!("class {k}: service rate must be > 0")));
        }
        if !c.qos.is_finite() || !c.user_latency.is_finite() || c.user_latency < 0.0 {
            return Err(SlicingError::Domain(format!("class {k}: latencies must be finite")));
        }
    }
    let total = total_servers as f64;

    // Give up on the classes that are hardest to stabilise until the others fit.
    let mut active: Vec<usize> = (0..m).collect();
    let mut unstable = Vec::new();
    loop {
        let need: f64 = active.iter().map(|&k| classes[k].min_stable()).sum();
        let budget = total - unstable.len() as f64;
        if need < budget || active.is_empty() {
            break;
        }
        let (pos, _) = active
            .iter()
            .enumerate()
            .max_by(|a, b| {
                let (ra, rb) = (classes[*a.1].min_stable(), classes[*b.1].min_stable());
                ra.total_cmp(&rb).then(b.1.cmp(a.1))
            })
            .expect("non-empty");
        unstable.push(active.remove(pos));
    }
    unstable.sort_unstable();

    let mut servers = vec![1.0; m];
    if !active.is_empty() {
        let budget = total - unstable.len() as f64;
        let alloc = solve_active(budget, &active.iter().map(|&k| classes[k]).collect::<Vec<_>>());
        for (pos, &k) in active.iter().enumerate() {
            servers[k] = alloc[pos];
        }
    } else if let Some(last) = servers.last_mut() {
        *last += total - m as f64;
    }

    let slack: Vec<f64> = classes.iter().zip(&servers).map(|(c, &n)| c.slack(n)).collect();
    let worst_slack = slack.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Ok(SliceAllocation { servers, slack, worst_slack, unstable })
}

/// Min-max allocation of `budget` servers over classes that can all be stabilised.
fn solve_active(budget: f64, classes: &[ClassLoad]) -> Vec<f64> {
    let k = classes.len();
    if k == 1 {
        return vec![budget];
    }
    let max_each = budget - (k - 1) as f64;

    // Lower bound: every class alone with its largest possible share.
    let mut lo = classes.iter().map(|c| c.slack(max_each)).fold(f64::NEG_INFINITY, f64::max);
    // Upper bound: spread the spare capacity evenly above the stability floor.
    let floors: Vec<f64> = classes.iter().map(|c| c.min_stable()).collect();
    let spare = (budget - floors.iter().sum::<f64>()) / k as f64;
    let mut hi = classes
        .iter()
        .zip(&floors)
        .map(|(c, f)| c.slack(f + spare))
        .fold(f64::NEG_INFINITY, f64::max);

    let fits = |z: f64| -> Option<Vec<f64>> {
        let mut used = 0.0;
        let mut out = Vec::with_capacity(k);
        for c in classes {
            let n = servers_needed(c, z, max_each)?;
            used += n;
            out.push(n);
        }
        (used <= budget * (1.0 + 1e-15)).then_some(out)
    };

    let mut best = fits(hi).unwrap_or_else(|| floors.iter().map(|f| f + spare).collect());
    if let Some(alloc) = fits(lo) {
        best = alloc;
    } else {
        for _ in 0..OUTER_ITERS {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            match fits(mid) {
                Some(alloc) => {
                    hi = mid;
                    best = alloc;
                }
                None => lo = mid,
            }
        }
    }

    // Hand any leftover to the last class, keeping the allocation lexicographically smallest.
    let used: f64 = best.iter().sum();
    if let Some(last) = best.last_mut() {
        *last += budget - used;
    }
    best
}

/// Smallest n in [1, max] with slack(n) <= z, or None when even `max` falls short.
fn servers_needed(class: &ClassLoad, z: f64, max: f64) -> Option<f64> {
    if class.slack(1.0) <= z {
        return Some(1.0);
    }
    if class.slack(max) > z {
        return None;
    }
    let mut lo = class.min_stable().min(max).max(1.0);
    let mut hi = max;
    for _ in 0..INNER_ITERS {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if class.slack(mid) <= z {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Some(hi)
}
