//! Ready-made game contexts: the two-cloudlet reference pair, the
//! three-cloudlet two-class federation, and a random instance generator.

use rand::Rng;

use crate::game::{Arrivals, Cloudlet, GameContext, JobClass, Prices, Topology};
use crate::ne_solver::{dispatch_case, CaseLabel};

/// Reference prices: revenue, offload, latency penalty, mediator penalty.
pub const REFERENCE_PRICES: [f64; 4] = [5e3, 3e4, 9e4, 6e3];

/// Two cloudlets of different providers, one class, `servers` servers each
/// sharing a pooled capacity of 1000 jobs/s; t_u = 2 ms, t_12 = 1 ms, D = 10 ms.
pub fn reference_pair(servers: u32, sender_rate: f64, receiver_rate: f64) -> GameContext {
    let c = servers as f64;
    let [o1, o2, o3, o4] = REFERENCE_PRICES;
    GameContext {
        cloudlets: (0..2)
            .map(|i| Cloudlet {
                provider: format!("sp{i}"),
                total_servers: servers,
                servers: vec![c],
                user_latency: vec![0.002],
            })
            .collect(),
        classes: vec![JobClass { service_rate: 1000.0 / c, slot_multiple: 2, bits_per_job: 1.6e6 }],
        topology: Topology {
            latency: vec![vec![0.0, 0.001], vec![0.001, 0.0]],
            bandwidth: vec![vec![0.0, 1e9], vec![1e9, 0.0]],
        },
        prices: Prices::uniform(2, 1, o1, o2, o3, o4),
        arrivals: Arrivals {
            rates: vec![vec![sender_rate], vec![receiver_rate]],
            revealed: vec![vec![sender_rate], vec![receiver_rate]],
            max: vec![vec![1500.0], vec![1500.0]],
        },
        slot: 0.005,
        interval: 1.0,
        default_utility: vec![0.0; 2],
    }
}

/// Three cloudlets with ten servers each and two classes (μ = 250 and 200
/// jobs/s, QoS 10 ms and 20 ms). Cloudlet 0 is the busy one. Slices are left
/// empty; `prepare` solves them.
pub fn federation(rates: [[f64; 2]; 3]) -> GameContext {
    let [o1, o2, o3, o4] = REFERENCE_PRICES;
    let lat = [[0.0, 0.001, 0.0015], [0.001, 0.0, 0.001], [0.0015, 0.001, 0.0]];
    GameContext {
        cloudlets: (0..3)
            .map(|i| Cloudlet {
                provider: format!("sp{i}"),
                total_servers: 10,
                servers: vec![],
                user_latency: vec![0.002, 0.002],
            })
            .collect(),
        classes: vec![
            JobClass { service_rate: 250.0, slot_multiple: 2, bits_per_job: 1.6e6 },
            JobClass { service_rate: 200.0, slot_multiple: 4, bits_per_job: 0.8e6 },
        ],
        topology: Topology {
            latency: lat.iter().map(|r| r.to_vec()).collect(),
            bandwidth: vec![vec![0.0, 1e9, 0.8e9], vec![1e9, 0.0, 1e9], vec![0.8e9, 1e9, 0.0]],
        },
        prices: Prices::uniform(3, 2, o1, o2, o3, o4),
        arrivals: Arrivals {
            rates: rates.iter().map(|r| r.to_vec()).collect(),
            revealed: vec![],
            max: vec![vec![2500.0, 2000.0]; 3],
        },
        slot: 0.005,
        interval: 1.2,
        default_utility: vec![],
    }
}

/// Default rates for [`federation`]: cloudlet 0 busy in both classes.
pub const FEDERATION_RATES: [[f64; 2]; 3] = [[1200.0, 1000.0], [700.0, 600.0], [800.0, 500.0]];

/// Rates for simulator runs: every own-rate slice keeps a stability margin
/// large enough that per-interval sampling noise cannot make it infeasible.
pub const SIM_RATES: [[f64; 2]; 3] = [[1100.0, 850.0], [700.0, 600.0], [800.0, 500.0]];

#[derive(Debug, Clone, Copy)]
pub struct RandomSpec {
    pub max_cloudlets: usize,
    pub max_classes: usize,
    pub max_servers: u32,
    /// Only return instances with at least one Mixed class.
    pub require_mixed: bool,
}

impl Default for RandomSpec {
    fn default() -> Self {
        RandomSpec { max_cloudlets: 4, max_classes: 2, max_servers: 8, require_mixed: true }
    }
}

/// A random valid context. Slices are solved from the drawn rates.
pub fn random_context<R: Rng>(rng: &mut R, spec: &RandomSpec) -> GameContext {
    loop {
        let ctx = draw(rng, spec);
        let Ok(ctx) = ctx.prepare() else { continue };
        if !spec.require_mixed || dispatch_case(&ctx).iter().any(|c| c.label == CaseLabel::Mixed) {
            return ctx;
        }
    }
}

fn draw<R: Rng>(rng: &mut R, spec: &RandomSpec) -> GameContext {
    let n = rng.random_range(2..=spec.max_cloudlets.max(2));
    let m = rng.random_range(1..=spec.max_classes.max(1));
    let classes: Vec<JobClass> = (0..m)
        .map(|_| JobClass {
            service_rate: rng.random_range(100.0..300.0),
            slot_multiple: rng.random_range(2..=4),
            bits_per_job: rng.random_range(0.8e6..1.6e6),
        })
        .collect();
    let user_latency: Vec<f64> = (0..m).map(|_| rng.random_range(0.001..0.003)).collect();
    let cloudlets: Vec<Cloudlet> = (0..n)
        .map(|i| Cloudlet {
            provider: format!("sp{}", if i == 0 { 0 } else { rng.random_range(0..3) }),
            total_servers: rng.random_range((m as u32).max(2)..=spec.max_servers.max(m as u32)),
            servers: vec![],
            user_latency: user_latency.clone(),
        })
        .collect();
    let mut latency = vec![vec![0.0; n]; n];
    let mut bandwidth = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let t = rng.random_range(0.0005..0.002);
            latency[i][j] = t;
            latency[j][i] = t;
            bandwidth[i][j] = rng.random_range(0.5e9..1e9);
            bandwidth[j][i] = rng.random_range(0.5e9..1e9);
        }
    }
    // Cloudlet 0 is pushed towards overload, the others drawn across the range.
    let rates: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            (0..m)
                .map(|k| {
                    let share = cloudlets[i].total_servers as f64 / m as f64 * classes[k].service_rate;
                    let u = if i == 0 { rng.random_range(0.85..1.0) } else { rng.random_range(0.2..0.8) };
                    (u * share).round()
                })
                .collect()
        })
        .collect();
    let max = rates.iter().map(|r| r.iter().map(|x| (x * 1.5).max(1.0)).collect()).collect();
    let [o1, o2, o3, o4] = REFERENCE_PRICES;
    GameContext {
        cloudlets,
        classes,
        topology: Topology { latency, bandwidth },
        prices: Prices::uniform(n, m, o1, o2, o3, o4),
        arrivals: Arrivals { rates, revealed: vec![], max },
        slot: 0.005,
        interval: 1.2,
        default_utility: vec![],
    }
}

/// A random context small enough for a truthfulness audit (at most three
/// cloudlets of at most three servers, two classes) whose prices pass both
/// price conditions. Each support bound is the largest rate up to 1.25x the
/// true one that keeps t_u + T within `latency_cap` seconds.
pub fn random_audit_context<R: Rng>(rng: &mut R, require_mixed: bool, latency_cap: f64) -> GameContext {
    let spec = RandomSpec { max_cloudlets: 3, max_classes: 2, max_servers: 3, require_mixed };
    loop {
        let mut ctx = random_context(rng, &spec);
        for i in 0..ctx.n() {
            for m in 0..ctx.m() {
                let lam = ctx.arrivals.rates[i][m];
                let ok = |r: f64| ctx.user_latency(i, m) + ctx.latency(i, m, r) <= latency_cap;
                let top = 1.25 * lam;
                let bound = if ok(top) {
                    top
                } else {
                    let (mut lo, mut hi) = (lam.min(ctx.capacity(i, m)), top);
                    for _ in 0..100 {
                        let mid = 0.5 * (lo + hi);
                        if ok(mid) {
                            lo = mid;
                        } else {
                            hi = mid;
                        }
                    }
                    lo
                };
                ctx.arrivals.max[i][m] = bound.max(lam);
            }
        }
        if crate::mechanism::check_price_conditions(&ctx).holds {
            return ctx;
        }
    }
}
