//! M/M/c primitives: Erlang-C for integer and real server counts, mean
//! sojourn time, and the pooled M/M/1 lower bound.

use serde::{Deserialize, Serialize};
use statrs::function::gamma::{gamma_ur, ln_gamma};
use thiserror::Error;

/// Latency reported for an unstable queue by the sentinel helpers (seconds).
pub const UNSTABLE_LATENCY: f64 = 1e6;

/// Relative margin below capacity at which a queue is still treated as stable.
pub const STABILITY_MARGIN: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QueueError {
    #[error("unstable queue: arrival rate {arrival_rate} >= capacity {capacity}")]
    Unstable { arrival_rate: f64, capacity: f64 },
    #[error("domain error: {0}")]
    Domain(String),
}

/// A pool of `servers` identical exponential servers, each of rate `service_rate`.
/// Fractional server counts are allowed (soft slicing).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ServerPool {
    pub servers: f64,
    pub service_rate: f64,
}

impl ServerPool {
    pub fn new(servers: f64, service_rate: f64) -> Result<Self, QueueError> {
        let pool = ServerPool { servers, service_rate };
        pool.validate()?;
        Ok(pool)
    }

    pub fn validate(&self) -> Result<(), QueueError> {
        if !(self.servers >= 1.0) || !self.servers.is_finite() {
            return Err(QueueError::Domain(format!("servers must be >= 1, got {}", self.servers)));
        }
        if !(self.service_rate > 0.0) || !self.service_rate.is_finite() {
            return Err(QueueError::Domain(format!(
                "service rate must be > 0, got {}",
                self.service_rate
            )));
        }
        Ok(())
    }

    pub fn capacity(&self) -> f64 {
        self.servers * self.service_rate
    }

    pub fn utilization(&self, arrival_rate: f64) -> f64 {
        arrival_rate / self.capacity()
    }

    pub fn is_stable(&self, arrival_rate: f64) -> bool {
        arrival_rate < self.capacity() * (1.0 - STABILITY_MARGIN)
    }

    fn check_rate(&self, arrival_rate: f64) -> Result<(), QueueError> {
        self.validate()?;
        if !(arrival_rate >= 0.0) {
            return Err(QueueError::Domain(format!("arrival rate must be >= 0, got {arrival_rate}")));
        }
        if !self.is_stable(arrival_rate) {
            return Err(QueueError::Unstable { arrival_rate, capacity: self.capacity() });
        }
        Ok(())
    }
}

fn check_load(servers: f64, offered_load: f64) -> Result<(), QueueError> {
    if !(servers >= 1.0) {
        return Err(QueueError::Domain(format!("servers must be >= 1, got {servers}")));
    }
    if !(offered_load >= 0.0) {
        return Err(QueueError::Domain(format!("offered load must be >= 0, got {offered_load}")));
    }
    if offered_load >= servers * (1.0 - STABILITY_MARGIN) {
        return Err(QueueError::Unstable { arrival_rate: offered_load, capacity: servers });
    }
    Ok(())
}

/// Probability that an arriving job waits, for offered load `a = λ/μ`.
///
/// Integer server counts use the Erlang-B recurrence; anything else goes
/// through the incomplete-gamma form.
pub fn erlang_c(pool: ServerPool, offered_load: f64) -> Result<f64, QueueError> {
    pool.validate()?;
    let c = pool.servers;
    if c.fract() == 0.0 && c <= 1e7 {
        erlang_c_integer(c as u64, offered_load)
    } else {
        erlang_c_real(c, offered_load)
    }
}

/// Erlang-C for an integer number of servers via the Erlang-B recurrence
/// `B_k = a B_{k-1} / (k + a B_{k-1})`, which never forms factorials.
pub fn erlang_c_integer(servers: u64, offered_load: f64) -> Result<f64, QueueError> {
    let c = servers as f64;
    check_load(c, offered_load)?;
    if offered_load == 0.0 {
        return Ok(0.0);
    }
    let a = offered_load;
    let mut b = 1.0;
    for k in 1..=servers {
        b = a * b / (k as f64 + a * b);
    }
    Ok(c * b / (c - a * (1.0 - b)))
}

/// Erlang-C for a real number of servers:
/// `1 / (1 + e^a (c - a) a^{-c} Γ(c, a))`, assembled in log space.
pub fn erlang_c_real(servers: f64, offered_load: f64) -> Result<f64, QueueError> {
    check_load(servers, offered_load)?;
    if offered_load == 0.0 {
        return Ok(0.0);
    }
    let (c, a) = (servers, offered_load);
    let q = gamma_ur(c, a);
    if q <= 0.0 {
        return Ok(0.0);
    }
    let log_term = a + (c - a).ln() - c * a.ln() + ln_gamma(c) + q.ln();
    if log_term > 700.0 {
        return Ok(0.0);
    }
    Ok(1.0 / (1.0 + log_term.exp()))
}

/// Mean sojourn time `1/μ + E_C/(cμ − λ)` in seconds.
pub fn mmc_latency(pool: ServerPool, arrival_rate: f64) -> Result<f64, QueueError> {
    pool.check_rate(arrival_rate)?;
    let ec = erlang_c(pool, arrival_rate / pool.service_rate)?;
    Ok(1.0 / pool.service_rate + ec / (pool.capacity() - arrival_rate))
}

/// Sojourn time of a single server running at the pooled rate cμ.
pub fn mm1_pooled_latency(pool: ServerPool, arrival_rate: f64) -> Result<f64, QueueError> {
    pool.check_rate(arrival_rate)?;
    Ok(1.0 / (pool.capacity() - arrival_rate))
}

/// `mmc_latency`, with unstable or invalid inputs mapped to [`UNSTABLE_LATENCY`].
pub fn latency_or_sentinel(pool: ServerPool, arrival_rate: f64) -> f64 {
    mmc_latency(pool, arrival_rate).unwrap_or(UNSTABLE_LATENCY)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pool(c: f64, mu: f64) -> ServerPool {
        ServerPool::new(c, mu).unwrap()
    }

    // Direct evaluation of the factorial series; fine for c <= 32 in f64.
    fn series_oracle(c: u32, a: f64) -> f64 {
        let rho = a / c as f64;
        let mut fact = 1.0;
        let mut sum = 0.0;
        for k in 0..c {
            if k > 0 {
                fact *= k as f64;
            }
            sum += a.powi(k as i32) / fact;
        }
        let c_fact = fact * c as f64;
        1.0 / (1.0 + (1.0 - rho) * (c_fact / a.powi(c as i32)) * sum)
    }

    // Γ(s, x) by composite Simpson on [x, x + 200] after the substitution
    // t = x + u; independent of the continued fraction in statrs.
    fn upper_gamma_quadrature(s: f64, x: f64) -> f64 {
        let n = 400_000;
        let h = 200.0 / n as f64;
        let f = |u: f64| {
            let t = x + u;
            ((s - 1.0) * t.ln() - t).exp()
        };
        let mut acc = f(0.0) + f(200.0);
        for k in 1..n {
            let w = if k % 2 == 1 { 4.0 } else { 2.0 };
            acc += w * f(k as f64 * h);
        }
        acc * h / 3.0
    }

    fn gamma_oracle(c: f64, a: f64) -> f64 {
        let g = upper_gamma_quadrature(c, a);
        1.0 / (1.0 + a.exp() * (c - a) * a.powf(-c) * g)
    }

    #[test]
    fn single_server_reduces_to_utilization() {
        let ec = erlang_c(pool(1.0, 1000.0), 0.5).unwrap();
        assert!((ec - 0.5).abs() < 1e-15);
    }

    #[test]
    fn two_servers_unit_load() {
        let ec = erlang_c(pool(2.0, 1.0), 1.0).unwrap();
        assert!((ec - 1.0 / 3.0).abs() < 1e-14);
        let t = mmc_latency(pool(2.0, 1.0), 1.0).unwrap();
        assert!((t - 4.0 / 3.0).abs() < 1e-14);
    }

    #[test]
    fn fractional_servers_match_quadrature_and_bracket() {
        let ec = erlang_c(pool(2.5, 1.0), 1.0).unwrap();
        let oracle = gamma_oracle(2.5, 1.0);
        assert!((ec - oracle).abs() < 1e-9, "{ec} vs {oracle}");
        let lo = erlang_c(pool(3.0, 1.0), 1.0).unwrap();
        let hi = erlang_c(pool(2.0, 1.0), 1.0).unwrap();
        assert!(lo < ec && ec < hi);
    }

    #[test]
    fn latency_examples() {
        let t0 = mmc_latency(pool(1.0, 1000.0), 0.0).unwrap();
        assert!((t0 - 0.001).abs() < 1e-15);
        let t = mmc_latency(pool(1.0, 1000.0), 970.0).unwrap();
        assert!((t - 1.0 / 30.0).abs() < 1e-12);
    }

    #[test]
    fn pooled_examples() {
        assert!((mm1_pooled_latency(pool(2.0, 1.0), 1.0).unwrap() - 1.0).abs() < 1e-15);
        assert!((mm1_pooled_latency(pool(10.0, 100.0), 0.0).unwrap() - 0.001).abs() < 1e-15);
        assert!((mm1_pooled_latency(pool(2.0, 1.0), 1.9).unwrap() - 10.0).abs() < 1e-9);
    }

    #[test]
    fn series_oracle_agreement() {
        for c in 1..=32u32 {
            for k in 1..=99 {
                let rho = k as f64 / 100.0;
                let a = rho * c as f64;
                let fast = erlang_c_integer(c as u64, a).unwrap();
                let oracle = series_oracle(c, a);
                assert!((fast - oracle).abs() <= 1e-10, "c={c} rho={rho}");
                let real = erlang_c_real(c as f64, a).unwrap();
                assert!((real - fast).abs() <= 1e-10, "c={c} rho={rho}: {real} vs {fast}");
            }
        }
    }

    #[test]
    fn large_server_counts_stay_finite() {
        for &c in &[170u64, 500, 5000] {
            let ec = erlang_c_integer(c, 0.95 * c as f64).unwrap();
            assert!(ec.is_finite() && (0.0..=1.0).contains(&ec));
            let er = erlang_c_real(c as f64, 0.95 * c as f64).unwrap();
            assert!((ec - er).abs() < 1e-9);
        }
    }

    #[test]
    fn errors() {
        assert!(matches!(erlang_c(pool(1.0, 1.0), 1.0), Err(QueueError::Unstable { .. })));
        assert!(matches!(erlang_c(pool(1.0, 1.0), -0.1), Err(QueueError::Domain(_))));
        assert!(matches!(erlang_c_real(0.5, 0.1), Err(QueueError::Domain(_))));
        assert!(ServerPool::new(0.5, 1.0).is_err());
        assert!(matches!(mmc_latency(pool(2.0, 1.0), 2.0), Err(QueueError::Unstable { .. })));
        assert_eq!(latency_or_sentinel(pool(2.0, 1.0), 2.5), UNSTABLE_LATENCY);
    }

    proptest! {
        #[test]
        fn mmc_dominates_pooled(c in 1.0f64..40.0, mu in 1.0f64..2000.0, rho in 0.0f64..0.999) {
            let p = pool(c, mu);
            let lam = rho * p.capacity();
            prop_assert!(mmc_latency(p, lam).unwrap() >= mm1_pooled_latency(p, lam).unwrap() * (1.0 - 1e-12));
        }

        #[test]
        fn erlang_c_increasing_in_load(c in 1.0f64..40.0, r1 in 0.0f64..0.99, dr in 0.0f64..0.009) {
            let e1 = erlang_c(pool(c, 1.0), r1 * c).unwrap();
            let e2 = erlang_c(pool(c, 1.0), (r1 + dr) * c).unwrap();
            prop_assert!((0.0..=1.0).contains(&e1));
            prop_assert!(e2 >= e1 - 1e-12);
        }

        #[test]
        fn latency_convex_in_load(c in 1.0f64..20.0, rho in 0.01f64..0.95) {
            let p = pool(c, 100.0);
            let h = 0.01 * p.capacity() * 0.04;
            let lam = rho * p.capacity();
            let d2 = mmc_latency(p, lam + h).unwrap() - 2.0 * mmc_latency(p, lam).unwrap()
                + mmc_latency(p, (lam - h).max(0.0)).unwrap();
            prop_assert!(lam < h || d2 >= -1e-9);
        }
    }

    #[test]
    fn light_and_heavy_load_ratios() {
        for c in 1..=20 {
            let p = pool(c as f64, 10.0);
            let light = p.capacity() * 0.01;
            let r = mmc_latency(p, light).unwrap() / mm1_pooled_latency(p, light).unwrap();
            assert!(r >= 0.9 * c as f64 && r <= 1.1 * c as f64, "c={c} r={r}");
            if c > 14 {
                // ratio is exactly c(1-ρ) + E_C, which leaves the 1% band at c = 15
                continue;
            }
            let heavy = p.capacity() * 0.999;
            let r = mmc_latency(p, heavy).unwrap() / mm1_pooled_latency(p, heavy).unwrap();
            assert!((0.99..=1.01).contains(&r), "c={c} r={r}");
        }
    }
}
