//! Event-driven simulation of a federation under the timeslot protocol.
//!
//! Jobs arrive at their home cloudlet, are routed per job with the current
//! offload fractions, wait in a per-class multi-server FCFS queue and are
//! dropped when they cannot finish before their marking runs out.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, VecDeque};
use std::io::Read;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::carla::{run_learning, LearningConfig};
use crate::game::{class_utility, GameContext, GameError, OffloadMatrix, RateBasis};
use crate::ne_solver::{solve_ne, NeError, SolverOptions};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("trace line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("trace line {line}: timestamp {timestamp} is earlier than the previous row")]
    OutOfOrder { line: usize, timestamp: f64 },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid simulation config: {0}")]
    Config(String),
    #[error(transparent)]
    Game(#[from] GameError),
    #[error(transparent)]
    Ne(#[from] NeError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub timestamp: f64,
    pub cloudlet: usize,
    pub class: usize,
}

/// Poisson arrivals for every (cloudlet, class) with the given rates over
/// `[0, duration)`, merged and sorted by time. Each stream draws from its
/// own ChaCha stream so adding a stream leaves the others unchanged.
pub fn generate_trace(rates: &[Vec<f64>], duration: f64, seed: u64) -> Vec<TraceEvent> {
    let mut events = Vec::new();
    for (i, row) in rates.iter().enumerate() {
        for (m, &rate) in row.iter().enumerate() {
            if rate <= 0.0 {
                continue;
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream((i * row.len() + m) as u64 + 1);
            let exp = Exp::new(rate).expect("positive rate");
            let mut t = exp.sample(&mut rng);
            while t < duration {
                events.push(TraceEvent { timestamp: t, cloudlet: i, class: m });
                t += exp.sample(&mut rng);
            }
        }
    }
    events.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp).then(a.cloudlet.cmp(&b.cloudlet)).then(a.class.cmp(&b.class)));
    events
}

/// Reads `timestamp_s,cloudlet_id,class_id` rows; a header row is optional.
pub fn read_trace<R: Read>(reader: R) -> Result<Vec<TraceEvent>, SimError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).trim(csv::Trim::All).from_reader(reader);
    let mut events = Vec::new();
    let mut last = f64::NEG_INFINITY;
    for (idx, rec) in rdr.records().enumerate() {
        let line = idx + 1;
        let rec = rec.map_err(|e| SimError::Parse { line, reason: e.to_string() })?;
        if rec.len() != 3 {
            return Err(SimError::Parse { line, reason: format!("expected 3 fields, got {}", rec.len()) });
        }
        let ts = rec[0].parse::<f64>();
        if line == 1 && ts.is_err() {
            continue;
        }
        let timestamp = ts.map_err(|e| SimError::Parse { line, reason: format!("timestamp: {e}") })?;
        let cloudlet = rec[1].parse().map_err(|e| SimError::Parse { line, reason: format!("cloudlet_id: {e}") })?;
        let class = rec[2].parse().map_err(|e| SimError::Parse { line, reason: format!("class_id: {e}") })?;
        if !timestamp.is_finite() || timestamp < 0.0 {
            return Err(SimError::Parse { line, reason: format!("timestamp must be finite and >= 0, got {timestamp}") });
        }
        if timestamp < last {
            return Err(SimError::OutOfOrder { line, timestamp });
        }
        last = timestamp;
        events.push(TraceEvent { timestamp, cloudlet, class });
    }
    Ok(events)
}

pub fn load_trace(path: &Path) -> Result<Vec<TraceEvent>, SimError> {
    read_trace(std::fs::File::open(path)?)
}

pub fn write_trace<W: std::io::Write>(writer: W, events: &[TraceEvent]) -> Result<(), SimError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["timestamp_s", "cloudlet_id", "class_id"]).map_err(csv_io)?;
    for e in events {
        w.write_record([e.timestamp.to_string(), e.cloudlet.to_string(), e.class.to_string()]).map_err(csv_io)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_io(e: csv::Error) -> SimError {
    SimError::Io(std::io::Error::other(e))
}

/// Mean of the last `k` observations; an empty history has no estimate.
pub fn sliding_window_predictor(history: &[f64], k: usize) -> Option<f64> {
    let k = k.max(1);
    if history.is_empty() {
        return None;
    }
    let tail = &history[history.len().saturating_sub(k)..];
    Some(tail.iter().sum::<f64>() / tail.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Predictor {
    /// The realized rate of the interval itself.
    Oracle,
    /// Mean realized rate of the previous k intervals.
    SlidingWindow(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Policy {
    Fixed(OffloadMatrix),
    Centralized(SolverOptions),
    Carla(LearningConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub duration: f64,
    pub seed: u64,
    pub policy: Policy,
    pub predictor: Predictor,
    /// Drop jobs that cannot finish before their marking expires.
    pub enforce_deadlines: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub tau_index: usize,
    pub cloudlet: usize,
    pub class: usize,
    pub arrivals: u64,
    pub received: u64,
    pub processed: u64,
    pub dropped: u64,
    /// Offloads kept at home because the link budget was spent.
    pub bandwidth_retained: u64,
    /// Processed jobs whose end-to-end latency exceeded D.
    pub late: u64,
    /// Mean end-to-end latency of processed jobs originating here (s).
    pub mean_latency: f64,
    /// Mean queue sojourn of jobs processed here (s).
    pub mean_sojourn: f64,
    pub throughput: f64,
    pub drop_rate: f64,
    pub utility_sim: f64,
    pub utility_theory: f64,
    /// Ω4 on dropped traffic, charged only under the mediator policy.
    pub mediator_penalty: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimMetrics {
    pub rows: Vec<MetricRow>,
    pub arrived: u64,
    pub processed: u64,
    pub dropped: u64,
    pub in_flight: u64,
    /// Largest end-to-end latency of a processed job minus its D (s).
    pub worst_overrun: f64,
    /// Largest number of slot boundaries a processed or dropped job crossed
    /// after its arrival slot.
    pub max_slots_alive: u64,
    /// Strategies used per interval.
    pub strategies: Vec<OffloadMatrix>,
}

impl SimMetrics {
    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<(), SimError> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record([
            "tau_index",
            "cloudlet",
            "class",
            "mean_latency_s",
            "throughput",
            "drops",
            "utility_sim",
            "utility_theory",
        ])
        .map_err(csv_io)?;
        for r in &self.rows {
            w.write_record([
                r.tau_index.to_string(),
                r.cloudlet.to_string(),
                r.class.to_string(),
                r.mean_latency.to_string(),
                r.throughput.to_string(),
                r.drop_rate.to_string(),
                r.utility_sim.to_string(),
                r.utility_theory.to_string(),
            ])
            .map_err(csv_io)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Job {
    origin: usize,
    exec: usize,
    class: usize,
    tau: usize,
    born: f64,
    queued: f64,
    deadline: f64,
    arrival_slot: u64,
}

#[derive(Debug)]
enum Event {
    Enqueue(usize),
    Finish { queue: usize, server: usize, job: usize, completed: bool },
}

struct Slice {
    rates: Vec<f64>,
    busy: Vec<bool>,
    waiting: VecDeque<usize>,
}

impl Slice {
    /// ⌊c⌋ full servers plus one partial server carrying the remainder.
    fn new(servers: f64, mu: f64) -> Self {
        let full = servers.floor() as usize;
        let mut rates = vec![mu; full];
        let frac = servers - full as f64;
        if frac > 1e-12 {
            rates.push(frac * mu);
        }
        let n = rates.len();
        Slice { rates, busy: vec![false; n], waiting: VecDeque::new() }
    }

    fn free_server(&self) -> Option<usize> {
        (0..self.rates.len()).find(|&s| !self.busy[s])
    }
}

#[derive(Default, Clone)]
struct Acc {
    arrivals: u64,
    received: u64,
    processed: u64,
    dropped: u64,
    bandwidth_retained: u64,
    late: u64,
    e2e_sum: f64,
    e2e_n: u64,
    sojourn_sum: f64,
    sojourn_n: u64,
    /// Routed counts by executor.
    routed: Vec<u64>,
    /// Sojourn sums of processed jobs by origin (at this executor).
    by_origin_sum: Vec<f64>,
    by_origin_n: Vec<u64>,
}

struct Sched {
    heap: BinaryHeap<Reverse<(u64, u64)>>,
    events: Vec<Option<Event>>,
}

impl Sched {
    fn push(&mut self, t: f64, ev: Event) {
        let id = self.events.len() as u64;
        self.events.push(Some(ev));
        // Nonnegative floats order like their bit patterns.
        self.heap.push(Reverse((t.max(0.0).to_bits(), id)));
    }

    fn peek_time(&self) -> Option<f64> {
        self.heap.peek().map(|Reverse((t, _))| f64::from_bits(*t))
    }

    fn pop(&mut self) -> Option<(f64, Event)> {
        let Reverse((t, id)) = self.heap.pop()?;
        Some((f64::from_bits(t), self.events[id as usize].take().expect("event popped once")))
    }
}

/// Realized per-interval arrival rates `[x][i][m]` of a trace.
pub fn interval_rates(trace: &[TraceEvent], n: usize, m: usize, tau: f64, intervals: usize) -> Vec<Vec<Vec<f64>>> {
    let mut counts = vec![vec![vec![0.0; m]; n]; intervals];
    for e in trace {
        let x = (e.timestamp / tau) as usize;
        if x < intervals && e.cloudlet < n && e.class < m {
            counts[x][e.cloudlet][e.class] += 1.0;
        }
    }
    for c in counts.iter_mut().flatten().flatten() {
        *c /= tau;
    }
    counts
}

fn plan(ctx: &GameContext, rates: Vec<Vec<f64>>, policy: &Policy) -> Result<(GameContext, OffloadMatrix), SimError> {
    let mut planned = ctx.with_rates(rates);
    for (i, row) in planned.arrivals.rates.clone().iter().enumerate() {
        for (m, &r) in row.iter().enumerate() {
            planned.arrivals.max[i][m] = planned.arrivals.max[i][m].max(r);
        }
    }
    planned.reslice(RateBasis::Revealed)?;
    let phi = match policy {
        Policy::Fixed(phi) => phi.clone(),
        Policy::Centralized(opts) => solve_ne(&planned, opts)?.strategies,
        Policy::Carla(cfg) => {
            let trace = run_learning(&planned, cfg).map_err(|e| SimError::Config(e.to_string()))?;
            // Average of the processed fractions over the last tenth.
            let tail = (trace.records.len() / 10).max(1);
            let recs = &trace.records[trace.records.len() - tail..];
            let mut avg = recs[0].processed.clone();
            for c in avg.iter_mut().flatten().flatten() {
                *c = 0.0;
            }
            for r in recs {
                for (a, p) in avg.iter_mut().flatten().flatten().zip(r.processed.iter().flatten().flatten()) {
                    *a += p / tail as f64;
                }
            }
            OffloadMatrix { classes: avg }
        }
    };
    phi.validate(planned.n(), planned.m())?;
    Ok((planned, phi))
}

/// Simulates `config.duration` seconds of the federation fed by `trace`.
pub fn run_simulation(ctx: &GameContext, trace: &[TraceEvent], config: &SimConfig) -> Result<SimMetrics, SimError> {
    let (n, mm) = (ctx.n(), ctx.m());
    let tau = ctx.interval;
    let slot = ctx.slot;
    if !(tau > 0.0 && slot > 0.0 && config.duration > 0.0) {
        return Err(SimError::Config("interval, slot and duration must be positive".into()));
    }
    let intervals = (config.duration / tau).round() as usize;
    if intervals == 0 || ((intervals as f64) * tau - config.duration).abs() > 1e-9 * config.duration.max(1.0) {
        return Err(SimError::Config(format!("duration {} is not a multiple of the interval {tau}", config.duration)));
    }
    if let Some(e) = trace.iter().find(|e| e.cloudlet >= n || e.class >= mm) {
        return Err(SimError::Config(format!("trace names cloudlet {} class {} outside the federation", e.cloudlet, e.class)));
    }

    let realized = interval_rates(trace, n, mm, tau, intervals);
    let mut plans = Vec::with_capacity(intervals);
    for x in 0..intervals {
        let predicted: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                (0..mm)
                    .map(|m| match config.predictor {
                        Predictor::Oracle => realized[x][i][m],
                        Predictor::SlidingWindow(k) => {
                            let hist: Vec<f64> = realized[..x].iter().map(|r| r[i][m]).collect();
                            sliding_window_predictor(&hist, k).unwrap_or(realized[0][i][m])
                        }
                    })
                    .collect()
            })
            .collect();
        plans.push(plan(ctx, predicted, &config.policy)?);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut acc = vec![vec![vec![Acc { routed: vec![0; n], by_origin_sum: vec![0.0; n], by_origin_n: vec![0; n], ..Default::default() }; mm]; n]; intervals];
    let mut slices: Vec<Slice> = Vec::new();
    let mut slice_interval = usize::MAX;
    let mut jobs: Vec<Job> = Vec::with_capacity(trace.len());
    let mut sched = Sched { heap: BinaryHeap::new(), events: Vec::new() };
    let mut bits_used = vec![vec![0.0; n]; n];
    let mut next = 0usize;
    let (mut processed, mut dropped) = (0u64, 0u64);
    let mut worst_overrun = f64::NEG_INFINITY;
    let mut max_slots_alive = 0u64;
    let qidx = |i: usize, m: usize| i * mm + m;

    // Slices follow the interval in force; in-flight work keeps its server.
    let rebuild = |x: usize, slices: &mut Vec<Slice>| {
        let planned = &plans[x].0;
        let fresh: Vec<Slice> = (0..n)
            .flat_map(|i| (0..mm).map(move |m| (i, m)))
            .map(|(i, m)| Slice::new(planned.cloudlets[i].servers[m], planned.classes[m].service_rate))
            .collect();
        if slices.is_empty() {
            *slices = fresh;
            return;
        }
        for (old, new) in slices.iter_mut().zip(fresh) {
            let busy_len = old.busy.len().max(new.rates.len());
            let mut busy = vec![false; busy_len];
            let mut rates = new.rates.clone();
            for s in 0..old.busy.len() {
                busy[s] = old.busy[s];
            }
            // A busy server beyond the new slice finishes its job, then retires.
            while rates.len() < busy_len {
                rates.push(0.0);
            }
            old.rates = rates;
            old.busy = busy;
        }
    };

    loop {
        let t_arr = trace.get(next).map(|e| e.timestamp).filter(|&t| t < config.duration);
        let t_ev = sched.peek_time().filter(|&t| t < config.duration);
        let take_arrival = match (t_arr, t_ev) {
            (None, None) => break,
            (Some(a), Some(e)) => a < e,
            (Some(_), None) => true,
            (None, Some(_)) => false,
        };
        let now = if take_arrival { t_arr.unwrap() } else { t_ev.unwrap() };
        let x = ((now / tau) as usize).min(intervals - 1);
        if x != slice_interval {
            rebuild(x, &mut slices);
            if slice_interval != usize::MAX {
                for row in bits_used.iter_mut() {
                    row.iter_mut().for_each(|b| *b = 0.0);
                }
            }
            slice_interval = x;
        }

        if take_arrival {
            let e = trace[next];
            next += 1;
            let (planned, phi) = &plans[x];
            let (i, m) = (e.cloudlet, e.class);
            let u: f64 = rng.random();
            let mut cum = 0.0;
            let mut exec = i;
            for j in 0..n {
                cum += phi.get(m, i, j);
                if u < cum {
                    exec = j;
                    break;
                }
            }
            let a = &mut acc[x][i][m];
            a.arrivals += 1;
            if exec != i {
                let bits = planned.classes[m].bits_per_job;
                let budget = planned.topology.bandwidth[i][exec] * tau;
                if bits_used[i][exec] + bits > budget {
                    a.bandwidth_retained += 1;
                    exec = i;
                } else {
                    bits_used[i][exec] += bits;
                }
            }
            a.routed[exec] += 1;
            if exec != i {
                acc[x][exec][m].received += 1;
            }
            let arrival_slot = (e.timestamp / slot).floor() as u64;
            let deadline = if config.enforce_deadlines {
                (arrival_slot + planned.classes[m].slot_multiple as u64) as f64 * slot
            } else {
                f64::INFINITY
            };
            let transit = if exec == i { 0.0 } else { planned.topology.latency[i][exec] };
            let id = jobs.len();
            jobs.push(Job {
                origin: i,
                exec,
                class: m,
                tau: x,
                born: e.timestamp,
                queued: e.timestamp + transit,
                deadline,
                arrival_slot,
            });
            sched.push(e.timestamp + transit, Event::Enqueue(id));
            continue;
        }

        let (now, ev) = sched.pop().expect("peeked");
        match ev {
            Event::Enqueue(id) => {
                let q = qidx(jobs[id].exec, jobs[id].class);
                slices[q].waiting.push_back(id);
            }
            Event::Finish { queue, server, job, completed } => {
                slices[queue].busy[server] = false;
                let jb = &jobs[job];
                let a = &mut acc[jb.tau][jb.exec][jb.class];
                max_slots_alive = max_slots_alive.max(last_slot(now, slot).saturating_sub(jb.arrival_slot));
                if completed {
                    processed += 1;
                    a.processed += 1;
                    let sojourn = now - jb.queued;
                    a.sojourn_sum += sojourn;
                    a.sojourn_n += 1;
                    a.by_origin_sum[jb.origin] += sojourn;
                    a.by_origin_n[jb.origin] += 1;
                    let e2e = ctx.user_latency(jb.origin, jb.class) + now - jb.born;
                    let qos = ctx.qos(jb.class);
                    worst_overrun = worst_overrun.max(e2e - qos);
                    let home = &mut acc[jb.tau][jb.origin][jb.class];
                    home.e2e_sum += e2e;
                    home.e2e_n += 1;
                    if e2e > qos {
                        home.late += 1;
                    }
                } else {
                    dropped += 1;
                    acc[jb.tau][jb.origin][jb.class].dropped += 1;
                }
            }
        }
        // Start waiting work on every free server of every slice.
        for q in 0..slices.len() {
            while let Some(s) = slices[q].free_server().filter(|&s| slices[q].rates[s] > 0.0) {
                let Some(id) = slices[q].waiting.pop_front() else { break };
                let jb = &jobs[id];
                if now >= jb.deadline {
                    dropped += 1;
                    acc[jb.tau][jb.origin][jb.class].dropped += 1;
                    max_slots_alive = max_slots_alive.max(last_slot(jb.deadline, slot).saturating_sub(jb.arrival_slot));
                    continue;
                }
                let service = Exp::new(slices[q].rates[s]).expect("positive rate").sample(&mut rng);
                slices[q].busy[s] = true;
                let done = now + service;
                if done <= jb.deadline {
                    sched.push(done, Event::Finish { queue: q, server: s, job: id, completed: true });
                } else {
                    sched.push(jb.deadline, Event::Finish { queue: q, server: s, job: id, completed: false });
                }
            }
        }
    }

    let arrived = next as u64;
    let in_flight = arrived - processed - dropped;
    let mut rows = Vec::new();
    for (x, (planned, phi)) in plans.iter().enumerate() {
        for i in 0..n {
            for m in 0..mm {
                let a = &acc[x][i][m];
                let utility_sim = realized_utility(planned, &acc[x], i, m, tau);
                let utility_theory = class_utility(planned, phi, i, m, RateBasis::Revealed);
                let drop_rate = a.dropped as f64 / tau;
                let mediator_penalty = match config.policy {
                    Policy::Centralized(_) => ctx.prices.mediator_penalty[i][m] * drop_rate / planned.capacity(i, m),
                    _ => 0.0,
                };
                rows.push(MetricRow {
                    tau_index: x,
                    cloudlet: i,
                    class: m,
                    arrivals: a.arrivals,
                    received: a.received,
                    processed: a.processed,
                    dropped: a.dropped,
                    bandwidth_retained: a.bandwidth_retained,
                    late: a.late,
                    mean_latency: mean(a.e2e_sum, a.e2e_n),
                    mean_sojourn: mean(a.sojourn_sum, a.sojourn_n),
                    throughput: a.processed as f64 / tau,
                    drop_rate,
                    utility_sim,
                    utility_theory,
                    mediator_penalty,
                });
            }
        }
    }
    Ok(SimMetrics {
        rows,
        arrived,
        processed,
        dropped,
        in_flight,
        worst_overrun: if worst_overrun.is_finite() { worst_overrun } else { 0.0 },
        max_slots_alive,
        strategies: plans.into_iter().map(|(_, p)| p).collect(),
    })
}

/// Slot that contains the instant just before `t`, so an exit exactly on a
/// boundary belongs to the slot that ends there.
fn last_slot(t: f64, slot: f64) -> u64 {
    let k = t / slot;
    let r = k.round();
    if (k - r).abs() < 1e-9 { (r as u64).saturating_sub(1) } else { k.floor() as u64 }
}

fn mean(sum: f64, n: u64) -> f64 {
    if n == 0 { 0.0 } else { sum / n as f64 }
}

/// Utility of cloudlet i in class m from one interval's realized flows, with
/// the price terms of the game and hinge penalties on measured sojourns.
fn realized_utility(planned: &GameContext, acc: &[Vec<Acc>], i: usize, m: usize, tau: f64) -> f64 {
    let p = &planned.prices;
    let n = planned.n();
    let cap = planned.capacity(i, m);
    let qos = planned.qos(m);
    let a = &acc[i][m];
    let lam = a.arrivals as f64 / tau;
    let mut u = p.revenue[i][m] * lam / cap;
    let sojourn = |k: usize| mean(a.by_origin_sum[k], a.by_origin_n[k]).max(0.0);
    let t_here = mean(a.sojourn_sum, a.sojourn_n);
    for j in (0..n).filter(|&j| j != i) {
        let out = a.routed[j] as f64 / tau;
        u -= p.offload[i][j][m] * planned.gamma(i, j) * out / planned.capacity(j, m);
        let inflow = acc[j][m].routed[i] as f64 / tau;
        u += p.offload[j][i][m] * planned.gamma(j, i) * inflow / cap;
        if inflow > 0.0 {
            let t = if a.by_origin_n[j] > 0 { sojourn(j) } else { t_here };
            let e2e = planned.user_latency(j, m) + t + planned.topology.latency[j][i];
            u -= p.latency_penalty[i][m] * inflow / cap * (e2e - qos).max(0.0);
        }
    }
    let kept = a.routed[i] as f64 / tau;
    if kept > 0.0 {
        let t = if a.by_origin_n[i] > 0 { sojourn(i) } else { t_here };
        u -= p.latency_penalty[i][m] * kept / cap * (planned.user_latency(i, m) + t - qos).max(0.0);
    }
    u
}
