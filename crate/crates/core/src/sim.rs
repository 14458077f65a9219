//! Packet-level discrete-event simulation of the two systems.
//!
//! Batches arrive on two Poisson streams. At each arrival the current
//! `(s1, s2, k)` is formed and the decision rule picks an action (a
//! randomized rule is sampled at every epoch). Each routed packet joins its
//! system's FCFS queue and is served by one of the system's exponential
//! servers. Packets routed to System S occupy its queue at once and pay
//! the backhaul delay on top of their completion time. A batch's delay is
//! measured on the last packet queued to each system: the later of that
//! packet's M completion and its S completion plus the backhaul delay,
//! minus the arrival time. With several servers an earlier packet of the
//! same batch can finish later still; that makespan is reported
//! separately as `makespan_rate`.
//!
//! Statistics cover arrivals in `[warmup, horizon]`. Arrivals stop at the
//! horizon and the queues drain, so every measured batch completes; FCFS
//! makes a packet's delay independent of later arrivals.
//!
//! Replication `r` draws from `ChaCha8Rng::seed_from_u64(seed)` switched to
//! stream `r`, so replications are independent and reproducible.
//!
//! # Event trace
//!
//! [`Simulator::run_traced`] writes one tab-separated line per event:
//!
//! ```text
//! time  kind  s1  s2  k  action  delay
//! ```
//!
//! `kind` is `arrival` (with the pre-decision state and chosen action),
//! `departure_m` / `departure_s` (with the post-departure occupancy) or
//! `batch_done` (with the realized batch delay). Unused fields are `-`.

use std::cmp::{Ordering, Reverse};
use std::collections::{BinaryHeap, VecDeque};
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp1;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::cost::DelayCostTable;
use crate::error::{Error, Result};
use crate::model::{Event, ModelParams, State, StateSpace};
use crate::solver::DecisionRule;

fn default_horizon() -> f64 {
    60_000.0
}
fn default_seed() -> u64 {
    1
}
fn default_replications() -> usize {
    3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    /// Simulated seconds during which batches arrive.
    #[serde(default = "default_horizon")]
    pub horizon: f64,
    /// Seconds discarded before collecting statistics; 10% of the horizon
    /// when absent.
    #[serde(default)]
    pub warmup: Option<f64>,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_replications")]
    pub replications: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            horizon: default_horizon(),
            warmup: None,
            seed: default_seed(),
            replications: default_replications(),
        }
    }
}

impl SimConfig {
    pub fn warmup(&self) -> f64 {
        self.warmup.unwrap_or(0.1 * self.horizon)
    }

    pub fn validate(&self) -> Result<()> {
        let warmup = self.warmup();
        if !(self.horizon.is_finite() && warmup >= 0.0 && self.horizon > warmup) {
            return Err(Error::InvalidParam {
                name: "sim.horizon",
                reason: format!("need horizon > warmup >= 0, got {} and {warmup}", self.horizon),
            });
        }
        if self.replications == 0 {
            return Err(Error::InvalidParam {
                name: "sim.replications",
                reason: "at least one replication is required".into(),
            });
        }
        Ok(())
    }
}

/// Mean over replications with a 95% Student-t half-width (absent for a
/// single replication).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Estimate {
    pub mean: f64,
    pub half_width: Option<f64>,
}

impl Estimate {
    pub fn from_samples(values: &[f64]) -> Self {
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        if n < 2 {
            return Self { mean, half_width: None };
        }
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let t = StudentsT::new(0.0, 1.0, (n - 1) as f64)
            .expect("positive degrees of freedom")
            .inverse_cdf(0.975);
        Self {
            mean,
            half_width: Some(t * (var / n as f64).sqrt()),
        }
    }

    /// Whether `value` lies inside the confidence interval.
    pub fn covers(&self, value: f64) -> bool {
        match self.half_width {
            Some(h) => (value - self.mean).abs() <= h,
            None => false,
        }
    }

    pub fn lower(&self) -> f64 {
        self.mean - self.half_width.unwrap_or(f64::NAN)
    }

    pub fn upper(&self) -> f64 {
        self.mean + self.half_width.unwrap_or(f64::NAN)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Counts {
    pub arrivals: u64,
    pub accepted: u64,
    pub blocked: u64,
    /// Measured arrivals per action code.
    pub by_action: Vec<u64>,
    /// Arrivals and packet departures over the whole run.
    pub events: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplicationResult {
    pub seed: u64,
    pub stream: u64,
    /// Realized batch delay accrued per second.
    pub delay_rate: f64,
    /// As `delay_rate`, timing each batch to its last completion overall.
    pub makespan_rate: f64,
    /// Model cost `c(s, a)` accrued per second.
    pub model_delay_rate: f64,
    /// `None` when no batch was accepted.
    pub mean_batch_delay: Option<f64>,
    pub blocking_rate: f64,
    pub blocking_per_arrival: f64,
    pub counts: Counts,
    /// Time-weighted occupancy over the window, indexed `s1 * dim_s2 + s2`.
    #[serde(skip)]
    pub occupancy: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimReport {
    pub delay_rate: Estimate,
    pub makespan_rate: Estimate,
    pub model_delay_rate: Estimate,
    /// `None` when some replication accepted nothing.
    pub mean_batch_delay: Option<Estimate>,
    pub blocking_rate: Estimate,
    pub blocking_per_arrival: Estimate,
    pub counts: Counts,
    pub replications: Vec<ReplicationResult>,
}

impl SimReport {
    /// Time-weighted occupancy averaged over replications.
    pub fn occupancy(&self) -> Vec<f64> {
        let n = self.replications.len() as f64;
        let len = self.replications[0].occupancy.len();
        (0..len)
            .map(|i| self.replications.iter().map(|r| r.occupancy[i]).sum::<f64>() / n)
            .collect()
    }
}

/// Realized batch delays against the accrued model cost.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DelayComparison {
    pub realized: Estimate,
    pub model: Estimate,
    /// `|realized − model|`.
    pub gap: f64,
    /// `sqrt(h_realized² + h_model²)`.
    pub joint_half_width: f64,
    pub agree: bool,
}

#[derive(Clone, Copy, PartialEq)]
struct Time(f64);

impl Eq for Time {}

impl PartialOrd for Time {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Time {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0)
    }
}

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum System {
    M,
    S,
}

struct Packet {
    batch: usize,
    /// Last packet of its batch routed to this system.
    tail: bool,
}

struct Station {
    servers: usize,
    rate: f64,
    busy: usize,
    queue: VecDeque<Packet>,
    /// Admissions minus departures, kept apart from `busy` and `queue`.
    admitted: usize,
}

impl Station {
    fn new(servers: usize, rate: f64) -> Self {
        Self {
            servers,
            rate,
            busy: 0,
            queue: VecDeque::new(),
            admitted: 0,
        }
    }

    fn occupancy(&self) -> usize {
        let n = self.busy + self.queue.len();
        debug_assert_eq!(n, self.admitted);
        n
    }
}

struct Batch {
    arrival: f64,
    remaining: usize,
    /// Latest tail-packet completion (plus backhaul delay for S).
    finish: f64,
    /// Latest completion of any packet of the batch.
    makespan: f64,
    measured: bool,
}

#[derive(PartialEq, Eq, PartialOrd, Ord)]
struct Completion {
    time: Time,
    seq: u64,
    system: System,
    batch: usize,
    tail: bool,
}

/// Prepared simulator for one scenario.
pub struct Simulator {
    params: ModelParams,
    space: StateSpace,
    costs: DelayCostTable,
}

impl Simulator {
    pub fn new(params: &ModelParams) -> Result<Self> {
        params.validate()?;
        let space = StateSpace::enumerate(params);
        let costs = DelayCostTable::build(params, &space)?;
        Ok(Self {
            params: params.clone(),
            space,
            costs,
        })
    }

    pub fn with_costs(params: &ModelParams, costs: DelayCostTable) -> Result<Self> {
        params.validate()?;
        Ok(Self {
            params: params.clone(),
            space: StateSpace::enumerate(params),
            costs,
        })
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn run<R: DecisionRule + Sync + ?Sized>(&self, rule: &R, cfg: &SimConfig) -> Result<SimReport> {
        cfg.validate()?;
        self.check_rule(rule)?;
        let reps = (0..cfg.replications as u64)
            .into_par_iter()
            .map(|r| self.replicate(rule, cfg, r, None))
            .collect::<Result<Vec<_>>>()?;
        Ok(aggregate(reps))
    }

    /// Runs replication 0 only, writing the event trace to `out`.
    pub fn run_traced<R: DecisionRule + ?Sized>(
        &self,
        rule: &R,
        cfg: &SimConfig,
        out: &mut dyn Write,
    ) -> Result<ReplicationResult> {
        cfg.validate()?;
        self.check_rule(rule)?;
        self.replicate(rule, cfg, 0, Some(out))
    }

    pub fn realized_vs_model_delay<R: DecisionRule + Sync + ?Sized>(
        &self,
        rule: &R,
        cfg: &SimConfig,
    ) -> Result<DelayComparison> {
        let report = self.run(rule, cfg)?;
        Ok(compare_delays(&report))
    }

    fn check_rule<R: DecisionRule + ?Sized>(&self, rule: &R) -> Result<()> {
        if rule.num_states() != self.space.len() {
            return Err(Error::PolicyShape {
                expected: self.space.len(),
                found: rule.num_states(),
            });
        }
        Ok(())
    }

    fn replicate<R: DecisionRule + ?Sized>(
        &self,
        rule: &R,
        cfg: &SimConfig,
        stream: u64,
        mut trace: Option<&mut dyn Write>,
    ) -> Result<ReplicationResult> {
        let p = &self.params;
        let n = p.max_batch();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(stream);

        let horizon = cfg.horizon;
        let warmup = cfg.warmup();
        let window = horizon - warmup;

        let mut m = Station::new(p.n_m, p.mu_m);
        let mut s = Station::new(p.n_s, p.mu_s);
        let mut batches: Vec<Batch> = Vec::new();
        let mut completions: BinaryHeap<Reverse<Completion>> = BinaryHeap::new();
        let mut seq = 0u64;

        let exp = |rng: &mut ChaCha8Rng, rate: f64| -> f64 {
            let e: f64 = rng.sample(Exp1);
            e / rate
        };
        let draw_arrival = |rng: &mut ChaCha8Rng, now: f64, rate: f64| -> f64 {
            if rate > 0.0 {
                now + exp(rng, rate)
            } else {
                f64::INFINITY
            }
        };
        let mut next_fg = draw_arrival(&mut rng, 0.0, p.lambda_fg);
        let mut next_bg = draw_arrival(&mut rng, 0.0, p.lambda_bg);

        let mut counts = Counts {
            by_action: vec![0; n + 2],
            ..Counts::default()
        };
        let mut delay_sum = 0.0;
        let mut makespan_sum = 0.0;
        let mut model_delay_sum = 0.0;
        let mut blocking_sum = 0.0;
        let mut arrival_weight_sum = 0.0;
        let mut measured_accepted = 0u64;
        let mut occupancy = vec![0.0; self.space.dim_s1() * self.space.dim_s2()];
        let mut now = 0.0f64;

        loop {
            let next_completion = completions.peek().map_or(f64::INFINITY, |c| c.0.time.0);
            let next_arrival = next_fg.min(next_bg);
            let arrival_due = next_arrival <= horizon && next_arrival < next_completion;
            let t = if arrival_due { next_arrival } else { next_completion };
            if !t.is_finite() {
                break;
            }
            debug_assert!(t >= now, "event clock moved backwards");

            // Time-weighted occupancy over [warmup, horizon].
            let (lo, hi) = (now.max(warmup), t.min(horizon));
            if hi > lo {
                occupancy[m.occupancy() * self.space.dim_s2() + s.occupancy()] += hi - lo;
            }
            now = t;
            counts.events += 1;

            if arrival_due {
                let foreground = next_fg <= next_bg;
                if foreground {
                    next_fg = draw_arrival(&mut rng, now, p.lambda_fg);
                } else {
                    next_bg = draw_arrival(&mut rng, now, p.lambda_bg);
                }
                let u: f64 = rng.random();
                let mut size = n;
                let mut acc = 0.0;
                for (i, a) in p.batch_probs.iter().enumerate() {
                    acc += a;
                    if u < acc {
                        size = i + 1;
                        break;
                    }
                }
                let k = if foreground { size } else { n + size };
                let state = State::new(m.occupancy(), s.occupancy(), k);
                let index = self.space.index_of(state).ok_or(Error::PolicyLookup { state })?;
                let weights = rule.action_weights(index);
                let action = match weights.second {
                    Some((alt, w_alt)) if w_alt > 0.0 => {
                        let draw: f64 = rng.random();
                        if draw < weights.first.1 {
                            weights.first.0
                        } else {
                            alt
                        }
                    }
                    _ => weights.first.0,
                };
                let routing = p.routing(state, action)?;
                let measured = now >= warmup;
                if measured {
                    let weight = match p.event(k) {
                        Some(Event::Foreground { .. }) => 1.0 - p.delta,
                        _ => p.delta,
                    };
                    counts.arrivals += 1;
                    counts.by_action[action.0 as usize] += 1;
                    arrival_weight_sum += weight;
                    model_delay_sum += self.costs.get(index, action).ok_or(Error::InfeasibleAction { state, action })?;
                    if routing.is_none() {
                        counts.blocked += 1;
                        blocking_sum += weight;
                    } else {
                        counts.accepted += 1;
                        measured_accepted += 1;
                    }
                }
                if let Some(out) = trace.as_deref_mut() {
                    writeln!(out, "{now:.9}\tarrival\t{}\t{}\t{}\t{}\t-", state.s1, state.s2, k, action.0)?;
                }
                if let Some(r) = routing {
                    let id = batches.len();
                    batches.push(Batch {
                        arrival: now,
                        remaining: r.to_m + r.to_s,
                        finish: now,
                        makespan: now,
                        measured,
                    });
                    for (station, system, count) in [(&mut m, System::M, r.to_m), (&mut s, System::S, r.to_s)] {
                        for i in 0..count {
                            let tail = i + 1 == count;
                            station.admitted += 1;
                            if station.busy < station.servers {
                                station.busy += 1;
                                seq += 1;
                                completions.push(Reverse(Completion {
                                    time: Time(now + exp(&mut rng, station.rate)),
                                    seq,
                                    system,
                                    batch: id,
                                    tail,
                                }));
                            } else {
                                station.queue.push_back(Packet { batch: id, tail });
                            }
                        }
                    }
                }
            } else {
                let Reverse(done) = completions.pop().expect("completion pending");
                let (station, extra) = match done.system {
                    System::M => (&mut m, 0.0),
                    System::S => (&mut s, p.backhaul_delay),
                };
                station.admitted -= 1;
                match station.queue.pop_front() {
                    Some(next) => {
                        seq += 1;
                        completions.push(Reverse(Completion {
                            time: Time(now + exp(&mut rng, station.rate)),
                            seq,
                            system: done.system,
                            batch: next.batch,
                            tail: next.tail,
                        }));
                    }
                    None => station.busy -= 1,
                }
                if let Some(out) = trace.as_deref_mut() {
                    let kind = if done.system == System::M { "departure_m" } else { "departure_s" };
                    writeln!(out, "{now:.9}\t{kind}\t{}\t{}\t0\t0\t-", m.occupancy(), s.occupancy())?;
                }
                let batch = &mut batches[done.batch];
                batch.remaining -= 1;
                if done.tail {
                    batch.finish = batch.finish.max(now + extra);
                }
                batch.makespan = batch.makespan.max(now + extra);
                if batch.remaining == 0 {
                    let delay = batch.finish - batch.arrival;
                    if batch.measured {
                        delay_sum += delay;
                        makespan_sum += batch.makespan - batch.arrival;
                    }
                    if let Some(out) = trace.as_deref_mut() {
                        writeln!(out, "{now:.9}\tbatch_done\t-\t-\t-\t-\t{delay:.9}")?;
                    }
                }
            }
        }
        debug_assert!(batches.iter().all(|b| b.remaining == 0));

        occupancy.iter_mut().for_each(|o| *o /= window);
        Ok(ReplicationResult {
            seed: cfg.seed,
            stream,
            delay_rate: delay_sum / window,
            makespan_rate: makespan_sum / window,
            model_delay_rate: model_delay_sum / window,
            mean_batch_delay: (measured_accepted > 0).then(|| delay_sum / measured_accepted as f64),
            blocking_rate: blocking_sum / window,
            blocking_per_arrival: if arrival_weight_sum > 0.0 {
                blocking_sum / arrival_weight_sum
            } else {
                0.0
            },
            counts,
            occupancy,
        })
    }
}

fn aggregate(reps: Vec<ReplicationResult>) -> SimReport {
    let collect = |f: &dyn Fn(&ReplicationResult) -> f64| -> Vec<f64> { reps.iter().map(f).collect() };
    let batch_delays: Option<Vec<f64>> = reps.iter().map(|r| r.mean_batch_delay).collect();
    let mut counts = Counts {
        by_action: vec![0; reps[0].counts.by_action.len()],
        ..Counts::default()
    };
    for r in &reps {
        counts.arrivals += r.counts.arrivals;
        counts.accepted += r.counts.accepted;
        counts.blocked += r.counts.blocked;
        counts.events += r.counts.events;
        for (total, c) in counts.by_action.iter_mut().zip(&r.counts.by_action) {
            *total += c;
        }
    }
    SimReport {
        delay_rate: Estimate::from_samples(&collect(&|r| r.delay_rate)),
        makespan_rate: Estimate::from_samples(&collect(&|r| r.makespan_rate)),
        model_delay_rate: Estimate::from_samples(&collect(&|r| r.model_delay_rate)),
        mean_batch_delay: batch_delays.map(|v| Estimate::from_samples(&v)),
        blocking_rate: Estimate::from_samples(&collect(&|r| r.blocking_rate)),
        blocking_per_arrival: Estimate::from_samples(&collect(&|r| r.blocking_per_arrival)),
        counts,
        replications: reps,
    }
}

pub fn compare_delays(report: &SimReport) -> DelayComparison {
    let realized = report.delay_rate;
    let model = report.model_delay_rate;
    let gap = (realized.mean - model.mean).abs();
    let joint_half_width = (realized.half_width.unwrap_or(0.0).powi(2) + model.half_width.unwrap_or(0.0).powi(2)).sqrt();
    DelayComparison {
        realized,
        model,
        gap,
        joint_half_width,
        agree: gap <= joint_half_width,
    }
}

/// Convenience wrapper building a [`Simulator`] for one run.
pub fn simulate<R: DecisionRule + Sync + ?Sized>(params: &ModelParams, rule: &R, cfg: &SimConfig) -> Result<SimReport> {
    Simulator::new(params)?.run(rule, cfg)
}

/// Total-variation distance between two distributions on the same support.
pub fn total_variation(a: &[f64], b: &[f64]) -> f64 {
    0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>()
}

/// Action code counts that reconcile: accepted + blocked = arrivals.
pub fn counts_reconcile(c: &Counts) -> bool {
    c.accepted + c.blocked == c.arrivals && c.by_action.iter().sum::<u64>() == c.arrivals && c.by_action[0] == c.blocked
}
