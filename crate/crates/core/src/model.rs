//! Scenario parameters, the `(s1, s2, k)` state space, feasible routing
//! actions and the embedded-chain transition kernel.
//!
//! System M is the macro cell and System S the small cell. Each is an
//! M/M/n queue with `queue_cap` waiting places. Event tags `k` label the
//! epoch that produced the state: `0` is a packet departure, `1..=n` a
//! foreground batch of size `k` and `n+1..=2n` a background batch of size
//! `k - n`, where `n` is the largest batch size.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn default_queue_cap() -> usize {
    10
}

fn default_backhaul_delay() -> f64 {
    0.5
}

/// All constants describing one scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelParams {
    /// Foreground (dual-connectivity) batch arrival rate, batches/s.
    pub lambda_fg: f64,
    /// Background (macro-only) batch arrival rate, batches/s.
    pub lambda_bg: f64,
    /// Per-server service rate in System M.
    pub mu_m: f64,
    /// Per-server service rate in System S.
    pub mu_s: f64,
    pub n_m: usize,
    pub n_s: usize,
    /// Waiting places beyond the servers, identical for both systems.
    #[serde(default = "default_queue_cap")]
    pub queue_cap: usize,
    /// One-way MeNB to SeNB latency in seconds.
    #[serde(default = "default_backhaul_delay")]
    pub backhaul_delay: f64,
    /// `batch_probs[i]` is the probability of a batch of `i + 1` packets.
    pub batch_probs: Vec<f64>,
    /// Weight of background blocking; foreground blocking weighs `1 - delta`.
    pub delta: f64,
    pub b_max: f64,
}

impl ModelParams {
    /// The reference scenario: n1 = n2 = 6, N = 10, d = 0.5 s.
    pub fn table_ii() -> Self {
        Self {
            lambda_fg: 6.67,
            lambda_bg: 1.0,
            mu_m: 1.0,
            mu_s: 1.5,
            n_m: 6,
            n_s: 6,
            queue_cap: default_queue_cap(),
            backhaul_delay: default_backhaul_delay(),
            batch_probs: vec![0.5, 0.5],
            delta: 0.5,
            b_max: 0.02,
        }
    }

    pub fn validate(&self) -> Result<()> {
        fn bad(name: &'static str, reason: impl Into<String>) -> Error {
            Error::InvalidParam {
                name,
                reason: reason.into(),
            }
        }
        for (name, v) in [("lambda_fg", self.lambda_fg), ("lambda_bg", self.lambda_bg)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(bad(name, format!("arrival rate must be finite and >= 0, got {v}")));
            }
        }
        if self.lambda_fg + self.lambda_bg <= 0.0 {
            return Err(bad("lambda_fg", "at least one arrival stream must have a positive rate"));
        }
        for (name, v) in [("mu_m", self.mu_m), ("mu_s", self.mu_s)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(bad(name, format!("service rate must be finite and > 0, got {v}")));
            }
        }
        if self.n_m == 0 {
            return Err(bad("n_m", "at least one server is required"));
        }
        if self.n_s == 0 {
            return Err(bad("n_s", "at least one server is required"));
        }
        if !(self.backhaul_delay.is_finite() && self.backhaul_delay >= 0.0) {
            return Err(bad("backhaul_delay", format!("must be finite and >= 0, got {}", self.backhaul_delay)));
        }
        if self.batch_probs.is_empty() {
            return Err(bad("batch_probs", "at least one batch size is required"));
        }
        if let Some(p) = self.batch_probs.iter().find(|p| !(p.is_finite() && **p >= 0.0)) {
            return Err(bad("batch_probs", format!("entries must be >= 0, got {p}")));
        }
        let total: f64 = self.batch_probs.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(bad("batch_probs", format!("entries must sum to 1, got {total}")));
        }
        if !(0.0..=1.0).contains(&self.delta) {
            return Err(bad("delta", format!("must lie in [0, 1], got {}", self.delta)));
        }
        if !(self.b_max.is_finite() && self.b_max >= 0.0) {
            return Err(bad("b_max", format!("must be finite and >= 0, got {}", self.b_max)));
        }
        Ok(())
    }

    /// Largest batch size `n`.
    pub fn max_batch(&self) -> usize {
        self.batch_probs.len()
    }

    /// Mean batch size `Σ i·α_i`.
    pub fn mean_batch_size(&self) -> f64 {
        self.batch_probs
            .iter()
            .enumerate()
            .map(|(i, p)| (i + 1) as f64 * p)
            .sum()
    }

    pub fn capacity_m(&self) -> usize {
        self.n_m + self.queue_cap
    }

    pub fn capacity_s(&self) -> usize {
        self.n_s + self.queue_cap
    }

    /// Number of event tags, `2n + 1`.
    pub fn num_tags(&self) -> usize {
        2 * self.max_batch() + 1
    }

    /// Arrival rate weighted by the blocking weights, `δλ₂ + (1−δ)λ₁`.
    /// Blocking every arrival costs exactly this much per second.
    pub fn weighted_arrival_rate(&self) -> f64 {
        self.delta * self.lambda_bg + (1.0 - self.delta) * self.lambda_fg
    }

    pub fn event(&self, k: usize) -> Option<Event> {
        let n = self.max_batch();
        match k {
            0 => Some(Event::Departure),
            k if k <= n => Some(Event::Foreground { size: k }),
            k if k <= 2 * n => Some(Event::Background { size: k - n }),
            _ => None,
        }
    }

    pub fn contains(&self, s: State) -> bool {
        s.s1 <= self.capacity_m() && s.s2 <= self.capacity_s() && s.k < self.num_tags()
    }

    fn check_state(&self, s: State) -> Result<Event> {
        if !self.contains(s) {
            return Err(Error::InvalidState(s));
        }
        Ok(self.event(s.k).expect("tag checked by contains"))
    }

    /// Sum of arrival and departure rates at the given occupancy.
    pub fn total_rate(&self, s1: usize, s2: usize) -> f64 {
        self.lambda_fg
            + self.lambda_bg
            + s1.min(self.n_m) as f64 * self.mu_m
            + s2.min(self.n_s) as f64 * self.mu_s
    }

    /// Largest value `total_rate` can take.
    pub fn max_total_rate(&self) -> f64 {
        self.total_rate(self.n_m, self.n_s)
    }

    /// Packet split encoded by `a` in state `s`, or `None` for block / do nothing.
    pub fn routing(&self, s: State, a: Action) -> Result<Option<Routing>> {
        let event = self.check_state(s)?;
        let infeasible = || Error::InfeasibleAction { state: s, action: a };
        if a == Action::BLOCK {
            return Ok(None);
        }
        let to_m = a.0 as usize - 1;
        let routing = match event {
            Event::Departure => return Err(infeasible()),
            Event::Foreground { size } if to_m <= size => Routing {
                to_m,
                to_s: size - to_m,
            },
            Event::Background { size } if to_m == size => Routing { to_m, to_s: 0 },
            _ => return Err(infeasible()),
        };
        if s.s1 + routing.to_m > self.capacity_m() || s.s2 + routing.to_s > self.capacity_s() {
            return Err(infeasible());
        }
        Ok(Some(routing))
    }

    pub fn is_feasible(&self, s: State, a: Action) -> bool {
        self.routing(s, a).is_ok()
    }

    /// Feasible actions in ascending code order. Block is always included.
    pub fn feasible_actions(&self, s: State) -> Result<Vec<Action>> {
        let event = self.check_state(s)?;
        let mut actions = vec![Action::BLOCK];
        match event {
            Event::Departure => {}
            Event::Foreground { size } => {
                for j in 0..=size {
                    if s.s1 + j <= self.capacity_m() && s.s2 + size - j <= self.capacity_s() {
                        actions.push(Action::accept(j));
                    }
                }
            }
            Event::Background { size } => {
                if s.s1 + size <= self.capacity_m() {
                    actions.push(Action::accept(size));
                }
            }
        }
        Ok(actions)
    }

    /// Occupancy `(s1', s2')` right after taking `a` in `s`.
    pub fn apply_action(&self, s: State, a: Action) -> Result<(usize, usize)> {
        Ok(match self.routing(s, a)? {
            None => (s.s1, s.s2),
            Some(r) => (s.s1 + r.to_m, s.s2 + r.to_s),
        })
    }

    /// Distribution of the next decision-epoch state. Rows depend only on
    /// the post-action occupancy; zero-probability entries are omitted.
    pub fn transitions(&self, s: State, a: Action) -> Result<Vec<TransitionEntry>> {
        let (s1, s2) = self.apply_action(s, a)?;
        Ok(self.transitions_from(s1, s2))
    }

    pub(crate) fn transitions_from(&self, s1: usize, s2: usize) -> Vec<TransitionEntry> {
        let nu = self.total_rate(s1, s2);
        let n = self.max_batch();
        let mut out = Vec::with_capacity(2 * n + 2);
        if s1 > 0 {
            out.push(TransitionEntry {
                next: State::new(s1 - 1, s2, 0),
                prob: s1.min(self.n_m) as f64 * self.mu_m / nu,
            });
        }
        if s2 > 0 {
            out.push(TransitionEntry {
                next: State::new(s1, s2 - 1, 0),
                prob: s2.min(self.n_s) as f64 * self.mu_s / nu,
            });
        }
        for (offset, lambda) in [(0, self.lambda_fg), (n, self.lambda_bg)] {
            for (i, alpha) in self.batch_probs.iter().enumerate() {
                let rate = lambda * alpha;
                if rate > 0.0 {
                    out.push(TransitionEntry {
                        next: State::new(s1, s2, offset + i + 1),
                        prob: rate / nu,
                    });
                }
            }
        }
        out
    }

    /// Expected time to the next decision epoch after taking `a` in `s`.
    pub fn expected_sojourn(&self, s: State, a: Action) -> Result<f64> {
        let (s1, s2) = self.apply_action(s, a)?;
        Ok(1.0 / self.total_rate(s1, s2))
    }
}

/// What happened at a decision epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Event {
    Departure,
    Foreground { size: usize },
    Background { size: usize },
}

impl Event {
    pub fn batch_size(self) -> usize {
        match self {
            Event::Departure => 0,
            Event::Foreground { size } | Event::Background { size } => size,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct State {
    /// Packets in System M, queued or in service.
    pub s1: usize,
    /// Packets in System S, queued or in service.
    pub s2: usize,
    pub k: usize,
}

impl State {
    pub const fn new(s1: usize, s2: usize, k: usize) -> Self {
        Self { s1, s2, k }
    }
}

/// Integer action code. `0` blocks (or does nothing at a departure);
/// `j + 1` sends `j` packets of the batch to System M and the rest to S.
/// For a batch of two this gives 1 = all to S, 2 = split, 3 = all to M.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Action(pub u8);

impl Action {
    pub const BLOCK: Action = Action(0);

    /// Accept the batch with `to_m` packets going to System M.
    pub fn accept(to_m: usize) -> Self {
        Action(u8::try_from(to_m + 1).expect("batch size fits in an action code"))
    }

    pub fn code(self) -> u8 {
        self.0
    }

    pub fn is_block(self) -> bool {
        self.0 == 0
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "a={}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Routing {
    pub to_m: usize,
    pub to_s: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransitionEntry {
    pub next: State,
    pub prob: f64,
}

/// Enumerated state space in lexicographic `(s1, s2, k)` order.
#[derive(Debug, Clone)]
pub struct StateSpace {
    dim_s2: usize,
    tags: usize,
    states: Vec<State>,
}

impl StateSpace {
    pub fn enumerate(params: &ModelParams) -> Self {
        let dim_s1 = params.capacity_m() + 1;
        let dim_s2 = params.capacity_s() + 1;
        let tags = params.num_tags();
        let mut states = Vec::with_capacity(dim_s1 * dim_s2 * tags);
        for s1 in 0..dim_s1 {
            for s2 in 0..dim_s2 {
                for k in 0..tags {
                    states.push(State::new(s1, s2, k));
                }
            }
        }
        Self {
            dim_s2,
            tags,
            states,
        }
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn states(&self) -> &[State] {
        &self.states
    }

    pub fn state(&self, index: usize) -> State {
        self.states[index]
    }

    pub fn dim_s1(&self) -> usize {
        self.states.len() / (self.dim_s2 * self.tags)
    }

    pub fn dim_s2(&self) -> usize {
        self.dim_s2
    }

    pub fn tags(&self) -> usize {
        self.tags
    }

    pub fn index_of(&self, s: State) -> Option<usize> {
        if s.s2 >= self.dim_s2 || s.k >= self.tags || s.s1 >= self.dim_s1() {
            return None;
        }
        Some((s.s1 * self.dim_s2 + s.s2) * self.tags + s.k)
    }
}
