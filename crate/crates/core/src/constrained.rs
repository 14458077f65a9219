//! Lagrangian solution of the constrained problem: minimize the average
//! delay subject to the average blocking staying below a bound.
//!
//! The search runs in two phases. The gradient phase applies the projected
//! update `β ← max(0, β + (B̄ − B_max)/n)`. Because `B̄(β)` is non-increasing
//! and piecewise constant, the bracketing phase then brackets the bound
//! between two multipliers and bisects until the policies on either side
//! are adjacent. The optimal policy mixes those two policies per decision
//! epoch with weight `q`.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::cost::DelayCostTable;
use crate::error::{Error, Result};
use crate::model::{Action, Event, ModelParams, StateSpace};
use crate::solver::{
    evaluate_policy, relative_value_iteration_from, uniformize, ActionWeights, DecisionRule, Policy,
    PolicyEvaluation, UniformizedModel,
};

/// Whether the blocking bound is a rate (per second) or a fraction of the
/// weighted arrival rate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintBasis {
    #[default]
    Rate,
    PerArrival,
}

impl ConstraintBasis {
    /// Converts a quantity in this basis to a per-second rate.
    pub fn to_rate(self, params: &ModelParams, value: f64) -> f64 {
        match self {
            ConstraintBasis::Rate => value,
            ConstraintBasis::PerArrival => value * params.weighted_arrival_rate(),
        }
    }

    pub fn from_rate(self, params: &ModelParams, rate: f64) -> f64 {
        match self {
            ConstraintBasis::Rate => rate,
            ConstraintBasis::PerArrival => rate / params.weighted_arrival_rate(),
        }
    }
}

impl std::str::FromStr for ConstraintBasis {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "rate" => Ok(ConstraintBasis::Rate),
            "per_arrival" => Ok(ConstraintBasis::PerArrival),
            other => Err(format!("unknown constraint basis `{other}` (expected rate or per_arrival)")),
        }
    }
}

fn default_tol() -> f64 {
    1e-9
}
fn default_beta0() -> f64 {
    1.0
}
fn default_max_iters() -> usize {
    50
}
fn default_via_max_iters() -> usize {
    1_000_000
}
fn default_tol_b() -> f64 {
    1e-4
}
fn default_beta_cap() -> f64 {
    1e7
}
fn default_bisection_iters() -> usize {
    200
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolveOptions {
    /// Span tolerance of relative value iteration.
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_beta0")]
    pub beta0: f64,
    /// Bracket half-width target; defaults to `max(0.01, 0.01 β*)`.
    #[serde(default)]
    pub epsilon: Option<f64>,
    /// Iterations of the gradient phase.
    #[serde(default = "default_max_iters")]
    pub max_iters: usize,
    #[serde(default = "default_via_max_iters")]
    pub via_max_iters: usize,
    /// Accepted deviation from the bound, in the units of `constraint_basis`.
    #[serde(default = "default_tol_b")]
    pub tol_b: f64,
    /// Largest multiplier tried before the bound is declared infeasible.
    #[serde(default = "default_beta_cap")]
    pub beta_cap: f64,
    #[serde(default = "default_bisection_iters")]
    pub bisection_iters: usize,
    /// Set from the scenario's top-level `constraint_basis`.
    #[serde(skip)]
    pub constraint_basis: ConstraintBasis,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            tol: default_tol(),
            beta0: default_beta0(),
            epsilon: None,
            max_iters: default_max_iters(),
            via_max_iters: default_via_max_iters(),
            tol_b: default_tol_b(),
            beta_cap: default_beta_cap(),
            bisection_iters: default_bisection_iters(),
            constraint_basis: ConstraintBasis::Rate,
        }
    }
}

/// `max(0.01, 0.01 β*)`.
pub fn default_epsilon(beta_star: f64) -> f64 {
    0.01f64.max(0.01 * beta_star)
}

/// Per-epoch randomization between the policies optimal just below and
/// just above `beta_star`: `low` is used with probability `q`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RandomizedMixture {
    pub low: Policy,
    pub high: Policy,
    pub q: f64,
    pub beta_star: f64,
    pub epsilon: f64,
    /// The two components coincide (or `q` is 0 or 1).
    pub deterministic: bool,
}

impl RandomizedMixture {
    pub fn deterministic(policy: Policy, beta: f64) -> Self {
        Self {
            high: policy.clone(),
            low: policy,
            q: 1.0,
            beta_star: beta,
            epsilon: 0.0,
            deterministic: true,
        }
    }

    fn with_q(&self, q: f64) -> Self {
        Self { q, ..self.clone() }
    }
}

impl DecisionRule for RandomizedMixture {
    fn num_states(&self) -> usize {
        self.low.len()
    }

    fn action_weights(&self, state: usize) -> ActionWeights {
        let (a, b) = (self.low.action(state), self.high.action(state));
        if a == b {
            ActionWeights::single(a)
        } else {
            ActionWeights {
                first: (a, self.q),
                second: Some((b, 1.0 - self.q)),
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchPhase {
    Gradient,
    Bracket,
}

#[derive(Debug, Clone, Serialize)]
pub struct BetaStep {
    pub phase: SearchPhase,
    pub iteration: usize,
    pub beta: f64,
    /// Exact `B̄` of the greedy policy at `beta`, per second.
    pub blocking: f64,
    pub delay: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchOutcome {
    /// `B̄` already meets the bound at `β = 0`.
    Inactive,
    /// A deterministic policy met the bound within tolerance.
    Converged,
    /// The bound was bracketed between two adjacent multipliers.
    Bracketed,
}

#[derive(Debug, Clone, Serialize)]
pub struct BetaSearch {
    pub trace: Vec<BetaStep>,
    pub beta_star: f64,
    pub outcome: SearchOutcome,
    /// `(β_lo, β_hi)` with `B̄(β_lo) ≥ bound ≥ B̄(β_hi)`.
    pub bracket: Option<(f64, f64)>,
    /// Why the gradient phase ended.
    pub gradient_stop: GradientStop,
    /// Greedy policies at the two bracket ends.
    #[serde(skip)]
    pub bracket_policies: Option<(Policy, Policy)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientStop {
    Converged,
    Stabilized,
    MaxIters,
    Skipped,
}

/// Greedy policies and their exact evaluations, warm-started in `β`.
struct Lagrangian<'a> {
    model: &'a UniformizedModel,
    tol: f64,
    max_iters: usize,
    warm: Option<Vec<f64>>,
}

impl<'a> Lagrangian<'a> {
    fn new(model: &'a UniformizedModel, tol: f64, max_iters: usize) -> Self {
        Self {
            model,
            tol,
            max_iters,
            warm: None,
        }
    }

    fn at(&mut self, beta: f64) -> Result<(Policy, PolicyEvaluation)> {
        let (policy, solution) =
            relative_value_iteration_from(self.model, beta, self.tol, self.max_iters, self.warm.as_deref())?;
        self.warm = Some(solution.values);
        let eval = evaluate_policy(self.model, &policy)?;
        Ok((policy, eval))
    }
}

/// Whether some policy can avoid positively weighted blocking forever.
/// Explores every accepting action from the empty system; a reachable
/// arrival that can only be blocked and carries blocking weight makes a
/// zero blocking bound unattainable.
pub fn zero_blocking_attainable(params: &ModelParams) -> bool {
    let space = StateSpace::enumerate(params);
    let mut seen = vec![false; space.len()];
    let mut queue = VecDeque::from([0usize]);
    seen[0] = true;
    while let Some(i) = queue.pop_front() {
        let s = space.state(i);
        let feasible = params.feasible_actions(s).expect("enumerated state");
        let weight = match params.event(s.k) {
            Some(Event::Foreground { .. }) => 1.0 - params.delta,
            Some(Event::Background { .. }) => params.delta,
            _ => 0.0,
        };
        if feasible.len() == 1 && s.k != 0 && weight > 0.0 {
            return false;
        }
        let actions: Vec<Action> = if feasible.len() > 1 {
            feasible[1..].to_vec()
        } else {
            feasible
        };
        for a in actions {
            for e in params.transitions(s, a).expect("feasible action") {
                let j = space.index_of(e.next).expect("in space");
                if !seen[j] {
                    seen[j] = true;
                    queue.push_back(j);
                }
            }
        }
    }
    true
}

/// Searches for the multiplier at which the greedy policy's blocking
/// crosses `bound` (per second).
pub fn beta_search(model: &UniformizedModel, bound: f64, opts: &SolveOptions) -> Result<BetaSearch> {
    let tol_b = opts.constraint_basis.to_rate(model.params(), opts.tol_b);
    assert!(opts.beta0 > 0.0 && tol_b > 0.0);
    let mut lagrangian = Lagrangian::new(model, opts.tol, opts.via_max_iters);
    let mut trace = Vec::new();
    let record = |trace: &mut Vec<BetaStep>, phase, beta, eval: &PolicyEvaluation| {
        let iteration = trace.len() + 1;
        trace.push(BetaStep {
            phase,
            iteration,
            beta,
            blocking: eval.avg_blocking,
            delay: eval.avg_delay,
        });
    };

    let (_, at_zero) = lagrangian.at(0.0)?;
    if at_zero.avg_blocking <= bound {
        record(&mut trace, SearchPhase::Gradient, 0.0, &at_zero);
        return Ok(BetaSearch {
            trace,
            beta_star: 0.0,
            outcome: SearchOutcome::Inactive,
            bracket: None,
            gradient_stop: GradientStop::Skipped,
            bracket_policies: None,
        });
    }
    if bound <= 0.0 && !zero_blocking_attainable(model.params()) {
        let (_, at_cap) = lagrangian.at(opts.beta_cap)?;
        return Err(Error::InfeasibleConstraint {
            min_blocking: at_cap.avg_blocking,
            bound,
        });
    }

    // Gradient phase.
    let mut beta = opts.beta0;
    let mut lo = (0.0, at_zero.avg_blocking);
    let mut hi: Option<(f64, f64)> = None;
    let mut gradient_stop = GradientStop::MaxIters;
    for n in 1..=opts.max_iters {
        let (_, eval) = lagrangian.at(beta)?;
        record(&mut trace, SearchPhase::Gradient, beta, &eval);
        let excess = eval.avg_blocking - bound;
        if excess >= 0.0 {
            if beta >= lo.0 {
                lo = (beta, eval.avg_blocking);
            }
        } else if hi.is_none_or(|h| beta <= h.0) {
            hi = Some((beta, eval.avg_blocking));
        }
        if excess.abs() <= tol_b {
            return Ok(BetaSearch {
                trace,
                beta_star: beta,
                outcome: SearchOutcome::Converged,
                bracket: None,
                gradient_stop: GradientStop::Converged,
                bracket_policies: None,
            });
        }
        let next = (beta + excess / n as f64).max(0.0);
        let stable = (next - beta).abs() <= 1e-6 * beta.max(1.0);
        beta = next;
        if stable {
            gradient_stop = GradientStop::Stabilized;
            break;
        }
    }

    // Bracketing phase: grow the upper end until the bound holds.
    let mut hi = match hi {
        Some(h) => h,
        None => {
            let mut b = lo.0.max(opts.beta0);
            loop {
                b = (2.0 * b).min(opts.beta_cap);
                let (_, eval) = lagrangian.at(b)?;
                record(&mut trace, SearchPhase::Bracket, b, &eval);
                if eval.avg_blocking <= bound {
                    break (b, eval.avg_blocking);
                }
                lo = (b, eval.avg_blocking);
                if b >= opts.beta_cap {
                    return Err(Error::InfeasibleConstraint {
                        min_blocking: eval.avg_blocking,
                        bound,
                    });
                }
            }
        }
    };

    let epsilon_target = |b: f64| opts.epsilon.unwrap_or_else(|| default_epsilon(b));
    let (mut lo_policy, _) = lagrangian.at(lo.0)?;
    let (mut hi_policy, _) = lagrangian.at(hi.0)?;
    for _ in 0..opts.bisection_iters {
        let width = hi.0 - lo.0;
        let mid = 0.5 * (lo.0 + hi.0);
        let narrow = width <= 2.0 * epsilon_target(mid);
        let adjacent = lo_policy.differences(&hi_policy) <= 1 || width <= 1e-9 * mid.max(1.0);
        if narrow && adjacent {
            break;
        }
        let (policy, eval) = lagrangian.at(mid)?;
        record(&mut trace, SearchPhase::Bracket, mid, &eval);
        if (eval.avg_blocking - bound).abs() <= tol_b * 1e-3 {
            // The greedy policy sits on the bound itself.
            return Ok(BetaSearch {
                trace,
                beta_star: mid,
                outcome: SearchOutcome::Converged,
                bracket: Some((lo.0, hi.0)),
                gradient_stop,
                bracket_policies: None,
            });
        }
        if eval.avg_blocking >= bound {
            lo = (mid, eval.avg_blocking);
            lo_policy = policy;
        } else {
            hi = (mid, eval.avg_blocking);
            hi_policy = policy;
        }
    }
    Ok(BetaSearch {
        trace,
        beta_star: 0.5 * (lo.0 + hi.0),
        outcome: SearchOutcome::Bracketed,
        bracket: Some((lo.0, hi.0)),
        gradient_stop,
        bracket_policies: Some((lo_policy, hi_policy)),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct MixtureBuild {
    pub mixture: RandomizedMixture,
    pub low: PolicyEvaluation,
    pub high: PolicyEvaluation,
    /// `q` from linear interpolation of the two blocking values.
    pub q_linear: f64,
}

/// Solves at `β* ∓ ε` and mixes so the blocking matches `bound` (per
/// second). If both sides have equal blocking away from the bound, `ε` is
/// doubled up to `beta_star` before giving up.
pub fn build_mixture(
    model: &UniformizedModel,
    beta_star: f64,
    epsilon: f64,
    bound: f64,
    opts: &SolveOptions,
) -> Result<MixtureBuild> {
    assert!(epsilon > 0.0 && beta_star >= epsilon, "need 0 < epsilon <= beta_star");
    let tol_b = opts.constraint_basis.to_rate(model.params(), opts.tol_b);
    let mut lagrangian = Lagrangian::new(model, opts.tol, opts.via_max_iters);
    let mut eps = epsilon;
    loop {
        let (low, low_eval) = lagrangian.at(beta_star - eps)?;
        let (high, high_eval) = lagrangian.at(beta_star + eps)?;
        if low == high {
            return Ok(MixtureBuild {
                mixture: RandomizedMixture {
                    low,
                    high,
                    q: 1.0,
                    beta_star,
                    epsilon: eps,
                    deterministic: true,
                },
                low: low_eval,
                high: high_eval,
                q_linear: 1.0,
            });
        }
        let gap = low_eval.avg_blocking - high_eval.avg_blocking;
        if gap.abs() > f64::EPSILON * bound.abs().max(1.0)
            || (low_eval.avg_blocking - bound).abs() <= tol_b
            || (high_eval.avg_blocking - bound).abs() <= tol_b
        {
            return Ok(mix_evaluated(low, low_eval, high, high_eval, beta_star, eps, bound));
        }
        if 2.0 * eps > beta_star {
            return Err(Error::DegenerateBracket {
                blocking: low_eval.avg_blocking,
                epsilon: eps,
            });
        }
        eps *= 2.0;
    }
}

fn mix_evaluated(
    low: Policy,
    low_eval: PolicyEvaluation,
    high: Policy,
    high_eval: PolicyEvaluation,
    beta_star: f64,
    epsilon: f64,
    bound: f64,
) -> MixtureBuild {
    let gap = low_eval.avg_blocking - high_eval.avg_blocking;
    let q = if gap.abs() > 0.0 {
        ((bound - high_eval.avg_blocking) / gap).clamp(0.0, 1.0)
    } else {
        1.0
    };
    MixtureBuild {
        mixture: RandomizedMixture {
            deterministic: q == 0.0 || q == 1.0 || low == high,
            low,
            high,
            q,
            beta_star,
            epsilon,
        },
        low: low_eval,
        high: high_eval,
        q_linear: q,
    }
}

/// Mixes two already-solved policies so the blocking matches `bound`.
pub fn mixture_between(
    model: &UniformizedModel,
    low: Policy,
    high: Policy,
    beta_star: f64,
    epsilon: f64,
    bound: f64,
) -> Result<MixtureBuild> {
    let low_eval = evaluate_policy(model, &low)?;
    let high_eval = evaluate_policy(model, &high)?;
    Ok(mix_evaluated(low, low_eval, high, high_eval, beta_star, epsilon, bound))
}

#[derive(Debug, Clone, Serialize)]
pub struct ConstrainedSolveReport {
    pub mixture: RandomizedMixture,
    /// Exact `C̄` of the mixture, per second.
    pub avg_delay: f64,
    /// Exact `B̄` of the mixture, per second.
    pub avg_blocking: f64,
    pub avg_blocking_per_arrival: f64,
    pub constraint_basis: ConstraintBasis,
    /// The bound converted to a rate.
    pub bound_rate: f64,
    pub low: PolicyEvaluation,
    pub high: PolicyEvaluation,
    pub q_linear: f64,
    pub search: BetaSearch,
    pub converged: bool,
    pub constraint_active: bool,
}

/// Cost table, uniformized model and solver in one.
pub struct Pipeline {
    pub costs: DelayCostTable,
    pub model: UniformizedModel,
}

impl Pipeline {
    pub fn new(params: &ModelParams) -> Result<Self> {
        params.validate()?;
        let space = StateSpace::enumerate(params);
        let costs = DelayCostTable::build(params, &space)?;
        let model = uniformize(params, &costs)?;
        Ok(Self { costs, model })
    }
}

pub fn solve_constrained(params: &ModelParams, opts: &SolveOptions) -> Result<ConstrainedSolveReport> {
    let pipeline = Pipeline::new(params)?;
    solve_on_model(&pipeline.model, opts)
}

/// End-to-end constrained solve on a prepared model.
pub fn solve_on_model(model: &UniformizedModel, opts: &SolveOptions) -> Result<ConstrainedSolveReport> {
    let params = model.params();
    let basis = opts.constraint_basis;
    let bound = basis.to_rate(params, params.b_max);
    let tol_b = basis.to_rate(params, opts.tol_b);
    let search = beta_search(model, bound, opts)?;

    let build = match (search.outcome, search.bracket, &search.bracket_policies) {
        (SearchOutcome::Bracketed, Some((lo, hi)), Some((low, high))) => {
            // The bracket can be narrower than the value iteration can
            // resolve, so reuse its end policies rather than re-solving.
            mixture_between(model, low.clone(), high.clone(), 0.5 * (lo + hi), 0.5 * (hi - lo), bound)?
        }
        _ => {
            let mut lagrangian = Lagrangian::new(model, opts.tol, opts.via_max_iters);
            let (policy, eval) = lagrangian.at(search.beta_star)?;
            MixtureBuild {
                mixture: RandomizedMixture::deterministic(policy, search.beta_star),
                low: eval.clone(),
                high: eval,
                q_linear: 1.0,
            }
        }
    };

    let q_linear = build.q_linear;
    let mut mixture = build.mixture;
    let mut eval = evaluate_policy(model, &mixture)?;
    if !mixture.deterministic && (eval.avg_blocking - bound).abs() > 0.1 * tol_b {
        // Per-epoch mixing is not exactly linear in q; solve for q on the
        // exact evaluation. B̄ decreases from q = 1 (low) to q = 0 (high).
        let (mut q_lo, mut q_hi) = (0.0, 1.0);
        for _ in 0..60 {
            let q = 0.5 * (q_lo + q_hi);
            let candidate = mixture.with_q(q);
            let e = evaluate_policy(model, &candidate)?;
            if e.avg_blocking > bound {
                q_hi = q;
            } else {
                q_lo = q;
            }
            mixture = candidate;
            eval = e;
            if (eval.avg_blocking - bound).abs() <= 0.01 * tol_b {
                break;
            }
        }
    }

    let constraint_active = search.outcome != SearchOutcome::Inactive;
    let converged = !constraint_active || (eval.avg_blocking - bound).abs() <= tol_b;
    Ok(ConstrainedSolveReport {
        avg_delay: eval.avg_delay,
        avg_blocking: eval.avg_blocking,
        avg_blocking_per_arrival: eval.avg_blocking_per_arrival,
        constraint_basis: basis,
        bound_rate: bound,
        low: build.low,
        high: build.high,
        q_linear,
        mixture,
        search,
        converged,
        constraint_active,
    })
}
