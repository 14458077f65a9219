//! Uniformized discrete-time model, relative value iteration and exact
//! evaluation of stationary policies.

mod evaluate;
mod policy;
mod stationary;
mod via;

pub use evaluate::{embedded_averages, evaluate_policy, occupancy_distribution, PolicyEvaluation};
pub use policy::{ActionWeights, DecisionRule, Policy};
pub use stationary::{stationary_distribution, SparseRows};
pub use via::{relative_value_iteration, relative_value_iteration_from, ValueSolution};

use std::ops::Range;

use crate::cost::{blocking_cost, DelayCostTable};
use crate::error::Result;
use crate::model::{Action, ModelParams, State, StateSpace};

/// Fraction of `1 / ν_max` used as the default uniformization constant.
pub const DEFAULT_TAU_FACTOR: f64 = 0.999;

/// One feasible `(state, action)` pair with raw and transformed data.
#[derive(Debug, Clone)]
pub struct Choice {
    pub action: Action,
    /// `c(s, a)`, seconds.
    pub delay: f64,
    /// `b(s, a)`.
    pub blocking: f64,
    /// `τ(s, a)`, seconds.
    pub sojourn: f64,
    /// `c(s, a) / τ(s, a)`.
    pub delay_rate: f64,
    /// `b(s, a) / τ(s, a)`.
    pub blocking_rate: f64,
    embedded: Range<usize>,
    uniformized: Range<usize>,
}

/// Discrete-time model obtained by uniformizing the SMDP with constant `τ`.
#[derive(Debug, Clone)]
pub struct UniformizedModel {
    params: ModelParams,
    space: StateSpace,
    tau: f64,
    state_choices: Vec<usize>,
    choices: Vec<Choice>,
    embedded: Vec<(u32, f64)>,
    uniformized: Vec<(u32, f64)>,
}

/// Uniformizes with the default `τ = 0.999 / ν_max`.
pub fn uniformize(params: &ModelParams, costs: &DelayCostTable) -> Result<UniformizedModel> {
    uniformize_with_tau(params, costs, DEFAULT_TAU_FACTOR / params.max_total_rate())
}

pub fn uniformize_with_tau(params: &ModelParams, costs: &DelayCostTable, tau: f64) -> Result<UniformizedModel> {
    params.validate()?;
    let space = StateSpace::enumerate(params);
    let min_sojourn = 1.0 / params.max_total_rate();
    assert!(
        tau > 0.0 && tau < min_sojourn,
        "uniformization constant {tau} must lie in (0, {min_sojourn})"
    );

    let mut state_choices = Vec::with_capacity(space.len() + 1);
    let mut choices = Vec::new();
    let mut embedded = Vec::new();
    let mut uniformized = Vec::new();
    state_choices.push(0);
    for (i, &s) in space.states().iter().enumerate() {
        for a in params.feasible_actions(s)? {
            let delay = costs
                .get(i, a)
                .expect("cost table covers every feasible action");
            let blocking = blocking_cost(params, s, a);
            let sojourn = params.expected_sojourn(s, a)?;
            let keep = tau / sojourn;

            let e_start = embedded.len();
            let u_start = uniformized.len();
            let mut diagonal_seen = false;
            for entry in params.transitions(s, a)? {
                let j = space.index_of(entry.next).expect("targets stay in the state space") as u32;
                embedded.push((j, entry.prob));
                let mut p = keep * entry.prob;
                if j as usize == i {
                    p += 1.0 - keep;
                    diagonal_seen = true;
                }
                uniformized.push((j, p));
            }
            if !diagonal_seen {
                uniformized.push((i as u32, 1.0 - keep));
            }
            choices.push(Choice {
                action: a,
                delay,
                blocking,
                sojourn,
                delay_rate: delay / sojourn,
                blocking_rate: blocking / sojourn,
                embedded: e_start..embedded.len(),
                uniformized: u_start..uniformized.len(),
            });
        }
        state_choices.push(choices.len());
    }
    Ok(UniformizedModel {
        params: params.clone(),
        space,
        tau,
        state_choices,
        choices,
        embedded,
        uniformized,
    })
}

impl UniformizedModel {
    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn space(&self) -> &StateSpace {
        &self.space
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn num_states(&self) -> usize {
        self.space.len()
    }

    /// Feasible choices of a state, in ascending action code.
    pub fn choices(&self, state: usize) -> &[Choice] {
        &self.choices[self.state_choices[state]..self.state_choices[state + 1]]
    }

    pub fn choice(&self, state: usize, action: Action) -> Option<&Choice> {
        self.choices(state).iter().find(|c| c.action == action)
    }

    /// Row of `T̂(a)`; stochastic and includes the uniformization self-loop.
    pub fn uniformized_row(&self, choice: &Choice) -> &[(u32, f64)] {
        &self.uniformized[choice.uniformized.clone()]
    }

    /// Row of the embedded kernel `T(a)`.
    pub fn embedded_row(&self, choice: &Choice) -> &[(u32, f64)] {
        &self.embedded[choice.embedded.clone()]
    }

    pub fn state(&self, index: usize) -> State {
        self.space.state(index)
    }

    /// `ĥ(s, a; β) = ĉ + β b̂`.
    pub fn lagrangian_rate(choice: &Choice, beta: f64) -> f64 {
        choice.delay_rate + beta * choice.blocking_rate
    }
}
