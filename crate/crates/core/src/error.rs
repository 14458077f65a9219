use thiserror::Error;

use crate::model::{Action, State};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParam { name: &'static str, reason: String },

    #[error("state {0:?} lies outside the state space")]
    InvalidState(State),

    #[error("action {action} is not feasible in state {state:?}")]
    InfeasibleAction { state: State, action: Action },

    #[error("{packets} packets cannot join a system holding {occupancy} with capacity {capacity}")]
    CapacityExceeded {
        occupancy: usize,
        packets: usize,
        capacity: usize,
    },

    #[error("quadrature did not converge on [{lower}, {upper}]: error estimate {error_estimate:e} after {evaluations} evaluations")]
    Quadrature {
        lower: f64,
        upper: f64,
        error_estimate: f64,
        evaluations: u32,
    },

    #[error("value iteration did not converge in {iterations} sweeps (last span {span:e})")]
    NotConverged { iterations: usize, span: f64 },

    #[error("policy-induced chain is reducible: {} disjoint closed sets, e.g. {}", .closed_sets.len(), describe_sets(.closed_sets))]
    Reducible { closed_sets: Vec<Vec<State>> },

    #[error("stationary solve failed: {0}")]
    Stationary(String),

    #[error("infeasible constraint: smallest attainable blocking {min_blocking:e} exceeds bound {bound:e}")]
    InfeasibleConstraint { min_blocking: f64, bound: f64 },

    #[error("bracketing policies stay degenerate (blocking {blocking:e}) up to epsilon {epsilon}")]
    DegenerateBracket { blocking: f64, epsilon: f64 },

    #[error("policy has {found} entries but the state space has {expected}")]
    PolicyShape { expected: usize, found: usize },

    #[error("state {state:?} is not covered by the policy")]
    PolicyLookup { state: State },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

fn describe_sets(sets: &[Vec<State>]) -> String {
    sets.iter()
        .take(3)
        .map(|set| {
            let head: Vec<String> = set
                .iter()
                .take(4)
                .map(|s| format!("({},{},{})", s.s1, s.s2, s.k))
                .collect();
            let more = if set.len() > 4 { ", ..." } else { "" };
            format!("{{{}{}}}", head.join(", "), more)
        })
        .collect::<Vec<_>>()
        .join("; ")
}
