use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Action, ModelParams, State, StateSpace};

/// Actions a stationary rule takes in one state, with probabilities.
/// Deterministic rules leave `second` empty.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActionWeights {
    pub first: (Action, f64),
    pub second: Option<(Action, f64)>,
}

impl ActionWeights {
    pub fn single(a: Action) -> Self {
        Self {
            first: (a, 1.0),
            second: None,
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (Action, f64)> + '_ {
        std::iter::once(self.first)
            .chain(self.second)
            .filter(|(_, w)| *w > 0.0)
    }
}

/// A stationary (possibly randomized) decision rule over state indices.
pub trait DecisionRule {
    fn num_states(&self) -> usize;
    fn action_weights(&self, state: usize) -> ActionWeights;
}

/// Deterministic stationary policy: one action per state index.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Policy {
    actions: Vec<Action>,
}

impl Policy {
    /// Checks every action for feasibility before accepting the vector.
    pub fn new(params: &ModelParams, actions: Vec<Action>) -> Result<Self> {
        let policy = Self { actions };
        policy.validate(params)?;
        Ok(policy)
    }

    pub(crate) fn from_actions_unchecked(actions: Vec<Action>) -> Self {
        Self { actions }
    }

    /// Builds a policy by choosing among the feasible actions of each state.
    pub fn from_fn<F>(params: &ModelParams, mut choose: F) -> Result<Self>
    where
        F: FnMut(State, &[Action]) -> Action,
    {
        let space = StateSpace::enumerate(params);
        let mut actions = Vec::with_capacity(space.len());
        for &s in space.states() {
            let feasible = params.feasible_actions(s)?;
            actions.push(choose(s, &feasible));
        }
        Self::new(params, actions)
    }

    pub fn always_block(params: &ModelParams) -> Self {
        Self {
            actions: vec![Action::BLOCK; StateSpace::enumerate(params).len()],
        }
    }

    pub fn validate(&self, params: &ModelParams) -> Result<()> {
        let space = StateSpace::enumerate(params);
        if self.actions.len() != space.len() {
            return Err(Error::PolicyShape {
                expected: space.len(),
                found: self.actions.len(),
            });
        }
        for (&s, &a) in space.states().iter().zip(&self.actions) {
            if !params.is_feasible(s, a) {
                return Err(Error::InfeasibleAction { state: s, action: a });
            }
        }
        Ok(())
    }

    pub fn action(&self, state: usize) -> Action {
        self.actions[state]
    }

    pub fn actions(&self) -> &[Action] {
        &self.actions
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    /// Number of states where the two policies act differently.
    pub fn differences(&self, other: &Policy) -> usize {
        self.actions
            .iter()
            .zip(&other.actions)
            .filter(|(a, b)| a != b)
            .count()
    }
}

impl DecisionRule for Policy {
    fn num_states(&self) -> usize {
        self.actions.len()
    }

    fn action_weights(&self, state: usize) -> ActionWeights {
        ActionWeights::single(self.actions[state])
    }
}
