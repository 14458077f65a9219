//! Delay-optimal splitting of dual-connectivity downlink traffic between a
//! macro cell (System M) and a small cell (System S), posed as a
//! constrained semi-Markov decision problem and checked against a
//! discrete-event simulation.

pub mod constrained;
pub mod cost;
mod error;
pub mod experiments;
pub mod model;
pub mod sim;
pub mod solver;

pub use constrained::{solve_constrained, ConstrainedSolveReport, ConstraintBasis, RandomizedMixture, SolveOptions};
pub use cost::{DelayCostTable, ResponseDist};
pub use error::{Error, Result};
pub use model::{Action, Event, ModelParams, State, StateSpace};
pub use sim::{simulate, SimConfig, SimReport, Simulator};
pub use solver::{DecisionRule, Policy, PolicyEvaluation, UniformizedModel, ValueSolution};
