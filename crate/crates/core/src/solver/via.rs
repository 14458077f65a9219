use serde::Serialize;

use super::{Policy, UniformizedModel};
use crate::error::{Error, Result};
use crate::model::Action;

/// Values closer than this (relative) count as a tie; the smaller action
/// code wins ties.
const TIE_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Serialize)]
pub struct ValueSolution {
    /// Relative values, anchored at state index 0.
    pub values: Vec<f64>,
    /// Average cost per second, midpoint of the final span bounds.
    pub gain: f64,
    pub iterations: usize,
    pub span: f64,
}

/// Relative value iteration for `ĥ = ĉ + β b̂`, starting from zero values.
pub fn relative_value_iteration(
    model: &UniformizedModel,
    beta: f64,
    tol: f64,
    max_iters: usize,
) -> Result<(Policy, ValueSolution)> {
    relative_value_iteration_from(model, beta, tol, max_iters, None)
}

/// As [`relative_value_iteration`], warm-started from `initial` values.
///
/// Each sweep computes `W = min_a {ĥ + T̂ V}` into a second buffer and
/// stops once `span(W − V) ≤ tol · max(1, |g|)`.
pub fn relative_value_iteration_from(
    model: &UniformizedModel,
    beta: f64,
    tol: f64,
    max_iters: usize,
    initial: Option<&[f64]>,
) -> Result<(Policy, ValueSolution)> {
    assert!(tol > 0.0, "tolerance must be positive");
    assert!(beta >= 0.0, "multiplier must be non-negative");
    let n = model.num_states();
    let mut values = match initial {
        Some(v) if v.len() == n => v.to_vec(),
        _ => vec![0.0; n],
    };
    let mut next = vec![0.0; n];
    let mut actions = vec![Action::BLOCK; n];
    let mut span = f64::INFINITY;

    for iteration in 1..=max_iters {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for i in 0..n {
            let mut best = f64::INFINITY;
            let mut best_action = Action::BLOCK;
            for choice in model.choices(i) {
                let expected: f64 = model
                    .uniformized_row(choice)
                    .iter()
                    .map(|&(j, p)| p * values[j as usize])
                    .sum();
                let q = UniformizedModel::lagrangian_rate(choice, beta) + expected;
                if best == f64::INFINITY || q < best - TIE_TOL * best.abs().max(1.0) {
                    best = q;
                    best_action = choice.action;
                }
            }
            next[i] = best;
            actions[i] = best_action;
            let diff = best - values[i];
            lo = lo.min(diff);
            hi = hi.max(diff);
        }
        span = hi - lo;
        let gain = 0.5 * (lo + hi);
        let anchor = next[0];
        for (v, w) in values.iter_mut().zip(&next) {
            *v = w - anchor;
        }
        if span <= tol * gain.abs().max(1.0) {
            return Ok((
                Policy::from_actions_unchecked(actions),
                ValueSolution {
                    values,
                    gain,
                    iterations: iteration,
                    span,
                },
            ));
        }
    }
    Err(Error::NotConverged {
        iterations: max_iters,
        span,
    })
}
