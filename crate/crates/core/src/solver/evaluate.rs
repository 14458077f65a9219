use serde::Serialize;

use super::{DecisionRule, SparseRows, UniformizedModel};
use crate::cost::{blocking_cost, DelayCostTable};
use crate::error::{Error, Result};
use crate::model::{ModelParams, StateSpace};

#[derive(Debug, Clone, Serialize)]
pub struct PolicyEvaluation {
    /// Long-run delay cost per second.
    pub avg_delay: f64,
    /// Long-run weighted blocking per second.
    pub avg_blocking: f64,
    /// `avg_blocking` divided by the weighted arrival rate.
    pub avg_blocking_per_arrival: f64,
    /// Stationary distribution of the uniformized chain.
    #[serde(skip)]
    pub stationary: Vec<f64>,
}

struct MixedState {
    delay: f64,
    blocking: f64,
    sojourn: f64,
}

fn check_shape<R: DecisionRule + ?Sized>(rule: &R, expected: usize) -> Result<()> {
    if rule.num_states() != expected {
        return Err(Error::PolicyShape {
            expected,
            found: rule.num_states(),
        });
    }
    Ok(())
}

/// Exact long-run averages of a stationary rule.
///
/// A randomized rule draws its action once per decision epoch, so its
/// embedded rows, costs and sojourn times are mixed first and the result
/// is uniformized with the mixed sojourn. For deterministic rules this is
/// exactly the model's `T̂` row.
pub fn evaluate_policy<R: DecisionRule + ?Sized>(model: &UniformizedModel, rule: &R) -> Result<PolicyEvaluation> {
    let n = model.num_states();
    check_shape(rule, n)?;
    let tau = model.tau();
    let mut rows = SparseRows::new();
    let mut delay_rate = Vec::with_capacity(n);
    let mut blocking_rate = Vec::with_capacity(n);

    for i in 0..n {
        let weights = rule.action_weights(i);
        let mut picked = Vec::with_capacity(2);
        for (a, w) in weights.iter() {
            let choice = model.choice(i, a).ok_or(Error::InfeasibleAction {
                state: model.state(i),
                action: a,
            })?;
            picked.push((choice, w));
        }
        if let [(choice, _)] = picked[..] {
            rows.push_row(model.uniformized_row(choice).iter().copied());
            delay_rate.push(choice.delay_rate);
            blocking_rate.push(choice.blocking_rate);
            continue;
        }
        let mut mixed = MixedState {
            delay: 0.0,
            blocking: 0.0,
            sojourn: 0.0,
        };
        for &(c, w) in &picked {
            mixed.delay += w * c.delay;
            mixed.blocking += w * c.blocking;
            mixed.sojourn += w * c.sojourn;
        }
        let keep = tau / mixed.sojourn;
        let row = picked
            .iter()
            .flat_map(|&(c, w)| model.embedded_row(c).iter().map(move |&(j, p)| (j, keep * w * p)))
            .chain(std::iter::once((i as u32, 1.0 - keep)));
        rows.push_row(row);
        delay_rate.push(mixed.delay / mixed.sojourn);
        blocking_rate.push(mixed.blocking / mixed.sojourn);
    }

    let stationary = super::stationary_distribution(&rows, model.space())?;
    let avg_delay = stationary.iter().zip(&delay_rate).map(|(m, c)| m * c).sum();
    let avg_blocking: f64 = stationary.iter().zip(&blocking_rate).map(|(m, b)| m * b).sum();
    Ok(PolicyEvaluation {
        avg_delay,
        avg_blocking,
        avg_blocking_per_arrival: avg_blocking / model.params().weighted_arrival_rate(),
        stationary,
    })
}

/// `(C̄, B̄)` of a rule computed on the embedded semi-Markov chain as
/// `Σπc / Σπτ`, without uniformization.
pub fn embedded_averages<R: DecisionRule + ?Sized>(
    params: &ModelParams,
    costs: &DelayCostTable,
    rule: &R,
) -> Result<(f64, f64)> {
    let space = StateSpace::enumerate(params);
    check_shape(rule, space.len())?;
    let mut rows = SparseRows::new();
    let mut mixed = Vec::with_capacity(space.len());
    for (i, &s) in space.states().iter().enumerate() {
        let mut state = MixedState {
            delay: 0.0,
            blocking: 0.0,
            sojourn: 0.0,
        };
        let mut row = Vec::new();
        for (a, w) in rule.action_weights(i).iter() {
            let delay = costs
                .get(i, a)
                .ok_or(Error::InfeasibleAction { state: s, action: a })?;
            state.delay += w * delay;
            state.blocking += w * blocking_cost(params, s, a);
            state.sojourn += w * params.expected_sojourn(s, a)?;
            for e in params.transitions(s, a)? {
                row.push((space.index_of(e.next).expect("in space") as u32, w * e.prob));
            }
        }
        rows.push_row(row);
        mixed.push(state);
    }
    let pi = super::stationary_distribution(&rows, &space)?;
    let time: f64 = pi.iter().zip(&mixed).map(|(p, m)| p * m.sojourn).sum();
    let delay: f64 = pi.iter().zip(&mixed).map(|(p, m)| p * m.delay).sum();
    let blocking: f64 = pi.iter().zip(&mixed).map(|(p, m)| p * m.blocking).sum();
    Ok((delay / time, blocking / time))
}

/// Long-run fraction of time spent at each occupancy `(s1, s2)`, indexed
/// `s1 * dim_s2 + s2`. The sojourn after an epoch is spent at the
/// post-action occupancy.
pub fn occupancy_distribution<R: DecisionRule + ?Sized>(
    model: &UniformizedModel,
    rule: &R,
    evaluation: &PolicyEvaluation,
) -> Result<Vec<f64>> {
    let space = model.space();
    let params = model.params();
    let mut out = vec![0.0; space.dim_s1() * space.dim_s2()];
    for (i, &mass) in evaluation.stationary.iter().enumerate() {
        if mass == 0.0 {
            continue;
        }
        let s = space.state(i);
        let weights = rule.action_weights(i);
        let total: f64 = weights
            .iter()
            .map(|(a, w)| w * model.choice(i, a).map_or(0.0, |c| c.sojourn))
            .sum();
        for (a, w) in weights.iter() {
            let choice = model.choice(i, a).ok_or(Error::InfeasibleAction { state: s, action: a })?;
            let (s1, s2) = params.apply_action(s, a)?;
            out[s1 * space.dim_s2() + s2] += mass * w * choice.sojourn / total;
        }
    }
    Ok(out)
}
