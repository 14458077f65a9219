//! Per-decision costs.
//!
//! The delay cost of accepting a batch is the expected response time of
//! its last packet, `E[max(R_m, R_s)]`. A packet that lands at queue
//! position `p` (0-based, counting packets already present) in a system
//! with `n` servers of rate `μ` starts service at once if `p < n`;
//! otherwise it waits for `p − n + 1` departures, each exponential with rate
//! `nμ`, and is then served at rate `μ`. Packets sent to System S also pay
//! the constant backhaul delay. The response time is therefore a shifted
//! Erlang-plus-exponential variable, and the expected maximum is computed
//! as `∫ (1 − F_m(t) F_s(t)) dt` from closed-form survival functions.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::Exp1;
use rayon::prelude::*;
use serde::Serialize;
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::model::{Action, Event, ModelParams, State, StateSpace};

/// Relative accuracy used when precomputing cost tables.
pub const DEFAULT_REL_TOL: f64 = 1e-8;

/// Response-time distribution of the last packet routed to one system.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum ResponseDist {
    /// Nothing was routed; the response time is identically zero.
    Zero,
    /// `shift + Erlang(wait_stages, wait_rate) + Exp(service_rate)`.
    Phased {
        wait_stages: u32,
        wait_rate: f64,
        service_rate: f64,
        shift: f64,
    },
}

impl ResponseDist {
    pub fn exponential(rate: f64) -> Self {
        ResponseDist::Phased {
            wait_stages: 0,
            wait_rate: rate,
            service_rate: rate,
            shift: 0.0,
        }
    }

    pub fn mean(&self) -> f64 {
        match *self {
            ResponseDist::Zero => 0.0,
            ResponseDist::Phased {
                wait_stages,
                wait_rate,
                service_rate,
                shift,
            } => shift + wait_stages as f64 / wait_rate + 1.0 / service_rate,
        }
    }

    pub fn shift(&self) -> f64 {
        match *self {
            ResponseDist::Zero => 0.0,
            ResponseDist::Phased { shift, .. } => shift,
        }
    }

    /// `P(R > t)`.
    pub fn survival(&self, t: f64) -> f64 {
        match *self {
            ResponseDist::Zero => {
                if t < 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            ResponseDist::Phased {
                wait_stages,
                wait_rate,
                service_rate,
                shift,
            } => {
                if t <= shift {
                    1.0
                } else {
                    erlang_exp_survival(wait_stages, wait_rate, service_rate, t - shift)
                }
            }
        }
    }

    pub fn cdf(&self, t: f64) -> f64 {
        1.0 - self.survival(t)
    }

    /// Draws one response time by summing the exponential stages.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            ResponseDist::Zero => 0.0,
            ResponseDist::Phased {
                wait_stages,
                wait_rate,
                service_rate,
                shift,
            } => {
                let mut wait = 0.0;
                for _ in 0..wait_stages {
                    let e: f64 = rng.sample(Exp1);
                    wait += e;
                }
                let service: f64 = rng.sample(Exp1);
                shift + wait / wait_rate + service / service_rate
            }
        }
    }

    /// Rate of the slowest exponential stage; bounds the tail decay.
    fn slowest_rate(&self) -> Option<f64> {
        match *self {
            ResponseDist::Zero => None,
            ResponseDist::Phased {
                wait_stages,
                wait_rate,
                service_rate,
                ..
            } if wait_stages > 0 => Some(wait_rate.min(service_rate)),
            ResponseDist::Phased { service_rate, .. } => Some(service_rate),
        }
    }

    fn stages(&self) -> u32 {
        match *self {
            ResponseDist::Zero => 0,
            ResponseDist::Phased { wait_stages, .. } => wait_stages + 1,
        }
    }
}

fn ln_poisson(j: u32, x: f64) -> f64 {
    if x == 0.0 {
        return if j == 0 { 0.0 } else { f64::NEG_INFINITY };
    }
    j as f64 * x.ln() - x - ln_gamma(j as f64 + 1.0)
}

/// `P(Poisson(x) < m)`, the survival function of `Erlang(m, 1)` at `x`.
fn poisson_cdf_below(m: u32, x: f64) -> f64 {
    (0..m).map(|j| ln_poisson(j, x).exp()).sum::<f64>().min(1.0)
}

/// `Σ_{i≥0} x^i m! / (m+i)!`, for `x` not much larger than `m`.
fn tail_ratio_series(m: u32, x: f64) -> f64 {
    let mut term = 1.0;
    let mut sum = 1.0;
    let mut i = 0u32;
    loop {
        i += 1;
        term *= x / (m + i) as f64;
        sum += term;
        if term <= 1e-17 * sum {
            return sum;
        }
    }
}

/// `E[1 / (m + J)]` for `J ~ Poisson(y)`.
fn poisson_mean_reciprocal(m: u32, y: f64) -> f64 {
    if y == 0.0 {
        return 1.0 / m as f64;
    }
    // Sum outward from the mode so large `y` neither underflows nor overflows.
    let mode = y.floor() as u32;
    let p_mode = ln_poisson(mode, y).exp();
    let mut sum = p_mode / (m + mode) as f64;
    let mut p = p_mode;
    let mut j = mode;
    while j > 0 {
        p *= j as f64 / y;
        j -= 1;
        let term = p / (m + j) as f64;
        sum += term;
        if term <= 1e-18 * sum {
            break;
        }
    }
    let mut p = p_mode;
    let mut j = mode;
    loop {
        j += 1;
        p *= y / j as f64;
        let term = p / (m + j) as f64;
        sum += term;
        if term <= 1e-18 * sum && j as f64 > y {
            break;
        }
    }
    sum
}

/// `P(W + X > t)` for `W ~ Erlang(m, a)` and `X ~ Exp(b)`, `t ≥ 0`.
///
/// Split as `P(W > t) + P(W ≤ t < W + X)`. The second term is written as a
/// sum of positive quantities in each rate regime so the function stays
/// accurate when `a` and `b` are close or equal.
pub(crate) fn erlang_exp_survival(m: u32, a: f64, b: f64, t: f64) -> f64 {
    if t <= 0.0 {
        return 1.0;
    }
    if m == 0 {
        return (-b * t).exp();
    }
    let head = poisson_cdf_below(m, a * t);
    let mf = m as f64;
    let tail = if a == b {
        ln_poisson(m, a * t).exp()
    } else if a > b {
        let x = (a - b) * t;
        if x < mf + 1.0 {
            // e^{-at} (at)^m / m! · Σ_i x^i m!/(m+i)!
            (ln_poisson(m, a * t) + tail_ratio_series(m, x).ln()).exp()
        } else {
            // e^{-bt} (a/(a-b))^m P(Poisson(x) ≥ m)
            let upper = 1.0 - poisson_cdf_below(m, x);
            (-b * t + mf * (a / (a - b)).ln() + upper.ln()).exp()
        }
    } else {
        mf * ln_poisson(m, a * t).exp() * poisson_mean_reciprocal(m, (b - a) * t)
    };
    (head + tail).min(1.0)
}

/// Distribution of the response time of the last of `packets_routed`
/// packets joining a system that already holds `occupancy_before`.
pub fn response_dist(
    servers: usize,
    rate: f64,
    occupancy_before: usize,
    packets_routed: usize,
    shift: f64,
    queue_cap: usize,
) -> Result<ResponseDist> {
    let capacity = servers + queue_cap;
    if occupancy_before + packets_routed > capacity {
        return Err(Error::CapacityExceeded {
            occupancy: occupancy_before,
            packets: packets_routed,
            capacity,
        });
    }
    if packets_routed == 0 {
        return Ok(ResponseDist::Zero);
    }
    let position = occupancy_before + packets_routed - 1;
    let wait_stages = if position < servers {
        0
    } else {
        (position - servers + 1) as u32
    };
    Ok(ResponseDist::Phased {
        wait_stages,
        wait_rate: servers as f64 * rate,
        service_rate: rate,
        shift,
    })
}

const MAX_SPLIT_DEPTH: u32 = 24;

fn integrate_adaptive<F: Fn(f64) -> f64 + Copy>(
    f: F,
    lower: f64,
    upper: f64,
    abs_tol: f64,
    depth: u32,
) -> Result<f64> {
    let out = quadrature::integrate(f, lower, upper, abs_tol);
    if out.error_estimate <= abs_tol {
        return Ok(out.integral);
    }
    if depth >= MAX_SPLIT_DEPTH {
        return Err(Error::Quadrature {
            lower,
            upper,
            error_estimate: out.error_estimate,
            evaluations: out.num_function_evaluations,
        });
    }
    let mid = 0.5 * (lower + upper);
    Ok(integrate_adaptive(f, lower, mid, 0.5 * abs_tol, depth + 1)?
        + integrate_adaptive(f, mid, upper, 0.5 * abs_tol, depth + 1)?)
}

/// `E[max(A, B)]` for independent `A ~ dm`, `B ~ ds`.
pub fn expected_max(dm: &ResponseDist, ds: &ResponseDist, rel_tol: f64) -> Result<f64> {
    assert!(
        rel_tol > 0.0 && rel_tol <= 1e-3,
        "rel_tol must lie in (0, 1e-3], got {rel_tol}"
    );
    let rates: Vec<f64> = [dm, ds].iter().filter_map(|d| d.slowest_rate()).collect();
    if rates.is_empty() {
        return Ok(0.0);
    }
    let slowest = rates.iter().copied().fold(f64::INFINITY, f64::min);
    let stages = dm.stages().max(ds.stages()) as f64;

    // Below the larger shift one of the two survivals is 1, so is the integrand.
    let lower = dm.shift().max(ds.shift());
    let integrand = |t: f64| {
        let (sa, sb) = (dm.survival(t), ds.survival(t));
        sa + sb - sa * sb
    };

    let scale = dm.mean().max(ds.mean());
    let step = (scale - lower).max(1.0 / slowest);
    let mut upper = lower + step;
    // Tail beyond `upper` is at most about integrand(upper) · stages / slowest.
    while integrand(upper) * stages / slowest > 1e-12 * scale {
        upper += step;
    }
    let body = integrate_adaptive(integrand, lower, upper, 0.1 * rel_tol * scale, 0)?;
    Ok(lower + body)
}

/// Monte Carlo estimate of `E[max(A, B)]`: `(mean, standard error)`.
pub fn mc_delay_oracle(dm: &ResponseDist, ds: &ResponseDist, samples: u64, seed: u64) -> (f64, f64) {
    use rand::SeedableRng;
    assert!(samples >= 2, "need at least two samples");
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut mean = 0.0;
    let mut m2 = 0.0;
    for i in 0..samples {
        let x = dm.sample(&mut rng).max(ds.sample(&mut rng));
        let delta = x - mean;
        mean += delta / (i + 1) as f64;
        m2 += delta * (x - mean);
    }
    let var = m2 / (samples - 1) as f64;
    (mean, (var / samples as f64).sqrt())
}

/// Response distributions of the M-side and S-side portions of a batch
/// accepted with action `a` in state `s`.
pub fn split_response(params: &ModelParams, s: State, a: Action) -> Result<Option<(ResponseDist, ResponseDist)>> {
    let Some(route) = params.routing(s, a)? else {
        return Ok(None);
    };
    let dm = response_dist(params.n_m, params.mu_m, s.s1, route.to_m, 0.0, params.queue_cap)?;
    let ds = response_dist(
        params.n_s,
        params.mu_s,
        s.s2,
        route.to_s,
        params.backhaul_delay,
        params.queue_cap,
    )?;
    Ok(Some((dm, ds)))
}

/// Expected delay of the batch admitted by `a` in `s`; zero for blocks
/// and departures.
pub fn delay_cost(params: &ModelParams, s: State, a: Action) -> Result<f64> {
    match split_response(params, s, a)? {
        None => Ok(0.0),
        Some((dm, ds)) => expected_max(&dm, &ds, DEFAULT_REL_TOL),
    }
}

/// Weighted blocking indicator.
pub fn blocking_cost(params: &ModelParams, s: State, a: Action) -> f64 {
    if !a.is_block() {
        return 0.0;
    }
    match params.event(s.k) {
        Some(Event::Foreground { .. }) => 1.0 - params.delta,
        Some(Event::Background { .. }) => params.delta,
        _ => 0.0,
    }
}

/// `c(s, a)` for every state and feasible action of a model.
#[derive(Debug, Clone)]
pub struct DelayCostTable {
    stride: usize,
    costs: Vec<f64>,
}

impl DelayCostTable {
    pub fn build(params: &ModelParams, space: &StateSpace) -> Result<Self> {
        Self::build_with_tol(params, space, DEFAULT_REL_TOL)
    }

    pub fn build_with_tol(params: &ModelParams, space: &StateSpace, rel_tol: f64) -> Result<Self> {
        let stride = params.max_batch() + 2;
        // c(s, a) depends on s and a only through (s1, to_m, s2, to_s).
        let mut keys = Vec::new();
        for &s in space.states() {
            for a in params.feasible_actions(s)? {
                if let Some(r) = params.routing(s, a)? {
                    keys.push((s.s1, r.to_m, s.s2, r.to_s));
                }
            }
        }
        keys.sort_unstable();
        keys.dedup();
        let values = keys
            .par_iter()
            .map(|&(s1, to_m, s2, to_s)| {
                let dm = response_dist(params.n_m, params.mu_m, s1, to_m, 0.0, params.queue_cap)?;
                let ds = response_dist(
                    params.n_s,
                    params.mu_s,
                    s2,
                    to_s,
                    params.backhaul_delay,
                    params.queue_cap,
                )?;
                expected_max(&dm, &ds, rel_tol)
            })
            .collect::<Result<Vec<f64>>>()?;
        let memo: HashMap<_, _> = keys.into_iter().zip(values).collect();

        let mut costs = vec![f64::NAN; space.len() * stride];
        for (i, &s) in space.states().iter().enumerate() {
            for a in params.feasible_actions(s)? {
                costs[i * stride + a.0 as usize] = match params.routing(s, a)? {
                    None => 0.0,
                    Some(r) => memo[&(s.s1, r.to_m, s.s2, r.to_s)],
                };
            }
        }
        Ok(Self { stride, costs })
    }

    /// `None` when `a` is not feasible in the state.
    pub fn get(&self, state_index: usize, a: Action) -> Option<f64> {
        let code = a.0 as usize;
        if code >= self.stride {
            return None;
        }
        self.costs
            .get(state_index * self.stride + code)
            .copied()
            .filter(|c| !c.is_nan())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn phased(m: u32, a: f64, b: f64, shift: f64) -> ResponseDist {
        ResponseDist::Phased {
            wait_stages: m,
            wait_rate: a,
            service_rate: b,
            shift,
        }
    }

    /// Survival by trapezoid convolution of the Erlang density with the
    /// exponential survival; independent of the closed forms.
    fn survival_by_convolution(m: u32, a: f64, b: f64, t: f64) -> f64 {
        let steps = 200_000;
        let h = t / steps as f64;
        let density = |w: f64| {
            (m as f64 * (a * w).ln() - a * w - ln_gamma(m as f64)).exp() / w
        };
        // The density at w = 0 is a when m = 1 and zero otherwise.
        let mut acc = if m == 1 { 0.5 * a * (-b * t).exp() } else { 0.0 };
        for i in 1..=steps {
            let w = i as f64 * h;
            let f = density(w) * (-b * (t - w)).exp();
            acc += if i == steps { 0.5 * f } else { f };
        }
        let erlang_above = poisson_cdf_below(m, a * t);
        erlang_above + acc * h
    }

    #[test]
    fn survival_closed_forms_match_numerical_convolution() {
        for &(m, a, b) in &[(1, 3.0, 1.5), (3, 2.0, 5.0), (4, 1.0, 1.0), (2, 9.0, 1.5), (5, 1.5, 1.5000001)] {
            for &t in &[0.1, 0.7, 2.0, 6.0] {
                let closed = erlang_exp_survival(m, a, b, t);
                let numeric = survival_by_convolution(m, a, b, t);
                assert!((closed - numeric).abs() < 1e-6, "m={m} a={a} b={b} t={t}: {closed} vs {numeric}");
            }
        }
    }

    #[test]
    fn survival_is_continuous_across_the_equal_rate_case() {
        for &t in &[0.3, 1.0, 4.0, 20.0] {
            let eq = erlang_exp_survival(3, 2.0, 2.0, t);
            let above = erlang_exp_survival(3, 2.0 + 1e-9, 2.0, t);
            let below = erlang_exp_survival(3, 2.0 - 1e-9, 2.0, t);
            assert!((eq - above).abs() < 1e-8 && (eq - below).abs() < 1e-8);
        }
    }

    #[test]
    fn large_arguments_stay_finite() {
        let s = erlang_exp_survival(12, 1000.0, 1.0, 30.0);
        assert!(s.is_finite() && s > 0.0 && s < 1e-10);
        let s = erlang_exp_survival(12, 1.0, 1000.0, 30.0);
        assert!(s.is_finite() && (0.0..1.0).contains(&s));
    }

    #[test]
    fn response_dist_cases() {
        assert_eq!(
            response_dist(5, 1.0, 2, 1, 0.0, 5).unwrap(),
            phased(0, 5.0, 1.0, 0.0)
        );
        assert_eq!(
            response_dist(2, 1.5, 2, 1, 0.5, 5).unwrap(),
            phased(1, 3.0, 1.5, 0.5)
        );
        assert_eq!(response_dist(2, 1.5, 2, 0, 0.5, 5).unwrap(), ResponseDist::Zero);
        assert!(matches!(
            response_dist(2, 1.5, 6, 2, 0.5, 5),
            Err(Error::CapacityExceeded { .. })
        ));
        let d = response_dist(2, 1.5, 4, 2, 0.5, 5).unwrap();
        assert!((d.mean() - (0.5 + 4.0 / 3.0 + 1.0 / 1.5)).abs() < 1e-15);
    }

    #[test]
    fn expected_max_simple_values() {
        let e1 = ResponseDist::exponential(1.0);
        assert!((expected_max(&e1, &ResponseDist::Zero, 1e-10).unwrap() - 1.0).abs() < 1e-9);
        assert!((expected_max(&e1, &e1, 1e-10).unwrap() - 1.5).abs() < 1e-9);
        assert_eq!(expected_max(&ResponseDist::Zero, &ResponseDist::Zero, 1e-8).unwrap(), 0.0);
        // Pure shift plus exponential: d + 1/μ.
        let s = phased(0, 1.5, 1.5, 0.5);
        let v = expected_max(&ResponseDist::Zero, &s, 1e-10).unwrap();
        assert!((v - (0.5 + 1.0 / 1.5)).abs() < 1e-9);
    }

    #[test]
    fn expected_max_of_exponential_and_shifted_exponential() {
        // E[max(X, d + Y)] = d + 1/b + ∫_d^∞ e^{-at}(1 - e^{-b(t-d)}) dt
        //                  = d + 1/b + e^{-ad}/a − e^{-ad}/(a + b).
        let (a, b, d) = (1.0f64, 1.5f64, 0.5f64);
        let exact = d + 1.0 / b + (-a * d).exp() / a - (-a * d).exp() / (a + b);
        let v = expected_max(&ResponseDist::exponential(a), &phased(0, b, b, d), 1e-10).unwrap();
        assert!((v - exact).abs() < 1e-9 * exact);
    }

    #[test]
    fn mc_oracle_is_reproducible_and_unbiased() {
        let e1 = ResponseDist::exponential(1.0);
        let (m1, se1) = mc_delay_oracle(&e1, &ResponseDist::Zero, 1_000_000, 7);
        assert!((m1 - 1.0).abs() < 3.0 * se1);
        let (m2, se2) = mc_delay_oracle(&e1, &e1, 1_000_000, 8);
        assert!((m2 - 1.5).abs() < 3.0 * se2);
        assert_eq!(mc_delay_oracle(&e1, &e1, 10_000, 3), mc_delay_oracle(&e1, &e1, 10_000, 3));
    }

    #[test]
    fn delay_cost_worked_example() {
        // n1 = 5, n2 = 2, N = 5; s = (2, 2, 2), a = 2.
        let params = ModelParams {
            n_m: 5,
            n_s: 2,
            queue_cap: 5,
            ..ModelParams::table_ii()
        };
        let s = State::new(2, 2, 2);
        let (dm, ds) = split_response(&params, s, Action(2)).unwrap().unwrap();
        assert_eq!(dm, phased(0, 5.0, 1.0, 0.0));
        assert_eq!(ds, phased(1, 3.0, 1.5, 0.5));
        let c = delay_cost(&params, s, Action(2)).unwrap();
        let (mc, se) = mc_delay_oracle(&dm, &ds, 2_000_000, 11);
        assert!((c - mc).abs() < 4.0 * se, "{c} vs {mc} ± {se}");
        assert_eq!(delay_cost(&params, s, Action(0)).unwrap(), 0.0);
        assert_eq!(delay_cost(&params, State::new(2, 2, 0), Action(0)).unwrap(), 0.0);
    }

    #[test]
    fn blocking_cost_weights() {
        let p = ModelParams::table_ii();
        assert_eq!(blocking_cost(&p, State::new(0, 0, 3), Action(0)), 0.5);
        let p = ModelParams { delta: 0.3, ..p };
        assert_eq!(blocking_cost(&p, State::new(0, 0, 4), Action(0)), 0.3);
        assert_eq!(blocking_cost(&p, State::new(0, 0, 2), Action(0)), 0.7);
        assert_eq!(blocking_cost(&p, State::new(0, 0, 1), Action(1)), 0.0);
        assert_eq!(blocking_cost(&p, State::new(0, 0, 0), Action(0)), 0.0);
    }

    #[test]
    fn cost_table_covers_feasible_pairs_only() {
        let p = ModelParams {
            n_m: 2,
            n_s: 2,
            queue_cap: 2,
            ..ModelParams::table_ii()
        };
        let space = StateSpace::enumerate(&p);
        let table = DelayCostTable::build(&p, &space).unwrap();
        for (i, &s) in space.states().iter().enumerate() {
            for code in 0..4u8 {
                let a = Action(code);
                match table.get(i, a) {
                    Some(c) => {
                        assert!(p.is_feasible(s, a));
                        assert!(c >= 0.0);
                        if a.is_block() {
                            assert_eq!(c, 0.0);
                        } else {
                            assert_eq!(c, delay_cost(&p, s, a).unwrap());
                        }
                    }
                    None => assert!(!p.is_feasible(s, a)),
                }
            }
        }
    }
}
