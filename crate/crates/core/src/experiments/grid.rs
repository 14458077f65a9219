use serde::{Deserialize, Serialize};

use crate::constrained::RandomizedMixture;
use crate::error::{Error, Result};
use crate::model::{Action, Event, ModelParams, State, StateSpace};
use crate::solver::Policy;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    /// Used with probability `q`.
    Low,
    High,
}

impl Component {
    pub fn name(self) -> &'static str {
        match self {
            Component::Low => "low",
            Component::High => "high",
        }
    }
}

/// Actions of one policy for one arrival tag, indexed `[s1][s2]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PolicyGrid {
    pub k: usize,
    pub component: Component,
    pub actions: Vec<Vec<Action>>,
}

impl PolicyGrid {
    pub fn from_policy(params: &ModelParams, policy: &Policy, k: usize, component: Component) -> Result<Self> {
        let space = StateSpace::enumerate(params);
        if policy.len() != space.len() {
            return Err(Error::PolicyShape {
                expected: space.len(),
                found: policy.len(),
            });
        }
        if k == 0 || k >= space.tags() {
            return Err(Error::InvalidParam {
                name: "k",
                reason: format!("arrival tags run from 1 to {}, got {k}", space.tags() - 1),
            });
        }
        let actions = (0..space.dim_s1())
            .map(|s1| {
                (0..space.dim_s2())
                    .map(|s2| {
                        let state = State::new(s1, s2, k);
                        policy.action(space.index_of(state).expect("grid cell in space"))
                    })
                    .collect()
            })
            .collect();
        Ok(Self { k, component, actions })
    }

    pub fn dim_s1(&self) -> usize {
        self.actions.len()
    }

    pub fn dim_s2(&self) -> usize {
        self.actions.first().map_or(0, Vec::len)
    }

    pub fn get(&self, s1: usize, s2: usize) -> Action {
        self.actions[s1][s2]
    }

    /// The actions along `s1` for a fixed `s2`.
    pub fn row(&self, s2: usize) -> Vec<Action> {
        self.actions.iter().map(|col| col[s2]).collect()
    }

    /// Whether every cell is feasible in `params`.
    pub fn all_feasible(&self, params: &ModelParams) -> bool {
        self.actions.iter().enumerate().all(|(s1, col)| {
            col.iter()
                .enumerate()
                .all(|(s2, &a)| params.is_feasible(State::new(s1, s2, self.k), a))
        })
    }
}

/// Grids for every arrival tag and both mixture components, ordered by
/// component then tag.
pub fn extract_policy_grids(params: &ModelParams, mixture: &RandomizedMixture) -> Result<Vec<PolicyGrid>> {
    let tags = params.num_tags();
    let mut grids = Vec::with_capacity(2 * (tags - 1));
    for (component, policy) in [(Component::Low, &mixture.low), (Component::High, &mixture.high)] {
        for k in 1..tags {
            grids.push(PolicyGrid::from_policy(params, policy, k, component)?);
        }
    }
    Ok(grids)
}

/// A maximal run of one action along `s1`, inclusive on both ends.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub action: Action,
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ThresholdRow {
    pub s2: usize,
    pub segments: Vec<Segment>,
    pub threshold_form: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ThresholdProfile {
    pub k: usize,
    pub component: Component,
    /// Largest segment count a row may have and still be threshold-form.
    pub segment_limit: usize,
    pub rows: Vec<ThresholdRow>,
}

impl ThresholdProfile {
    pub fn threshold_form(&self) -> bool {
        self.rows.iter().all(|r| r.threshold_form)
    }

    pub fn max_segments(&self) -> usize {
        self.rows.iter().map(|r| r.segments.len()).max().unwrap_or(0)
    }

    /// Rebuilds the grid the profile was extracted from.
    pub fn reconstruct(&self) -> PolicyGrid {
        let dim_s1 = self.rows.first().and_then(|r| r.segments.last()).map_or(0, |s| s.end + 1);
        let mut actions = vec![vec![Action::BLOCK; self.rows.len()]; dim_s1];
        for row in &self.rows {
            for seg in &row.segments {
                for col in actions.iter_mut().take(seg.end + 1).skip(seg.start) {
                    col[row.s2] = seg.action;
                }
            }
        }
        PolicyGrid {
            k: self.k,
            component: self.component,
            actions,
        }
    }
}

/// Segment limit for tag `k`: four for foreground batches of two or more
/// packets (block, all to M, split, all to S), three otherwise.
pub fn segment_limit(params: &ModelParams, k: usize) -> usize {
    match params.event(k) {
        Some(Event::Foreground { size }) if size >= 2 => 4,
        _ => 3,
    }
}

/// Splits a sequence of actions into maximal constant runs.
pub fn segments(row: &[Action]) -> Vec<Segment> {
    let mut out: Vec<Segment> = Vec::new();
    for (i, &a) in row.iter().enumerate() {
        match out.last_mut() {
            Some(seg) if seg.action == a => seg.end = i,
            _ => out.push(Segment { action: a, start: i, end: i }),
        }
    }
    out
}

pub fn extract_thresholds(params: &ModelParams, grid: &PolicyGrid) -> ThresholdProfile {
    let limit = segment_limit(params, grid.k);
    let rows = (0..grid.dim_s2())
        .map(|s2| {
            let segments = segments(&grid.row(s2));
            ThresholdRow {
                s2,
                threshold_form: segments.len() <= limit,
                segments,
            }
        })
        .collect();
    ThresholdProfile {
        k: grid.k,
        component: grid.component,
        segment_limit: limit,
        rows,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn codes(v: &[u8]) -> Vec<Action> {
        v.iter().map(|&c| Action(c)).collect()
    }

    #[test]
    fn two_segment_row() {
        let segs = segments(&codes(&[2, 2, 2, 2, 0, 0]));
        assert_eq!(
            segs,
            vec![
                Segment { action: Action(2), start: 0, end: 3 },
                Segment { action: Action(0), start: 4, end: 5 },
            ]
        );
    }

    #[test]
    fn constant_row_is_one_segment() {
        assert_eq!(segments(&codes(&[1; 7])).len(), 1);
    }

    #[test]
    fn limits_follow_batch_kind() {
        let p = ModelParams::table_ii();
        assert_eq!(
            (1..=4).map(|k| segment_limit(&p, k)).collect::<Vec<_>>(),
            vec![3, 4, 3, 3]
        );
    }

    #[test]
    fn grids_cover_every_tag_and_reconstruct() {
        let p = ModelParams {
            n_m: 2,
            n_s: 2,
            queue_cap: 2,
            ..ModelParams::table_ii()
        };
        let policy = Policy::from_fn(&p, |s, f| f[(s.s1 + 2 * s.s2) % f.len()]).unwrap();
        let mixture = RandomizedMixture::deterministic(policy, 1.0);
        let grids = extract_policy_grids(&p, &mixture).unwrap();
        assert_eq!(grids.len(), 8);
        for g in &grids {
            assert!(g.all_feasible(&p));
            assert_eq!((g.dim_s1(), g.dim_s2()), (5, 5));
            let profile = extract_thresholds(&p, g);
            assert_eq!(&profile.reconstruct(), g);
            // Idempotent.
            assert_eq!(extract_thresholds(&p, &profile.reconstruct()), profile);
        }
    }
}
