use faer::prelude::*;
use faer::sparse::{SparseColMat, Triplet};
use petgraph::algo::tarjan_scc;
use petgraph::graph::DiGraph;

use crate::error::{Error, Result};
use crate::model::StateSpace;

/// Row-stochastic matrix in compressed sparse row form.
#[derive(Debug, Clone, Default)]
pub struct SparseRows {
    offsets: Vec<usize>,
    entries: Vec<(u32, f64)>,
}

impl SparseRows {
    pub fn new() -> Self {
        Self {
            offsets: vec![0],
            entries: Vec::new(),
        }
    }

    /// Appends a row; repeated targets are merged.
    pub fn push_row(&mut self, row: impl IntoIterator<Item = (u32, f64)>) {
        let start = self.entries.len();
        for (j, p) in row {
            if p == 0.0 {
                continue;
            }
            match self.entries[start..].iter_mut().find(|e| e.0 == j) {
                Some(e) => e.1 += p,
                None => self.entries.push((j, p)),
            }
        }
        self.offsets.push(self.entries.len());
    }

    pub fn len(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn row(&self, i: usize) -> &[(u32, f64)] {
        &self.entries[self.offsets[i]..self.offsets[i + 1]]
    }

    /// `x P`.
    pub fn left_multiply(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.len()];
        for (i, &xi) in x.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            for &(j, p) in self.row(i) {
                out[j as usize] += xi * p;
            }
        }
        out
    }

    /// Closed communicating classes, each sorted by index.
    pub fn closed_classes(&self) -> Vec<Vec<usize>> {
        let n = self.len();
        let mut graph = DiGraph::<(), ()>::with_capacity(n, self.entries.len());
        let nodes: Vec<_> = (0..n).map(|_| graph.add_node(())).collect();
        for i in 0..n {
            for &(j, _) in self.row(i) {
                graph.add_edge(nodes[i], nodes[j as usize], ());
            }
        }
        let components = tarjan_scc(&graph);
        let mut component_of = vec![0usize; n];
        for (c, members) in components.iter().enumerate() {
            for node in members {
                component_of[node.index()] = c;
            }
        }
        let mut closed = vec![true; components.len()];
        for i in 0..n {
            for &(j, _) in self.row(i) {
                if component_of[i] != component_of[j as usize] {
                    closed[component_of[i]] = false;
                }
            }
        }
        let mut classes: Vec<Vec<usize>> = components
            .into_iter()
            .zip(closed)
            .filter(|(_, is_closed)| *is_closed)
            .map(|(members, _)| {
                let mut v: Vec<usize> = members.into_iter().map(|n| n.index()).collect();
                v.sort_unstable();
                v
            })
            .collect();
        classes.sort();
        classes
    }

    fn residual(&self, x: &[f64]) -> f64 {
        self.left_multiply(x)
            .iter()
            .zip(x)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

const RESIDUAL_TOL: f64 = 1e-10;

/// Stationary distribution of a unichain stochastic matrix.
///
/// Solves `x (P − I) = 0, Σx = 1` by sparse LU, replacing the balance
/// equation of state 0 with the normalization. Falls back to power
/// iteration on the lazy chain `(I + P) / 2` when the direct solution
/// fails its residual check. `space` names states in error reports.
pub fn stationary_distribution(rows: &SparseRows, space: &StateSpace) -> Result<Vec<f64>> {
    let closed = rows.closed_classes();
    if closed.len() > 1 {
        return Err(Error::Reducible {
            closed_sets: closed
                .into_iter()
                .map(|set| set.into_iter().map(|i| space.state(i)).collect())
                .collect(),
        });
    }

    if let Some(x) = direct_solve(rows) {
        if rows.residual(&x) <= RESIDUAL_TOL {
            return Ok(x);
        }
    }
    power_iteration(rows)
}

fn direct_solve(rows: &SparseRows) -> Option<Vec<f64>> {
    let n = rows.len();
    let mut triplets = Vec::with_capacity(rows.entries.len() + 2 * n);
    for i in 0..n {
        let mut diagonal = -1.0;
        for &(j, p) in rows.row(i) {
            let j = j as usize;
            if j == i {
                diagonal += p;
            } else if j != 0 {
                // Entry (row j, column i) of Pᵀ − I.
                triplets.push(Triplet::new(j, i, p));
            }
        }
        if i != 0 {
            triplets.push(Triplet::new(i, i, diagonal));
        }
        triplets.push(Triplet::new(0, i, 1.0));
    }
    let matrix = SparseColMat::<usize, f64>::try_new_from_triplets(n, n, &triplets).ok()?;
    let lu = matrix.sp_lu().ok()?;
    let mut rhs = Col::<f64>::zeros(n);
    rhs[0] = 1.0;
    lu.solve_in_place(rhs.as_mut());

    let mut x: Vec<f64> = (0..n).map(|i| rhs[i]).collect();
    if x.iter().any(|v| !v.is_finite() || *v < -RESIDUAL_TOL) {
        return None;
    }
    for v in &mut x {
        *v = v.max(0.0);
    }
    let total: f64 = x.iter().sum();
    if total <= 0.0 {
        return None;
    }
    x.iter_mut().for_each(|v| *v /= total);
    Some(x)
}

fn power_iteration(rows: &SparseRows) -> Result<Vec<f64>> {
    const MAX_ITERS: usize = 2_000_000;
    let n = rows.len();
    let mut x = vec![1.0 / n as f64; n];
    for _ in 0..MAX_ITERS {
        let px = rows.left_multiply(&x);
        let next: Vec<f64> = x.iter().zip(&px).map(|(a, b)| 0.5 * (a + b)).collect();
        let change: f64 = next.iter().zip(&x).map(|(a, b)| (a - b).abs()).sum();
        x = next;
        if change < 1e-14 {
            if rows.residual(&x) <= RESIDUAL_TOL {
                return Ok(x);
            }
            break;
        }
    }
    Err(Error::Stationary(format!(
        "power iteration did not reach residual {RESIDUAL_TOL:e}"
    )))
}
