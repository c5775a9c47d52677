//! Transportation simplex (u-v method) on a spanning-tree basis.

use std::collections::VecDeque;

use super::{check_problem, Coupling};
use crate::error::{Error, Result};
use crate::numgrad::Matrix;

/// Largest side length accepted by the exact solver.
pub const MAX_EXACT_SIZE: usize = 64;

const REDUCED_COST_TOL: f64 = 1e-12;

#[derive(Clone, Debug)]
pub struct ExactSolution {
    pub coupling: Coupling,
    pub w1: f64,
    /// Dual potentials with `row[i] + col[j] <= cost[i][j]` and equality on
    /// the basis; `sum mu*row + sum nu*col = w1`.
    pub row_potentials: Vec<f64>,
    pub col_potentials: Vec<f64>,
}

/// Exact optimal transport cost and an optimal vertex plan.
pub fn exact_w1(cost: &Matrix, mu: &[f64], nu: &[f64]) -> Result<(Coupling, f64)> {
    let s = exact_w1_with_duals(cost, mu, nu)?;
    Ok((s.coupling, s.w1))
}

struct Basis {
    n: usize,
    m: usize,
    cells: Vec<(usize, usize)>,
    x: Vec<f64>,
}

impl Basis {
    fn northwest(mu: &[f64], nu: &[f64]) -> Self {
        let (n, m) = (mu.len(), nu.len());
        let (mut r, mut c) = (mu.to_vec(), nu.to_vec());
        let (mut i, mut j) = (0, 0);
        let mut cells = Vec::with_capacity(n + m - 1);
        let mut x = Vec::with_capacity(n + m - 1);
        loop {
            let v = r[i].min(c[j]).max(0.0);
            cells.push((i, j));
            x.push(v);
            r[i] -= v;
            c[j] -= v;
            if i == n - 1 && j == m - 1 {
                break;
            }
            if j == m - 1 || (i < n - 1 && r[i] <= c[j]) {
                i += 1;
            } else {
                j += 1;
            }
        }
        Self { n, m, cells, x }
    }

    fn adjacency(&self) -> Vec<Vec<(usize, usize)>> {
        let mut adj = vec![Vec::new(); self.n + self.m];
        for (k, &(i, j)) in self.cells.iter().enumerate() {
            adj[i].push((self.n + j, k));
            adj[self.n + j].push((i, k));
        }
        adj
    }

    fn potentials(&self, cost: &Matrix, adj: &[Vec<(usize, usize)>]) -> Vec<f64> {
        let mut pot = vec![f64::NAN; self.n + self.m];
        pot[0] = 0.0;
        let mut queue = VecDeque::from([0usize]);
        while let Some(a) = queue.pop_front() {
            for &(b, k) in &adj[a] {
                if pot[b].is_nan() {
                    let (i, j) = self.cells[k];
                    pot[b] = cost.get(i, j) - pot[a];
                    queue.push_back(b);
                }
            }
        }
        pot
    }

    /// Basis cells on the tree path from node `from` to node `to`.
    fn path(&self, adj: &[Vec<(usize, usize)>], from: usize, to: usize) -> Vec<usize> {
        let mut via = vec![usize::MAX; self.n + self.m];
        let mut prev = vec![usize::MAX; self.n + self.m];
        prev[from] = from;
        let mut queue = VecDeque::from([from]);
        while let Some(a) = queue.pop_front() {
            if a == to {
                break;
            }
            for &(b, k) in &adj[a] {
                if prev[b] == usize::MAX {
                    prev[b] = a;
                    via[b] = k;
                    queue.push_back(b);
                }
            }
        }
        let mut out = Vec::new();
        let mut cur = to;
        while cur != from {
            out.push(via[cur]);
            cur = prev[cur];
        }
        out.reverse();
        out
    }
}

pub fn exact_w1_with_duals(cost: &Matrix, mu: &[f64], nu: &[f64]) -> Result<ExactSolution> {
    let size = cost.rows().max(cost.cols());
    if size > MAX_EXACT_SIZE {
        return Err(Error::Capability {
            what: "exact_w1",
            size,
            limit: MAX_EXACT_SIZE,
        });
    }
    check_problem(cost, mu, nu, "exact_w1")?;
    let (n, m) = (mu.len(), nu.len());
    let mut basis = Basis::northwest(mu, nu);
    let mut degenerate_run = 0usize;
    let bland_after = 50 * (n + m);
    let max_pivots = 200 * (n * m + n + m);

    for _ in 0..max_pivots {
        let adj = basis.adjacency();
        let pot = basis.potentials(cost, &adj);
        let bland = degenerate_run > bland_after;
        let mut entering = None;
        let mut best = -REDUCED_COST_TOL;
        'scan: for i in 0..n {
            for j in 0..m {
                let d = cost.get(i, j) - pot[i] - pot[n + j];
                if d < best {
                    entering = Some((i, j));
                    if bland {
                        break 'scan;
                    }
                    best = d;
                }
            }
        }
        let Some((ei, ej)) = entering else {
            let mut pi = Matrix::zeros(n, m);
            for (&(i, j), &v) in basis.cells.iter().zip(&basis.x) {
                pi.set(i, j, v);
            }
            let w1 = pi
                .as_slice()
                .iter()
                .zip(cost.as_slice())
                .map(|(p, c)| p * c)
                .sum();
            return Ok(ExactSolution {
                coupling: Coupling::from_parts(pi, mu.to_vec(), nu.to_vec()),
                w1,
                row_potentials: pot[..n].to_vec(),
                col_potentials: pot[n..].to_vec(),
            });
        };
        // Cycle: entering (+), then alternating signs along the tree path
        // from column ej back to row ei.
        let path = basis.path(&adj, n + ej, ei);
        let mut theta = f64::INFINITY;
        let mut leave = usize::MAX;
        for (pos, &k) in path.iter().enumerate() {
            if pos % 2 == 0 {
                let v = basis.x[k];
                let better = v < theta
                    || (v == theta && bland && basis.cells[k] < basis.cells[leave]);
                if better {
                    theta = v;
                    leave = k;
                }
            }
        }
        for (pos, &k) in path.iter().enumerate() {
            if pos % 2 == 0 {
                basis.x[k] -= theta;
            } else {
                basis.x[k] += theta;
            }
        }
        basis.x[leave] = theta;
        basis.cells[leave] = (ei, ej);
        if theta <= 0.0 {
            degenerate_run += 1;
        } else {
            degenerate_run = 0;
        }
    }
    Err(Error::invalid(format!(
        "exact_w1: no optimum after {max_pivots} pivots"
    )))
}
