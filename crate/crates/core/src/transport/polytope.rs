use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::Rng;

use super::Coupling;
use crate::error::{Error, Result};
use crate::infotheory::check_distribution;
use crate::numgrad::Matrix;

/// Largest side length accepted by the exhaustive enumerator.
pub const MAX_ENUMERATION_SIZE: usize = 5;

const ZERO_TOL: f64 = 1e-14;

fn support(p: &[f64]) -> Vec<usize> {
    p.iter()
        .enumerate()
        .filter(|(_, v)| **v > 0.0)
        .map(|(i, _)| i)
        .collect()
}

/// Solves for the plan supported on the tree `cells` (indices `i * m + j`)
/// by peeling leaves. Returns `None` when the support is not a spanning
/// tree or the solution has a negative entry.
pub fn solve_tree(cells: &[usize], w: &[f64], q: &[f64]) -> Option<Matrix> {
    let (n, m) = (w.len(), q.len());
    if cells.len() != n + m - 1 {
        return None;
    }
    let mut resid: Vec<f64> = w.iter().chain(q).copied().collect();
    let mut degree = vec![0usize; n + m];
    for &c in cells {
        degree[c / m] += 1;
        degree[n + c % m] += 1;
    }
    let mut used = vec![false; cells.len()];
    let mut pi = Matrix::zeros(n, m);
    for _ in 0..cells.len() {
        let leaf = (0..n + m).find(|&v| degree[v] == 1)?;
        let k = (0..cells.len()).find(|&k| {
            !used[k] && (cells[k] / m == leaf || n + cells[k] % m == leaf)
        })?;
        let (i, j) = (cells[k] / m, cells[k] % m);
        let other = if leaf == i { n + j } else { i };
        let x = resid[leaf];
        if x < -1e-12 {
            return None;
        }
        let x = x.max(0.0);
        pi.set(i, j, x);
        resid[leaf] = 0.0;
        resid[other] -= x;
        used[k] = true;
        degree[i] -= 1;
        degree[n + j] -= 1;
    }
    if resid.iter().any(|r| r.abs() > 1e-9) {
        return None;
    }
    Some(pi)
}

fn find(parent: &[u8; 2 * MAX_ENUMERATION_SIZE], mut x: usize) -> usize {
    while parent[x] as usize != x {
        x = parent[x] as usize;
    }
    x
}

fn trees(
    n: usize,
    m: usize,
    start: usize,
    chosen: &mut Vec<usize>,
    parent: [u8; 2 * MAX_ENUMERATION_SIZE],
    visit: &mut dyn FnMut(&[usize]),
) {
    let need = n + m - 1;
    if chosen.len() == need {
        visit(chosen);
        return;
    }
    let total = n * m;
    for c in start..total {
        if total - c < need - chosen.len() {
            break;
        }
        let (a, b) = (find(&parent, c / m), find(&parent, n + c % m));
        if a == b {
            continue;
        }
        let mut p = parent;
        p[a] = b as u8;
        chosen.push(c);
        trees(n, m, c + 1, chosen, p, visit);
        chosen.pop();
    }
}

fn embed(pi: &Matrix, rows: &[usize], cols: &[usize], n: usize, m: usize) -> Matrix {
    let mut full = Matrix::zeros(n, m);
    for (a, &i) in rows.iter().enumerate() {
        for (b, &j) in cols.iter().enumerate() {
            full.set(i, j, pi.get(a, b));
        }
    }
    full
}

fn key(pi: &Matrix) -> Vec<i64> {
    pi.as_slice().iter().map(|v| (v * 1e11).round() as i64).collect()
}

/// Every basic feasible solution of the transportation polytope with
/// marginals `(w, q)`, deduplicated.
pub fn enumerate_polytope_vertices(w: &[f64], q: &[f64]) -> Result<Vec<Coupling>> {
    let size = w.len().max(q.len());
    if size > MAX_ENUMERATION_SIZE {
        return Err(Error::Capability {
            what: "enumerate_polytope_vertices",
            size,
            limit: MAX_ENUMERATION_SIZE,
        });
    }
    check_distribution(w, 1e-9, "row marginal")?;
    check_distribution(q, 1e-9, "column marginal")?;
    let (rows, cols) = (support(w), support(q));
    let ws: Vec<f64> = rows.iter().map(|&i| w[i]).collect();
    let qs: Vec<f64> = cols.iter().map(|&j| q[j]).collect();
    let (n, m) = (ws.len(), qs.len());
    let mut parent = [0u8; 2 * MAX_ENUMERATION_SIZE];
    for (i, p) in parent.iter_mut().enumerate() {
        *p = i as u8;
    }
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    trees(n, m, 0, &mut Vec::new(), parent, &mut |cells| {
        if let Some(pi) = solve_tree(cells, &ws, &qs) {
            let full = embed(&pi, &rows, &cols, w.len(), q.len());
            if seen.insert(key(&full)) {
                out.push(Coupling::from_parts(full, w.to_vec(), q.to_vec()));
            }
        }
    });
    Ok(out)
}

/// A vertex produced by greedy saturation over a random cell order. Every
/// vertex has positive probability.
pub fn random_vertex(w: &[f64], q: &[f64], rng: &mut impl Rng) -> Coupling {
    let (n, m) = (w.len(), q.len());
    let mut cells: Vec<usize> = (0..n * m).collect();
    cells.shuffle(rng);
    let mut rr = w.to_vec();
    let mut cr = q.to_vec();
    let mut row_on: Vec<bool> = w.iter().map(|v| *v > ZERO_TOL).collect();
    let mut col_on: Vec<bool> = q.iter().map(|v| *v > ZERO_TOL).collect();
    let mut pi = Matrix::zeros(n, m);
    for c in cells {
        let (i, j) = (c / m, c % m);
        if !row_on[i] || !col_on[j] {
            continue;
        }
        let x = rr[i].min(cr[j]);
        pi.set(i, j, x);
        rr[i] -= x;
        cr[j] -= x;
        if rr[i] <= ZERO_TOL {
            row_on[i] = false;
        }
        if cr[j] <= ZERO_TOL {
            col_on[j] = false;
        }
    }
    Coupling::from_parts(pi, w.to_vec(), q.to_vec())
}
