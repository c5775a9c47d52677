//! Wasserstein-1 machinery on empirical distributions: cost matrices, an
//! entropic Sinkhorn solver, an exact transportation simplex, vertex
//! enumeration of transportation polytopes, and the alignment loss.

mod loss;
mod polytope;
mod simplex;
mod sinkhorn;

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::infotheory::check_distribution;
use crate::numgrad::Matrix;

pub use loss::{fa_loss_and_grad, fa_loss_and_grad_features, FaOutput};
pub use polytope::{
    enumerate_polytope_vertices, random_vertex, solve_tree, MAX_ENUMERATION_SIZE,
};
pub use simplex::{exact_w1, exact_w1_with_duals, ExactSolution, MAX_EXACT_SIZE};
pub use sinkhorn::{sinkhorn, SinkhornConfig, SinkhornOutput};

/// Marginal tolerance enforced on every coupling.
pub const MARGINAL_TOL: f64 = 1e-8;

/// A joint distribution with fixed marginals.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Coupling {
    pi: Matrix,
    row_marginal: Vec<f64>,
    col_marginal: Vec<f64>,
}

impl Coupling {
    pub fn new(pi: Matrix, row_marginal: Vec<f64>, col_marginal: Vec<f64>) -> Result<Self> {
        let c = Self {
            pi,
            row_marginal,
            col_marginal,
        };
        c.validate(MARGINAL_TOL)?;
        Ok(c)
    }

    pub(crate) fn from_parts(pi: Matrix, row_marginal: Vec<f64>, col_marginal: Vec<f64>) -> Self {
        Self {
            pi,
            row_marginal,
            col_marginal,
        }
    }

    pub fn validate(&self, tol: f64) -> Result<()> {
        let (n, m) = self.pi.shape();
        if n != self.row_marginal.len() || m != self.col_marginal.len() {
            return Err(Error::dim(
                "coupling",
                format!(
                    "{n}x{m} plan with marginals of length {} and {}",
                    self.row_marginal.len(),
                    self.col_marginal.len()
                ),
            ));
        }
        if let Some(v) = self.pi.as_slice().iter().find(|v| !v.is_finite() || **v < -tol) {
            return Err(Error::invalid(format!("coupling has entry {v}")));
        }
        let viol = self.marginal_violation();
        if viol > tol {
            return Err(Error::invalid(format!("coupling marginal violation {viol:e}")));
        }
        Ok(())
    }

    pub fn pi(&self) -> &Matrix {
        &self.pi
    }

    pub fn row_marginal(&self) -> &[f64] {
        &self.row_marginal
    }

    pub fn col_marginal(&self) -> &[f64] {
        &self.col_marginal
    }

    pub fn into_pi(self) -> Matrix {
        self.pi
    }

    /// Largest absolute deviation of a row or column sum from its marginal.
    pub fn marginal_violation(&self) -> f64 {
        let r = self
            .pi
            .row_sums()
            .iter()
            .zip(&self.row_marginal)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        let c = self
            .pi
            .col_sums()
            .iter()
            .zip(&self.col_marginal)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        r.max(c)
    }

    pub fn nonzeros(&self, tol: f64) -> usize {
        self.pi.as_slice().iter().filter(|v| **v > tol).count()
    }

    /// `sum_ij pi_ij * cost_ij`.
    pub fn cost(&self, cost: &Matrix) -> Result<f64> {
        if cost.shape() != self.pi.shape() {
            return Err(Error::dim(
                "coupling_cost",
                format!("plan {:?} vs cost {:?}", self.pi.shape(), cost.shape()),
            ));
        }
        Ok(self
            .pi
            .as_slice()
            .iter()
            .zip(cost.as_slice())
            .map(|(p, c)| p * c)
            .sum())
    }

    /// Writes `row,col,mass` lines for the nonzero entries.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["row", "col", "mass"])?;
        for i in 0..self.pi.rows() {
            for j in 0..self.pi.cols() {
                let v = self.pi.get(i, j);
                if v != 0.0 {
                    wr.write_record([i.to_string(), j.to_string(), format!("{v:e}")])?;
                }
            }
        }
        wr.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }

    /// Reads a `row,col,mass` file; marginals are taken from the plan.
    pub fn read_csv<R: std::io::Read>(r: R, rows: usize, cols: usize) -> Result<Self> {
        let mut pi = Matrix::zeros(rows, cols);
        let mut rd = csv::Reader::from_reader(r);
        for rec in rd.deserialize() {
            let (i, j, v): (usize, usize, f64) = rec?;
            if i >= rows || j >= cols {
                return Err(Error::invalid(format!("coupling entry ({i},{j}) outside {rows}x{cols}")));
            }
            pi.set(i, j, v);
        }
        let (rm, cm) = (pi.row_sums(), pi.col_sums());
        Coupling::new(pi, rm, cm)
    }
}

/// `delta(u_i, v_j) = ||u_i - v_j||_2`.
pub fn cost_matrix(u: &Matrix, v: &Matrix) -> Result<Matrix> {
    if u.cols() != v.cols() {
        return Err(Error::dim(
            "cost_matrix",
            format!("feature dims {} vs {}", u.cols(), v.cols()),
        ));
    }
    Ok(Matrix::from_fn(u.rows(), v.rows(), |i, j| {
        u.row(i)
            .iter()
            .zip(v.row(j))
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }))
}

/// Uniform weights over `n` points.
pub fn uniform(n: usize) -> Vec<f64> {
    vec![1.0 / n as f64; n]
}

pub(crate) fn check_problem(cost: &Matrix, mu: &[f64], nu: &[f64], what: &str) -> Result<()> {
    if cost.rows() != mu.len() || cost.cols() != nu.len() {
        return Err(Error::dim(
            "transport",
            format!(
                "{what}: cost {:?} with marginals of length {} and {}",
                cost.shape(),
                mu.len(),
                nu.len()
            ),
        ));
    }
    check_distribution(mu, 1e-8, "row marginal")?;
    check_distribution(nu, 1e-8, "column marginal")?;
    if !cost.is_finite() {
        return Err(Error::invalid(format!("{what}: cost has non-finite entries")));
    }
    Ok(())
}
