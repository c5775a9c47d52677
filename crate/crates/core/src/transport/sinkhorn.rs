//! Log-domain Sinkhorn scaling.

use serde::{Deserialize, Serialize};

use super::{check_problem, Coupling};
use crate::error::{Error, Result};
use crate::numgrad::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SinkhornConfig {
    pub epsilon: f64,
    pub max_iter: usize,
    /// Threshold on the L1 row-marginal violation.
    pub tol: f64,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.1,
            max_iter: 1000,
            tol: 1e-7,
        }
    }
}

impl SinkhornConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::invalid(format!("sinkhorn epsilon must be positive, got {}", self.epsilon)));
        }
        if self.max_iter == 0 {
            return Err(Error::invalid("sinkhorn max_iter must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SinkhornOutput {
    /// Plan rounded onto the exact marginals.
    pub coupling: Coupling,
    /// `sum pi_ij * cost_ij` of the returned plan.
    pub w1_estimate: f64,
    pub converged: bool,
    pub iterations: usize,
    /// L1 marginal violation of the scaled plan before rounding.
    pub violation: f64,
}

/// Projects a nonnegative plan onto the marginals `(mu, nu)`: scale down
/// overfull rows and columns, then spread the deficit as a rank-one
/// correction.
fn round_to_marginals(mut pi: Matrix, mu: &[f64], nu: &[f64]) -> Matrix {
    let (n, m) = pi.shape();
    let rs = pi.row_sums();
    for i in 0..n {
        if rs[i] > mu[i] && rs[i] > 0.0 {
            let s = mu[i] / rs[i];
            pi.row_mut(i).iter_mut().for_each(|v| *v *= s);
        }
    }
    let cs = pi.col_sums();
    for j in 0..m {
        if cs[j] > nu[j] && cs[j] > 0.0 {
            let s = nu[j] / cs[j];
            for i in 0..n {
                pi.set(i, j, pi.get(i, j) * s);
            }
        }
    }
    let er: Vec<f64> = pi.row_sums().iter().zip(mu).map(|(a, b)| (b - a).max(0.0)).collect();
    let ec: Vec<f64> = pi.col_sums().iter().zip(nu).map(|(a, b)| (b - a).max(0.0)).collect();
    let total: f64 = er.iter().sum();
    if total > 0.0 {
        for i in 0..n {
            for j in 0..m {
                pi.set(i, j, pi.get(i, j) + er[i] * ec[j] / total);
            }
        }
    }
    pi
}

/// Largest `(max C - min C) / epsilon` handled in the scaling domain;
/// beyond it the kernel underflows and iterations run on log potentials.
const SCALING_SPREAD: f64 = 200.0;

struct Iterate {
    converged: bool,
    iterations: usize,
    violation: f64,
    /// Log-plan `ln pi_ab` on the support, row-major.
    log_plan: Vec<f64>,
}

/// Scaling iterations `u = mu / K v`, `v = nu / K^T u` with `K = exp(-C/eps)`.
fn scaling_iterations(cs: &[f64], mu: &[f64], nu: &[f64], cfg: &SinkhornConfig) -> Iterate {
    let (n, m) = (mu.len(), nu.len());
    let shift = cs.iter().cloned().fold(f64::INFINITY, f64::min);
    let k: Vec<f64> = cs.iter().map(|c| (shift - c).exp()).collect();
    let mut u = vec![1.0; n];
    let mut v = vec![1.0; m];
    let mut kv = vec![0.0; n];
    let mut ktu = vec![0.0; m];
    let mut best = (f64::INFINITY, u.clone(), v.clone());
    let mut out = Iterate {
        converged: false,
        iterations: 0,
        violation: f64::INFINITY,
        log_plan: Vec::new(),
    };
    for it in 1..=cfg.max_iter {
        out.iterations = it;
        for a in 0..n {
            let row = &k[a * m..(a + 1) * m];
            kv[a] = row.iter().zip(&v).map(|(x, y)| x * y).sum();
        }
        if it > 1 {
            let viol: f64 = (0..n).map(|a| (u[a] * kv[a] - mu[a]).abs()).sum();
            if viol < best.0 {
                best = (viol, u.clone(), v.clone());
            }
            if viol < cfg.tol {
                out.converged = true;
                break;
            }
        }
        for a in 0..n {
            u[a] = mu[a] / kv[a];
        }
        ktu.iter_mut().for_each(|x| *x = 0.0);
        for a in 0..n {
            let row = &k[a * m..(a + 1) * m];
            for (t, x) in ktu.iter_mut().zip(row) {
                *t += x * u[a];
            }
        }
        for b in 0..m {
            v[b] = nu[b] / ktu[b];
        }
        if u.iter().chain(&v).any(|x| !x.is_finite()) {
            break;
        }
    }
    out.violation = best.0;
    let (u, v) = (best.1, best.2);
    out.log_plan = (0..n * m)
        .map(|i| u[i / m].ln() + (shift - cs[i]) + v[i % m].ln())
        .collect();
    out
}

fn logsumexp(vals: &mut dyn Iterator<Item = f64>, buf: &mut Vec<f64>) -> f64 {
    buf.clear();
    buf.extend(vals);
    let mx = buf.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if mx == f64::NEG_INFINITY {
        return mx;
    }
    mx + buf.iter().map(|v| (v - mx).exp()).sum::<f64>().ln()
}

/// Log-domain iterations on the potentials `f / eps`, `g / eps`.
fn log_iterations(cs: &[f64], mu: &[f64], nu: &[f64], cfg: &SinkhornConfig) -> Iterate {
    let (n, m) = (mu.len(), nu.len());
    let log_mu: Vec<f64> = mu.iter().map(|x| x.ln()).collect();
    let log_nu: Vec<f64> = nu.iter().map(|x| x.ln()).collect();
    let mut f = vec![0.0; n];
    let mut g = vec![0.0; m];
    let mut buf = Vec::with_capacity(n.max(m));
    let mut best = (f64::INFINITY, f.clone(), g.clone());
    let mut out = Iterate {
        converged: false,
        iterations: 0,
        violation: f64::INFINITY,
        log_plan: Vec::new(),
    };
    for it in 1..=cfg.max_iter {
        out.iterations = it;
        for a in 0..n {
            let row = &cs[a * m..(a + 1) * m];
            f[a] = log_mu[a] - logsumexp(&mut row.iter().zip(&g).map(|(c, gb)| gb - c), &mut buf);
        }
        for b in 0..m {
            g[b] = log_nu[b] - logsumexp(&mut (0..n).map(|a| f[a] - cs[a * m + b]), &mut buf);
        }
        let viol: f64 = (0..n)
            .map(|a| {
                let row = &cs[a * m..(a + 1) * m];
                let s: f64 = row.iter().zip(&g).map(|(c, gb)| (f[a] + gb - c).exp()).sum();
                (s - mu[a]).abs()
            })
            .sum();
        if viol < best.0 {
            best = (viol, f.clone(), g.clone());
        }
        if viol < cfg.tol {
            out.converged = true;
            break;
        }
    }
    out.violation = best.0;
    let (f, g) = (best.1, best.2);
    out.log_plan = (0..n * m).map(|i| f[i / m] + g[i % m] - cs[i]).collect();
    out
}

/// Entropic optimal transport between `mu` and `nu` on `cost`.
/// Non-convergence is reported through the flag, never as an error.
pub fn sinkhorn(cost: &Matrix, mu: &[f64], nu: &[f64], cfg: &SinkhornConfig) -> Result<SinkhornOutput> {
    cfg.validate()?;
    check_problem(cost, mu, nu, "sinkhorn")?;
    let rows: Vec<usize> = (0..mu.len()).filter(|&i| mu[i] > 0.0).collect();
    let cols: Vec<usize> = (0..nu.len()).filter(|&j| nu[j] > 0.0).collect();
    let (n, m) = (rows.len(), cols.len());
    let cs: Vec<f64> = (0..n * m).map(|i| cost.get(rows[i / m], cols[i % m]) / cfg.epsilon).collect();
    let mu_s: Vec<f64> = rows.iter().map(|&i| mu[i]).collect();
    let nu_s: Vec<f64> = cols.iter().map(|&j| nu[j]).collect();
    let (lo, hi) = cs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &c| (l.min(c), h.max(c)));
    let mut it = if hi - lo <= SCALING_SPREAD {
        scaling_iterations(&cs, &mu_s, &nu_s, cfg)
    } else {
        log_iterations(&cs, &mu_s, &nu_s, cfg)
    };
    if !it.log_plan.iter().all(|v| v.is_finite() || *v == f64::NEG_INFINITY) {
        it = log_iterations(&cs, &mu_s, &nu_s, cfg);
    }
    let mut pi = Matrix::zeros(mu.len(), nu.len());
    for (i, lp) in it.log_plan.iter().enumerate() {
        pi.set(rows[i / m], cols[i % m], lp.exp());
    }
    let pi = round_to_marginals(pi, mu, nu);
    let coupling = Coupling::from_parts(pi, mu.to_vec(), nu.to_vec());
    let w1_estimate = coupling.cost(cost)?;
    if !w1_estimate.is_finite() {
        return Err(Error::invalid("sinkhorn produced a non-finite cost"));
    }
    Ok(SinkhornOutput {
        coupling,
        w1_estimate,
        converged: it.converged,
        iterations: it.iterations,
        violation: it.violation,
    })
}
