//! Exact evaluation of the target-error bound
//! `err_tau <= err_s + FA + E_tau[FLD + TF]` on finite instances.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::distortion::{fld_exact, TransportKernel};
use crate::error::{Error, Result};
use crate::infotheory::{check_distribution, cross_entropy, entropy, kl};
use crate::numgrad::Matrix;
use crate::transport::{cost_matrix, exact_w1, MAX_ENUMERATION_SIZE};

const DIST_TOL: f64 = 1e-9;

/// A finite feature support with both tasks' conditionals and predictors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscreteInstance {
    pub feature_points: Matrix,
    pub source_marginal: Vec<f64>,
    pub target_marginal: Vec<f64>,
    pub source_cond: Matrix,
    pub target_cond: Matrix,
    pub p_s: Matrix,
    pub p_tau: Matrix,
}

impl DiscreteInstance {
    pub fn validate(&self) -> Result<()> {
        let n = self.feature_points.rows();
        if n == 0 {
            return Err(Error::invalid("instance has no feature points"));
        }
        let (k, kp) = (self.source_cond.cols(), self.target_cond.cols());
        let shapes = [
            ("source_cond", self.source_cond.shape(), (n, k)),
            ("p_s", self.p_s.shape(), (n, k)),
            ("target_cond", self.target_cond.shape(), (n, kp)),
            ("p_tau", self.p_tau.shape(), (n, kp)),
        ];
        for (name, got, want) in shapes {
            if got != want {
                return Err(Error::dim("discrete_instance", format!("{name} is {got:?}, expected {want:?}")));
            }
        }
        if self.source_marginal.len() != n || self.target_marginal.len() != n {
            return Err(Error::dim("discrete_instance", "marginal length differs from the point count"));
        }
        check_distribution(&self.source_marginal, DIST_TOL, "source marginal")?;
        check_distribution(&self.target_marginal, DIST_TOL, "target marginal")?;
        for (name, m) in [
            ("source_cond", &self.source_cond),
            ("target_cond", &self.target_cond),
            ("p_s", &self.p_s),
            ("p_tau", &self.p_tau),
        ] {
            for i in 0..n {
                check_distribution(m.row(i), DIST_TOL, &format!("{name} row {i}"))?;
            }
        }
        let d = cost_matrix(&self.feature_points, &self.feature_points)?;
        for i in 0..n {
            for j in 0..i {
                if d.get(i, j) == 0.0 {
                    return Err(Error::invalid(format!("feature points {j} and {i} coincide")));
                }
            }
        }
        Ok(())
    }

    pub fn points(&self) -> usize {
        self.feature_points.rows()
    }

    pub fn source_classes(&self) -> usize {
        self.source_cond.cols()
    }

    pub fn target_classes(&self) -> usize {
        self.target_cond.cols()
    }

    /// `l_s(u) = -sum_z D_s(z|u) ln p_s(z|u)` at every point, with a flag
    /// for clamped logarithms.
    pub fn source_pointwise_losses(&self) -> (Vec<f64>, bool) {
        let mut clamped = false;
        let l = (0..self.points())
            .map(|i| {
                let (v, c) = cross_entropy(self.source_cond.row(i), self.p_s.row(i));
                clamped |= c;
                v
            })
            .collect();
        (l, clamped)
    }

    /// Random instance with `|U| <= max_points` and label spaces up to the
    /// given sizes. Marginals and conditionals occasionally carry zeros;
    /// predictors are strictly positive.
    pub fn random(rng: &mut impl Rng, max_points: usize, max_z: usize, max_zp: usize) -> Self {
        let n = rng.random_range(1..=max_points);
        let k = rng.random_range(1..=max_z);
        let kp = rng.random_range(1..=max_zp);
        let d = rng.random_range(1..=3);
        let feature_points = Matrix::from_fn(n, d, |_, _| rng.random_range(-1.0..1.0));
        let mut sparse = |rng: &mut dyn rand::RngCore, len: usize| {
            let mut v: Vec<f64> = (0..len)
                .map(|_| {
                    if rng.random_bool(0.15) {
                        0.0
                    } else {
                        rng.random_range(0.0..1.0)
                    }
                })
                .collect();
            if v.iter().all(|x| *x == 0.0) {
                let i = rng.random_range(0..len);
                v[i] = 1.0;
            }
            normalize(&mut v);
            v
        };
        let source_marginal = sparse(rng, n);
        let target_marginal = sparse(rng, n);
        let rows = |rng: &mut dyn rand::RngCore, cols: usize, f: &mut dyn FnMut(&mut dyn rand::RngCore, usize) -> Vec<f64>| {
            let data: Vec<f64> = (0..n).flat_map(|_| f(rng, cols)).collect();
            Matrix::new(n, cols, data).expect("shape")
        };
        let mut positive = |rng: &mut dyn rand::RngCore, len: usize| {
            let mut v: Vec<f64> = (0..len).map(|_| rng.random_range(0.02..1.0)).collect();
            normalize(&mut v);
            v
        };
        let source_cond = rows(rng, k, &mut sparse);
        let target_cond = rows(rng, kp, &mut sparse);
        let p_s = rows(rng, k, &mut positive);
        let p_tau = rows(rng, kp, &mut positive);
        Self {
            feature_points,
            source_marginal,
            target_marginal,
            source_cond,
            target_cond,
            p_s,
            p_tau,
        }
    }
}

pub(crate) fn normalize(v: &mut [f64]) {
    let s: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x /= s);
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneralizedErrors {
    pub err_s: f64,
    pub err_tau: f64,
    /// A predictor vanished on a supported label and its logarithm was floored.
    pub clamped: bool,
}

pub fn generalized_errors(inst: &DiscreteInstance) -> Result<GeneralizedErrors> {
    inst.validate()?;
    let (ls, mut clamped) = inst.source_pointwise_losses();
    let err_s = ls.iter().zip(&inst.source_marginal).map(|(l, d)| l * d).sum();
    let mut err_tau = 0.0;
    for i in 0..inst.points() {
        let (v, c) = cross_entropy(inst.target_cond.row(i), inst.p_tau.row(i));
        clamped |= c && inst.target_marginal[i] > 0.0;
        err_tau += inst.target_marginal[i] * v;
    }
    Ok(GeneralizedErrors {
        err_s,
        err_tau,
        clamped,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaExact {
    pub fa: f64,
    /// Lipschitz constant of `l_s` restricted to the support.
    pub tau_hat: f64,
    pub w1: f64,
}

/// `tau_hat * W1(target marginal, source marginal)` under the Euclidean cost.
pub fn fa_exact(inst: &DiscreteInstance) -> Result<FaExact> {
    inst.validate()?;
    let (ls, _) = inst.source_pointwise_losses();
    let cost = cost_matrix(&inst.feature_points, &inst.feature_points)?;
    let n = inst.points();
    let mut tau_hat: f64 = 0.0;
    for i in 0..n {
        for j in 0..i {
            tau_hat = tau_hat.max((ls[i] - ls[j]).abs() / cost.get(i, j));
        }
    }
    let (_, w1) = exact_w1(&cost, &inst.target_marginal, &inst.source_marginal)?;
    let w1 = w1.max(0.0);
    Ok(FaExact {
        fa: tau_hat * w1,
        tau_hat,
        w1,
    })
}

/// The plan `Lambda+ * p_tau / q` and its divergence `KL(q || p_tau)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TfClosedForm {
    pub tf: f64,
    pub realized_plan: TransportKernel,
    /// `max_z |sum_z' plan(z'|z) - 1|` over rows with positive weight.
    pub row_deviation: f64,
    /// `max_z' |sum_z w(z) plan(z'|z) - p_tau(z')|`.
    pub marginal_deviation: f64,
}

impl TfClosedForm {
    /// Whether the realized plan is a row-stochastic kernel reproducing `p_tau`.
    pub fn plan_is_feasible(&self, tol: f64) -> bool {
        self.row_deviation <= tol && self.marginal_deviation <= tol
    }
}

pub fn tf_closed_form(
    plus_plan: &TransportKernel,
    w: &[f64],
    q: &[f64],
    p_tau: &[f64],
) -> Result<TfClosedForm> {
    let lam = plus_plan.lambda();
    if lam.rows() != w.len() || lam.cols() != q.len() || p_tau.len() != q.len() {
        return Err(Error::dim(
            "tf_closed_form",
            format!(
                "plan {:?}, w {}, q {}, p_tau {}",
                lam.shape(),
                w.len(),
                q.len(),
                p_tau.len()
            ),
        ));
    }
    for zp in 0..q.len() {
        if q[zp] <= 0.0 && (0..w.len()).any(|z| w[z] > 0.0 && lam.get(z, zp) > 0.0) {
            return Err(Error::Infeasible(format!(
                "target label {zp} has zero conditional mass but the plan sends mass to it"
            )));
        }
    }
    let plan = Matrix::from_fn(w.len(), q.len(), |z, zp| {
        if q[zp] > 0.0 {
            lam.get(z, zp) * p_tau[zp] / q[zp]
        } else {
            0.0
        }
    });
    let row_deviation = (0..w.len())
        .filter(|&z| w[z] > 0.0)
        .map(|z| (plan.row(z).iter().sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max);
    let realized = TransportKernel::unchecked(plan);
    let marginal_deviation = realized
        .push_forward(w)
        .iter()
        .zip(p_tau)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    Ok(TfClosedForm {
        tf: kl(q, p_tau),
        realized_plan: realized,
        row_deviation,
        marginal_deviation,
    })
}

/// `min E_{z~w} KL(Lambda+(.|z) || Lambda(.|z))` over row-stochastic
/// kernels with `E_{z~w} Lambda(.|z) = p_tau`, solved by a log-barrier
/// path on the dual variables of the transport constraints.
pub fn tf_convex_oracle(plus_plan: &TransportKernel, w: &[f64], p_tau: &[f64]) -> Result<f64> {
    let lam = plus_plan.lambda();
    let size = lam.rows().max(lam.cols());
    if size > MAX_ENUMERATION_SIZE {
        return Err(Error::Capability {
            what: "tf_convex_oracle",
            size,
            limit: MAX_ENUMERATION_SIZE,
        });
    }
    if lam.rows() != w.len() || lam.cols() != p_tau.len() {
        return Err(Error::dim("tf_convex_oracle", format!("plan {:?}, w {}, p_tau {}", lam.shape(), w.len(), p_tau.len())));
    }
    check_distribution(w, DIST_TOL, "source conditional")?;
    check_distribution(p_tau, DIST_TOL, "target predictor")
        .map_err(|e| Error::Infeasible(format!("p_tau lies outside the reachable polytope: {e}")))?;
    let rows: Vec<usize> = (0..w.len()).filter(|&z| w[z] > 0.0).collect();
    // joint weights a = w * Lambda+
    let a_full = |z: usize, zp: usize| w[z] * lam.get(z, zp);
    for zp in 0..p_tau.len() {
        if p_tau[zp] <= 0.0 && rows.iter().any(|&z| a_full(z, zp) > 0.0) {
            return Ok(f64::INFINITY);
        }
    }
    let cols: Vec<usize> = (0..p_tau.len()).filter(|&zp| p_tau[zp] > 0.0).collect();
    let (n, m) = (rows.len(), cols.len());
    let a = Matrix::from_fn(n, m, |i, j| a_full(rows[i], cols[j]));
    let wr: Vec<f64> = rows.iter().map(|&z| w[z]).collect();
    let pc: Vec<f64> = cols.iter().map(|&zp| p_tau[zp]).collect();
    if m == 1 || n == 0 {
        // single reachable label: every row is pinned to it
        let plan = Matrix::filled(n, m, 1.0);
        return Ok(kl_joint(&a, &plan, &wr));
    }

    // dual variables y = (alpha_0..alpha_{n-1}, beta_0..beta_{m-2}); beta_{m-1} = 0
    let dim = n + m - 1;
    let split = |y: &DVector<f64>| -> (Vec<f64>, Vec<f64>) {
        let alpha: Vec<f64> = (0..n).map(|i| y[i]).collect();
        let beta: Vec<f64> = (0..m).map(|j| if j + 1 < m { y[n + j] } else { 0.0 }).collect();
        (alpha, beta)
    };
    let dual = |y: &DVector<f64>, mu: f64| -> f64 {
        let (al, be) = split(y);
        let mut v = 0.0;
        for i in 0..n {
            v += al[i] * wr[i];
            for j in 0..m {
                let s = al[i] + be[j];
                if s <= 0.0 {
                    return f64::INFINITY;
                }
                v -= (a.get(i, j) + mu) * s.ln();
            }
        }
        v + be.iter().zip(&pc).map(|(b, p)| b * p).sum::<f64>()
    };

    let mut mu = 1.0;
    let mut y = DVector::<f64>::zeros(dim);
    for i in 0..n {
        let bsum: f64 = (0..m).map(|j| a.get(i, j) + mu).sum();
        y[i] = bsum / wr[i];
    }
    loop {
        for _ in 0..200 {
            let (al, be) = split(&y);
            let mut g = DVector::<f64>::zeros(dim);
            let mut h = DMatrix::<f64>::zeros(dim, dim);
            for i in 0..n {
                g[i] += wr[i];
            }
            for j in 0..m - 1 {
                g[n + j] += pc[j];
            }
            for i in 0..n {
                for j in 0..m {
                    let b = a.get(i, j) + mu;
                    let s = al[i] + be[j];
                    let (d1, d2) = (b / s, b / (s * s));
                    g[i] -= d1;
                    h[(i, i)] += d2;
                    if j + 1 < m {
                        g[n + j] -= d1;
                        h[(n + j, n + j)] += d2;
                        h[(i, n + j)] += d2;
                        h[(n + j, i)] += d2;
                    }
                }
            }
            let step = match h.clone().cholesky() {
                Some(c) => c.solve(&(-&g)),
                None => h
                    .lu()
                    .solve(&(-&g))
                    .ok_or_else(|| Error::invalid("tf_convex_oracle: singular Newton system"))?,
            };
            let decrement = -g.dot(&step);
            if decrement < 1e-24 {
                break;
            }
            let f0 = dual(&y, mu);
            let mut t = 1.0;
            loop {
                let cand = &y + &step * t;
                let f = dual(&cand, mu);
                if f <= f0 - 0.25 * t * decrement || t < 1e-16 {
                    y = cand;
                    break;
                }
                t *= 0.5;
            }
        }
        if mu <= 1e-13 {
            break;
        }
        mu *= 0.1;
    }
    let (al, be) = split(&y);
    let joint = Matrix::from_fn(n, m, |i, j| (a.get(i, j) + mu) / (al[i] + be[j]));
    // back to conditionals
    let plan = Matrix::from_fn(n, m, |i, j| joint.get(i, j) / wr[i]);
    Ok(kl_joint(&a, &plan, &wr))
}

/// `sum_z w(z) KL(a(z,.)/w(z) || plan(z,.))`.
fn kl_joint(a: &Matrix, plan: &Matrix, w: &[f64]) -> f64 {
    let mut v = 0.0;
    for i in 0..a.rows() {
        for j in 0..a.cols() {
            let x = a.get(i, j);
            if x > 0.0 {
                v += x * (x / w[i] / plan.get(i, j)).ln();
            }
        }
    }
    v.max(0.0)
}

/// Per-point distortion and fitting terms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointTerms {
    pub index: usize,
    pub weight: f64,
    pub fld: f64,
    pub tf: f64,
    pub plan_row_deviation: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub err_s: f64,
    pub err_tau: f64,
    pub fa: f64,
    pub e_fld: f64,
    pub e_tf: f64,
    pub rhs: f64,
    pub gap: f64,
    pub relative_gap: f64,
    pub tau_hat: f64,
    pub w1: f64,
    pub clamped: bool,
    pub points: Vec<PointTerms>,
}

impl BoundReport {
    pub fn holds(&self, slack: f64) -> bool {
        self.gap >= -slack
    }
}

fn point_terms(inst: &DiscreteInstance, i: usize) -> Result<PointTerms> {
    let w = inst.source_cond.row(i);
    let q = inst.target_cond.row(i);
    let (fld, plan) = fld_exact(w, q)?;
    let tf = tf_closed_form(&plan, w, q, inst.p_tau.row(i))
        .map_err(|e| Error::Infeasible(format!("feature point {i}: {e}")))?;
    Ok(PointTerms {
        index: i,
        weight: inst.target_marginal[i],
        fld,
        tf: tf.tf,
        plan_row_deviation: tf.row_deviation,
    })
}

/// Assembles every term of the bound and its gap.
pub fn evaluate_bound(inst: &DiscreteInstance) -> Result<BoundReport> {
    let size = inst.source_classes().max(inst.target_classes());
    if size > MAX_ENUMERATION_SIZE {
        return Err(Error::Capability {
            what: "evaluate_bound",
            size,
            limit: MAX_ENUMERATION_SIZE,
        });
    }
    let errs = generalized_errors(inst)?;
    let fa = fa_exact(inst)?;
    let points = (0..inst.points())
        .filter(|&i| inst.target_marginal[i] > 0.0)
        .map(|i| point_terms(inst, i))
        .collect::<Result<Vec<_>>>()?;
    let e_fld: f64 = points.iter().map(|p| p.weight * p.fld).sum();
    let e_tf: f64 = points.iter().map(|p| p.weight * p.tf).sum();
    let rhs = errs.err_s + fa.fa + e_fld + e_tf;
    let gap = rhs - errs.err_tau;
    let relative_gap = if rhs > 0.0 { gap / rhs } else { 0.0 };
    Ok(BoundReport {
        err_s: errs.err_s,
        err_tau: errs.err_tau,
        fa: fa.fa,
        e_fld,
        e_tf,
        rhs,
        gap,
        relative_gap,
        tau_hat: fa.tau_hat,
        w1: fa.w1,
        clamped: errs.clamped,
        points,
    })
}

/// The two halves of `err_tau - err_s = A + B` with their bounds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProofTerms {
    pub term_a_lhs: f64,
    pub term_a_rhs: f64,
    pub term_b_lhs: f64,
    pub term_b_rhs: f64,
    /// `E_tau[l_s] - E_s[l_s]`, the intermediate bound on B.
    pub term_b_mid: f64,
    /// `(A + B) - (err_tau - err_s)`.
    pub identity_residual: f64,
}

impl ProofTerms {
    pub fn hold(&self, tol: f64) -> bool {
        self.term_a_lhs <= self.term_a_rhs + tol
            && self.term_b_lhs <= self.term_b_mid + tol
            && self.term_b_mid <= self.term_b_rhs + tol
    }
}

pub fn verify_proof_terms(inst: &DiscreteInstance) -> Result<ProofTerms> {
    let rep = evaluate_bound(inst)?;
    // E_tau sum_z D_s(z|u) ln D_s(z|u) = -E_tau H(D_s(.|u))
    let neg_h: f64 = (0..inst.points())
        .map(|i| -inst.target_marginal[i] * entropy(inst.source_cond.row(i)))
        .sum();
    let a = rep.err_tau + neg_h;
    let b = -rep.err_s - neg_h;
    let (ls, _) = inst.source_pointwise_losses();
    let e_tau: f64 = ls.iter().zip(&inst.target_marginal).map(|(l, d)| l * d).sum();
    let e_s: f64 = ls.iter().zip(&inst.source_marginal).map(|(l, d)| l * d).sum();
    Ok(ProofTerms {
        term_a_lhs: a,
        term_a_rhs: rep.e_fld + rep.e_tf,
        term_b_lhs: b,
        term_b_rhs: rep.fa,
        term_b_mid: e_tau - e_s,
        identity_residual: (a + b) - (rep.err_tau - rep.err_s),
    })
}

/// `(w, q, Lambda+, p_tau)`.
pub type TfCase = (Vec<f64>, Vec<f64>, TransportKernel, Vec<f64>);

/// A random `(w, q, Lambda+, p_tau)` case in which the closed-form plan is a
/// proper kernel: `p_tau = q * r` with `Lambda+ (r - 1) = 0`. Returns `None`
/// when the drawn plan has no such direction.
pub fn random_feasible_tf_case(rng: &mut impl Rng) -> Result<Option<TfCase>> {
    let k = rng.random_range(1..=3);
    let kp = rng.random_range(2..=4);
    let mut w: Vec<f64> = (0..k).map(|_| rng.random_range(0.05..1.0)).collect();
    let mut q: Vec<f64> = (0..kp).map(|_| rng.random_range(0.05..1.0)).collect();
    normalize(&mut w);
    normalize(&mut q);
    let (_, plan) = fld_exact(&w, &q)?;
    let lam = plan.lambda();
    let mat = DMatrix::from_fn(k, kp, |i, j| lam.get(i, j));
    let eig = (mat.transpose() * &mat).symmetric_eigen();
    let mut null = Vec::new();
    for (idx, ev) in eig.eigenvalues.iter().enumerate() {
        if ev.abs() <= 1e-12 {
            null.push(eig.eigenvectors.column(idx).into_owned());
        }
    }
    if null.is_empty() {
        return Ok(None);
    }
    let mut v = DVector::<f64>::zeros(kp);
    for b in &null {
        v += b * rng.random_range(-1.0..1.0);
    }
    let vmax = v.amax();
    if vmax < 1e-9 {
        return Ok(None);
    }
    let scale = rng.random_range(0.1..0.8) / vmax;
    let mut p_tau: Vec<f64> = (0..kp).map(|j| q[j] * (1.0 + scale * v[j])).collect();
    normalize(&mut p_tau);
    Ok(Some((w, q, plan, p_tau)))
}

/// Writes one stacked-bar row per named report.
pub fn write_bars_csv<W: std::io::Write>(reports: &[(String, BoundReport)], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record([
        "task",
        "err_s",
        "fa",
        "fld",
        "tf",
        "rhs",
        "err_tau",
        "gap",
        "relative_gap",
    ])?;
    for (name, r) in reports {
        wr.write_record([
            name.clone(),
            r.err_s.to_string(),
            r.fa.to_string(),
            r.e_fld.to_string(),
            r.e_tf.to_string(),
            r.rhs.to_string(),
            r.err_tau.to_string(),
            r.gap.to_string(),
            r.relative_gap.to_string(),
        ])?;
    }
    wr.flush()?;
    Ok(())
}

pub fn save_bars_csv(reports: &[(String, BoundReport)], path: &Path) -> Result<()> {
    write_bars_csv(reports, std::fs::File::create(path)?)
}

/// Outcome of checking the bound and its two proof terms on a batch of
/// random instances.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoremSummary {
    pub instances: usize,
    pub seed: u64,
    pub slack: f64,
    pub violations: usize,
    pub proof_term_violations: usize,
    /// Smallest `rhs - err_tau` seen.
    pub min_margin: f64,
    pub mean_relative_gap: f64,
    pub clamped: usize,
    /// Seeds of the violating instances.
    pub violating_seeds: Vec<u64>,
}

pub const THEOREM_MAX_POINTS: usize = 5;
pub const THEOREM_MAX_CLASSES: usize = 4;

/// Instance `i` is drawn from seed `seed + i`, so the default run covers
/// seeds `0..instances`.
pub fn theorem_instance(seed: u64) -> DiscreteInstance {
    let mut rng = crate::rng::SeedStream::new(seed).rng("bound-instance");
    DiscreteInstance::random(&mut rng, THEOREM_MAX_POINTS, THEOREM_MAX_CLASSES, THEOREM_MAX_CLASSES)
}

pub fn verify_theorem(instances: usize, seed: u64, slack: f64) -> Result<TheoremSummary> {
    let mut summary = TheoremSummary {
        instances,
        seed,
        slack,
        violations: 0,
        proof_term_violations: 0,
        min_margin: f64::INFINITY,
        mean_relative_gap: 0.0,
        clamped: 0,
        violating_seeds: Vec::new(),
    };
    let mut gaps = 0.0;
    for i in 0..instances as u64 {
        let inst = theorem_instance(seed + i);
        let r = evaluate_bound(&inst)?;
        let t = verify_proof_terms(&inst)?;
        if !r.holds(slack) {
            summary.violations += 1;
            summary.violating_seeds.push(seed + i);
        }
        if !t.hold(slack) {
            summary.proof_term_violations += 1;
        }
        summary.min_margin = summary.min_margin.min(r.rhs - r.err_tau);
        if r.relative_gap.is_finite() {
            gaps += r.relative_gap;
        }
        summary.clamped += usize::from(r.clamped);
    }
    summary.mean_relative_gap = gaps / instances.max(1) as f64;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedStream;

    fn one_point(w: &[f64], q: &[f64], ps: &[f64], pt: &[f64]) -> DiscreteInstance {
        DiscreteInstance {
            feature_points: Matrix::row_vector(&[0.0]),
            source_marginal: vec![1.0],
            target_marginal: vec![1.0],
            source_cond: Matrix::row_vector(w),
            target_cond: Matrix::row_vector(q),
            p_s: Matrix::row_vector(ps),
            p_tau: Matrix::row_vector(pt),
        }
    }

    #[test]
    fn perfect_and_uniform_predictors() {
        let inst = one_point(&[1.0, 0.0], &[0.0, 1.0], &[1.0, 0.0], &[0.0, 1.0]);
        let e = generalized_errors(&inst).unwrap();
        assert_eq!((e.err_s, e.err_tau), (0.0, 0.0));
        let inst = one_point(&[1.0, 0.0], &[0.2, 0.3, 0.5], &[1.0, 0.0], &[1.0 / 3.0; 3]);
        assert!((generalized_errors(&inst).unwrap().err_tau - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn errors_match_double_sum() {
        let mut rng = SeedStream::new(1).rng("errs");
        let mut inst = DiscreteInstance::random(&mut rng, 3, 3, 3);
        while inst.points() != 3 {
            inst = DiscreteInstance::random(&mut rng, 3, 3, 3);
        }
        let e = generalized_errors(&inst).unwrap();
        let mut es = 0.0;
        let mut et = 0.0;
        for i in 0..3 {
            for z in 0..inst.source_classes() {
                es -= inst.source_marginal[i] * inst.source_cond.get(i, z) * inst.p_s.get(i, z).ln();
            }
            for z in 0..inst.target_classes() {
                et -= inst.target_marginal[i] * inst.target_cond.get(i, z) * inst.p_tau.get(i, z).ln();
            }
        }
        assert!((e.err_s - es).abs() < 1e-12 && (e.err_tau - et).abs() < 1e-12);
    }

    #[test]
    fn fa_edge_cases() {
        let mut rng = SeedStream::new(2).rng("fa");
        let mut inst = DiscreteInstance::random(&mut rng, 5, 3, 3);
        inst.target_marginal = inst.source_marginal.clone();
        assert!(fa_exact(&inst).unwrap().fa.abs() < 1e-12);
        let mut inst = DiscreteInstance::random(&mut rng, 5, 3, 3);
        let n = inst.points();
        inst.source_cond = Matrix::from_fn(n, 3, |_, j| [0.2, 0.3, 0.5][j]);
        inst.p_s = Matrix::from_fn(n, 3, |_, j| [0.5, 0.25, 0.25][j]);
        let f = fa_exact(&inst).unwrap();
        assert_eq!(f.tau_hat, 0.0);
        assert_eq!(f.fa, 0.0);
        let single = one_point(&[0.5, 0.5], &[1.0], &[0.9, 0.1], &[1.0]);
        assert_eq!(fa_exact(&single).unwrap().fa, 0.0);
    }

    #[test]
    fn fa_bounds_loss_shift() {
        let mut rng = SeedStream::new(3).rng("fa-shift");
        for _ in 0..200 {
            let inst = DiscreteInstance::random(&mut rng, 5, 4, 4);
            let (ls, _) = inst.source_pointwise_losses();
            let et: f64 = ls.iter().zip(&inst.target_marginal).map(|(a, b)| a * b).sum();
            let es: f64 = ls.iter().zip(&inst.source_marginal).map(|(a, b)| a * b).sum();
            assert!((et - es).abs() <= fa_exact(&inst).unwrap().fa + 1e-9);
        }
    }

    #[test]
    fn tf_examples() {
        let (_, plan) = fld_exact(&[0.6, 0.4], &[0.5, 0.5]).unwrap();
        let r = tf_closed_form(&plan, &[0.6, 0.4], &[0.5, 0.5], &[0.5, 0.5]).unwrap();
        assert_eq!(r.tf, 0.0);
        assert_eq!(r.realized_plan.lambda(), plan.lambda());
        assert!(tf_convex_oracle(&plan, &[0.6, 0.4], &[0.5, 0.5]).unwrap() < 1e-9);

        let (_, plan) = fld_exact(&[1.0], &[0.5, 0.5]).unwrap();
        let r = tf_closed_form(&plan, &[1.0], &[0.5, 0.5], &[0.8, 0.2]).unwrap();
        let expect = 0.5 * (0.5f64 / 0.8).ln() + 0.5 * (0.5f64 / 0.2).ln();
        assert!((r.tf - expect).abs() < 1e-15);
        assert!((r.tf - 0.2231).abs() < 1e-4);
        assert!(r.plan_is_feasible(1e-12));
        // a single source class pins the kernel to p_tau
        let o = tf_convex_oracle(&plan, &[1.0], &[0.8, 0.2]).unwrap();
        assert!((o - expect).abs() < 1e-8, "{o}");
    }

    #[test]
    fn tf_closed_form_errors() {
        let plan = TransportKernel::new(Matrix::row_vector(&[0.5, 0.5])).unwrap();
        assert!(matches!(
            tf_closed_form(&plan, &[1.0], &[1.0, 0.0], &[0.5, 0.5]),
            Err(Error::Infeasible(_))
        ));
        let plan = TransportKernel::new(Matrix::row_vector(&[1.0, 0.0])).unwrap();
        let r = tf_closed_form(&plan, &[1.0], &[1.0, 0.0], &[0.0, 1.0]).unwrap();
        assert_eq!(r.tf, f64::INFINITY);
    }

    #[test]
    fn closed_form_matches_oracle_on_feasible_cases() {
        let mut rng = SeedStream::new(4).rng("tf");
        let mut done = 0;
        while done < 50 {
            let Some((w, q, plan, pt)) = random_feasible_tf_case(&mut rng).unwrap() else {
                continue;
            };
            let cf = tf_closed_form(&plan, &w, &q, &pt).unwrap();
            assert!(cf.plan_is_feasible(1e-9), "{:?}", cf);
            let o = tf_convex_oracle(&plan, &w, &pt).unwrap();
            assert!((cf.tf - o).abs() < 1e-6, "{} vs {}", cf.tf, o);
            done += 1;
        }
    }

    #[test]
    fn closed_form_lower_bounds_oracle() {
        let mut rng = SeedStream::new(5).rng("tf-general");
        for _ in 0..100 {
            let (k, kp) = (rng.random_range(1..=4), rng.random_range(1..=4));
            let mut w: Vec<f64> = (0..k).map(|_| rng.random_range(0.05..1.0)).collect();
            let mut q: Vec<f64> = (0..kp).map(|_| rng.random_range(0.05..1.0)).collect();
            let mut pt: Vec<f64> = (0..kp).map(|_| rng.random_range(0.05..1.0)).collect();
            normalize(&mut w);
            normalize(&mut q);
            normalize(&mut pt);
            let (_, plan) = fld_exact(&w, &q).unwrap();
            let cf = tf_closed_form(&plan, &w, &q, &pt).unwrap();
            let o = tf_convex_oracle(&plan, &w, &pt).unwrap();
            assert!(cf.tf <= o + 1e-9, "{} > {}", cf.tf, o);
            assert!(cf.marginal_deviation < 1e-12);
        }
    }

    #[test]
    fn theorem_holds_on_random_instances() {
        let mut rng = SeedStream::new(6).rng("theorem");
        for _ in 0..300 {
            let inst = DiscreteInstance::random(&mut rng, 5, 4, 4);
            let r = evaluate_bound(&inst).unwrap();
            assert!(r.holds(1e-9), "{r:?}");
            assert!(r.fa >= 0.0 && r.e_fld >= 0.0 && r.e_tf >= 0.0);
            assert!((r.rhs - (r.err_s + r.fa + r.e_fld + r.e_tf)).abs() < 1e-12);
            let p = verify_proof_terms(&inst).unwrap();
            assert!(p.hold(1e-9), "{p:?}");
            assert!(p.identity_residual.abs() < 1e-9);
        }
    }

    #[test]
    fn self_transfer_and_permutation_cases() {
        let mut rng = SeedStream::new(7).rng("self");
        let mut inst = DiscreteInstance::random(&mut rng, 4, 3, 3);
        let (n, k) = (inst.points(), inst.source_classes());
        inst.target_marginal = inst.source_marginal.clone();
        inst.p_s = Matrix::from_fn(n, k, |i, j| (0.1 + inst.source_cond.get(i, j)) / (1.0 + 0.1 * k as f64));
        inst.source_cond = inst.p_s.clone();
        inst.target_cond = inst.source_cond.clone();
        inst.p_tau = inst.p_s.clone();
        let p = verify_proof_terms(&inst).unwrap();
        assert!(p.term_b_lhs.abs() < 1e-12);
        let r = evaluate_bound(&inst).unwrap();
        assert!(r.e_tf.abs() < 1e-12 && r.fa.abs() < 1e-12);
        assert!((r.gap - r.e_fld).abs() < 1e-9);

        let w = Matrix::from_rows(&[[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]]).unwrap();
        let perm = Matrix::from_rows(&[[0.0, 1.0, 0.0], [1.0, 0.0, 0.0]]).unwrap();
        let inst = DiscreteInstance {
            feature_points: Matrix::column_vector(&[0.0, 1.0]),
            source_marginal: vec![0.5, 0.5],
            target_marginal: vec![0.5, 0.5],
            source_cond: w.clone(),
            target_cond: perm.clone(),
            p_s: w.clone(),
            p_tau: perm,
        };
        let p = verify_proof_terms(&inst).unwrap();
        assert!(p.term_a_lhs.abs() < 1e-12 && p.term_a_rhs.abs() < 1e-12);
    }

    #[test]
    fn rhs_is_invariant_under_target_relabeling() {
        let mut rng = SeedStream::new(8).rng("perm");
        for _ in 0..50 {
            let inst = DiscreteInstance::random(&mut rng, 4, 3, 3);
            let kp = inst.target_classes();
            let sigma: Vec<usize> = (0..kp).rev().collect();
            let relabel = |m: &Matrix| Matrix::from_fn(m.rows(), kp, |i, j| m.get(i, sigma[j]));
            let mut p = inst.clone();
            p.target_cond = relabel(&inst.target_cond);
            p.p_tau = relabel(&inst.p_tau);
            let (a, b) = (evaluate_bound(&inst).unwrap(), evaluate_bound(&p).unwrap());
            assert!((a.rhs - b.rhs).abs() < 1e-9);
        }
    }

    #[test]
    fn fitting_the_predictor_reduces_tf() {
        let q = [0.2, 0.5, 0.3];
        let w = [0.6, 0.4];
        let (_, plan) = fld_exact(&w, &q).unwrap();
        let mut logits = vec![1.0, -1.0, 0.5];
        let mut last = f64::INFINITY;
        for _ in 0..50 {
            let m = Matrix::row_vector(&logits).softmax_rows();
            let p = m.row(0).to_vec();
            let tf = tf_closed_form(&plan, &w, &q, &p).unwrap().tf;
            assert!(tf <= last + 1e-15);
            last = tf;
            for k in 0..3 {
                logits[k] -= 0.5 * (p[k] - q[k]);
            }
        }
        assert!(last < 1e-2);
    }

    #[test]
    fn bars_csv_layout() {
        let mut rng = SeedStream::new(9).rng("bars");
        let r = evaluate_bound(&DiscreteInstance::random(&mut rng, 4, 3, 3)).unwrap();
        let mut buf = Vec::new();
        write_bars_csv(&[("t0".into(), r)], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("task,err_s,fa,fld,tf,rhs,err_tau,gap,relative_gap\n"));
    }
}
