//! Feature-label distortion: exact minimum-entropy plans with fixed
//! marginals, and the pseudo-label conditional-entropy surrogate.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::infotheory::{check_distribution, entropy, xlogx};
use crate::models::{embed, predict_source, MlpGrads, MlpParams};
use crate::numgrad::{Matrix, Tape};
use crate::transport::{enumerate_polytope_vertices, random_vertex, Coupling, MAX_ENUMERATION_SIZE};

/// Row-stochastic `Lambda(z'|z)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransportKernel {
    lambda: Matrix,
}

impl TransportKernel {
    pub fn new(lambda: Matrix) -> Result<Self> {
        for (z, row) in lambda.to_rows().iter().enumerate() {
            check_distribution(row, 1e-10, &format!("kernel row {z}"))?;
        }
        Ok(Self { lambda })
    }

    /// Kernel whose rows are not checked; callers that build near-stochastic
    /// plans report their own deviations.
    pub(crate) fn unchecked(lambda: Matrix) -> Self {
        Self { lambda }
    }

    pub fn lambda(&self) -> &Matrix {
        &self.lambda
    }

    pub fn z_classes(&self) -> usize {
        self.lambda.rows()
    }

    pub fn zprime_classes(&self) -> usize {
        self.lambda.cols()
    }

    /// `sum_z w(z) Lambda(.|z)`.
    pub fn push_forward(&self, w: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.zprime_classes()];
        for (z, &wz) in w.iter().enumerate() {
            for (o, &l) in out.iter_mut().zip(self.lambda.row(z)) {
                *o += wz * l;
            }
        }
        out
    }

    /// `E_{z~w} H[Lambda(.|z)]`.
    pub fn expected_entropy(&self, w: &[f64]) -> f64 {
        w.iter()
            .enumerate()
            .filter(|(_, v)| **v > 0.0)
            .map(|(z, v)| v * entropy(self.lambda.row(z)))
            .sum()
    }

    /// Kernel of a coupling: `pi(z, z') / w(z)`, with zero-mass rows set to `q`.
    pub fn from_coupling(c: &Coupling) -> Self {
        let (w, q) = (c.row_marginal(), c.col_marginal());
        let lambda = Matrix::from_fn(w.len(), q.len(), |z, zp| {
            if w[z] > 0.0 {
                c.pi().get(z, zp) / w[z]
            } else {
                q[zp]
            }
        });
        Self { lambda }
    }
}

fn coupling_objective(c: &Coupling, hw: f64) -> f64 {
    -c.pi().as_slice().iter().map(|&v| xlogx(v)).sum::<f64>() - hw
}

/// Minimum of `H(pi) - H(w)` over couplings with marginals `(w, q)`, and the
/// conditional plan that attains it.
pub fn fld_exact(w: &[f64], q: &[f64]) -> Result<(f64, TransportKernel)> {
    let size = w.len().max(q.len());
    if size > MAX_ENUMERATION_SIZE {
        return Err(Error::Capability {
            what: "fld_exact",
            size,
            limit: MAX_ENUMERATION_SIZE,
        });
    }
    let hw = entropy(w);
    let best = enumerate_polytope_vertices(w, q)?
        .into_iter()
        .map(|c| (coupling_objective(&c, hw), c))
        .min_by(|a, b| a.0.total_cmp(&b.0))
        .ok_or_else(|| Error::invalid("empty transportation polytope"))?;
    Ok((best.0.max(0.0), TransportKernel::from_coupling(&best.1)))
}

/// Best objective among `samples` random vertices.
pub fn fld_random_search(w: &[f64], q: &[f64], samples: usize, rng: &mut impl Rng) -> f64 {
    let hw = entropy(w);
    (0..samples)
        .map(|_| coupling_objective(&random_vertex(w, q, rng), hw))
        .fold(f64::INFINITY, f64::min)
        .max(0.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PseudoLabelMode {
    Hard,
    Soft,
}

/// Joint distribution of (pseudo source label, target label).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointLabelStats {
    pub joint: Matrix,
    pub kappa: usize,
}

impl JointLabelStats {
    pub fn new(joint: Matrix, kappa: usize) -> Result<Self> {
        if joint.as_slice().iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::invalid("joint has negative or non-finite entries"));
        }
        let s = joint.sum();
        if (s - 1.0).abs() > 1e-10 {
            return Err(Error::invalid(format!("joint has total mass {s}")));
        }
        Ok(Self { joint, kappa })
    }

    pub fn source_marginal(&self) -> Vec<f64> {
        self.joint.row_sums()
    }

    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let mut header = vec!["z".to_string()];
        header.extend((0..self.joint.cols()).map(|j| format!("zp{j}")));
        wr.write_record(&header)?;
        for z in 0..self.joint.rows() {
            let mut rec = vec![z.to_string()];
            rec.extend(self.joint.row(z).iter().map(|v| format!("{v:e}")));
            wr.write_record(&rec)?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }
}

/// Joint counts of sampled (hard) or expected (soft) pseudo source labels
/// against the observed target labels.
pub fn pseudo_label_stats(
    phi: &MlpParams,
    source_head: &MlpParams,
    target: &Dataset,
    mode: PseudoLabelMode,
    rng: &mut impl Rng,
) -> Result<JointLabelStats> {
    if target.is_empty() {
        return Err(Error::invalid("pseudo-label statistics need a nonempty dataset"));
    }
    let ps = predict_source(source_head, &embed(phi, &target.x)?)?;
    joint_from_predictions(&ps, &target.labels, target.classes, mode, rng)
}

pub fn joint_from_predictions(
    ps: &Matrix,
    labels: &[usize],
    classes: usize,
    mode: PseudoLabelMode,
    rng: &mut impl Rng,
) -> Result<JointLabelStats> {
    let kappa = labels.len();
    if kappa == 0 || ps.rows() != kappa {
        return Err(Error::dim("pseudo_label_stats", format!("{} predictions for {kappa} labels", ps.rows())));
    }
    if let Some(l) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::invalid(format!("target label {l} out of range for {classes} classes")));
    }
    let k = ps.cols();
    let mut joint = Matrix::zeros(k, classes);
    let inv = 1.0 / kappa as f64;
    for (i, &zp) in labels.iter().enumerate() {
        match mode {
            PseudoLabelMode::Soft => {
                for z in 0..k {
                    joint.set(z, zp, joint.get(z, zp) + ps.get(i, z) * inv);
                }
            }
            PseudoLabelMode::Hard => {
                let r: f64 = rng.random();
                let mut acc = 0.0;
                let mut z = k - 1;
                for (c, &p) in ps.row(i).iter().enumerate() {
                    acc += p;
                    if r < acc {
                        z = c;
                        break;
                    }
                }
                joint.set(z, zp, joint.get(z, zp) + inv);
            }
        }
    }
    // absorb summation drift so the mass invariant holds exactly enough
    let s = joint.sum();
    JointLabelStats::new(joint.scale(1.0 / s), kappa)
}

/// `H(Z, Z') - H(Z)` of the joint: the conditional entropy of target labels
/// given pseudo source labels.
pub fn fld_surrogate(stats: &JointLabelStats) -> f64 {
    let h_joint = entropy(stats.joint.as_slice());
    let h_rows = entropy(&stats.source_marginal());
    (h_joint - h_rows).max(0.0)
}

/// Soft-count surrogate and its gradient for the target embedder.
pub fn fld_loss_and_grad(
    phi: &MlpParams,
    source_head: &MlpParams,
    target: &Dataset,
) -> Result<(f64, MlpGrads)> {
    if target.is_empty() {
        return Err(Error::invalid("distortion loss needs a nonempty dataset"));
    }
    let kappa = target.len() as f64;
    let mut tape = Tape::new();
    let x = tape.leaf(target.x.clone());
    let (u, vars) = phi.record(&mut tape, x)?;
    let (logits, _) = source_head.record(&mut tape, u)?;
    let ps = tape.softmax(logits)?;
    let pst = tape.transpose(ps)?;
    let y = tape.leaf(target.one_hot());
    let counts = tape.matmul(pst, y)?;
    let joint = tape.scale(counts, 1.0 / kappa)?;
    let ones = tape.leaf(Matrix::filled(target.classes, 1, 1.0));
    let rows = tape.matmul(joint, ones)?;
    let rows_xlx = tape.xlogx(rows)?;
    let joint_xlx = tape.xlogx(joint)?;
    let a = tape.sum(rows_xlx)?;
    let b = tape.sum(joint_xlx)?;
    let loss = tape.sub(a, b)?;
    let grads = MlpGrads::collect(&tape.backward(loss)?, &vars);
    Ok((tape.value(loss).item(), grads))
}
