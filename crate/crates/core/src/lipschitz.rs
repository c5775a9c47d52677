//! Lipschitz recalibration of the source head: a hinge-squared penalty on
//! the input-gradient norm of the pointwise source loss, optimized over the
//! last head layer only.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::infotheory::cross_entropy;
use crate::models::{embed, predict_source, Activation, MlpParams};
use crate::numgrad::{Matrix, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LipschitzConfig {
    pub omega: f64,
    pub penalty_weight: f64,
    pub epochs: usize,
    pub lr: f64,
}

impl Default for LipschitzConfig {
    fn default() -> Self {
        Self {
            omega: 0.3,
            penalty_weight: 1.0,
            epochs: 300,
            lr: 0.5,
        }
    }
}

impl LipschitzConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.omega > 0.0) {
            return Err(Error::invalid(format!("omega must be positive, got {}", self.omega)));
        }
        if !(self.lr > 0.0) || !(self.penalty_weight >= 0.0) {
            return Err(Error::invalid("lr must be positive and penalty_weight nonnegative"));
        }
        Ok(())
    }
}

/// Candidate grid `0.1, 0.2, ..., 1.0`.
pub fn default_omega_grid() -> Vec<f64> {
    (1..=10).map(|i| i as f64 / 10.0).collect()
}

/// `-sum_z cond(z) ln p_s(z|u)` at one feature point; the flag reports a
/// clamped logarithm.
pub fn source_pointwise_loss(head: &MlpParams, u: &[f64], cond: &[f64]) -> Result<(f64, bool)> {
    let p = predict_source(head, &Matrix::row_vector(u))?;
    if cond.len() != p.cols() {
        return Err(Error::dim("source_pointwise_loss", format!("{} classes vs {}", cond.len(), p.cols())));
    }
    Ok(cross_entropy(cond, p.row(0)))
}

/// Hidden-layer features and their constant Jacobians with respect to `u`,
/// for a head whose last layer is affine with identity activation.
struct FrozenHead {
    hidden: Matrix,
    jacs: Arc<Vec<Matrix>>,
}

fn check_head(head: &MlpParams) -> Result<()> {
    let last = head.layers().last().expect("non-empty");
    if last.act != Activation::Identity {
        return Err(Error::invalid("the head's last layer must emit raw logits"));
    }
    Ok(())
}

fn freeze(head: &MlpParams, u: &Matrix) -> Result<FrozenHead> {
    check_head(head)?;
    if u.cols() != head.input_dim() {
        return Err(Error::dim("lipschitz", format!("features have {} columns, head expects {}", u.cols(), head.input_dim())));
    }
    let layers = head.layers();
    let hidden_layers = &layers[..layers.len() - 1];
    let d = u.cols();
    let mut h = u.clone();
    let mut jacs: Vec<Matrix> = vec![Matrix::identity(d); u.rows()];
    for l in hidden_layers {
        let a = l.pre_activation(&h)?;
        let y = l.activate(&a);
        let wt = l.w.transpose();
        for (i, j) in jacs.iter_mut().enumerate() {
            let mut next = wt.matmul(j)?;
            for r in 0..next.rows() {
                let s = l.act.derivative(a.get(i, r), y.get(i, r));
                next.row_mut(r).iter_mut().for_each(|v| *v *= s);
            }
            *j = next;
        }
        h = y;
    }
    Ok(FrozenHead {
        hidden: h,
        jacs: Arc::new(jacs),
    })
}

struct Recorded {
    ce: Var,
    penalty: Var,
    objective: Var,
    w: Var,
    b: Var,
}

fn record(
    tape: &mut Tape,
    frozen: &FrozenHead,
    w: &Matrix,
    b: &Matrix,
    cond: &Matrix,
    omega: f64,
    weight: f64,
) -> Result<Recorded> {
    let n = frozen.hidden.rows() as f64;
    let h = tape.leaf(frozen.hidden.clone());
    let wv = tape.leaf(w.clone());
    let bv = tape.leaf(b.clone());
    let c = tape.leaf(cond.clone());
    let a = tape.matmul(h, wv)?;
    let logits = tape.add(a, bv)?;
    let logp = tape.log_softmax(logits)?;
    let p = tape.softmax(logits)?;
    let cl = tape.mul(c, logp)?;
    let s = tape.sum(cl)?;
    let ce = tape.scale(s, -1.0 / n)?;
    // grad_u l_s = (p - cond) W^T J_hidden(u) when each cond row sums to one
    let resid = tape.sub(p, c)?;
    let wt = tape.transpose(wv)?;
    let gh = tape.matmul(resid, wt)?;
    let gu = tape.row_jacobian(gh, frozen.jacs.clone())?;
    let norms = tape.row_norms(gu)?;
    let excess = tape.add_scalar(norms, -omega)?;
    let hinge = tape.hinge(excess)?;
    let sq = tape.square(hinge)?;
    let penalty = tape.mean(sq)?;
    let wp = tape.scale(penalty, weight)?;
    let objective = tape.add(ce, wp)?;
    Ok(Recorded {
        ce,
        penalty,
        objective,
        w: wv,
        b: bv,
    })
}

/// `grad_u l_s` for every row of `u` under conditionals `cond`.
pub fn input_gradients(head: &MlpParams, u: &Matrix, cond: &Matrix) -> Result<Matrix> {
    let frozen = freeze(head, u)?;
    let last = head.layers().last().expect("non-empty");
    let p = (frozen.hidden.matmul(&last.w)?.add_row(&last.b)?).softmax_rows();
    let gh = p.sub(cond)?.matmul(&last.w.transpose())?;
    let mut out = Matrix::zeros(u.rows(), u.cols());
    for i in 0..u.rows() {
        let g = Matrix::row_vector(gh.row(i)).matmul(&frozen.jacs[i])?;
        out.row_mut(i).copy_from_slice(g.as_slice());
    }
    Ok(out)
}

/// Euclidean norms of the input gradients.
pub fn gradient_norms(head: &MlpParams, u: &Matrix, cond: &Matrix) -> Result<Vec<f64>> {
    let g = input_gradients(head, u, cond)?;
    Ok((0..g.rows())
        .map(|i| g.row(i).iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect())
}

/// `mean_i max(0, ||grad_u l_s(u_i)|| - omega)^2`.
pub fn lipschitz_penalty(head: &MlpParams, u: &Matrix, cond: &Matrix, omega: f64) -> Result<f64> {
    Ok(gradient_norms(head, u, cond)?
        .iter()
        .map(|g| (g - omega).max(0.0).powi(2))
        .sum::<f64>()
        / u.rows() as f64)
}

/// Penalty and its gradient with respect to the last layer `(w, b)`.
pub fn penalty_and_grad(head: &MlpParams, u: &Matrix, cond: &Matrix, omega: f64) -> Result<(f64, Matrix, Matrix)> {
    let frozen = freeze(head, u)?;
    let last = head.layers().last().expect("non-empty");
    let mut tape = Tape::new();
    let r = record(&mut tape, &frozen, &last.w, &last.b, cond, omega, 1.0)?;
    let g = tape.backward(r.penalty)?;
    Ok((tape.value(r.penalty).item(), g.get(r.w), g.get(r.b)))
}

#[derive(Clone, Debug)]
pub struct Recalibration {
    pub head: MlpParams,
    pub initial_penalty: f64,
    pub final_penalty: f64,
    /// `(cross-entropy, penalty)` per epoch before each update.
    pub history: Vec<(f64, f64)>,
}

/// Gradient descent on `CE + penalty_weight * penalty` over the proxy set,
/// updating only the head's last layer. A head already satisfying the
/// constraint is returned unchanged.
pub fn recalibrate_head(
    head: &MlpParams,
    theta: &MlpParams,
    proxy: &Dataset,
    cfg: &LipschitzConfig,
) -> Result<Recalibration> {
    cfg.validate()?;
    if proxy.is_empty() {
        return Err(Error::invalid("recalibration needs a nonempty proxy dataset"));
    }
    let u = embed(theta, &proxy.x)?;
    let cond = proxy.one_hot();
    let frozen = freeze(head, &u)?;
    let last = head.layers().last().expect("non-empty");
    let (mut w, mut b) = (last.w.clone(), last.b.clone());
    let mut history = Vec::with_capacity(cfg.epochs + 1);
    let mut initial_penalty = None;
    let mut last_obj = f64::INFINITY;
    let mut rises = 0;
    for epoch in 0..=cfg.epochs {
        let mut tape = Tape::new();
        let r = record(&mut tape, &frozen, &w, &b, &cond, cfg.omega, cfg.penalty_weight)?;
        let (ce, pen) = (tape.value(r.ce).item(), tape.value(r.penalty).item());
        let obj = tape.value(r.objective).item();
        history.push((ce, pen));
        let init = *initial_penalty.get_or_insert(pen);
        if init == 0.0 || epoch == cfg.epochs {
            break;
        }
        if obj > last_obj {
            rises += 1;
            if rises >= 5 {
                return Err(Error::Divergence(format!(
                    "recalibration objective rose for 5 consecutive epochs (now {obj:.6e} at epoch {epoch}); lower lr"
                )));
            }
        } else {
            rises = 0;
        }
        last_obj = obj;
        let g = tape.backward(r.objective)?;
        w = w.sub(&g.get(r.w).scale(cfg.lr))?;
        b = b.sub(&g.get(r.b).scale(cfg.lr))?;
    }
    let new_head = if initial_penalty == Some(0.0) {
        head.clone()
    } else {
        head.with_last_layer(w, b)?
    };
    let final_penalty = lipschitz_penalty(&new_head, &u, &cond, cfg.omega)?;
    Ok(Recalibration {
        head: new_head,
        initial_penalty: initial_penalty.unwrap_or(0.0),
        final_penalty,
        history,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub omega: f64,
    /// Held-out 0-1 error after recalibration.
    pub proxy_error: f64,
    /// Held-out penalty after recalibration.
    pub penalty_residual: f64,
    /// Held-out cross-entropy after recalibration.
    pub proxy_loss: f64,
}

pub fn zero_one_error(pred: &Matrix, labels: &[usize]) -> f64 {
    let wrong = pred
        .argmax_rows()
        .iter()
        .zip(labels)
        .filter(|(a, b)| a != b)
        .count();
    wrong as f64 / labels.len().max(1) as f64
}

pub fn mean_cross_entropy(pred: &Matrix, labels: &[usize]) -> f64 {
    labels
        .iter()
        .enumerate()
        .map(|(i, &l)| {
            let mut c = vec![0.0; pred.cols()];
            c[l] = 1.0;
            cross_entropy(&c, pred.row(i)).0
        })
        .sum::<f64>()
        / labels.len().max(1) as f64
}

/// Held-out behaviour of a source head on `embed(theta, data.x)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadEval {
    pub error: f64,
    pub loss: f64,
    /// 95th percentile of the per-point input-gradient norm.
    pub grad_norm_p95: f64,
    pub grad_norm_max: f64,
}

pub fn evaluate_head(head: &MlpParams, theta: &MlpParams, data: &Dataset) -> Result<HeadEval> {
    let u = embed(theta, &data.x)?;
    let pred = predict_source(head, &u)?;
    let mut norms = gradient_norms(head, &u, &data.one_hot())?;
    norms.sort_by(f64::total_cmp);
    let p95 = if norms.is_empty() {
        0.0
    } else {
        let pos = 0.95 * (norms.len() - 1) as f64;
        let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
        norms[lo] + (norms[hi] - norms[lo]) * (pos - lo as f64)
    };
    Ok(HeadEval {
        error: zero_one_error(&pred, &data.labels),
        loss: mean_cross_entropy(&pred, &data.labels),
        grad_norm_p95: p95,
        grad_norm_max: norms.last().copied().unwrap_or(0.0),
    })
}

/// Recalibrates once per candidate and evaluates on `heldout`.
pub fn sweep_omega(
    candidates: &[f64],
    proxy: &Dataset,
    heldout: &Dataset,
    theta: &MlpParams,
    head: &MlpParams,
    cfg: &LipschitzConfig,
) -> Result<Vec<SweepRow>> {
    if candidates.is_empty() {
        return Err(Error::invalid("empty omega grid"));
    }
    if candidates.iter().any(|w| !(*w > 0.0)) || candidates.windows(2).any(|p| p[0] > p[1]) {
        return Err(Error::invalid("omega candidates must be positive and sorted"));
    }
    let u = embed(theta, &heldout.x)?;
    let cond = heldout.one_hot();
    candidates
        .iter()
        .map(|&omega| {
            let c = LipschitzConfig { omega, ..*cfg };
            let rec = recalibrate_head(head, theta, proxy, &c)?;
            let pred = predict_source(&rec.head, &u)?;
            Ok(SweepRow {
                omega,
                proxy_error: zero_one_error(&pred, &heldout.labels),
                penalty_residual: lipschitz_penalty(&rec.head, &u, &cond, omega)?,
                proxy_loss: mean_cross_entropy(&pred, &heldout.labels),
            })
        })
        .collect()
}

pub fn write_sweep_csv<W: std::io::Write>(rows: &[SweepRow], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["omega", "proxy_error", "penalty_residual", "proxy_loss"])?;
    for r in rows {
        wr.write_record([
            r.omega.to_string(),
            r.proxy_error.to_string(),
            r.penalty_residual.to_string(),
            r.proxy_loss.to_string(),
        ])?;
    }
    wr.flush()?;
    Ok(())
}

pub fn save_sweep_csv(rows: &[SweepRow], path: &Path) -> Result<()> {
    write_sweep_csv(rows, std::fs::File::create(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{Layer, Role};
    use crate::numgrad::{central_difference, max_relative_error};
    use crate::rng::SeedStream;
    use rand::Rng;

    fn head(seed: u64) -> MlpParams {
        MlpParams::random(&[3, 5, 4], Activation::Tanh, Activation::Identity, Role::SourceHead, &mut SeedStream::new(seed).rng("head"))
    }

    fn points(seed: u64, n: usize) -> (Matrix, Matrix) {
        let mut rng = SeedStream::new(seed).rng("pts");
        let u = Matrix::from_fn(n, 3, |_, _| rng.random_range(-1.5..1.5));
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..4)).collect();
        (u, Matrix::one_hot(&labels, 4).unwrap())
    }

    #[test]
    fn pointwise_loss_edge_cases() {
        let lin = |b: Vec<f64>| {
            MlpParams::new(
                vec![Layer { w: Matrix::zeros(2, b.len()), b: Matrix::row_vector(&b), act: Activation::Identity }],
                Role::SourceHead,
            )
            .unwrap()
        };
        let (l, _) = source_pointwise_loss(&lin(vec![60.0, 0.0]), &[0.0, 0.0], &[1.0, 0.0]).unwrap();
        assert!(l < 1e-20);
        let (l, _) = source_pointwise_loss(&lin(vec![0.0; 3]), &[1.0, 2.0], &[0.2, 0.5, 0.3]).unwrap();
        assert!((l - 3f64.ln()).abs() < 1e-14);
        let (_, clamped) = source_pointwise_loss(&lin(vec![800.0, 0.0]), &[0.0, 0.0], &[0.0, 1.0]).unwrap();
        assert!(clamped);
    }

    #[test]
    fn pointwise_loss_matches_recomputation() {
        let h = head(1);
        let u = [0.3, -0.7, 1.1];
        let cond = [0.1, 0.2, 0.3, 0.4];
        let (l, _) = source_pointwise_loss(&h, &u, &cond).unwrap();
        let p = h.forward(&Matrix::row_vector(&u)).unwrap();
        let z: f64 = p.as_slice().iter().map(|v| v.exp()).sum();
        let direct: f64 = -(0..4).map(|k| cond[k] * (p.get(0, k).exp() / z).ln()).sum::<f64>();
        assert!((l - direct).abs() < 1e-13);
    }

    #[test]
    fn input_gradient_matches_fd() {
        let h = head(2);
        let (u, cond) = points(2, 6);
        let g = input_gradients(&h, &u, &cond).unwrap();
        for i in 0..6 {
            let c = cond.row(i).to_vec();
            let fd = central_difference(
                &mut |x| source_pointwise_loss(&h, x.as_slice(), &c).unwrap().0,
                &Matrix::row_vector(u.row(i)),
                1e-6,
            );
            assert!(max_relative_error(&Matrix::row_vector(g.row(i)), &fd, 1e-3) < 1e-4);
        }
    }

    #[test]
    fn linear_head_matches_analytic_gradient_norm() {
        let w = Matrix::from_rows(&[[1.0, -2.0, 0.5], [0.3, 0.4, -1.0]]).unwrap();
        let h = MlpParams::new(
            vec![Layer { w: w.clone(), b: Matrix::zeros(1, 3), act: Activation::Identity }],
            Role::SourceHead,
        )
        .unwrap();
        let u = Matrix::from_rows(&[[0.2, -0.1], [1.0, 1.0]]).unwrap();
        let cond = Matrix::one_hot(&[0, 2], 3).unwrap();
        let omega = 0.4;
        let mut expect = 0.0;
        for i in 0..2 {
            let p = u.select_rows(&[i]).matmul(&w).unwrap().softmax_rows();
            let g = p.sub(&cond.select_rows(&[i])).unwrap().matmul(&w.transpose()).unwrap();
            expect += (g.frobenius_norm() - omega).max(0.0).powi(2) / 2.0;
        }
        let got = lipschitz_penalty(&h, &u, &cond, omega).unwrap();
        assert!((got - expect).abs() < 1e-14);
        let (tape_val, _, _) = penalty_and_grad(&h, &u, &cond, omega).unwrap();
        assert!((tape_val - expect).abs() < 1e-14);
    }

    #[test]
    fn penalty_gradient_matches_fd() {
        let h = head(3);
        let (u, cond) = points(3, 8);
        let (_, gw, gb) = penalty_and_grad(&h, &u, &cond, 0.05).unwrap();
        let last = h.layers().last().unwrap().clone();
        let pen = |w: &Matrix, b: &Matrix| {
            lipschitz_penalty(&h.with_last_layer(w.clone(), b.clone()).unwrap(), &u, &cond, 0.05).unwrap()
        };
        let fdw = central_difference(&mut |w| pen(w, &last.b), &last.w, 1e-6);
        let fdb = central_difference(&mut |b| pen(&last.w, b), &last.b, 1e-6);
        assert!(max_relative_error(&gw, &fdw, 1e-3) < 1e-4);
        assert!(max_relative_error(&gb, &fdb, 1e-3) < 1e-4);
    }

    #[test]
    fn penalty_vanishes_below_omega() {
        let h = head(4);
        let (u, cond) = points(4, 10);
        let mx = gradient_norms(&h, &u, &cond).unwrap().into_iter().fold(0.0, f64::max);
        assert_eq!(lipschitz_penalty(&h, &u, &cond, mx).unwrap(), 0.0);
        assert!(lipschitz_penalty(&h, &u, &cond, mx * 0.5).unwrap() > 0.0);
    }

    fn identity_theta() -> MlpParams {
        MlpParams::new(
            vec![Layer { w: Matrix::identity(3), b: Matrix::zeros(1, 3), act: Activation::Identity }],
            Role::SourceEmbedder,
        )
        .unwrap()
    }

    #[test]
    fn inactive_constraint_leaves_head_unchanged() {
        let h = head(5);
        let (u, cond) = points(5, 20);
        let data = Dataset::new(u, cond.argmax_rows(), 4).unwrap();
        let cfg = LipschitzConfig { omega: 1e9, ..Default::default() };
        let r = recalibrate_head(&h, &identity_theta(), &data, &cfg).unwrap();
        assert_eq!(r.head, h);
        assert_eq!(r.final_penalty, 0.0);
    }

    #[test]
    fn recalibration_reduces_penalty_and_touches_only_the_last_layer() {
        let h = head(6);
        let (u, cond) = points(6, 40);
        let data = Dataset::new(u, cond.argmax_rows(), 4).unwrap();
        let cfg = LipschitzConfig { omega: 0.05, epochs: 100, lr: 0.2, penalty_weight: 5.0 };
        let theta = identity_theta();
        let r = recalibrate_head(&h, &theta, &data, &cfg).unwrap();
        assert!(r.final_penalty < r.initial_penalty);
        assert_eq!(r.head.layers()[0], h.layers()[0]);
        assert_ne!(r.head.layers()[1], h.layers()[1]);
        assert_eq!(theta, identity_theta());
    }

    #[test]
    fn divergence_is_reported() {
        let h = head(7);
        let (u, cond) = points(7, 30);
        let data = Dataset::new(u, cond.argmax_rows(), 4).unwrap();
        let cfg = LipschitzConfig { omega: 0.01, epochs: 200, lr: 1e4, penalty_weight: 1.0 };
        assert!(matches!(
            recalibrate_head(&h, &identity_theta(), &data, &cfg),
            Err(Error::Divergence(_)) | Err(Error::NonFinite { .. })
        ));
    }

    #[test]
    fn sweep_table_shapes() {
        let h = head(8);
        let (u, cond) = points(8, 30);
        let data = Dataset::new(u, cond.argmax_rows(), 4).unwrap();
        let (train, test) = data.split_at(20);
        let cfg = LipschitzConfig { epochs: 20, ..Default::default() };
        let rows = sweep_omega(&[0.5], &train, &test, &identity_theta(), &h, &cfg).unwrap();
        assert_eq!(rows.len(), 1);
        assert!(sweep_omega(&[0.5, 0.2], &train, &test, &identity_theta(), &h, &cfg).is_err());
        let mut buf = Vec::new();
        write_sweep_csv(&rows, &mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("omega,proxy_error,penalty_residual,proxy_loss\n"));
        assert_eq!(default_omega_grid().len(), 10);
        assert!((default_omega_grid()[9] - 1.0).abs() < 1e-15);
    }
}
