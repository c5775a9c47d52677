use super::{cost_matrix, sinkhorn, uniform, SinkhornConfig};
use crate::error::{Error, Result};
use crate::models::{embed, MlpGrads, MlpParams};
use crate::numgrad::{Matrix, Tape};

/// Alignment loss with its gradient for the target embedder.
#[derive(Clone, Debug)]
pub struct FaOutput {
    pub loss: f64,
    pub grads: MlpGrads,
    pub w1_estimate: f64,
    pub converged: bool,
}

/// `omega * W1(phi(target_x), theta(source_x))`; the gradient holds the
/// Sinkhorn plan fixed and flows only through `phi`.
pub fn fa_loss_and_grad(
    phi: &MlpParams,
    theta: &MlpParams,
    target_x: &Matrix,
    source_x: &Matrix,
    omega: f64,
    cfg: &SinkhornConfig,
) -> Result<FaOutput> {
    let v = embed(theta, source_x)?;
    fa_loss_and_grad_features(phi, target_x, &v, omega, cfg)
}

/// As [`fa_loss_and_grad`] with the source features already computed.
pub fn fa_loss_and_grad_features(
    phi: &MlpParams,
    target_x: &Matrix,
    source_u: &Matrix,
    omega: f64,
    cfg: &SinkhornConfig,
) -> Result<FaOutput> {
    if target_x.rows() == 0 || source_u.rows() == 0 {
        return Err(Error::invalid("alignment needs nonempty batches"));
    }
    let mut tape = Tape::new();
    let x = tape.leaf(target_x.clone());
    let (u, vars) = phi.record(&mut tape, x)?;
    let cost = cost_matrix(tape.value(u), source_u)?;
    let out = sinkhorn(
        &cost,
        &uniform(target_x.rows()),
        &uniform(source_u.rows()),
        cfg,
    )?;
    let v = tape.leaf(source_u.clone());
    let d = tape.pairwise_dist(u, v)?;
    let plan = tape.leaf(out.coupling.pi().scale(omega));
    let weighted = tape.mul(d, plan)?;
    let loss = tape.sum(weighted)?;
    let grads = MlpGrads::collect(&tape.backward(loss)?, &vars);
    Ok(FaOutput {
        loss: tape.value(loss).item(),
        grads,
        w1_estimate: out.w1_estimate,
        converged: out.converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{Activation, Role};
    use crate::numgrad::{central_difference, max_relative_error};
    use crate::rng::SeedStream;
    use rand::Rng;

    fn nets(seed: u64) -> (MlpParams, MlpParams) {
        let s = SeedStream::new(seed);
        let phi = MlpParams::random(&[3, 6, 2], Activation::Tanh, Activation::Identity, Role::TargetEmbedder, &mut s.rng("phi"));
        let theta = MlpParams::random(&[4, 6, 2], Activation::Tanh, Activation::Identity, Role::SourceEmbedder, &mut s.rng("theta"));
        (phi, theta)
    }

    #[test]
    fn aligned_case_has_vanishing_loss_and_gradient() {
        let (phi, _) = nets(0);
        let mut rng = SeedStream::new(0).rng("x");
        let x = Matrix::from_fn(6, 3, |_, _| rng.random_range(-2.0..2.0));
        let out = fa_loss_and_grad(&phi, &phi, &x, &x, 1.0, &SinkhornConfig { epsilon: 0.01, ..Default::default() }).unwrap();
        assert!(out.loss < 1e-3, "{}", out.loss);
        assert!(out.grads.norm() < 1e-3, "{}", out.grads.norm());
    }

    #[test]
    fn zero_weight_gives_zero_loss_and_gradient() {
        let (phi, theta) = nets(1);
        let xt = Matrix::filled(4, 3, 0.3);
        let xs = Matrix::filled(5, 4, -0.2);
        let out = fa_loss_and_grad(&phi, &theta, &xt, &xs, 0.0, &SinkhornConfig::default()).unwrap();
        assert_eq!(out.loss, 0.0);
        assert_eq!(out.grads.norm(), 0.0);
    }

    #[test]
    fn loss_equals_weighted_estimate() {
        let (phi, theta) = nets(2);
        let mut rng = SeedStream::new(2).rng("x");
        let xt = Matrix::from_fn(5, 3, |_, _| rng.random_range(-1.0..1.0));
        let xs = Matrix::from_fn(7, 4, |_, _| rng.random_range(-1.0..1.0));
        let out = fa_loss_and_grad(&phi, &theta, &xt, &xs, 0.7, &SinkhornConfig::default()).unwrap();
        assert!((out.loss - 0.7 * out.w1_estimate).abs() < 1e-12);
    }

    #[test]
    fn fixed_coupling_gradient_matches_fd() {
        let (phi, theta) = nets(3);
        let mut rng = SeedStream::new(3).rng("x");
        let xt = Matrix::from_fn(5, 3, |_, _| rng.random_range(-1.0..1.0));
        let xs = Matrix::from_fn(6, 4, |_, _| rng.random_range(-1.0..1.0));
        let cfg = SinkhornConfig::default();
        let out = fa_loss_and_grad(&phi, &theta, &xt, &xs, 1.3, &cfg).unwrap();
        let v = embed(&theta, &xs).unwrap();
        let u0 = embed(&phi, &xt).unwrap();
        let plan = sinkhorn(&cost_matrix(&u0, &v).unwrap(), &uniform(5), &uniform(6), &cfg)
            .unwrap()
            .coupling
            .into_pi();
        let w0 = phi.layers()[0].w.clone();
        let fixed = |w: &Matrix| {
            let mut layers = phi.layers().to_vec();
            layers[0].w = w.clone();
            let p = MlpParams::new(layers, Role::TargetEmbedder).unwrap();
            let c = cost_matrix(&embed(&p, &xt).unwrap(), &v).unwrap();
            1.3 * c.hadamard(&plan).unwrap().sum()
        };
        let fd = central_difference(&mut |w| fixed(w), &w0, 1e-6);
        assert!(max_relative_error(&out.grads.layers[0].0, &fd, 1e-3) < 1e-4);
    }
}
