//! Dense matrices and a small reverse-mode tape.

mod matrix;
mod tape;

pub use matrix::Matrix;
pub use tape::{forward, Forward, Gradients, Tape, Var};

/// Central finite differences of a scalar function of one matrix.
pub fn central_difference(
    f: &mut dyn FnMut(&Matrix) -> f64,
    x: &Matrix,
    step: f64,
) -> Matrix {
    let mut grad = Matrix::zeros(x.rows(), x.cols());
    let mut probe = x.clone();
    for k in 0..x.len() {
        let orig = probe.as_slice()[k];
        probe.as_mut_slice()[k] = orig + step;
        let hi = f(&probe);
        probe.as_mut_slice()[k] = orig - step;
        let lo = f(&probe);
        probe.as_mut_slice()[k] = orig;
        grad.as_mut_slice()[k] = (hi - lo) / (2.0 * step);
    }
    grad
}

/// Largest per-coordinate relative error `|a - b| / max(|a|, |b|, floor)`.
pub fn max_relative_error(a: &Matrix, b: &Matrix, floor: f64) -> f64 {
    a.as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}
