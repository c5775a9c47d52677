//! Entropy and divergence in nats with 0 ln 0 = 0.

use crate::error::{Error, Result};

/// Floor applied to predicted probabilities inside logarithms.
pub const LOG_FLOOR: f64 = 1e-12;

#[inline]
pub fn xlogx(x: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else {
        x * x.ln()
    }
}

pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().map(|&x| xlogx(x)).sum::<f64>()
}

/// KL(p || q); +inf when q vanishes where p does not.
pub fn kl(p: &[f64], q: &[f64]) -> f64 {
    let mut s = 0.0;
    for (&a, &b) in p.iter().zip(q) {
        if a > 0.0 {
            if b <= 0.0 {
                return f64::INFINITY;
            }
            s += a * (a / b).ln();
        }
    }
    s.max(0.0)
}

/// -sum p ln q with q floored at [`LOG_FLOOR`]; the flag reports whether the
/// floor was needed on a supported entry.
pub fn cross_entropy(p: &[f64], q: &[f64]) -> (f64, bool) {
    let mut s = 0.0;
    let mut clamped = false;
    for (&a, &b) in p.iter().zip(q) {
        if a > 0.0 {
            let b = if b < LOG_FLOOR {
                clamped = true;
                LOG_FLOOR
            } else {
                b
            };
            s -= a * b.ln();
        }
    }
    (s, clamped)
}

/// Checks nonnegativity and unit mass within `tol`.
pub fn check_distribution(p: &[f64], tol: f64, what: &str) -> Result<()> {
    if p.is_empty() {
        return Err(Error::invalid(format!("{what}: empty distribution")));
    }
    if let Some((i, v)) = p
        .iter()
        .enumerate()
        .find(|(_, v)| !v.is_finite() || **v < 0.0)
    {
        return Err(Error::invalid(format!("{what}: entry {i} is {v}")));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > tol {
        return Err(Error::invalid(format!("{what}: total mass {s}")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn entropy_of_uniform() {
        assert!((entropy(&[0.25; 4]) - 4f64.ln()).abs() < 1e-15);
        assert_eq!(entropy(&[1.0, 0.0]), 0.0);
    }

    #[test]
    fn kl_edge_cases() {
        assert_eq!(kl(&[0.5, 0.5], &[0.5, 0.5]), 0.0);
        assert_eq!(kl(&[0.5, 0.5], &[1.0, 0.0]), f64::INFINITY);
        assert_eq!(kl(&[1.0, 0.0], &[0.5, 0.5]), 2f64.ln());
    }

    #[test]
    fn cross_entropy_flags_floor() {
        let (v, c) = cross_entropy(&[1.0, 0.0], &[0.0, 1.0]);
        assert!(c);
        assert!((v + LOG_FLOOR.ln()).abs() < 1e-9);
    }
}
