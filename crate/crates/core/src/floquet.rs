//! 1D Floquet (transfer-matrix) eigenvalue solver.
//!
//! For a piecewise-constant coefficient a(y) the fundamental solution of
//! -(a w')' = lambda w over one period is an exact product of 2x2 blocks, so
//! the discriminant D(lambda) = tr T(lambda) is evaluated to machine
//! precision. The lowest quasi-periodic eigenvalue at quasimomentum eta is
//! the first root of D(lambda) = 2 cos(2 pi eta).
//!
//! This is the production path for `Laminate1D` coefficients, where the
//! plane-wave Galerkin eigenvalue converges only like 1/N_pw, and it doubles
//! as an independent oracle for smooth coefficients when driven with many
//! thin sampled slices.

use crate::error::{CoreError, Result};

/// One constant slice: (length, value).
pub type Piece = (f64, f64);

/// Transfer matrix over a single constant piece, acting on (w, a w').
fn piece_matrix(lambda: f64, len: f64, a: f64) -> [[f64; 2]; 2] {
    if lambda <= 0.0 {
        // lambda = 0: w'' = 0 on the piece
        [[1.0, len / a], [0.0, 1.0]]
    } else {
        let k = (lambda / a).sqrt();
        let (s, c) = (k * len).sin_cos();
        [[c, s / (a * k)], [-a * k * s, c]]
    }
}

fn mat_mul(a: [[f64; 2]; 2], b: [[f64; 2]; 2]) -> [[f64; 2]; 2] {
    let mut r = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            r[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j];
        }
    }
    r
}

/// Discriminant D(lambda) = tr T(lambda) of the monodromy matrix.
pub fn discriminant(pieces: &[Piece], lambda: f64) -> f64 {
    let mut t = [[1.0, 0.0], [0.0, 1.0]];
    for &(len, a) in pieces {
        t = mat_mul(piece_matrix(lambda, len, a), t);
    }
    t[0][0] + t[1][1]
}

/// Convert a laminate (breakpoints starting at 0, values) into slices.
pub fn laminate_pieces(breaks: &[f64], values: &[f64]) -> Vec<Piece> {
    let mut ends: Vec<f64> = breaks.to_vec();
    ends.push(1.0);
    values
        .iter()
        .zip(ends.windows(2))
        .map(|(&v, w)| (w[1] - w[0], v))
        .collect()
}

/// Sample a smooth 1D coefficient into `n` midpoint slices (oracle use).
pub fn sampled_pieces(a: impl Fn(f64) -> f64, n: usize) -> Vec<Piece> {
    let h = 1.0 / n as f64;
    (0..n).map(|i| (h, a((i as f64 + 0.5) * h))).collect()
}

/// Lowest quasi-periodic eigenvalue at quasimomentum eta in [-1/2, 1/2).
///
/// D is 2 at lambda = 0 (eta = 0 is the exact bottom of the spectrum) and
/// decreases through the first band, so the first crossing of
/// 2 cos(2 pi eta) brackets cleanly.
pub fn lowest_eigenvalue(pieces: &[Piece], eta: f64) -> Result<f64> {
    if !(-0.5..0.5).contains(&eta) {
        return Err(CoreError::OutsideBrillouin(vec![eta]));
    }
    if eta == 0.0 {
        return Ok(0.0);
    }
    let target = 2.0 * (2.0 * std::f64::consts::PI * eta).cos();
    let f = |lam: f64| discriminant(pieces, lam) - target;
    // bracket the first sign change by doubling
    let mut lo = 0.0f64;
    let mut hi = 1.0f64;
    let f0 = f(lo);
    if f0 < 0.0 {
        return Err(CoreError::Eigensolver(
            "discriminant below target at lambda = 0".into(),
        ));
    }
    let mut iters = 0;
    while f(hi) > 0.0 {
        lo = hi;
        hi *= 2.0;
        iters += 1;
        if iters > 60 {
            return Err(CoreError::Eigensolver(
                "failed to bracket the lowest Floquet eigenvalue".into(),
            ));
        }
    }
    // bisection; D is analytic, 110 halvings put the bracket at rounding level
    for _ in 0..110 {
        let mid = 0.5 * (lo + hi);
        if f(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= f64::EPSILON * hi.abs() {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Richardson-extrapolated eigenvalue for a smooth coefficient sampled with
/// `n` and `2n` midpoint slices (second-order slicing error eliminated).
pub fn shooting_eigenvalue_smooth(a: impl Fn(f64) -> f64 + Copy, eta: f64, n: usize) -> Result<f64> {
    let c1 = lowest_eigenvalue(&sampled_pieces(a, n), eta)?;
    let c2 = lowest_eigenvalue(&sampled_pieces(a, 2 * n), eta)?;
    Ok((4.0 * c2 - c1) / 3.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_coefficient_dispersion() {
        // a = c: lambda_0(eta) = c (2 pi eta)^2
        let pieces = [(1.0, 3.0)];
        for eta in [0.1, 0.25, -0.3] {
            let lam = lowest_eigenvalue(&pieces, eta).unwrap();
            let exact = 3.0 * (2.0 * std::f64::consts::PI * eta).powi(2);
            assert!(
                (lam - exact).abs() < 1e-10 * exact,
                "eta={eta}: {lam} vs {exact}"
            );
        }
    }

    #[test]
    fn laminate_reference_value() {
        // frozen from an independent high-precision run (scipy brentq on the
        // exact discriminant of the (1,4) half-half laminate)
        let pieces = laminate_pieces(&[0.0, 0.5], &[1.0, 4.0]);
        let lam = lowest_eigenvalue(&pieces, 0.1).unwrap();
        assert!(
            (lam - 6.297194924677447e-01).abs() < 1e-12,
            "lambda = {lam}"
        );
    }

    #[test]
    fn smooth_shooting_matches_reference() {
        // A(y) = 2 + cos(2 pi y), eta = 0.1; reference from a 40-digit
        // plane-wave eigensolve
        let a = |y: f64| 2.0 + (2.0 * std::f64::consts::PI * y).cos();
        let lam = shooting_eigenvalue_smooth(a, 0.1, 8192).unwrap();
        assert!(
            (lam - 0.6827471016850625).abs() < 1e-9,
            "lambda = {lam}"
        );
    }

    #[test]
    fn evenness() {
        let pieces = laminate_pieces(&[0.0, 0.25, 0.7], &[1.0, 5.0, 2.0]);
        for eta in [0.05, 0.2, 0.45] {
            let a = lowest_eigenvalue(&pieces, eta).unwrap();
            let b = lowest_eigenvalue(&pieces, -eta).unwrap();
            assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0));
        }
    }
}
