//! Y-periodic coefficient matrices A(y) on the unit cell Y = [0,1]^n.
//!
//! A coefficient is given either by a table of Fourier modes Â(k) (banded,
//! `|k|_inf <= K_A`), by a 1D laminate (piecewise-constant values between
//! breakpoints), or as a constant multiple of the identity. Realness and
//! pointwise symmetry of A are enforced through the coefficient table at
//! construction time, together with a sampled ellipticity check.

use std::collections::HashMap;

use num_complex::Complex64;

use crate::error::{CoreError, Result};

/// Dimensions with tested code paths.
pub const MAX_DIM: usize = 2;

/// Integer multi-index; the second component is 0 in one dimension.
pub type MultiIndex = [i32; 2];

/// Grid resolution (per axis) of the construction-time ellipticity check.
const ELLIPTICITY_SAMPLES: usize = 256;

/// An n x n complex matrix entry of the coefficient table (n <= 2); only the
/// leading n x n block is meaningful.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoeffMatrix {
    pub entries: [[Complex64; 2]; 2],
}

impl CoeffMatrix {
    pub fn zero() -> Self {
        CoeffMatrix {
            entries: [[Complex64::ZERO; 2]; 2],
        }
    }

    /// c * Id.
    pub fn scalar(c: Complex64) -> Self {
        let mut m = Self::zero();
        m.entries[0][0] = c;
        m.entries[1][1] = c;
        m
    }

    pub fn from_rows(rows: [[Complex64; 2]; 2]) -> Self {
        CoeffMatrix { entries: rows }
    }

    pub fn conj(&self) -> Self {
        let mut m = Self::zero();
        for i in 0..2 {
            for j in 0..2 {
                m.entries[i][j] = self.entries[i][j].conj();
            }
        }
        m
    }

    pub fn transpose(&self) -> Self {
        let mut m = Self::zero();
        for i in 0..2 {
            for j in 0..2 {
                m.entries[i][j] = self.entries[j][i];
            }
        }
        m
    }

    pub fn max_abs_diff(&self, other: &Self, dim: usize) -> f64 {
        let mut d = 0.0f64;
        for i in 0..dim {
            for j in 0..dim {
                d = d.max((self.entries[i][j] - other.entries[i][j]).norm());
            }
        }
        d
    }

    pub fn max_abs(&self, dim: usize) -> f64 {
        let mut d = 0.0f64;
        for i in 0..dim {
            for j in 0..dim {
                d = d.max(self.entries[i][j].norm());
            }
        }
        d
    }

    /// a . (M b) for real vectors a, b.
    pub fn bilinear(&self, a: [f64; 2], b: [f64; 2], dim: usize) -> Complex64 {
        let mut s = Complex64::ZERO;
        for i in 0..dim {
            for j in 0..dim {
                s += self.entries[i][j] * a[i] * b[j];
            }
        }
        s
    }

    /// Smallest eigenvalue of the real symmetric part (used by the
    /// ellipticity check; the imaginary part must already be negligible).
    fn min_eig_real_sym(&self, dim: usize) -> f64 {
        if dim == 1 {
            return self.entries[0][0].re;
        }
        let a = self.entries[0][0].re;
        let d = self.entries[1][1].re;
        let b = 0.5 * (self.entries[0][1].re + self.entries[1][0].re);
        let tr = a + d;
        let disc = ((a - d) * 0.5).hypot(b);
        0.5 * tr - disc
    }
}

/// Representation of the periodic coefficient.
#[derive(Debug, Clone)]
pub enum CoeffRepr {
    /// A = value * Id.
    Constant { value: f64 },
    /// Banded Fourier table { k -> Â(k) }, |k|_inf <= half_bandwidth.
    Fourier {
        half_bandwidth: i32,
        modes: HashMap<MultiIndex, CoeffMatrix>,
    },
    /// 1D piecewise-constant coefficient: value[j] on [breaks[j], breaks[j+1]).
    Laminate { breaks: Vec<f64>, values: Vec<f64> },
}

/// The Y-periodic, symmetric, uniformly elliptic coefficient matrix A.
#[derive(Debug, Clone)]
pub struct PeriodicCoefficient {
    dim: usize,
    repr: CoeffRepr,
    ellipticity: f64,
}

impl PeriodicCoefficient {
    /// Constant coefficient A = value * Id.
    pub fn constant(dim: usize, value: f64, ellipticity: f64) -> Result<Self> {
        check_dim(dim)?;
        check_floor(ellipticity)?;
        if value < ellipticity {
            return Err(CoreError::InvalidCoefficient(format!(
                "constant value {value} below ellipticity floor {ellipticity}"
            )));
        }
        Ok(PeriodicCoefficient {
            dim,
            repr: CoeffRepr::Constant { value },
            ellipticity,
        })
    }

    /// Coefficient from a table of Fourier modes. Missing partners Â(-k) are
    /// filled in as conj(Â(k)); present partners are verified against the
    /// realness relation.
    pub fn fourier(
        dim: usize,
        modes: Vec<(MultiIndex, CoeffMatrix)>,
        ellipticity: f64,
    ) -> Result<Self> {
        check_dim(dim)?;
        check_floor(ellipticity)?;
        let mut table: HashMap<MultiIndex, CoeffMatrix> = HashMap::new();
        for (k, m) in modes {
            if dim == 1 && k[1] != 0 {
                return Err(CoreError::InvalidCoefficient(format!(
                    "mode index {k:?} has a second component in dimension 1"
                )));
            }
            if table.insert(k, m).is_some() {
                return Err(CoreError::InvalidCoefficient(format!(
                    "duplicate mode index {k:?}"
                )));
            }
        }
        let keys: Vec<MultiIndex> = table.keys().copied().collect();
        for k in keys {
            let neg = [-k[0], -k[1]];
            let want = table[&k].conj();
            match table.get(&neg) {
                None => {
                    table.insert(neg, want);
                }
                Some(have) => {
                    let scale = want.max_abs(dim).max(1.0);
                    if have.max_abs_diff(&want, dim) > 1e-12 * scale {
                        return Err(CoreError::InvalidCoefficient(format!(
                            "mode pair {k:?}/{neg:?} violates A(-k) = conj(A(k))"
                        )));
                    }
                }
            }
        }
        // Pointwise matrix symmetry A(y) = A(y)^T, i.e. Â(k)^T = Â(k).
        for (k, m) in &table {
            let mt = m.transpose();
            let scale = m.max_abs(dim).max(1.0);
            if mt.max_abs_diff(m, dim) > 1e-12 * scale {
                return Err(CoreError::InvalidCoefficient(format!(
                    "mode {k:?} violates A(k)^T = A(k) (A(y) not symmetric)"
                )));
            }
        }
        let half_bandwidth = table
            .keys()
            .map(|k| k[0].abs().max(k[1].abs()))
            .max()
            .unwrap_or(0);
        let coeff = PeriodicCoefficient {
            dim,
            repr: CoeffRepr::Fourier {
                half_bandwidth,
                modes: table,
            },
            ellipticity,
        };
        coeff.check_ellipticity()?;
        Ok(coeff)
    }

    /// 1D laminate: values[j] on [breaks[j], breaks[j+1]) with breaks[0] = 0.
    pub fn laminate(breaks: Vec<f64>, values: Vec<f64>, ellipticity: f64) -> Result<Self> {
        check_floor(ellipticity)?;
        if breaks.len() != values.len() || breaks.is_empty() {
            return Err(CoreError::InvalidCoefficient(
                "laminate needs one value per breakpoint".into(),
            ));
        }
        if (breaks[0] - 0.0).abs() > 1e-15 {
            return Err(CoreError::InvalidCoefficient(
                "laminate breakpoints must start at 0".into(),
            ));
        }
        for w in breaks.windows(2) {
            if w[1] <= w[0] {
                return Err(CoreError::InvalidCoefficient(
                    "laminate breakpoints must be strictly increasing".into(),
                ));
            }
        }
        if *breaks.last().unwrap() >= 1.0 {
            return Err(CoreError::InvalidCoefficient(
                "laminate breakpoints must lie in [0,1)".into(),
            ));
        }
        for &v in &values {
            if v < ellipticity {
                return Err(CoreError::InvalidCoefficient(format!(
                    "laminate value {v} below ellipticity floor {ellipticity}"
                )));
            }
        }
        Ok(PeriodicCoefficient {
            dim: 1,
            repr: CoeffRepr::Laminate { breaks, values },
            ellipticity,
        })
    }

    /// The 1D benchmark coefficient A(y) = 2 + cos(2 pi y).
    pub fn cosine_1d() -> Self {
        let half = Complex64::new(0.5, 0.0);
        PeriodicCoefficient::fourier(
            1,
            vec![
                ([0, 0], CoeffMatrix::scalar(Complex64::new(2.0, 0.0))),
                ([1, 0], CoeffMatrix::scalar(half)),
            ],
            0.9,
        )
        .expect("benchmark coefficient is valid")
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ellipticity(&self) -> f64 {
        self.ellipticity
    }

    pub fn repr(&self) -> &CoeffRepr {
        &self.repr
    }

    pub fn is_constant(&self) -> bool {
        matches!(self.repr, CoeffRepr::Constant { .. })
    }

    pub fn is_laminate(&self) -> bool {
        matches!(self.repr, CoeffRepr::Laminate { .. })
    }

    /// Fourier bandwidth K_A when the table is finite; None for laminates
    /// (their spectrum decays like 1/k and is never truncated exactly).
    pub fn bandwidth(&self) -> Option<i32> {
        match &self.repr {
            CoeffRepr::Constant { .. } => Some(0),
            CoeffRepr::Fourier { half_bandwidth, .. } => Some(*half_bandwidth),
            CoeffRepr::Laminate { .. } => None,
        }
    }

    /// Fourier coefficient Â(k); analytic for laminates, table lookup
    /// otherwise.
    pub fn fourier_coeff(&self, k: MultiIndex) -> CoeffMatrix {
        match &self.repr {
            CoeffRepr::Constant { value } => {
                if k == [0, 0] {
                    CoeffMatrix::scalar(Complex64::new(*value, 0.0))
                } else {
                    CoeffMatrix::zero()
                }
            }
            CoeffRepr::Fourier { modes, .. } => {
                modes.get(&k).copied().unwrap_or_else(CoeffMatrix::zero)
            }
            CoeffRepr::Laminate { breaks, values } => {
                let m = k[0];
                let mut ends = breaks.clone();
                ends.push(1.0);
                if m == 0 {
                    let mean: f64 = values
                        .iter()
                        .zip(ends.windows(2))
                        .map(|(v, w)| v * (w[1] - w[0]))
                        .sum();
                    return CoeffMatrix::scalar(Complex64::new(mean, 0.0));
                }
                // \int_b0^b1 a e^{-2 pi i m y} dy done exactly per piece.
                let mut total = Complex64::ZERO;
                let f = -2.0 * std::f64::consts::PI * m as f64;
                for (v, w) in values.iter().zip(ends.windows(2)) {
                    let e1 = Complex64::new(0.0, f * w[1]).exp();
                    let e0 = Complex64::new(0.0, f * w[0]).exp();
                    total += v * (e1 - e0) / Complex64::new(0.0, f);
                }
                CoeffMatrix::scalar(total)
            }
        }
    }

    /// Pointwise value A(y); used by the ellipticity check and the
    /// finite-difference oracle.
    pub fn eval(&self, y: &[f64]) -> CoeffMatrix {
        match &self.repr {
            CoeffRepr::Constant { value } => CoeffMatrix::scalar(Complex64::new(*value, 0.0)),
            CoeffRepr::Laminate { breaks, values } => {
                let yy = y[0].rem_euclid(1.0);
                let mut idx = 0;
                for (j, b) in breaks.iter().enumerate() {
                    if yy >= *b {
                        idx = j;
                    }
                }
                CoeffMatrix::scalar(Complex64::new(values[idx], 0.0))
            }
            CoeffRepr::Fourier {
                half_bandwidth,
                modes,
            } => {
                let mut acc = CoeffMatrix::zero();
                let bw = *half_bandwidth;
                let k2_range = if self.dim == 2 { -bw..=bw } else { 0..=0 };
                for k1 in -bw..=bw {
                    for k2 in k2_range.clone() {
                        if let Some(m) = modes.get(&[k1, k2]) {
                            let phase = 2.0
                                * std::f64::consts::PI
                                * (k1 as f64 * y[0] + k2 as f64 * y.get(1).copied().unwrap_or(0.0));
                            let e = Complex64::new(0.0, phase).exp();
                            for i in 0..self.dim {
                                for j in 0..self.dim {
                                    acc.entries[i][j] += m.entries[i][j] * e;
                                }
                            }
                        }
                    }
                }
                acc
            }
        }
    }

    /// Scalar value a(y) for 1D coefficients.
    pub fn eval_scalar(&self, y: f64) -> f64 {
        self.eval(&[y]).entries[0][0].re
    }

    /// Sampled check xi . A(y) xi >= lambda_ell |xi|^2 on a 256-per-axis grid.
    fn check_ellipticity(&self) -> Result<()> {
        let n = ELLIPTICITY_SAMPLES;
        let mut worst = f64::INFINITY;
        let mut worst_imag = 0.0f64;
        let points: Vec<Vec<f64>> = if self.dim == 1 {
            (0..n).map(|i| vec![i as f64 / n as f64]).collect()
        } else {
            let mut p = Vec::with_capacity(n * n);
            for i in 0..n {
                for j in 0..n {
                    p.push(vec![i as f64 / n as f64, j as f64 / n as f64]);
                }
            }
            p
        };
        for y in &points {
            let a = self.eval(y);
            for i in 0..self.dim {
                for j in 0..self.dim {
                    worst_imag = worst_imag.max(a.entries[i][j].im.abs());
                }
            }
            worst = worst.min(a.min_eig_real_sym(self.dim));
        }
        if worst_imag > 1e-10 {
            return Err(CoreError::InvalidCoefficient(format!(
                "sampled A(y) has imaginary part {worst_imag:.3e}; the mode table is not real-compatible"
            )));
        }
        if worst < self.ellipticity {
            return Err(CoreError::InvalidCoefficient(format!(
                "sampled ellipticity {worst:.6} below declared floor {}",
                self.ellipticity
            )));
        }
        Ok(())
    }
}

fn check_dim(dim: usize) -> Result<()> {
    if dim == 0 || dim > MAX_DIM {
        return Err(CoreError::Unsupported(format!(
            "dimension {dim} (supported: 1..={MAX_DIM})"
        )));
    }
    Ok(())
}

fn check_floor(ellipticity: f64) -> Result<()> {
    if ellipticity <= 0.0 || !ellipticity.is_finite() {
        return Err(CoreError::InvalidCoefficient(
            "ellipticity floor must be positive".into(),
        ));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_fourier_coeffs() {
        let a = PeriodicCoefficient::cosine_1d();
        assert_eq!(a.fourier_coeff([0, 0]).entries[0][0], Complex64::new(2.0, 0.0));
        assert_eq!(a.fourier_coeff([1, 0]).entries[0][0], Complex64::new(0.5, 0.0));
        assert_eq!(a.fourier_coeff([-1, 0]).entries[0][0], Complex64::new(0.5, 0.0));
        assert_eq!(a.fourier_coeff([2, 0]).entries[0][0], Complex64::ZERO);
        // pointwise values
        assert!((a.eval_scalar(0.0) - 3.0).abs() < 1e-12);
        assert!((a.eval_scalar(0.5) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn laminate_fourier_coeffs_match_quadrature() {
        let a = PeriodicCoefficient::laminate(vec![0.0, 0.5], vec![1.0, 4.0], 0.9).unwrap();
        // mean value
        assert!((a.fourier_coeff([0, 0]).entries[0][0].re - 2.5).abs() < 1e-14);
        // independent Riemann quadrature of \int A e^{-2 pi i k y}
        let n = 200_000;
        for k in [1i32, 2, 3] {
            let mut s = Complex64::ZERO;
            for i in 0..n {
                let y = (i as f64 + 0.5) / n as f64;
                let ph = Complex64::new(0.0, -2.0 * std::f64::consts::PI * k as f64 * y).exp();
                s += a.eval_scalar(y) * ph / n as f64;
            }
            let exact = a.fourier_coeff([k, 0]).entries[0][0];
            assert!(
                (s - exact).norm() < 1e-6,
                "k={k}: quadrature {s} vs analytic {exact}"
            );
        }
    }

    #[test]
    fn ellipticity_violation_rejected() {
        // 1 + 1.2 cos has minimum -0.2 < 0
        let err = PeriodicCoefficient::fourier(
            1,
            vec![
                ([0, 0], CoeffMatrix::scalar(Complex64::new(1.0, 0.0))),
                ([1, 0], CoeffMatrix::scalar(Complex64::new(0.6, 0.0))),
            ],
            0.1,
        );
        assert!(err.is_err());
    }

    #[test]
    fn hermitian_partner_autofilled() {
        // only +1 mode given; -1 must appear as conjugate
        let a = PeriodicCoefficient::fourier(
            1,
            vec![
                ([0, 0], CoeffMatrix::scalar(Complex64::new(2.0, 0.0))),
                ([1, 0], CoeffMatrix::scalar(Complex64::new(0.25, 0.25))),
            ],
            0.5,
        )
        .unwrap();
        let m = a.fourier_coeff([-1, 0]).entries[0][0];
        assert_eq!(m, Complex64::new(0.25, -0.25));
        // A(y) = 2 + 0.5 cos - 0.5 sin stays >= 2 - sqrt(0.5) > 0.5
        assert!(a.eval_scalar(0.4) > 0.5);
    }

    #[test]
    fn symmetry_violation_rejected() {
        // A12 = cos but A21 = 0: pointwise non-symmetric matrix
        let mut m = CoeffMatrix::zero();
        m.entries[0][1] = Complex64::new(0.5, 0.0);
        let r = PeriodicCoefficient::fourier(
            2,
            vec![
                ([0, 0], CoeffMatrix::scalar(Complex64::new(3.0, 0.0))),
                ([1, 0], m),
            ],
            0.5,
        );
        assert!(r.is_err());
    }

    #[test]
    fn sin_offdiagonal_symmetric_accepted() {
        // A12(y) = sin(2 pi y): real, symmetric, elliptic with diag 3
        let mut m = CoeffMatrix::zero();
        m.entries[0][1] = Complex64::new(0.0, -0.5);
        m.entries[1][0] = Complex64::new(0.0, -0.5);
        let a = PeriodicCoefficient::fourier(
            2,
            vec![
                ([0, 0], CoeffMatrix::scalar(Complex64::new(3.0, 0.0))),
                ([1, 0], m),
            ],
            0.5,
        )
        .unwrap();
        let v = a.eval(&[0.25, 0.0]);
        assert!((v.entries[0][1].re - 1.0).abs() < 1e-12); // sin(pi/2) = 1
        assert!(v.entries[0][1].im.abs() < 1e-12);
    }

    #[test]
    fn dim_three_unsupported() {
        assert!(PeriodicCoefficient::constant(3, 1.0, 0.5).is_err());
    }
}
