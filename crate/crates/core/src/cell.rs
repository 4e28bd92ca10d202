//! Shifted cell eigenvalue problem on the unit cell.
//!
//! The operator L(eta) = -(grad + 2 pi i eta) . (A(y) (grad + 2 pi i eta)) is
//! discretized by a plane-wave Galerkin method on Y-periodic functions. In
//! the plane-wave basis e^{2 pi i k.y} the Galerkin matrix is
//!
//! ```text
//! M_{k,k'} = (2 pi)^2 (k + eta) . Ahat(k - k') (k' + eta)
//! ```
//!
//! which is exact (no quadrature) whenever the coefficient has a finite
//! Fourier table. The lowest band lambda_0(eta) and its eigenfunction
//! coefficients feed the effective-tensor extraction, the multiplier models
//! and the adaption synthesis.
//!
//! # Accuracy
//!
//! The rescaled symbol lambda_0(eps eta)/eps^2 divides out eps^2, so the
//! eigenvalues need *relative* accuracy down to lambda_0 ~ 1e-6. A plain
//! dense eigensolve only delivers absolute accuracy ~ eps_mach * ||M||. For
//! n = 1 the Galerkin matrix factors as M = (2 pi)^2 K T K with K = diag(k +
//! eta) and T the (well-conditioned, positive definite) Toeplitz section of
//! multiplication by A, so the solver works with M^{-1} = (2 pi)^{-2}
//! K^{-1} T^{-1} K^{-1} instead: the lowest band becomes the dominant
//! eigenvalue of M^{-1} and comes out with relative machine accuracy at
//! every quasimomentum. Laminate coefficients bypass Galerkin truncation
//! entirely for eigenvalues and use the exact Floquet discriminant.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rayon::prelude::*;

use crate::coeff::{CoeffRepr, MultiIndex, PeriodicCoefficient};
use crate::error::{CoreError, Result};
use crate::floquet;

/// Default plane-wave half-bandwidth per dimension.
pub const DEFAULT_HALF_BW: [i32; 2] = [32, 12];
/// Hard caps for the automatic truncation doubling.
pub const MAX_HALF_BW: [i32; 2] = [128, 24];
/// Default absolute residual gate for eigenpairs.
pub const DEFAULT_EIG_TOL: f64 = 1e-6;

const TWO_PI: f64 = 2.0 * std::f64::consts::PI;
/// Relative Hermitian-deviation bound on assembly.
const HERMITIAN_TOL: f64 = 1e-12;
/// Phase-fixing threshold on |Phi_hat(0)|.
const PHASE_THRESHOLD: f64 = 1e-8;

/// Plane-wave basis {k : |k|_inf <= half_bandwidth}.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PlaneWaveTruncation {
    dim: usize,
    half_bandwidth: i32,
}

impl PlaneWaveTruncation {
    pub fn new(dim: usize, half_bandwidth: i32) -> Result<Self> {
        if dim == 0 || dim > crate::coeff::MAX_DIM {
            return Err(CoreError::Unsupported(format!("dimension {dim}")));
        }
        if half_bandwidth < 1 {
            return Err(CoreError::InvalidCoefficient(
                "plane-wave half-bandwidth must be >= 1".into(),
            ));
        }
        Ok(PlaneWaveTruncation {
            dim,
            half_bandwidth,
        })
    }

    pub fn default_for(coeff: &PeriodicCoefficient) -> Self {
        PlaneWaveTruncation {
            dim: coeff.dim(),
            half_bandwidth: DEFAULT_HALF_BW[coeff.dim() - 1],
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn half_bandwidth(&self) -> i32 {
        self.half_bandwidth
    }

    /// Matrix dimension (2 N + 1)^n.
    pub fn len(&self) -> usize {
        let per = (2 * self.half_bandwidth + 1) as usize;
        per.pow(self.dim as u32)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Basis indices in row-major order (k2 fastest for n = 2).
    pub fn indices(&self) -> Vec<MultiIndex> {
        let n = self.half_bandwidth;
        let mut out = Vec::with_capacity(self.len());
        if self.dim == 1 {
            for k in -n..=n {
                out.push([k, 0]);
            }
        } else {
            for k1 in -n..=n {
                for k2 in -n..=n {
                    out.push([k1, k2]);
                }
            }
        }
        out
    }

    pub fn index_of(&self, k: MultiIndex) -> Option<usize> {
        let n = self.half_bandwidth;
        if k[0].abs() > n || (self.dim == 2 && k[1].abs() > n) || (self.dim == 1 && k[1] != 0) {
            return None;
        }
        let per = (2 * n + 1) as usize;
        let i0 = (k[0] + n) as usize;
        Some(if self.dim == 1 {
            i0
        } else {
            i0 * per + (k[1] + n) as usize
        })
    }

    /// A finite Fourier table of bandwidth K_A is represented exactly when
    /// N_pw >= 2 K_A.
    pub fn validate_for(&self, coeff: &PeriodicCoefficient) -> Result<()> {
        if self.dim != coeff.dim() {
            return Err(CoreError::DimensionMismatch(format!(
                "truncation dim {} vs coefficient dim {}",
                self.dim,
                coeff.dim()
            )));
        }
        if let Some(bw) = coeff.bandwidth() {
            if self.half_bandwidth < 2 * bw {
                return Err(CoreError::InvalidCoefficient(format!(
                    "half-bandwidth {} < 2 x coefficient bandwidth {}",
                    self.half_bandwidth, bw
                )));
            }
        }
        Ok(())
    }
}

fn check_in_zone(eta: &[f64], dim: usize) -> Result<()> {
    if eta.len() != dim {
        return Err(CoreError::DimensionMismatch(format!(
            "quasimomentum has {} components, expected {dim}",
            eta.len()
        )));
    }
    for &e in eta {
        if !(-0.5..0.5).contains(&e) || !e.is_finite() {
            return Err(CoreError::OutsideBrillouin(eta.to_vec()));
        }
    }
    Ok(())
}

/// Assemble the Hermitian Galerkin matrix of L(eta).
pub fn assemble_bloch_matrix(
    coeff: &PeriodicCoefficient,
    eta: &[f64],
    trunc: &PlaneWaveTruncation,
) -> Result<DMatrix<Complex64>> {
    check_in_zone(eta, coeff.dim())?;
    trunc.validate_for(coeff)?;
    let dim = coeff.dim();
    let ks = trunc.indices();
    let n = ks.len();
    let mut m = DMatrix::<Complex64>::zeros(n, n);
    let shift = |k: MultiIndex| {
        [
            k[0] as f64 + eta[0],
            k[1] as f64 + eta.get(1).copied().unwrap_or(0.0),
        ]
    };
    for (i, &ki) in ks.iter().enumerate() {
        let a = shift(ki);
        for (j, &kj) in ks.iter().enumerate() {
            let dk = [ki[0] - kj[0], ki[1] - kj[1]];
            let ahat = coeff.fourier_coeff(dk);
            if ahat.max_abs(dim) == 0.0 {
                continue;
            }
            let b = shift(kj);
            m[(i, j)] = TWO_PI * TWO_PI * ahat.bilinear(a, b, dim);
        }
    }
    // Hermitian symmetry is a structural invariant of a valid table.
    let mut scale = 0.0f64;
    let mut dev = 0.0f64;
    for i in 0..n {
        for j in i..n {
            scale = scale.max(m[(i, j)].norm());
            dev = dev.max((m[(i, j)] - m[(j, i)].conj()).norm());
        }
    }
    if scale > 0.0 && dev > HERMITIAN_TOL * scale {
        return Err(CoreError::NotHermitian {
            deviation: dev / scale,
        });
    }
    // symmetrize rounding leftovers
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)].conj());
            m[(i, j)] = avg;
            m[(j, i)] = avg.conj();
        }
    }
    Ok(m)
}

/// Lowest Bloch eigenpair at one quasimomentum.
#[derive(Debug, Clone)]
pub struct BlochEigenpair {
    pub eta: Vec<f64>,
    pub lambda: f64,
    /// Eigenfunction plane-wave coefficients, unit l2 norm, phase-fixed.
    pub coeffs: Vec<Complex64>,
    /// || M v - lambda v ||_2 against the assembled Galerkin matrix.
    pub residual: f64,
}

/// Band data over a set of quasimomenta.
#[derive(Debug, Clone)]
pub struct BlochBand {
    pub etas: Vec<Vec<f64>>,
    /// lambdas[node][band], bands 0..=m_max ascending.
    pub lambdas: Vec<Vec<f64>>,
    /// Ground-state eigenpairs (band 0) when requested.
    pub ground_states: Option<Vec<Arc<BlochEigenpair>>>,
}

type EtaKey = [u64; 2];

fn eta_key(eta: &[f64]) -> EtaKey {
    let canon = |x: f64| if x == 0.0 { 0.0f64 } else { x };
    [
        canon(eta[0]).to_bits(),
        canon(eta.get(1).copied().unwrap_or(0.0)).to_bits(),
    ]
}

/// Eigensolver for one coefficient at a fixed truncation, with caches keyed
/// by quasimomentum. All solves are pure; the caches are internal and safe
/// for concurrent use.
pub struct BlochSolver {
    coeff: Arc<PeriodicCoefficient>,
    trunc: PlaneWaveTruncation,
    pair_cache: Mutex<HashMap<EtaKey, Arc<BlochEigenpair>>>,
    value_cache: Mutex<HashMap<(EtaKey, usize), Arc<Vec<f64>>>>,
}

impl BlochSolver {
    pub fn new(coeff: PeriodicCoefficient) -> Self {
        let trunc = PlaneWaveTruncation::default_for(&coeff);
        BlochSolver {
            coeff: Arc::new(coeff),
            trunc,
            pair_cache: Mutex::new(HashMap::new()),
            value_cache: Mutex::new(HashMap::new()),
        }
    }

    pub fn with_truncation(coeff: PeriodicCoefficient, trunc: PlaneWaveTruncation) -> Result<Self> {
        trunc.validate_for(&coeff)?;
        Ok(BlochSolver {
            coeff: Arc::new(coeff),
            trunc,
            pair_cache: Mutex::new(HashMap::new()),
            value_cache: Mutex::new(HashMap::new()),
        })
    }

    /// Double the truncation until lambda_0 at the probe quasimomentum is
    /// stable to 1e-10 relative, or the hard cap is reached. Laminates skip
    /// the probe: their eigenvalues come from the Floquet path and do not
    /// depend on the truncation.
    pub fn auto_tuned(coeff: PeriodicCoefficient, probe: &[f64]) -> Result<Self> {
        if coeff.is_laminate() {
            return Ok(Self::new(coeff));
        }
        check_in_zone(probe, coeff.dim())?;
        let cap = MAX_HALF_BW[coeff.dim() - 1];
        let mut n = DEFAULT_HALF_BW[coeff.dim() - 1];
        if let Some(bw) = coeff.bandwidth() {
            n = n.max(2 * bw);
        }
        loop {
            let here = Self::with_truncation(
                coeff.clone(),
                PlaneWaveTruncation::new(coeff.dim(), n)?,
            )?;
            if 2 * n > cap {
                return Ok(here);
            }
            let next = Self::with_truncation(
                coeff.clone(),
                PlaneWaveTruncation::new(coeff.dim(), 2 * n)?,
            )?;
            let a = here.eigenvalues(probe, 0)?[0];
            let b = next.eigenvalues(probe, 0)?[0];
            if (a - b).abs() <= 1e-10 * b.abs().max(1e-10) {
                return Ok(next);
            }
            n *= 2;
        }
    }

    pub fn coefficient(&self) -> &PeriodicCoefficient {
        &self.coeff
    }

    pub fn truncation(&self) -> &PlaneWaveTruncation {
        &self.trunc
    }

    /// Eigenvalues of bands 0..=m_max at eta, ascending.
    pub fn eigenvalues(&self, eta: &[f64], m_max: usize) -> Result<Arc<Vec<f64>>> {
        check_in_zone(eta, self.coeff.dim())?;
        let key = (eta_key(eta), m_max);
        if let Some(v) = self.value_cache.lock().unwrap().get(&key) {
            return Ok(v.clone());
        }
        let vals = Arc::new(self.compute_values(eta, m_max)?);
        self.value_cache
            .lock()
            .unwrap()
            .insert(key, vals.clone());
        Ok(vals)
    }

    /// Lowest eigenpair; `tol` gates the absolute residual ||Mv - lambda v||.
    pub fn lowest_eigenpair(&self, eta: &[f64], tol: f64) -> Result<Arc<BlochEigenpair>> {
        if tol <= 0.0 {
            return Err(CoreError::InvalidSpec("eigenpair tol must be > 0".into()));
        }
        check_in_zone(eta, self.coeff.dim())?;
        let key = eta_key(eta);
        let cached = self.pair_cache.lock().unwrap().get(&key).cloned();
        let pair = match cached {
            Some(p) => p,
            None => {
                let p = Arc::new(self.compute_pair(eta)?);
                self.pair_cache.lock().unwrap().insert(key, p.clone());
                p
            }
        };
        if pair.residual > tol {
            return Err(CoreError::Eigensolver(format!(
                "residual {:.3e} above tol {tol:.3e} at eta {eta:?}",
                pair.residual
            )));
        }
        Ok(pair)
    }

    /// Band structure over a list of quasimomenta. On grids closed under
    /// negation the evenness invariant |lambda(eta) - lambda(-eta)| <= 1e-9
    /// relative is enforced.
    pub fn band(
        &self,
        etas: &[Vec<f64>],
        m_max: usize,
        with_ground_states: bool,
    ) -> Result<BlochBand> {
        let lambdas: Vec<Vec<f64>> = etas
            .par_iter()
            .map(|eta| {
                self.eigenvalues(eta, m_max)
                    .map(|v| v.as_ref().clone())
                    .map_err(|e| {
                        CoreError::Eigensolver(format!("node {eta:?}: {e}"))
                    })
            })
            .collect::<Result<_>>()?;
        for (eta, lams) in etas.iter().zip(&lambdas) {
            for w in lams.windows(2) {
                if w[1] < w[0] - 1e-12 * w[0].abs().max(1.0) {
                    return Err(CoreError::InvariantViolation(format!(
                        "band ordering violated at {eta:?}"
                    )));
                }
            }
        }
        // evenness on negation-closed grids
        let index: HashMap<EtaKey, usize> = etas
            .iter()
            .enumerate()
            .map(|(i, e)| (eta_key(e), i))
            .collect();
        for (i, eta) in etas.iter().enumerate() {
            let neg: Vec<f64> = eta.iter().map(|x| -x).collect();
            if neg.iter().any(|x| *x == 0.5) {
                continue; // mirror of the -1/2 boundary node leaves Z
            }
            if let Some(&j) = index.get(&eta_key(&neg)) {
                for (a, b) in lambdas[i].iter().zip(&lambdas[j]) {
                    let tol = 1e-9 * a.abs().max(b.abs()).max(1e-9);
                    if (a - b).abs() > tol {
                        return Err(CoreError::InvariantViolation(format!(
                            "evenness violated: lambda({eta:?}) = {a}, lambda(-eta) = {b}"
                        )));
                    }
                }
            }
        }
        let ground_states = if with_ground_states {
            Some(
                etas.par_iter()
                    .map(|eta| self.lowest_eigenpair(eta, DEFAULT_EIG_TOL))
                    .collect::<Result<Vec<_>>>()?,
            )
        } else {
            None
        };
        Ok(BlochBand {
            etas: etas.to_vec(),
            lambdas,
            ground_states,
        })
    }

    /// Rescaled symbol lambda_0^eps(eta) = lambda_0(eps eta) / eps^2 for
    /// eta in Z/eps.
    pub fn rescaled_lowest(&self, eta: &[f64], eps: f64) -> Result<f64> {
        if eps <= 0.0 {
            return Err(CoreError::InvalidSpec("eps must be positive".into()));
        }
        let theta: Vec<f64> = eta.iter().map(|e| e * eps).collect();
        check_in_zone(&theta, self.coeff.dim())
            .map_err(|_| CoreError::OutsideBrillouin(theta.clone()))?;
        Ok(self.eigenvalues(&theta, 0)?[0] / (eps * eps))
    }

    // ---- dispatch -------------------------------------------------------

    fn compute_values(&self, eta: &[f64], m_max: usize) -> Result<Vec<f64>> {
        let dim = self.coeff.dim();
        let at_zero = eta.iter().all(|&x| x == 0.0);
        match (&*self.coeff, at_zero) {
            (c, _) if c.is_constant() => Ok(self.constant_values(eta, m_max)),
            (_, true) => {
                // lambda_0(0) = 0 exactly: e_0 is an exact null vector.
                let mut vals = vec![0.0];
                if m_max > 0 {
                    let m = assemble_bloch_matrix(&self.coeff, eta, &self.trunc)?;
                    let (evs, _) = dense_spectrum(&m);
                    vals.extend_from_slice(&evs[1..=m_max.min(evs.len() - 1)]);
                }
                Ok(vals)
            }
            (c, false) if c.is_laminate() => {
                let pieces = self.laminate_pieces();
                let lam0 = floquet::lowest_eigenvalue(&pieces, eta[0])?;
                let mut vals = vec![lam0];
                if m_max > 0 {
                    // higher bands are diagnostic; Galerkin accuracy suffices
                    let (betas, _) = self.inverted_spectrum(eta[0])?;
                    for b in betas.iter().take(m_max + 1).skip(1) {
                        vals.push(1.0 / b);
                    }
                }
                Ok(vals)
            }
            _ if dim == 1 => {
                let (betas, _) = self.inverted_spectrum(eta[0])?;
                Ok(betas
                    .iter()
                    .take(m_max + 1)
                    .map(|b| 1.0 / b)
                    .collect())
            }
            _ => {
                let m = assemble_bloch_matrix(&self.coeff, eta, &self.trunc)?;
                let (evs, _) = dense_spectrum(&m);
                Ok(evs[..=m_max.min(evs.len() - 1)].to_vec())
            }
        }
    }

    fn compute_pair(&self, eta: &[f64]) -> Result<BlochEigenpair> {
        let n = self.trunc.len();
        let at_zero = eta.iter().all(|&x| x == 0.0);
        let i0 = self
            .trunc
            .index_of([0, 0])
            .expect("zero index is always inside the truncation");

        if self.coeff.is_constant() || at_zero {
            // exact analytic ground state: indicator of k = 0
            let mut coeffs = vec![Complex64::ZERO; n];
            coeffs[i0] = Complex64::new(1.0, 0.0);
            let lambda = if at_zero {
                0.0
            } else {
                let c = match self.coeff.repr() {
                    CoeffRepr::Constant { value } => *value,
                    _ => unreachable!(),
                };
                let norm2: f64 = eta.iter().map(|x| x * x).sum();
                c * TWO_PI * TWO_PI * norm2
            };
            return Ok(BlochEigenpair {
                eta: eta.to_vec(),
                lambda,
                coeffs,
                residual: 0.0,
            });
        }

        let (lambda, mut v) = if self.coeff.dim() == 1 {
            let (betas, vecs) = self.inverted_spectrum(eta[0])?;
            (1.0 / betas[0], vecs.column(0).into_owned())
        } else {
            let m = assemble_bloch_matrix(&self.coeff, eta, &self.trunc)?;
            let (evs, vecs) = dense_spectrum(&m);
            (evs[0], vecs.column(0).into_owned())
        };

        // normalize and fix the phase: Phi_hat(0) real >= 0, falling back to
        // the lowest-index coefficient above threshold
        v /= Complex64::new(v.norm(), 0.0);
        let anchor = if v[i0].norm() >= PHASE_THRESHOLD {
            v[i0]
        } else {
            let idx = v
                .iter()
                .position(|c| c.norm() > PHASE_THRESHOLD)
                .ok_or_else(|| CoreError::Eigensolver("eigenvector is numerically zero".into()))?;
            v[idx]
        };
        let phase = anchor.conj() / anchor.norm();
        v *= phase;

        let m = assemble_bloch_matrix(&self.coeff, eta, &self.trunc)?;
        let residual = (&m * &v - &v * Complex64::new(lambda, 0.0)).norm();
        Ok(BlochEigenpair {
            eta: eta.to_vec(),
            lambda,
            coeffs: v.iter().copied().collect(),
            residual,
        })
    }

    fn constant_values(&self, eta: &[f64], m_max: usize) -> Vec<f64> {
        let c = match self.coeff.repr() {
            CoeffRepr::Constant { value } => *value,
            _ => unreachable!(),
        };
        let mut vals: Vec<f64> = self
            .trunc
            .indices()
            .iter()
            .map(|k| {
                let mut s = 0.0;
                for (i, &e) in eta.iter().enumerate() {
                    let x = k[i] as f64 + e;
                    s += x * x;
                }
                c * TWO_PI * TWO_PI * s
            })
            .collect();
        vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
        vals.truncate(m_max + 1);
        vals
    }

    fn laminate_pieces(&self) -> Vec<floquet::Piece> {
        match self.coeff.repr() {
            CoeffRepr::Laminate { breaks, values } => floquet::laminate_pieces(breaks, values),
            _ => unreachable!(),
        }
    }

    /// Spectrum of M^{-1} = (2 pi)^{-2} K^{-1} T^{-1} K^{-1} (n = 1,
    /// theta != 0): eigenvalues beta descending with eigenvectors, so
    /// lambda_m = 1/beta_m with relative accuracy.
    fn inverted_spectrum(&self, theta: f64) -> Result<(Vec<f64>, DMatrix<Complex64>)> {
        debug_assert!(theta != 0.0);
        let ks = self.trunc.indices();
        let n = ks.len();
        let mut t = DMatrix::<Complex64>::zeros(n, n);
        for (i, &ki) in ks.iter().enumerate() {
            for (j, &kj) in ks.iter().enumerate() {
                t[(i, j)] = self.coeff.fourier_coeff([ki[0] - kj[0], 0]).entries[0][0];
            }
        }
        let chol = t.cholesky().ok_or_else(|| {
            CoreError::Eigensolver("coefficient section is not positive definite".into())
        })?;
        let mut d = DMatrix::<Complex64>::zeros(n, n);
        for (i, &ki) in ks.iter().enumerate() {
            d[(i, i)] = Complex64::new(1.0 / (ki[0] as f64 + theta), 0.0);
        }
        let g = chol
            .l()
            .solve_lower_triangular(&d)
            .ok_or_else(|| CoreError::LinearSolve("triangular solve failed".into()))?;
        let b = (g.adjoint() * &g) / Complex64::new(TWO_PI * TWO_PI, 0.0);
        let se = b.symmetric_eigen();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&i, &j| se.eigenvalues[j].partial_cmp(&se.eigenvalues[i]).unwrap());
        let betas: Vec<f64> = order.iter().map(|&i| se.eigenvalues[i]).collect();
        if betas[0] <= 0.0 {
            return Err(CoreError::Eigensolver(
                "inverted spectrum is not positive".into(),
            ));
        }
        let mut vecs = DMatrix::<Complex64>::zeros(n, n);
        for (col, &i) in order.iter().enumerate() {
            vecs.set_column(col, &se.eigenvectors.column(i));
        }
        Ok((betas, vecs))
    }
}

/// Dense Hermitian eigendecomposition, ascending.
fn dense_spectrum(m: &DMatrix<Complex64>) -> (Vec<f64>, DMatrix<Complex64>) {
    let n = m.nrows();
    let se = m.clone().symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| se.eigenvalues[i].partial_cmp(&se.eigenvalues[j]).unwrap());
    let evs: Vec<f64> = order.iter().map(|&i| se.eigenvalues[i]).collect();
    let mut vecs = DMatrix::<Complex64>::zeros(n, n);
    for (col, &i) in order.iter().enumerate() {
        vecs.set_column(col, &se.eigenvectors.column(i));
    }
    (evs, vecs)
}

/// Eigenvector residual helper used by diagnostics.
pub fn eigen_residual(m: &DMatrix<Complex64>, lambda: f64, v: &DVector<Complex64>) -> f64 {
    (m * v - v * Complex64::new(lambda, 0.0)).norm()
}
