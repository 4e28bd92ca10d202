//! Band-limited spectral functions on a symmetric grid over K.
//!
//! A `SpectralFunction` stores one complex coefficient per grid node. Real
//! synthesized fields correspond to Hermitian coefficient sets, u_hat(-eta)
//! = conj(u_hat(eta)); all data profiles are symmetrized at construction.
//! The discrete Parseval identity ||u||^2 = w sum |u_hat|^2 is exact on the
//! torus scale of the grid, and the adaption operator replaces the Fourier
//! factor e^{2 pi i eta x} by the Bloch wave Phi_0(x/eps; eps eta)
//! e^{2 pi i eta x} node by node.

use std::sync::Arc;

use num_complex::Complex64;
use rand::Rng;
use rayon::prelude::*;

use crate::cell::{BlochSolver, DEFAULT_EIG_TOL};
use crate::error::{CoreError, Result};
use crate::grid::{CompactBox, SpectralGrid};

const TWO_PI: f64 = 2.0 * std::f64::consts::PI;

/// Default real-space sampling resolution (points per axis).
pub const DEFAULT_REAL_SAMPLES: usize = 1 << 12;

/// Analytic data profile, truncated to the grid support.
#[derive(Debug, Clone)]
pub enum Profile {
    /// amp * exp(-(eta - center)^2 / (2 width^2)), Hermitian-symmetrized.
    Gauss {
        center: Vec<f64>,
        width: f64,
        amp: f64,
    },
    /// A single Hermitian mode pair: amp at eta0, conj(amp) at -eta0.
    Mode { eta: Vec<f64>, amp: Complex64 },
    /// Explicit node values, symmetrized afterwards.
    Table { entries: Vec<(Vec<f64>, Complex64)> },
}

/// Coefficients of a band-limited function on a spectral grid.
#[derive(Debug, Clone)]
pub struct SpectralFunction {
    grid: Arc<SpectralGrid>,
    coeffs: Vec<Complex64>,
}

impl SpectralFunction {
    pub fn zeros(grid: Arc<SpectralGrid>) -> Self {
        let n = grid.len();
        SpectralFunction {
            grid,
            coeffs: vec![Complex64::ZERO; n],
        }
    }

    pub fn from_coeffs(grid: Arc<SpectralGrid>, coeffs: Vec<Complex64>) -> Result<Self> {
        if coeffs.len() != grid.len() {
            return Err(CoreError::InvalidSpec(format!(
                "{} coefficients for a {}-node grid",
                coeffs.len(),
                grid.len()
            )));
        }
        Ok(SpectralFunction { grid, coeffs })
    }

    /// Sum the profiles on the grid nodes, zero outside `support` when
    /// given, then Hermitian-symmetrize.
    pub fn from_profiles(
        grid: Arc<SpectralGrid>,
        profiles: &[Profile],
        support: Option<&CompactBox>,
    ) -> Result<Self> {
        let mut f = Self::zeros(grid.clone());
        for p in profiles {
            match p {
                Profile::Gauss { center, width, amp } => {
                    if center.len() != grid.dim() {
                        return Err(CoreError::DimensionMismatch(
                            "gauss profile center".into(),
                        ));
                    }
                    if *width <= 0.0 {
                        return Err(CoreError::InvalidSpec("gauss width must be > 0".into()));
                    }
                    for (i, eta) in grid.nodes().enumerate() {
                        let r2: f64 = eta
                            .iter()
                            .zip(center)
                            .map(|(e, c)| (e - c) * (e - c))
                            .sum();
                        f.coeffs[i] += Complex64::new(
                            amp * (-r2 / (2.0 * width * width)).exp(),
                            0.0,
                        );
                    }
                }
                Profile::Mode { eta, amp } => {
                    let i = node_index(&grid, eta).ok_or_else(|| {
                        CoreError::InvalidSpec(format!("mode at {eta:?} is not a grid node"))
                    })?;
                    f.coeffs[i] += amp;
                    let j = grid.neg(i);
                    if j != i {
                        f.coeffs[j] += amp.conj();
                    }
                }
                Profile::Table { entries } => {
                    for (eta, v) in entries {
                        let i = node_index(&grid, eta).ok_or_else(|| {
                            CoreError::InvalidSpec(format!(
                                "table entry at {eta:?} is not a grid node"
                            ))
                        })?;
                        f.coeffs[i] += v;
                    }
                }
            }
        }
        if let Some(sub) = support {
            let mask = f.grid.mask_inside(sub);
            for (c, keep) in f.coeffs.iter_mut().zip(mask) {
                if !keep {
                    *c = Complex64::ZERO;
                }
            }
        }
        f.hermitian_symmetrize();
        Ok(f)
    }

    /// Random Hermitian coefficients (standard normal), optionally
    /// restricted to a support box.
    pub fn random_hermitian<R: Rng>(
        grid: Arc<SpectralGrid>,
        rng: &mut R,
        amp: f64,
        support: Option<&CompactBox>,
    ) -> Self {
        let mut f = Self::zeros(grid);
        for c in f.coeffs.iter_mut() {
            *c = Complex64::new(
                amp * sample_normal(rng),
                amp * sample_normal(rng),
            );
        }
        if let Some(sub) = support {
            let mask = f.grid.mask_inside(sub);
            for (c, keep) in f.coeffs.iter_mut().zip(mask) {
                if !keep {
                    *c = Complex64::ZERO;
                }
            }
        }
        f.hermitian_symmetrize();
        f
    }

    pub fn grid(&self) -> &Arc<SpectralGrid> {
        &self.grid
    }

    pub fn coeffs(&self) -> &[Complex64] {
        &self.coeffs
    }

    pub fn coeffs_mut(&mut self) -> &mut [Complex64] {
        &mut self.coeffs
    }

    /// u_hat(eta) <- (u_hat(eta) + conj(u_hat(-eta))) / 2.
    pub fn hermitian_symmetrize(&mut self) {
        for i in 0..self.coeffs.len() {
            let j = self.grid.neg(i);
            if i < j {
                let a = self.coeffs[i];
                let b = self.coeffs[j];
                self.coeffs[i] = 0.5 * (a + b.conj());
                self.coeffs[j] = self.coeffs[i].conj();
            } else if i == j {
                self.coeffs[i] = Complex64::new(self.coeffs[i].re, 0.0);
            }
        }
    }

    pub fn is_hermitian(&self, tol: f64) -> bool {
        let scale = self
            .coeffs
            .iter()
            .map(|c| c.norm())
            .fold(0.0f64, f64::max)
            .max(1e-300);
        self.coeffs.iter().enumerate().all(|(i, c)| {
            (c - self.coeffs[self.grid.neg(i)].conj()).norm() <= tol * scale
        })
    }

    /// sqrt(w sum |u_hat|^2): the L^2 norm of the synthesized field.
    pub fn parseval_norm(&self) -> f64 {
        (self.grid.weight() * self.coeffs.iter().map(|c| c.norm_sqr()).sum::<f64>()).sqrt()
    }

    /// w sum u conj(v).
    pub fn inner(&self, other: &Self) -> Result<Complex64> {
        self.check_same_grid(other)?;
        let s: Complex64 = self
            .coeffs
            .iter()
            .zip(&other.coeffs)
            .map(|(a, b)| a * b.conj())
            .sum();
        Ok(s * self.grid.weight())
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.check_same_grid(other)?;
        let coeffs = self
            .coeffs
            .iter()
            .zip(&other.coeffs)
            .map(|(a, b)| a + b)
            .collect();
        Ok(SpectralFunction {
            grid: self.grid.clone(),
            coeffs,
        })
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.check_same_grid(other)?;
        let coeffs = self
            .coeffs
            .iter()
            .zip(&other.coeffs)
            .map(|(a, b)| a - b)
            .collect();
        Ok(SpectralFunction {
            grid: self.grid.clone(),
            coeffs,
        })
    }

    pub fn scale(&self, s: f64) -> Self {
        SpectralFunction {
            grid: self.grid.clone(),
            coeffs: self.coeffs.iter().map(|c| c * s).collect(),
        }
    }

    /// Pointwise multiplication by a real symbol table (one value per node).
    /// Hermitian symmetry is preserved when the symbol is even.
    pub fn scale_by_symbol(&self, symbol: &[f64]) -> Result<Self> {
        if symbol.len() != self.coeffs.len() {
            return Err(CoreError::InvalidSpec("symbol length mismatch".into()));
        }
        let coeffs = self
            .coeffs
            .iter()
            .zip(symbol)
            .map(|(c, s)| c * s)
            .collect();
        Ok(SpectralFunction {
            grid: self.grid.clone(),
            coeffs,
        })
    }

    /// Zero all coefficients outside the sub-box (projection onto K).
    pub fn restrict_to(&self, sub: &CompactBox) -> Self {
        let mask = self.grid.mask_inside(sub);
        let coeffs = self
            .coeffs
            .iter()
            .zip(mask)
            .map(|(c, keep)| if keep { *c } else { Complex64::ZERO })
            .collect();
        SpectralFunction {
            grid: self.grid.clone(),
            coeffs,
        }
    }

    fn check_same_grid(&self, other: &Self) -> Result<()> {
        if Arc::ptr_eq(&self.grid, &other.grid) {
            Ok(())
        } else {
            Err(CoreError::GridMismatch)
        }
    }
}

fn node_index(grid: &SpectralGrid, eta: &[f64]) -> Option<usize> {
    grid.nodes().position(|n| {
        n.iter()
            .zip(eta)
            .all(|(a, b)| (a - b).abs() <= 1e-12 * a.abs().max(1.0))
    })
}

/// Box-Muller sample; avoids pulling a distributions crate for one use.
fn sample_normal<R: Rng>(rng: &mut R) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (TWO_PI * u2).cos()
}

/// Plain Fourier synthesis u(x) = w sum_j u_hat_j e^{2 pi i eta_j x}
/// (one-dimensional real-space paths).
pub fn synthesize(u: &SpectralFunction, x_samples: &[f64]) -> Result<Vec<Complex64>> {
    let phi = vec![vec![Complex64::new(1.0, 0.0); x_samples.len()]; u.grid().len()];
    synth_kernel(u, &phi, x_samples)
}

/// Adaption synthesis: each Fourier mode is multiplied by its Bloch cell
/// factor Phi_0(x/eps; eps eta_j).
pub fn adaption_synthesize(
    u: &SpectralFunction,
    solver: &BlochSolver,
    eps: f64,
    x_samples: &[f64],
) -> Result<Vec<Complex64>> {
    let grid = u.grid();
    if grid.dim() != 1 || solver.coefficient().dim() != 1 {
        return Err(CoreError::Unsupported(
            "real-space synthesis paths are one-dimensional".into(),
        ));
    }
    grid.validate_eps(eps)?;
    let ks = solver.truncation().indices();
    // Bloch factor tables Phi_j(x_i) per node
    let phi: Vec<Vec<Complex64>> = grid
        .nodes()
        .collect::<Vec<_>>()
        .par_iter()
        .map(|eta| {
            let theta = [eta[0] * eps];
            let pair = solver.lowest_eigenpair(&theta, DEFAULT_EIG_TOL)?;
            Ok(x_samples
                .iter()
                .map(|&x| {
                    let mut v = Complex64::ZERO;
                    for (c, k) in pair.coeffs.iter().zip(&ks) {
                        let ph = TWO_PI * k[0] as f64 * x / eps;
                        v += c * Complex64::new(0.0, ph).exp();
                    }
                    v
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    synth_kernel(u, &phi, x_samples)
}

/// Shared synthesis kernel: w sum_j u_j Phi_j(x) e^{2 pi i eta_j x}. Plain
/// synthesis passes Phi = 1 so the two paths produce bit-identical output
/// for constant coefficients (whose cell factor is exactly one).
fn synth_kernel(
    u: &SpectralFunction,
    phi: &[Vec<Complex64>],
    x_samples: &[f64],
) -> Result<Vec<Complex64>> {
    let grid = u.grid();
    if grid.dim() != 1 {
        return Err(CoreError::Unsupported(
            "real-space synthesis paths are one-dimensional".into(),
        ));
    }
    let w = grid.weight();
    let etas: Vec<f64> = grid.nodes().map(|n| n[0]).collect();
    let out: Vec<Complex64> = x_samples
        .par_iter()
        .enumerate()
        .map(|(i, &x)| {
            let mut acc = Complex64::ZERO;
            for (j, (c, eta)) in u.coeffs().iter().zip(&etas).enumerate() {
                let phase = Complex64::new(0.0, TWO_PI * eta * x).exp();
                acc += c * phi[j][i] * phase;
            }
            acc * w
        })
        .collect();
    Ok(out)
}

/// Uniform torus sample points [0, L).
pub fn torus_samples(length: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| length * i as f64 / n as f64).collect()
}

/// Rectangle-rule L^2 norm on the torus (exact for band-limited data below
/// the aliasing limit).
pub fn torus_l2_norm(samples: &[Complex64], length: f64) -> f64 {
    let h = length / samples.len() as f64;
    (samples.iter().map(|c| c.norm_sqr()).sum::<f64>() * h).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coeff::PeriodicCoefficient;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn grid17() -> Arc<SpectralGrid> {
        SpectralGrid::make(CompactBox::new(vec![2.0]).unwrap(), 0.25, &[0.125]).unwrap()
    }

    #[test]
    fn parseval_single_pair() {
        // u(+-eta0) = 1/2, w = 0.25 -> sqrt(0.25 * 0.5)
        let g = grid17();
        let mut u = SpectralFunction::zeros(g.clone());
        let i = node_index(&g, &[0.5]).unwrap();
        u.coeffs_mut()[i] = Complex64::new(0.5, 0.0);
        u.coeffs_mut()[g.neg(i)] = Complex64::new(0.5, 0.0);
        assert_relative_eq!(u.parseval_norm(), (0.25f64 * 0.5).sqrt(), max_relative = 1e-15);
        let z = SpectralFunction::zeros(g);
        assert_eq!(z.parseval_norm(), 0.0);
    }

    #[test]
    fn parseval_matches_real_space_quadrature() {
        let g = grid17();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let u = SpectralFunction::random_hermitian(g.clone(), &mut rng, 1.0, None);
        let xs = torus_samples(g.box_length(), 4096);
        let samples = synthesize(&u, &xs).unwrap();
        // Hermitian coefficients synthesize a real field
        let max_im = samples.iter().map(|c| c.im.abs()).fold(0.0f64, f64::max);
        let max_abs = samples.iter().map(|c| c.norm()).fold(0.0f64, f64::max);
        assert!(max_im <= 1e-12 * max_abs);
        let quad = torus_l2_norm(&samples, g.box_length());
        assert_relative_eq!(u.parseval_norm(), quad, max_relative = 1e-8);
    }

    #[test]
    fn synthesize_examples() {
        let g = grid17();
        // indicator at eta = 0 -> constant w
        let mut u = SpectralFunction::zeros(g.clone());
        u.coeffs_mut()[g.zero_index()] = Complex64::new(1.0, 0.0);
        let vals = synthesize(&u, &[0.0, 0.3, 1.7]).unwrap();
        for v in vals {
            assert_relative_eq!(v.re, g.weight(), max_relative = 1e-14);
            assert!(v.im.abs() < 1e-16);
        }
        // Hermitian pair at +-eta0 checked at x = 0: 2 w Re(u)
        let mut u = SpectralFunction::zeros(g.clone());
        let i = node_index(&g, &[0.75]).unwrap();
        u.coeffs_mut()[i] = Complex64::new(0.3, 0.4);
        u.hermitian_symmetrize();
        let v0 = synthesize(&u, &[0.0]).unwrap()[0];
        assert_relative_eq!(v0.re, 2.0 * g.weight() * 0.3 * 0.5, max_relative = 1e-12);
    }

    #[test]
    fn transform_round_trip() {
        // forward transform of the synthesized field recovers coefficients:
        // u_hat(eta_j) = (1/w) * (1/N) sum_i u(x_i) e^{-2 pi i eta_j x_i} * (w L / L)
        let g = grid17();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let u = SpectralFunction::random_hermitian(g.clone(), &mut rng, 1.0, None);
        let n = 512usize;
        let xs = torus_samples(g.box_length(), n);
        let samples = synthesize(&u, &xs).unwrap();
        for (j, eta) in g.nodes().enumerate() {
            let mut acc = Complex64::ZERO;
            for (x, s) in xs.iter().zip(&samples) {
                acc += s * Complex64::new(0.0, -TWO_PI * eta[0] * x).exp();
            }
            // rectangle rule of (1/L) int u e^{-2pi i eta x} = w u_hat
            let back = acc / n as f64 / g.weight();
            assert!(
                (back - u.coeffs()[j]).norm() < 1e-10,
                "node {j}: {back} vs {}",
                u.coeffs()[j]
            );
        }
    }

    #[test]
    fn adaption_equals_synthesis_for_constant_coefficient() {
        let g = grid17();
        let solver = BlochSolver::new(PeriodicCoefficient::constant(1, 1.0, 0.5).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let u = SpectralFunction::random_hermitian(g.clone(), &mut rng, 1.0, None);
        let xs = torus_samples(g.box_length(), 257);
        let a = adaption_synthesize(&u, &solver, 0.125, &xs).unwrap();
        let b = synthesize(&u, &xs).unwrap();
        // bit-for-bit: the cell factor is exactly (1, 0)
        assert_eq!(a, b);
    }

    #[test]
    fn adaption_preserves_parseval_norm() {
        let g = grid17();
        let solver = BlochSolver::new(PeriodicCoefficient::cosine_1d());
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let u = SpectralFunction::random_hermitian(g.clone(), &mut rng, 0.8, None);
        let xs = torus_samples(g.box_length(), 4096);
        let a = adaption_synthesize(&u, &solver, 0.125, &xs).unwrap();
        // adapted field of Hermitian data is real
        let max_im = a.iter().map(|c| c.im.abs()).fold(0.0f64, f64::max);
        let max_abs = a.iter().map(|c| c.norm()).fold(0.0f64, f64::max);
        assert!(max_im <= 1e-9 * max_abs);
        let quad = torus_l2_norm(&a, g.box_length());
        assert_relative_eq!(u.parseval_norm(), quad, max_relative = 1e-6);
    }

    #[test]
    fn zero_coefficients_zero_samples() {
        let g = grid17();
        let solver = BlochSolver::new(PeriodicCoefficient::cosine_1d());
        let u = SpectralFunction::zeros(g.clone());
        let a = adaption_synthesize(&u, &solver, 0.125, &[0.0, 1.0]).unwrap();
        assert!(a.iter().all(|c| *c == Complex64::ZERO));
    }

    #[test]
    fn profiles_are_hermitian_and_supported() {
        let g = grid17();
        let f = SpectralFunction::from_profiles(
            g.clone(),
            &[
                Profile::Gauss {
                    center: vec![0.5],
                    width: 0.6,
                    amp: 0.7,
                },
                Profile::Mode {
                    eta: vec![0.75],
                    amp: Complex64::new(0.0, 0.3),
                },
            ],
            None,
        )
        .unwrap();
        assert!(f.is_hermitian(1e-14));
        // off-node mode rejected
        assert!(SpectralFunction::from_profiles(
            g.clone(),
            &[Profile::Mode {
                eta: vec![0.3],
                amp: Complex64::new(1.0, 0.0),
            }],
            None,
        )
        .is_err());
        // support restriction zeroes outside nodes
        let sub = CompactBox::new(vec![1.0]).unwrap();
        let f = SpectralFunction::from_profiles(
            g.clone(),
            &[Profile::Gauss {
                center: vec![0.0],
                width: 2.0,
                amp: 1.0,
            }],
            Some(&sub),
        )
        .unwrap();
        for (i, eta) in g.nodes().enumerate() {
            if eta[0].abs() > 1.0 + 1e-12 {
                assert_eq!(f.coeffs()[i], Complex64::ZERO);
            } else {
                assert!(f.coeffs()[i].norm() > 0.0);
            }
        }
    }

    #[test]
    fn grid_mismatch_rejected() {
        let g1 = grid17();
        let g2 = grid17();
        let a = SpectralFunction::zeros(g1);
        let b = SpectralFunction::zeros(g2);
        assert!(matches!(a.add(&b), Err(CoreError::GridMismatch)));
    }
}
