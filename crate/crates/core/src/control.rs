//! Optimal control in spectral coordinates.
//!
//! The three problem families differ only through the scalar state-map
//! symbol rho(eta) applied pointwise on the grid:
//!
//! * exact Bloch:        rho = 1 / (1 + lambda_0^eps)
//! * order-M effective:  rho = 1 / (1 + P_M^eps)
//! * well-posed order 2: rho = (1 + Q_2^eps) / (1 + R_2^eps)
//!
//! With y_hat = rho (f_hat + u_hat) the cost is
//!
//! ```text
//! J(u) = mu1/2 . w sum |rho (f+u) - yd1|^2 / rho
//!      + mu2/2 . w sum |rho (f+u) - yd2|^2
//!      + kappa/2 . w sum |u|^2
//! ```
//!
//! where the 1/rho weight makes the first term the energy of y - yd1. All
//! cost terms are diagonal in eta and the four admissible sets couple nodes
//! only through one scalar (a norm or an energy), so optima are closed-form
//! pointwise solves combined with a scalar KKT multiplier found by
//! bisection. This yields machine-precision optima, which is what makes the
//! eps-rate measurements clean.

use std::sync::Arc;

use num_complex::Complex64;
use rand::Rng;
use rayon::prelude::*;

use crate::cell::BlochSolver;
use crate::effective::{eval_pm, eval_qr, epsilon_threshold, EffectiveTensors};
use crate::error::{CoreError, Result};
use crate::grid::SpectralGrid;
use crate::signal::SpectralFunction;

/// Relative gate for the unconstrained gradient residual.
const GRADIENT_RESIDUAL_REL: f64 = 1e-12;
/// Relative bisection tolerance on |constraint - level|.
const BISECTION_REL: f64 = 1e-10;
/// Complementary-slackness tolerance.
const SLACKNESS_TOL: f64 = 1e-8;

/// Which problem family a multiplier model represents.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ModelKind {
    ExactBloch { eps: f64 },
    TaylorEffective { order: usize, eps: f64 },
    WellPosed2 { eps: f64 },
}

/// A state-map symbol rho(eta_j) tabulated on a spectral grid.
#[derive(Debug, Clone)]
pub struct MultiplierModel {
    kind: ModelKind,
    grid: Arc<SpectralGrid>,
    rho: Vec<f64>,
}

impl MultiplierModel {
    /// rho = 1/(1 + lambda_0^eps) from the cell eigensolver; requires
    /// eps eta_j in Z for every node.
    pub fn exact_bloch(solver: &BlochSolver, grid: &Arc<SpectralGrid>, eps: f64) -> Result<Self> {
        if solver.coefficient().dim() != grid.dim() {
            return Err(CoreError::DimensionMismatch("model vs grid".into()));
        }
        let nodes: Vec<Vec<f64>> = grid.nodes().map(|n| n.to_vec()).collect();
        let rho: Vec<f64> = nodes
            .par_iter()
            .map(|eta| {
                let lam = solver.rescaled_lowest(eta, eps)?;
                Ok(1.0 / (1.0 + lam))
            })
            .collect::<Result<_>>()?;
        Self::finish(ModelKind::ExactBloch { eps }, grid.clone(), rho)
    }

    /// rho = 1/(1 + P_M^eps); refused at or above the certified coercivity
    /// threshold eps_M.
    pub fn taylor_effective(
        tensors: &EffectiveTensors,
        order: usize,
        eps: f64,
        grid: &Arc<SpectralGrid>,
    ) -> Result<Self> {
        if tensors.dim != grid.dim() {
            return Err(CoreError::DimensionMismatch("tensors vs grid".into()));
        }
        let threshold = epsilon_threshold(tensors, order, grid.k_box())?.certified();
        if eps >= threshold.value() {
            return Err(CoreError::ThresholdExceeded {
                eps,
                threshold: threshold.value(),
                order,
            });
        }
        let lam = tensors.ellipticity;
        let rho: Vec<f64> = grid
            .nodes()
            .map(|eta| {
                let p = eval_pm(tensors, order, eps, eta)?;
                let e2: f64 = eta.iter().map(|x| x * x).sum();
                if p < 0.5 * lam * e2 - 1e-12 {
                    return Err(CoreError::InvariantViolation(format!(
                        "P_{order} loses coercivity at eta {eta:?} below the threshold"
                    )));
                }
                Ok(1.0 / (1.0 + p))
            })
            .collect::<Result<_>>()?;
        Self::finish(
            ModelKind::TaylorEffective { order, eps },
            grid.clone(),
            rho,
        )
    }

    /// rho = (1 + Q_2^eps)/(1 + R_2^eps); well-posed for every eps.
    pub fn well_posed2(
        tensors: &EffectiveTensors,
        eps: f64,
        grid: &Arc<SpectralGrid>,
    ) -> Result<Self> {
        if tensors.dim != grid.dim() {
            return Err(CoreError::DimensionMismatch("tensors vs grid".into()));
        }
        if eps <= 0.0 {
            return Err(CoreError::InvalidSpec("eps must be positive".into()));
        }
        let rho: Vec<f64> = grid
            .nodes()
            .map(|eta| {
                let (q, r) = eval_qr(tensors, eps, eta)?;
                if q < -1e-14 || r < -1e-14 {
                    return Err(CoreError::InvariantViolation(format!(
                        "negative regularized symbol at eta {eta:?}: Q = {q}, R = {r}"
                    )));
                }
                Ok((1.0 + q) / (1.0 + r))
            })
            .collect::<Result<_>>()?;
        Self::finish(ModelKind::WellPosed2 { eps }, grid.clone(), rho)
    }

    fn finish(kind: ModelKind, grid: Arc<SpectralGrid>, rho: Vec<f64>) -> Result<Self> {
        for (i, r) in rho.iter().enumerate() {
            if !(*r > 0.0 && r.is_finite()) {
                return Err(CoreError::InvariantViolation(format!(
                    "rho not positive at node {i}: {r}"
                )));
            }
            let j = grid.neg(i);
            if (rho[j] - r).abs() > 1e-10 * r.abs() {
                return Err(CoreError::InvariantViolation(format!(
                    "rho not even at node {i}"
                )));
            }
        }
        Ok(MultiplierModel { kind, grid, rho })
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn grid(&self) -> &Arc<SpectralGrid> {
        &self.grid
    }

    pub fn rho(&self) -> &[f64] {
        &self.rho
    }

    pub fn eps(&self) -> f64 {
        match self.kind {
            ModelKind::ExactBloch { eps }
            | ModelKind::TaylorEffective { eps, .. }
            | ModelKind::WellPosed2 { eps } => eps,
        }
    }

    pub fn max_rho(&self) -> f64 {
        self.rho.iter().cloned().fold(0.0, f64::max)
    }

    pub fn label(&self) -> String {
        match self.kind {
            ModelKind::ExactBloch { .. } => "exact_bloch".into(),
            ModelKind::TaylorEffective { order, .. } => format!("taylor_m{order}"),
            ModelKind::WellPosed2 { .. } => "well_posed2".into(),
        }
    }
}

/// The admissible control set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AdmissibleSet {
    FullSpace,
    /// ||u|| <= level.
    ControlNormBall { level: f64 },
    /// ||state|| <= level; `approximate` evaluates the membership symbol
    /// with the model's own rho instead of the shared exact-Bloch one.
    StateNormBall { level: f64, approximate: bool },
    /// energy(state) <= level (quadratic units).
    StateEnergyBall { level: f64, approximate: bool },
}

impl AdmissibleSet {
    pub fn level(&self) -> Option<f64> {
        match self {
            AdmissibleSet::FullSpace => None,
            AdmissibleSet::ControlNormBall { level }
            | AdmissibleSet::StateNormBall { level, .. }
            | AdmissibleSet::StateEnergyBall { level, .. } => Some(*level),
        }
    }

    pub fn is_ball(&self) -> bool {
        !matches!(self, AdmissibleSet::FullSpace)
    }
}

/// Weights, data and admissible set of one control problem.
#[derive(Debug, Clone)]
pub struct ControlProblemSpec {
    pub mu1: f64,
    pub mu2: f64,
    pub kappa: f64,
    pub f: SpectralFunction,
    pub yd1: SpectralFunction,
    pub yd2: SpectralFunction,
    pub admissible: AdmissibleSet,
}

impl ControlProblemSpec {
    pub fn validate(&self) -> Result<()> {
        if self.mu1 < 0.0 || self.mu2 < 0.0 {
            return Err(CoreError::InvalidSpec("mu1, mu2 must be >= 0".into()));
        }
        if self.kappa <= 0.0 {
            return Err(CoreError::InvalidSpec("kappa must be > 0".into()));
        }
        if let Some(l) = self.admissible.level() {
            if l <= 0.0 {
                return Err(CoreError::InvalidSpec("ball level must be > 0".into()));
            }
        }
        for (name, f) in [("f", &self.f), ("yd1", &self.yd1), ("yd2", &self.yd2)] {
            if !Arc::ptr_eq(f.grid(), self.f.grid()) {
                return Err(CoreError::GridMismatch);
            }
            if !f.is_hermitian(1e-9) {
                return Err(CoreError::InvalidSpec(format!("{name} is not Hermitian")));
            }
        }
        Ok(())
    }

    fn data_scale(&self) -> f64 {
        (self.f.parseval_norm().powi(2)
            + self.yd1.parseval_norm().powi(2)
            + self.yd2.parseval_norm().powi(2))
        .sqrt()
    }
}

/// Optimal triple with certificates.
#[derive(Debug, Clone)]
pub struct OptimalSolution {
    pub control: SpectralFunction,
    pub state: SpectralFunction,
    pub adjoint: SpectralFunction,
    /// Scalar KKT multiplier (0 when the constraint is inactive).
    pub multiplier: f64,
    pub cost: f64,
    /// Constraint value for ball sets.
    pub constraint: Option<f64>,
    /// Parseval norm of the (unaugmented) cost gradient at the optimum.
    pub gradient_norm: f64,
}

fn check_grids(model: &MultiplierModel, u: &SpectralFunction) -> Result<()> {
    if Arc::ptr_eq(model.grid(), u.grid()) {
        Ok(())
    } else {
        Err(CoreError::GridMismatch)
    }
}

/// y_hat = rho (f_hat + u_hat).
pub fn state_map(
    model: &MultiplierModel,
    u: &SpectralFunction,
    f: &SpectralFunction,
) -> Result<SpectralFunction> {
    check_grids(model, u)?;
    check_grids(model, f)?;
    u.add(f)?.scale_by_symbol(model.rho())
}

/// Cost J(u) (see module docs); identical formula for all three families.
pub fn cost(model: &MultiplierModel, u: &SpectralFunction, spec: &ControlProblemSpec) -> Result<f64> {
    augmented_cost(model, u, spec, 0.0, None)
}

/// Gradient of J at u: mu1 (rho(f+u) - yd1) + mu2 rho (rho(f+u) - yd2)
/// + kappa u.
pub fn gradient(
    model: &MultiplierModel,
    u: &SpectralFunction,
    spec: &ControlProblemSpec,
) -> Result<SpectralFunction> {
    augmented_gradient(model, u, spec, 0.0, None)
}

/// The membership symbol of the state/energy balls: the shared exact-Bloch
/// rho by default, or the model's own rho for the approximate variants.
fn set_symbol<'a>(
    model: &'a MultiplierModel,
    spec: &ControlProblemSpec,
    shared: Option<&'a MultiplierModel>,
) -> Result<Option<&'a [f64]>> {
    let approximate = match spec.admissible {
        AdmissibleSet::FullSpace | AdmissibleSet::ControlNormBall { .. } => return Ok(None),
        AdmissibleSet::StateNormBall { approximate, .. }
        | AdmissibleSet::StateEnergyBall { approximate, .. } => approximate,
    };
    if approximate || matches!(model.kind(), ModelKind::ExactBloch { .. }) {
        return Ok(Some(model.rho()));
    }
    let shared = shared.ok_or_else(|| {
        CoreError::InvalidSpec(
            "state/energy ball needs the shared exact-Bloch model (or the approximate flag)"
                .into(),
        )
    })?;
    if !matches!(shared.kind(), ModelKind::ExactBloch { .. }) {
        return Err(CoreError::InvalidSpec(
            "shared set symbol must come from an exact-Bloch model".into(),
        ));
    }
    if !Arc::ptr_eq(shared.grid(), model.grid()) {
        return Err(CoreError::GridMismatch);
    }
    if (shared.eps() - model.eps()).abs() > 1e-12 * model.eps() {
        return Err(CoreError::InvalidSpec(
            "shared set symbol has a different eps".into(),
        ));
    }
    Ok(Some(shared.rho()))
}

/// Constraint value of the admissible set at u (None for the full space).
pub fn constraint_value(
    model: &MultiplierModel,
    u: &SpectralFunction,
    spec: &ControlProblemSpec,
    shared: Option<&MultiplierModel>,
) -> Result<Option<f64>> {
    check_grids(model, u)?;
    let c = set_symbol(model, spec, shared)?;
    Ok(match spec.admissible {
        AdmissibleSet::FullSpace => None,
        AdmissibleSet::ControlNormBall { .. } => Some(u.parseval_norm()),
        AdmissibleSet::StateNormBall { .. } => {
            let fu = u.add(&spec.f)?;
            Some(fu.scale_by_symbol(c.unwrap())?.parseval_norm())
        }
        AdmissibleSet::StateEnergyBall { .. } => {
            let fu = u.add(&spec.f)?;
            let w = model.grid().weight();
            Some(
                w * fu
                    .coeffs()
                    .iter()
                    .zip(c.unwrap())
                    .map(|(v, s)| s * v.norm_sqr())
                    .sum::<f64>(),
            )
        }
    })
}

/// J(u) + (t/2) G(u) with G the squared-norm (norm balls) or the energy
/// (energy ball) of the constrained quantity.
pub fn augmented_cost(
    model: &MultiplierModel,
    u: &SpectralFunction,
    spec: &ControlProblemSpec,
    t: f64,
    shared: Option<&MultiplierModel>,
) -> Result<f64> {
    check_grids(model, u)?;
    check_grids(model, &spec.f)?;
    let w = model.grid().weight();
    let rho = model.rho();
    let mut j = 0.0f64;
    for (i, uu) in u.coeffs().iter().enumerate() {
        let y = rho[i] * (spec.f.coeffs()[i] + uu);
        let e1 = (y - spec.yd1.coeffs()[i]).norm_sqr();
        let e2 = (y - spec.yd2.coeffs()[i]).norm_sqr();
        j += 0.5 * spec.mu1 * e1 / rho[i] + 0.5 * spec.mu2 * e2 + 0.5 * spec.kappa * uu.norm_sqr();
    }
    j *= w;
    if t != 0.0 {
        let c = set_symbol(model, spec, shared)?;
        let g = match spec.admissible {
            AdmissibleSet::FullSpace => {
                return Err(CoreError::InvalidSpec(
                    "augmentation has no meaning on the full space".into(),
                ))
            }
            AdmissibleSet::ControlNormBall { .. } => u.parseval_norm().powi(2),
            AdmissibleSet::StateNormBall { .. } => {
                let fu = u.add(&spec.f)?;
                fu.scale_by_symbol(c.unwrap())?.parseval_norm().powi(2)
            }
            AdmissibleSet::StateEnergyBall { .. } => {
                let fu = u.add(&spec.f)?;
                w * fu
                    .coeffs()
                    .iter()
                    .zip(c.unwrap())
                    .map(|(v, s)| s * v.norm_sqr())
                    .sum::<f64>()
            }
        };
        j += 0.5 * t * g;
    }
    Ok(j)
}

/// Gradient of the augmented cost.
pub fn augmented_gradient(
    model: &MultiplierModel,
    u: &SpectralFunction,
    spec: &ControlProblemSpec,
    t: f64,
    shared: Option<&MultiplierModel>,
) -> Result<SpectralFunction> {
    check_grids(model, u)?;
    let rho = model.rho();
    let c = if t != 0.0 {
        set_symbol(model, spec, shared)?
    } else {
        None
    };
    let mut g = vec![Complex64::ZERO; u.coeffs().len()];
    for (i, gg) in g.iter_mut().enumerate() {
        let uu = u.coeffs()[i];
        let fu = spec.f.coeffs()[i] + uu;
        let y = rho[i] * fu;
        *gg = spec.mu1 * (y - spec.yd1.coeffs()[i])
            + spec.mu2 * rho[i] * (y - spec.yd2.coeffs()[i])
            + spec.kappa * uu;
        if t != 0.0 {
            match spec.admissible {
                AdmissibleSet::FullSpace => {}
                AdmissibleSet::ControlNormBall { .. } => *gg += t * uu,
                AdmissibleSet::StateNormBall { .. } => {
                    let s = c.unwrap()[i];
                    *gg += t * s * s * fu;
                }
                AdmissibleSet::StateEnergyBall { .. } => {
                    let s = c.unwrap()[i];
                    *gg += t * s * fu;
                }
            }
        }
    }
    SpectralFunction::from_coeffs(model.grid().clone(), g)
}

/// Pointwise minimizer of the t-augmented quadratic.
fn augmented_minimizer(
    model: &MultiplierModel,
    spec: &ControlProblemSpec,
    t: f64,
    set_sym: Option<&[f64]>,
) -> Result<SpectralFunction> {
    let rho = model.rho();
    let n = rho.len();
    let mut coeffs = vec![Complex64::ZERO; n];
    for i in 0..n {
        let r = rho[i];
        let f = spec.f.coeffs()[i];
        let mut num = spec.mu1 * (spec.yd1.coeffs()[i] - r * f)
            + spec.mu2 * r * (spec.yd2.coeffs()[i] - r * f);
        let mut den = spec.kappa + spec.mu1 * r + spec.mu2 * r * r;
        if t != 0.0 {
            match spec.admissible {
                AdmissibleSet::FullSpace => {}
                AdmissibleSet::ControlNormBall { .. } => den += t,
                AdmissibleSet::StateNormBall { .. } => {
                    let s = set_sym.expect("ball symbol resolved")[i];
                    num -= t * s * s * f;
                    den += t * s * s;
                }
                AdmissibleSet::StateEnergyBall { .. } => {
                    let s = set_sym.expect("ball symbol resolved")[i];
                    num -= t * s * f;
                    den += t * s;
                }
            }
        }
        coeffs[i] = num / den;
    }
    SpectralFunction::from_coeffs(model.grid().clone(), coeffs)
}

fn assemble_solution(
    model: &MultiplierModel,
    spec: &ControlProblemSpec,
    u: SpectralFunction,
    t: f64,
    constraint: Option<f64>,
) -> Result<OptimalSolution> {
    let y = state_map(model, &u, &spec.f)?;
    let p = adjoint_state(model, &y, spec)?;
    let j = cost(model, &u, spec)?;
    let g = gradient(model, &u, spec)?;
    let sol = OptimalSolution {
        control: u,
        state: y,
        adjoint: p,
        multiplier: t,
        cost: j,
        constraint,
        gradient_norm: g.parseval_norm(),
    };
    uniform_bound_check(model, spec, &sol)?;
    Ok(sol)
}

/// Uniform control bound ||u*|| <= sqrt(2 J(u_0)/kappa) with the feasibility
/// witness u_0 (0, or -f for state/energy balls).
fn uniform_bound_check(
    model: &MultiplierModel,
    spec: &ControlProblemSpec,
    sol: &OptimalSolution,
) -> Result<()> {
    let witness = match spec.admissible {
        AdmissibleSet::FullSpace | AdmissibleSet::ControlNormBall { .. } => {
            SpectralFunction::zeros(model.grid().clone())
        }
        _ => spec.f.scale(-1.0),
    };
    let j0 = cost(model, &witness, spec)?;
    let bound = (2.0 * j0 / spec.kappa).sqrt();
    let nrm = sol.control.parseval_norm();
    if nrm > bound * (1.0 + 1e-9) + 1e-14 {
        return Err(CoreError::InvariantViolation(format!(
            "uniform control bound violated: ||u*|| = {nrm:.6e} > {bound:.6e}"
        )));
    }
    Ok(())
}

/// Closed-form full-space solve.
pub fn solve_unconstrained(
    model: &MultiplierModel,
    spec: &ControlProblemSpec,
) -> Result<OptimalSolution> {
    spec.validate()?;
    check_grids(model, &spec.f)?;
    if spec.admissible.is_ball() {
        return Err(CoreError::InvalidSpec(
            "solve_unconstrained requires the full-space admissible set".into(),
        ));
    }
    let u = augmented_minimizer(model, spec, 0.0, None)?;
    let g = gradient(model, &u, spec)?;
    let scale = spec.data_scale();
    if g.parseval_norm() > GRADIENT_RESIDUAL_REL * scale {
        return Err(CoreError::InvariantViolation(format!(
            "stationarity residual {:.3e} above {GRADIENT_RESIDUAL_REL:.0e} x data scale {scale:.3e}",
            g.parseval_norm()
        )));
    }
    assemble_solution(model, spec, u, 0.0, None)
}

/// Ball-constrained solve: closed form if the unconstrained optimum is
/// feasible, otherwise bisection on the scalar multiplier t (the constraint
/// value is continuous and strictly decreasing in t).
pub fn solve_constrained(
    model: &MultiplierModel,
    spec: &ControlProblemSpec,
    shared: Option<&MultiplierModel>,
) -> Result<OptimalSolution> {
    spec.validate()?;
    check_grids(model, &spec.f)?;
    let level = spec
        .admissible
        .level()
        .ok_or_else(|| CoreError::InvalidSpec("solve_constrained needs a ball set".into()))?;
    let set_sym = set_symbol(model, spec, shared)?;
    let constraint_of = |u: &SpectralFunction| -> Result<f64> {
        Ok(constraint_value(model, u, spec, shared)?.expect("ball set"))
    };

    let u0 = augmented_minimizer(model, spec, 0.0, set_sym)?;
    let c0 = constraint_of(&u0)?;
    if c0 <= level * (1.0 + 1e-12) {
        return assemble_solution(model, spec, u0, 0.0, Some(c0));
    }

    // bracket: double t until feasible
    let mut t_hi = 1.0f64;
    let mut guard = 0;
    loop {
        let u = augmented_minimizer(model, spec, t_hi, set_sym)?;
        if constraint_of(&u)? <= level {
            break;
        }
        t_hi *= 2.0;
        guard += 1;
        if guard > 200 {
            return Err(CoreError::Bisection(
                "failed to bracket the KKT multiplier".into(),
            ));
        }
    }
    let mut t_lo = 0.0f64;
    let mut u = augmented_minimizer(model, spec, t_hi, set_sym)?;
    let mut c = constraint_of(&u)?;
    for _ in 0..200 {
        if (c - level).abs() <= BISECTION_REL * level {
            break;
        }
        let mid = 0.5 * (t_lo + t_hi);
        let um = augmented_minimizer(model, spec, mid, set_sym)?;
        let cm = constraint_of(&um)?;
        if cm > level {
            t_lo = mid;
        } else {
            t_hi = mid;
            u = um;
            c = cm;
        }
    }
    if (c - level).abs() > SLACKNESS_TOL * level.max(1.0) {
        return Err(CoreError::Bisection(format!(
            "multiplier bisection stalled: |constraint - level| = {:.3e}",
            (c - level).abs()
        )));
    }
    let t = 0.5 * (t_lo + t_hi);
    let sol = assemble_solution(model, spec, u, t, Some(c))?;
    // complementary slackness certificate
    if sol.multiplier * (c - level).abs() > SLACKNESS_TOL * level.max(1.0) {
        return Err(CoreError::InvariantViolation(
            "complementary slackness violated".into(),
        ));
    }
    Ok(sol)
}

/// Dispatch on the admissible set.
pub fn solve(
    model: &MultiplierModel,
    spec: &ControlProblemSpec,
    shared: Option<&MultiplierModel>,
) -> Result<OptimalSolution> {
    if spec.admissible.is_ball() {
        solve_constrained(model, spec, shared)
    } else {
        solve_unconstrained(model, spec)
    }
}

/// Adjoint state: p1 = rho (y - yd2), p = mu1 (y - yd1) + mu2 p1. At a
/// full-space optimum p + kappa u = 0.
pub fn adjoint_state(
    model: &MultiplierModel,
    y: &SpectralFunction,
    spec: &ControlProblemSpec,
) -> Result<SpectralFunction> {
    check_grids(model, y)?;
    let p1 = y.sub(&spec.yd2)?.scale_by_symbol(model.rho())?;
    y.sub(&spec.yd1)?.scale(spec.mu1).add(&p1.scale(spec.mu2))
}

/// Variational-inequality residual: min over feasible probes v of
/// Re< grad J(u), v - u >. At an optimum this is >= -tol.
pub fn vi_residual<R: Rng>(
    model: &MultiplierModel,
    u: &SpectralFunction,
    spec: &ControlProblemSpec,
    shared: Option<&MultiplierModel>,
    n_probes: usize,
    rng: &mut R,
) -> Result<f64> {
    spec.validate()?;
    check_grids(model, u)?;
    let g = gradient(model, u, spec)?;
    let set_sym = set_symbol(model, spec, shared)?;
    let mut worst = f64::INFINITY;
    for _ in 0..n_probes {
        let z = SpectralFunction::random_hermitian(model.grid().clone(), rng, 1.0, None);
        let v = match spec.admissible {
            AdmissibleSet::FullSpace => u.add(&z)?,
            AdmissibleSet::ControlNormBall { level } => {
                let n = z.parseval_norm().max(1e-300);
                let r: f64 = rng.gen_range(0.0..1.0);
                z.scale(r * level / n)
            }
            AdmissibleSet::StateNormBall { level, .. } => {
                let s = z
                    .scale_by_symbol(set_sym.expect("ball symbol"))?
                    .parseval_norm()
                    .max(1e-300);
                let r: f64 = rng.gen_range(0.0..1.0);
                spec.f.scale(-1.0).add(&z.scale(r * level / s))?
            }
            AdmissibleSet::StateEnergyBall { level, .. } => {
                let c = set_sym.expect("ball symbol");
                let w = model.grid().weight();
                let e: f64 = w
                    * z.coeffs()
                        .iter()
                        .zip(c)
                        .map(|(v, s)| s * v.norm_sqr())
                        .sum::<f64>();
                let r: f64 = rng.gen_range(0.0..1.0);
                spec.f
                    .scale(-1.0)
                    .add(&z.scale((r * level / e.max(1e-300)).sqrt()))?
            }
        };
        let d = v.sub(u)?;
        worst = worst.min(g.inner(&d)?.re);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coeff::PeriodicCoefficient;
    use crate::effective::taylor_tensors;
    use crate::grid::CompactBox;
    use crate::signal::Profile;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn desk_grid() -> Arc<SpectralGrid> {
        SpectralGrid::make(CompactBox::new(vec![2.0]).unwrap(), 0.125, &[0.125]).unwrap()
    }

    fn desk_spec(grid: &Arc<SpectralGrid>, admissible: AdmissibleSet) -> ControlProblemSpec {
        let f = SpectralFunction::from_profiles(
            grid.clone(),
            &[Profile::Gauss {
                center: vec![0.0],
                width: 0.8,
                amp: 1.0,
            }],
            None,
        )
        .unwrap();
        let yd1 = SpectralFunction::from_profiles(
            grid.clone(),
            &[Profile::Gauss {
                center: vec![0.5],
                width: 0.6,
                amp: 0.7,
            }],
            None,
        )
        .unwrap();
        let yd2 = SpectralFunction::from_profiles(
            grid.clone(),
            &[
                Profile::Gauss {
                    center: vec![0.3],
                    width: 0.5,
                    amp: 0.9,
                },
                Profile::Mode {
                    eta: vec![0.625],
                    amp: Complex64::new(0.0, 0.3),
                },
            ],
            None,
        )
        .unwrap();
        ControlProblemSpec {
            mu1: 1.0,
            mu2: 1.0,
            kappa: 1.0,
            f,
            yd1,
            yd2,
            admissible,
        }
    }

    fn models(grid: &Arc<SpectralGrid>, eps: f64) -> (MultiplierModel, MultiplierModel, MultiplierModel) {
        let solver = BlochSolver::new(PeriodicCoefficient::cosine_1d());
        let tensors = taylor_tensors(&solver, 4, 0.1).unwrap();
        let eb = MultiplierModel::exact_bloch(&solver, grid, eps).unwrap();
        let t2 = MultiplierModel::taylor_effective(&tensors, 2, eps, grid).unwrap();
        let wp = MultiplierModel::well_posed2(&tensors, eps, grid).unwrap();
        (eb, t2, wp)
    }

    #[test]
    fn state_map_examples() {
        let grid = desk_grid();
        let (eb, t2, wp) = models(&grid, 0.125);
        let spec = desk_spec(&grid, AdmissibleSet::FullSpace);
        // u = -f gives the zero state under every model
        let u = spec.f.scale(-1.0);
        for m in [&eb, &t2, &wp] {
            let y = state_map(m, &u, &spec.f).unwrap();
            assert_eq!(y.parseval_norm(), 0.0);
        }
        // constant coefficient, single mode at eta0 = 0.5: y = 1/(1 + pi^2)
        let solver1 = BlochSolver::new(PeriodicCoefficient::constant(1, 1.0, 0.5).unwrap());
        let m1 = MultiplierModel::exact_bloch(&solver1, &grid, 0.125).unwrap();
        let mut fu = SpectralFunction::zeros(grid.clone());
        let i = grid.nodes().position(|n| n[0] == 0.5).unwrap();
        fu.coeffs_mut()[i] = Complex64::new(1.0, 0.0);
        let y = state_map(&m1, &SpectralFunction::zeros(grid.clone()), &fu).unwrap();
        assert_relative_eq!(
            y.coeffs()[i].re,
            1.0 / (1.0 + std::f64::consts::PI.powi(2)),
            max_relative = 1e-12
        );
        // a-priori bound ||y|| <= max_rho ||f + u||
        assert!(y.parseval_norm() <= m1.max_rho() * fu.parseval_norm() * (1.0 + 1e-12));
    }

    #[test]
    fn cost_trivial_cases() {
        let grid = desk_grid();
        let (eb, ..) = models(&grid, 0.125);
        let mut spec = desk_spec(&grid, AdmissibleSet::FullSpace);
        let zero = SpectralFunction::zeros(grid.clone());
        // all-zero data: J(0) = 0
        let empty = ControlProblemSpec {
            f: zero.clone(),
            yd1: zero.clone(),
            yd2: zero.clone(),
            ..spec.clone()
        };
        assert_eq!(cost(&eb, &zero, &empty).unwrap(), 0.0);
        // mu1 = mu2 = 0: J = kappa/2 ||u||^2
        spec.mu1 = 0.0;
        spec.mu2 = 0.0;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let u = SpectralFunction::random_hermitian(grid.clone(), &mut rng, 1.0, None);
        assert_relative_eq!(
            cost(&eb, &u, &spec).unwrap(),
            0.5 * u.parseval_norm().powi(2),
            max_relative = 1e-13
        );
        // and the optimum is u* = 0 regardless of f
        let sol = solve_unconstrained(&eb, &spec).unwrap();
        assert_eq!(sol.control.parseval_norm(), 0.0);
    }

    /// One-mode stationarity oracle: scan the scalar cost over a fine grid
    /// of control values, independently of the closed-form solver.
    fn one_mode_scan(model: &MultiplierModel, spec: &ControlProblemSpec, node: usize) -> f64 {
        let grid = model.grid().clone();
        let mut best = (f64::INFINITY, 0.0);
        for i in -40_000..=40_000 {
            let s = i as f64 * 2.5e-5; // [-1, 1]
            let mut u = SpectralFunction::zeros(grid.clone());
            u.coeffs_mut()[node] = Complex64::new(s, 0.0);
            let j = cost(model, &u, spec).unwrap();
            if j < best.0 {
                best = (j, s);
            }
        }
        best.1
    }

    #[test]
    fn one_mode_stationarity_matches_scan() {
        let grid = desk_grid();
        let zero_node = grid.zero_index();
        let solver1 = BlochSolver::new(PeriodicCoefficient::constant(1, 1.0, 0.5).unwrap());
        let m = MultiplierModel::exact_bloch(&solver1, &grid, 0.125).unwrap();
        let zeros = SpectralFunction::zeros(grid.clone());
        let mut yd1 = SpectralFunction::zeros(grid.clone());
        yd1.coeffs_mut()[zero_node] = Complex64::new(1.0, 0.0);
        let spec = ControlProblemSpec {
            mu1: 1.0,
            mu2: 0.0,
            kappa: 1.0,
            f: zeros.clone(),
            yd1,
            yd2: zeros.clone(),
            admissible: AdmissibleSet::FullSpace,
        };
        // rho(0) = 1: the stationary control is 1/(1 + rho) = 1/2
        let sol = solve_unconstrained(&m, &spec).unwrap();
        assert_relative_eq!(sol.control.coeffs()[zero_node].re, 0.5, max_relative = 1e-12);
        let scan = one_mode_scan(&m, &spec, zero_node);
        assert!((scan - 0.5).abs() < 5e-5, "scan found {scan}");

        // mu2 only: u* = rho/(1 + rho^2) at the zero node
        let mut yd2 = SpectralFunction::zeros(grid.clone());
        yd2.coeffs_mut()[zero_node] = Complex64::new(1.0, 0.0);
        let spec2 = ControlProblemSpec {
            mu1: 0.0,
            mu2: 1.0,
            kappa: 1.0,
            f: zeros.clone(),
            yd1: zeros.clone(),
            yd2,
            admissible: AdmissibleSet::FullSpace,
        };
        let sol2 = solve_unconstrained(&m, &spec2).unwrap();
        assert_relative_eq!(sol2.control.coeffs()[zero_node].re, 0.5, max_relative = 1e-12);
        let scan2 = one_mode_scan(&m, &spec2, zero_node);
        assert!((scan2 - 0.5).abs() < 5e-5);
    }

    #[test]
    fn gradient_matches_central_differences() {
        let grid = desk_grid();
        let (eb, t2, wp) = models(&grid, 0.125);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for model in [&eb, &t2, &wp] {
            for admissible in [
                AdmissibleSet::FullSpace,
                AdmissibleSet::ControlNormBall { level: 0.4 },
                AdmissibleSet::StateNormBall {
                    level: 0.5,
                    approximate: false,
                },
                AdmissibleSet::StateEnergyBall {
                    level: 0.6,
                    approximate: false,
                },
            ] {
                let spec = desk_spec(&grid, admissible);
                let u = SpectralFunction::random_hermitian(grid.clone(), &mut rng, 0.7, None);
                let v = SpectralFunction::random_hermitian(grid.clone(), &mut rng, 0.7, None);
                let t = if admissible.is_ball() { 0.7 } else { 0.0 };
                let shared = Some(&eb);
                let g = augmented_gradient(model, &u, &spec, t, shared).unwrap();
                let delta = 1e-6;
                let jp =
                    augmented_cost(model, &u.add(&v.scale(delta)).unwrap(), &spec, t, shared)
                        .unwrap();
                let jm =
                    augmented_cost(model, &u.sub(&v.scale(delta)).unwrap(), &spec, t, shared)
                        .unwrap();
                let fd = (jp - jm) / (2.0 * delta);
                let dir = g.inner(&v).unwrap().re;
                assert!(
                    (fd - dir).abs() <= 1e-6 * dir.abs().max(1.0),
                    "{} {:?}: fd {fd} vs dir {dir}",
                    model.label(),
                    admissible
                );
            }
        }
    }

    #[test]
    fn constrained_solve_inactive_equals_unconstrained() {
        let grid = desk_grid();
        let (eb, ..) = models(&grid, 0.125);
        let free = solve_unconstrained(&eb, &desk_spec(&grid, AdmissibleSet::FullSpace)).unwrap();
        let loose = desk_spec(
            &grid,
            AdmissibleSet::ControlNormBall {
                level: 10.0 * free.control.parseval_norm(),
            },
        );
        let sol = solve_constrained(&eb, &loose, None).unwrap();
        assert_eq!(sol.multiplier, 0.0);
        let d = sol.control.sub(&free.control).unwrap().parseval_norm();
        assert!(d < 1e-14);
    }

    #[test]
    fn constrained_solve_active_ball() {
        let grid = desk_grid();
        let (eb, ..) = models(&grid, 0.125);
        let free = solve_unconstrained(&eb, &desk_spec(&grid, AdmissibleSet::FullSpace)).unwrap();
        let level = 0.5 * free.control.parseval_norm();
        let spec = desk_spec(&grid, AdmissibleSet::ControlNormBall { level });
        let sol = solve_constrained(&eb, &spec, None).unwrap();
        assert!(sol.multiplier > 0.0);
        assert_relative_eq!(
            sol.control.parseval_norm(),
            level,
            max_relative = 1e-10
        );
        // independent dense scan over the multiplier
        let mut best = (f64::INFINITY, 0.0);
        for i in 0..4000 {
            let t = i as f64 * 1e-3;
            let u = augmented_minimizer(&eb, &spec, t, None).unwrap();
            let c = u.parseval_norm();
            if (c - level).abs() < best.0 {
                best = ((c - level).abs(), t);
            }
        }
        assert!(
            (best.1 - sol.multiplier).abs() < 2e-3,
            "scan multiplier {} vs solver {}",
            best.1,
            sol.multiplier
        );
        // KKT certificates
        assert!(sol.multiplier * (sol.constraint.unwrap() - level).abs() <= 1e-8);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let r = vi_residual(&eb, &sol.control, &spec, None, 64, &mut rng).unwrap();
        assert!(r >= -1e-8, "VI residual {r}");
    }

    #[test]
    fn state_and_energy_balls_solve_with_shared_symbol() {
        let grid = desk_grid();
        let (eb, t2, _) = models(&grid, 0.125);
        for adm in [
            AdmissibleSet::StateNormBall {
                level: 0.12,
                approximate: false,
            },
            AdmissibleSet::StateEnergyBall {
                level: 0.05,
                approximate: false,
            },
        ] {
            let spec = desk_spec(&grid, adm);
            // exact model uses its own symbol
            let s_eb = solve_constrained(&eb, &spec, None).unwrap();
            // effective model needs the shared exact symbol
            assert!(solve_constrained(&t2, &spec, None).is_err());
            let s_t2 = solve_constrained(&t2, &spec, Some(&eb)).unwrap();
            for s in [&s_eb, &s_t2] {
                let c = s.constraint.unwrap();
                let l = spec.admissible.level().unwrap();
                assert!(c <= l * (1.0 + 1e-9), "constraint {c} vs level {l}");
                assert!(s.multiplier * (c - l).abs() <= 1e-8);
            }
            // both are close (effective symbol differs at O(eps^2))
            let d = s_eb.control.sub(&s_t2.control).unwrap().parseval_norm();
            assert!(d < 1e-3, "models differ by {d}");
        }
    }

    #[test]
    fn approximate_set_flag_uses_model_symbol() {
        let grid = desk_grid();
        let (eb, t2, _) = models(&grid, 0.125);
        let spec = desk_spec(
            &grid,
            AdmissibleSet::StateNormBall {
                level: 0.12,
                approximate: true,
            },
        );
        // no shared model needed now
        let sol = solve_constrained(&t2, &spec, None).unwrap();
        assert!(sol.constraint.unwrap() <= 0.12 * (1.0 + 1e-9));
        let _ = eb;
    }

    #[test]
    fn adjoint_identities() {
        let grid = desk_grid();
        let (eb, ..) = models(&grid, 0.125);
        let spec = desk_spec(&grid, AdmissibleSet::FullSpace);
        // mu1 = mu2 = 0 -> p = 0
        let mut s0 = spec.clone();
        s0.mu1 = 0.0;
        s0.mu2 = 0.0;
        let y = state_map(&eb, &SpectralFunction::zeros(grid.clone()), &spec.f).unwrap();
        assert_eq!(adjoint_state(&eb, &y, &s0).unwrap().parseval_norm(), 0.0);
        // y = yd1 = yd2 -> p = 0
        let mut s1 = spec.clone();
        s1.yd1 = y.clone();
        s1.yd2 = y.clone();
        assert!(adjoint_state(&eb, &y, &s1).unwrap().parseval_norm() < 1e-15);
        // full-space optimality: p + kappa u = 0
        let sol = solve_unconstrained(&eb, &spec).unwrap();
        let resid = sol
            .adjoint
            .add(&sol.control.scale(spec.kappa))
            .unwrap()
            .parseval_norm();
        assert!(resid <= 1e-10 * sol.control.parseval_norm().max(1.0), "{resid}");
    }

    #[test]
    fn vi_residual_detects_suboptimality() {
        let grid = desk_grid();
        let (eb, ..) = models(&grid, 0.125);
        let spec = desk_spec(&grid, AdmissibleSet::FullSpace);
        let sol = solve_unconstrained(&eb, &spec).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let r = vi_residual(&eb, &sol.control, &spec, None, 32, &mut rng).unwrap();
        assert!(r >= -1e-10, "optimal VI residual {r}");
        // perturbed control admits descent directions
        let z = SpectralFunction::random_hermitian(grid.clone(), &mut rng, 0.1, None);
        let u_bad = sol.control.add(&z).unwrap();
        let r_bad = vi_residual(&eb, &u_bad, &spec, None, 32, &mut rng).unwrap();
        assert!(r_bad < 0.0, "perturbed VI residual {r_bad}");
    }

    #[test]
    fn taylor_model_refused_beyond_threshold() {
        let grid = desk_grid();
        let solver = BlochSolver::new(PeriodicCoefficient::cosine_1d());
        let tensors = taylor_tensors(&solver, 4, 0.1).unwrap();
        let th = epsilon_threshold(&tensors, 2, grid.k_box())
            .unwrap()
            .certified()
            .value();
        let err = MultiplierModel::taylor_effective(&tensors, 2, 1.1 * th, &grid);
        assert!(matches!(err, Err(CoreError::ThresholdExceeded { .. })));
        // the well-posed model accepts the same eps
        assert!(MultiplierModel::well_posed2(&tensors, 1.1 * th, &grid).is_ok());
    }

    #[test]
    fn exact_model_rho_in_unit_interval() {
        let grid = desk_grid();
        let (eb, ..) = models(&grid, 0.125);
        assert!(eb.rho().iter().all(|r| *r > 0.0 && *r <= 1.0));
        assert!(eb.max_rho() <= 1.0);
    }
}
