//! Convergence-rate studies over a dyadic eps sweep.
//!
//! For every eps the exact-Bloch, order-M effective, and (optionally)
//! well-posed problems are solved on identical data; the Parseval-norm
//! errors of control, state and adjoint against the exact-Bloch solution
//! are fitted on log-log axes, and each fitted slope is compared against
//! its theoretical order minus a 0.2 margin (constants in the bounds are
//! unknown, so only the exponent is testable).

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::cell::BlochSolver;
use crate::control::{
    solve, vi_residual, ControlProblemSpec, MultiplierModel, OptimalSolution,
};
use crate::effective::{epsilon_threshold, EffectiveTensors, EpsilonThreshold};
use crate::error::{CoreError, Result};
use crate::grid::SpectralGrid;

/// Errors below this are double-precision noise and are dropped from fits.
pub const ERROR_FLOOR: f64 = 1e-13;
/// An entry whose errors all sit below this is reported as degenerate
/// (exact agreement) instead of being rate-fitted.
pub const DEGENERATE_FLOOR: f64 = 1e-12;
/// Slope acceptance margin below the theoretical order.
pub const SLOPE_MARGIN: f64 = 0.2;

/// Compared quantities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Quantity {
    Control,
    State,
    Adjoint,
}

impl Quantity {
    pub const ALL: [Quantity; 3] = [Quantity::Control, Quantity::State, Quantity::Adjoint];

    pub fn name(&self) -> &'static str {
        match self {
            Quantity::Control => "control",
            Quantity::State => "state",
            Quantity::Adjoint => "adjoint",
        }
    }
}

/// One (quantity, model) rate entry.
#[derive(Debug, Clone, Serialize)]
pub struct RateEntry {
    pub quantity: Quantity,
    /// Model label ("taylor_m2", "well_posed2", ...).
    pub model: String,
    /// Taylor order when applicable (the rates CSV "M" column).
    pub order: Option<usize>,
    /// (eps, error) pairs, eps descending.
    pub points: Vec<(f64, f64)>,
    pub slope: Option<f64>,
    pub r_squared: Option<f64>,
    pub target: f64,
    pub dropped: usize,
    pub degenerate: bool,
    pub pass: bool,
}

/// Outcome of a full study.
#[derive(Debug, Clone, Serialize)]
pub struct RateReport {
    pub entries: Vec<RateEntry>,
    pub thresholds: BTreeMap<String, EpsilonThreshold>,
    pub seed: u64,
    pub all_pass: bool,
}

/// Least-squares slope of log2(error) against log2(eps). Pairs with error
/// below `ERROR_FLOOR` are dropped; the number of dropped points is
/// returned alongside (slope, R^2).
pub fn fit_rate(pairs: &[(f64, f64)]) -> Result<(f64, f64, usize)> {
    if pairs.len() < 2 {
        return Err(CoreError::RateFit("need at least two points".into()));
    }
    if pairs.iter().any(|(e, v)| *e <= 0.0 || *v < 0.0) {
        return Err(CoreError::RateFit("eps and errors must be positive".into()));
    }
    let kept: Vec<(f64, f64)> = pairs
        .iter()
        .filter(|(_, v)| *v >= ERROR_FLOOR)
        .cloned()
        .collect();
    let dropped = pairs.len() - kept.len();
    if kept.len() < 2 {
        return Err(CoreError::RateFit(format!(
            "all but {} points below the {ERROR_FLOOR:.0e} floor",
            kept.len()
        )));
    }
    let xs: Vec<f64> = kept.iter().map(|(e, _)| e.log2()).collect();
    let ys: Vec<f64> = kept.iter().map(|(_, v)| v.log2()).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    if sxx == 0.0 {
        return Err(CoreError::RateFit("all eps values coincide".into()));
    }
    let slope = sxy / sxx;
    let syy: f64 = ys.iter().map(|y| (y - my) * (y - my)).sum();
    let r2 = if syy == 0.0 { 1.0 } else { (sxy * sxy) / (sxx * syy) };
    Ok((slope, r2, dropped))
}

/// Everything a study needs, already in runtime form.
pub struct StudySetup {
    pub solver: Arc<BlochSolver>,
    pub grid: Arc<SpectralGrid>,
    pub tensors: EffectiveTensors,
    /// Template problem; the admissible set applies to every model.
    pub spec: ControlProblemSpec,
    /// Taylor orders to compare against the exact-Bloch solution.
    pub orders: Vec<usize>,
    pub include_well_posed: bool,
    /// Dyadic eps sweep (validated up front).
    pub eps_list: Vec<f64>,
    pub seed: u64,
    /// Random feasible probes of the variational inequality per solve.
    pub vi_probes: usize,
}

struct SolveSet {
    eps: f64,
    exact: OptimalSolution,
    others: Vec<(String, Option<usize>, OptimalSolution)>,
}

/// Run the sweep, validate per-solve certificates, and fit the rates.
pub fn run_study(setup: &StudySetup) -> Result<RateReport> {
    setup.spec.validate()?;
    if setup.eps_list.len() < 2 {
        return Err(CoreError::InvalidSpec(
            "the eps sweep needs at least two values".into(),
        ));
    }
    // up-front validation: commensurability and thresholds
    let mut thresholds = BTreeMap::new();
    for &eps in &setup.eps_list {
        setup.grid.validate_eps(eps)?;
    }
    for &m in &setup.orders {
        let th = epsilon_threshold(&setup.tensors, m, setup.grid.k_box())?;
        let cert = th.certified().value();
        for &eps in &setup.eps_list {
            if eps >= cert {
                return Err(CoreError::ThresholdExceeded {
                    eps,
                    threshold: cert,
                    order: m,
                });
            }
        }
        thresholds.insert(format!("taylor_m{m}"), th);
    }

    let sets: Vec<SolveSet> = setup
        .eps_list
        .par_iter()
        .enumerate()
        .map(|(i, &eps)| solve_at(setup, i, eps))
        .collect::<Result<_>>()?;

    let mut entries = Vec::new();
    for (label, order) in model_labels(setup) {
        for quantity in Quantity::ALL {
            let mut points = Vec::with_capacity(sets.len());
            for s in &sets {
                let (_, _, sol) = s
                    .others
                    .iter()
                    .find(|(l, ..)| *l == label)
                    .expect("every eps solves every model");
                let err = match quantity {
                    Quantity::Control => sol.control.sub(&s.exact.control),
                    Quantity::State => sol.state.sub(&s.exact.state),
                    Quantity::Adjoint => sol.adjoint.sub(&s.exact.adjoint),
                }?
                .parseval_norm();
                points.push((s.eps, err));
            }
            let target = match order {
                Some(m) => 2.0 * m as f64 - SLOPE_MARGIN,
                None => 4.0 - SLOPE_MARGIN,
            };
            let degenerate = points.iter().all(|(_, v)| *v < DEGENERATE_FLOOR);
            let entry = if degenerate {
                RateEntry {
                    quantity,
                    model: label.clone(),
                    order,
                    points,
                    slope: None,
                    r_squared: None,
                    target,
                    dropped: 0,
                    degenerate: true,
                    pass: true,
                }
            } else {
                let (slope, r2, dropped) = fit_rate(&points)?;
                RateEntry {
                    quantity,
                    model: label.clone(),
                    order,
                    points,
                    slope: Some(slope),
                    r_squared: Some(r2),
                    target,
                    dropped,
                    degenerate: false,
                    pass: slope >= target,
                }
            };
            entries.push(entry);
        }
    }
    let all_pass = entries.iter().all(|e| e.pass);
    Ok(RateReport {
        entries,
        thresholds,
        seed: setup.seed,
        all_pass,
    })
}

fn model_labels(setup: &StudySetup) -> Vec<(String, Option<usize>)> {
    let mut labels: Vec<(String, Option<usize>)> = setup
        .orders
        .iter()
        .map(|m| (format!("taylor_m{m}"), Some(*m)))
        .collect();
    if setup.include_well_posed {
        labels.push(("well_posed2".into(), None));
    }
    labels
}

fn solve_at(setup: &StudySetup, index: usize, eps: f64) -> Result<SolveSet> {
    let exact_model = MultiplierModel::exact_bloch(&setup.solver, &setup.grid, eps)?;
    let exact = solve(&exact_model, &setup.spec, None).map_err(|e| annotate(e, eps))?;
    validate_solution(setup, &exact_model, &exact, None, index, 0)?;
    let mut others = Vec::new();
    let mut midx = 1usize;
    for &m in &setup.orders {
        let model = MultiplierModel::taylor_effective(&setup.tensors, m, eps, &setup.grid)?;
        let sol = solve(&model, &setup.spec, Some(&exact_model)).map_err(|e| annotate(e, eps))?;
        validate_solution(setup, &model, &sol, Some(&exact_model), index, midx)?;
        others.push((model.label(), Some(m), sol));
        midx += 1;
    }
    if setup.include_well_posed {
        let model = MultiplierModel::well_posed2(&setup.tensors, eps, &setup.grid)?;
        let sol = solve(&model, &setup.spec, Some(&exact_model)).map_err(|e| annotate(e, eps))?;
        validate_solution(setup, &model, &sol, Some(&exact_model), index, midx)?;
        others.push((model.label(), None, sol));
    }
    Ok(SolveSet { eps, exact, others })
}

fn annotate(e: CoreError, eps: f64) -> CoreError {
    CoreError::InvalidSpec(format!("eps = {eps}: {e}"))
}

/// Per-solve certificates: complementary slackness (already enforced by the
/// solver), feasibility, and the variational inequality on seeded probes.
fn validate_solution(
    setup: &StudySetup,
    model: &MultiplierModel,
    sol: &OptimalSolution,
    shared: Option<&MultiplierModel>,
    eps_index: usize,
    model_index: usize,
) -> Result<()> {
    if let (Some(c), Some(l)) = (sol.constraint, setup.spec.admissible.level()) {
        if c > l + 1e-8 * l.max(1.0) {
            return Err(CoreError::InvariantViolation(format!(
                "{}: infeasible optimum (constraint {c} > level {l})",
                model.label()
            )));
        }
        if sol.multiplier * (c - l).abs() > 1e-8 * l.max(1.0) {
            return Err(CoreError::InvariantViolation(format!(
                "{}: complementary slackness violated",
                model.label()
            )));
        }
    }
    if setup.vi_probes > 0 {
        let stream = (eps_index as u64) << 8 | model_index as u64;
        let mut rng = ChaCha8Rng::seed_from_u64(setup.seed ^ (0x9e37_79b9_7f4a_7c15 ^ stream));
        let r = vi_residual(
            model,
            &sol.control,
            &setup.spec,
            shared,
            setup.vi_probes,
            &mut rng,
        )?;
        if r < -1e-8 {
            return Err(CoreError::InvariantViolation(format!(
                "{}: variational inequality violated (residual {r:.3e})",
                model.label()
            )));
        }
    }
    Ok(())
}
