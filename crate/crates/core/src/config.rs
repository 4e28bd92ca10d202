//! TOML configuration schema and conversion into runtime objects.
//!
//! A single config file drives every CLI subcommand; sections that a
//! subcommand does not need may be omitted. See the shipped files under
//! `configs/` for complete examples.

use std::path::Path;
use std::sync::Arc;

use num_complex::Complex64;
use serde::Deserialize;

use crate::cell::{BlochSolver, PlaneWaveTruncation};
use crate::coeff::{CoeffMatrix, MultiIndex, PeriodicCoefficient};
use crate::control::{AdmissibleSet, ControlProblemSpec};
use crate::error::{CoreError, Result};
use crate::grid::{CompactBox, SpectralGrid};
use crate::signal::{Profile, SpectralFunction};
use crate::study::StudySetup;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub coefficient: CoefficientCfg,
    pub grid: GridCfg,
    #[serde(default)]
    pub spectral: SpectralCfg,
    pub problem: Option<ProblemCfg>,
    pub tensors: Option<TensorsCfg>,
    pub study: Option<StudyCfg>,
    pub solve: Option<SolveCfg>,
    pub band: Option<BandCfg>,
    pub oracle: Option<OracleCfg>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoefficientCfg {
    #[serde(rename = "type")]
    pub kind: String,
    #[serde(default = "default_dim")]
    pub dimension: usize,
    pub ellipticity: f64,
    /// constant
    pub value: Option<f64>,
    /// laminate
    pub breakpoints: Option<Vec<f64>>,
    pub values: Option<Vec<f64>>,
    /// fourier
    #[serde(default)]
    pub modes: Vec<ModeCfg>,
}

fn default_dim() -> usize {
    1
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModeCfg {
    pub k: Vec<i32>,
    /// scalar entry: re + i im times the identity
    pub re: Option<f64>,
    #[serde(default)]
    pub im: f64,
    /// full matrix entries (row-major), real and imaginary parts
    pub matrix_re: Option<Vec<Vec<f64>>>,
    pub matrix_im: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct SpectralCfg {
    /// Plane-wave half-bandwidth; default per dimension when absent.
    pub n_pw: Option<i32>,
    /// Probe-and-double the truncation at construction.
    #[serde(default)]
    pub auto_tune: bool,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridCfg {
    pub half_width: Vec<f64>,
    pub delta_eta: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemCfg {
    pub mu1: f64,
    pub mu2: f64,
    pub kappa: f64,
    pub admissible: AdmissibleCfg,
    pub f: Vec<ProfileCfg>,
    pub yd1: Vec<ProfileCfg>,
    pub yd2: Vec<ProfileCfg>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdmissibleCfg {
    pub kind: String,
    pub level: Option<f64>,
    #[serde(default)]
    pub approximate_set: bool,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileCfg {
    pub profile: String,
    /// gauss
    pub center: Option<Vec<f64>>,
    pub width: Option<f64>,
    pub amp: Option<f64>,
    /// mode
    pub eta: Option<Vec<f64>>,
    pub amp_re: Option<f64>,
    pub amp_im: Option<f64>,
    /// table
    pub entries: Option<Vec<TableEntryCfg>>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TableEntryCfg {
    pub eta: Vec<f64>,
    pub re: f64,
    #[serde(default)]
    pub im: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorsCfg {
    pub order: usize,
    #[serde(default = "default_stencil")]
    pub stencil_h: f64,
}

fn default_stencil() -> f64 {
    0.1
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyCfg {
    pub orders: Vec<usize>,
    #[serde(default)]
    pub include_well_posed: bool,
    pub eps: Vec<f64>,
    #[serde(default = "default_probes")]
    pub vi_probes: usize,
}

fn default_probes() -> usize {
    16
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolveCfg {
    pub model: String,
    pub order: Option<usize>,
    pub eps: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BandCfg {
    #[serde(default = "default_band_count")]
    pub count: usize,
    #[serde(default)]
    pub m_max: usize,
}

fn default_band_count() -> usize {
    33
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleCfg {
    pub eps: f64,
    pub mesh: Vec<usize>,
}

impl Config {
    pub fn from_path(path: &Path) -> Result<Config> {
        let text = std::fs::read_to_string(path)?;
        Self::from_str(&text)
    }

    #[allow(clippy::should_implement_trait)]
    pub fn from_str(text: &str) -> Result<Config> {
        toml::from_str(text).map_err(|e| CoreError::Config(e.to_string()))
    }

    pub fn build_coefficient(&self) -> Result<PeriodicCoefficient> {
        let c = &self.coefficient;
        match c.kind.as_str() {
            "constant" => {
                let v = c
                    .value
                    .ok_or_else(|| CoreError::Config("constant coefficient needs `value`".into()))?;
                PeriodicCoefficient::constant(c.dimension, v, c.ellipticity)
            }
            "laminate" => {
                let breaks = c
                    .breakpoints
                    .clone()
                    .ok_or_else(|| CoreError::Config("laminate needs `breakpoints`".into()))?;
                let values = c
                    .values
                    .clone()
                    .ok_or_else(|| CoreError::Config("laminate needs `values`".into()))?;
                PeriodicCoefficient::laminate(breaks, values, c.ellipticity)
            }
            "fourier" => {
                let mut modes = Vec::with_capacity(c.modes.len());
                for m in &c.modes {
                    if m.k.len() != c.dimension {
                        return Err(CoreError::Config(format!(
                            "mode index {:?} does not match dimension {}",
                            m.k, c.dimension
                        )));
                    }
                    let mut k: MultiIndex = [0, 0];
                    for (i, v) in m.k.iter().enumerate() {
                        k[i] = *v;
                    }
                    let mat = if let Some(re) = m.re {
                        CoeffMatrix::scalar(Complex64::new(re, m.im))
                    } else if let Some(rows) = &m.matrix_re {
                        let zeros = vec![vec![0.0; c.dimension]; c.dimension];
                        let ims = m.matrix_im.as_ref().unwrap_or(&zeros);
                        let mut mat = CoeffMatrix::zero();
                        for i in 0..c.dimension {
                            for j in 0..c.dimension {
                                mat.entries[i][j] = Complex64::new(rows[i][j], ims[i][j]);
                            }
                        }
                        mat
                    } else {
                        return Err(CoreError::Config(format!(
                            "mode {:?} needs `re` or `matrix_re`",
                            m.k
                        )));
                    };
                    modes.push((k, mat));
                }
                PeriodicCoefficient::fourier(c.dimension, modes, c.ellipticity)
            }
            other => Err(CoreError::Config(format!("unknown coefficient type `{other}`"))),
        }
    }

    pub fn build_solver(&self) -> Result<Arc<BlochSolver>> {
        let coeff = self.build_coefficient()?;
        let solver = if let Some(n) = self.spectral.n_pw {
            BlochSolver::with_truncation(
                coeff,
                PlaneWaveTruncation::new(self.coefficient.dimension, n)?,
            )?
        } else if self.spectral.auto_tune {
            let probe = vec![0.25; self.coefficient.dimension];
            BlochSolver::auto_tuned(coeff, &probe)?
        } else {
            BlochSolver::new(coeff)
        };
        Ok(Arc::new(solver))
    }

    /// Grid over K; all eps values that any configured command will use are
    /// validated for commensurability up front.
    pub fn build_grid(&self) -> Result<Arc<SpectralGrid>> {
        let mut eps_list: Vec<f64> = Vec::new();
        if let Some(s) = &self.study {
            eps_list.extend(&s.eps);
        }
        if let Some(s) = &self.solve {
            eps_list.push(s.eps);
        }
        if let Some(o) = &self.oracle {
            eps_list.push(o.eps);
        }
        SpectralGrid::make(
            CompactBox::new(self.grid.half_width.clone())?,
            self.grid.delta_eta,
            &eps_list,
        )
    }

    pub fn build_profiles(list: &[ProfileCfg]) -> Result<Vec<Profile>> {
        list.iter()
            .map(|p| match p.profile.as_str() {
                "gauss" => Ok(Profile::Gauss {
                    center: p
                        .center
                        .clone()
                        .ok_or_else(|| CoreError::Config("gauss needs `center`".into()))?,
                    width: p
                        .width
                        .ok_or_else(|| CoreError::Config("gauss needs `width`".into()))?,
                    amp: p
                        .amp
                        .ok_or_else(|| CoreError::Config("gauss needs `amp`".into()))?,
                }),
                "mode" => Ok(Profile::Mode {
                    eta: p
                        .eta
                        .clone()
                        .ok_or_else(|| CoreError::Config("mode needs `eta`".into()))?,
                    amp: Complex64::new(p.amp_re.unwrap_or(0.0), p.amp_im.unwrap_or(0.0)),
                }),
                "table" => Ok(Profile::Table {
                    entries: p
                        .entries
                        .clone()
                        .ok_or_else(|| CoreError::Config("table needs `entries`".into()))?
                        .into_iter()
                        .map(|e| (e.eta, Complex64::new(e.re, e.im)))
                        .collect(),
                }),
                other => Err(CoreError::Config(format!("unknown profile `{other}`"))),
            })
            .collect()
    }

    pub fn build_problem(&self, grid: &Arc<SpectralGrid>) -> Result<ControlProblemSpec> {
        let p = self
            .problem
            .as_ref()
            .ok_or_else(|| CoreError::Config("missing [problem] section".into()))?;
        let admissible = match p.admissible.kind.as_str() {
            "full" => AdmissibleSet::FullSpace,
            kind => {
                let level = p.admissible.level.ok_or_else(|| {
                    CoreError::Config("ball admissible sets need `level`".into())
                })?;
                match kind {
                    "control_norm" => AdmissibleSet::ControlNormBall { level },
                    "state_norm" => AdmissibleSet::StateNormBall {
                        level,
                        approximate: p.admissible.approximate_set,
                    },
                    "state_energy" => AdmissibleSet::StateEnergyBall {
                        level,
                        approximate: p.admissible.approximate_set,
                    },
                    other => {
                        return Err(CoreError::Config(format!(
                            "unknown admissible set `{other}`"
                        )))
                    }
                }
            }
        };
        let make = |list: &[ProfileCfg]| -> Result<SpectralFunction> {
            SpectralFunction::from_profiles(grid.clone(), &Self::build_profiles(list)?, None)
        };
        let spec = ControlProblemSpec {
            mu1: p.mu1,
            mu2: p.mu2,
            kappa: p.kappa,
            f: make(&p.f)?,
            yd1: make(&p.yd1)?,
            yd2: make(&p.yd2)?,
            admissible,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn build_study_setup(&self, seed: u64) -> Result<StudySetup> {
        let s = self
            .study
            .as_ref()
            .ok_or_else(|| CoreError::Config("missing [study] section".into()))?;
        let t = self
            .tensors
            .as_ref()
            .ok_or_else(|| CoreError::Config("missing [tensors] section".into()))?;
        let solver = self.build_solver()?;
        let grid = self.build_grid()?;
        let tensors = crate::effective::taylor_tensors(&solver, t.order, t.stencil_h)?;
        let spec = self.build_problem(&grid)?;
        for &m in &s.orders {
            if m > tensors.order {
                return Err(CoreError::Config(format!(
                    "study order {m} exceeds extracted tensor order {}",
                    tensors.order
                )));
            }
        }
        Ok(StudySetup {
            solver,
            grid,
            tensors,
            spec,
            orders: s.orders.clone(),
            include_well_posed: s.include_well_posed,
            eps_list: s.eps.clone(),
            seed,
            vi_probes: s.vi_probes,
        })
    }

    /// Uniform symmetric band grid over Z with `count` (odd) nodes.
    pub fn band_grid(&self) -> Result<Vec<Vec<f64>>> {
        let b = self.band.clone().unwrap_or(BandCfg {
            count: default_band_count(),
            m_max: 0,
        });
        if b.count < 3 || b.count % 2 == 0 {
            return Err(CoreError::Config("band count must be odd and >= 3".into()));
        }
        let half = (b.count / 2) as i64;
        let dim = self.coefficient.dimension;
        let step = 1.0 / b.count as f64;
        let mut nodes = Vec::with_capacity(b.count);
        for j in -half..=half {
            // 1D path along the first axis; 2D bands scan the diagonal
            let mut eta = vec![0.0; dim];
            for e in eta.iter_mut() {
                *e = j as f64 * step;
            }
            nodes.push(eta);
        }
        Ok(nodes)
    }
}
