//! Scenario configuration: JSON schema with embedded defaults, validation
//! with field-level diagnostics, and construction of the model and truth
//! ensemble it describes.

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::correction::Solver;
use crate::dynamics::{LinearSystem, Model, NonlinearSystem, ParticleEnsemble};
use crate::error::{Error, Result};
use crate::rng::stream;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Estimate,
    EstimateDiscrete,
    Observe,
    TrackDiscrete,
}

/// Mirror of [`Solver`] for clap's value-enum parsing.
#[derive(Clone, Copy, Debug, clap::ValueEnum)]
pub enum SolverArg {
    Exact,
    Sinkhorn,
}

impl From<SolverArg> for Solver {
    fn from(s: SolverArg) -> Self {
        match s {
            SolverArg::Exact => Solver::Exact,
            SolverArg::Sinkhorn => Solver::Sinkhorn,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum SystemSpec {
    /// Explicit system matrix and single output row.
    Linear { a: Vec<Vec<f64>>, c: Vec<f64> },
    HarmonicOscillator,
    DoubleIntegrator,
    /// Planar oscillator with a quadratic softening term; `step` is the
    /// integrator step size.
    QuadraticOscillator { step: f64 },
}

impl SystemSpec {
    pub fn build(&self) -> Result<Model> {
        match self {
            SystemSpec::Linear { a, c } => {
                let n = a.len();
                if n == 0 || a.iter().any(|row| row.len() != n) {
                    return Err(Error::config("system.a must be square and nonempty"));
                }
                if c.len() != n {
                    return Err(Error::config(format!(
                        "system.c has {} entries for an {n}-dimensional system",
                        c.len()
                    )));
                }
                let a = DMatrix::from_row_iterator(n, n, a.iter().flatten().copied());
                let c = DMatrix::from_row_iterator(1, n, c.iter().copied());
                Ok(Model::Linear(LinearSystem::new(a, c)?))
            }
            SystemSpec::HarmonicOscillator => {
                Ok(Model::Linear(LinearSystem::harmonic_oscillator()))
            }
            SystemSpec::DoubleIntegrator => Ok(Model::Linear(LinearSystem::double_integrator())),
            SystemSpec::QuadraticOscillator { step } => {
                if !(*step > 0.0) {
                    return Err(Error::config(format!("integrator step {step}")));
                }
                Ok(Model::Nonlinear(NonlinearSystem::quadratic_oscillator(
                    *step,
                )))
            }
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            SystemSpec::Linear { a, .. } => a.len(),
            _ => 2,
        }
    }
}

/// Axis-aligned prior region for observer initialization.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitBox {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureComponent {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub cov: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureSpec {
    pub components: Vec<MixtureComponent>,
}

impl MixtureSpec {
    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.components.is_empty() {
            return Err(Error::config("truth.components must be nonempty"));
        }
        let total: f64 = self.components.iter().map(|c| c.weight).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::config(format!(
                "truth mixture weights sum to {total}, expected 1"
            )));
        }
        for (k, comp) in self.components.iter().enumerate() {
            if !(comp.weight > 0.0) {
                return Err(Error::config(format!(
                    "truth.components[{k}].weight = {}",
                    comp.weight
                )));
            }
            if comp.mean.len() != dim {
                return Err(Error::config(format!(
                    "truth.components[{k}].mean has {} entries for dimension {dim}",
                    comp.mean.len()
                )));
            }
            if comp.cov.len() != dim || comp.cov.iter().any(|r| r.len() != dim) {
                return Err(Error::config(format!(
                    "truth.components[{k}].cov must be {dim}x{dim}"
                )));
            }
            let m = DMatrix::from_row_iterator(dim, dim, comp.cov.iter().flatten().copied());
            if (&m - m.transpose()).abs().max() > 1e-9 {
                return Err(Error::config(format!(
                    "truth.components[{k}].cov is not symmetric"
                )));
            }
            if m.cholesky().is_none() {
                return Err(Error::config(format!(
                    "truth.components[{k}].cov is not positive definite"
                )));
            }
        }
        Ok(())
    }

    /// Draws n particles at `time`; component choice and Gaussian draws share
    /// one seeded stream.
    pub fn sample(&self, n: usize, dim: usize, seed: u64, time: f64) -> Result<ParticleEnsemble> {
        self.validate(dim)?;
        let factors: Vec<(DVector<f64>, DMatrix<f64>)> = self
            .components
            .iter()
            .map(|c| {
                let mean = DVector::from_vec(c.mean.clone());
                let cov = DMatrix::from_row_iterator(dim, dim, c.cov.iter().flatten().copied());
                let chol = cov.cholesky().expect("validated above").l();
                (mean, chol)
            })
            .collect();
        let mut rng = stream(seed, &[0x7472_7574_68]);
        let particles = (0..n)
            .map(|_| {
                let mut u: f64 = rng.random_range(0.0..1.0);
                let mut pick = factors.len() - 1;
                for (k, comp) in self.components.iter().enumerate() {
                    if u < comp.weight {
                        pick = k;
                        break;
                    }
                    u -= comp.weight;
                }
                let z = DVector::from_iterator(
                    dim,
                    (0..dim).map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal)),
                );
                &factors[pick].0 + &factors[pick].1 * z
            })
            .collect();
        ParticleEnsemble::new(particles, time)
    }
}

fn default_particles() -> usize {
    2000
}
fn default_bins() -> usize {
    50
}
fn default_sweeps() -> usize {
    2
}
fn default_k_times() -> usize {
    10
}
fn default_dt() -> f64 {
    0.5
}
fn default_spacing() -> f64 {
    0.1
}
fn default_relaxation() -> f64 {
    1.0
}
fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}
fn default_solver() -> Solver {
    Solver::Exact
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub scenario: String,
    pub mode: Mode,
    pub system: SystemSpec,
    /// Gaussian mixture the truth population is drawn from. Give exactly one
    /// of `truth` and `truth_states`.
    #[serde(default)]
    pub truth: Option<MixtureSpec>,
    /// Exact truth states, one per agent; pins the population size.
    #[serde(default)]
    pub truth_states: Option<Vec<Vec<f64>>>,
    /// Uniform prior box the estimate starts from. Without it the first
    /// available measurements are backprojected into a starting region.
    #[serde(default)]
    pub init_box: Option<InitBox>,
    #[serde(default = "default_particles")]
    pub particles: usize,
    /// Output samples per snapshot; defaults to the particle count.
    #[serde(default)]
    pub samples_per_snapshot: Option<usize>,
    #[serde(default = "default_bins")]
    pub bins: usize,
    #[serde(default = "default_sweeps")]
    pub sweeps: usize,
    /// Moving-horizon length; unused in batch modes.
    #[serde(default)]
    pub horizon: f64,
    #[serde(default = "default_k_times")]
    pub k_times: usize,
    /// Prediction step for the moving-horizon modes.
    #[serde(default = "default_dt")]
    pub dt: f64,
    /// Number of prediction steps.
    #[serde(default)]
    pub steps: usize,
    /// Measurement grid spacing for the moving-horizon modes.
    #[serde(default = "default_spacing")]
    pub snapshot_spacing: f64,
    /// How far before t = 0 the measurement grid starts.
    #[serde(default)]
    pub warmup: f64,
    /// Snapshots stamped within this many grid ticks of a prediction time are
    /// withheld until after that step, so the pool only holds strictly older
    /// measurements.
    #[serde(default)]
    pub measurement_lag: usize,
    /// Explicit measurement times for the batch modes.
    #[serde(default)]
    pub snapshot_times: Option<Vec<f64>>,
    #[serde(default)]
    pub noise_sigma: f64,
    #[serde(default = "default_solver")]
    pub solver: Solver,
    #[serde(default = "default_relaxation")]
    pub relaxation: f64,
    /// Track a seeded subsample of this fraction of the population
    /// (discrete tracking only).
    #[serde(default)]
    pub subsample_fraction: Option<f64>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
}

impl ScenarioConfig {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text)
            .map_err(|e| Error::config(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::config(e.to_string()))
    }

    pub fn samples(&self) -> usize {
        self.samples_per_snapshot.unwrap_or(self.particles)
    }

    pub fn validate(&self) -> Result<()> {
        if self.scenario.is_empty() {
            return Err(Error::config("scenario id must be nonempty"));
        }
        let dim = self.system.dim();
        self.system.build()?;
        match (&self.truth, &self.truth_states) {
            (Some(mix), None) => mix.validate(dim)?,
            (None, Some(states)) => {
                if states.is_empty() {
                    return Err(Error::config("truth_states must be nonempty when given"));
                }
                if let Some(s) = states.iter().find(|s| s.len() != dim) {
                    return Err(Error::config(format!(
                        "truth_states entry has {} coordinates for dimension {dim}",
                        s.len()
                    )));
                }
            }
            (Some(_), Some(_)) => {
                return Err(Error::config("give either truth or truth_states, not both"))
            }
            (None, None) => return Err(Error::config("give truth or truth_states")),
        }
        if self.particles == 0 || self.bins == 0 || self.sweeps == 0 || self.k_times == 0 {
            return Err(Error::config(
                "particles, bins, sweeps and k_times must all be >= 1",
            ));
        }
        if self.samples() == 0 {
            return Err(Error::config("samples_per_snapshot must be >= 1"));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::config(format!("noise_sigma {}", self.noise_sigma)));
        }
        match self.mode {
            Mode::Estimate | Mode::EstimateDiscrete => {
                let times = self
                    .snapshot_times
                    .as_ref()
                    .ok_or_else(|| Error::config("batch modes need snapshot_times"))?;
                if times.is_empty() {
                    return Err(Error::config("snapshot_times must be nonempty"));
                }
            }
            Mode::Observe | Mode::TrackDiscrete => {
                if !(self.horizon > 0.0) {
                    return Err(Error::config(format!("horizon {}", self.horizon)));
                }
                if !(self.dt > 0.0) || !(self.snapshot_spacing > 0.0) {
                    return Err(Error::config(
                        "dt and snapshot_spacing must be positive",
                    ));
                }
                if self.steps == 0 {
                    return Err(Error::config("steps must be >= 1"));
                }
                if self.dt + 1e-12 < self.snapshot_spacing {
                    return Err(Error::config(
                        "dt must be at least snapshot_spacing so every step sees a fresh snapshot",
                    ));
                }
                if !(self.warmup >= 0.0) {
                    return Err(Error::config(format!("warmup {}", self.warmup)));
                }
            }
        }
        if matches!(self.mode, Mode::EstimateDiscrete | Mode::TrackDiscrete) {
            if self.mode == Mode::EstimateDiscrete && self.truth_states.is_none() {
                return Err(Error::config(
                    "estimate_discrete needs explicit truth_states",
                ));
            }
            // every agent reports each time; snapshots cannot be thinner
            if self
                .samples_per_snapshot
                .is_some_and(|m| m != self.population())
            {
                return Err(Error::config(
                    "discrete modes measure the whole population; drop samples_per_snapshot",
                ));
            }
            if !matches!(
                self.system,
                SystemSpec::Linear { .. }
                    | SystemSpec::HarmonicOscillator
                    | SystemSpec::DoubleIntegrator
            ) {
                return Err(Error::config("discrete modes need a linear system"));
            }
        }
        if let Some(f) = self.subsample_fraction {
            if !(f > 0.0 && f <= 1.0) {
                return Err(Error::config(format!("subsample_fraction {f}")));
            }
        }
        if let Some(b) = &self.init_box {
            if b.lo.len() != dim || b.hi.len() != dim {
                return Err(Error::config(format!(
                    "init_box must have {dim} coordinates per corner"
                )));
            }
            if b.lo.iter().zip(&b.hi).any(|(l, h)| !(l < h)) {
                return Err(Error::config("init_box needs lo < hi in every coordinate"));
            }
        }
        if !(self.relaxation > 0.0 && self.relaxation <= 1.0) {
            return Err(Error::config(format!("relaxation {}", self.relaxation)));
        }
        Ok(())
    }

    /// Truth ensemble at t = 0: explicit states when pinned, a mixture draw
    /// otherwise.
    pub fn truth_ensemble(&self) -> Result<ParticleEnsemble> {
        match (&self.truth_states, &self.truth) {
            (Some(states), _) => ParticleEnsemble::new(
                states
                    .iter()
                    .map(|s| DVector::from_vec(s.clone()))
                    .collect(),
                0.0,
            ),
            (None, Some(mix)) => mix.sample(
                self.particles,
                self.system.dim(),
                crate::rng::child_seed(self.seed, &[1]),
                0.0,
            ),
            (None, None) => Err(Error::config("give truth or truth_states")),
        }
    }

    pub fn population(&self) -> usize {
        self.truth_states
            .as_ref()
            .map_or(self.particles, Vec::len)
    }

    pub fn init_spec(&self) -> crate::estimator::InitSpec {
        match &self.init_box {
            Some(b) => crate::estimator::InitSpec::Box {
                lo: DVector::from_vec(b.lo.clone()),
                hi: DVector::from_vec(b.hi.clone()),
            },
            None => crate::estimator::InitSpec::BackprojectedBox,
        }
    }
}
