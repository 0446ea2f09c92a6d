//! System models, particle ensembles, flows and output maps.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};

/// N particles in state space plus a shared timestamp. The sole representation
/// of a distribution anywhere in this crate. Particle order is stable: index i
/// refers to the same particle across operations.
#[derive(Clone, Debug, PartialEq)]
pub struct ParticleEnsemble {
    particles: Vec<DVector<f64>>,
    time: f64,
}

impl ParticleEnsemble {
    pub fn new(particles: Vec<DVector<f64>>, time: f64) -> Result<Self> {
        let Some(first) = particles.first() else {
            return Err(Error::Empty("particle ensemble"));
        };
        let dim = first.len();
        if dim == 0 {
            return Err(Error::shape("particles must have dimension >= 1"));
        }
        if let Some(bad) = particles.iter().position(|p| p.len() != dim) {
            return Err(Error::shape(format!(
                "particle {bad} has dimension {}, expected {dim}",
                particles[bad].len()
            )));
        }
        Ok(Self { particles, time })
    }

    pub fn particles(&self) -> &[DVector<f64>] {
        &self.particles
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    pub fn dim(&self) -> usize {
        self.particles[0].len()
    }

    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        false // N >= 1 by construction
    }

    /// Same particles, new clock. Used by flows; not public because a bare
    /// relabeling of time is never physically meaningful on its own.
    pub(crate) fn with_time(mut self, time: f64) -> Self {
        self.time = time;
        self
    }

    pub(crate) fn map_particles<F>(&self, f: F) -> Self
    where
        F: Fn(&DVector<f64>) -> DVector<f64> + Sync,
    {
        Self {
            particles: self.particles.par_iter().map(|p| f(p)).collect(),
            time: self.time,
        }
    }
}

/// Linear dynamics x' = Ax with output y = Cx.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearSystem {
    a: DMatrix<f64>,
    c: DMatrix<f64>,
}

impl LinearSystem {
    pub fn new(a: DMatrix<f64>, c: DMatrix<f64>) -> Result<Self> {
        if !a.is_square() {
            return Err(Error::shape(format!(
                "drift matrix must be square, got {}x{}",
                a.nrows(),
                a.ncols()
            )));
        }
        if c.ncols() != a.nrows() {
            return Err(Error::shape(format!(
                "output map has {} columns, state dimension is {}",
                c.ncols(),
                a.nrows()
            )));
        }
        if c.nrows() == 0 {
            return Err(Error::shape("output map must have at least one row"));
        }
        Ok(Self { a, c })
    }

    /// Planar rotation with scalar position output.
    pub fn harmonic_oscillator() -> Self {
        Self {
            a: DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0]),
            c: DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
        }
    }

    /// Position/velocity chain with position output.
    pub fn double_integrator() -> Self {
        Self {
            a: DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]),
            c: DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
        }
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn c(&self) -> &DMatrix<f64> {
        &self.c
    }

    pub fn dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.c.nrows()
    }
}

type VectorField = Arc<dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync>;

/// Nonlinear dynamics x' = f(x) with a linear output functional y = <c, x>.
/// General nonlinear outputs are deliberately unsupported; a linear functional
/// keeps correction directions constant.
#[derive(Clone)]
pub struct NonlinearSystem {
    field: VectorField,
    output: DVector<f64>,
    step: f64,
}

impl NonlinearSystem {
    pub fn new(
        field: impl Fn(&DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
        output: DVector<f64>,
        step: f64,
    ) -> Result<Self> {
        if output.norm() <= 1e-12 {
            return Err(Error::DegenerateDirection);
        }
        if !(step > 0.0) || !step.is_finite() {
            return Err(Error::invalid(format!("integrator step must be > 0, got {step}")));
        }
        Ok(Self {
            field: Arc::new(field),
            output,
            step,
        })
    }

    /// Oscillator with a quadratic softening term: x1' = x2, x2' = -4 x1 + x1^2.
    /// Bounded motion only inside the separatrix through the saddle at (4, 0).
    pub fn quadratic_oscillator(step: f64) -> Self {
        Self::new(
            |x: &DVector<f64>| DVector::from_vec(vec![x[1], -4.0 * x[0] + x[0] * x[0]]),
            DVector::from_vec(vec![1.0, 0.0]),
            step,
        )
        .expect("static definition is valid")
    }

    pub fn field(&self, x: &DVector<f64>) -> DVector<f64> {
        (self.field)(x)
    }

    pub fn output(&self) -> &DVector<f64> {
        &self.output
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    pub fn dim(&self) -> usize {
        self.output.len()
    }

    pub fn with_step(mut self, step: f64) -> Self {
        assert!(step > 0.0 && step.is_finite());
        self.step = step;
        self
    }
}

impl fmt::Debug for NonlinearSystem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("NonlinearSystem")
            .field("output", &self.output)
            .field("step", &self.step)
            .finish_non_exhaustive()
    }
}

/// Either kind of dynamics, for call sites that accept both.
#[derive(Clone, Debug)]
pub enum Model {
    Linear(LinearSystem),
    Nonlinear(NonlinearSystem),
}

impl Model {
    pub fn dim(&self) -> usize {
        match self {
            Model::Linear(s) => s.dim(),
            Model::Nonlinear(s) => s.dim(),
        }
    }

    pub fn flow(&self, ens: &ParticleEnsemble, dt: f64) -> Result<ParticleEnsemble> {
        match self {
            Model::Linear(s) => flow_linear(s, ens, dt),
            Model::Nonlinear(s) => flow_nonlinear(s, ens, dt),
        }
    }

    /// Scalar outputs, requiring a one-dimensional output map.
    pub fn scalar_outputs(&self, ens: &ParticleEnsemble) -> Result<Vec<f64>> {
        match self {
            Model::Linear(s) => {
                if s.output_dim() != 1 {
                    return Err(Error::shape(format!(
                        "scalar outputs need m = 1, output map has {} rows",
                        s.output_dim()
                    )));
                }
                Ok(output_samples(self, ens)?.into_iter().map(|y| y[0]).collect())
            }
            Model::Nonlinear(_) => {
                Ok(output_samples(self, ens)?.into_iter().map(|y| y[0]).collect())
            }
        }
    }
}

/// A unit vector v together with a positive scale s; the raw measurement
/// functional is w = s v, so outputs and projections <w, x> share one axis.
#[derive(Clone, Debug, PartialEq)]
pub struct Direction {
    v: DVector<f64>,
    scale: f64,
}

impl Direction {
    pub fn new(v: DVector<f64>, scale: f64) -> Result<Self> {
        if (v.norm() - 1.0).abs() > 1e-12 {
            return Err(Error::invalid(format!(
                "direction must be unit length, |v| = {}",
                v.norm()
            )));
        }
        if !(scale > 0.0) || !scale.is_finite() {
            return Err(Error::invalid(format!("direction scale must be > 0, got {scale}")));
        }
        Ok(Self { v, scale })
    }

    /// Splits a raw functional w into unit direction and scale.
    pub fn from_functional(w: &DVector<f64>) -> Result<Self> {
        let norm = w.norm();
        if norm <= 1e-12 || !norm.is_finite() {
            return Err(Error::DegenerateDirection);
        }
        Ok(Self {
            v: w / norm,
            scale: norm,
        })
    }

    pub fn v(&self) -> &DVector<f64> {
        &self.v
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn functional(&self) -> DVector<f64> {
        &self.v * self.scale
    }

    /// Raw projection <s v, x>, comparable with measured outputs.
    pub fn project(&self, x: &DVector<f64>) -> f64 {
        self.scale * self.v.dot(x)
    }

    /// Angle between the lines spanned by two directions, in [0, pi/2].
    pub fn angle_to(&self, other: &Direction) -> f64 {
        self.v.dot(&other.v).abs().min(1.0).acos()
    }
}

/// exp(A t) by Pade scaling and squaring.
pub fn matrix_exponential(a: &DMatrix<f64>, t: f64) -> Result<DMatrix<f64>> {
    if !a.is_square() {
        return Err(Error::shape(format!(
            "matrix exponential needs a square matrix, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    Ok((a * t).exp())
}

/// Maps every particle through exp(A dt); dt < 0 runs the flow backwards.
pub fn flow_linear(sys: &LinearSystem, ens: &ParticleEnsemble, dt: f64) -> Result<ParticleEnsemble> {
    if sys.dim() != ens.dim() {
        return Err(Error::shape(format!(
            "system dimension {} vs ensemble dimension {}",
            sys.dim(),
            ens.dim()
        )));
    }
    let phi = matrix_exponential(&sys.a, dt)?;
    let t = ens.time() + dt;
    Ok(ens.map_particles(|p| &phi * p).with_time(t))
}

fn rk4_step(sys: &NonlinearSystem, x: &DVector<f64>, h: f64) -> DVector<f64> {
    let k1 = sys.field(x);
    let k2 = sys.field(&(x + &k1 * (h / 2.0)));
    let k3 = sys.field(&(x + &k2 * (h / 2.0)));
    let k4 = sys.field(&(x + &k3 * h));
    x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)
}

fn integrate(sys: &NonlinearSystem, x0: &DVector<f64>, dt: f64, index: usize) -> Result<DVector<f64>> {
    let h = sys.step().copysign(dt);
    let n_full = (dt.abs() / sys.step()).floor() as u64;
    let mut x = x0.clone();
    for _ in 0..n_full {
        x = rk4_step(sys, &x, h);
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::Diverged { index });
        }
    }
    let rest = dt - h * n_full as f64;
    if rest.abs() > 0.0 {
        x = rk4_step(sys, &x, rest);
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::Diverged { index });
        }
    }
    Ok(x)
}

/// Fixed-step RK4 over dt with a final partial step. A negative dt integrates
/// the negated field, which is the same arithmetic as stepping with -h.
pub fn flow_nonlinear(
    sys: &NonlinearSystem,
    ens: &ParticleEnsemble,
    dt: f64,
) -> Result<ParticleEnsemble> {
    if sys.dim() != ens.dim() {
        return Err(Error::shape(format!(
            "system dimension {} vs ensemble dimension {}",
            sys.dim(),
            ens.dim()
        )));
    }
    if dt == 0.0 {
        return Ok(ens.clone());
    }
    let particles: Vec<DVector<f64>> = ens
        .particles()
        .par_iter()
        .enumerate()
        .map(|(i, p)| integrate(sys, p, dt, i))
        .collect::<Result<_>>()?;
    let t = ens.time() + dt;
    Ok(ParticleEnsemble::new(particles, t)?)
}

/// Outputs h(x_i) in particle order.
pub fn output_samples(model: &Model, ens: &ParticleEnsemble) -> Result<Vec<DVector<f64>>> {
    if model.dim() != ens.dim() {
        return Err(Error::shape(format!(
            "system dimension {} vs ensemble dimension {}",
            model.dim(),
            ens.dim()
        )));
    }
    Ok(match model {
        Model::Linear(s) => ens.particles().iter().map(|p| &s.c * p).collect(),
        Model::Nonlinear(s) => ens
            .particles()
            .iter()
            .map(|p| DVector::from_vec(vec![s.output.dot(p)]))
            .collect(),
    })
}

/// Direction of the measurement functional C exp(A t), split into unit vector
/// and scale. Outputs observed at time t equal s <v, x0> on initial states.
pub fn projection_direction(sys: &LinearSystem, t: f64) -> Result<Direction> {
    if sys.output_dim() != 1 {
        return Err(Error::shape(format!(
            "projection direction needs m = 1, output map has {} rows",
            sys.output_dim()
        )));
    }
    let w_row = &sys.c * matrix_exponential(&sys.a, t)?;
    let w = DVector::from_iterator(w_row.ncols(), w_row.iter().copied());
    Direction::from_functional(&w)
}
