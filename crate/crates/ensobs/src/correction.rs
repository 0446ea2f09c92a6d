//! Randomized per-particle corrections: morph the estimator ensemble's
//! projected histogram into the measured one by drawing each particle's
//! destination bin from the transport plan, then translating along the
//! direction. Components orthogonal to the direction are never touched.

use nalgebra::DVector;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{flow_nonlinear, Direction, NonlinearSystem, ParticleEnsemble};
use crate::error::{Error, Result};
use crate::estimator::MeasurementSnapshot;
use crate::histogram::{bin_index, histogram, shared_grid, ProbVector};
use crate::rng::stream;
use crate::transport::{
    conditional_destination, default_epsilon, ot_1d_exact, sinkhorn, wasserstein1_binned,
    TransportPlan, DEFAULT_MAX_ITERS, DEFAULT_TOL,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Solver {
    Exact,
    Sinkhorn,
}

#[derive(Clone, Debug)]
pub struct CorrectionConfig {
    pub bins: usize,
    pub solver: Solver,
    pub rng_seed: u64,
    /// When the drawn destination equals the source bin, leave the particle
    /// exactly in place instead of re-randomizing inside the bin. Avoids
    /// intra-bin diffusion over many sweeps.
    pub keep_in_bin: bool,
}

impl Default for CorrectionConfig {
    fn default() -> Self {
        Self {
            bins: 50,
            solver: Solver::Exact,
            rng_seed: 0,
            keep_in_bin: true,
        }
    }
}

impl CorrectionConfig {
    pub fn new(bins: usize) -> Self {
        Self {
            bins,
            ..Self::default()
        }
    }

    pub fn with_seed(&self, rng_seed: u64) -> Self {
        Self {
            rng_seed,
            ..self.clone()
        }
    }

    pub fn solve(&self, source: &ProbVector, target: &ProbVector) -> Result<TransportPlan> {
        match self.solver {
            Solver::Exact => ot_1d_exact(source, target),
            Solver::Sinkhorn => Ok(sinkhorn(
                source,
                target,
                default_epsilon(self.bins),
                DEFAULT_MAX_ITERS,
                DEFAULT_TOL,
            )?
            .plan),
        }
    }
}

/// Moves every particle along `dir` so that, in expectation, the corrected
/// projections follow the measured histogram. Measured samples are raw outputs
/// on the same axis as the projection <s v, x>. Returns the pre-correction
/// binned transport mismatch alongside the ensemble.
pub(crate) fn correct_traced(
    ens: &ParticleEnsemble,
    dir: &Direction,
    measured: &[f64],
    cfg: &CorrectionConfig,
) -> Result<(ParticleEnsemble, f64)> {
    if measured.is_empty() {
        return Err(Error::Empty("measured samples"));
    }
    if dir.v().len() != ens.dim() {
        return Err(Error::shape(format!(
            "direction dimension {} vs ensemble dimension {}",
            dir.v().len(),
            ens.dim()
        )));
    }

    let projections: Vec<f64> = ens.particles().iter().map(|x| dir.project(x)).collect();
    let grid = shared_grid(&projections, measured, cfg.bins)?;
    let q_hat = histogram(&projections, &grid)?;
    let q = histogram(measured, &grid)?;
    let mismatch = wasserstein1_binned(&q_hat, &q)?;
    let plan = cfg.solve(&q_hat, &q)?;

    // cumulative destination law per occupied source bin
    let mut dest_cdf: Vec<Option<Vec<f64>>> = vec![None; grid.bins()];
    for (m, slot) in dest_cdf.iter_mut().enumerate() {
        if q_hat.mass(m) > 0.0 {
            let dest = conditional_destination(&plan, m)?;
            let mut acc = 0.0;
            *slot = Some(
                dest.masses()
                    .iter()
                    .map(|&p| {
                        acc += p;
                        acc
                    })
                    .collect(),
            );
        }
    }

    let v = dir.v();
    let s = dir.scale();
    let width = grid.width();
    let particles: Vec<DVector<f64>> = ens
        .particles()
        .par_iter()
        .enumerate()
        .map(|(i, x)| {
            let p = projections[i];
            let m = bin_index(p, &grid)?;
            let cdf = dest_cdf[m]
                .as_ref()
                .ok_or(Error::EmptySource { bin: m })?;
            let mut rng = stream(cfg.rng_seed, &[i as u64]);
            let u1: f64 = rng.random_range(0.0..1.0);
            let j = cdf.partition_point(|&c| c < u1).min(grid.bins() - 1);
            if cfg.keep_in_bin && j == m {
                return Ok(x.clone());
            }
            let u2: f64 = rng.random_range(0.0..1.0);
            let c_j = grid.left_edge(j) + u2 * width;
            let delta = (c_j - p) / s;
            let mut moved = x.clone();
            for k in 0..moved.len() {
                let d = delta * v[k];
                // skipping exact zeros keeps orthogonal coordinates bitwise
                // intact, signed zeros included
                if d != 0.0 {
                    moved[k] += d;
                }
            }
            Ok(moved)
        })
        .collect::<Result<_>>()?;

    Ok((
        ParticleEnsemble::new(particles, ens.time())?,
        mismatch,
    ))
}

pub fn correct_along_direction(
    ens: &ParticleEnsemble,
    dir: &Direction,
    measured: &[f64],
    cfg: &CorrectionConfig,
) -> Result<ParticleEnsemble> {
    correct_traced(ens, dir, measured, cfg).map(|(e, _)| e)
}

/// Correction against a snapshot taken at a later time, for nonlinear
/// dynamics: flow forward to the snapshot time, correct along the output
/// functional, flow back. Sidesteps any gradient of the flowed output map.
pub(crate) fn unfolded_traced(
    ens0: &ParticleEnsemble,
    sys: &NonlinearSystem,
    snapshot: &MeasurementSnapshot,
    cfg: &CorrectionConfig,
) -> Result<(ParticleEnsemble, f64)> {
    let dt = snapshot.time() - ens0.time();
    let dir = Direction::from_functional(sys.output())?;
    if dt == 0.0 {
        return correct_traced(ens0, &dir, snapshot.samples(), cfg);
    }
    let forward = flow_nonlinear(sys, ens0, dt)?;
    let (corrected, mismatch) = correct_traced(&forward, &dir, snapshot.samples(), cfg)?;
    let back = flow_nonlinear(sys, &corrected, -dt)?;
    Ok((back, mismatch))
}

pub fn unfolded_correct(
    ens0: &ParticleEnsemble,
    sys: &NonlinearSystem,
    snapshot: &MeasurementSnapshot,
    cfg: &CorrectionConfig,
) -> Result<ParticleEnsemble> {
    unfolded_traced(ens0, sys, snapshot, cfg).map(|(e, _)| e)
}
