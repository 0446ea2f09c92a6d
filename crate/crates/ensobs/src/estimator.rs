//! Batch reconstruction of an initial state distribution from timestamped
//! output snapshots, by iterating histogram-transport corrections over the
//! measurement directions.

use nalgebra::{DMatrix, DVector};
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::Rng;

use crate::correction::{correct_traced, unfolded_traced, CorrectionConfig};
use crate::dynamics::{projection_direction, Direction, Model, ParticleEnsemble};
use crate::error::{Error, Result};
use crate::histogram::{histogram, shared_grid};
use crate::rng::{child_seed, stream};
use crate::transport::wasserstein1_binned;

/// One population snapshot: M scalar outputs at one time, association unknown.
#[derive(Clone, Debug, PartialEq)]
pub struct MeasurementSnapshot {
    time: f64,
    samples: Vec<f64>,
}

impl MeasurementSnapshot {
    pub fn new(time: f64, samples: Vec<f64>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Empty("snapshot samples"));
        }
        if !time.is_finite() {
            return Err(Error::invalid(format!("snapshot time {time}")));
        }
        if let Some(s) = samples.iter().find(|s| !s.is_finite()) {
            return Err(Error::invalid(format!("non-finite snapshot sample {s}")));
        }
        Ok(Self { time, samples })
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepOrder {
    Sequential,
    /// Fresh random order every sweep, in the spirit of randomized row-action
    /// solvers.
    RandomShuffle,
}

#[derive(Clone, Debug)]
pub struct SweepSchedule {
    pub order: SweepOrder,
    pub sweeps: usize,
}

impl SweepSchedule {
    pub fn new(order: SweepOrder, sweeps: usize) -> Result<Self> {
        if sweeps == 0 {
            return Err(Error::invalid("sweep count must be >= 1"));
        }
        Ok(Self { order, sweeps })
    }
}

impl Default for SweepSchedule {
    fn default() -> Self {
        Self {
            order: SweepOrder::RandomShuffle,
            sweeps: 1,
        }
    }
}

/// How to seed the estimator ensemble before the first sweep.
#[derive(Clone, Debug)]
pub enum InitSpec {
    /// Uniform on the bounding box of the region consistent with every
    /// snapshot's output range. Falls back to an isotropic box around a least
    /// squares center when the directions do not pin a bounded region.
    BackprojectedBox,
    Box {
        lo: DVector<f64>,
        hi: DVector<f64>,
    },
    Ensemble(ParticleEnsemble),
}

#[derive(Clone, Debug)]
pub struct StepRecord {
    pub sweep: usize,
    pub time: f64,
    /// Binned transport mismatch seen just before this correction, in bin units.
    pub mismatch: f64,
}

#[derive(Clone, Debug, Default)]
pub struct EstimateTrace {
    pub steps: Vec<StepRecord>,
    /// Aggregated mismatch over all usable snapshots; entry 0 is measured
    /// before the first sweep, entry k after sweep k.
    pub sweep_totals: Vec<f64>,
    pub skipped_times: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct EstimateOutcome {
    pub ensemble: ParticleEnsemble,
    pub trace: EstimateTrace,
}

enum SnapshotPath {
    Linear(Direction),
    Unfolded,
}

fn combinations(k: usize, n: usize, f: &mut impl FnMut(&[usize])) {
    fn rec(start: usize, k: usize, pick: &mut Vec<usize>, n: usize, f: &mut impl FnMut(&[usize])) {
        if pick.len() == n {
            f(pick);
            return;
        }
        let still_needed = n - pick.len();
        for i in start..=(k - still_needed) {
            pick.push(i);
            rec(i + 1, k, pick, n, f);
            pick.pop();
        }
    }
    if n == 0 || n > k {
        return;
    }
    rec(0, k, &mut Vec::with_capacity(n), n, f);
}

/// Axis-aligned bounding box of the intersection of output slabs
/// lo_k <= <w_k, x> <= hi_k, with w_k the raw functional of each direction.
/// Degenerate slabs are widened to half a unit. None if `constraints` is empty.
pub fn backprojected_box(
    constraints: &[(Direction, f64, f64)],
    dim: usize,
) -> Option<(DVector<f64>, DVector<f64>)> {
    if constraints.is_empty() {
        return None;
    }
    let slabs: Vec<(DVector<f64>, f64, f64)> = constraints
        .iter()
        .map(|(d, lo, hi)| {
            let (lo, hi) = if hi - lo < 1e-9 {
                let mid = (lo + hi) / 2.0;
                (mid - 0.5, mid + 0.5)
            } else {
                (*lo, *hi)
            };
            (d.functional(), lo, hi)
        })
        .collect();

    let feasible = |x: &DVector<f64>| {
        slabs.iter().all(|(w, lo, hi)| {
            let tol = 1e-7 * lo.abs().max(hi.abs()).max(1.0);
            let p = w.dot(x);
            p >= lo - tol && p <= hi + tol
        })
    };

    let mut min = DVector::from_element(dim, f64::INFINITY);
    let mut max = DVector::from_element(dim, f64::NEG_INFINITY);
    let mut found = false;
    combinations(slabs.len(), dim, &mut |pick| {
        let mut w_mat = DMatrix::zeros(dim, dim);
        for (row, &k) in pick.iter().enumerate() {
            w_mat.row_mut(row).copy_from(&slabs[k].0.transpose());
        }
        let lu = w_mat.clone().lu();
        for side in 0..(1u32 << dim) {
            let b = DVector::from_iterator(
                dim,
                pick.iter().enumerate().map(|(row, &k)| {
                    if side >> row & 1 == 0 {
                        slabs[k].1
                    } else {
                        slabs[k].2
                    }
                }),
            );
            if let Some(x) = lu.solve(&b) {
                let residual = (&w_mat * &x - &b).norm();
                if residual <= 1e-7 * (b.norm() + 1.0) && feasible(&x) {
                    found = true;
                    min.zip_apply(&x, |m, v| *m = m.min(v));
                    max.zip_apply(&x, |m, v| *m = m.max(v));
                }
            }
        }
    });
    if found {
        return Some((min, max));
    }

    // under-determined: isotropic box around a least squares center
    let mut gram = DMatrix::zeros(dim, dim);
    let mut rhs = DVector::zeros(dim);
    let mut half = 0.5f64;
    for (w, lo, hi) in &slabs {
        gram += w * w.transpose();
        rhs += w * ((lo + hi) / 2.0);
        half = half.max((hi - lo) / (2.0 * w.norm()));
    }
    let center = gram
        .svd(true, true)
        .solve(&rhs, 1e-9)
        .unwrap_or_else(|_| DVector::zeros(dim));
    Some((center.map(|c| c - half), center.map(|c| c + half)))
}

fn sample_box(
    lo: &DVector<f64>,
    hi: &DVector<f64>,
    n: usize,
    seed: u64,
    time: f64,
) -> Result<ParticleEnsemble> {
    if n == 0 {
        return Err(Error::invalid("particle count must be >= 1"));
    }
    let dim = lo.len();
    if hi.len() != dim {
        return Err(Error::shape("box corners differ in dimension".to_string()));
    }
    if lo.iter().zip(hi.iter()).any(|(l, h)| !(l <= h)) {
        return Err(Error::invalid("box has lo > hi"));
    }
    let mut rng = stream(seed, &[0x696e_6974]);
    let particles = (0..n)
        .map(|_| {
            DVector::from_iterator(
                dim,
                (0..dim).map(|k| {
                    let u: f64 = rng.random_range(0.0..1.0);
                    lo[k] + u * (hi[k] - lo[k])
                }),
            )
        })
        .collect();
    ParticleEnsemble::new(particles, time)
}

/// Builds the pre-sweep ensemble for `init`, anchored at `base_time`. For the
/// backprojected default, every non-degenerate snapshot contributes one output
/// slab: its direction at the snapshot's time offset for linear models, the
/// raw output functional for nonlinear ones.
pub fn initial_ensemble(
    model: &Model,
    snapshots: &[MeasurementSnapshot],
    n: usize,
    init: &InitSpec,
    base_time: f64,
    seed: u64,
) -> Result<ParticleEnsemble> {
    match init {
        InitSpec::Ensemble(e) => {
            if e.dim() != model.dim() {
                return Err(Error::shape(format!(
                    "init ensemble dimension {} vs system dimension {}",
                    e.dim(),
                    model.dim()
                )));
            }
            Ok(e.clone())
        }
        InitSpec::Box { lo, hi } => sample_box(lo, hi, n, seed, base_time),
        InitSpec::BackprojectedBox => {
            let mut constraints: Vec<(Direction, f64, f64)> = Vec::new();
            for snap in snapshots {
                let dir = match model {
                    Model::Linear(sys) => {
                        match projection_direction(sys, snap.time() - base_time) {
                            Ok(dir) => dir,
                            Err(Error::DegenerateDirection) => continue,
                            Err(e) => return Err(e),
                        }
                    }
                    Model::Nonlinear(sys) => Direction::from_functional(sys.output())?,
                };
                let lo = snap.samples().iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = snap
                    .samples()
                    .iter()
                    .cloned()
                    .fold(f64::NEG_INFINITY, f64::max);
                constraints.push((dir, lo, hi));
            }
            let (lo, hi) = backprojected_box(&constraints, model.dim())
                .ok_or(Error::Empty("constraints for backprojected box"))?;
            sample_box(&lo, &hi, n, seed, base_time)
        }
    }
}

fn mismatch_now(
    model: &Model,
    ens: &ParticleEnsemble,
    snap: &MeasurementSnapshot,
    path: &SnapshotPath,
    bins: usize,
) -> Result<f64> {
    let projections: Vec<f64> = match path {
        SnapshotPath::Linear(dir) => ens.particles().iter().map(|x| dir.project(x)).collect(),
        SnapshotPath::Unfolded => {
            let fwd = model.flow(ens, snap.time() - ens.time())?;
            model.scalar_outputs(&fwd)?
        }
    };
    let grid = shared_grid(&projections, snap.samples(), bins)?;
    wasserstein1_binned(
        &histogram(&projections, &grid)?,
        &histogram(snap.samples(), &grid)?,
    )
}

/// Iterative reconstruction of the t = 0 state distribution. Every sweep runs
/// one correction per snapshot; the linear path corrects initial-state
/// particles directly along C exp(A t_k), the nonlinear path flows out to each
/// snapshot and back.
pub fn estimate_initial(
    model: &Model,
    snapshots: &[MeasurementSnapshot],
    n: usize,
    init: &InitSpec,
    schedule: &SweepSchedule,
    cfg: &CorrectionConfig,
) -> Result<EstimateOutcome> {
    if snapshots.is_empty() {
        return Err(Error::Empty("snapshots"));
    }
    if schedule.sweeps == 0 {
        return Err(Error::invalid("sweep count must be >= 1"));
    }
    let base_time = match init {
        InitSpec::Ensemble(e) => e.time(),
        _ => 0.0,
    };

    let mut usable: Vec<(&MeasurementSnapshot, SnapshotPath, usize)> = Vec::new();
    let mut skipped_times = Vec::new();
    for (idx, snap) in snapshots.iter().enumerate() {
        match model {
            Model::Linear(sys) => match projection_direction(sys, snap.time() - base_time) {
                Ok(dir) => usable.push((snap, SnapshotPath::Linear(dir), idx)),
                Err(Error::DegenerateDirection) => skipped_times.push(snap.time()),
                Err(e) => return Err(e),
            },
            Model::Nonlinear(_) => usable.push((snap, SnapshotPath::Unfolded, idx)),
        }
    }
    if usable.is_empty() {
        return Err(Error::Empty("usable snapshots after degeneracy filtering"));
    }

    let mut ens = initial_ensemble(model, snapshots, n, init, base_time, cfg.rng_seed)?;

    let mut trace = EstimateTrace {
        skipped_times,
        ..Default::default()
    };
    let total = |ens: &ParticleEnsemble| -> Result<f64> {
        let mut sum = 0.0;
        for (snap, path, _) in &usable {
            sum += mismatch_now(model, ens, snap, path, cfg.bins)?;
        }
        Ok(sum)
    };
    trace.sweep_totals.push(total(&ens)?);

    for sweep in 1..=schedule.sweeps {
        let mut order: Vec<usize> = (0..usable.len()).collect();
        if schedule.order == SweepOrder::RandomShuffle {
            order.shuffle(&mut stream(cfg.rng_seed, &[0x6f72_6465_72, sweep as u64]));
        }
        for pos in order {
            let (snap, path, idx) = &usable[pos];
            let step_cfg = cfg.with_seed(child_seed(
                cfg.rng_seed,
                &[0x7374_6570, sweep as u64, *idx as u64],
            ));
            let (next, mismatch) = match path {
                SnapshotPath::Linear(dir) => correct_traced(&ens, dir, snap.samples(), &step_cfg)?,
                SnapshotPath::Unfolded => match model {
                    Model::Nonlinear(sys) => unfolded_traced(&ens, sys, snap, &step_cfg)?,
                    Model::Linear(_) => unreachable!(),
                },
            };
            trace.steps.push(StepRecord {
                sweep,
                time: snap.time(),
                mismatch,
            });
            ens = next;
        }
        trace.sweep_totals.push(total(&ens)?);
    }

    Ok(EstimateOutcome { ensemble: ens, trace })
}

/// Ground-truth snapshot generator: flows the truth ensemble to each time,
/// draws M outputs from a fresh random subset of the population, and adds
/// Gaussian noise. Samples can stem from different individuals per time.
pub fn simulate_snapshots(
    model: &Model,
    truth: &ParticleEnsemble,
    times: &[f64],
    m: usize,
    noise_sigma: f64,
    seed: u64,
) -> Result<Vec<MeasurementSnapshot>> {
    if m == 0 {
        return Err(Error::invalid("sample count must be >= 1"));
    }
    if !(noise_sigma >= 0.0) {
        return Err(Error::invalid(format!("noise sigma {noise_sigma}")));
    }
    let mut out = Vec::with_capacity(times.len());
    for (k, &t) in times.iter().enumerate() {
        let flowed = model.flow(truth, t - truth.time())?;
        let outputs = model.scalar_outputs(&flowed)?;
        let mut rng = stream(seed, &[0x736e_6170, k as u64]);
        let n = outputs.len();
        let mut samples: Vec<f64> = if m <= n {
            rand::seq::index::sample(&mut rng, n, m)
                .iter()
                .map(|i| outputs[i])
                .collect()
        } else {
            (0..m).map(|_| outputs[rng.random_range(0..n)]).collect()
        };
        if noise_sigma > 0.0 {
            let normal = rand_distr::Normal::new(0.0, noise_sigma)
                .map_err(|e| Error::invalid(e.to_string()))?;
            for s in &mut samples {
                *s += normal.sample(&mut rng);
            }
        }
        out.push(MeasurementSnapshot::new(t, samples)?);
    }
    Ok(out)
}
