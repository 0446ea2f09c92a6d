//! Finite-ensemble (multitarget) estimation from anonymized scalar outputs:
//! rank pairing solves the per-snapshot assignment, then each tracked state is
//! projected orthogonally onto its assigned measurement hyperplane. Batch and
//! moving-horizon modes share the machinery.

use std::time::Instant;

use nalgebra::DVector;
use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::dynamics::{flow_linear, projection_direction, LinearSystem, ParticleEnsemble};
use crate::error::{Error, Result};
use crate::estimator::{SweepOrder, SweepSchedule};
use crate::observer::{projective_angle, select_by_angle, HorizonBuffer, Stamped, SLACK};
use crate::rng::{child_seed, stream};

/// One time slice of per-agent outputs with the agent association removed.
#[derive(Clone, Debug, PartialEq)]
pub struct AnonymizedSnapshot {
    time: f64,
    outputs: Vec<f64>,
}

impl AnonymizedSnapshot {
    pub fn new(time: f64, outputs: Vec<f64>) -> Result<Self> {
        if outputs.is_empty() {
            return Err(Error::Empty("snapshot outputs"));
        }
        if !time.is_finite() {
            return Err(Error::invalid(format!("snapshot time {time}")));
        }
        if let Some(y) = outputs.iter().find(|y| !y.is_finite()) {
            return Err(Error::invalid(format!("non-finite output {y}")));
        }
        Ok(Self { time, outputs })
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    pub fn outputs(&self) -> &[f64] {
        &self.outputs
    }

    pub fn len(&self) -> usize {
        self.outputs.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

impl Stamped for AnonymizedSnapshot {
    fn stamp(&self) -> f64 {
        self.time
    }
}

/// Pairing of measured outputs with tracked states: measured i belongs to
/// track map(i).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Assignment {
    sigma: Vec<usize>,
}

impl Assignment {
    pub fn new(sigma: Vec<usize>) -> Result<Self> {
        let n = sigma.len();
        let mut seen = vec![false; n];
        for &s in &sigma {
            if s >= n || seen[s] {
                return Err(Error::invalid("assignment is not a permutation"));
            }
            seen[s] = true;
        }
        Ok(Self { sigma })
    }

    pub fn map(&self, i: usize) -> usize {
        self.sigma[i]
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.sigma
    }

    pub fn len(&self) -> usize {
        self.sigma.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sigma.is_empty()
    }

    /// Scatters measured values to their tracks: track map(i) gets measured i.
    pub fn track_targets(&self, measured: &[f64]) -> Result<Vec<f64>> {
        if measured.len() != self.sigma.len() {
            return Err(Error::shape(format!(
                "{} measured values vs {} assignment slots",
                measured.len(),
                self.sigma.len()
            )));
        }
        let mut targets = vec![0.0; measured.len()];
        for (i, &y) in measured.iter().enumerate() {
            targets[self.sigma[i]] = y;
        }
        Ok(targets)
    }
}

fn argsort(values: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    idx
}

/// Optimal 1D pairing by rank: the i-th smallest measured output belongs to
/// the track with the i-th smallest prediction. Minimizes the summed absolute
/// mismatch over all permutations; ties keep input order (stable sort).
pub fn assign_1d(measured: &[f64], predicted: &[f64]) -> Result<Assignment> {
    if measured.len() != predicted.len() {
        return Err(Error::shape(format!(
            "{} measured vs {} predicted outputs",
            measured.len(),
            predicted.len()
        )));
    }
    if measured.is_empty() {
        return Err(Error::Empty("assignment inputs"));
    }
    let by_measured = argsort(measured);
    let by_predicted = argsort(predicted);
    let mut sigma = vec![0usize; measured.len()];
    for (rank, &mi) in by_measured.iter().enumerate() {
        sigma[mi] = by_predicted[rank];
    }
    Ok(Assignment { sigma })
}

pub fn assignment_cost(measured: &[f64], predicted: &[f64], a: &Assignment) -> Result<f64> {
    if measured.len() != a.len() || predicted.len() != a.len() {
        return Err(Error::shape("cost inputs differ in length".to_string()));
    }
    Ok(measured
        .iter()
        .enumerate()
        .map(|(i, y)| (y - predicted[a.map(i)]).abs())
        .sum())
}

/// Orthogonal projection of x onto the hyperplane <w, x> = y.
pub fn kaczmarz_project(x: &DVector<f64>, w: &DVector<f64>, y: f64) -> Result<DVector<f64>> {
    kaczmarz_project_relaxed(x, w, y, 1.0)
}

/// Relaxed step: lambda = 1 lands exactly on the hyperplane, lambda < 1 moves
/// part way, damping noisy measurements.
pub fn kaczmarz_project_relaxed(
    x: &DVector<f64>,
    w: &DVector<f64>,
    y: f64,
    lambda: f64,
) -> Result<DVector<f64>> {
    let nn = w.norm_squared();
    if nn <= 1e-24 {
        return Err(Error::DegenerateDirection);
    }
    Ok(x + w * (lambda * (y - w.dot(x)) / nn))
}

#[derive(Clone, Debug)]
pub struct DiscreteConfig {
    pub relaxation: f64,
    pub rng_seed: u64,
}

impl Default for DiscreteConfig {
    fn default() -> Self {
        Self {
            relaxation: 1.0,
            rng_seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct DiscreteEstimate {
    pub ensemble: ParticleEnsemble,
    /// Mean absolute output residual under optimal pairing, aggregated over
    /// all usable snapshots; entry 0 before the first sweep, entry k after
    /// sweep k.
    pub residuals: Vec<f64>,
}

/// Batch refinement of N tracked initial states by cyclic hyperplane
/// projections, one hyperplane per (agent, snapshot) pair.
pub fn discrete_estimate(
    sys: &LinearSystem,
    snapshots: &[AnonymizedSnapshot],
    init: &ParticleEnsemble,
    schedule: &SweepSchedule,
    cfg: &DiscreteConfig,
) -> Result<DiscreteEstimate> {
    if snapshots.is_empty() {
        return Err(Error::Empty("snapshots"));
    }
    let n = init.len();
    if let Some(s) = snapshots.iter().find(|s| s.len() != n) {
        return Err(Error::shape(format!(
            "snapshot at t = {} has {} outputs for {} tracks",
            s.time(),
            s.len(),
            n
        )));
    }
    let base = init.time();
    let mut usable: Vec<(&AnonymizedSnapshot, DVector<f64>)> = Vec::new();
    for snap in snapshots {
        match projection_direction(sys, snap.time() - base) {
            Ok(dir) => usable.push((snap, dir.functional())),
            Err(Error::DegenerateDirection) => {}
            Err(e) => return Err(e),
        }
    }
    if usable.is_empty() {
        return Err(Error::Empty("usable snapshots after degeneracy filtering"));
    }

    let mean_residual = |ens: &ParticleEnsemble| -> Result<f64> {
        let mut total = 0.0;
        for (snap, w) in &usable {
            let predicted: Vec<f64> = ens.particles().iter().map(|x| w.dot(x)).collect();
            let a = assign_1d(snap.outputs(), &predicted)?;
            total += assignment_cost(snap.outputs(), &predicted, &a)?;
        }
        Ok(total / (n * usable.len()) as f64)
    };

    let mut particles = init.particles().to_vec();
    let mut residuals = Vec::with_capacity(schedule.sweeps + 1);
    residuals.push(mean_residual(init)?);
    for sweep in 1..=schedule.sweeps {
        let mut order: Vec<usize> = (0..usable.len()).collect();
        if schedule.order == SweepOrder::RandomShuffle {
            order.shuffle(&mut stream(cfg.rng_seed, &[0x6f72_6465_72, sweep as u64]));
        }
        for idx in order {
            let (snap, w) = &usable[idx];
            let predicted: Vec<f64> = particles.iter().map(|x| w.dot(x)).collect();
            let a = assign_1d(snap.outputs(), &predicted)?;
            let targets = a.track_targets(snap.outputs())?;
            particles = particles
                .par_iter()
                .enumerate()
                .map(|(i, x)| kaczmarz_project_relaxed(x, w, targets[i], cfg.relaxation))
                .collect::<Result<_>>()?;
        }
        let ens = ParticleEnsemble::new(particles.clone(), base)?;
        residuals.push(mean_residual(&ens)?);
    }

    Ok(DiscreteEstimate {
        ensemble: ParticleEnsemble::new(particles, base)?,
        residuals,
    })
}

#[derive(Clone, Debug)]
pub struct DiscreteObserverConfig {
    /// Buffered snapshot times used per step.
    pub k_times: usize,
    pub relaxation: f64,
    pub rng_seed: u64,
}

impl Default for DiscreteObserverConfig {
    fn default() -> Self {
        Self {
            k_times: 5,
            relaxation: 1.0,
            rng_seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct DiscreteObserverState {
    tracks: ParticleEnsemble,
    buffer: HorizonBuffer<AnonymizedSnapshot>,
    config: DiscreteObserverConfig,
    steps: u64,
}

impl DiscreteObserverState {
    pub fn new(
        tracks: ParticleEnsemble,
        horizon: f64,
        config: DiscreteObserverConfig,
    ) -> Result<Self> {
        if config.k_times == 0 {
            return Err(Error::config("k_times must be >= 1"));
        }
        Ok(Self {
            tracks,
            buffer: HorizonBuffer::new(horizon)?,
            config,
            steps: 0,
        })
    }

    pub fn tracks(&self) -> &ParticleEnsemble {
        &self.tracks
    }

    pub fn time(&self) -> f64 {
        self.tracks.time()
    }

    pub fn buffer(&self) -> &HorizonBuffer<AnonymizedSnapshot> {
        &self.buffer
    }

    pub fn push_snapshot(&mut self, snapshot: AnonymizedSnapshot) -> Result<()> {
        if snapshot.len() != self.tracks.len() {
            return Err(Error::shape(format!(
                "snapshot carries {} outputs for {} tracks",
                snapshot.len(),
                self.tracks.len()
            )));
        }
        self.buffer.push(snapshot)?;
        self.buffer.evict(self.tracks.time());
        Ok(())
    }
}

/// Wall-time split of one tracker step. The sort bucket covers the two rank
/// sorts behind each assignment; predict covers the backward-functional dot
/// products feeding them.
#[derive(Clone, Copy, Debug, Default)]
pub struct DiscreteStepTiming {
    pub flow_nanos: u128,
    pub predict_nanos: u128,
    pub sort_nanos: u128,
    pub project_nanos: u128,
}

impl DiscreteStepTiming {
    pub fn total_nanos(&self) -> u128 {
        self.flow_nanos + self.predict_nanos + self.sort_nanos + self.project_nanos
    }
}

/// One tracking step: predict all tracks forward by dt, absorb the snapshot,
/// then for an angle-balanced selection of buffered times assign measured
/// outputs to tracks by rank and project every track onto its hyperplane.
pub fn discrete_observe_step(
    mut st: DiscreteObserverState,
    snapshot: AnonymizedSnapshot,
    dt: f64,
    sys: &LinearSystem,
) -> Result<(DiscreteObserverState, DiscreteStepTiming)> {
    if !(dt > 0.0) {
        return Err(Error::invalid(format!("step dt {dt}")));
    }
    if snapshot.len() != st.tracks.len() {
        return Err(Error::shape(format!(
            "snapshot carries {} outputs for {} tracks",
            snapshot.len(),
            st.tracks.len()
        )));
    }
    let mut timing = DiscreteStepTiming::default();
    let clock = Instant::now();
    st.tracks = flow_linear(sys, &st.tracks, dt)?;
    timing.flow_nanos = clock.elapsed().as_nanos();
    let now = st.tracks.time();
    st.buffer.push(snapshot)?;
    st.buffer.evict(now);
    st.steps += 1;

    let eligible: Vec<&AnonymizedSnapshot> = st
        .buffer
        .iter()
        .filter(|s| s.time() <= now + SLACK)
        .collect();
    if eligible.is_empty() {
        return Ok((st, timing));
    }
    let planar = sys.dim() == 2;
    let mut usable: Vec<(&AnonymizedSnapshot, DVector<f64>, f64)> = Vec::new();
    for snap in eligible {
        match projection_direction(sys, snap.time() - now) {
            Ok(dir) => {
                let angle = if planar { projective_angle(dir.v()) } else { 0.0 };
                usable.push((snap, dir.functional(), angle));
            }
            Err(Error::DegenerateDirection) => {}
            Err(e) => return Err(e),
        }
    }
    if usable.is_empty() {
        return Ok((st, timing));
    }
    let angles: Vec<f64> = usable.iter().map(|(_, _, a)| *a).collect();
    let sel_seed = child_seed(st.config.rng_seed, &[0x7472_6163_6b, st.steps]);
    let picked = select_by_angle(&angles, st.config.k_times, sel_seed);

    let mut particles = st.tracks.particles().to_vec();
    for pick in picked {
        let (snap, w, _) = &usable[pick];
        let clock = Instant::now();
        let predicted: Vec<f64> = particles.iter().map(|x| w.dot(x)).collect();
        timing.predict_nanos += clock.elapsed().as_nanos();
        let clock = Instant::now();
        let a = assign_1d(snap.outputs(), &predicted)?;
        timing.sort_nanos += clock.elapsed().as_nanos();
        let clock = Instant::now();
        let targets = a.track_targets(snap.outputs())?;
        particles = particles
            .par_iter()
            .enumerate()
            .map(|(i, x)| kaczmarz_project_relaxed(x, w, targets[i], st.config.relaxation))
            .collect::<Result<_>>()?;
        timing.project_nanos += clock.elapsed().as_nanos();
    }
    st.tracks = ParticleEnsemble::new(particles, now)?;
    Ok((st, timing))
}

/// Streaming driver: one step per arriving snapshot. A snapshot stamped at the
/// current track time (the first one, typically) is only buffered. Returns the
/// track estimate after each snapshot and the accumulated step timings.
pub fn discrete_observe(
    sys: &LinearSystem,
    snapshots: &[AnonymizedSnapshot],
    init: ParticleEnsemble,
    horizon: f64,
    config: DiscreteObserverConfig,
) -> Result<(Vec<ParticleEnsemble>, DiscreteStepTiming)> {
    let mut st = DiscreteObserverState::new(init, horizon, config)?;
    let mut out = Vec::with_capacity(snapshots.len());
    let mut total = DiscreteStepTiming::default();
    for snap in snapshots {
        let dt = snap.time() - st.time();
        if dt > SLACK {
            let (next, timing) = discrete_observe_step(st, snap.clone(), dt, sys)?;
            st = next;
            total.flow_nanos += timing.flow_nanos;
            total.predict_nanos += timing.predict_nanos;
            total.sort_nanos += timing.sort_nanos;
            total.project_nanos += timing.project_nanos;
        } else if dt >= -SLACK {
            st.push_snapshot(snap.clone())?;
        } else {
            return Err(Error::invalid(format!(
                "snapshot at t = {} behind tracks at t = {}",
                snap.time(),
                st.time()
            )));
        }
        out.push(st.tracks().clone());
    }
    Ok((out, total))
}

/// Seeded per-snapshot reduction to ceil(fraction * N) outputs. Kept indices
/// are re-sorted so fraction = 1 reproduces the input exactly.
pub fn subsample_snapshots(
    snapshots: &[AnonymizedSnapshot],
    fraction: f64,
    seed: u64,
) -> Result<Vec<AnonymizedSnapshot>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::invalid(format!("subsample fraction {fraction}")));
    }
    snapshots
        .iter()
        .enumerate()
        .map(|(k, snap)| {
            let m = ((fraction * snap.len() as f64).ceil() as usize).clamp(1, snap.len());
            let mut keep: Vec<usize> =
                rand::seq::index::sample(&mut stream(seed, &[0x7375_62, k as u64]), snap.len(), m)
                    .iter()
                    .collect();
            keep.sort_unstable();
            AnonymizedSnapshot::new(snap.time(), keep.iter().map(|&i| snap.outputs()[i]).collect())
        })
        .collect()
}

pub fn subsample_ensemble(
    ens: &ParticleEnsemble,
    fraction: f64,
    seed: u64,
) -> Result<ParticleEnsemble> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::invalid(format!("subsample fraction {fraction}")));
    }
    let m = ((fraction * ens.len() as f64).ceil() as usize).clamp(1, ens.len());
    let mut keep: Vec<usize> =
        rand::seq::index::sample(&mut stream(seed, &[0x7375_6269]), ens.len(), m)
            .iter()
            .collect();
    keep.sort_unstable();
    ParticleEnsemble::new(
        keep.iter().map(|&i| ens.particles()[i].clone()).collect(),
        ens.time(),
    )
}

/// Rough-estimate mode: tracks a seeded subsample of the population, trading
/// accuracy for the smaller per-step sort.
pub fn subsample_tracker(
    sys: &LinearSystem,
    snapshots: &[AnonymizedSnapshot],
    init: &ParticleEnsemble,
    fraction: f64,
    horizon: f64,
    config: DiscreteObserverConfig,
) -> Result<(Vec<ParticleEnsemble>, DiscreteStepTiming)> {
    let reduced = subsample_snapshots(snapshots, fraction, config.rng_seed)?;
    let reduced_init = subsample_ensemble(init, fraction, config.rng_seed)?;
    discrete_observe(sys, &reduced, reduced_init, horizon, config)
}
