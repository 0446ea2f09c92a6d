//! Moving-horizon ensemble tracker: keeps a particle estimate of the current
//! state distribution and corrects it online against a sliding buffer of past
//! output snapshots, using backward measurement functionals so no particle is
//! ever flowed backwards in the linear case.

use std::collections::VecDeque;
use std::f64::consts::PI;

use rand::Rng;

use crate::correction::{correct_traced, unfolded_traced, CorrectionConfig};
use crate::dynamics::{projection_direction, Model, ParticleEnsemble};
use crate::error::{Error, Result};
use crate::estimator::MeasurementSnapshot;
use crate::rng::{child_seed, stream};

/// Timing slack for window comparisons, absorbs float drift in repeated
/// `t += dt` accumulation.
pub(crate) const SLACK: f64 = 1e-9;

pub trait Stamped {
    fn stamp(&self) -> f64;
}

impl Stamped for MeasurementSnapshot {
    fn stamp(&self) -> f64 {
        self.time()
    }
}

/// Time-ordered deque of stamped items covering at most the trailing window
/// [now - horizon, now]. Eviction is explicit so callers control "now".
#[derive(Clone, Debug)]
pub struct HorizonBuffer<S> {
    horizon: f64,
    items: VecDeque<S>,
}

impl<S: Stamped> HorizonBuffer<S> {
    pub fn new(horizon: f64) -> Result<Self> {
        if !(horizon > 0.0) || !horizon.is_finite() {
            return Err(Error::invalid(format!("horizon {horizon}")));
        }
        Ok(Self {
            horizon,
            items: VecDeque::new(),
        })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn push(&mut self, item: S) -> Result<()> {
        let t = item.stamp();
        if !t.is_finite() {
            return Err(Error::invalid(format!("stamp {t}")));
        }
        if let Some(last) = self.items.back() {
            if t < last.stamp() - SLACK {
                return Err(Error::invalid(format!(
                    "stamp {t} arrives after {}",
                    last.stamp()
                )));
            }
        }
        self.items.push_back(item);
        Ok(())
    }

    /// Drops items with stamp < now - horizon (minus slack, so an item exactly
    /// on the boundary survives).
    pub fn evict(&mut self, now: f64) {
        let cutoff = now - self.horizon - SLACK;
        while self.items.front().is_some_and(|s| s.stamp() < cutoff) {
            self.items.pop_front();
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &S> {
        self.items.iter()
    }

    pub fn latest_stamp(&self) -> Option<f64> {
        self.items.back().map(Stamped::stamp)
    }
}

#[derive(Clone, Debug)]
pub struct ObserverConfig {
    pub correction: CorrectionConfig,
    /// Buffered snapshots corrected against per step.
    pub k_times: usize,
    /// Full selection-and-correction rounds per step.
    pub passes: usize,
}

impl Default for ObserverConfig {
    fn default() -> Self {
        Self {
            correction: CorrectionConfig::default(),
            k_times: 10,
            passes: 1,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ObserverState {
    estimate: ParticleEnsemble,
    buffer: HorizonBuffer<MeasurementSnapshot>,
    config: ObserverConfig,
    steps: u64,
}

impl ObserverState {
    pub fn new(estimate: ParticleEnsemble, horizon: f64, config: ObserverConfig) -> Result<Self> {
        if config.k_times == 0 || config.passes == 0 {
            return Err(Error::config("k_times and passes must be >= 1"));
        }
        Ok(Self {
            estimate,
            buffer: HorizonBuffer::new(horizon)?,
            config,
            steps: 0,
        })
    }

    pub fn estimate(&self) -> &ParticleEnsemble {
        &self.estimate
    }

    pub fn time(&self) -> f64 {
        self.estimate.time()
    }

    pub fn buffer(&self) -> &HorizonBuffer<MeasurementSnapshot> {
        &self.buffer
    }

    /// Feeds a snapshot without stepping, for measurements that arrive between
    /// prediction times. May be stamped ahead of the current estimate; it only
    /// participates in corrections once the estimate catches up.
    pub fn push_snapshot(&mut self, snapshot: MeasurementSnapshot) -> Result<()> {
        self.buffer.push(snapshot)?;
        self.buffer.evict(self.estimate.time());
        Ok(())
    }
}

/// Direction angle on the half-turn circle: v and -v are the same measurement.
pub(crate) fn projective_angle(v: &nalgebra::DVector<f64>) -> f64 {
    v[1].atan2(v[0]).rem_euclid(PI)
}

/// Sorted-by-angle visiting order, rotated so the walk starts just after the
/// widest empty arc of the half-turn circle. Cutting there turns the circle
/// into an interval covering only the occupied angle range.
fn circular_order(angles: &[f64]) -> Vec<usize> {
    let n = angles.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| angles[a].total_cmp(&angles[b]));
    if n < 2 {
        return order;
    }
    let gap_after = |pos: usize| -> f64 {
        let a = angles[order[pos]];
        let b = angles[order[(pos + 1) % n]];
        if pos + 1 == n {
            b + PI - a
        } else {
            b - a
        }
    };
    let mut seam = n - 1;
    let mut widest = gap_after(n - 1);
    for pos in 0..n - 1 {
        let g = gap_after(pos);
        if g > widest {
            widest = g;
            seam = pos;
        }
    }
    order.rotate_left((seam + 1) % n);
    order
}

/// Voronoi-style weights that make weighted sampling approximate a uniform
/// draw over the occupied part of the angle circle: after the seam cut, every
/// angle gets half the gap to each neighbour, boundary angles their full
/// single-sided gap. Returned in input order.
pub(crate) fn angle_spacing_weights(angles: &[f64]) -> Vec<f64> {
    let n = angles.len();
    if n <= 2 {
        return vec![1.0; n];
    }
    let order = circular_order(angles);
    let gap = |i: usize, j: usize| (angles[order[j]] - angles[order[i]]).rem_euclid(PI);
    let mut weights = vec![0.0; n];
    for k in 0..n {
        let left = if k == 0 { gap(0, 1) } else { gap(k - 1, k) };
        let right = if k == n - 1 { gap(n - 2, n - 1) } else { gap(k, k + 1) };
        weights[order[k]] = (left + right) / 2.0;
    }
    if weights.iter().sum::<f64>() <= 0.0 {
        return vec![1.0; n];
    }
    weights
}

/// Systematic weighted draw of k distinct indices: one pick per equal-weight
/// stratum along the circular angle order, with a random common offset. Low
/// dispersion is the point; independent draws spread too unevenly to keep the
/// selected angles near-uniform at small k.
pub(crate) fn select_by_angle(angles: &[f64], k: usize, seed: u64) -> Vec<usize> {
    let n = angles.len();
    if k >= n {
        return (0..n).collect();
    }
    let weights = angle_spacing_weights(angles);
    let order = circular_order(angles);
    let mut bounds = Vec::with_capacity(n);
    let mut acc = 0.0;
    for &idx in &order {
        acc += weights[idx];
        bounds.push(acc);
    }
    let stride = acc / k as f64;
    let offset = stream(seed, &[0x6472_6177]).random_range(0.0..stride);
    let mut taken = vec![false; n];
    let mut picked = Vec::with_capacity(k);
    let mut cursor = 0usize;
    for j in 0..k {
        let p = offset + j as f64 * stride;
        while cursor + 1 < n && p >= bounds[cursor] {
            cursor += 1;
        }
        // a single atom can swallow two strata; hand the extra pick to the
        // next free neighbour
        let mut c = cursor;
        while taken[c] {
            c = (c + 1) % n;
        }
        taken[c] = true;
        picked.push(order[c]);
    }
    picked
}

fn snapshot_angles(
    model: &Model,
    stamps: &[f64],
    now: f64,
) -> (Vec<Option<f64>>, bool) {
    match model {
        Model::Linear(sys) if sys.dim() == 2 => {
            let angles = stamps
                .iter()
                .map(|&tau| {
                    projection_direction(sys, tau - now)
                        .ok()
                        .map(|d| projective_angle(d.v()))
                })
                .collect();
            (angles, true)
        }
        // constant or non-planar directions carry no angle structure
        _ => (stamps.iter().map(|_| Some(0.0)).collect(), false),
    }
}

/// Draws `k` buffered snapshot times so their measurement angles spread as
/// uniformly as the buffer allows, anchored at the newest stamp. Returns all
/// times when `k` covers the buffer.
pub fn select_times(
    buffer: &HorizonBuffer<MeasurementSnapshot>,
    model: &Model,
    k: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let now = buffer.latest_stamp().ok_or(Error::Empty("snapshot buffer"))?;
    let stamps: Vec<f64> = buffer.iter().map(|s| s.time()).collect();
    let (angles, planar) = snapshot_angles(model, &stamps, now);
    let usable: Vec<(usize, f64)> = angles
        .iter()
        .enumerate()
        .filter_map(|(i, a)| a.map(|a| (i, a)))
        .collect();
    if usable.is_empty() {
        return Err(Error::Empty("non-degenerate snapshot directions"));
    }
    let fold: Vec<f64> = usable
        .iter()
        .map(|(_, a)| if planar { *a } else { 0.0 })
        .collect();
    Ok(select_by_angle(&fold, k, seed)
        .into_iter()
        .map(|i| stamps[usable[i].0])
        .collect())
}

/// One tracker step: flow the estimate forward by dt, absorb the new snapshot,
/// evict what fell out of the horizon, then correct the current-time particles
/// against an angle-balanced selection of buffered snapshots. The linear path
/// projects along w = transpose of C exp(A (tau - t)); the nonlinear path runs
/// flow-out corrections per snapshot and is markedly costlier.
pub fn observer_step(
    mut st: ObserverState,
    new_snapshot: MeasurementSnapshot,
    dt: f64,
    model: &Model,
) -> Result<ObserverState> {
    if !(dt > 0.0) {
        return Err(Error::invalid(format!("step dt {dt}")));
    }
    st.estimate = model.flow(&st.estimate, dt)?;
    let now = st.estimate.time();
    st.buffer.push(new_snapshot)?;
    st.buffer.evict(now);
    st.steps += 1;

    let eligible: Vec<&MeasurementSnapshot> = st
        .buffer
        .iter()
        .filter(|s| s.time() <= now + SLACK)
        .collect();
    if eligible.is_empty() {
        return Ok(st);
    }
    let stamps: Vec<f64> = eligible.iter().map(|s| s.time()).collect();
    let (angles, planar) = snapshot_angles(model, &stamps, now);
    let usable: Vec<usize> = (0..eligible.len()).filter(|&i| angles[i].is_some()).collect();
    if usable.is_empty() {
        return Ok(st);
    }
    let fold: Vec<f64> = usable
        .iter()
        .map(|&i| if planar { angles[i].unwrap() } else { 0.0 })
        .collect();

    let base = st.config.correction.rng_seed;
    let mut ens = st.estimate.clone();
    for pass in 0..st.config.passes as u64 {
        let sel_seed = child_seed(base, &[0x7365_6c65_6374, st.steps, pass]);
        let picked = select_by_angle(&fold, st.config.k_times, sel_seed);
        for (slot, pick) in picked.into_iter().enumerate() {
            let snap = eligible[usable[pick]];
            let cfg = st.config.correction.with_seed(child_seed(
                base,
                &[0x636f_7272, st.steps, pass, slot as u64],
            ));
            ens = match model {
                Model::Linear(sys) => {
                    match projection_direction(sys, snap.time() - now) {
                        Ok(dir) => correct_traced(&ens, &dir, snap.samples(), &cfg)?.0,
                        Err(Error::DegenerateDirection) => ens,
                        Err(e) => return Err(e),
                    }
                }
                Model::Nonlinear(sys) => unfolded_traced(&ens, sys, snap, &cfg)?.0,
            };
        }
    }
    st.estimate = ens;
    Ok(st)
}
