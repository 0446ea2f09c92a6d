//! Pipelines behind the subcommands. Each mode has a pure stage returning
//! in-memory results (the acceptance suite drives these directly) and
//! `run_scenario` wraps them with artifact emission.

use std::fs;
use std::time::Instant;

use nalgebra::DVector;

use crate::correction::CorrectionConfig;
use crate::discrete::{
    assign_1d, discrete_estimate, discrete_observe_step, kaczmarz_project, subsample_snapshots,
    AnonymizedSnapshot, DiscreteEstimate, DiscreteObserverConfig, DiscreteObserverState,
    DiscreteStepTiming,
};
use crate::dynamics::{projection_direction, LinearSystem, Model, ParticleEnsemble};
use crate::error::{Error, Result};
use crate::estimator::{
    estimate_initial, initial_ensemble, simulate_snapshots, EstimateOutcome, MeasurementSnapshot,
    SweepOrder, SweepSchedule,
};
use crate::metrics::sliced_w1;
use crate::observer::{observer_step, ObserverConfig, ObserverState, SLACK};
use crate::rng::child_seed;

use super::config::{Mode, ScenarioConfig};
use super::{csvio, svg};

/// Directions used for the per-step tracking metric.
const METRIC_DIRS: usize = 200;

// child-seed tags per pipeline stage; truth sampling burns tag 1
const TAG_SNAPSHOTS: u64 = 2;
const TAG_CORRECTION: u64 = 3;
const TAG_INIT: u64 = 4;
const TAG_METRIC: u64 = 5;
const TAG_SUBSAMPLE: u64 = 6;

/// Measurement stamps for a run, ascending. Batch modes take the configured
/// times; moving-horizon modes lay a uniform grid from t = -warmup through
/// the last prediction time.
pub fn measurement_grid(cfg: &ScenarioConfig) -> Result<Vec<f64>> {
    match cfg.mode {
        Mode::Estimate | Mode::EstimateDiscrete => {
            let mut times = cfg
                .snapshot_times
                .clone()
                .ok_or_else(|| Error::config("batch modes need snapshot_times"))?;
            times.sort_by(f64::total_cmp);
            Ok(times)
        }
        Mode::Observe | Mode::TrackDiscrete => {
            let h = cfg.snapshot_spacing;
            let end = cfg.steps as f64 * cfg.dt;
            // the epsilon keeps a span that is a whole multiple of h from
            // losing its last tick to division round-off
            let ticks = ((cfg.warmup + end) / h + 1e-6).floor() as usize;
            Ok((0..=ticks).map(|k| k as f64 * h - cfg.warmup).collect())
        }
    }
}

fn anonymized_snapshots(
    model: &Model,
    truth: &ParticleEnsemble,
    grid: &[f64],
    noise_sigma: f64,
    seed: u64,
) -> Result<Vec<AnonymizedSnapshot>> {
    // drawing exactly N of N without replacement shuffles the outputs, which
    // is all the anonymization the discrete lane needs
    simulate_snapshots(model, truth, grid, truth.len(), noise_sigma, seed)?
        .into_iter()
        .map(|s| AnonymizedSnapshot::new(s.time(), s.samples().to_vec()))
        .collect()
}

pub struct EstimateRun {
    pub truth0: ParticleEnsemble,
    pub snapshots: Vec<MeasurementSnapshot>,
    pub outcome: EstimateOutcome,
}

pub fn run_estimate(cfg: &ScenarioConfig) -> Result<EstimateRun> {
    let model = cfg.system.build()?;
    let truth0 = cfg.truth_ensemble()?;
    let grid = measurement_grid(cfg)?;
    let snapshots = simulate_snapshots(
        &model,
        &truth0,
        &grid,
        cfg.samples(),
        cfg.noise_sigma,
        child_seed(cfg.seed, &[TAG_SNAPSHOTS]),
    )?;
    let schedule = SweepSchedule::new(SweepOrder::RandomShuffle, cfg.sweeps)?;
    let mut ccfg = CorrectionConfig::new(cfg.bins);
    ccfg.solver = cfg.solver;
    ccfg.rng_seed = child_seed(cfg.seed, &[TAG_CORRECTION]);
    let outcome = estimate_initial(
        &model,
        &snapshots,
        cfg.particles,
        &cfg.init_spec(),
        &schedule,
        &ccfg,
    )?;
    Ok(EstimateRun {
        truth0,
        snapshots,
        outcome,
    })
}

pub struct DiscreteEstimateRun {
    pub truth0: ParticleEnsemble,
    pub snapshots: Vec<AnonymizedSnapshot>,
    pub outcome: DiscreteEstimate,
}

pub fn run_discrete_estimate(cfg: &ScenarioConfig) -> Result<DiscreteEstimateRun> {
    let model = cfg.system.build()?;
    let Model::Linear(sys) = &model else {
        return Err(Error::config("discrete modes need a linear system"));
    };
    let truth0 = cfg.truth_ensemble()?;
    let grid = measurement_grid(cfg)?;
    let snapshots = anonymized_snapshots(
        &model,
        &truth0,
        &grid,
        cfg.noise_sigma,
        child_seed(cfg.seed, &[TAG_SNAPSHOTS]),
    )?;
    let init = ParticleEnsemble::new(
        vec![DVector::zeros(truth0.dim()); truth0.len()],
        0.0,
    )?;
    let schedule = SweepSchedule::new(SweepOrder::RandomShuffle, cfg.sweeps)?;
    let dcfg = crate::discrete::DiscreteConfig {
        relaxation: cfg.relaxation,
        rng_seed: child_seed(cfg.seed, &[TAG_CORRECTION]),
    };
    let outcome = discrete_estimate(sys, &snapshots, &init, &schedule, &dcfg)?;
    Ok(DiscreteEstimateRun {
        truth0,
        snapshots,
        outcome,
    })
}

pub struct ObserveStep {
    pub time: f64,
    pub estimate: ParticleEnsemble,
    /// Distance to the truth population flowed to this time.
    pub sliced_w1: f64,
    pub runtime_ms: f64,
}

pub struct ObserveRun {
    pub truth0: ParticleEnsemble,
    pub snapshots: Vec<MeasurementSnapshot>,
    pub init: ParticleEnsemble,
    pub steps: Vec<ObserveStep>,
}

impl ObserveRun {
    pub fn final_estimate(&self) -> &ParticleEnsemble {
        self.steps.last().map_or(&self.init, |s| &s.estimate)
    }
}

/// Stamps at or before `cutoff` are delivered; the rest stay pending. With a
/// one-tick measurement lag the pool at a prediction time t holds only
/// strictly older stamps, which is the protocol the moving-horizon scenarios
/// are built around.
fn delivery_cutoff(t: f64, cfg: &ScenarioConfig) -> f64 {
    t - cfg.measurement_lag as f64 * cfg.snapshot_spacing + SLACK
}

pub fn run_observe(cfg: &ScenarioConfig) -> Result<ObserveRun> {
    let model = cfg.system.build()?;
    let truth0 = cfg.truth_ensemble()?;
    let grid = measurement_grid(cfg)?;
    let snapshots = simulate_snapshots(
        &model,
        &truth0,
        &grid,
        cfg.samples(),
        cfg.noise_sigma,
        child_seed(cfg.seed, &[TAG_SNAPSHOTS]),
    )?;

    let cutoff0 = delivery_cutoff(0.0, cfg);
    let delivered: Vec<MeasurementSnapshot> = snapshots
        .iter()
        .filter(|s| s.time() <= cutoff0)
        .cloned()
        .collect();
    let in_horizon: Vec<MeasurementSnapshot> = delivered
        .iter()
        .filter(|s| s.time() >= -cfg.horizon - SLACK)
        .cloned()
        .collect();
    if in_horizon.is_empty() {
        return Err(Error::config(
            "observe needs at least one measurement before t = 0; increase warmup",
        ));
    }
    let init = initial_ensemble(
        &model,
        &in_horizon,
        cfg.particles,
        &cfg.init_spec(),
        0.0,
        child_seed(cfg.seed, &[TAG_INIT]),
    )?;

    let mut ccfg = CorrectionConfig::new(cfg.bins);
    ccfg.solver = cfg.solver;
    ccfg.rng_seed = child_seed(cfg.seed, &[TAG_CORRECTION]);
    let mut st = ObserverState::new(
        init.clone(),
        cfg.horizon,
        ObserverConfig {
            correction: ccfg,
            k_times: cfg.k_times,
            passes: 1,
        },
    )?;
    for snap in &delivered {
        st.push_snapshot(snap.clone())?;
    }

    let mut pending = snapshots.iter().skip(delivered.len()).peekable();
    let mut truth_t = truth0.clone();
    let mut steps = Vec::with_capacity(cfg.steps);
    for s in 1..=cfg.steps {
        let clock = Instant::now();
        let cutoff = delivery_cutoff(s as f64 * cfg.dt, cfg);
        let mut fresh: Vec<&MeasurementSnapshot> = Vec::new();
        while pending.peek().is_some_and(|snap| snap.time() <= cutoff) {
            fresh.push(pending.next().unwrap());
        }
        let Some(last) = fresh.pop() else {
            return Err(Error::config(format!(
                "no measurement reaches the observer for step {s}; the grid is too short"
            )));
        };
        for snap in fresh {
            st.push_snapshot(snap.clone())?;
        }
        st = observer_step(st, last.clone(), cfg.dt, &model)?;
        let runtime_ms = clock.elapsed().as_secs_f64() * 1e3;
        truth_t = model.flow(&truth_t, cfg.dt)?;
        let sw = sliced_w1(
            st.estimate(),
            &truth_t,
            METRIC_DIRS,
            child_seed(cfg.seed, &[TAG_METRIC, s as u64]),
        )?;
        steps.push(ObserveStep {
            time: st.time(),
            estimate: st.estimate().clone(),
            sliced_w1: sw,
            runtime_ms,
        });
    }
    Ok(ObserveRun {
        truth0,
        snapshots,
        init,
        steps,
    })
}

pub struct TrackStep {
    pub time: f64,
    pub tracks: ParticleEnsemble,
    pub sliced_w1: f64,
    pub runtime_ms: f64,
    pub timing: DiscreteStepTiming,
}

pub struct TrackRun {
    pub truth0: ParticleEnsemble,
    pub snapshots: Vec<AnonymizedSnapshot>,
    pub init: ParticleEnsemble,
    pub steps: Vec<TrackStep>,
}

impl TrackRun {
    pub fn final_tracks(&self) -> &ParticleEnsemble {
        self.steps.last().map_or(&self.init, |s| &s.tracks)
    }

    pub fn total_timing(&self) -> DiscreteStepTiming {
        let mut total = DiscreteStepTiming::default();
        for s in &self.steps {
            total.flow_nanos += s.timing.flow_nanos;
            total.predict_nanos += s.timing.predict_nanos;
            total.sort_nanos += s.timing.sort_nanos;
            total.project_nanos += s.timing.project_nanos;
        }
        total
    }
}

/// Rank-pairs the newest delivered snapshot to the all-zero state and projects
/// each track onto its measurement hyperplane, so track i starts at the i-th
/// smallest initial output.
fn init_tracks(
    sys: &LinearSystem,
    newest: &AnonymizedSnapshot,
    n: usize,
    dim: usize,
) -> Result<ParticleEnsemble> {
    let dir = projection_direction(sys, newest.time())?;
    let w = dir.functional();
    let zeros = DVector::zeros(dim);
    let predicted = vec![0.0; n];
    let a = assign_1d(newest.outputs(), &predicted)?;
    let targets = a.track_targets(newest.outputs())?;
    ParticleEnsemble::new(
        targets
            .iter()
            .map(|&y| kaczmarz_project(&zeros, &w, y))
            .collect::<Result<_>>()?,
        0.0,
    )
}

pub fn run_track(cfg: &ScenarioConfig) -> Result<TrackRun> {
    let model = cfg.system.build()?;
    let Model::Linear(sys) = &model else {
        return Err(Error::config("discrete modes need a linear system"));
    };
    let truth0 = cfg.truth_ensemble()?;
    let grid = measurement_grid(cfg)?;
    let mut snapshots = anonymized_snapshots(
        &model,
        &truth0,
        &grid,
        cfg.noise_sigma,
        child_seed(cfg.seed, &[TAG_SNAPSHOTS]),
    )?;
    if let Some(f) = cfg.subsample_fraction {
        snapshots = subsample_snapshots(&snapshots, f, child_seed(cfg.seed, &[TAG_SUBSAMPLE]))?;
    }
    let n = snapshots[0].len();

    let cutoff0 = delivery_cutoff(0.0, cfg);
    let delivered: Vec<AnonymizedSnapshot> = snapshots
        .iter()
        .filter(|s| s.time() <= cutoff0)
        .cloned()
        .collect();
    let Some(newest) = delivered.last() else {
        return Err(Error::config(
            "tracking needs at least one measurement before t = 0; increase warmup",
        ));
    };
    let init = match cfg.init_box {
        // tracks start as a prior cloud; ranks bind them to agents over time
        Some(_) => initial_ensemble(
            &model,
            &[],
            n,
            &cfg.init_spec(),
            0.0,
            child_seed(cfg.seed, &[TAG_INIT]),
        )?,
        None => init_tracks(sys, newest, n, truth0.dim())?,
    };

    let mut st = DiscreteObserverState::new(
        init.clone(),
        cfg.horizon,
        DiscreteObserverConfig {
            k_times: cfg.k_times,
            relaxation: cfg.relaxation,
            rng_seed: child_seed(cfg.seed, &[TAG_CORRECTION]),
        },
    )?;
    for snap in &delivered {
        if snap.time() >= -cfg.horizon - SLACK {
            st.push_snapshot(snap.clone())?;
        }
    }

    let mut pending = snapshots.iter().skip(delivered.len()).peekable();
    let mut truth_t = truth0.clone();
    let mut steps = Vec::with_capacity(cfg.steps);
    for s in 1..=cfg.steps {
        let clock = Instant::now();
        let cutoff = delivery_cutoff(s as f64 * cfg.dt, cfg);
        let mut fresh: Vec<&AnonymizedSnapshot> = Vec::new();
        while pending.peek().is_some_and(|snap| snap.time() <= cutoff) {
            fresh.push(pending.next().unwrap());
        }
        let Some(last) = fresh.pop() else {
            return Err(Error::config(format!(
                "no measurement reaches the tracker for step {s}; the grid is too short"
            )));
        };
        for snap in fresh {
            st.push_snapshot(snap.clone())?;
        }
        let (next, timing) = discrete_observe_step(st, last.clone(), cfg.dt, sys)?;
        st = next;
        let runtime_ms = clock.elapsed().as_secs_f64() * 1e3;
        truth_t = model.flow(&truth_t, cfg.dt)?;
        let sw = sliced_w1(
            st.tracks(),
            &truth_t,
            METRIC_DIRS,
            child_seed(cfg.seed, &[TAG_METRIC, s as u64]),
        )?;
        steps.push(TrackStep {
            time: st.time(),
            tracks: st.tracks().clone(),
            sliced_w1: sw,
            runtime_ms,
            timing,
        });
    }
    Ok(TrackRun {
        truth0,
        snapshots,
        init,
        steps,
    })
}

fn prepare_out_dir(cfg: &ScenarioConfig) -> Result<std::path::PathBuf> {
    let dir = cfg.out_dir.clone();
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("config.json"), cfg.to_json()? + "\n")?;
    Ok(dir)
}

fn x1(ens: &ParticleEnsemble) -> Vec<f64> {
    ens.particles().iter().map(|p| p[0]).collect()
}

/// Truth and snapshot artifacts only.
pub fn run_simulate_only(cfg: &ScenarioConfig) -> Result<()> {
    let dir = prepare_out_dir(cfg)?;
    let model = cfg.system.build()?;
    let truth0 = cfg.truth_ensemble()?;
    let grid = measurement_grid(cfg)?;
    csvio::write_ensemble(&dir.join("truth_t0.csv"), &truth0)?;
    match cfg.mode {
        Mode::Estimate | Mode::Observe => {
            let snaps = simulate_snapshots(
                &model,
                &truth0,
                &grid,
                cfg.samples(),
                cfg.noise_sigma,
                child_seed(cfg.seed, &[TAG_SNAPSHOTS]),
            )?;
            csvio::write_snapshots(&dir.join("snapshots.csv"), &snaps)?;
        }
        Mode::EstimateDiscrete | Mode::TrackDiscrete => {
            let snaps = anonymized_snapshots(
                &model,
                &truth0,
                &grid,
                cfg.noise_sigma,
                child_seed(cfg.seed, &[TAG_SNAPSHOTS]),
            )?;
            csvio::write_anonymized(&dir.join("snapshots.csv"), &snaps)?;
        }
    }
    println!(
        "simulated {} measurement times into {}",
        grid.len(),
        dir.display()
    );
    Ok(())
}

pub fn run_scenario(cfg: &ScenarioConfig) -> Result<()> {
    let dir = prepare_out_dir(cfg)?;
    match cfg.mode {
        Mode::Estimate => {
            let run = run_estimate(cfg)?;
            csvio::write_ensemble(&dir.join("truth_t0.csv"), &run.truth0)?;
            csvio::write_snapshots(&dir.join("snapshots.csv"), &run.snapshots)?;
            csvio::write_ensemble(&dir.join("estimate.csv"), &run.outcome.ensemble)?;
            let totals: Vec<(f64, f64)> = run
                .outcome
                .trace
                .sweep_totals
                .iter()
                .enumerate()
                .map(|(k, &v)| (k as f64, v))
                .collect();
            csvio::write_series(&dir.join("sweep_mismatch.csv"), "sweep,total_mismatch", &totals)?;
            svg::scatter(
                &dir.join("scatter.svg"),
                &cfg.scenario,
                &[("truth", &run.truth0), ("estimate", &run.outcome.ensemble)],
            )?;
            svg::histograms(
                &dir.join("outputs.svg"),
                &format!("{} first coordinate", cfg.scenario),
                &[("truth", &x1(&run.truth0)[..]), ("estimate", &x1(&run.outcome.ensemble)[..])],
                cfg.bins,
            )?;
            let t = &run.outcome.trace.sweep_totals;
            println!(
                "estimate: mismatch {:.4} -> {:.4} over {} sweeps; artifacts in {}",
                t.first().copied().unwrap_or(f64::NAN),
                t.last().copied().unwrap_or(f64::NAN),
                cfg.sweeps,
                dir.display()
            );
        }
        Mode::EstimateDiscrete => {
            let run = run_discrete_estimate(cfg)?;
            csvio::write_ensemble(&dir.join("truth_t0.csv"), &run.truth0)?;
            csvio::write_anonymized(&dir.join("snapshots.csv"), &run.snapshots)?;
            csvio::write_ensemble(&dir.join("estimate.csv"), &run.outcome.ensemble)?;
            let rows: Vec<(f64, f64)> = run
                .outcome
                .residuals
                .iter()
                .enumerate()
                .map(|(k, &v)| (k as f64, v))
                .collect();
            csvio::write_series(&dir.join("residuals.csv"), "sweep,mean_abs_residual", &rows)?;
            svg::scatter(
                &dir.join("scatter.svg"),
                &cfg.scenario,
                &[("truth", &run.truth0), ("estimate", &run.outcome.ensemble)],
            )?;
            println!(
                "discrete estimate: residual {:.3e} -> {:.3e} after {} sweeps; artifacts in {}",
                run.outcome.residuals.first().copied().unwrap_or(f64::NAN),
                run.outcome.residuals.last().copied().unwrap_or(f64::NAN),
                cfg.sweeps,
                dir.display()
            );
        }
        Mode::Observe => {
            let run = run_observe(cfg)?;
            csvio::write_ensemble(&dir.join("truth_t0.csv"), &run.truth0)?;
            csvio::write_snapshots(&dir.join("snapshots.csv"), &run.snapshots)?;
            csvio::write_ensemble(&dir.join("init.csv"), &run.init)?;
            let mut metrics = Vec::with_capacity(run.steps.len());
            for (k, step) in run.steps.iter().enumerate() {
                csvio::write_ensemble(&dir.join(format!("step_{}.csv", k + 1)), &step.estimate)?;
                metrics.push(csvio::MetricsRow {
                    time: step.time,
                    sliced_w1: step.sliced_w1,
                    runtime_ms: step.runtime_ms,
                });
            }
            csvio::write_metrics(&dir.join("metrics.csv"), &metrics)?;
            csvio::write_ensemble(&dir.join("estimate.csv"), run.final_estimate())?;
            let model = cfg.system.build()?;
            let truth_final = model.flow(&run.truth0, cfg.steps as f64 * cfg.dt)?;
            svg::scatter(
                &dir.join("scatter.svg"),
                &cfg.scenario,
                &[("truth", &truth_final), ("estimate", run.final_estimate())],
            )?;
            let sw: Vec<String> = run
                .steps
                .iter()
                .map(|s| format!("{:.4}", s.sliced_w1))
                .collect();
            println!(
                "observer: per-step distance to truth [{}]; artifacts in {}",
                sw.join(", "),
                dir.display()
            );
        }
        Mode::TrackDiscrete => {
            let run = run_track(cfg)?;
            csvio::write_ensemble(&dir.join("truth_t0.csv"), &run.truth0)?;
            csvio::write_anonymized(&dir.join("snapshots.csv"), &run.snapshots)?;
            csvio::write_ensemble(&dir.join("init.csv"), &run.init)?;
            let all_steps: Vec<ParticleEnsemble> = std::iter::once(run.init.clone())
                .chain(run.steps.iter().map(|s| s.tracks.clone()))
                .collect();
            csvio::write_tracks(&dir.join("tracks.csv"), &all_steps)?;
            let metrics: Vec<csvio::MetricsRow> = run
                .steps
                .iter()
                .map(|s| csvio::MetricsRow {
                    time: s.time,
                    sliced_w1: s.sliced_w1,
                    runtime_ms: s.runtime_ms,
                })
                .collect();
            csvio::write_metrics(&dir.join("metrics.csv"), &metrics)?;
            let timing: Vec<csvio::TimingRow> = run
                .steps
                .iter()
                .map(|s| csvio::TimingRow {
                    time: s.time,
                    flow_nanos: s.timing.flow_nanos,
                    predict_nanos: s.timing.predict_nanos,
                    sort_nanos: s.timing.sort_nanos,
                    project_nanos: s.timing.project_nanos,
                })
                .collect();
            csvio::write_timing(&dir.join("timing_breakdown.csv"), &timing)?;
            csvio::write_ensemble(&dir.join("estimate.csv"), run.final_tracks())?;
            let model = cfg.system.build()?;
            let truth_final = model.flow(&run.truth0, cfg.steps as f64 * cfg.dt)?;
            svg::scatter(
                &dir.join("scatter.svg"),
                &cfg.scenario,
                &[("truth", &truth_final), ("tracks", run.final_tracks())],
            )?;
            let total = run.total_timing();
            println!(
                "tracker: final distance to truth {:.4}; sort share {:.0}% of {:.1} ms stepped; artifacts in {}",
                run.steps.last().map_or(f64::NAN, |s| s.sliced_w1),
                100.0 * total.sort_nanos as f64 / total.total_nanos().max(1) as f64,
                total.total_nanos() as f64 / 1e6,
                dir.display()
            );
        }
    }
    Ok(())
}
