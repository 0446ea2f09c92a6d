//! CSV artifacts. Floats are written with the shortest representation that
//! round-trips, so re-reading a file reproduces the values bit for bit.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::DVector;

use crate::discrete::AnonymizedSnapshot;
use crate::dynamics::ParticleEnsemble;
use crate::error::{Error, Result};
use crate::estimator::MeasurementSnapshot;

fn csv_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Csv {
        path: path.display().to_string(),
        line,
        msg: msg.into(),
    }
}

fn parse_f64(path: &Path, line: usize, field: &str) -> Result<f64> {
    field
        .trim()
        .parse()
        .map_err(|_| csv_err(path, line, format!("bad float {field:?}")))
}

pub fn write_ensemble(path: &Path, ens: &ParticleEnsemble) -> Result<()> {
    let dim = ens.dim();
    let mut out = String::from("id");
    for j in 1..=dim {
        write!(out, ",x{j}").unwrap();
    }
    out.push_str(",t\n");
    for (i, p) in ens.particles().iter().enumerate() {
        write!(out, "{i}").unwrap();
        for j in 0..dim {
            write!(out, ",{}", p[j]).unwrap();
        }
        writeln!(out, ",{}", ens.time()).unwrap();
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_ensemble(path: &Path) -> Result<ParticleEnsemble> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| csv_err(path, 1, "empty file"))?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() < 3 || cols[0] != "id" || *cols.last().unwrap() != "t" {
        return Err(csv_err(path, 1, format!("unexpected header {header:?}")));
    }
    let dim = cols.len() - 2;
    let mut particles = Vec::new();
    let mut time = None;
    for (idx, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != dim + 2 {
            return Err(csv_err(
                path,
                idx + 1,
                format!("expected {} fields, got {}", dim + 2, fields.len()),
            ));
        }
        let coords: Vec<f64> = fields[1..=dim]
            .iter()
            .map(|f| parse_f64(path, idx + 1, f))
            .collect::<Result<_>>()?;
        let t = parse_f64(path, idx + 1, fields[dim + 1])?;
        match time {
            None => time = Some(t),
            Some(t0) if t0 != t => {
                return Err(csv_err(path, idx + 1, "mixed timestamps in one ensemble"))
            }
            _ => {}
        }
        particles.push(DVector::from_vec(coords));
    }
    ParticleEnsemble::new(particles, time.unwrap_or(0.0))
}

fn write_time_value(path: &Path, rows: impl Iterator<Item = (f64, f64)>) -> Result<()> {
    let mut out = String::from("t,y\n");
    for (t, y) in rows {
        writeln!(out, "{t},{y}").unwrap();
    }
    fs::write(path, out)?;
    Ok(())
}

fn read_time_value(path: &Path) -> Result<Vec<(f64, Vec<f64>)>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| csv_err(path, 1, "empty file"))?;
    if header != "t,y" {
        return Err(csv_err(path, 1, format!("unexpected header {header:?}")));
    }
    // rows with the same stamp stay grouped only when consecutive
    let mut groups: Vec<(f64, Vec<f64>)> = Vec::new();
    for (idx, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let Some((ts, ys)) = line.split_once(',') else {
            return Err(csv_err(path, idx + 1, "expected two fields"));
        };
        let t = parse_f64(path, idx + 1, ts)?;
        let y = parse_f64(path, idx + 1, ys)?;
        match groups.last_mut() {
            Some((t0, ys)) if *t0 == t => ys.push(y),
            _ => groups.push((t, vec![y])),
        }
    }
    Ok(groups)
}

pub fn write_snapshots(path: &Path, snaps: &[MeasurementSnapshot]) -> Result<()> {
    write_time_value(
        path,
        snaps
            .iter()
            .flat_map(|s| s.samples().iter().map(move |&y| (s.time(), y))),
    )
}

pub fn read_snapshots(path: &Path) -> Result<Vec<MeasurementSnapshot>> {
    read_time_value(path)?
        .into_iter()
        .map(|(t, ys)| MeasurementSnapshot::new(t, ys))
        .collect()
}

pub fn write_anonymized(path: &Path, snaps: &[AnonymizedSnapshot]) -> Result<()> {
    write_time_value(
        path,
        snaps
            .iter()
            .flat_map(|s| s.outputs().iter().map(move |&y| (s.time(), y))),
    )
}

pub fn read_anonymized(path: &Path) -> Result<Vec<AnonymizedSnapshot>> {
    read_time_value(path)?
        .into_iter()
        .map(|(t, ys)| AnonymizedSnapshot::new(t, ys))
        .collect()
}

/// One row per agent per recorded step.
pub fn write_tracks(path: &Path, steps: &[ParticleEnsemble]) -> Result<()> {
    let dim = steps.first().map_or(0, ParticleEnsemble::dim);
    let mut out = String::from("t,agent_id");
    for j in 1..=dim {
        write!(out, ",x{j}").unwrap();
    }
    out.push('\n');
    for ens in steps {
        for (i, p) in ens.particles().iter().enumerate() {
            write!(out, "{},{i}", ens.time()).unwrap();
            for j in 0..dim {
                write!(out, ",{}", p[j]).unwrap();
            }
            out.push('\n');
        }
    }
    fs::write(path, out)?;
    Ok(())
}

pub struct MetricsRow {
    pub time: f64,
    pub sliced_w1: f64,
    pub runtime_ms: f64,
}

pub fn write_metrics(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut out = String::from("t,sliced_w1,runtime_ms\n");
    for r in rows {
        writeln!(out, "{},{},{:.3}", r.time, r.sliced_w1, r.runtime_ms).unwrap();
    }
    fs::write(path, out)?;
    Ok(())
}

pub struct TimingRow {
    pub time: f64,
    pub flow_nanos: u128,
    pub predict_nanos: u128,
    pub sort_nanos: u128,
    pub project_nanos: u128,
}

pub fn write_timing(path: &Path, rows: &[TimingRow]) -> Result<()> {
    let mut out = String::from("t,flow_nanos,predict_nanos,sort_nanos,project_nanos\n");
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{}",
            r.time, r.flow_nanos, r.predict_nanos, r.sort_nanos, r.project_nanos
        )
        .unwrap();
    }
    fs::write(path, out)?;
    Ok(())
}

/// Generic two-column numeric table, used for traces and residual histories.
pub fn write_series(path: &Path, header: &str, rows: &[(f64, f64)]) -> Result<()> {
    let mut out = String::with_capacity(rows.len() * 16 + header.len() + 1);
    out.push_str(header);
    out.push('\n');
    for (a, b) in rows {
        writeln!(out, "{a},{b}").unwrap();
    }
    fs::write(path, out)?;
    Ok(())
}
