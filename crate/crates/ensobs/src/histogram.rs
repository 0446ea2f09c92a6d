//! Shared bin grids and normalized frequency vectors over scalar samples.

use crate::error::{Error, Result};

/// Uniform grid of `bins` half-open cells [e_j, e_{j+1}), last cell closed.
#[derive(Clone, Debug, PartialEq)]
pub struct BinGrid {
    edges: Vec<f64>,
}

impl BinGrid {
    pub fn uniform(lo: f64, hi: f64, bins: usize) -> Result<Self> {
        if bins == 0 {
            return Err(Error::invalid("bin count must be >= 1"));
        }
        if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::invalid(format!("bad grid range [{lo}, {hi}]")));
        }
        let span = hi - lo;
        let edges = (0..=bins)
            .map(|i| lo + span * (i as f64 / bins as f64))
            .collect();
        Ok(Self { edges })
    }

    pub fn bins(&self) -> usize {
        self.edges.len() - 1
    }

    pub fn edges(&self) -> &[f64] {
        &self.edges
    }

    pub fn lo(&self) -> f64 {
        self.edges[0]
    }

    pub fn hi(&self) -> f64 {
        *self.edges.last().unwrap()
    }

    pub fn width(&self) -> f64 {
        (self.hi() - self.lo()) / self.bins() as f64
    }

    pub fn left_edge(&self, j: usize) -> f64 {
        self.edges[j]
    }

    pub fn center(&self, j: usize) -> f64 {
        (self.edges[j] + self.edges[j + 1]) / 2.0
    }
}

/// Nonnegative masses summing to one.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbVector {
    masses: Vec<f64>,
}

impl ProbVector {
    pub fn new(masses: Vec<f64>) -> Result<Self> {
        if masses.is_empty() {
            return Err(Error::Empty("probability vector"));
        }
        if let Some(m) = masses.iter().find(|m| !m.is_finite() || **m < 0.0) {
            return Err(Error::NotNormalized(format!("negative or non-finite mass {m}")));
        }
        let total: f64 = masses.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::NotNormalized(format!("masses sum to {total}")));
        }
        Ok(Self { masses })
    }

    pub fn uniform(len: usize) -> Self {
        Self {
            masses: vec![1.0 / len as f64; len],
        }
    }

    pub fn len(&self) -> usize {
        self.masses.len()
    }

    pub fn is_empty(&self) -> bool {
        false // construction requires at least one entry
    }

    pub fn masses(&self) -> &[f64] {
        &self.masses
    }

    pub fn mass(&self, j: usize) -> f64 {
        self.masses[j]
    }
}

/// One uniform grid covering both sample sets, padded by 1% of the joint range
/// on each side so no sample sits on an outer edge. An all-equal union widens
/// to half a unit around the common value.
pub fn shared_grid(samples_a: &[f64], samples_b: &[f64], bins: usize) -> Result<BinGrid> {
    if samples_a.is_empty() || samples_b.is_empty() {
        return Err(Error::Empty("samples for shared grid"));
    }
    if bins == 0 {
        return Err(Error::invalid("bin count must be >= 1"));
    }
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &s in samples_a.iter().chain(samples_b) {
        if !s.is_finite() {
            return Err(Error::invalid(format!("non-finite sample {s}")));
        }
        lo = lo.min(s);
        hi = hi.max(s);
    }
    if lo == hi {
        return BinGrid::uniform(lo - 0.5, hi + 0.5, bins);
    }
    let pad = 0.01 * (hi - lo);
    BinGrid::uniform(lo - pad, hi + pad, bins)
}

/// Index of the cell containing `value`; interior edges belong to the cell on
/// their right, the top edge to the last cell.
pub fn bin_index(value: f64, grid: &BinGrid) -> Result<usize> {
    let edges = grid.edges();
    let last = grid.bins();
    if !value.is_finite() || value < edges[0] || value > edges[last] {
        return Err(Error::OutOfRange {
            value,
            lo: edges[0],
            hi: edges[last],
        });
    }
    if value == edges[last] {
        return Ok(last - 1);
    }
    // count of edges <= value, minus one; exact on stored edge values
    Ok(edges.partition_point(|e| *e <= value) - 1)
}

/// Normalized frequencies of `samples` over `grid`.
pub fn histogram(samples: &[f64], grid: &BinGrid) -> Result<ProbVector> {
    if samples.is_empty() {
        return Err(Error::Empty("samples for histogram"));
    }
    let mut counts = vec![0u64; grid.bins()];
    for &s in samples {
        counts[bin_index(s, grid)?] += 1;
    }
    let total = samples.len() as f64;
    ProbVector::new(counts.into_iter().map(|c| c as f64 / total).collect())
}
