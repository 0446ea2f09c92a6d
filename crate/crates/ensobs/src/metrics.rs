//! Reconstruction scoring: empirical 1D Wasserstein distance, its sliced
//! (random-projection) extension for particle ensembles, and total variation
//! on a shared grid.

use nalgebra::DVector;
use rand::Rng;
use rayon::prelude::*;

use crate::dynamics::ParticleEnsemble;
use crate::error::{Error, Result};
use crate::histogram::{histogram, shared_grid};
use crate::rng::stream;

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub name: String,
    pub value: f64,
    /// Direction or bin count behind the value, for the metrics CSV.
    pub detail: String,
}

impl MetricReport {
    pub fn new(name: impl Into<String>, value: f64, detail: impl Into<String>) -> Result<Self> {
        if !value.is_finite() || value < 0.0 {
            return Err(Error::invalid(format!("metric value {value}")));
        }
        Ok(Self {
            name: name.into(),
            value,
            detail: detail.into(),
        })
    }
}

fn sorted(values: &[f64]) -> Vec<f64> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

/// Mean absolute difference of the sorted samples; the exact 1D Wasserstein
/// distance between two equal-size empirical distributions. Strict about
/// sizes: see [`w1_samples_1d_subsampled`] for the lenient variant.
pub fn w1_samples_1d(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Empty("samples"));
    }
    if a.len() != b.len() {
        return Err(Error::shape(format!(
            "sample sizes {} vs {}; subsample to equal sizes first",
            a.len(),
            b.len()
        )));
    }
    let (sa, sb) = (sorted(a), sorted(b));
    Ok(sa
        .iter()
        .zip(&sb)
        .map(|(x, y)| (x - y).abs())
        .sum::<f64>()
        / a.len() as f64)
}

/// Sorted-matching distance after seeded subsampling of the larger set, so
/// unequal sizes keep the formula exact.
pub fn w1_samples_1d_subsampled(a: &[f64], b: &[f64], seed: u64) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Empty("samples"));
    }
    let m = a.len().min(b.len());
    let reduce = |v: &[f64], tag: u64| -> Vec<f64> {
        if v.len() == m {
            v.to_vec()
        } else {
            rand::seq::index::sample(&mut stream(seed, &[0x7731, tag]), v.len(), m)
                .iter()
                .map(|i| v[i])
                .collect()
        }
    };
    w1_samples_1d(&reduce(a, 0), &reduce(b, 1))
}

/// Monte Carlo average of the 1D distance over seeded uniform unit
/// directions. Unequal ensemble sizes are reconciled by one shared seeded
/// subsample of the larger ensemble.
pub fn sliced_w1(
    ens_a: &ParticleEnsemble,
    ens_b: &ParticleEnsemble,
    n_dirs: usize,
    seed: u64,
) -> Result<f64> {
    if n_dirs == 0 {
        return Err(Error::invalid("direction count must be >= 1"));
    }
    if ens_a.dim() != ens_b.dim() {
        return Err(Error::shape(format!(
            "ensemble dimensions {} vs {}",
            ens_a.dim(),
            ens_b.dim()
        )));
    }
    let dim = ens_a.dim();
    let m = ens_a.len().min(ens_b.len());
    let pick = |ens: &ParticleEnsemble, tag: u64| -> Vec<DVector<f64>> {
        if ens.len() == m {
            ens.particles().to_vec()
        } else {
            rand::seq::index::sample(&mut stream(seed, &[0x736c_6963_65, tag]), ens.len(), m)
                .iter()
                .map(|i| ens.particles()[i].clone())
                .collect()
        }
    };
    let pa = pick(ens_a, 0);
    let pb = pick(ens_b, 1);

    let mut rng = stream(seed, &[0x6469_7273]);
    let mut dirs = Vec::with_capacity(n_dirs);
    while dirs.len() < n_dirs {
        let v = DVector::from_iterator(
            dim,
            (0..dim).map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal)),
        );
        let norm = v.norm();
        if norm > 1e-9 {
            dirs.push(v / norm);
        }
    }

    let total: f64 = dirs
        .par_iter()
        .map(|v| {
            let qa: Vec<f64> = pa.iter().map(|x| v.dot(x)).collect();
            let qb: Vec<f64> = pb.iter().map(|x| v.dot(x)).collect();
            w1_samples_1d(&qa, &qb)
        })
        .sum::<Result<f64>>()?;
    Ok(total / n_dirs as f64)
}

/// Total variation between the two sample histograms on their shared grid;
/// always in [0, 1].
pub fn tv_on_grid(a: &[f64], b: &[f64], bins: usize) -> Result<f64> {
    let grid = shared_grid(a, b, bins)?;
    let qa = histogram(a, &grid)?;
    let qb = histogram(b, &grid)?;
    Ok(0.5
        * qa.masses()
            .iter()
            .zip(qb.masses())
            .map(|(x, y)| (x - y).abs())
            .sum::<f64>())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::histogram::{BinGrid, ProbVector};
    use crate::transport::{ot_1d_exact, plan_cost};
    use approx::assert_abs_diff_eq;
    use std::f64::consts::FRAC_1_PI;

    fn ens(points: &[(f64, f64)]) -> ParticleEnsemble {
        ParticleEnsemble::new(
            points
                .iter()
                .map(|&(a, b)| DVector::from_vec(vec![a, b]))
                .collect(),
            0.0,
        )
        .unwrap()
    }

    #[test]
    fn sorted_matching_basics() {
        assert_abs_diff_eq!(w1_samples_1d(&[0.0, 1.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_abs_diff_eq!(w1_samples_1d(&[0.0], &[2.0]).unwrap(), 2.0);
        // a constant shift moves the distance by exactly that constant
        let a = [0.3, -1.2, 4.0, 0.9];
        let b: Vec<f64> = a.iter().map(|x| x + 2.5).collect();
        assert_abs_diff_eq!(w1_samples_1d(&a, &b).unwrap(), 2.5, epsilon = 1e-12);
        // symmetry
        let c = [1.0, 0.0, -3.0, 2.2];
        assert_abs_diff_eq!(
            w1_samples_1d(&a, &c).unwrap(),
            w1_samples_1d(&c, &a).unwrap(),
            epsilon = 1e-15
        );
    }

    #[test]
    fn strict_mode_rejects_unequal_sizes() {
        assert!(w1_samples_1d(&[1.0, 2.0], &[1.0]).is_err());
        let v = w1_samples_1d_subsampled(&[1.0, 2.0, 3.0], &[1.5], 4).unwrap();
        assert!(v.is_finite());
        let again = w1_samples_1d_subsampled(&[1.0, 2.0, 3.0], &[1.5], 4).unwrap();
        assert_abs_diff_eq!(v, again);
    }

    #[test]
    fn matches_exact_transport_cost_on_shared_bins() {
        // samples pinned to bin centers make the empirical W1 and the binned
        // plan cost the same number up to the physical bin width
        let mut rng = stream(17, &[]);
        for _ in 0..20 {
            let bins = 8;
            let grid = BinGrid::uniform(0.0, 8.0, bins).unwrap();
            let m = 50;
            let draw = |rng: &mut rand_chacha::ChaCha8Rng| -> Vec<f64> {
                (0..m)
                    .map(|_| grid.center(rng.random_range(0..bins)))
                    .collect()
            };
            let a = draw(&mut rng);
            let b = draw(&mut rng);
            let qa = histogram(&a, &grid).unwrap();
            let qb = histogram(&b, &grid).unwrap();
            let plan = ot_1d_exact(&qa, &qb).unwrap();
            let from_plan = plan_cost(&plan) * grid.width();
            let direct = w1_samples_1d(&a, &b).unwrap();
            assert_abs_diff_eq!(direct, from_plan, epsilon = 1e-9);
        }
    }

    #[test]
    fn sliced_distance_is_zero_on_itself() {
        let e = ens(&[(0.0, 1.0), (2.0, -1.0), (0.5, 0.5)]);
        assert_abs_diff_eq!(sliced_w1(&e, &e, 64, 3).unwrap(), 0.0);
    }

    #[test]
    fn point_mass_separation_approaches_the_arc_average() {
        // |<v, u>| averaged over the circle is 2/pi for a unit offset u
        let a = ens(&[(0.0, 0.0)]);
        let b = ens(&[(1.0, 0.0)]);
        let v = sliced_w1(&a, &b, 1000, 11).unwrap();
        assert!((v - 2.0 * FRAC_1_PI).abs() < 0.02, "sliced {v}");
    }

    #[test]
    fn sliced_handles_unequal_sizes_deterministically() {
        let a = ens(&[(0.0, 0.0), (1.0, 1.0), (2.0, 0.0), (3.0, 1.0)]);
        let b = ens(&[(0.5, 0.5), (1.5, 0.5)]);
        let x = sliced_w1(&a, &b, 50, 7).unwrap();
        let y = sliced_w1(&a, &b, 50, 7).unwrap();
        assert_abs_diff_eq!(x, y);
        assert!(x > 0.0);
    }

    #[test]
    fn grid_tv_basics() {
        let a = [0.0, 1.0, 2.0, 3.0];
        assert_abs_diff_eq!(tv_on_grid(&a, &a, 10).unwrap(), 0.0);
        let lo = [0.0, 0.1, 0.2];
        let hi = [10.0, 10.1, 10.2];
        assert_abs_diff_eq!(tv_on_grid(&lo, &hi, 20).unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn same_gaussian_draws_have_small_tv() {
        let mut rng = stream(23, &[]);
        let mut draw = |_: ()| -> Vec<f64> {
            (0..10_000)
                .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
                .collect()
        };
        let a = draw(());
        let b = draw(());
        let tv = tv_on_grid(&a, &b, 50).unwrap();
        assert!(tv <= 0.05, "tv {tv}");
    }

    #[test]
    fn report_rejects_bad_values() {
        assert!(MetricReport::new("w1", 0.5, "200 dirs").is_ok());
        assert!(MetricReport::new("w1", -0.5, "").is_err());
        assert!(MetricReport::new("w1", f64::NAN, "").is_err());
    }

    #[test]
    fn probability_masses_stay_normalized_under_tv_inputs() {
        let a: Vec<f64> = (0..777).map(|i| (i as f64 * 0.137).sin() * 3.0).collect();
        let b: Vec<f64> = (0..777).map(|i| (i as f64 * 0.211).cos() * 2.0).collect();
        let grid = shared_grid(&a, &b, 33).unwrap();
        let qa = histogram(&a, &grid).unwrap();
        let sum: f64 = ProbVector::masses(&qa).iter().sum();
        assert_abs_diff_eq!(sum, 1.0, epsilon = 1e-12);
    }
}
