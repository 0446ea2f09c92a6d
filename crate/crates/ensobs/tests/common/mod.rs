//! Oracles shared by the integration suites. Everything here is written
//! independently of the library internals it checks against: the transport
//! cost comes from a generic LP solver, assignments from full enumeration.

#![allow(dead_code)]

use ensobs::dynamics::ParticleEnsemble;
use ensobs::rng::stream;
use itertools::Itertools;
use nalgebra::DVector;
use rand::Rng;
use rand_distr::{Distribution, Normal};

const TOL: f64 = 1e-9;

/// One simplex phase: pivots until no allowed column improves `cost`.
/// Entering column by Bland's rule (lowest index), leaving row by minimum
/// ratio with lowest basis index on ties, so the method cannot cycle.
/// Returns false only on an unbounded ray, which a transport LP never has.
fn optimize(t: &mut [Vec<f64>], basis: &mut [usize], cost: &[f64], allowed: usize) -> bool {
    let m = t.len();
    let cols = t[0].len();
    let rhs = cols - 1;
    loop {
        let mut enter = None;
        'scan: for j in 0..allowed {
            for &b in basis.iter() {
                if b == j {
                    continue 'scan;
                }
            }
            let reduced = cost[j]
                - basis
                    .iter()
                    .enumerate()
                    .map(|(i, &b)| cost[b] * t[i][j])
                    .sum::<f64>();
            if reduced < -TOL {
                enter = Some(j);
                break;
            }
        }
        let Some(j) = enter else { return true };
        let mut leave: Option<(usize, f64)> = None;
        for i in 0..m {
            if t[i][j] > TOL {
                let ratio = t[i][rhs] / t[i][j];
                let take = match leave {
                    None => true,
                    Some((li, lr)) => {
                        ratio < lr - 1e-12 || (ratio < lr + 1e-12 && basis[i] < basis[li])
                    }
                };
                if take {
                    leave = Some((i, ratio));
                }
            }
        }
        let Some((row, _)) = leave else { return false };
        let p = t[row][j];
        for v in t[row].iter_mut() {
            *v /= p;
        }
        for i in 0..m {
            if i != row && t[i][j] != 0.0 {
                let f = t[i][j];
                for k in 0..cols {
                    t[i][k] -= f * t[row][k];
                }
            }
        }
        basis[row] = j;
    }
}

/// Minimizes `c . x` over `A x = b, x >= 0` with the two-phase tableau
/// method. Dense and unoptimized; meant for tiny oracle problems only.
pub fn simplex_min(a: &[Vec<f64>], b: &[f64], c: &[f64]) -> Option<f64> {
    let m = a.len();
    let n = c.len();
    let cols = n + m + 1;
    let mut t = vec![vec![0.0; cols]; m];
    for i in 0..m {
        let s = if b[i] < 0.0 { -1.0 } else { 1.0 };
        for j in 0..n {
            t[i][j] = s * a[i][j];
        }
        t[i][n + i] = 1.0;
        t[i][cols - 1] = s * b[i];
    }
    let mut basis: Vec<usize> = (n..n + m).collect();

    let mut phase1 = vec![0.0; cols];
    for slot in &mut phase1[n..n + m] {
        *slot = 1.0;
    }
    if !optimize(&mut t, &mut basis, &phase1, n) {
        return None;
    }
    let leftover: f64 = basis
        .iter()
        .enumerate()
        .filter(|&(_, &b)| b >= n)
        .map(|(i, _)| t[i][cols - 1])
        .sum();
    if leftover > 1e-7 {
        return None;
    }

    let mut phase2 = vec![0.0; cols];
    phase2[..n].copy_from_slice(c);
    if !optimize(&mut t, &mut basis, &phase2, n) {
        return None;
    }
    Some(
        basis
            .iter()
            .enumerate()
            .filter(|&(_, &b)| b < n)
            .map(|(i, &b)| c[b] * t[i][cols - 1])
            .sum(),
    )
}

/// Minimum cost of moving mass `p` onto mass `q` with |i - j| bin costs,
/// solved as the full linear program over all couplings.
pub fn lp_transport_cost(p: &[f64], q: &[f64]) -> f64 {
    let l = p.len();
    assert_eq!(q.len(), l);
    let nvars = l * l;
    let mut a = vec![vec![0.0; nvars]; 2 * l];
    let mut b = vec![0.0; 2 * l];
    let mut c = vec![0.0; nvars];
    for i in 0..l {
        for j in 0..l {
            let v = i * l + j;
            a[i][v] = 1.0;
            a[l + j][v] = 1.0;
            c[v] = (i as f64 - j as f64).abs();
        }
        b[i] = p[i];
    }
    for j in 0..l {
        b[l + j] = q[j];
    }
    simplex_min(&a, &b, &c).expect("balanced transport is always feasible")
}

pub fn for_each_permutation(n: usize, mut f: impl FnMut(&[usize])) {
    for p in (0..n).permutations(n) {
        f(&p);
    }
}

/// Strictly positive masses summing to one, bit-exactly renormalized so they
/// pass the library's normalization check.
pub fn random_masses(rng: &mut impl Rng, l: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..l).map(|_| rng.random::<f64>() + 1e-3).collect();
    normalize(&raw)
}

pub fn normalize(raw: &[f64]) -> Vec<f64> {
    let total: f64 = raw.iter().sum();
    let mut v: Vec<f64> = raw.iter().map(|x| x / total).collect();
    let drift: f64 = v.iter().sum::<f64>() - 1.0;
    // absorb the rounding drift into the largest entry, which stays positive
    let top = (0..v.len())
        .max_by(|&a, &b| v[a].total_cmp(&v[b]))
        .unwrap();
    v[top] -= drift;
    v
}

/// Isotropic Gaussian mixture draw in the plane: (weight, mean, sigma) per
/// component. Deliberately a separate sampler from the library's.
pub fn mixture_draw(
    n: usize,
    comps: &[(f64, [f64; 2], f64)],
    seed: u64,
    time: f64,
) -> ParticleEnsemble {
    let mut rng = stream(seed, &[0x6f72_61cb]);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let total: f64 = comps.iter().map(|c| c.0).sum();
    let particles = (0..n)
        .map(|_| {
            let mut u = rng.random::<f64>() * total;
            let mut pick = comps.len() - 1;
            for (k, comp) in comps.iter().enumerate() {
                if u < comp.0 {
                    pick = k;
                    break;
                }
                u -= comp.0;
            }
            let (_, mean, sigma) = comps[pick];
            DVector::from_vec(vec![
                mean[0] + sigma * normal.sample(&mut rng),
                mean[1] + sigma * normal.sample(&mut rng),
            ])
        })
        .collect();
    ParticleEnsemble::new(particles, time).unwrap()
}
