//! One-dimensional Gaussian mixtures fitted by expectation-maximization and
//! the FWHM-band partial-volume proxy.

use std::f64::consts::{LN_2, PI};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::simulate::derive_seed;

pub const MAX_RESTARTS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GmmComponent {
    pub weight: f64,
    pub mean: f64,
    pub std: f64,
}

impl GmmComponent {
    /// Half width at half maximum, `√(2 ln 2)·σ`.
    pub fn delta(&self) -> f64 {
        (2.0 * LN_2).sqrt() * self.std
    }

    pub fn density(&self, x: f64) -> f64 {
        let z = (x - self.mean) / self.std;
        self.weight * (-0.5 * z * z).exp() / (self.std * (2.0 * PI).sqrt())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GmmFit {
    /// Sorted by mean.
    pub components: Vec<GmmComponent>,
    /// Log-likelihood before each M-step of the accepted run.
    pub log_likelihood: Vec<f64>,
    pub restarts: usize,
}

enum Attempt {
    Done(GmmFit),
    Collapsed,
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// k-means++ seeding: first center uniform, the rest with probability
/// proportional to the squared distance to the nearest chosen center.
fn kmeans_pp(x: &[f64], k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut centers = vec![x[rng.random_range(0..x.len())]];
    let mut d2: Vec<f64> = x.iter().map(|v| (v - centers[0]).powi(2)).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.random_range(0.0..total);
            let mut idx = x.len() - 1;
            for (i, d) in d2.iter().enumerate() {
                if r < *d {
                    idx = i;
                    break;
                }
                r -= d;
            }
            idx
        } else {
            rng.random_range(0..x.len())
        };
        let c = x[pick];
        centers.push(c);
        for (d, v) in d2.iter_mut().zip(x) {
            *d = d.min((v - c).powi(2));
        }
    }
    centers
}

fn attempt(x: &[f64], k: usize, iters: usize, floor: f64, rng: &mut ChaCha8Rng) -> Attempt {
    let centers = kmeans_pp(x, k, rng);
    let mut comps: Vec<GmmComponent> = Vec::with_capacity(k);
    let mut assign = vec![Vec::new(); k];
    for &v in x {
        let j = (0..k)
            .min_by(|&a, &b| (v - centers[a]).abs().total_cmp(&(v - centers[b]).abs()))
            .expect("k >= 1");
        assign[j].push(v);
    }
    for members in &assign {
        if members.len() < 2 {
            return Attempt::Collapsed;
        }
        let m = members.iter().sum::<f64>() / members.len() as f64;
        let s = (members.iter().map(|v| (v - m).powi(2)).sum::<f64>() / members.len() as f64).sqrt();
        if !(s >= floor) {
            return Attempt::Collapsed;
        }
        comps.push(GmmComponent {
            weight: members.len() as f64 / x.len() as f64,
            mean: m,
            std: s,
        });
    }
    let n = x.len();
    let mut resp = vec![0.0; n * k];
    let mut trace = Vec::with_capacity(iters);
    let mut logp = vec![0.0; k];
    for _ in 0..iters {
        let mut ll = 0.0;
        for (i, &v) in x.iter().enumerate() {
            for (j, c) in comps.iter().enumerate() {
                let z = (v - c.mean) / c.std;
                logp[j] = c.weight.ln() - c.std.ln() - 0.5 * (2.0 * PI).ln() - 0.5 * z * z;
            }
            let lse = log_sum_exp(&logp);
            ll += lse;
            for j in 0..k {
                resp[i * k + j] = (logp[j] - lse).exp();
            }
        }
        let converged = trace.last().is_some_and(|prev: &f64| (ll - prev).abs() <= 1e-12 * ll.abs());
        trace.push(ll);
        if converged {
            break;
        }
        for (j, c) in comps.iter_mut().enumerate() {
            let nk: f64 = (0..n).map(|i| resp[i * k + j]).sum();
            if !(nk > 0.0) {
                return Attempt::Collapsed;
            }
            let mean = (0..n).map(|i| resp[i * k + j] * x[i]).sum::<f64>() / nk;
            let var = (0..n).map(|i| resp[i * k + j] * (x[i] - mean).powi(2)).sum::<f64>() / nk;
            let std = var.sqrt();
            if !(std >= floor) {
                return Attempt::Collapsed;
            }
            *c = GmmComponent {
                weight: nk / n as f64,
                mean,
                std,
            };
        }
    }
    comps.sort_by(|a, b| a.mean.total_cmp(&b.mean));
    Attempt::Done(GmmFit {
        components: comps,
        log_likelihood: trace,
        restarts: 0,
    })
}

/// EM fit of a `k`-component mixture. A component whose standard deviation
/// falls below `1e-6` of the data range triggers a restart with a new
/// seed; after [`MAX_RESTARTS`] restarts the fit fails.
pub fn fit_gmm(samples: &[f64], k: usize, iters: usize, seed: u64) -> Result<GmmFit> {
    if k == 0 || iters == 0 {
        return Err(Error::input("gmm needs k >= 1 and iters >= 1"));
    }
    if samples.len() < 10 * k {
        return Err(Error::input(format!("gmm needs at least {} samples", 10 * k)));
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(Error::input("gmm samples must be finite"));
    }
    let lo = samples.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = samples.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return Err(Error::input("gmm samples have zero variance"));
    }
    let floor = 1e-6 * (hi - lo);
    for restart in 0..=MAX_RESTARTS {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, restart as u64));
        if let Attempt::Done(mut fit) = attempt(samples, k, iters, floor, &mut rng) {
            fit.restarts = restart;
            return Ok(fit);
        }
    }
    Err(Error::numerical(format!(
        "gmm components collapsed in {} attempts",
        MAX_RESTARTS + 1
    )))
}

/// Three-component fit (ordered by mean).
pub fn fit_gmm3(samples: &[f64], iters: usize, seed: u64) -> Result<GmmFit> {
    fit_gmm(samples, 3, iters, seed)
}

/// Fraction of samples outside every `μ_k ± δ_k` band; overlapping bands
/// count once.
pub fn pve_proxy(samples: &[f64], components: &[GmmComponent]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let outside = samples
        .iter()
        .filter(|&&v| components.iter().all(|c| (v - c.mean).abs() > c.delta()))
        .count();
    outside as f64 / samples.len() as f64
}

/// Histogram of `samples` with the fitted per-component densities scaled
/// to counts: rows of `(bin center, count, [component counts])`.
pub fn histogram_with_fit(samples: &[f64], components: &[GmmComponent], bins: usize) -> Vec<(f64, usize, Vec<f64>)> {
    if samples.is_empty() || bins == 0 {
        return Vec::new();
    }
    let lo = samples.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = samples.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
    let mut counts = vec![0usize; bins];
    for v in samples {
        let b = (((v - lo) / width) as usize).min(bins - 1);
        counts[b] += 1;
    }
    let n = samples.len() as f64;
    counts
        .into_iter()
        .enumerate()
        .map(|(b, c)| {
            let x = lo + (b as f64 + 0.5) * width;
            let fitted = components.iter().map(|g| g.density(x) * n * width).collect();
            (x, c, fitted)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    fn mixture(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let means = [0.2, 0.5, 0.8];
        (0..n)
            .map(|i| Normal::new(means[i % 3], 0.03).unwrap().sample(&mut rng))
            .collect()
    }

    #[test]
    fn recovers_known_mixture() {
        let x = mixture(3000, 1);
        let fit = fit_gmm3(&x, 200, 0).unwrap();
        for (c, m) in fit.components.iter().zip([0.2, 0.5, 0.8]) {
            assert!((c.mean - m).abs() < 0.01, "{:?}", fit.components);
            assert!((c.weight - 1.0 / 3.0).abs() < 0.03);
        }
        let w: f64 = fit.components.iter().map(|c| c.weight).sum();
        assert!((w - 1.0).abs() < 1e-12);
    }

    #[test]
    fn likelihood_never_decreases() {
        let fit = fit_gmm3(&mixture(900, 2), 100, 5).unwrap();
        for w in fit.log_likelihood.windows(2) {
            assert!(w[1] >= w[0] - 1e-9 * w[0].abs(), "{} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn two_valued_data_collapses() {
        let x: Vec<f64> = (0..60).map(|i| (i % 2) as f64).collect();
        assert!(fit_gmm3(&x, 50, 0).unwrap_err().is_numerical());
        assert!(fit_gmm3(&[1.0; 60], 50, 0).is_err());
    }

    #[test]
    fn proxy_limits() {
        let wide = [GmmComponent {
            weight: 1.0,
            mean: 0.0,
            std: 1e9,
        }];
        assert_eq!(pve_proxy(&[-3.0, 0.0, 5.0], &wide), 0.0);
        let narrow = [GmmComponent {
            weight: 1.0,
            mean: 0.0,
            std: 1.0,
        }];
        assert!((pve_proxy(&[0.0, 1.0, 1.2, -2.0], &narrow) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn histogram_counts_everything() {
        let x = mixture(300, 3);
        let fit = fit_gmm3(&x, 100, 1).unwrap();
        let h = histogram_with_fit(&x, &fit.components, 20);
        assert_eq!(h.iter().map(|r| r.1).sum::<usize>(), 300);
        assert!(h.iter().all(|r| r.2.len() == 3));
    }
}
