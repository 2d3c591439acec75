//! Derivative-free minimization over box-bounded decision vectors by
//! cross-entropy or path-integral (MPPI) style sampling.

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::seeding;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    Cem,
    Mppi,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub kind: SamplerKind,
    pub samples: usize,
    pub iterations: usize,
    /// Fraction of samples kept as elites (CEM).
    pub elite_frac: f64,
    /// Weight of the previous distribution in each update.
    pub smoothing: f64,
    /// MPPI temperature relative to the spread of sampled costs.
    pub temperature: f64,
    /// Per-iteration std decay (MPPI).
    pub std_decay: f64,
    /// Std floor as a fraction of the initial std.
    pub min_std_frac: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            kind: SamplerKind::Cem,
            samples: 48,
            iterations: 6,
            elite_frac: 0.15,
            smoothing: 0.2,
            temperature: 0.2,
            std_decay: 0.7,
            min_std_frac: 0.02,
        }
    }
}

/// Search distribution and box for one problem.
#[derive(Clone, Debug)]
pub struct Search {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    /// Extra points evaluated in the first iteration, e.g. warm starts.
    pub seeds: Vec<Vec<f64>>,
}

impl Search {
    pub fn new(mean: Vec<f64>, std: Vec<f64>, lo: Vec<f64>, hi: Vec<f64>) -> Self {
        Self {
            mean,
            std,
            lo,
            hi,
            seeds: Vec::new(),
        }
    }

    pub fn with_seed(mut self, z: Vec<f64>) -> Self {
        self.seeds.push(z);
        self
    }
}

#[derive(Clone, Debug)]
pub struct SearchResult {
    pub best: Vec<f64>,
    pub cost: f64,
    pub evaluations: usize,
}

fn clip(z: &mut [f64], lo: &[f64], hi: &[f64]) {
    for ((v, &l), &h) in z.iter_mut().zip(lo).zip(hi) {
        *v = v.clamp(l, h);
    }
}

/// Minimizes `cost` and returns the best point ever evaluated. Non-finite
/// costs rank last. Deterministic for a fixed seed regardless of thread count.
pub fn minimize<F>(search: Search, cfg: &SamplerConfig, seed: u64, cost: F) -> SearchResult
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    let dim = search.mean.len();
    let mut rng = seeding::rng(seed);
    let mut mean = search.mean;
    clip(&mut mean, &search.lo, &search.hi);
    let mut std = search.std;
    let floor: Vec<f64> = std.iter().map(|s| s * cfg.min_std_frac).collect();
    let mut best = (mean.clone(), f64::INFINITY);
    let mut evaluations = 0;
    let samples = cfg.samples.max(2);
    let alpha = cfg.smoothing.clamp(0.0, 1.0);

    for iter in 0..cfg.iterations.max(1) {
        let mut pop: Vec<Vec<f64>> = Vec::with_capacity(samples + search.seeds.len());
        pop.push(mean.clone());
        if iter == 0 {
            for s in &search.seeds {
                let mut z = s.clone();
                clip(&mut z, &search.lo, &search.hi);
                pop.push(z);
            }
        }
        while pop.len() < samples + if iter == 0 { search.seeds.len() } else { 0 } {
            let mut z: Vec<f64> = (0..dim)
                .map(|j| {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    mean[j] + std[j] * e
                })
                .collect();
            clip(&mut z, &search.lo, &search.hi);
            pop.push(z);
        }
        let costs: Vec<f64> = pop
            .par_iter()
            .map(|z| {
                let c = cost(z);
                if c.is_finite() {
                    c
                } else {
                    f64::INFINITY
                }
            })
            .collect();
        evaluations += pop.len();

        let mut order: Vec<usize> = (0..pop.len()).collect();
        order.sort_by(|&a, &b| costs[a].total_cmp(&costs[b]).then(a.cmp(&b)));
        if costs[order[0]] < best.1 {
            best = (pop[order[0]].clone(), costs[order[0]]);
        }
        if !costs[order[0]].is_finite() {
            continue;
        }

        let (new_mean, new_std) = match cfg.kind {
            SamplerKind::Cem => {
                let k = ((pop.len() as f64 * cfg.elite_frac).ceil() as usize).clamp(1, pop.len());
                let elites: Vec<&Vec<f64>> = order[..k].iter().map(|&i| &pop[i]).collect();
                let mut m = vec![0.0; dim];
                for e in &elites {
                    for j in 0..dim {
                        m[j] += e[j] / k as f64;
                    }
                }
                let mut s = vec![0.0; dim];
                for e in &elites {
                    for j in 0..dim {
                        s[j] += (e[j] - m[j]).powi(2) / k as f64;
                    }
                }
                (m, s.into_iter().map(f64::sqrt).collect::<Vec<_>>())
            }
            SamplerKind::Mppi => {
                let c_min = costs[order[0]];
                let finite: Vec<f64> = order
                    .iter()
                    .map(|&i| costs[i])
                    .filter(|c| c.is_finite())
                    .collect();
                let c_med = finite[finite.len() / 2];
                let lambda = cfg.temperature * (c_med - c_min) + 1e-12;
                let w: Vec<f64> = costs.iter().map(|&c| (-(c - c_min) / lambda).exp()).collect();
                let total: f64 = w.iter().sum();
                let mut m = vec![0.0; dim];
                for (z, wi) in pop.iter().zip(&w) {
                    for j in 0..dim {
                        m[j] += wi * z[j] / total;
                    }
                }
                (m, std.iter().map(|s| s * cfg.std_decay).collect())
            }
        };
        for j in 0..dim {
            mean[j] = alpha * mean[j] + (1.0 - alpha) * new_mean[j];
            std[j] = (alpha * std[j] + (1.0 - alpha) * new_std[j]).max(floor[j]);
        }
        clip(&mut mean, &search.lo, &search.hi);
    }
    // The final mean is often better than any sample.
    let c = cost(&mean);
    evaluations += 1;
    if c < best.1 {
        best = (mean, c);
    }
    SearchResult {
        best: best.0,
        cost: best.1,
        evaluations,
    }
}
