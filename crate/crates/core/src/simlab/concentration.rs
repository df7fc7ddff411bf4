//! Empirical check of the concentration bound for the mean-distance estimator.
//!
//! A trial draws `m` i.i.d. distance samples with mean `delta`, averages
//! them, and records whether the relative deviation `|mean / delta - 1|`
//! reaches `gamma`. The analytic bound on that probability is
//! `exp(-m gamma^2 delta / 3) + exp(-m gamma^2 delta / 2)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::SimError;

pub const MIN_TRIALS: usize = 100;

pub const CSV_HEADER: &str = "m,gamma,delta,trials,empirical_prob,bound";

/// Source of i.i.d. distance samples.
pub trait DistanceSampler: Sync {
    fn sample(&self, rng: &mut ChaCha8Rng) -> f64;
}

/// Bernoulli(delta) samples for `delta <= 1`; for `delta` in `(1, 2]`,
/// `2 * Bernoulli(delta / 2)`. Either way the mean is `delta`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BernoulliSampler {
    delta: f64,
}

impl BernoulliSampler {
    pub fn new(delta: f64) -> Result<Self, SimError> {
        check_delta(delta)?;
        Ok(Self { delta })
    }

    fn scale_and_p(&self) -> (f64, f64) {
        if self.delta <= 1.0 {
            (1.0, self.delta)
        } else {
            (2.0, self.delta / 2.0)
        }
    }

    /// Exact probability that the mean of `m` samples deviates by `gamma`,
    /// summed over the binomial distribution of the success count.
    pub fn exact_deviation_prob(&self, m: usize, gamma: f64) -> f64 {
        let (scale, p) = self.scale_and_p();
        let ln_p = p.ln();
        let ln_q = (1.0 - p).ln();
        let mut ln_choose = 0.0f64;
        let mut total = 0.0;
        for x in 0..=m {
            if x > 0 {
                ln_choose += ((m - x + 1) as f64).ln() - (x as f64).ln();
            }
            let mean = scale * x as f64 / m as f64;
            if deviates(mean, self.delta, gamma) {
                let ln_pmf = ln_choose
                    + if x > 0 { x as f64 * ln_p } else { 0.0 }
                    + if x < m { (m - x) as f64 * ln_q } else { 0.0 };
                total += ln_pmf.exp();
            }
        }
        total.min(1.0)
    }
}

impl DistanceSampler for BernoulliSampler {
    fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        let (scale, p) = self.scale_and_p();
        if rng.random::<f64>() < p {
            scale
        } else {
            0.0
        }
    }
}

/// Uniform samples on `[0, 2 delta]`, `delta <= 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UniformSampler {
    delta: f64,
}

impl UniformSampler {
    pub fn new(delta: f64) -> Result<Self, SimError> {
        if !(delta > 0.0 && delta <= 1.0) {
            return Err(SimError::Argument(format!("delta must be in (0, 1], got {delta}")));
        }
        Ok(Self { delta })
    }
}

impl DistanceSampler for UniformSampler {
    fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        rng.random::<f64>() * 2.0 * self.delta
    }
}

fn check_delta(delta: f64) -> Result<(), SimError> {
    if !(delta > 0.0 && delta <= 2.0) {
        return Err(SimError::Argument(format!("delta must be in (0, 2], got {delta}")));
    }
    Ok(())
}

pub fn deviates(mean: f64, delta: f64, gamma: f64) -> bool {
    (mean / delta - 1.0).abs() >= gamma
}

pub fn chernoff_bound(m: usize, gamma: f64, delta: f64) -> f64 {
    let e = m as f64 * gamma * gamma * delta;
    (-e / 3.0).exp() + (-e / 2.0).exp()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConcentrationReport {
    pub m: usize,
    pub gamma: f64,
    pub delta: f64,
    pub trials: usize,
    pub empirical_prob: f64,
    pub chernoff_bound: f64,
}

impl ConcentrationReport {
    /// Binomial standard error of the empirical probability at the bound
    /// (clamped to `[0, 1]`).
    pub fn standard_error(&self) -> f64 {
        let p = self.chernoff_bound.clamp(0.0, 1.0);
        (p * (1.0 - p) / self.trials as f64).sqrt()
    }

    /// Empirical probability within the bound plus three standard errors.
    pub fn within_bound(&self) -> bool {
        self.empirical_prob <= self.chernoff_bound + 3.0 * self.standard_error()
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{:.6}",
            self.m, self.gamma, self.delta, self.trials, self.empirical_prob, self.chernoff_bound
        )
    }
}

/// Runs `trials` independent trials; trial `t` uses `ChaCha8Rng` seeded with
/// `base_seed + t`.
pub fn concentration_trial(
    m: usize,
    gamma: f64,
    delta: f64,
    trials: usize,
    sampler: &dyn DistanceSampler,
    base_seed: u64,
) -> Result<ConcentrationReport, SimError> {
    if m == 0 {
        return Err(SimError::Argument("m must be at least 1".into()));
    }
    if !(gamma > 0.0) {
        return Err(SimError::Argument(format!("gamma must be positive, got {gamma}")));
    }
    check_delta(delta)?;
    if trials < MIN_TRIALS {
        return Err(SimError::StatisticalPower(trials));
    }
    let hits = (0..trials as u64)
        .into_par_iter()
        .filter(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(base_seed.wrapping_add(*t));
            let sum: f64 = (0..m).map(|_| sampler.sample(&mut rng)).sum();
            deviates(sum / m as f64, delta, gamma)
        })
        .count();
    Ok(ConcentrationReport {
        m,
        gamma,
        delta,
        trials,
        empirical_prob: hits as f64 / trials as f64,
        chernoff_bound: chernoff_bound(m, gamma, delta),
    })
}
