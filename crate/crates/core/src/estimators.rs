//! Simple Monte Carlo and importance-sampling estimators of `δ_Y(ε)`.

use crate::error::{invalid, Result};
use crate::mechanism::{sample_path, MechanismSpec, PrvSampleBatch, TiltPlan};
use crate::numerics::NeumaierSum;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub const DEFAULT_CHUNK_SIZE: usize = 4096;

/// Contributions below this count as zero in the zero-mass probe.
pub const ZERO_CONTRIBUTION: f64 = 1e-300;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorMethod {
    Smc,
    Is,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimatorConfig {
    pub method: EstimatorMethod,
    pub m: u64,
    pub seed: u64,
    pub chunk_size: usize,
    pub theta_override: Option<f64>,
}

impl EstimatorConfig {
    pub fn smc(m: u64, seed: u64) -> Self {
        Self {
            method: EstimatorMethod::Smc,
            m,
            seed,
            chunk_size: DEFAULT_CHUNK_SIZE,
            theta_override: None,
        }
    }

    pub fn is(m: u64, seed: u64) -> Self {
        Self {
            method: EstimatorMethod::Is,
            ..Self::smc(m, seed)
        }
    }

    pub fn with_theta(self, theta: f64) -> Self {
        Self {
            theta_override: Some(theta),
            ..self
        }
    }

    pub fn with_chunk_size(self, chunk_size: usize) -> Self {
        Self { chunk_size, ..self }
    }

    pub fn with_seed(self, seed: u64) -> Self {
        Self { seed, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 {
            return Err(invalid("m", "sample count must be at least 1"));
        }
        if self.chunk_size == 0 {
            return Err(invalid("chunk_size", "must be at least 1"));
        }
        if self.method == EstimatorMethod::Smc && self.theta_override.is_some() {
            return Err(invalid("theta", "simple Monte Carlo takes no tilting parameter"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeltaEstimate {
    pub value: f64,
    pub second_moment: f64,
    pub std_error: f64,
    pub m: u64,
    pub method: EstimatorMethod,
    pub theta: Option<f64>,
    pub epsilon: f64,
}

/// `(1 - e^{ε-y})₊`
#[inline]
pub fn hockey_stick(epsilon: f64, y: f64) -> f64 {
    if y > epsilon {
        -(epsilon - y).exp_m1()
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct Moments {
    pub sum: NeumaierSum,
    pub sum_sq: NeumaierSum,
    pub zeros: u64,
}

impl Moments {
    #[inline]
    fn push(&mut self, c: f64) {
        self.sum.add(c);
        self.sum_sq.add(c * c);
        if c < ZERO_CONTRIBUTION {
            self.zeros += 1;
        }
    }

    fn merge(&mut self, other: &Moments) {
        self.sum.merge(&other.sum);
        self.sum_sq.merge(&other.sum_sq);
        self.zeros += other.zeros;
    }
}

/// Sums per-path contributions chunk by chunk, then merges the chunk sums in
/// chunk order. The result depends on `chunk_size` only through rounding and
/// never on the number of worker threads.
pub(crate) fn reduce<F>(m: u64, chunk_size: usize, contribution: F) -> Moments
where
    F: Fn(u64) -> f64 + Sync,
{
    let chunk = chunk_size as u64;
    let n_chunks = m.div_ceil(chunk);
    let partials: Vec<Moments> = (0..n_chunks)
        .into_par_iter()
        .map(|ci| {
            let mut acc = Moments::default();
            let end = ((ci + 1) * chunk).min(m);
            for p in ci * chunk..end {
                acc.push(contribution(p));
            }
            acc
        })
        .collect();
    let mut total = Moments::default();
    for part in &partials {
        total.merge(part);
    }
    total
}

fn finish(moments: &Moments, m: u64, method: EstimatorMethod, theta: Option<f64>, epsilon: f64) -> DeltaEstimate {
    let mf = m as f64;
    let value = moments.sum.value() / mf;
    let second_moment = moments.sum_sq.value() / mf;
    DeltaEstimate {
        value,
        second_moment,
        std_error: ((second_moment - value * value).max(0.0) / mf).sqrt(),
        m,
        method,
        theta,
        epsilon,
    }
}

fn check_epsilon(epsilon: f64) -> Result<()> {
    if !epsilon.is_finite() {
        return Err(invalid("epsilon", format!("must be finite, got {epsilon}")));
    }
    Ok(())
}

/// Tilting parameter from the approximate variance-minimising condition:
/// `θ* = 1/(2σ²) + ln((e^ε - (1 - q))/q)`.
pub fn heuristic_theta(spec: &MechanismSpec, epsilon: f64) -> Result<f64> {
    check_epsilon(epsilon)?;
    if spec.q == 0.0 {
        return Err(invalid("q", "the tilting heuristic needs q > 0"));
    }
    let excess = epsilon.exp_m1() + spec.q;
    if excess <= 0.0 {
        return Err(invalid(
            "epsilon",
            format!("e^eps must exceed 1 - q for the tilting heuristic (eps = {epsilon})"),
        ));
    }
    Ok(1.0 / (2.0 * spec.sigma * spec.sigma) + (excess / spec.q).ln())
}

pub fn smc_estimate(spec: &MechanismSpec, epsilon: f64, config: &EstimatorConfig) -> Result<DeltaEstimate> {
    config.validate()?;
    check_epsilon(epsilon)?;
    if config.method != EstimatorMethod::Smc {
        return Err(invalid("method", "smc_estimate needs the smc method"));
    }
    let moments = smc_moments(spec, epsilon, config);
    Ok(finish(&moments, config.m, EstimatorMethod::Smc, None, epsilon))
}

fn smc_moments(spec: &MechanismSpec, epsilon: f64, config: &EstimatorConfig) -> Moments {
    reduce(config.m, config.chunk_size, |p| {
        let (y, _) = sample_path(spec, config.seed, p, None);
        hockey_stick(epsilon, y)
    })
}

fn resolve_tilt(spec: &MechanismSpec, epsilon: f64, config: &EstimatorConfig) -> Result<TiltPlan> {
    if spec.q == 0.0 {
        return Err(invalid("q", "importance sampling is undefined when q = 0"));
    }
    if spec.k == 0 {
        return Err(invalid("k", "importance sampling needs at least one composed step"));
    }
    let theta = match config.theta_override {
        Some(theta) => theta,
        None => heuristic_theta(spec, epsilon)?,
    };
    TiltPlan::new(spec, theta)
}

fn is_moments(spec: &MechanismSpec, epsilon: f64, config: &EstimatorConfig, plan: &TiltPlan) -> Moments {
    reduce(config.m, config.chunk_size, |p| {
        let (y, log_w) = sample_path(spec, config.seed, p, Some(plan));
        let c = hockey_stick(epsilon, y);
        if c == 0.0 {
            0.0
        } else {
            c * log_w.exp()
        }
    })
}

pub fn is_estimate(spec: &MechanismSpec, epsilon: f64, config: &EstimatorConfig) -> Result<DeltaEstimate> {
    config.validate()?;
    check_epsilon(epsilon)?;
    if config.method != EstimatorMethod::Is {
        return Err(invalid("method", "is_estimate needs the is method"));
    }
    let plan = resolve_tilt(spec, epsilon, config)?;
    let moments = is_moments(spec, epsilon, config, &plan);
    Ok(finish(&moments, config.m, EstimatorMethod::Is, Some(plan.theta), epsilon))
}

/// Dispatches on `config.method`.
pub fn estimate(spec: &MechanismSpec, epsilon: f64, config: &EstimatorConfig) -> Result<DeltaEstimate> {
    match config.method {
        EstimatorMethod::Smc => smc_estimate(spec, epsilon, config),
        EstimatorMethod::Is => is_estimate(spec, epsilon, config),
    }
}

/// Fraction of samples whose contribution to the estimator is zero.
pub fn estimate_zero_mass(spec: &MechanismSpec, epsilon: f64, config: &EstimatorConfig) -> Result<f64> {
    config.validate()?;
    check_epsilon(epsilon)?;
    let moments = match config.method {
        EstimatorMethod::Smc => smc_moments(spec, epsilon, config),
        EstimatorMethod::Is => {
            let plan = resolve_tilt(spec, epsilon, config)?;
            is_moments(spec, epsilon, config, &plan)
        }
    };
    Ok(moments.zeros as f64 / config.m as f64)
}

/// Evaluates the estimator on a stored batch. Uses the same chunked reduction
/// as the streaming estimators, so a batch drawn with the same seed gives a
/// bit-identical estimate.
pub fn evaluate_batch(batch: &PrvSampleBatch, epsilon: f64, chunk_size: usize) -> Result<DeltaEstimate> {
    check_epsilon(epsilon)?;
    if chunk_size == 0 {
        return Err(invalid("chunk_size", "must be at least 1"));
    }
    let method = if batch.is_weighted() {
        EstimatorMethod::Is
    } else {
        EstimatorMethod::Smc
    };
    let moments = evaluate_values(&batch.values, batch.is_weighted().then_some(&batch.weights[..]), epsilon, chunk_size);
    Ok(finish(&moments, batch.m, method, batch.theta, epsilon))
}

pub(crate) fn evaluate_values(values: &[f64], weights: Option<&[f64]>, epsilon: f64, chunk_size: usize) -> Moments {
    reduce(values.len() as u64, chunk_size, |p| {
        let c = hockey_stick(epsilon, values[p as usize]);
        match weights {
            Some(w) if c != 0.0 && w[p as usize] != 1.0 => c * w[p as usize],
            _ => c,
        }
    })
}

pub(crate) fn estimate_from_values(
    values: &[f64],
    weights: Option<&[f64]>,
    epsilon: f64,
    chunk_size: usize,
    theta: Option<f64>,
) -> DeltaEstimate {
    let method = if weights.is_some() {
        EstimatorMethod::Is
    } else {
        EstimatorMethod::Smc
    };
    let moments = evaluate_values(values, weights, epsilon, chunk_size);
    finish(&moments, values.len() as u64, method, theta, epsilon)
}
