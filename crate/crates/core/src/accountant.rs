//! Monte Carlo privacy accounting: `δ(ε)` and `ε(δ)` for a composed
//! mechanism, offline over a fixed batch or online one composition step at a
//! time.

use crate::error::{invalid, Error, Result};
use crate::estimators::{
    estimate, estimate_from_values, heuristic_theta, DeltaEstimate, EstimatorConfig, EstimatorMethod,
};
use crate::mechanism::{log_mgf_single, sample_prv, sample_step, MechanismSpec, PrvSampleBatch, TiltPlan};
use crate::moment_bounds::default_lambda_grid;
use crate::numerics::NeumaierSum;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Fewest samples above `max(ε, 0)` for an `ε(δ)` answer to be reported.
pub const MIN_CONTRIBUTING: u64 = 10;

/// Relative tolerance of the `ε(δ)` solve.
pub const EPS_SOLVE_RTOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "direction", content = "target", rename_all = "snake_case")]
pub enum Query {
    DeltaOfEps(f64),
    EpsOfDelta(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccountantQuery {
    pub spec: MechanismSpec,
    pub query: Query,
    pub estimator: EstimatorConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpsilonEstimate {
    pub epsilon: f64,
    pub target_delta: f64,
    /// The estimator evaluated at `epsilon` on the batch used for the solve.
    pub achieved: DeltaEstimate,
    pub contributing: u64,
}

impl EpsilonEstimate {
    pub fn relative_residual(&self) -> f64 {
        (self.achieved.value - self.target_delta).abs() / self.target_delta
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Answer {
    Delta(DeltaEstimate),
    Epsilon(EpsilonEstimate),
}

pub fn answer(query: &AccountantQuery) -> Result<Answer> {
    match query.query {
        Query::DeltaOfEps(eps) => delta_of_eps(&query.spec, eps, &query.estimator).map(Answer::Delta),
        Query::EpsOfDelta(delta) => eps_of_delta(&query.spec, delta, &query.estimator).map(Answer::Epsilon),
    }
}

pub fn delta_of_eps(spec: &MechanismSpec, epsilon: f64, config: &EstimatorConfig) -> Result<DeltaEstimate> {
    estimate(spec, epsilon, config)
}

/// RDP-converted `ε` at `δ`, used to place the tilt of an `ε(δ)` query.
pub fn rdp_epsilon(spec: &MechanismSpec, delta: f64) -> f64 {
    let k = spec.k as f64;
    default_lambda_grid()
        .into_iter()
        .map(|l| (k * log_mgf_single(spec, l) - delta.ln()) / l as f64)
        .fold(f64::INFINITY, f64::min)
}

fn check_delta(delta: f64) -> Result<()> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(invalid("delta", format!("must lie in (0, 1), got {delta}")));
    }
    Ok(())
}

/// Draws one batch and solves `δ̂(ε) = δ` on it.
pub fn eps_of_delta(spec: &MechanismSpec, delta: f64, config: &EstimatorConfig) -> Result<EpsilonEstimate> {
    check_delta(delta)?;
    config.validate()?;
    if config.method == EstimatorMethod::Smc {
        let batch = sample_prv(spec, config.m, config.seed, None)?;
        return eps_of_delta_batch(&batch, delta, config.chunk_size);
    }
    if spec.q == 0.0 {
        return Err(invalid("q", "importance sampling is undefined when q = 0"));
    }
    let tilted = |theta: f64| -> Result<EpsilonEstimate> {
        let batch = sample_prv(spec, config.m, config.seed, Some(&TiltPlan::new(spec, theta)?))?;
        eps_of_delta_batch(&batch, delta, config.chunk_size)
    };
    if let Some(theta) = config.theta_override {
        return tilted(theta);
    }
    // The tilt is placed for the ε being solved for. Start from the RDP
    // conversion, which overshoots, and re-tilt at the solution until the
    // two agree. A batch that cannot reach δ at all was tilted too far.
    let mut guess = rdp_epsilon(spec, delta).max(0.0);
    let mut last = None;
    for _ in 0..MAX_TILT_ROUNDS {
        match tilted(heuristic_theta(spec, guess)?) {
            Ok(e) => {
                let next = e.epsilon.max(0.0);
                let settled = (next - guess).abs() <= TILT_SETTLE * guess.max(1.0);
                last = Some(Ok(e));
                if settled {
                    break;
                }
                guess = next;
            }
            Err(Error::InvalidParameter { name: "delta", reason }) => {
                if !matches!(last, Some(Ok(_))) {
                    last = Some(Err(Error::InvalidParameter { name: "delta", reason }));
                }
                guess /= 2.0;
            }
            Err(e) => return Err(e),
        }
    }
    last.expect("at least one round")
}

const MAX_TILT_ROUNDS: usize = 6;
const TILT_SETTLE: f64 = 0.05;

pub fn eps_of_delta_batch(batch: &PrvSampleBatch, delta: f64, chunk_size: usize) -> Result<EpsilonEstimate> {
    let weights = batch.is_weighted().then_some(&batch.weights[..]);
    solve_epsilon(&batch.values, weights, batch.theta, delta, chunk_size)
}

/// Solves `δ̂(ε) = δ` for the estimator over fixed samples.
///
/// With the samples sorted in decreasing order, `m·δ̂(ε) = W_j - e^ε V_j` on
/// the segment where exactly the top `j` samples exceed `ε`, where
/// `W_j = Σ w` and `V_j = Σ w e^{-y}` over those samples. The segment is found
/// by bisection over `j` and `ε` then follows in closed form.
pub(crate) fn solve_epsilon(
    values: &[f64],
    weights: Option<&[f64]>,
    theta: Option<f64>,
    delta: f64,
    chunk_size: usize,
) -> Result<EpsilonEstimate> {
    check_delta(delta)?;
    if chunk_size == 0 {
        return Err(invalid("chunk_size", "must be at least 1"));
    }
    if values.is_empty() {
        return Err(invalid("m", "sample count must be at least 1"));
    }
    if values.iter().any(|v| v.is_nan()) {
        return Err(invalid("values", "samples contain NaN"));
    }
    let m = values.len();
    let w = |i: usize| weights.map_or(1.0, |w| w[i]);
    let mut order: Vec<usize> = (0..m).collect();
    order.par_sort_unstable_by(|&a, &b| values[b].total_cmp(&values[a]));
    let ys: Vec<f64> = order.iter().map(|&i| values[i]).collect();

    // prefix[j] = sums over the top j samples
    let mut big_w = Vec::with_capacity(m + 1);
    let mut big_v = Vec::with_capacity(m + 1);
    let (mut sw, mut sv) = (NeumaierSum::default(), NeumaierSum::default());
    big_w.push(0.0);
    big_v.push(0.0);
    for (&i, &y) in order.iter().zip(&ys) {
        sw.add(w(i));
        sv.add(w(i) * (-y).exp());
        big_w.push(sw.value());
        big_v.push(sv.value());
    }
    let target = m as f64 * delta;
    // m·δ̂ at ε = ys[j]: only the top j samples (strictly above) count
    let at_break = |j: usize| -> f64 {
        let v = big_w[j] - ys[j].exp() * big_v[j];
        if v.is_nan() {
            f64::INFINITY
        } else {
            v
        }
    };

    let resolution = |contributing: u64| {
        let floor = if m as u64 >= MIN_CONTRIBUTING {
            let j = MIN_CONTRIBUTING as usize - 1;
            (at_break(j).max(0.0) / m as f64).max(0.0)
        } else {
            f64::NAN
        };
        Error::BelowResolution {
            target: delta,
            floor,
            contributing,
        }
    };

    // largest j (number of samples strictly above ε) with at_break(j) <= target
    let (mut lo, mut hi) = (0usize, m);
    if at_break(m - 1) <= target {
        lo = m - 1;
    } else {
        while hi - lo > 1 {
            let mid = lo + (hi - lo) / 2;
            if at_break(mid) <= target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
    }
    // samples ys[..=lo] lie above the solution
    let j = lo + 1;
    if big_w[j] <= target {
        if j == m {
            return Err(invalid(
                "delta",
                format!("target {delta:e} exceeds the largest value the estimator reaches on this batch"),
            ));
        }
        return Err(resolution(0));
    }
    let mut eps = ((big_w[j] - target) / big_v[j]).ln();
    let seg_hi = ys[j - 1];
    let seg_lo = if j < m { ys[j] } else { f64::NEG_INFINITY };
    if !eps.is_finite() {
        return Err(resolution(0));
    }
    eps = eps.clamp(seg_lo, seg_hi);

    let contributing = |e: f64| -> u64 {
        let cut = e.max(0.0);
        ys.partition_point(|&y| y > cut) as u64
    };
    let eval = |e: f64| estimate_from_values(values, weights, e, chunk_size, theta);

    let mut achieved = eval(eps);
    let rel = |a: &DeltaEstimate| (a.value - delta).abs() / delta;
    if rel(&achieved) > EPS_SOLVE_RTOL {
        // rounding in the prefix sums; polish on the chunked estimator
        let (mut a, mut b) = (if seg_lo.is_finite() { seg_lo } else { eps - 1.0 }, seg_hi);
        while eval(a).value < delta {
            a -= (b - a).max(1.0);
        }
        while eval(b).value > delta {
            b += (b - a).max(1.0);
        }
        while b - a > 1e-12 && rel(&achieved) > EPS_SOLVE_RTOL {
            let mid = 0.5 * (a + b);
            achieved = eval(mid);
            eps = mid;
            if achieved.value > delta {
                a = mid;
            } else {
                b = mid;
            }
        }
    }
    let n = contributing(eps);
    if n < MIN_CONTRIBUTING {
        return Err(resolution(n));
    }
    Ok(EpsilonEstimate {
        epsilon: eps,
        target_delta: delta,
        achieved,
        contributing: n,
    })
}

/// Running composed PRV samples for online accounting. Step `j` draws
/// coordinate `j` of every path, so after `k` identical steps the state holds
/// the same values as an offline batch with the same seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OnlineState {
    sums: Vec<f64>,
    seed: u64,
    chunk_size: usize,
    steps: Vec<MechanismSpec>,
}

impl OnlineState {
    /// Only the untilted sampler supports online updates; a tilted config is
    /// rejected.
    pub fn new(config: &EstimatorConfig) -> Result<Self> {
        config.validate()?;
        if config.method != EstimatorMethod::Smc {
            return Err(invalid(
                "method",
                "online accounting supports only the untilted sampler; tilted and untilted steps cannot be mixed",
            ));
        }
        let n = usize::try_from(config.m).map_err(|_| invalid("m", "too large for this platform"))?;
        Ok(Self {
            sums: vec![0.0; n],
            seed: config.seed,
            chunk_size: config.chunk_size,
            steps: Vec::new(),
        })
    }

    pub fn steps(&self) -> usize {
        self.steps.len()
    }

    pub fn history(&self) -> &[MechanismSpec] {
        &self.steps
    }

    pub fn values(&self) -> &[f64] {
        &self.sums
    }

    pub fn step(&mut self, params: &MechanismSpec) -> Result<()> {
        let j = u32::try_from(self.steps.len())
            .ok()
            .filter(|&j| j < u32::MAX)
            .ok_or_else(|| invalid("k", "too many online steps"))?;
        let single = params.single();
        let seed = self.seed;
        self.sums
            .par_iter_mut()
            .enumerate()
            .for_each(|(p, s)| *s += sample_step(&single, seed, p as u64, j));
        self.steps.push(single);
        Ok(())
    }

    pub fn delta(&self, epsilon: f64) -> Result<DeltaEstimate> {
        if !epsilon.is_finite() {
            return Err(invalid("epsilon", format!("must be finite, got {epsilon}")));
        }
        Ok(estimate_from_values(&self.sums, None, epsilon, self.chunk_size, None))
    }

    pub fn epsilon(&self, delta: f64) -> Result<EpsilonEstimate> {
        solve_epsilon(&self.sums, None, None, delta, self.chunk_size)
    }
}

pub fn relative_error(estimate: f64, truth: f64) -> Result<f64> {
    if !(truth > 0.0) || !truth.is_finite() {
        return Err(invalid("truth", format!("must be positive and finite, got {truth}")));
    }
    Ok((estimate - truth).abs() / truth)
}
