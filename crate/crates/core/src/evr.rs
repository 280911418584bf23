//! Estimate-verify-release: a Monte Carlo verifier of a proposed `(ε, δ)`
//! with a Bennett-planned sample size, and a gate that runs a payload only
//! when the proposal is accepted.

use crate::error::{invalid, Error, Result};
use crate::estimators::{estimate, heuristic_theta, DeltaEstimate, EstimatorConfig, EstimatorMethod};
use crate::mechanism::MechanismSpec;
use crate::moment_bounds::{
    default_a_grid, default_is_lambda_grid, default_lambda_grid, is_moment_bound_holder, is_moment_bound_js,
    is_moment_bound_max, smc_moment_bound, BoundMethod, MomentBoundResult,
};
use crate::quadrature::QuadratureSpec;
use serde::{Deserialize, Serialize};

/// Heuristic offset `Δ = 0.4·(1/τ - 1/ρ)·δ_est`.
pub fn delta_offset_heuristic(tau: f64, rho: f64, delta_est: f64) -> Result<f64> {
    check_tau(tau)?;
    if !(rho <= 1.0) {
        return Err(invalid("rho", format!("must be at most 1, got {rho}")));
    }
    if !(tau < rho) {
        return Err(invalid("tau", "tau must be < rho"));
    }
    if !(delta_est > 0.0 && delta_est.is_finite()) {
        return Err(invalid("delta_est", format!("must be positive, got {delta_est}")));
    }
    Ok(0.4 * (1.0 / tau - 1.0 / rho) * delta_est)
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(invalid("tau", format!("must lie in (0, 1], got {tau}")));
    }
    Ok(())
}

/// Smallest `m` with `exp(-mΔ²/(2ν)) ≤ δ_est/τ`.
pub fn plan_sample_size(nu: f64, delta_offset: f64, tau: f64, delta_est: f64) -> Result<u64> {
    check_tau(tau)?;
    if !(nu > 0.0) || nu.is_nan() {
        return Err(invalid("nu", format!("must be positive, got {nu}")));
    }
    if !(delta_offset > 0.0 && delta_offset.is_finite()) {
        return Err(invalid("delta_offset", format!("must be positive, got {delta_offset}")));
    }
    if !(delta_est > 0.0) {
        return Err(invalid("delta_est", format!("must be positive, got {delta_est}")));
    }
    if !(delta_est < tau) {
        return Err(invalid("delta_est", "must be below tau, otherwise the bound is vacuous"));
    }
    let log_ratio = (tau / delta_est).ln();
    let exact = 2.0 * nu / (delta_offset * delta_offset) * log_ratio;
    if !(exact < i64::MAX as f64) {
        return Err(Error::Infeasible(format!(
            "required sample size {exact:e} exceeds 2^63 - 1 (nu = {nu:e}, offset = {delta_offset:e})"
        )));
    }
    let mut m = exact.ceil().max(1.0) as u64;
    // the ceiling can land a few ulps short once exp and ln round
    let bound = delta_est / tau;
    while (-(m as f64) * delta_offset * delta_offset / (2.0 * nu)).exp() > bound {
        let next_float = f64::from_bits((m as f64).to_bits() + 1) as u64;
        m = (m + 1).max(next_float);
    }
    if m > i64::MAX as u64 {
        return Err(Error::Infeasible(format!("required sample size {m} exceeds 2^63 - 1")));
    }
    Ok(m)
}

/// Where the second-moment bound of a plan came from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NuSource {
    /// An analytic bound; the false-positive guarantee holds.
    Analytic { method: BoundMethod },
    /// A value supplied by the caller, e.g. an empirical second moment. The
    /// guarantee then rests on that estimate.
    Supplied,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvrPlan {
    pub epsilon: f64,
    pub delta_est: f64,
    pub tau: f64,
    pub rho: f64,
    pub delta_offset: f64,
    pub m: u64,
    pub nu: f64,
    pub nu_source: NuSource,
    pub bound: Option<MomentBoundResult>,
    pub estimator: EstimatorConfig,
}

impl EvrPlan {
    pub fn threshold(&self) -> f64 {
        self.delta_est / self.tau - self.delta_offset
    }

    pub fn heuristic_nu(&self) -> bool {
        matches!(self.nu_source, NuSource::Supplied)
    }

    fn validate(&self) -> Result<()> {
        check_tau(self.tau)?;
        if !(self.tau <= self.rho && self.rho <= 1.0) {
            return Err(invalid("rho", format!("need tau <= rho <= 1, got tau = {}, rho = {}", self.tau, self.rho)));
        }
        if !(self.threshold() > 0.0) {
            return Err(invalid(
                "delta_offset",
                format!("threshold delta_est/tau - offset = {:e} must be positive", self.threshold()),
            ));
        }
        if self.m != self.estimator.m {
            return Err(invalid("m", "plan and estimator sample counts differ"));
        }
        self.estimator.validate()
    }
}

/// How to obtain `ν` for a plan.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NuChoice {
    Analytic { method: BoundMethod },
    Supplied { nu: f64 },
}

impl NuChoice {
    /// RDP-based moment bound for simple Monte Carlo, Hölder bound for
    /// importance sampling.
    pub fn default_for(method: EstimatorMethod) -> Self {
        match method {
            EstimatorMethod::Smc => NuChoice::Analytic {
                method: BoundMethod::SmcRdp,
            },
            EstimatorMethod::Is => NuChoice::Analytic {
                method: BoundMethod::IsHolder,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlanOptions {
    pub tau: f64,
    /// Defaults to `(1 + τ)/2`.
    pub rho: Option<f64>,
    /// Defaults to the heuristic offset.
    pub delta_offset: Option<f64>,
    pub nu: NuChoice,
    pub estimator: EstimatorMethod,
    pub theta_override: Option<f64>,
    pub seed: u64,
    pub chunk_size: usize,
    pub quad: QuadratureSpec,
}

impl PlanOptions {
    pub fn new(tau: f64, estimator: EstimatorMethod, seed: u64) -> Self {
        Self {
            tau,
            rho: None,
            delta_offset: None,
            nu: NuChoice::default_for(estimator),
            estimator,
            theta_override: None,
            seed,
            chunk_size: crate::estimators::DEFAULT_CHUNK_SIZE,
            quad: QuadratureSpec::new(1e-8, 4000).expect("valid tolerance"),
        }
    }
}

fn analytic_nu(
    spec: &MechanismSpec,
    epsilon: f64,
    method: BoundMethod,
    estimator: EstimatorMethod,
    theta: Option<f64>,
    quad: &QuadratureSpec,
) -> Result<MomentBoundResult> {
    match (estimator, method) {
        (EstimatorMethod::Smc, BoundMethod::SmcRdp) => smc_moment_bound(spec, epsilon, 2.0, &default_lambda_grid()),
        (EstimatorMethod::Smc, _) => Err(invalid("bound_method", "simple Monte Carlo plans use the smc bound")),
        (EstimatorMethod::Is, BoundMethod::SmcRdp) => Err(invalid("bound_method", "importance-sampling plans need an is bound")),
        (EstimatorMethod::Is, method) => {
            let theta = theta.expect("resolved before");
            match method {
                BoundMethod::IsJs => {
                    let nu_mc = smc_moment_bound(spec, epsilon, 2.0, &default_lambda_grid())?;
                    is_moment_bound_js(spec, epsilon, theta, nu_mc.nu)
                }
                BoundMethod::IsMax => {
                    let mut best: Option<MomentBoundResult> = None;
                    for lambda in default_is_lambda_grid() {
                        let r = is_moment_bound_max(spec, epsilon, theta, lambda, quad)?;
                        if best.is_none_or(|b| r.log_nu < b.log_nu) {
                            best = Some(r);
                        }
                    }
                    Ok(best.expect("grid is nonempty"))
                }
                _ => is_moment_bound_holder(spec, epsilon, theta, &default_a_grid(), &default_is_lambda_grid(), quad),
            }
        }
    }
}

/// Assembles a plan: offset, second-moment bound, and Bennett sample size.
pub fn build_plan(spec: &MechanismSpec, epsilon: f64, delta_est: f64, options: &PlanOptions) -> Result<EvrPlan> {
    if !epsilon.is_finite() || epsilon < 0.0 {
        return Err(invalid("epsilon", format!("must be finite and nonnegative, got {epsilon}")));
    }
    if !(delta_est > 0.0 && delta_est < 1.0) {
        return Err(invalid("delta_est", format!("must lie in (0, 1), got {delta_est}")));
    }
    let tau = options.tau;
    check_tau(tau)?;
    let rho = options.rho.unwrap_or((1.0 + tau) / 2.0);
    let delta_offset = match options.delta_offset {
        Some(d) => d,
        None => delta_offset_heuristic(tau, rho, delta_est)?,
    };
    if !(delta_est / tau - delta_offset > 0.0) {
        return Err(invalid(
            "delta_offset",
            format!("threshold delta_est/tau - offset = {:e} must be positive", delta_est / tau - delta_offset),
        ));
    }
    let theta = match options.estimator {
        EstimatorMethod::Is => Some(match options.theta_override {
            Some(t) => t,
            None => heuristic_theta(spec, epsilon)?,
        }),
        EstimatorMethod::Smc => None,
    };
    let (nu, nu_source, bound) = match options.nu {
        NuChoice::Supplied { nu } => {
            if !(nu > 0.0 && nu.is_finite()) {
                return Err(invalid("nu", format!("must be positive and finite, got {nu}")));
            }
            (nu, NuSource::Supplied, None)
        }
        NuChoice::Analytic { method } => {
            let b = analytic_nu(spec, epsilon, method, options.estimator, theta, &options.quad)?;
            (b.nu, NuSource::Analytic { method }, Some(b))
        }
    };
    if !nu.is_finite() {
        return Err(Error::Infeasible("the second-moment bound overflowed".into()));
    }
    let m = plan_sample_size(nu, delta_offset, tau, delta_est)?;
    let estimator = EstimatorConfig {
        method: options.estimator,
        m,
        seed: options.seed,
        chunk_size: options.chunk_size,
        theta_override: if options.estimator == EstimatorMethod::Is { theta } else { None },
    };
    let plan = EvrPlan {
        epsilon,
        delta_est,
        tau,
        rho,
        delta_offset,
        m,
        nu,
        nu_source,
        bound,
        estimator,
    };
    plan.validate()?;
    Ok(plan)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub accepted: bool,
    pub delta_hat: f64,
    pub threshold: f64,
    pub plan: EvrPlan,
    /// Guaranteed relaxed false-positive rate `δ_est/τ`; only meaningful when
    /// `heuristic_nu` is false.
    pub fp_bound: f64,
    pub heuristic_nu: bool,
    pub estimate: DeltaEstimate,
}

/// Accepts iff `δ̂ < δ_est/τ - Δ` with `δ̂` drawn from `plan.m` samples.
pub fn verify(spec: &MechanismSpec, plan: &EvrPlan) -> Result<Verdict> {
    plan.validate()?;
    let est = estimate(spec, plan.epsilon, &plan.estimator)?;
    Ok(verdict_from(plan, est))
}

pub(crate) fn verdict_from(plan: &EvrPlan, est: DeltaEstimate) -> Verdict {
    let threshold = plan.threshold();
    Verdict {
        accepted: est.value < threshold,
        delta_hat: est.value,
        threshold,
        plan: *plan,
        fp_bound: plan.delta_est / plan.tau,
        heuristic_nu: plan.heuristic_nu(),
        estimate: est,
    }
}

/// Output of the release gate: the payload's result, or the rejection.
#[derive(Debug, Clone, PartialEq)]
pub enum Release<T> {
    Released(T),
    Rejected(Verdict),
}

impl<T> Release<T> {
    pub fn is_released(&self) -> bool {
        matches!(self, Release::Released(_))
    }
}

/// Runs `payload` iff the verifier accepts `plan`.
pub fn run_evr<T, F: FnOnce() -> T>(spec: &MechanismSpec, plan: &EvrPlan, payload: F) -> Result<Release<T>> {
    let verdict = verify(spec, plan)?;
    if verdict.accepted {
        Ok(Release::Released(payload()))
    } else {
        Ok(Release::Rejected(verdict))
    }
}
