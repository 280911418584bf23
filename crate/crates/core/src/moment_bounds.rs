//! Analytic upper bounds on the second moment of a single estimator
//! contribution, used as `ν` when planning verifier sample sizes.
//!
//! Every candidate is evaluated as a logarithm and exponentiated last.

use crate::error::{invalid, Error, Result};
use crate::mechanism::{log_mgf_single, log_mp_theta, log_r_lambda_x, MechanismSpec, Moment};
use crate::quadrature::{integrate, QuadratureSpec};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::sync::Arc;

pub use crate::mechanism::r_lambda_x;

/// Rényi DP curve `α ↦ ε_R(α)`; `None` where the curve is undefined.
#[derive(Clone)]
pub struct RdpCurve {
    eval: Arc<dyn Fn(f64) -> Option<f64> + Send + Sync>,
}

impl fmt::Debug for RdpCurve {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("RdpCurve")
    }
}

impl RdpCurve {
    pub fn new<F>(eval: F) -> Self
    where
        F: Fn(f64) -> Option<f64> + Send + Sync + 'static,
    {
        Self { eval: Arc::new(eval) }
    }

    /// `ε_R(α) = kα/(2σ²)` of the composed Gaussian mechanism.
    pub fn gaussian(sigma: f64, k: u64) -> Self {
        let c = k as f64 / (2.0 * sigma * sigma);
        Self::new(move |alpha| Some(c * alpha))
    }

    /// Integer-order curve of a composed mechanism from its exact MGF:
    /// `ε_R(λ+1) = k·ln M(λ)/λ`.
    pub fn from_mechanism(spec: &MechanismSpec) -> Self {
        let spec = *spec;
        Self::new(move |alpha| {
            let lambda = alpha - 1.0;
            if lambda < 1.0 || lambda.fract() != 0.0 || lambda > u32::MAX as f64 {
                return None;
            }
            Some(spec.k as f64 * log_mgf_single(&spec, lambda as u32) / lambda)
        })
    }

    pub fn eval(&self, alpha: f64) -> Result<f64> {
        if !(alpha > 1.0) {
            return Err(Error::UndefinedOrder(alpha));
        }
        match (self.eval)(alpha) {
            Some(v) if v.is_finite() => Ok(v),
            _ => Err(Error::UndefinedOrder(alpha)),
        }
    }
}

/// `M_Y(λ) ≤ exp(λ·ε_R(λ+1))`.
pub fn mgf_bound_from_rdp(curve: &RdpCurve, lambda: f64) -> Result<Moment> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(invalid("lambda", format!("must be positive, got {lambda}")));
    }
    let eps_r = curve.eval(lambda + 1.0)?;
    Ok(Moment::from_log(lambda * eps_r))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundMethod {
    SmcRdp,
    IsJs,
    IsMax,
    IsHolder,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MomentBoundResult {
    pub nu: f64,
    pub log_nu: f64,
    pub method: BoundMethod,
    pub lambda_star: Option<u32>,
    pub theta: Option<f64>,
    pub a: Option<f64>,
    pub b: Option<f64>,
    pub saturated: bool,
}

impl MomentBoundResult {
    /// SMC contributions lie in `[0, 1)`, so 1 is always a valid bound.
    fn capped(log_nu: f64, method: BoundMethod) -> Self {
        let saturated = !(log_nu < 0.0);
        let log_nu = if saturated { 0.0 } else { log_nu };
        Self {
            nu: log_nu.exp(),
            log_nu,
            method,
            lambda_star: None,
            theta: None,
            a: None,
            b: None,
            saturated,
        }
    }

    /// Importance-weighted contributions are unbounded, so there is no
    /// trivial cap; an overflowing bound is reported as infinite.
    fn uncapped(log_nu: f64, method: BoundMethod) -> Self {
        let nu = log_nu.exp();
        Self {
            nu,
            log_nu,
            method,
            lambda_star: None,
            theta: None,
            a: None,
            b: None,
            saturated: !nu.is_finite(),
        }
    }
}

pub fn default_lambda_grid() -> Vec<u32> {
    (1..=64).chain([128, 256]).collect()
}

/// Smaller default for the importance-sampling bounds, where every order
/// costs a numerical integral.
pub fn default_is_lambda_grid() -> Vec<u32> {
    (1..=32).collect()
}

pub fn default_a_grid() -> Vec<f64> {
    vec![1.0, 1.25, 1.5, 2.0, 3.0, 4.0, 8.0, f64::INFINITY]
}

/// `n` points geometrically spaced on `[lo, hi]`.
pub fn geometric_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n <= 1 {
        return vec![lo];
    }
    let r = (hi / lo).ln() / (n - 1) as f64;
    (0..n).map(|i| lo * (r * i as f64).exp()).collect()
}

fn check_epsilon(epsilon: f64) -> Result<()> {
    if !epsilon.is_finite() {
        return Err(invalid("epsilon", format!("must be finite, got {epsilon}")));
    }
    Ok(())
}

/// `ln` of the SMC bound at one order:
/// `k ln M(λ) - ελ + u ln u + λ ln λ - (u+λ) ln(u+λ)`.
fn log_smc_candidate(log_mgf: f64, k: f64, epsilon: f64, u: f64, lambda: f64) -> f64 {
    let u_term = if u > 0.0 { u * u.ln() } else { 0.0 };
    k * log_mgf - epsilon * lambda + u_term + lambda * lambda.ln() - (u + lambda) * (u + lambda).ln()
}

/// Bound on `E[c^u]` for the simple Monte Carlo contribution
/// `c = (1 - e^{ε-Y})₊`, minimised over `lambda_grid` and capped at 1.
pub fn smc_moment_bound(spec: &MechanismSpec, epsilon: f64, u: f64, lambda_grid: &[u32]) -> Result<MomentBoundResult> {
    check_epsilon(epsilon)?;
    if !(u >= 1.0 && u.is_finite()) {
        return Err(invalid("u", format!("must be at least 1, got {u}")));
    }
    if lambda_grid.is_empty() || lambda_grid.contains(&0) {
        return Err(invalid("lambda_grid", "must be a nonempty set of positive integers"));
    }
    let k = spec.k as f64;
    let (best_lambda, best) = lambda_grid
        .iter()
        .map(|&lambda| {
            let log_mgf = if spec.k == 0 { 0.0 } else { log_mgf_single(spec, lambda) };
            (lambda, log_smc_candidate(log_mgf, k, epsilon, u, lambda as f64))
        })
        .fold((lambda_grid[0], f64::INFINITY), |acc, cand| if cand.1 < acc.1 { cand } else { acc });
    let mut out = MomentBoundResult::capped(best, BoundMethod::SmcRdp);
    out.lambda_star = Some(best_lambda);
    Ok(out)
}

fn check_is_inputs(spec: &MechanismSpec, epsilon: f64, theta: f64) -> Result<()> {
    check_epsilon(epsilon)?;
    if spec.q == 0.0 {
        return Err(invalid("q", "importance-sampling bounds need q > 0"));
    }
    if spec.k == 0 {
        return Err(invalid("k", "importance-sampling bounds need k >= 1"));
    }
    if !theta.is_finite() {
        return Err(invalid("theta", format!("must be finite, got {theta}")));
    }
    Ok(())
}

fn log_js(spec: &MechanismSpec, epsilon: f64, theta: f64, log_nu_mc: f64) -> f64 {
    let k = spec.k as f64;
    let s2 = spec.sigma * spec.sigma;
    log_mp_theta(spec, theta) - theta * s2 * ((epsilon / spec.q + k) / k).ln() - 0.5 * theta + log_nu_mc
}

/// `M_P(θ)·((ε/q + k)/k)^{-θσ²}·e^{-θ/2}·ν_mc`, valid for `θ ≥ 1/σ²`.
pub fn is_moment_bound_js(spec: &MechanismSpec, epsilon: f64, theta: f64, nu_mc: f64) -> Result<MomentBoundResult> {
    check_is_inputs(spec, epsilon, theta)?;
    let floor = 1.0 / (spec.sigma * spec.sigma);
    if theta < floor {
        return Err(invalid("theta", format!("the bound requires theta >= 1/sigma^2 = {floor}, got {theta}")));
    }
    if !(nu_mc > 0.0 && nu_mc.is_finite()) {
        return Err(invalid("nu_mc", format!("must be positive and finite, got {nu_mc}")));
    }
    let mut out = MomentBoundResult::uncapped(log_js(spec, epsilon, theta, nu_mc.ln()), BoundMethod::IsJs);
    out.theta = Some(theta);
    Ok(out)
}

/// `ln ∫ r(λ, x)^k e^{-rate·x} dx` over the real line.
///
/// The integrand rises from zero on the left (the truncated MGF vanishes
/// like a Gaussian CDF) and decays exponentially on the right. The right end
/// is cut where every CDF term has saturated and the remainder is added in
/// closed form with `r(λ, x)` replaced by its limit, which can only enlarge
/// the result. The left end is pushed out until the integrand is negligible.
pub fn log_truncated_mgf_integral(spec: &MechanismSpec, lambda: u32, rate: f64, quad: &QuadratureSpec) -> Result<f64> {
    if !(rate > 0.0 && rate.is_finite()) {
        return Err(invalid("rate", format!("must be positive and finite, got {rate}")));
    }
    let k = spec.k as f64;
    let s = spec.sigma;
    let log_g = |x: f64| k * log_r_lambda_x(spec, lambda, x) - rate * x;
    let x_hi = lambda as f64 + 1.0 + 8.5 * s;
    let log_tail = k * log_r_lambda_x(spec, lambda, f64::INFINITY) - rate * x_hi - rate.ln();

    // coarse scan to locate the bulk
    let step = s / 4.0;
    let mut x = x_hi;
    let mut peak = log_g(x_hi);
    let x_lo = loop {
        x -= step;
        let g = log_g(x);
        if g > peak {
            peak = g;
        }
        if x < -12.0 * s && (g < peak - 60.0 || g == f64::NEG_INFINITY) {
            break x;
        }
        if x_hi - x > 1e7 * s {
            return Err(invalid("rate", "integrand does not decay on the left"));
        }
    };
    let body = integrate(|x| (log_g(x) - peak).exp(), x_lo, x_hi, quad, 0.0)?;
    let log_body = if body.value > 0.0 {
        peak + body.value.ln()
    } else {
        f64::NEG_INFINITY
    };
    Ok(crate::numerics::log_add_exp(log_body, log_tail))
}

fn log_max_candidate(
    spec: &MechanismSpec,
    epsilon: f64,
    theta: f64,
    lambda: u32,
    b: f64,
    quad: &QuadratureSpec,
) -> Result<f64> {
    let rate = b * theta;
    let integral = log_truncated_mgf_integral(spec, lambda, rate, quad)?;
    Ok(b.ln() + theta.ln() - lambda as f64 * epsilon + integral)
}

/// `k·M_P(θ)·θ·e^{-λε}·∫ r(λ,x)^k e^{-θx} dx`.
pub fn is_moment_bound_max(
    spec: &MechanismSpec,
    epsilon: f64,
    theta: f64,
    lambda: u32,
    quad: &QuadratureSpec,
) -> Result<MomentBoundResult> {
    check_is_inputs(spec, epsilon, theta)?;
    if !(theta > 0.0) {
        return Err(invalid("theta", format!("must be positive, got {theta}")));
    }
    if lambda == 0 {
        return Err(invalid("lambda", "order must be at least 1"));
    }
    let log_nu = (spec.k as f64).ln() + log_mp_theta(spec, theta) + log_max_candidate(spec, epsilon, theta, lambda, 1.0, quad)?;
    let mut out = MomentBoundResult::uncapped(log_nu, BoundMethod::IsMax);
    out.lambda_star = Some(lambda);
    out.theta = Some(theta);
    out.a = Some(f64::INFINITY);
    out.b = Some(1.0);
    Ok(out)
}

/// Hölder interpolation between the two bounds above:
/// `k M_P(θ)·E[c^{2a}]^{1/a}·(bθ e^{-λε} ∫ r(λ,x)^k e^{-bθx} dx)^{1/b}`,
/// minimised over `a_grid × lambda_grid`. `E[c^{2a}]` comes from
/// [`smc_moment_bound`] with `u = 2a`. `a = ∞` is the max bound and `a = 1`
/// the JS bound (only when `θ ≥ 1/σ²`).
pub fn is_moment_bound_holder(
    spec: &MechanismSpec,
    epsilon: f64,
    theta: f64,
    a_grid: &[f64],
    lambda_grid: &[u32],
    quad: &QuadratureSpec,
) -> Result<MomentBoundResult> {
    check_is_inputs(spec, epsilon, theta)?;
    if !(theta > 0.0) {
        return Err(invalid("theta", format!("must be positive, got {theta}")));
    }
    if a_grid.is_empty() || a_grid.iter().any(|&a| !(a >= 1.0)) {
        return Err(invalid("a_grid", "must be a nonempty set of values >= 1"));
    }
    if lambda_grid.is_empty() || lambda_grid.contains(&0) {
        return Err(invalid("lambda_grid", "must be a nonempty set of positive integers"));
    }
    let smc_grid = default_lambda_grid();
    let log_k_mp = (spec.k as f64).ln() + log_mp_theta(spec, theta);
    let js_allowed = theta >= 1.0 / (spec.sigma * spec.sigma);

    struct Candidate {
        log_nu: f64,
        lambda: Option<u32>,
        a: f64,
        b: f64,
    }

    let mut candidates: Vec<Candidate> = Vec::new();
    let mut pairs: Vec<(f64, u32)> = Vec::new();
    for &a in a_grid {
        if a == 1.0 {
            if js_allowed {
                let nu_mc = smc_moment_bound(spec, epsilon, 2.0, &smc_grid)?;
                candidates.push(Candidate {
                    log_nu: log_js(spec, epsilon, theta, nu_mc.log_nu),
                    lambda: None,
                    a: 1.0,
                    b: f64::INFINITY,
                });
            }
            continue;
        }
        for &lambda in lambda_grid {
            pairs.push((a, lambda));
        }
    }
    let evaluated: Vec<Result<Candidate>> = pairs
        .par_iter()
        .map(|&(a, lambda)| {
            let (b, log_moment_term) = if a == f64::INFINITY {
                (1.0, 0.0)
            } else {
                let b = a / (a - 1.0);
                let moment = smc_moment_bound(spec, epsilon, 2.0 * a, &smc_grid)?;
                (b, moment.log_nu / a)
            };
            let tail = log_max_candidate(spec, epsilon, theta, lambda, b, quad)?;
            Ok(Candidate {
                log_nu: log_k_mp + log_moment_term + tail / b,
                lambda: Some(lambda),
                a,
                b,
            })
        })
        .collect();
    for c in evaluated {
        candidates.push(c?);
    }
    let best = candidates
        .into_iter()
        .reduce(|acc, c| if c.log_nu < acc.log_nu { c } else { acc })
        .ok_or_else(|| invalid("a_grid", "no admissible (a, lambda) pair for this theta"))?;
    let mut out = MomentBoundResult::uncapped(best.log_nu, BoundMethod::IsHolder);
    out.lambda_star = best.lambda;
    out.theta = Some(theta);
    out.a = Some(best.a);
    out.b = Some(best.b);
    Ok(out)
}

/// Grid point minimising the Hölder bound (default `a` and `λ` grids);
/// ties go to the smaller θ.
pub fn optimal_theta(
    spec: &MechanismSpec,
    epsilon: f64,
    theta_grid: &[f64],
    quad: &QuadratureSpec,
) -> Result<(f64, MomentBoundResult)> {
    if theta_grid.is_empty() || theta_grid.iter().any(|&t| !(t > 0.0 && t.is_finite())) {
        return Err(invalid("theta_grid", "must be a nonempty set of positive values"));
    }
    let mut sorted = theta_grid.to_vec();
    sorted.sort_by(f64::total_cmp);
    let a_grid = default_a_grid();
    let lambda_grid = default_is_lambda_grid();
    let mut best: Option<(f64, MomentBoundResult)> = None;
    for theta in sorted {
        let bound = is_moment_bound_holder(spec, epsilon, theta, &a_grid, &lambda_grid, quad)?;
        if best.as_ref().is_none_or(|(_, b)| bound.log_nu < b.log_nu) {
            best = Some((theta, bound));
        }
    }
    Ok(best.expect("grid is nonempty"))
}
