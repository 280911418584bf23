//! Reference values for `δ_Y(ε)` that share nothing with the samplers except
//! the scalar log-ratio `y(t)`: the Gaussian closed form, direct quadrature of
//! a single step, and a lattice convolution bracket for small compositions.

use crate::error::{invalid, Result};
use crate::mechanism::{log_ratio, MechanismSpec};
use crate::numerics::{log_add_exp, log_ndtr, ndtr, ndtr_upper};
use serde::{Deserialize, Serialize};

pub use crate::quadrature::{integrate, QuadratureResult, QuadratureSpec};

/// `ln δ(ε)` for the composed Gaussian PRV `N(μ, 2μ)`, `μ = k/(2σ²)`:
/// `δ = Φ((μ-ε)/s) - e^ε Φ((-μ-ε)/s)`.
pub fn gaussian_exact_log_delta(sigma: f64, k: u64, epsilon: f64) -> Result<f64> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(invalid("sigma", format!("must be positive and finite, got {sigma}")));
    }
    if epsilon.is_nan() {
        return Err(invalid("epsilon", "must not be NaN"));
    }
    if k == 0 {
        // Y ≡ 0
        return Ok(if epsilon < 0.0 { (-(epsilon.exp_m1())).ln() } else { f64::NEG_INFINITY });
    }
    let mu = k as f64 / (2.0 * sigma * sigma);
    let s = (k as f64).sqrt() / sigma;
    let lead = log_ndtr((mu - epsilon) / s);
    let lag = epsilon + log_ndtr((-mu - epsilon) / s);
    let d = lag - lead;
    if d >= 0.0 {
        return Ok(f64::NEG_INFINITY);
    }
    Ok(lead + (-d.exp_m1()).ln())
}

pub fn gaussian_exact_delta(sigma: f64, k: u64, epsilon: f64) -> Result<f64> {
    Ok(gaussian_exact_log_delta(sigma, k, epsilon)?.exp().clamp(0.0, 1.0))
}

/// CDF of the dominating distribution `P`.
pub fn mixture_cdf(spec: &MechanismSpec, t: f64) -> f64 {
    let s = spec.sigma;
    (1.0 - spec.q) * ndtr(t / s) + spec.q * ndtr((t - 1.0) / s)
}

fn mixture_sf(spec: &MechanismSpec, t: f64) -> f64 {
    let s = spec.sigma;
    (1.0 - spec.q) * ndtr_upper(t / s) + spec.q * ndtr_upper((t - 1.0) / s)
}

fn mixture_pdf(spec: &MechanismSpec, t: f64) -> f64 {
    let s = spec.sigma;
    let c = 1.0 / (s * (2.0 * std::f64::consts::PI).sqrt());
    let z0 = t / s;
    let z1 = (t - 1.0) / s;
    c * ((1.0 - spec.q) * (-0.5 * z0 * z0).exp() + spec.q * (-0.5 * z1 * z1).exp())
}

fn log_mixture_pdf(spec: &MechanismSpec, t: f64) -> f64 {
    let s = spec.sigma;
    let z0 = t / s;
    let z1 = (t - 1.0) / s;
    let null = if spec.q < 1.0 { (-spec.q).ln_1p() - 0.5 * z0 * z0 } else { f64::NEG_INFINITY };
    let alt = if spec.q > 0.0 { spec.q.ln() - 0.5 * z1 * z1 } else { f64::NEG_INFINITY };
    log_add_exp(null, alt) - (s * (2.0 * std::f64::consts::PI).sqrt()).ln()
}

/// `ln E_{t~P}[e^{λ y(t)}]` of a single step by quadrature in `t`, with `y`
/// evaluated from its definition. Independent of the binomial expansion in
/// the mechanism module.
pub fn quadrature_log_mgf_single(spec: &MechanismSpec, lambda: f64, quad: &QuadratureSpec) -> Result<f64> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(invalid("lambda", format!("must be finite and nonnegative, got {lambda}")));
    }
    let s = spec.sigma;
    let s2 = s * s;
    let y = |t: f64| {
        let a = (t - 0.5) / s2;
        let null = if spec.q < 1.0 { (-spec.q).ln_1p() } else { f64::NEG_INFINITY };
        let alt = if spec.q > 0.0 { spec.q.ln() + a } else { f64::NEG_INFINITY };
        log_add_exp(null, alt)
    };
    let log_f = |t: f64| lambda * y(t) + log_mixture_pdf(spec, t);
    let lo = -40.0 * s;
    let hi = 1.0 + lambda + 40.0 * s;
    let peak = (0..=4000)
        .map(|i| log_f(lo + (hi - lo) * i as f64 / 4000.0))
        .fold(f64::NEG_INFINITY, f64::max);
    let mut cuts = vec![lo];
    for c in [0.0, 1.0, 1.0 + lambda] {
        if c > *cuts.last().unwrap() && c < hi {
            cuts.push(c);
        }
    }
    cuts.push(hi);
    let mut value = 0.0;
    for w in cuts.windows(2) {
        value += integrate(|t| (log_f(t) - peak).exp(), w[0], w[1], quad, 0.0)?.value;
    }
    Ok(value.ln() + peak)
}

/// `t` with `y(t) = y`; `-∞` when `y` is at or below the infimum `ln(1-q)`.
fn inverse_log_ratio(spec: &MechanismSpec, y: f64) -> f64 {
    let s2 = spec.sigma * spec.sigma;
    if spec.q == 1.0 {
        return 0.5 + s2 * y;
    }
    let inner = y.exp_m1() + spec.q;
    if inner <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if y > 700.0 {
        // expm1 overflows; ln((e^y - 1 + q)/q) ≈ y - ln q
        return 0.5 + s2 * (y - spec.q.ln());
    }
    0.5 + s2 * (inner / spec.q).ln()
}

/// `δ(ε)` of a single step by adaptive quadrature of
/// `∫_{t_ε}^∞ (1 - e^{ε - y(t)}) P(t) dt`. `spec.k` is ignored.
pub fn quadrature_delta_single(spec: &MechanismSpec, epsilon: f64, quad: &QuadratureSpec) -> Result<f64> {
    Ok(quadrature_delta_single_detailed(spec, epsilon, quad)?.value)
}

pub fn quadrature_delta_single_detailed(spec: &MechanismSpec, epsilon: f64, quad: &QuadratureSpec) -> Result<QuadratureResult> {
    if !epsilon.is_finite() {
        return Err(invalid("epsilon", format!("must be finite, got {epsilon}")));
    }
    if spec.q == 0.0 {
        let value = if epsilon < 0.0 { -epsilon.exp_m1() } else { 0.0 };
        return Ok(QuadratureResult {
            value,
            error: 0.0,
            subdivisions: 0,
        });
    }
    let s = spec.sigma;
    let t_eps = inverse_log_ratio(spec, epsilon);
    let lo = t_eps.max(-40.0 * s);
    let hi = lo.max(1.0) + 40.0 * s;
    let integrand = |t: f64| {
        let y = log_ratio(spec, t);
        if y <= epsilon {
            0.0
        } else {
            -(epsilon - y).exp_m1() * mixture_pdf(spec, t)
        }
    };
    // split at the component means so both bumps are resolved from the start
    let mut cuts = vec![lo];
    for c in [0.0, 1.0] {
        if c > lo && c < hi {
            cuts.push(c);
        }
    }
    cuts.push(hi);
    let mut value = 0.0;
    let mut error = 0.0;
    let mut subdivisions = 0;
    for w in cuts.windows(2) {
        let r = integrate(integrand, w[0], w[1], quad, 0.0)?;
        value += r.value;
        error += r.error;
        subdivisions += r.subdivisions;
    }
    Ok(QuadratureResult {
        value,
        error,
        subdivisions,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConvolutionParams {
    /// Lattice step in nats.
    pub step: f64,
    /// Single-step tail mass left off the lattice (on each side).
    pub tail_mass: f64,
    /// Lattice entries below this mass are trimmed from the ends after each
    /// convolution and moved to the spill.
    pub trim_mass: f64,
}

impl Default for ConvolutionParams {
    fn default() -> Self {
        Self {
            step: 1e-3,
            tail_mass: 1e-18,
            trim_mass: 1e-30,
        }
    }
}

impl ConvolutionParams {
    pub fn with_step(step: f64) -> Self {
        Self {
            step,
            ..Self::default()
        }
    }
}

/// Discretized PRV law on the lattice `(offset + i)·step`. Each entry holds
/// the mass whose true value lies in `[y_i, y_i + steps_per_entry·step)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPld {
    pub step: f64,
    pub offset: i64,
    pub masses: Vec<f64>,
    pub spill: f64,
    /// Number of composed steps; the rounding slack is `steps·step`.
    pub steps: u64,
}

impl GridPld {
    fn point_mass_at_zero(step: f64) -> Self {
        Self {
            step,
            offset: 0,
            masses: vec![1.0],
            spill: 0.0,
            steps: 0,
        }
    }

    /// Floor-lattice discretization of one step of `spec`.
    pub fn single_step(spec: &MechanismSpec, params: &ConvolutionParams) -> Result<Self> {
        let h = params.step;
        if !(h > 0.0 && h.is_finite()) {
            return Err(invalid("step", format!("must be positive and finite, got {h}")));
        }
        if !(params.tail_mass > 0.0 && params.tail_mass < 1e-3) {
            return Err(invalid("tail_mass", "must lie in (0, 1e-3)"));
        }
        if spec.q == 0.0 {
            // Y ≡ 0 sits exactly on the lattice, no rounding slack
            return Ok(Self::point_mass_at_zero(h));
        }
        let s = spec.sigma;
        let z = normal_upper_quantile(params.tail_mass / 2.0);
        let t_min = -z * s;
        let t_max = 1.0 + z * s;
        let left_spill = mixture_cdf(spec, t_min);
        let right_spill = mixture_sf(spec, t_max);
        let y_min = log_ratio(spec, t_min);
        let y_max = log_ratio(spec, t_max);
        let i_lo = (y_min / h).floor() as i64;
        let i_hi = (y_max / h).floor() as i64;
        let n = (i_hi - i_lo + 1) as usize;
        if n > 50_000_000 {
            return Err(invalid("step", format!("lattice would need {n} cells; use a coarser step")));
        }
        let mut masses = Vec::with_capacity(n);
        // mass of t ∈ [t_a, t_b), using whichever tail keeps the difference accurate
        let center = if spec.q > 0.5 { 1.0 } else { 0.0 };
        let cell = |t_a: f64, t_b: f64| -> f64 {
            if t_b <= center {
                mixture_cdf(spec, t_b) - mixture_cdf(spec, t_a)
            } else if t_a >= center {
                mixture_sf(spec, t_a) - mixture_sf(spec, t_b)
            } else {
                1.0 - mixture_cdf(spec, t_a) - mixture_sf(spec, t_b)
            }
            .max(0.0)
        };
        for i in i_lo..=i_hi {
            let ya = (i as f64 * h).max(y_min);
            let yb = ((i + 1) as f64 * h).min(y_max);
            let ta = if i == i_lo { t_min } else { inverse_log_ratio(spec, ya) };
            let tb = if i == i_hi { t_max } else { inverse_log_ratio(spec, yb) };
            masses.push(cell(ta, tb));
        }
        let mut pld = Self {
            step: h,
            offset: i_lo,
            masses,
            spill: left_spill + right_spill,
            steps: 1,
        };
        pld.trim(params.trim_mass);
        Ok(pld)
    }

    fn trim(&mut self, threshold: f64) {
        let first = self.masses.iter().position(|&m| m >= threshold);
        let Some(first) = first else {
            self.spill += self.masses.iter().sum::<f64>();
            self.masses = vec![0.0];
            return;
        };
        let last = self.masses.iter().rposition(|&m| m >= threshold).unwrap();
        let removed: f64 = self.masses[..first].iter().chain(&self.masses[last + 1..]).sum();
        self.spill += removed;
        self.masses.truncate(last + 1);
        self.masses.drain(..first);
        self.offset += first as i64;
    }

    /// Law of the sum of independent draws from `self` and `other`.
    pub fn convolve(&self, other: &GridPld, trim_mass: f64) -> GridPld {
        assert_eq!(self.step, other.step, "lattices must share a step");
        let (a, b) = (&self.masses, &other.masses);
        let mut out = vec![0.0; a.len() + b.len() - 1];
        for (i, &ai) in a.iter().enumerate() {
            if ai == 0.0 {
                continue;
            }
            for (o, &bj) in out[i..i + b.len()].iter_mut().zip(b) {
                *o += ai * bj;
            }
        }
        let mut pld = GridPld {
            step: self.step,
            offset: self.offset + other.offset,
            masses: out,
            spill: self.spill + other.spill - self.spill * other.spill,
            steps: self.steps + other.steps,
        };
        pld.trim(trim_mass);
        pld
    }

    /// k-fold self-convolution by repeated squaring.
    pub fn power(&self, k: u64, trim_mass: f64) -> GridPld {
        let mut result = GridPld::point_mass_at_zero(self.step);
        let mut base = self.clone();
        let mut e = k;
        while e > 0 {
            if e & 1 == 1 {
                result = result.convolve(&base, trim_mass);
            }
            e >>= 1;
            if e > 0 {
                base = base.convolve(&base, trim_mass);
            }
        }
        result
    }

    pub fn total_mass(&self) -> f64 {
        self.masses.iter().sum()
    }

    /// `[lower, upper]` for `δ(ε)`: lower rounds every value down to its
    /// lattice point and drops the spill; upper shifts by the accumulated
    /// rounding slack and counts the spill as contributing 1.
    pub fn delta_bracket(&self, epsilon: f64) -> (f64, f64) {
        let h = self.step;
        let slack = self.steps as i64;
        let mut lower = 0.0;
        let mut upper = 0.0;
        for (i, &m) in self.masses.iter().enumerate() {
            let idx = self.offset + i as i64;
            let y_lo = idx as f64 * h;
            let y_hi = (idx + slack) as f64 * h;
            if y_lo > epsilon {
                lower += m * -(epsilon - y_lo).exp_m1();
            }
            if y_hi > epsilon {
                upper += m * -(epsilon - y_hi).exp_m1();
            }
        }
        (lower, (upper + self.spill).min(1.0))
    }
}

/// `z` with `1 - Φ(z) = p`, by bisection.
fn normal_upper_quantile(p: f64) -> f64 {
    let (mut lo, mut hi) = (0.0, 40.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if ndtr_upper(mid) > p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    hi
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConvolutionBracket {
    pub lower: f64,
    pub upper: f64,
    pub spill: f64,
    pub reliable: bool,
    pub step: f64,
    pub lattice_size: usize,
}

impl ConvolutionBracket {
    pub fn contains(&self, value: f64, rel_slack: f64) -> bool {
        value >= self.lower * (1.0 - rel_slack) && value <= self.upper * (1.0 + rel_slack)
    }

    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }
}

pub const MAX_CONVOLUTION_K: u64 = 1 << 14;

/// Certified bracket on `δ_Y(ε)` for `k ≤ 2¹⁴` composed steps.
pub fn convolution_delta(spec: &MechanismSpec, epsilon: f64, params: &ConvolutionParams) -> Result<ConvolutionBracket> {
    if !epsilon.is_finite() {
        return Err(invalid("epsilon", format!("must be finite, got {epsilon}")));
    }
    if spec.k > MAX_CONVOLUTION_K {
        return Err(invalid("k", format!("convolution oracle supports k <= {MAX_CONVOLUTION_K}, got {}", spec.k)));
    }
    let pld = composed_pld(spec, params)?;
    let (lower, upper) = pld.delta_bracket(epsilon);
    Ok(ConvolutionBracket {
        lower,
        upper,
        spill: pld.spill,
        reliable: pld.spill <= 1e-3 * lower.max(f64::MIN_POSITIVE),
        step: params.step,
        lattice_size: pld.masses.len(),
    })
}

/// The k-fold composed lattice law, reusable across many ε.
pub fn composed_pld(spec: &MechanismSpec, params: &ConvolutionParams) -> Result<GridPld> {
    if spec.k > MAX_CONVOLUTION_K {
        return Err(invalid("k", format!("convolution oracle supports k <= {MAX_CONVOLUTION_K}, got {}", spec.k)));
    }
    let single = GridPld::single_step(spec, params)?;
    Ok(single.power(spec.k, params.trim_mass))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn quadrature_mgf_matches_expansion() {
        let quad = QuadratureSpec::new(1e-12, 4000).unwrap();
        for (sigma, q) in [(1.0, 1.0), (0.8, 0.1), (2.0, 1e-3)] {
            let spec = MechanismSpec::subsampled_gaussian(sigma, q, 1).unwrap();
            for lambda in [1u32, 4, 9] {
                let a = quadrature_log_mgf_single(&spec, lambda as f64, &quad).unwrap();
                let b = crate::mechanism::log_mgf_single(&spec, lambda);
                assert!((a - b).abs() < 1e-9, "{sigma} {q} {lambda}: {a} {b}");
            }
        }
        // Gaussian: ln E[e^{λY}] = λ(λ+1)/(2σ²)
        let g = MechanismSpec::gaussian(1.5, 1).unwrap();
        assert_relative_eq!(quadrature_log_mgf_single(&g, 2.5, &quad).unwrap(), 2.5 * 3.5 / 4.5, max_relative = 1e-10);
    }

    #[test]
    fn gaussian_closed_form_reference() {
        // ∫ (1 - e^{-y}) φ(y - 1/2) dy over y > 0, mpmath
        assert_relative_eq!(gaussian_exact_delta(1.0, 1, 0.0).unwrap(), 0.38292492254802624, max_relative = 1e-13);
        assert_eq!(gaussian_exact_delta(1.0, 0, 0.5).unwrap(), 0.0);
        assert_relative_eq!(gaussian_exact_delta(1.0, 0, -1.0).unwrap(), 1.0 - (-1f64).exp(), max_relative = 1e-15);
    }

    #[test]
    fn gaussian_closed_form_deep_tail() {
        let mut prev = 1.0;
        let mut reached = false;
        for i in 0..60 {
            let eps = 0.5 + 0.25 * i as f64;
            let d = gaussian_exact_delta(70.0, 1200, eps).unwrap();
            assert!(d < prev, "not decreasing at eps {eps}");
            prev = d;
            reached |= d < 1e-15 && d > 0.0;
        }
        assert!(reached);
        // representable far below the double-precision CDF range of naive forms
        let ld = gaussian_exact_log_delta(70.0, 1200, 40.0).unwrap();
        assert!(ld.is_finite() && ld < (1e-300f64).ln());
    }

    #[test]
    fn quadrature_matches_closed_form() {
        let quad = QuadratureSpec::default();
        let g = MechanismSpec::gaussian(1.0, 1).unwrap();
        let v = quadrature_delta_single(&g, 0.0, &quad).unwrap();
        assert_relative_eq!(v, gaussian_exact_delta(1.0, 1, 0.0).unwrap(), max_relative = 1e-8);
        let none = MechanismSpec::subsampled_gaussian(1.0, 0.0, 1).unwrap();
        assert_eq!(quadrature_delta_single(&none, 0.3, &quad).unwrap(), 0.0);
    }

    #[test]
    fn quadrature_self_converges() {
        let quad = QuadratureSpec::default();
        let spec = MechanismSpec::subsampled_gaussian(0.6, 1e-3, 1).unwrap();
        let v1 = quadrature_delta_single(&spec, 1.5, &quad).unwrap();
        let v2 = quadrature_delta_single(&spec, 1.5, &quad.refined()).unwrap();
        assert!(v1 > 0.0);
        assert_relative_eq!(v1, v2, max_relative = 1e-8);
    }

    #[test]
    fn inverse_log_ratio_round_trips() {
        let spec = MechanismSpec::subsampled_gaussian(0.6, 1e-3, 1).unwrap();
        for y in [-5e-4, 0.0, 0.01, 1.5, 10.0] {
            assert_relative_eq!(log_ratio(&spec, inverse_log_ratio(&spec, y)), y, epsilon = 1e-12, max_relative = 1e-10);
        }
        assert_eq!(inverse_log_ratio(&spec, -0.01), f64::NEG_INFINITY);
    }

    #[test]
    fn single_step_lattice_conserves_mass() {
        for spec in [
            MechanismSpec::gaussian(1.0, 1).unwrap(),
            MechanismSpec::subsampled_gaussian(0.6, 1e-3, 1).unwrap(),
            MechanismSpec::subsampled_gaussian(2.0, 0.3, 1).unwrap(),
        ] {
            let pld = GridPld::single_step(&spec, &ConvolutionParams::with_step(1e-3)).unwrap();
            assert!((pld.total_mass() + pld.spill - 1.0).abs() < 1e-9);
            assert!(pld.masses.iter().all(|&m| m >= 0.0));
        }
    }

    #[test]
    fn gaussian_bracket_contains_closed_form() {
        let spec = MechanismSpec::gaussian(1.0, 8).unwrap();
        let b = convolution_delta(&spec, 1.0, &ConvolutionParams::with_step(1e-3)).unwrap();
        let exact = gaussian_exact_delta(1.0, 8, 1.0).unwrap();
        assert!(b.lower <= exact && exact <= b.upper, "{b:?} vs {exact}");
        assert!(b.reliable);
    }

    #[test]
    fn single_step_bracket_contains_quadrature() {
        let spec = MechanismSpec::subsampled_gaussian(0.8, 0.05, 1).unwrap();
        let quad = quadrature_delta_single(&spec, 0.5, &QuadratureSpec::default()).unwrap();
        let b = convolution_delta(&spec, 0.5, &ConvolutionParams::with_step(1e-4)).unwrap();
        assert!(b.lower <= quad && quad <= b.upper, "{b:?} vs {quad}");
    }

    #[test]
    fn refinement_never_widens() {
        let spec = MechanismSpec::subsampled_gaussian(1.0, 0.1, 6).unwrap();
        let coarse = convolution_delta(&spec, 0.2, &ConvolutionParams::with_step(4e-3)).unwrap();
        let fine = convolution_delta(&spec, 0.2, &ConvolutionParams::with_step(2e-3)).unwrap();
        assert!(fine.lower >= coarse.lower * (1.0 - 1e-12));
        assert!(fine.upper <= coarse.upper * (1.0 + 1e-12));
        assert!(fine.width() <= coarse.width());
    }

    #[test]
    fn degenerate_composition() {
        let none = MechanismSpec::subsampled_gaussian(1.0, 0.0, 50).unwrap();
        let b = convolution_delta(&none, 0.1, &ConvolutionParams::default()).unwrap();
        assert_eq!((b.lower, b.upper), (0.0, 0.0));
        let big = MechanismSpec::gaussian(1.0, MAX_CONVOLUTION_K + 1).unwrap();
        assert!(convolution_delta(&big, 0.1, &ConvolutionParams::default()).is_err());
    }
}
