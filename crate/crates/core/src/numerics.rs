//! Log-space helpers, the log normal CDF, and compensated summation.

use libm::erfc;
use std::f64::consts::{FRAC_1_SQRT_2, LN_2, PI};

/// `ln(e^a + e^b)` without overflow.
#[inline]
pub fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// `ln(Σ e^{x_i})` over a slice; `-inf` for an empty slice.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let mut acc = LogSumExp::new();
    for &x in xs {
        acc.push(x);
    }
    acc.value()
}

/// Streaming log-sum-exp with a running maximum.
#[derive(Debug, Clone, Copy)]
pub struct LogSumExp {
    max: f64,
    scaled: f64,
}

impl Default for LogSumExp {
    fn default() -> Self {
        Self::new()
    }
}

impl LogSumExp {
    pub fn new() -> Self {
        Self {
            max: f64::NEG_INFINITY,
            scaled: 0.0,
        }
    }

    #[inline]
    pub fn push(&mut self, x: f64) {
        if x == f64::NEG_INFINITY {
            return;
        }
        if x <= self.max {
            self.scaled += (x - self.max).exp();
        } else {
            self.scaled = self.scaled * (self.max - x).exp() + 1.0;
            self.max = x;
        }
    }

    #[inline]
    pub fn value(&self) -> f64 {
        if self.max == f64::NEG_INFINITY {
            f64::NEG_INFINITY
        } else {
            self.max + self.scaled.ln()
        }
    }
}

/// Standard normal CDF.
#[inline]
pub fn ndtr(x: f64) -> f64 {
    0.5 * erfc(-x * FRAC_1_SQRT_2)
}

/// Standard normal survival function `1 - Φ(x)`.
#[inline]
pub fn ndtr_upper(x: f64) -> f64 {
    0.5 * erfc(x * FRAC_1_SQRT_2)
}

const LOG_NDTR_ASYMPTOTIC_BELOW: f64 = -20.0;

/// `ln Φ(x)`, accurate from the far left tail (where Φ underflows) to the
/// right tail (where `ln Φ` is a tiny negative number).
pub fn log_ndtr(x: f64) -> f64 {
    if x.is_nan() {
        return f64::NAN;
    }
    if x > 0.0 {
        return (-ndtr_upper(x)).ln_1p();
    }
    if x > LOG_NDTR_ASYMPTOTIC_BELOW {
        return erfc(-x * FRAC_1_SQRT_2).ln() - LN_2;
    }
    if x == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    // Mills-ratio series: Φ(x) = φ(x)/|x| · Σ (-1)^n (2n-1)!! / x^{2n}
    let x2 = x * x;
    let mut term = 1.0;
    let mut series = 1.0;
    for n in 1..12 {
        term *= -((2 * n - 1) as f64) / x2;
        series += term;
    }
    -0.5 * x2 - (-x).ln() - 0.5 * (2.0 * PI).ln() + series.ln()
}

/// Neumaier-compensated running sum. Merging two sums is associative up to
/// the compensation error, which keeps reductions independent of chunking.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct NeumaierSum {
    sum: f64,
    comp: f64,
}

impl NeumaierSum {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn merge(&mut self, other: &NeumaierSum) {
        self.add(other.sum);
        self.add(other.comp);
    }

    #[inline]
    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn log_add_exp_handles_infinities_and_large_values() {
        assert_eq!(log_add_exp(f64::NEG_INFINITY, 3.0), 3.0);
        assert_eq!(log_add_exp(2.0, f64::NEG_INFINITY), 2.0);
        assert_relative_eq!(log_add_exp(1000.0, 1000.0), 1000.0 + LN_2);
        assert_relative_eq!(log_add_exp(0.0, 0.0), LN_2);
    }

    #[test]
    fn streaming_log_sum_exp_matches_direct() {
        let xs: [f64; 6] = [0.3, -2.0, 5.5, 1.25, 5.5, -700.0];
        let direct: f64 = xs.iter().map(|x| x.exp()).sum::<f64>().ln();
        assert_relative_eq!(log_sum_exp(&xs), direct, max_relative = 1e-14);
        assert_eq!(log_sum_exp(&[]), f64::NEG_INFINITY);
        // k equal zeros give exactly ln k
        assert_eq!(log_sum_exp(&[0.0; 7]), (7.0f64).ln());
    }

    #[test]
    fn log_ndtr_reference_values() {
        // values from mpmath: log(ncdf(x))
        assert_relative_eq!(log_ndtr(0.0), -LN_2, max_relative = 1e-15);
        assert_relative_eq!(log_ndtr(-5.0), -15.064998393988725, max_relative = 1e-13);
        assert_relative_eq!(log_ndtr(-40.0), -804.60844201375379, max_relative = 1e-13);
        assert_relative_eq!(log_ndtr(6.0), -9.8658764552437573e-10, max_relative = 1e-10);
        assert_relative_eq!(log_ndtr(-20.0), -203.91715537109726, max_relative = 1e-13);
        assert_relative_eq!(log_ndtr(-25.0), -316.63940800802026, max_relative = 1e-13);
    }

    #[test]
    fn log_ndtr_is_continuous_at_branch_points() {
        for &x in &[LOG_NDTR_ASYMPTOTIC_BELOW, 0.0] {
            let a = log_ndtr(x - 1e-9);
            let b = log_ndtr(x + 1e-9);
            assert!((a - b).abs() < 1e-7 * a.abs().max(1.0), "jump at {x}: {a} vs {b}");
        }
    }

    #[test]
    fn neumaier_recovers_cancelled_terms() {
        let mut s = NeumaierSum::new();
        for x in [1.0, 1e100, 1.0, -1e100] {
            s.add(x);
        }
        assert_eq!(s.value(), 2.0);
    }
}
