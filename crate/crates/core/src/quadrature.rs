//! Globally adaptive composite Gauss–Legendre quadrature.
//!
//! Each interval carries a 20-point rule on the whole interval and on its two
//! halves; the difference is the local error estimate. The interval with the
//! largest estimate is bisected until the summed estimate meets the relative
//! target.

use crate::error::{invalid, Error, Result};
use serde::{Deserialize, Serialize};
use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::sync::OnceLock;

const ORDER: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadratureSpec {
    pub rel_tol: f64,
    pub max_subdivisions: usize,
}

impl Default for QuadratureSpec {
    fn default() -> Self {
        Self {
            rel_tol: 1e-10,
            max_subdivisions: 4000,
        }
    }
}

impl QuadratureSpec {
    pub fn new(rel_tol: f64, max_subdivisions: usize) -> Result<Self> {
        if !(rel_tol > 0.0 && rel_tol <= 1e-2) {
            return Err(invalid("rel_tol", format!("must lie in (0, 1e-2], got {rel_tol}")));
        }
        if max_subdivisions == 0 {
            return Err(invalid("max_subdivisions", "must be positive"));
        }
        Ok(Self {
            rel_tol,
            max_subdivisions,
        })
    }

    /// Tighter tolerance and a larger subdivision budget,
    /// used for self-convergence checks.
    pub fn refined(&self) -> Self {
        Self {
            rel_tol: (self.rel_tol * 1e-2).max(1e-15),
            max_subdivisions: self.max_subdivisions * 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadratureResult {
    pub value: f64,
    pub error: f64,
    pub subdivisions: usize,
}

fn gauss_legendre_rule() -> &'static ([f64; ORDER], [f64; ORDER]) {
    static RULE: OnceLock<([f64; ORDER], [f64; ORDER])> = OnceLock::new();
    RULE.get_or_init(|| {
        let mut nodes = [0.0; ORDER];
        let mut weights = [0.0; ORDER];
        let n = ORDER as f64;
        for i in 0..ORDER.div_ceil(2) {
            // Newton iteration on P_n from the Chebyshev-like initial guess
            let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n + 0.5)).cos();
            let mut dp = 0.0;
            for _ in 0..100 {
                let (mut p0, mut p1) = (1.0, x);
                for j in 2..=ORDER {
                    let jf = j as f64;
                    let p2 = ((2.0 * jf - 1.0) * x * p1 - (jf - 1.0) * p0) / jf;
                    p0 = p1;
                    p1 = p2;
                }
                dp = n * (x * p1 - p0) / (x * x - 1.0);
                let dx = p1 / dp;
                x -= dx;
                if dx.abs() < 1e-16 {
                    break;
                }
            }
            let w = 2.0 / ((1.0 - x * x) * dp * dp);
            nodes[i] = -x;
            nodes[ORDER - 1 - i] = x;
            weights[i] = w;
            weights[ORDER - 1 - i] = w;
        }
        (nodes, weights)
    })
}

fn rule<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> f64 {
    let (nodes, weights) = gauss_legendre_rule();
    let half = 0.5 * (b - a);
    let mid = 0.5 * (a + b);
    let mut acc = 0.0;
    for (x, w) in nodes.iter().zip(weights.iter()) {
        acc += w * f(mid + half * x);
    }
    acc * half
}

struct Segment {
    a: f64,
    b: f64,
    left: f64,
    right: f64,
    error: f64,
}

impl Segment {
    fn new<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, whole: f64) -> Self {
        let m = 0.5 * (a + b);
        let left = rule(f, a, m);
        let right = rule(f, m, b);
        let error = (whole - (left + right)).abs();
        Self {
            a,
            b,
            left,
            right,
            error,
        }
    }

    fn value(&self) -> f64 {
        self.left + self.right
    }
}

impl PartialEq for Segment {
    fn eq(&self, other: &Self) -> bool {
        self.error == other.error
    }
}
impl Eq for Segment {}
impl PartialOrd for Segment {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Segment {
    fn cmp(&self, other: &Self) -> Ordering {
        self.error.total_cmp(&other.error)
    }
}

/// Integrates `f` over `[a, b]` to the relative tolerance of `spec`
/// (with an absolute floor of `abs_tol`).
pub fn integrate<F: Fn(f64) -> f64>(
    f: F,
    a: f64,
    b: f64,
    spec: &QuadratureSpec,
    abs_tol: f64,
) -> Result<QuadratureResult> {
    if !(a.is_finite() && b.is_finite()) {
        return Err(invalid("interval", format!("bounds must be finite, got [{a}, {b}]")));
    }
    if a == b {
        return Ok(QuadratureResult {
            value: 0.0,
            error: 0.0,
            subdivisions: 0,
        });
    }
    if a > b {
        let r = integrate(f, b, a, spec, abs_tol)?;
        return Ok(QuadratureResult {
            value: -r.value,
            ..r
        });
    }

    let whole = rule(&f, a, b);
    let mut heap = BinaryHeap::new();
    heap.push(Segment::new(&f, a, b, whole));
    let mut subdivisions = 0;
    loop {
        let (total, err) = heap
            .iter()
            .fold((0.0, 0.0), |(v, e), s| (v + s.value(), e + s.error));
        if err <= (spec.rel_tol * total.abs()).max(abs_tol) {
            return Ok(QuadratureResult {
                value: total,
                error: err,
                subdivisions,
            });
        }
        if subdivisions >= spec.max_subdivisions {
            return Err(Error::QuadratureNonConvergence {
                subdivisions,
                estimate: total,
                achieved_error: err,
            });
        }
        let worst = heap.pop().expect("heap is never empty");
        let m = 0.5 * (worst.a + worst.b);
        if m <= worst.a || m >= worst.b {
            // interval exhausted at machine resolution; accept as is
            let mut frozen = worst;
            frozen.error = 0.0;
            heap.push(frozen);
            subdivisions += 1;
            continue;
        }
        heap.push(Segment::new(&f, worst.a, m, worst.left));
        heap.push(Segment::new(&f, m, worst.b, worst.right));
        subdivisions += 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn rule_weights_sum_to_two_and_integrate_polynomials_exactly() {
        let (nodes, weights) = gauss_legendre_rule();
        assert_relative_eq!(weights.iter().sum::<f64>(), 2.0, max_relative = 1e-14);
        // degree 2n-1 = 39 is exact
        let p39: f64 = nodes.iter().zip(weights).map(|(x, w)| w * x.powi(38)).sum();
        assert_relative_eq!(p39, 2.0 / 39.0, max_relative = 1e-12);
    }

    #[test]
    fn integrates_gaussian_density() {
        let spec = QuadratureSpec::default();
        let r = integrate(
            |x: f64| (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt(),
            -40.0,
            40.0,
            &spec,
            0.0,
        )
        .unwrap();
        assert_relative_eq!(r.value, 1.0, max_relative = 1e-12);
    }

    #[test]
    fn reversed_bounds_flip_sign() {
        let spec = QuadratureSpec::default();
        let r = integrate(|x: f64| x.exp(), 1.0, 0.0, &spec, 0.0).unwrap();
        assert_relative_eq!(r.value, -(1f64.exp() - 1.0), max_relative = 1e-13);
    }

    #[test]
    fn reports_non_convergence() {
        let spec = QuadratureSpec::new(1e-12, 3).unwrap();
        let err = integrate(|x: f64| (1.0 / x).sin(), 1e-6, 1.0, &spec, 0.0).unwrap_err();
        assert!(matches!(err, Error::QuadratureNonConvergence { .. }));
    }

    #[test]
    fn spec_rejects_out_of_range_tolerance() {
        assert!(QuadratureSpec::new(0.0, 10).is_err());
        assert!(QuadratureSpec::new(0.5, 10).is_err());
        assert!(QuadratureSpec::new(1e-3, 0).is_err());
    }
}
