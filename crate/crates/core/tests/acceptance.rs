//! Acceptance criteria. Each test prints one `[criterion N] PASS|FAIL` line
//! and then asserts the outcome.
//!
//! Run with `cargo test -p mcdp-core --test acceptance -- --nocapture
//! --test-threads=1` to see the report lines in order.

use mcdp_core::accountant::{delta_of_eps, eps_of_delta, OnlineState};
use mcdp_core::estimators::{estimate, hockey_stick, EstimatorConfig, EstimatorMethod};
use mcdp_core::evr::{build_plan, plan_sample_size, verify, NuChoice, PlanOptions};
use mcdp_core::mechanism::{log_mgf_single, r_lambda_x, sample_prv, MechanismSpec, TiltPlan};
use mcdp_core::moment_bounds::{
    default_a_grid, default_is_lambda_grid, default_lambda_grid, geometric_grid, is_moment_bound_holder,
    is_moment_bound_js, is_moment_bound_max, smc_moment_bound,
};
use mcdp_core::oracle::{
    composed_pld, convolution_delta, gaussian_exact_delta, mixture_cdf, quadrature_delta_single,
    quadrature_log_mgf_single, ConvolutionParams, QuadratureSpec,
};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use std::io::Write;
use std::time::Instant;

// written to the raw handle so the line shows up even when output is captured
fn report(n: u32, pass: bool, detail: &str) {
    let line = format!("[criterion {n}] {}: {detail}\n", if pass { "PASS" } else { "FAIL" });
    let mut out = std::io::stdout().lock();
    out.write_all(line.as_bytes()).unwrap();
    out.flush().unwrap();
}

fn rng(seed: u64) -> StdRng {
    StdRng::seed_from_u64(seed)
}

#[test]
fn criterion_1_reference_value() {
    let start = Instant::now();
    let spec = MechanismSpec::subsampled_gaussian(0.6, 1e-3, 100).unwrap();
    let reference = 7.7e-6;
    let est = estimate(&spec, 1.5, &EstimatorConfig::is(10_000_000, 7)).unwrap();
    let bracket = convolution_delta(&spec, 1.5, &ConvolutionParams::with_step(5e-4)).unwrap();
    let ci = (est.value - 1.96 * est.std_error, est.value + 1.96 * est.std_error);
    let close_to_reference = (est.value - reference).abs() / reference <= 0.05;
    let holds_ci = bracket.contains(ci.0, 0.1) && bracket.contains(ci.1, 0.1);
    let holds_reference = bracket.contains(reference, 0.1);
    let pass = close_to_reference && holds_ci && holds_reference;
    report(
        1,
        pass,
        &format!(
            "is delta = {:.4e} +- {:.2e} (reference {reference:e}, rel err {:.3}); bracket [{:.4e}, {:.4e}] holds ci: {holds_ci}, holds reference value: {holds_reference}; {:.1}s",
            est.value,
            est.std_error,
            (est.value - reference).abs() / reference,
            bracket.lower,
            bracket.upper,
            start.elapsed().as_secs_f64()
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_2_gaussian_chain() {
    let start = Instant::now();
    let quad = QuadratureSpec::new(1e-12, 4000).unwrap();
    let grid: [(f64, u64, f64); 16] = [
        (1.0, 1, 0.0),
        (1.0, 1, 1.0),
        (0.5, 1, 2.0),
        (2.0, 1, 0.5),
        (3.0, 1, 0.2),
        (1.0, 1, 3.0),
        (1.0, 1, 4.0),
        (0.6, 1, 2.5),
        (1.0, 4, 1.0),
        (2.0, 8, 1.0),
        (2.0, 4, 3.0),
        (0.7, 3, 2.0),
        (3.0, 2, 2.0),
        (1.5, 10, 2.0),
        (4.0, 32, 7.0),
        (10.0, 100, 6.5),
    ];
    let big_eps = [3.0, 3.25, 3.5, 4.0];
    let mut failures = Vec::new();
    let mut widest: f64 = 0.0;
    let mut mc_points = 0;
    let mut check = |sigma: f64, k: u64, eps: f64, bracket: mcdp_core::oracle::ConvolutionBracket| {
        let exact = gaussian_exact_delta(sigma, k, eps).unwrap();
        let reduced = MechanismSpec::gaussian(sigma / (k as f64).sqrt(), 1).unwrap();
        let quad_value = quadrature_delta_single(&reduced, eps, &quad).unwrap();
        if (quad_value - exact).abs() / exact > 1e-6 {
            failures.push(format!("quadrature ({sigma}, {k}, {eps}): {quad_value:e} vs {exact:e}"));
        }
        if !bracket.contains(exact, 1e-6) {
            failures.push(format!(
                "convolution ({sigma}, {k}, {eps}): [{:e}, {:e}] vs {exact:e}",
                bracket.lower, bracket.upper
            ));
        }
        widest = widest.max(bracket.width() / exact);
        if exact >= 1e-8 {
            mc_points += 1;
            let spec = MechanismSpec::gaussian(sigma, k).unwrap();
            for cfg in [EstimatorConfig::smc(10_000_000, 21), EstimatorConfig::is(10_000_000, 22)] {
                let est = estimate(&spec, eps, &cfg).unwrap();
                if (est.value - exact).abs() > 4.0 * est.std_error {
                    failures.push(format!(
                        "{:?} ({sigma}, {k}, {eps}): {:e} +- {:e} vs {exact:e}",
                        cfg.method, est.value, est.std_error
                    ));
                }
            }
        }
    };
    for &(sigma, k, eps) in &grid {
        let spec = MechanismSpec::gaussian(sigma, k).unwrap();
        let step = 1e-3 * sigma.recip().min(1.0);
        check(sigma, k, eps, convolution_delta(&spec, eps, &ConvolutionParams::with_step(step)).unwrap());
    }
    let fig1 = MechanismSpec::gaussian(70.0, 1200).unwrap();
    let params = ConvolutionParams::with_step(2e-4);
    let pld = composed_pld(&fig1, &params).unwrap();
    for eps in big_eps {
        let (lower, upper) = pld.delta_bracket(eps);
        let bracket = mcdp_core::oracle::ConvolutionBracket {
            lower,
            upper,
            spill: pld.spill,
            reliable: true,
            step: params.step,
            lattice_size: pld.masses.len(),
        };
        check(70.0, 1200, eps, bracket);
    }
    let pass = failures.is_empty();
    report(
        2,
        pass,
        &format!(
            "{} points, {mc_points} with monte carlo checks, widest bracket {widest:.2e} relative; {} failures {:?}; {:.1}s",
            grid.len() + big_eps.len(),
            failures.len(),
            failures,
            start.elapsed().as_secs_f64()
        ),
    );
    assert!(pass);
}

/// Second moment of per-sample contributions and its standard error.
fn empirical_second_moment(spec: &MechanismSpec, eps: f64, theta: Option<f64>, m: u64, seed: u64) -> (f64, f64) {
    let tilt = theta.map(|t| TiltPlan::new(spec, t).unwrap());
    let batch = sample_prv(spec, m, seed, tilt.as_ref()).unwrap();
    let sq: Vec<f64> = batch
        .values
        .iter()
        .zip(&batch.weights)
        .map(|(&y, &w)| {
            let c = hockey_stick(eps, y) * w;
            c * c
        })
        .collect();
    let n = sq.len() as f64;
    let mean = sq.iter().sum::<f64>() / n;
    let var = sq.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

#[test]
fn criterion_3_bound_dominance() {
    let start = Instant::now();
    let spec = MechanismSpec::subsampled_gaussian(0.6, 1e-3, 100).unwrap();
    let eps = 1.5;
    let m = 1_000_000;
    let quad = QuadratureSpec::new(1e-8, 4000).unwrap();
    let mut violations = Vec::new();
    let mut checks = 0;

    let (emp, se) = empirical_second_moment(&spec, eps, None, m, 31);
    let smc = smc_moment_bound(&spec, eps, 2.0, &default_lambda_grid()).unwrap();
    checks += 1;
    if smc.nu < emp - 4.0 * se {
        violations.push(format!("smc: {:e} < {emp:e}", smc.nu));
    }
    let nu_mc = smc.nu;

    let thetas = geometric_grid(0.5, 20.0, 20);
    for (i, &theta) in thetas.iter().enumerate() {
        let (emp, se) = empirical_second_moment(&spec, eps, Some(theta), m, 100 + i as u64);
        let floor = emp - 4.0 * se;
        let mut bounds = Vec::new();
        if theta >= 1.0 / (spec.sigma * spec.sigma) {
            bounds.push(("js", is_moment_bound_js(&spec, eps, theta, nu_mc).unwrap().nu));
        }
        let max = default_is_lambda_grid()
            .into_iter()
            .map(|l| is_moment_bound_max(&spec, eps, theta, l, &quad).unwrap().nu)
            .fold(f64::INFINITY, f64::min);
        bounds.push(("max", max));
        let holder = is_moment_bound_holder(&spec, eps, theta, &default_a_grid(), &default_is_lambda_grid(), &quad).unwrap();
        bounds.push(("holder", holder.nu));
        for (name, nu) in bounds {
            checks += 1;
            if nu < floor {
                violations.push(format!("{name} at theta {theta:.3}: {nu:e} < {emp:e} - 4*{se:e}"));
            }
        }
    }
    let pass = violations.is_empty();
    report(
        3,
        pass,
        &format!(
            "{} theta points plus theta = 0, {checks} bound checks, {} violations {:?}; {:.1}s",
            thetas.len(),
            violations.len(),
            violations,
            start.elapsed().as_secs_f64()
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_4_sample_size_planner() {
    let start = Instant::now();
    let m = plan_sample_size(1e-10, 1e-6, 0.9, 1e-6).unwrap();
    let exact_value = m == 2742;
    let mut runner = rng(4);
    let mut identity_failures = 0;
    for _ in 0..1000 {
        let nu = 10f64.powf(runner.random_range(-14.0..-1.0));
        let tau = runner.random_range(0.05..1.0);
        let delta_est = tau * 10f64.powf(runner.random_range(-12.0..-0.01));
        let offset = delta_est * runner.random_range(1e-3..1.0) / tau;
        match plan_sample_size(nu, offset, tau, delta_est) {
            Ok(m) => {
                if (-(m as f64) * offset * offset / (2.0 * nu)).exp() > delta_est / tau {
                    identity_failures += 1;
                }
            }
            Err(mcdp_core::Error::Infeasible(_)) => {}
            Err(e) => panic!("{e}"),
        }
    }
    let pass = exact_value && identity_failures == 0;
    report(
        4,
        pass,
        &format!(
            "plan_sample_size(1e-10, 1e-6, 0.9, 1e-6) = {m} (expected 2742); bennett identity failures {identity_failures}/1000; {:.2}s",
            start.elapsed().as_secs_f64()
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_5_evr_desk_scale() {
    let start = Instant::now();
    let spec = MechanismSpec::gaussian(2.0, 4).unwrap();
    let eps = 1.0;
    let truth = gaussian_exact_delta(2.0, 4, eps).unwrap();
    let nu = estimate(&spec, eps, &EstimatorConfig::smc(1_000_000, 5)).unwrap().second_moment;
    let trials = 200;
    let run = |delta_est: f64| -> (u32, u64) {
        let mut accepted = 0;
        let mut m = 0;
        for t in 0..trials {
            let mut opts = PlanOptions::new(0.9, EstimatorMethod::Smc, 10_000 + t as u64);
            opts.nu = NuChoice::Supplied { nu };
            let plan = build_plan(&spec, eps, delta_est, &opts).unwrap();
            m = plan.m;
            if verify(&spec, &plan).unwrap().accepted {
                accepted += 1;
            }
        }
        (accepted, m)
    };
    let (acc_true, m_true) = run(truth);
    let (acc_low, m_low) = run(0.3 * 0.9 * truth);
    let reject_rate = 1.0 - acc_true as f64 / trials as f64;
    let pass = reject_rate <= 0.05 && 10 * acc_low <= acc_true && acc_true > 0;
    report(
        5,
        pass,
        &format!(
            "delta = {truth:.6e}, empirical nu = {nu:.4e}; accurate estimate: {acc_true}/{trials} accepted at m = {m_true}; violating estimate: {acc_low}/{trials} accepted at m = {m_low}; {:.1}s",
            start.elapsed().as_secs_f64()
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_6_online_offline() {
    let start = Instant::now();
    let spec = MechanismSpec::subsampled_gaussian(1.0, 0.05, 1).unwrap();
    let eps = 0.5;
    let k_max = 1000;

    let cfg = EstimatorConfig::smc(1000, 61).with_chunk_size(256);
    let mut online = OnlineState::new(&cfg).unwrap();
    let mut mismatches = 0;
    for k in 1..=k_max {
        online.step(&spec).unwrap();
        let on = online.delta(eps).unwrap();
        let off = delta_of_eps(&spec.with_k(k), eps, &cfg).unwrap();
        if on.value.to_bits() != off.value.to_bits() || on.second_moment.to_bits() != off.second_moment.to_bits() {
            mismatches += 1;
        }
    }
    let equality_time = start.elapsed().as_secs_f64();

    let cfg = EstimatorConfig::smc(20_000, 62);
    let t0 = Instant::now();
    let mut online = OnlineState::new(&cfg).unwrap();
    for _ in 0..k_max {
        online.step(&spec).unwrap();
        std::hint::black_box(online.delta(eps).unwrap());
    }
    let online_time = t0.elapsed().as_secs_f64();
    let t0 = Instant::now();
    let off = delta_of_eps(&spec.with_k(k_max), eps, &cfg).unwrap();
    let offline_time = t0.elapsed().as_secs_f64();
    let same = online.delta(eps).unwrap().value.to_bits() == off.value.to_bits();

    let ratio = online_time / offline_time;
    let pass = mismatches == 0 && same && ratio <= 5.0;
    report(
        6,
        pass,
        &format!(
            "{mismatches}/{k_max} step mismatches at m = 1000 ({equality_time:.1}s); at m = 20000 online total {online_time:.2}s vs offline k = {k_max} {offline_time:.2}s (ratio {ratio:.2}), final values equal: {same}"
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_7_inversion_round_trip() {
    let start = Instant::now();
    let mut runner = rng(7);
    let mut worst: f64 = 0.0;
    let mut failures = Vec::new();
    for case in 0..50u64 {
        let sigma = runner.random_range(0.5..3.0);
        let k = runner.random_range(1..=20u64);
        // tilting targets small sampling rates and small delta
        let (q, delta, cfg) = if case % 3 == 0 {
            let q = 10f64.powf(runner.random_range(-3.0..-1.0));
            let delta = 10f64.powf(runner.random_range(-5.0..-3.0));
            (q, delta, EstimatorConfig::is(50_000, 700 + case))
        } else {
            let q = if runner.random_bool(0.3) {
                1.0
            } else {
                10f64.powf(runner.random_range(-2.0..0.0))
            };
            let delta = 10f64.powf(runner.random_range(-2.3..-0.7));
            (q, delta, EstimatorConfig::smc(50_000, 700 + case))
        };
        let spec = MechanismSpec::subsampled_gaussian(sigma, q, k).unwrap();
        let e = match eps_of_delta(&spec, delta, &cfg) {
            Ok(e) => e,
            Err(err) => {
                failures.push(format!("case {case}: {err}"));
                continue;
            }
        };
        let cfg = match e.achieved.theta {
            Some(theta) => cfg.with_theta(theta),
            None => cfg,
        };
        let back = delta_of_eps(&spec, e.epsilon, &cfg).unwrap();
        let rel = (back.value - delta).abs() / delta;
        worst = worst.max(rel);
        if rel > 1e-6 || e.contributing < 100 {
            failures.push(format!("case {case}: rel {rel:e}, contributing {}", e.contributing));
        }
    }
    let pass = failures.is_empty();
    report(
        7,
        pass,
        &format!(
            "50 cases, worst relative residual {worst:.2e}, {} failures {:?}; {:.1}s",
            failures.len(),
            failures,
            start.elapsed().as_secs_f64()
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_8_mgf_identity() {
    let start = Instant::now();
    let quad = QuadratureSpec::new(1e-12, 4000).unwrap();
    let pairs = [
        (0.5, 1e-3),
        (0.6, 1e-3),
        (0.8, 0.01),
        (1.0, 0.05),
        (1.0, 1.0),
        (1.5, 0.1),
        (2.0, 0.5),
        (3.0, 0.9),
        (5.0, 1e-4),
        (0.7, 0.3),
    ];
    let mut worst_mgf: f64 = 0.0;
    let mut worst_cdf: f64 = 0.0;
    for (sigma, q) in pairs {
        let spec = MechanismSpec::subsampled_gaussian(sigma, q, 1).unwrap();
        for lambda in 1..=16u32 {
            let a = log_mgf_single(&spec, lambda);
            let b = quadrature_log_mgf_single(&spec, lambda as f64, &quad).unwrap();
            worst_mgf = worst_mgf.max((a - b).exp_m1().abs());
        }
        for i in 0..=80 {
            let x = -10.0 * sigma + (20.0 * sigma + 1.0) * i as f64 / 80.0;
            let r0 = r_lambda_x(&spec, 0, x).value();
            let cdf = mixture_cdf(&spec, x);
            worst_cdf = worst_cdf.max((r0 - cdf).abs() / cdf);
        }
    }
    let pass = worst_mgf <= 1e-6 && worst_cdf <= 1e-10;
    report(
        8,
        pass,
        &format!(
            "10 (sigma, q) pairs, lambda 1..=16: worst mgf relative gap {worst_mgf:.2e}; r(0, x) vs mixture cdf worst {worst_cdf:.2e}; {:.2}s",
            start.elapsed().as_secs_f64()
        ),
    );
    assert!(pass);
}
