use crate::args::*;
use crate::manifest::{float, to_value, RunManifest};
use crate::params;
use mcdp_core::accountant::{delta_of_eps, eps_of_delta, relative_error, OnlineState};
use mcdp_core::estimators::{EstimatorConfig, EstimatorMethod};
use mcdp_core::evr::{build_plan, verify, NuChoice, PlanOptions};
use mcdp_core::mechanism::MechanismSpec;
use mcdp_core::moment_bounds::{
    default_a_grid, default_is_lambda_grid, default_lambda_grid, geometric_grid, is_moment_bound_holder,
    is_moment_bound_js, is_moment_bound_max, smc_moment_bound, BoundMethod, MomentBoundResult,
};
use mcdp_core::oracle::{
    convolution_delta, gaussian_exact_delta, quadrature_delta_single_detailed, ConvolutionParams, QuadratureSpec,
    MAX_CONVOLUTION_K,
};
use mcdp_core::Error;
use serde_json::{json, Map, Value};
use std::io::Write;
use std::time::Instant;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_RESOLUTION: i32 = 3;
pub const EXIT_REJECT: i32 = 4;

#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::BelowResolution { .. } => EXIT_RESOLUTION,
            _ => EXIT_USAGE,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: EXIT_USAGE,
        message: message.into(),
    }
}

/// A finished command: the manifest, optional CSV rows, and the exit code.
pub struct Output {
    pub manifest: RunManifest,
    pub csv: Option<(Vec<&'static str>, Vec<Vec<String>>)>,
    pub code: i32,
}

struct Run {
    start: Instant,
    parameters: Map<String, Value>,
    seed: Option<u64>,
}

impl Run {
    fn new(parameters: Map<String, Value>, seed: Option<u64>) -> Self {
        Self {
            start: Instant::now(),
            parameters,
            seed,
        }
    }

    fn finish(self, result: Value, code: i32) -> Output {
        Output {
            manifest: RunManifest {
                command_line: crate::manifest::command_line(),
                parameters: self.parameters,
                seed: self.seed,
                version: env!("CARGO_PKG_VERSION"),
                wall_time_s: format!("{:.3}", self.start.elapsed().as_secs_f64()),
                result,
            },
            csv: None,
            code,
        }
    }
}

fn mechanism(args: &MechanismArgs, k: u64) -> Result<MechanismSpec, Failure> {
    match args.mechanism {
        MechanismArg::Gaussian => {
            if args.q.is_some_and(|q| q != 1.0) {
                return Err(usage("--q applies only to --mechanism subsampled-gaussian"));
            }
            Ok(MechanismSpec::gaussian(args.sigma, k)?)
        }
        MechanismArg::SubsampledGaussian => {
            let q = args.q.ok_or_else(|| usage("--mechanism subsampled-gaussian needs --q"))?;
            Ok(MechanismSpec::subsampled_gaussian(args.sigma, q, k)?)
        }
    }
}

fn method(e: EstimatorArg) -> EstimatorMethod {
    match e {
        EstimatorArg::Smc => EstimatorMethod::Smc,
        EstimatorArg::Is => EstimatorMethod::Is,
    }
}

fn estimator_config(s: &SamplingArgs, theta: Option<f64>) -> Result<EstimatorConfig, Failure> {
    let mut cfg = match s.estimator {
        EstimatorArg::Smc => EstimatorConfig::smc(s.samples, s.seed),
        EstimatorArg::Is => EstimatorConfig::is(s.samples, s.seed),
    }
    .with_chunk_size(s.chunk_size);
    if let Some(t) = theta {
        cfg = cfg.with_theta(t);
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Oracle value for `δ(ε)` and how it was obtained, when one applies.
fn oracle_delta(spec: &MechanismSpec, epsilon: f64) -> Result<Option<Value>, Failure> {
    if spec.q == 1.0 {
        let v = gaussian_exact_delta(spec.sigma, spec.k, epsilon)?;
        return Ok(Some(json!({"kind": "gaussian_exact", "value": float(v)})));
    }
    if spec.k > MAX_CONVOLUTION_K {
        return Ok(None);
    }
    let b = convolution_delta(spec, epsilon, &ConvolutionParams::with_step(5e-4))?;
    let mid = 0.5 * (b.lower + b.upper);
    Ok(Some(json!({
        "kind": "convolution",
        "value": float(mid),
        "lower": float(b.lower),
        "upper": float(b.upper),
        "step": float(b.step),
    })))
}

fn oracle_value(v: &Value) -> f64 {
    v["value"].as_str().and_then(|s| s.parse().ok()).unwrap_or(f64::NAN)
}

pub fn account_offline(a: &OfflineArgs) -> Result<Output, Failure> {
    let spec = mechanism(&a.mechanism, a.k)?;
    let cfg = estimator_config(&a.sampling, a.theta)?;
    let run = Run::new(
        params! {
            "mode" => "offline",
            "mechanism" => spec,
            "eps" => a.target.eps,
            "delta" => a.target.delta,
            "estimator" => cfg,
            "oracle" => format!("{:?}", a.oracle).to_lowercase(),
        },
        Some(cfg.seed),
    );
    let oracle_on = a.oracle == OracleMode::Auto;
    let csv_header = vec!["direction", "epsilon", "delta", "std_error", "m", "method", "theta", "oracle_delta", "r_err"];
    let (result, row) = if let Some(eps) = a.target.eps {
        let est = delta_of_eps(&spec, eps, &cfg)?;
        let mut result = json!({
            "direction": "delta_of_eps",
            "estimate": to_value(&est),
        });
        let mut oracle_v = f64::NAN;
        let mut r_err = None;
        if oracle_on {
            if let Some(o) = oracle_delta(&spec, eps)? {
                oracle_v = oracle_value(&o);
                r_err = relative_error(est.value, oracle_v).ok();
                result["oracle"] = o;
            }
            result["r_err"] = r_err.map_or(Value::Null, float);
        }
        let row = vec![
            "delta_of_eps".into(),
            cell(eps),
            cell(est.value),
            cell(est.std_error),
            est.m.to_string(),
            method_name(est.method).into(),
            est.theta.map_or(String::new(), cell),
            if oracle_v.is_nan() { String::new() } else { cell(oracle_v) },
            r_err.map_or(String::new(), cell),
        ];
        (result, row)
    } else {
        let delta = a.target.delta.expect("clap enforces one target");
        let e = eps_of_delta(&spec, delta, &cfg)?;
        let mut result = json!({
            "direction": "eps_of_delta",
            "estimate": to_value(&e),
        });
        let mut oracle_v = f64::NAN;
        let mut r_err = None;
        if oracle_on {
            // relative error in delta at the reported epsilon
            if let Some(o) = oracle_delta(&spec, e.epsilon)? {
                oracle_v = oracle_value(&o);
                r_err = relative_error(delta, oracle_v).ok();
                result["oracle"] = o;
            }
            result["r_err"] = r_err.map_or(Value::Null, float);
        }
        let row = vec![
            "eps_of_delta".into(),
            cell(e.epsilon),
            cell(e.achieved.value),
            cell(e.achieved.std_error),
            e.achieved.m.to_string(),
            method_name(e.achieved.method).into(),
            e.achieved.theta.map_or(String::new(), cell),
            if oracle_v.is_nan() { String::new() } else { cell(oracle_v) },
            r_err.map_or(String::new(), cell),
        ];
        (result, row)
    };
    let mut out = run.finish(result, EXIT_OK);
    out.csv = Some((csv_header, vec![row]));
    Ok(out)
}

fn method_name(m: EstimatorMethod) -> &'static str {
    match m {
        EstimatorMethod::Smc => "smc",
        EstimatorMethod::Is => "is",
    }
}

fn cell(x: f64) -> String {
    format!("{x:.16e}")
}

pub const ONLINE_CSV_HEADER: [&str; 6] = ["step", "epsilon", "delta", "std_error", "m", "error"];

/// Streams one row per step to `sink` and returns the final manifest.
pub fn account_online(a: &OnlineArgs, format: Format, sink: &mut dyn Write) -> Result<Output, Failure> {
    let spec = mechanism(&a.mechanism, 1)?;
    let cfg = estimator_config(&a.sampling, None)?;
    let run = Run::new(
        params! {
            "mode" => "online",
            "mechanism" => spec,
            "k_max" => a.k_max,
            "eps" => a.target.eps,
            "delta" => a.target.delta,
            "estimator" => cfg,
        },
        Some(cfg.seed),
    );
    let mut state = OnlineState::new(&cfg)?;
    let csv_mode = format == Format::Csv;
    if csv_mode {
        sink.write_all(&csv_line(&ONLINE_CSV_HEADER)?).map_err(io_failure)?;
    }
    let mut last = Value::Null;
    let mut last_failed = false;
    for step in 1..=a.k_max {
        state.step(&spec)?;
        let (row, record) = match (a.target.eps, a.target.delta) {
            (Some(eps), _) => {
                let d = state.delta(eps)?;
                (
                    json!({"step": step, "epsilon": float(eps), "delta": float(d.value), "std_error": float(d.std_error), "m": d.m}),
                    [step.to_string(), cell(eps), cell(d.value), cell(d.std_error), d.m.to_string(), String::new()],
                )
            }
            (None, Some(delta)) => match state.epsilon(delta) {
                Ok(e) => (
                    json!({"step": step, "epsilon": float(e.epsilon), "delta": float(e.achieved.value), "std_error": float(e.achieved.std_error), "m": e.achieved.m}),
                    [
                        step.to_string(),
                        cell(e.epsilon),
                        cell(e.achieved.value),
                        cell(e.achieved.std_error),
                        e.achieved.m.to_string(),
                        String::new(),
                    ],
                ),
                Err(err @ Error::BelowResolution { .. }) => (
                    json!({"step": step, "delta": float(delta), "error": err.to_string()}),
                    [step.to_string(), String::new(), cell(delta), String::new(), cfg.m.to_string(), err.to_string()],
                ),
                Err(err) => return Err(err.into()),
            },
            (None, None) => unreachable!("clap enforces one target"),
        };
        last_failed = row.get("error").is_some();
        if csv_mode {
            sink.write_all(&csv_line(&record)?).map_err(io_failure)?;
        } else {
            writeln!(sink, "{row}").map_err(io_failure)?;
        }
        sink.flush().map_err(io_failure)?;
        last = row;
    }
    let code = if last_failed { EXIT_RESOLUTION } else { EXIT_OK };
    Ok(run.finish(json!({"steps": a.k_max, "final": last}), code))
}

fn csv_line<S: AsRef<[u8]>>(record: &[S]) -> Result<Vec<u8>, Failure> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(record).map_err(io_failure)?;
    w.into_inner().map_err(io_failure)
}

fn io_failure(e: impl std::fmt::Display) -> Failure {
    Failure {
        code: 1,
        message: format!("output error: {e}"),
    }
}

fn bound_method(b: BoundArg) -> BoundMethod {
    match b {
        BoundArg::Smc => BoundMethod::SmcRdp,
        BoundArg::IsJs => BoundMethod::IsJs,
        BoundArg::IsMax => BoundMethod::IsMax,
        BoundArg::IsHolder => BoundMethod::IsHolder,
    }
}

pub fn verify_cmd(a: &VerifyArgs) -> Result<Output, Failure> {
    let spec = mechanism(&a.mechanism, a.k)?;
    let est = method(a.estimator);
    let mut opts = PlanOptions::new(a.tau, est, a.seed);
    opts.rho = a.rho;
    opts.delta_offset = a.offset;
    opts.theta_override = a.theta;
    opts.nu = if a.nu == "analytic" {
        match a.bound {
            Some(b) => NuChoice::Analytic { method: bound_method(b) },
            None => NuChoice::default_for(est),
        }
    } else {
        let nu: f64 = a
            .nu
            .parse()
            .map_err(|_| usage(format!("--nu must be `analytic` or a number, got `{}`", a.nu)))?;
        NuChoice::Supplied { nu }
    };
    let run = Run::new(
        params! {
            "mechanism" => spec,
            "eps" => a.eps,
            "delta_est" => a.delta_est,
            "options" => opts,
        },
        Some(a.seed),
    );
    let plan = build_plan(&spec, a.eps, a.delta_est, &opts)?;
    let v = verify(&spec, &plan)?;
    let result = json!({
        "accepted": v.accepted,
        "delta_hat": float(v.delta_hat),
        "threshold": float(v.threshold),
        "m": plan.m,
        "nu": float(plan.nu),
        "fp_bound": float(v.fp_bound),
        "heuristic_nu": v.heuristic_nu,
        "plan": to_value(&plan),
        "estimate": to_value(&v.estimate),
    });
    Ok(run.finish(result, if v.accepted { EXIT_OK } else { EXIT_REJECT }))
}

pub fn bound_cmd(a: &SecondMomentArgs) -> Result<Output, Failure> {
    let spec = mechanism(&a.mechanism, a.k)?;
    let quad = QuadratureSpec::new(1e-8, 4000)?;
    let method = bound_method(a.method);
    let run = Run::new(
        params! {
            "method" => method,
            "mechanism" => spec,
            "eps" => a.eps,
            "u" => a.u,
            "theta" => a.theta,
            "theta_grid" => a.theta_grid,
            "lambda_grid" => a.lambda_grid,
            "a_grid" => a.a_grid,
            "nu_mc" => a.nu_mc,
        },
        None,
    );
    if method == BoundMethod::SmcRdp {
        if a.theta.is_some() || a.theta_grid.is_some() {
            return Err(usage("--method smc takes no tilting parameter"));
        }
        let grid = a.lambda_grid.clone().unwrap_or_else(default_lambda_grid);
        let r = smc_moment_bound(&spec, a.eps, a.u, &grid)?;
        return Ok(run.finish(json!({"bound": to_value(&r)}), EXIT_OK));
    }
    let thetas = match (a.theta, a.theta_grid) {
        (Some(t), None) => vec![t],
        (None, Some((lo, hi, n))) => {
            if !(lo > 0.0 && hi >= lo && n >= 1) {
                return Err(usage("--theta-grid needs 0 < lo <= hi and n >= 1"));
            }
            geometric_grid(lo, hi, n)
        }
        _ => return Err(usage("importance-sampling bounds need --theta or --theta-grid")),
    };
    let lambdas = a.lambda_grid.clone().unwrap_or_else(default_is_lambda_grid);
    let nu_mc = match a.nu_mc {
        Some(v) => v,
        None => smc_moment_bound(&spec, a.eps, 2.0, &default_lambda_grid())?.nu,
    };
    let one = |theta: f64| -> Result<MomentBoundResult, Error> {
        match method {
            BoundMethod::IsJs => is_moment_bound_js(&spec, a.eps, theta, nu_mc),
            BoundMethod::IsMax => {
                let mut best: Option<MomentBoundResult> = None;
                for &l in &lambdas {
                    let r = is_moment_bound_max(&spec, a.eps, theta, l, &quad)?;
                    if best.is_none_or(|b| r.log_nu < b.log_nu) {
                        best = Some(r);
                    }
                }
                best.ok_or_else(|| Error::InvalidParameter {
                    name: "lambda_grid",
                    reason: "must not be empty".into(),
                })
            }
            _ => {
                let a_grid = a.a_grid.clone().unwrap_or_else(default_a_grid);
                is_moment_bound_holder(&spec, a.eps, theta, &a_grid, &lambdas, &quad)
            }
        }
    };
    let mut rows = Vec::new();
    let mut best: Option<MomentBoundResult> = None;
    for &theta in &thetas {
        let r = one(theta)?;
        rows.push(json!({"theta": float(theta), "nu": float(r.nu)}));
        if best.is_none_or(|b| r.log_nu < b.log_nu) {
            best = Some(r);
        }
    }
    let best = best.expect("nonempty grid");
    let mut result = json!({"bound": to_value(&best)});
    if thetas.len() > 1 {
        result["grid"] = Value::Array(rows);
    }
    Ok(run.finish(result, EXIT_OK))
}

pub fn oracle_cmd(c: &OracleCommand) -> Result<Output, Failure> {
    match c {
        OracleCommand::GaussianExact { sigma, k, eps } => {
            let run = Run::new(params! {"oracle" => "gaussian_exact", "sigma" => sigma, "k" => k, "eps" => eps}, None);
            let v = gaussian_exact_delta(*sigma, *k, *eps)?;
            Ok(run.finish(json!({"value": float(v)}), EXIT_OK))
        }
        OracleCommand::Quadrature {
            mechanism: m,
            k,
            eps,
            rel_tol,
        } => {
            let spec = mechanism(m, *k)?;
            let run = Run::new(
                params! {"oracle" => "quadrature", "mechanism" => spec, "eps" => eps, "rel_tol" => rel_tol},
                None,
            );
            let single = if spec.q == 1.0 {
                if *k == 0 {
                    return Err(usage("the quadrature oracle needs k >= 1"));
                }
                MechanismSpec::gaussian(spec.sigma / (*k as f64).sqrt(), 1)?
            } else if *k == 1 {
                spec
            } else {
                return Err(usage("quadrature covers a single subsampled step; use --k 1 or the convolution oracle"));
            };
            let quad = QuadratureSpec::new(*rel_tol, 4000)?;
            let r = quadrature_delta_single_detailed(&single, *eps, &quad)?;
            Ok(run.finish(to_value(&r), EXIT_OK))
        }
        OracleCommand::Convolution {
            mechanism: m,
            k,
            eps,
            step,
        } => {
            let spec = mechanism(m, *k)?;
            let run = Run::new(
                params! {"oracle" => "convolution", "mechanism" => spec, "eps" => eps, "step" => step},
                None,
            );
            if !(*step > 0.0 && step.is_finite()) {
                return Err(usage("--step must be positive"));
            }
            let b = convolution_delta(&spec, *eps, &ConvolutionParams::with_step(*step))?;
            Ok(run.finish(to_value(&b), EXIT_OK))
        }
    }
}
