//! Cantilever-beam benchmark and the repeated-run experiment harness.

use std::io::Write;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::driver::{run_dftr, run_dftr_no_reweight, Method, RunResult, Termination, TrParams};
use crate::error::{RboError, Result};
use crate::model::{
    make_gaussian_family, AffineMap, CostFunction, DesignSpace, LimitState, RboProblem,
};
use crate::reliability::{estimate_probability, EvalCounters};
use crate::sf::{run_sf, SfParams};
use crate::streams::{labelled_rng, StreamLabel};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CantileverConfig {
    pub length: f64,
    pub d_o: f64,
    pub e_mean: f64,
    pub e_sd: f64,
    pub load_mean: f64,
    pub load_sd: f64,
    pub sigma_wt: f64,
    pub theta: f64,
}

impl Default for CantileverConfig {
    fn default() -> Self {
        Self {
            length: 100.0,
            d_o: 6.0,
            e_mean: 29e6,
            e_sd: 1.45e6,
            load_mean: 500.0,
            load_sd: 25.0,
            sigma_wt: 0.1,
            theta: 0.1,
        }
    }
}

impl CantileverConfig {
    pub fn with_sigma(sigma_wt: f64) -> Self {
        Self {
            sigma_wt,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let scales = [
            ("length", self.length),
            ("d_o", self.d_o),
            ("e_mean", self.e_mean),
            ("e_sd", self.e_sd),
            ("load_sd", self.load_sd),
            ("sigma_wt", self.sigma_wt),
        ];
        for (name, v) in scales {
            if !(v.is_finite() && v > 0.0) {
                return Err(RboError::InvalidParameter(format!("{name} = {v} must be positive")));
            }
        }
        if !self.load_mean.is_finite() {
            return Err(RboError::InvalidParameter("load_mean must be finite".into()));
        }
        if !(self.theta > 0.0 && self.theta < 1.0) {
            return Err(RboError::InvalidParameter(format!(
                "theta = {} must lie in (0, 1)",
                self.theta
            )));
        }
        Ok(())
    }
}

/// Start point used by the experiments.
pub const CANTILEVER_X0: [f64; 2] = [2.5, 2.5];

/// Tip-deflection margin d_o − 4L³/(E·W·T)·√((Y/T²)² + (X/W²)²) for
/// z = (E, X, Y, W, T).
pub fn cantilever_limit_state(length: f64, d_o: f64, z: &[f64]) -> f64 {
    let (e, x, y, w, t) = (z[0], z[1], z[2], z[3], z[4]);
    let a = y / (t * t);
    let b = x / (w * w);
    d_o - 4.0 * length.powi(3) / (e * w * t) * (a * a + b * b).sqrt()
}

/// Beam with design (w, t) setting the means of W and T. Cost is w·t over
/// the box [1, 4]².
pub fn cantilever_problem(cfg: &CantileverConfig) -> Result<RboProblem> {
    cfg.validate()?;
    let map = AffineMap::selecting(vec![cfg.e_mean, cfg.load_mean, cfg.load_mean, 0.0, 0.0], &[3, 4]);
    let dist = make_gaussian_family(
        map,
        vec![cfg.e_sd, cfg.load_sd, cfg.load_sd, cfg.sigma_wt, cfg.sigma_wt],
    )?;
    let (length, d_o) = (cfg.length, cfg.d_o);
    RboProblem::new(
        "cantilever",
        DesignSpace::new(vec![1.0, 1.0], vec![4.0, 4.0])?,
        CostFunction::new(|x| x[0] * x[1]).with_gradient(|x| vec![x[1], x[0]]),
        Arc::new(dist),
        LimitState::new(move |z| cantilever_limit_state(length, d_o, z)),
        cfg.theta,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemInfo {
    pub name: String,
    pub dim: usize,
    pub z_dim: usize,
    pub description: String,
}

pub fn list_problems() -> Vec<ProblemInfo> {
    vec![ProblemInfo {
        name: "cantilever".into(),
        dim: 2,
        z_dim: 5,
        description: "cantilever beam, minimize w*t subject to P(tip deflection > 6) <= theta".into(),
    }]
}

/// Problem from the registry. Only `sigma_wt` is configurable by name.
pub fn problem_by_name(name: &str, sigma_wt: f64) -> Result<RboProblem> {
    match name {
        "cantilever" => cantilever_problem(&CantileverConfig::with_sigma(sigma_wt)),
        other => Err(RboError::Configuration(format!(
            "unknown problem '{other}' (available: cantilever)"
        ))),
    }
}

/// Plain Monte Carlo estimate of P(x) with a generator independent of any run
/// stream. Used for feasibility audits.
pub fn audit_probability(problem: &RboProblem, x: &[f64], n: usize, seed: u64) -> Result<f64> {
    let mut rng = labelled_rng(seed, StreamLabel::Sampling);
    Ok(estimate_probability(problem, x, n, &mut rng, &EvalCounters::new())?.0)
}

/// Starting points spread over the box for the reference solve.
pub const BENCHMARK_STARTS: [[f64; 2]; 5] = [[2.5, 2.5], [3.5, 3.5], [2.0, 3.5], [3.5, 2.0], [3.0, 3.0]];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkStart {
    pub x_0: Vec<f64>,
    pub x_opt: Vec<f64>,
    pub f_opt: f64,
    pub p_hat: Option<f64>,
    pub termination: Termination,
    pub full_evals: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkSolution {
    pub sigma_wt: f64,
    pub theta: f64,
    pub n_ref: usize,
    pub seed: u64,
    pub x: Vec<f64>,
    pub f: f64,
    /// Estimate of P at `x` from the run that produced it.
    pub p_hat: f64,
    pub starts: Vec<BenchmarkStart>,
}

/// Reference solution: the score-function solver with `n_ref` samples from
/// each of `BENCHMARK_STARTS`, keeping the cheapest feasible end point.
pub fn benchmark_solution(cfg: &CantileverConfig, n_ref: usize, seed: u64) -> Result<BenchmarkSolution> {
    if n_ref < 1_000_000 {
        return Err(RboError::Precondition(format!(
            "n_ref = {n_ref} is below the 1e6 minimum for a reference solution"
        )));
    }
    let problem = cantilever_problem(cfg)?;
    let params = SfParams::defaults(n_ref);
    let mut starts = Vec::with_capacity(BENCHMARK_STARTS.len());
    for (i, x_0) in BENCHMARK_STARTS.iter().enumerate() {
        let r = run_sf(&problem, x_0, &params, seed.wrapping_add(i as u64))?;
        log::info!(
            "reference start {x_0:?}: {:?} f = {:.6} p = {:?} ({})",
            r.x_opt,
            r.f_opt,
            r.p_hat_opt,
            r.termination.as_str()
        );
        starts.push(BenchmarkStart {
            x_0: x_0.to_vec(),
            x_opt: r.x_opt,
            f_opt: r.f_opt,
            p_hat: r.p_hat_opt,
            termination: r.termination,
            full_evals: r.counters.full_evals,
        });
    }
    let best = starts
        .iter()
        .filter(|s| s.p_hat.is_some_and(|p| p <= cfg.theta))
        .min_by(|a, b| a.f_opt.total_cmp(&b.f_opt).then_with(|| a.x_opt.partial_cmp(&b.x_opt).unwrap()))
        .ok_or_else(|| {
            RboError::Configuration("no reference start reached a feasible design".into())
        })?;
    Ok(BenchmarkSolution {
        sigma_wt: cfg.sigma_wt,
        theta: cfg.theta,
        n_ref,
        seed,
        x: best.x_opt.clone(),
        f: best.f_opt,
        p_hat: best.p_hat.unwrap_or(f64::NAN),
        starts: starts.clone(),
    })
}

const CACHED_SOLUTIONS: &str = include_str!("../fixtures/benchmark_solutions.json");

/// Reference solutions shipped with the crate, one per σ.
pub fn cached_benchmark_solutions() -> Result<Vec<BenchmarkSolution>> {
    serde_json::from_str(CACHED_SOLUTIONS)
        .map_err(|e| RboError::Configuration(format!("corrupt benchmark cache: {e}")))
}

pub fn cached_benchmark(sigma_wt: f64) -> Result<BenchmarkSolution> {
    cached_benchmark_solutions()?
        .into_iter()
        .find(|s| (s.sigma_wt - sigma_wt).abs() <= 1e-12 * sigma_wt)
        .ok_or_else(|| {
            RboError::Configuration(format!(
                "no cached benchmark solution for sigma_wt = {sigma_wt}; run benchmark-solution"
            ))
        })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub method: Method,
    pub n_mc: usize,
    pub sigma_wt: f64,
    pub repetitions: usize,
    pub seed_base: u64,
    pub x_0: Vec<f64>,
    pub tr_params: TrParams,
    pub sf_params: SfParams,
}

impl ExperimentSpec {
    /// Method defaults at the given σ and sample size.
    pub fn new(method: Method, sigma_wt: f64, n_mc: usize, repetitions: usize, seed_base: u64) -> Self {
        let theta = CantileverConfig::default().theta;
        Self {
            method,
            n_mc,
            sigma_wt,
            repetitions,
            seed_base,
            x_0: CANTILEVER_X0.to_vec(),
            tr_params: TrParams::for_method(method, theta, n_mc),
            sf_params: SfParams::defaults(n_mc),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.repetitions == 0 {
            return Err(RboError::InvalidParameter("repetitions must be at least 1".into()));
        }
        if self.tr_params.n_mc != self.n_mc || self.sf_params.n_mc != self.n_mc {
            return Err(RboError::InvalidParameter(
                "n_mc differs between the experiment and its solver parameters".into(),
            ));
        }
        match self.method {
            Method::Sf => self.sf_params.validate(),
            _ => self.tr_params.validate(self.x_0.len()),
        }
    }
}

/// Run one method from `x_0` with the given seed.
pub fn run_method(
    problem: &RboProblem,
    method: Method,
    x_0: &[f64],
    tr: &TrParams,
    sf: &SfParams,
    seed: u64,
) -> Result<RunResult> {
    match method {
        Method::Sf => run_sf(problem, x_0, sf, seed),
        Method::Dftr => run_dftr_no_reweight(problem, x_0, tr, seed),
        Method::DftrR => run_dftr(problem, x_0, tr, seed),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub method: Method,
    pub sigma: f64,
    pub n_mc: usize,
    pub seed: u64,
    pub x_opt: Option<Vec<f64>>,
    pub error_x: Option<f64>,
    pub error_f: Option<f64>,
    pub full_evals: u64,
    pub g_calls: u64,
    /// Termination reason, or the error message of a failed run.
    pub termination: String,
    pub failed: bool,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub method: Method,
    pub sigma: f64,
    pub n_mc: usize,
    pub repetitions: usize,
    pub avg_error: f64,
    pub avg_error_f: f64,
    pub avg_full_evals: f64,
    pub failure_rate: f64,
    pub rows: Vec<RunRow>,
}

/// Repeat `spec.method` with seeds `seed_base + i` and compare each solution
/// with `reference`. Failed runs stay in `rows` but not in the averages.
pub fn run_experiment(spec: &ExperimentSpec, reference: &BenchmarkSolution) -> Result<ExperimentSummary> {
    spec.validate()?;
    let problem = cantilever_problem(&CantileverConfig::with_sigma(spec.sigma_wt))?;
    let rows: Vec<RunRow> = (0..spec.repetitions)
        .into_par_iter()
        .map(|i| {
            let seed = spec.seed_base.wrapping_add(i as u64);
            let start = Instant::now();
            let out = run_method(&problem, spec.method, &spec.x_0, &spec.tr_params, &spec.sf_params, seed);
            let wall_ms = start.elapsed().as_millis() as u64;
            match out {
                Ok(r) => {
                    let err = r
                        .x_opt
                        .iter()
                        .zip(&reference.x)
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                        .sqrt();
                    RunRow {
                        method: spec.method,
                        sigma: spec.sigma_wt,
                        n_mc: spec.n_mc,
                        seed,
                        error_x: Some(err),
                        error_f: Some((r.f_opt - reference.f).abs()),
                        x_opt: Some(r.x_opt),
                        full_evals: r.counters.full_evals,
                        g_calls: r.counters.g_calls,
                        termination: r.termination.as_str().into(),
                        failed: false,
                        wall_ms,
                    }
                }
                Err(e) => {
                    log::warn!("{} run with seed {seed} failed: {e}", spec.method);
                    RunRow {
                        method: spec.method,
                        sigma: spec.sigma_wt,
                        n_mc: spec.n_mc,
                        seed,
                        x_opt: None,
                        error_x: None,
                        error_f: None,
                        full_evals: 0,
                        g_calls: 0,
                        termination: format!("error: {e}"),
                        failed: true,
                        wall_ms,
                    }
                }
            }
        })
        .collect();
    Ok(summarize(spec, rows))
}

fn summarize(spec: &ExperimentSpec, rows: Vec<RunRow>) -> ExperimentSummary {
    let ok: Vec<&RunRow> = rows.iter().filter(|r| !r.failed).collect();
    let mean = |v: Vec<f64>| {
        if v.is_empty() {
            f64::NAN
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    ExperimentSummary {
        method: spec.method,
        sigma: spec.sigma_wt,
        n_mc: spec.n_mc,
        repetitions: rows.len(),
        avg_error: mean(ok.iter().filter_map(|r| r.error_x).collect()),
        avg_error_f: mean(ok.iter().filter_map(|r| r.error_f).collect()),
        avg_full_evals: mean(ok.iter().map(|r| r.full_evals as f64).collect()),
        failure_rate: (rows.len() - ok.len()) as f64 / rows.len() as f64,
        rows,
    }
}

/// 17 significant digits.
pub fn fmt_full(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else {
        v.to_string()
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_full).unwrap_or_default()
}

fn csv_error(e: impl std::fmt::Display) -> RboError {
    RboError::Configuration(format!("cannot write CSV: {e}"))
}

/// Per-run CSV: method, sigma, n_mc, seed, error_x, error_f, full_evals,
/// g_calls, termination, wall_ms.
pub fn write_runs_csv<W: Write>(out: W, summaries: &[ExperimentSummary]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "method", "sigma", "n_mc", "seed", "error_x", "error_f", "full_evals", "g_calls", "termination", "wall_ms",
    ])
    .map_err(csv_error)?;
    for row in summaries.iter().flat_map(|s| &s.rows) {
        w.write_record([
            row.method.as_str().to_string(),
            fmt_full(row.sigma),
            row.n_mc.to_string(),
            row.seed.to_string(),
            fmt_opt(row.error_x),
            fmt_opt(row.error_f),
            row.full_evals.to_string(),
            row.g_calls.to_string(),
            row.termination.clone(),
            row.wall_ms.to_string(),
        ])
        .map_err(csv_error)?;
    }
    w.flush().map_err(csv_error)
}

/// One row per (σ, N, method).
pub fn write_summary_csv<W: Write>(out: W, summaries: &[ExperimentSummary]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "sigma", "n_mc", "method", "repetitions", "avg_error", "avg_error_f", "avg_full_evals", "failure_rate",
    ])
    .map_err(csv_error)?;
    for s in summaries {
        w.write_record([
            fmt_full(s.sigma),
            s.n_mc.to_string(),
            s.method.as_str().to_string(),
            s.repetitions.to_string(),
            fmt_full(s.avg_error),
            fmt_full(s.avg_error_f),
            fmt_full(s.avg_full_evals),
            fmt_full(s.failure_rate),
        ])
        .map_err(csv_error)?;
    }
    w.flush().map_err(csv_error)
}

/// Write both CSV files into `dir`.
pub fn write_experiment_csvs(dir: &Path, summaries: &[ExperimentSummary]) -> Result<()> {
    let io = |e: std::io::Error| RboError::Configuration(format!("cannot write to {}: {e}", dir.display()));
    std::fs::create_dir_all(dir).map_err(io)?;
    write_runs_csv(std::fs::File::create(dir.join("runs.csv")).map_err(io)?, summaries)?;
    write_summary_csv(std::fs::File::create(dir.join("summary.csv")).map_err(io)?, summaries)
}
