//! Outer/inner trust-region iteration for reliability-constrained problems.
//!
//! Each inner pass builds a certified surrogate of the log-constraint around
//! the current iterate, solves the subproblem, and tests the candidate against
//! a Monte Carlo estimate of the true constraint. Accepted steps expand the
//! radius by ω⁺ and end the inner loop; rejections contract it by ω⁻.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{RboError, Result};
use crate::model::{cost_eval, RboProblem};
use crate::reliability::{
    full_evaluation, log_constraint, reweighted_evaluation, CounterSnapshot, EvalCounters,
    ReliabilityEvaluation,
};
use crate::streams::{RunStreams, SamplePolicy};
use crate::subproblem::{solve_subproblem, SolverOptions, SubproblemSpec};
use crate::surrogate::{
    basis_len, surr_constr, surr_constr_independent, CertifySettings, QuadraticSurrogate,
    SurrogateRecord,
};

/// How the acceptance test c(x_{k+1}) < 0 is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AcceptanceMode {
    /// Fresh full evaluation at the candidate (counted).
    #[default]
    Full,
    /// Reweight the centre evaluation of the current iteration.
    Reweighted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "sf")]
    Sf,
    #[serde(rename = "dftr")]
    Dftr,
    #[serde(rename = "dftr-r")]
    DftrR,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Sf => "sf",
            Method::Dftr => "dftr",
            Method::DftrR => "dftr-r",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = RboError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sf" => Ok(Method::Sf),
            "dftr" => Ok(Method::Dftr),
            "dftr-r" | "dftr_r" => Ok(Method::DftrR),
            other => Err(RboError::Configuration(format!(
                "unknown method '{other}' (expected sf, dftr or dftr-r)"
            ))),
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Trust-region parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrParams {
    pub rho_0: f64,
    pub rho_min: f64,
    pub eps_star: f64,
    pub omega_plus: f64,
    pub omega_minus: f64,
    pub delta: f64,
    pub m: usize,
    pub n_mc: usize,
    pub max_outer: usize,
    pub acceptance_mode: AcceptanceMode,
    /// Reuse an existing full evaluation at the current iterate (the accepting
    /// evaluation, or the one from a rejected inner pass) instead of drawing a
    /// new one when building the next surrogate.
    pub recycle_center: bool,
    pub sample_policy: SamplePolicy,
    /// A step counts as interior when ‖x_{k+1} − x_k‖ < (1 − tol)·ρ.
    pub inner_point_tol: f64,
    pub solver: SolverOptions,
}

impl TrParams {
    /// Defaults: ρ₀ = 0.1, ρ_min = 1e-6, ε* = 0.1θ, ω⁻ = 0.9, ω⁺ = 1.1,
    /// M = 20, δ = 1e-4.
    pub fn defaults(theta: f64, n_mc: usize) -> Self {
        Self {
            rho_0: 0.1,
            rho_min: 1e-6,
            eps_star: 0.1 * theta,
            omega_plus: 1.1,
            omega_minus: 0.9,
            delta: 1e-4,
            m: 20,
            n_mc,
            max_outer: 500,
            acceptance_mode: AcceptanceMode::Full,
            recycle_center: false,
            sample_policy: SamplePolicy::Common,
            inner_point_tol: 1e-6,
            solver: SolverOptions::default(),
        }
    }

    /// Defaults with the sample policy each method is run with: fresh streams
    /// for the reweighting variant, common random numbers when every design
    /// point is sampled separately.
    pub fn for_method(method: Method, theta: f64, n_mc: usize) -> Self {
        let sample_policy = match method {
            Method::DftrR => SamplePolicy::Fresh,
            Method::Dftr | Method::Sf => SamplePolicy::Common,
        };
        Self {
            sample_policy,
            ..Self::defaults(theta, n_mc)
        }
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        let bad = |msg: String| Err(RboError::InvalidParameter(msg));
        if !(self.omega_minus > 0.0 && self.omega_minus < 1.0) {
            return bad(format!(
                "omega_minus = {} violates 0 < omega_minus < 1",
                self.omega_minus
            ));
        }
        if !(self.omega_plus > 1.0 && self.omega_plus.is_finite()) {
            return bad(format!("omega_plus = {} violates omega_plus > 1", self.omega_plus));
        }
        if !(self.rho_min > 0.0 && self.rho_min < self.rho_0 && self.rho_0.is_finite()) {
            return bad(format!(
                "radii violate 0 < rho_min < rho_0 (rho_min = {}, rho_0 = {})",
                self.rho_min, self.rho_0
            ));
        }
        if !(self.eps_star > 0.0) {
            return bad(format!("eps_star = {} must be positive", self.eps_star));
        }
        if !(self.delta >= 0.0) {
            return bad(format!("delta = {} must be nonnegative", self.delta));
        }
        if self.m <= basis_len(dim) {
            return bad(format!(
                "m = {} must exceed the {} quadratic coefficients",
                self.m,
                basis_len(dim)
            ));
        }
        if self.n_mc == 0 {
            return bad("n_mc must be at least 1".into());
        }
        if self.max_outer == 0 {
            return bad("max_outer must be at least 1".into());
        }
        if !(self.inner_point_tol >= 0.0 && self.inner_point_tol < 1.0) {
            return bad(format!("inner_point_tol = {} must lie in [0, 1)", self.inner_point_tol));
        }
        self.solver.validate()
    }

    fn certify_settings(&self) -> CertifySettings {
        CertifySettings {
            eps_star: self.eps_star,
            omega: self.omega_minus,
            m: self.m,
            rho_min_guard: self.rho_min,
            poisedness_retries: 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    InnerPoint,
    FStall,
    RhoFloor,
    MaxOuter,
    SurrogateFailure,
    InfeasibleSubproblem,
    /// Gradient-based runs: KKT tolerance met.
    Converged,
    /// Gradient-based runs: step length collapsed.
    StepStall,
    /// Gradient-based runs: no merit decrease along the search direction.
    LineSearchFailure,
}

impl Termination {
    pub fn is_normal(&self) -> bool {
        !matches!(self, Termination::SurrogateFailure | Termination::InfeasibleSubproblem)
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Termination::InnerPoint => "inner_point",
            Termination::FStall => "f_stall",
            Termination::RhoFloor => "rho_floor",
            Termination::MaxOuter => "max_outer",
            Termination::SurrogateFailure => "surrogate_failure",
            Termination::InfeasibleSubproblem => "infeasible_subproblem",
            Termination::Converged => "converged",
            Termination::StepStall => "step_stall",
            Termination::LineSearchFailure => "line_search_failure",
        }
    }
}

/// One outer iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub k: usize,
    pub x_k: Vec<f64>,
    pub f_k: f64,
    pub x_next: Option<Vec<f64>>,
    pub f_next: Option<f64>,
    pub rho_before: f64,
    pub rho_after: f64,
    pub p_hat_accept: Option<f64>,
    pub accepted: bool,
    pub inner_rejections: usize,
    pub surrogate_passes: usize,
    pub full_evals_so_far: u64,
    pub surrogate: Option<SurrogateRecord>,
}

/// Bookkeeping behind the evaluation counters.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunStats {
    /// Surrogate constructions (certification loops).
    pub surr_constr_calls: u64,
    /// Surrogate constructions that ran their own centre evaluation.
    pub center_evaluations: u64,
    /// Full evaluations spent on acceptance tests.
    pub acceptance_checks: u64,
    /// Full evaluations spent on regression points (no-reweighting variant).
    pub point_evaluations: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub method: Method,
    pub seed: u64,
    pub x_opt: Vec<f64>,
    pub f_opt: f64,
    /// Failure-probability estimate that accepted `x_opt`, if any did.
    pub p_hat_opt: Option<f64>,
    pub termination: Termination,
    pub iterations: Vec<IterationRecord>,
    pub counters: CounterSnapshot,
    pub stats: RunStats,
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// DF-TR with reweighting: one full evaluation per surrogate.
pub fn run_dftr(problem: &RboProblem, x_0: &[f64], params: &TrParams, seed: u64) -> Result<RunResult> {
    run_trust_region(problem, x_0, params, seed, true)
}

/// DF-TR without reweighting: every regression point gets its own full
/// evaluation. Acceptance is always tested with a full evaluation.
pub fn run_dftr_no_reweight(
    problem: &RboProblem,
    x_0: &[f64],
    params: &TrParams,
    seed: u64,
) -> Result<RunResult> {
    run_trust_region(problem, x_0, params, seed, false)
}

struct Built {
    surrogate: QuadraticSurrogate,
    radius: f64,
    passes: usize,
    center_eval: Option<Arc<ReliabilityEvaluation>>,
}

fn run_trust_region(
    problem: &RboProblem,
    x_0: &[f64],
    params: &TrParams,
    seed: u64,
    reweight: bool,
) -> Result<RunResult> {
    params.validate(problem.dim())?;
    let mut f_k = cost_eval(problem, x_0)?;
    let counters = EvalCounters::new();
    let mut streams = RunStreams::new(seed, params.sample_policy);
    let settings = params.certify_settings();
    let acceptance = if reweight {
        params.acceptance_mode
    } else {
        AcceptanceMode::Full
    };
    let theta = problem.theta;
    let n_mc = params.n_mc;

    let mut stats = RunStats::default();
    let mut records = Vec::new();
    let mut x_k = x_0.to_vec();
    let mut rho = params.rho_0;
    let mut held_eval: Option<Arc<ReliabilityEvaluation>> = None;
    let mut best: Option<(Vec<f64>, f64, f64)> = None;
    let mut latest: Option<(Vec<f64>, f64, f64)> = None;

    let termination = 'outer: loop {
        let k = records.len();
        if k >= params.max_outer {
            break Termination::MaxOuter;
        }
        let rho_before = rho;
        let mut rejections = 0;
        let mut last_surrogate: Option<SurrogateRecord> = None;
        let mut passes = 0;

        let abnormal = |records: &mut Vec<IterationRecord>,
                        x_k: &[f64],
                        rho: f64,
                        rejections: usize,
                        passes: usize,
                        surrogate: Option<SurrogateRecord>| {
            records.push(IterationRecord {
                k,
                x_k: x_k.to_vec(),
                f_k,
                x_next: None,
                f_next: None,
                rho_before,
                rho_after: rho,
                p_hat_accept: None,
                accepted: false,
                inner_rejections: rejections,
                surrogate_passes: passes,
                full_evals_so_far: counters.snapshot().full_evals,
                surrogate,
            });
        };

        let (x_next, f_next, p_accept, radius_used, accept_eval) = loop {
            let built = if reweight {
                let reuse = if params.recycle_center { held_eval.clone() } else { None };
                match surr_constr(problem, &x_k, rho, &settings, n_mc, &mut streams, &counters, reuse) {
                    Ok(out) => {
                        stats.surr_constr_calls += 1;
                        stats.center_evaluations += u64::from(out.evaluated_center);
                        Built {
                            surrogate: out.surrogate,
                            radius: out.radius,
                            passes: out.passes,
                            center_eval: Some(out.evaluation),
                        }
                    }
                    Err(RboError::SurrogateFailure { radius, .. }) => {
                        stats.surr_constr_calls += 1;
                        abnormal(&mut records, &x_k, radius, rejections, passes, last_surrogate);
                        break 'outer Termination::SurrogateFailure;
                    }
                    Err(e) => return Err(e),
                }
            } else {
                let before = counters.snapshot().full_evals;
                let out = surr_constr_independent(problem, &x_k, rho, &settings, n_mc, &mut streams, &counters);
                stats.surr_constr_calls += 1;
                stats.point_evaluations += counters.snapshot().full_evals - before;
                match out {
                    Ok(c) => Built {
                        surrogate: c.surrogate,
                        radius: c.radius,
                        passes: c.passes,
                        center_eval: None,
                    },
                    Err(RboError::SurrogateFailure { radius, .. }) => {
                        abnormal(&mut records, &x_k, radius, rejections, passes, last_surrogate);
                        break 'outer Termination::SurrogateFailure;
                    }
                    Err(e) => return Err(e),
                }
            };
            passes += built.passes;
            rho = built.radius;
            if params.recycle_center {
                held_eval = built.center_eval.clone();
            }
            last_surrogate = Some(built.surrogate.record());

            let spec = SubproblemSpec {
                cost: &problem.cost,
                surrogate: &built.surrogate,
                center: &x_k,
                radius: rho,
                space: &problem.space,
            };
            let sub = match solve_subproblem(&spec, &params.solver, &mut streams.multistart) {
                Ok(s) => s,
                Err(RboError::InfeasibleSubproblem { .. }) => {
                    rejections += 1;
                    rho *= params.omega_minus;
                    if rho < params.rho_min {
                        abnormal(&mut records, &x_k, rho, rejections, passes, last_surrogate);
                        break 'outer Termination::InfeasibleSubproblem;
                    }
                    continue;
                }
                Err(e) => return Err(e),
            };

            let (p, eval) = match acceptance {
                AcceptanceMode::Full => {
                    let e = full_evaluation(problem, &sub.x_next, n_mc, &mut streams.sampling(), &counters)?;
                    stats.acceptance_checks += 1;
                    (e.p_hat, Some(Arc::new(e)))
                }
                AcceptanceMode::Reweighted => {
                    let center = built.center_eval.as_ref().expect("reweighting keeps the centre");
                    let r = reweighted_evaluation(center, problem.dist.as_ref(), &sub.x_next, &counters)?;
                    (r.p_hat, None)
                }
            };
            if log_constraint(p, theta, n_mc) < 0.0 {
                break (sub.x_next, sub.f_value, p, rho, eval);
            }
            log::debug!("iteration {k}: rejected {:?} with p = {p:.4e} at radius {rho:.3e}", sub.x_next);
            rejections += 1;
            rho *= params.omega_minus;
            if rho < params.rho_min {
                abnormal(&mut records, &x_k, rho, rejections, passes, last_surrogate);
                break 'outer Termination::RhoFloor;
            }
        };

        rho = radius_used * params.omega_plus;
        let step = distance(&x_next, &x_k);
        records.push(IterationRecord {
            k,
            x_k: x_k.clone(),
            f_k,
            x_next: Some(x_next.clone()),
            f_next: Some(f_next),
            rho_before,
            rho_after: rho,
            p_hat_accept: Some(p_accept),
            accepted: true,
            inner_rejections: rejections,
            surrogate_passes: passes,
            full_evals_so_far: counters.snapshot().full_evals,
            surrogate: last_surrogate,
        });
        if best.as_ref().is_none_or(|b| f_next < b.1) {
            best = Some((x_next.clone(), f_next, p_accept));
        }
        latest = Some((x_next.clone(), f_next, p_accept));
        log::debug!("iteration {k}: accepted {x_next:?} f = {f_next:.6} p = {p_accept:.4e} rho = {rho:.3e}");

        let df = (f_next - f_k).abs();
        let interior = step < (1.0 - params.inner_point_tol) * radius_used;
        x_k = x_next;
        f_k = f_next;
        held_eval = if params.recycle_center { accept_eval } else { None };
        if df <= params.delta {
            break Termination::FStall;
        }
        if interior {
            break Termination::InnerPoint;
        }
        if rho < params.rho_min {
            break Termination::RhoFloor;
        }
    };

    let chosen = if termination.is_normal() && termination != Termination::MaxOuter {
        latest
    } else {
        best
    };
    let (x_opt, f_opt, p_hat_opt) = match chosen {
        Some((x, f, p)) => (x, f, Some(p)),
        None => (x_0.to_vec(), cost_eval(problem, x_0)?, None),
    };
    Ok(RunResult {
        method: if reweight { Method::DftrR } else { Method::Dftr },
        seed,
        x_opt,
        f_opt,
        p_hat_opt,
        termination,
        iterations: records,
        counters: counters.snapshot(),
        stats,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{make_gaussian_family, AffineMap, CostFunction, DesignSpace, LimitState};

    fn never_failing(cost: CostFunction, theta: f64) -> RboProblem {
        let dist = make_gaussian_family(AffineMap::selecting(vec![0.0, 0.0], &[0, 1]), vec![1.0, 1.0]).unwrap();
        RboProblem::new(
            "safe",
            DesignSpace::new(vec![-2.0, -2.0], vec![2.0, 2.0]).unwrap(),
            cost,
            Arc::new(dist),
            LimitState::new(|_| 1.0),
            theta,
        )
        .unwrap()
    }

    fn bowl() -> CostFunction {
        CostFunction::new(|x| (x[0] - 1.0).powi(2) + (x[1] + 0.5).powi(2))
    }

    fn params(n: usize) -> TrParams {
        TrParams::defaults(0.999, n)
    }

    #[test]
    fn inactive_constraint_reaches_the_box_minimizer() {
        let p = never_failing(bowl(), 0.999);
        let r = run_dftr(&p, &[0.0, 0.0], &params(500), 3).unwrap();
        assert!(r.termination.is_normal(), "{:?}", r.termination);
        assert!(r.f_opt <= 10.0 * 1e-4, "f_opt = {}", r.f_opt);
    }

    #[test]
    fn flat_cost_stalls_after_one_iteration() {
        let p = never_failing(CostFunction::new(|_| 1.0), 0.5);
        let r = run_dftr(&p, &[0.0, 0.0], &params(200), 1).unwrap();
        assert_eq!(r.termination, Termination::FStall);
        assert_eq!(r.iterations.len(), 1);
        assert!(r.iterations[0].accepted);
    }

    #[test]
    fn counters_match_the_work_done() {
        let p = never_failing(bowl(), 0.5);
        let n = 300;
        let r = run_dftr(&p, &[0.0, 0.0], &params(n), 11).unwrap();
        assert_eq!(r.counters.full_evals, r.stats.surr_constr_calls + r.stats.acceptance_checks);
        assert_eq!(r.counters.g_calls, r.counters.full_evals * n as u64);

        let r = run_dftr_no_reweight(&p, &[0.0, 0.0], &params(n), 11).unwrap();
        assert_eq!(r.counters.full_evals, r.stats.point_evaluations + r.stats.acceptance_checks);
        assert_eq!(r.stats.point_evaluations % 20, 0);
        assert_eq!(r.counters.reweighted_evals, 0);
    }

    #[test]
    fn equal_seeds_give_identical_runs() {
        let p = never_failing(bowl(), 0.5);
        let a = run_dftr(&p, &[0.0, 0.0], &params(300), 5).unwrap();
        let b = run_dftr(&p, &[0.0, 0.0], &params(300), 5).unwrap();
        assert_eq!(a, b);
        let c = run_dftr(&p, &[0.0, 0.0], &params(300), 6).unwrap();
        assert_ne!(a.iterations, c.iterations);
    }

    #[test]
    fn noiseless_constraint_gives_the_same_path_with_and_without_reweighting() {
        let p = never_failing(bowl(), 0.5);
        let a = run_dftr(&p, &[0.0, 0.0], &params(100), 8).unwrap();
        let b = run_dftr_no_reweight(&p, &[0.0, 0.0], &params(100), 8).unwrap();
        let path = |r: &RunResult| r.iterations.iter().map(|i| i.x_next.clone()).collect::<Vec<_>>();
        assert_eq!(path(&a), path(&b));
        assert_eq!(a.x_opt, b.x_opt);
    }

    #[test]
    fn max_outer_returns_the_best_accepted_iterate() {
        let p = never_failing(bowl(), 0.5);
        let mut tp = params(100);
        tp.max_outer = 2;
        let r = run_dftr(&p, &[0.0, 0.0], &tp, 2).unwrap();
        assert_eq!(r.termination, Termination::MaxOuter);
        assert_eq!(r.iterations.len(), 2);
        let best = r.iterations.iter().filter_map(|i| i.f_next).fold(f64::INFINITY, f64::min);
        assert_eq!(r.f_opt, best);
        assert!(r.p_hat_opt.unwrap() < 0.5);
    }

    #[test]
    fn radius_grows_by_omega_plus_on_every_acceptance() {
        let p = never_failing(bowl(), 0.5);
        let r = run_dftr(&p, &[0.0, 0.0], &params(100), 4).unwrap();
        let mut prev = 0;
        for it in &r.iterations {
            assert!(it.full_evals_so_far >= prev);
            prev = it.full_evals_so_far;
            let used = it.surrogate.as_ref().unwrap().radius;
            assert!(used <= it.rho_before * (1.0 + 1e-15));
            assert!((it.rho_after - 1.1 * used).abs() <= 1e-15 * it.rho_after);
        }
    }

    #[test]
    fn invalid_parameters_are_rejected() {
        let p = never_failing(bowl(), 0.5);
        for (field, value) in [("omega_minus", 1.2), ("omega_plus", 0.9), ("rho_min", 0.5)] {
            let mut tp = params(100);
            match field {
                "omega_minus" => tp.omega_minus = value,
                "omega_plus" => tp.omega_plus = value,
                _ => tp.rho_min = value,
            }
            let err = run_dftr(&p, &[0.0, 0.0], &tp, 0).unwrap_err();
            assert!(err.to_string().contains(field), "{err}");
        }
        let mut tp = params(100);
        tp.m = 6;
        assert!(run_dftr(&p, &[0.0, 0.0], &tp, 0).is_err());
        assert!(matches!(
            run_dftr(&p, &[3.0, 0.0], &params(100), 0),
            Err(RboError::Domain { index: 0, .. })
        ));
    }

    #[test]
    fn method_names_round_trip() {
        for m in [Method::Sf, Method::Dftr, Method::DftrR] {
            assert_eq!(m.as_str().parse::<Method>().unwrap(), m);
            assert_eq!(serde_json::to_string(&m).unwrap(), format!("\"{}\"", m.as_str()));
        }
        assert!("newton".parse::<Method>().is_err());
    }
}
