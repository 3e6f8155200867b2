//! Score-function baseline: SQP on the sampled log-constraint with gradients
//! from the likelihood-ratio identity ∇P(x) = E[I(g(z) < 0) ∇ₓ ln q(z; x)].

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::driver::{IterationRecord, Method, RunResult, RunStats, Termination};
use crate::error::{RboError, Result};
use crate::model::{cost_eval, RboProblem};
use crate::reliability::{log_constraint, map_sample_chunks, EvalCounters};
use crate::sqp::{minimize, Nlp, NlpPoint, SqpOptions, SqpStatus};
use crate::streams::{RunStreams, SamplePolicy};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SfGradientEstimate {
    pub x: Vec<f64>,
    pub p_hat: f64,
    pub grad_p: Vec<f64>,
    /// Per-component standard error of `grad_p`.
    pub grad_std_err: Vec<f64>,
    /// Gradient of ln max(P̂, 0.5/N).
    pub grad_c: Vec<f64>,
    pub n: usize,
}

/// Score-function estimate of P and ∇P from one full evaluation.
pub fn sf_gradient(
    problem: &RboProblem,
    x: &[f64],
    n: usize,
    rng: &mut dyn RngCore,
    counters: &EvalCounters,
) -> Result<SfGradientEstimate> {
    if n == 0 {
        return Err(RboError::Precondition("sample count must be at least 1".into()));
    }
    problem.space.check(x)?;
    let d = problem.dim();
    let z_dim = problem.dist.z_dim();
    let seed = rng.next_u64();
    let dist = problem.dist.as_ref();
    let chunks = map_sample_chunks(dist, x, n, seed, |start, rows| {
        let mut failures = 0usize;
        let mut sum = vec![0.0; d];
        let mut sum_sq = vec![0.0; d];
        for (i, z) in rows.chunks_exact(z_dim).enumerate() {
            let g = problem.limit.eval(z);
            if !g.is_finite() {
                return Err(RboError::TaintedSample { index: start + i, value: g });
            }
            if g < 0.0 {
                failures += 1;
                for (j, s) in dist.score(z, x).into_iter().enumerate() {
                    sum[j] += s;
                    sum_sq[j] += s * s;
                }
            }
        }
        Ok((failures, sum, sum_sq))
    });
    counters.record_full(n as u64);

    let mut failures = 0usize;
    let mut sum = vec![0.0; d];
    let mut sum_sq = vec![0.0; d];
    for chunk in chunks {
        let (f, s, s2) = chunk?;
        failures += f;
        for j in 0..d {
            sum[j] += s[j];
            sum_sq[j] += s2[j];
        }
    }
    let nf = n as f64;
    let p_hat = failures as f64 / nf;
    let grad_p: Vec<f64> = sum.iter().map(|s| s / nf).collect();
    let grad_std_err = grad_p
        .iter()
        .zip(&sum_sq)
        .map(|(m, s2)| {
            let var = if n > 1 { (s2 - nf * m * m) / (nf - 1.0) } else { 0.0 };
            (var.max(0.0) / nf).sqrt()
        })
        .collect();
    let floor = 0.5 / nf;
    let grad_c = if p_hat > floor {
        grad_p.iter().map(|g| g / p_hat).collect()
    } else {
        // ln max(P̂, floor) is flat while the floor binds.
        vec![0.0; d]
    };
    Ok(SfGradientEstimate {
        x: x.to_vec(),
        p_hat,
        grad_p,
        grad_std_err,
        grad_c,
        n,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SfParams {
    pub n_mc: usize,
    pub max_iters: usize,
    pub kkt_tol: f64,
    /// Relative step length below which iteration stops.
    pub step_tol: f64,
    /// Optional stop once a feasible step changes f by at most this much.
    pub f_tol: Option<f64>,
    pub initial_penalty: f64,
    pub sample_policy: SamplePolicy,
}

impl SfParams {
    pub fn defaults(n_mc: usize) -> Self {
        Self {
            n_mc,
            max_iters: 500,
            kkt_tol: 1e-6,
            step_tol: 1e-6,
            f_tol: None,
            initial_penalty: 10.0,
            sample_policy: SamplePolicy::Common,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_mc == 0 {
            return Err(RboError::InvalidParameter("n_mc must be at least 1".into()));
        }
        if self.f_tol.is_some_and(|t| !(t >= 0.0)) {
            return Err(RboError::InvalidParameter("f_tol must be nonnegative".into()));
        }
        if self.max_iters == 0 {
            return Err(RboError::InvalidParameter("max_iters must be at least 1".into()));
        }
        if !(self.kkt_tol > 0.0) || !(self.step_tol >= 0.0) || !(self.initial_penalty > 0.0) {
            return Err(RboError::InvalidParameter(
                "kkt_tol and initial_penalty must be positive, step_tol nonnegative".into(),
            ));
        }
        Ok(())
    }
}

struct SfNlp<'a> {
    problem: &'a RboProblem,
    n: usize,
    streams: RunStreams,
    counters: &'a EvalCounters,
    p_log: Vec<(Vec<f64>, f64)>,
}

impl Nlp for SfNlp<'_> {
    fn dim(&self) -> usize {
        self.problem.dim()
    }

    fn lower(&self) -> &[f64] {
        self.problem.space.lower()
    }

    fn upper(&self) -> &[f64] {
        self.problem.space.upper()
    }

    fn evaluate(&mut self, x: &[f64]) -> Result<NlpPoint> {
        let f = cost_eval(self.problem, x)?;
        let grad = self.problem.cost.gradient(x);
        let est = sf_gradient(self.problem, x, self.n, &mut self.streams.sampling(), self.counters)?;
        self.p_log.push((x.to_vec(), est.p_hat));
        Ok(NlpPoint {
            f,
            grad,
            c: vec![log_constraint(est.p_hat, self.problem.theta, self.n)],
            jac: vec![est.grad_c],
        })
    }
}

/// Run the score-function SQP baseline from `x_0`.
pub fn run_sf(problem: &RboProblem, x_0: &[f64], params: &SfParams, seed: u64) -> Result<RunResult> {
    params.validate()?;
    problem.space.check(x_0)?;
    let counters = EvalCounters::new();
    let mut nlp = SfNlp {
        problem,
        n: params.n_mc,
        streams: RunStreams::new(seed, params.sample_policy),
        counters: &counters,
        p_log: Vec::new(),
    };
    let opts = SqpOptions {
        kkt_tol: params.kkt_tol,
        max_iters: params.max_iters,
        step_tol: params.step_tol,
        f_tol: params.f_tol,
        initial_penalty: params.initial_penalty,
    };
    let out = minimize(&mut nlp, x_0, &opts)?;
    let p_log = nlp.p_log;

    let mut iterations = Vec::with_capacity(out.history.len());
    let mut prev = (x_0.to_vec(), cost_eval(problem, x_0)?);
    for (k, it) in out.history.iter().enumerate() {
        let p = p_log.get(it.evaluations.wrapping_sub(1)).map(|e| e.1);
        iterations.push(IterationRecord {
            k,
            x_k: prev.0.clone(),
            f_k: prev.1,
            x_next: Some(it.x.clone()),
            f_next: Some(it.f),
            rho_before: it.step,
            rho_after: it.step,
            p_hat_accept: p,
            accepted: true,
            inner_rejections: 0,
            surrogate_passes: 0,
            full_evals_so_far: it.evaluations as u64,
            surrogate: None,
        });
        prev = (it.x.clone(), it.f);
    }

    let termination = match out.status {
        SqpStatus::Converged => Termination::Converged,
        SqpStatus::SmallStep => Termination::StepStall,
        SqpStatus::FunctionStall => Termination::FStall,
        SqpStatus::MaxIterations => Termination::MaxOuter,
        SqpStatus::LineSearchFailure => Termination::LineSearchFailure,
    };
    let p_hat_opt = p_log.iter().rev().find(|e| e.0 == out.x).map(|e| e.1);
    Ok(RunResult {
        method: Method::Sf,
        seed,
        x_opt: out.x,
        f_opt: out.point.f,
        p_hat_opt,
        termination,
        iterations,
        counters: counters.snapshot(),
        stats: RunStats::default(),
    })
}
