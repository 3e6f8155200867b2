//! Sequential quadratic programming for small smooth problems
//!
//! ```text
//!     minimize f(x)  subject to  c_i(x) ≤ 0,  lower ≤ x ≤ upper
//! ```
//!
//! Damped BFGS approximation of the Lagrangian Hessian, an ℓ₁ merit function
//! with backtracking and a second-order correction, and an elastic QP
//! subproblem (one slack shared by all linearized constraints) so that the
//! step is defined even when the linearization is inconsistent.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::qp::{solve_qp, QpError};

/// Function values and first derivatives at one point.
#[derive(Debug, Clone, PartialEq)]
pub struct NlpPoint {
    pub f: f64,
    pub grad: Vec<f64>,
    pub c: Vec<f64>,
    /// One gradient row per constraint.
    pub jac: Vec<Vec<f64>>,
}

impl NlpPoint {
    pub fn max_violation(&self) -> f64 {
        self.c.iter().fold(0.0f64, |m, &c| m.max(c))
    }
}

/// A smooth problem the SQP engine can drive.
pub trait Nlp {
    fn dim(&self) -> usize;
    fn lower(&self) -> &[f64];
    fn upper(&self) -> &[f64];
    fn evaluate(&mut self, x: &[f64]) -> Result<NlpPoint>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SqpOptions {
    pub kkt_tol: f64,
    pub max_iters: usize,
    /// Relative step length below which iteration stops.
    pub step_tol: f64,
    /// Stop once an accepted step changes f by at most this much while the
    /// new point is feasible.
    pub f_tol: Option<f64>,
    pub initial_penalty: f64,
}

impl Default for SqpOptions {
    fn default() -> Self {
        Self {
            kkt_tol: 1e-8,
            max_iters: 200,
            step_tol: 1e-14,
            f_tol: None,
            initial_penalty: 10.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SqpStatus {
    Converged,
    SmallStep,
    FunctionStall,
    MaxIterations,
    LineSearchFailure,
}

/// One accepted SQP iterate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SqpIterate {
    pub x: Vec<f64>,
    pub f: f64,
    pub max_violation: f64,
    pub step: f64,
    pub alpha: f64,
    pub evaluations: usize,
}

#[derive(Debug, Clone)]
pub struct SqpOutcome {
    pub x: Vec<f64>,
    pub point: NlpPoint,
    pub multipliers: Vec<f64>,
    pub kkt_residual: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub status: SqpStatus,
    pub history: Vec<SqpIterate>,
}

const ARMIJO: f64 = 1e-4;
const MAX_BACKTRACKS: usize = 40;

struct QpStep {
    p: DVector<f64>,
    lambda: Vec<f64>,
    box_mult: Vec<f64>,
}

fn box_rows(lower: &[f64], upper: &[f64], x: &[f64]) -> Vec<(usize, f64, f64)> {
    // (coordinate, sign, bound on sign·p)
    let mut rows = Vec::new();
    for j in 0..x.len() {
        if upper[j].is_finite() {
            rows.push((j, 1.0, (upper[j] - x[j]).max(0.0)));
        }
        if lower[j].is_finite() {
            rows.push((j, -1.0, (x[j] - lower[j]).max(0.0)));
        }
    }
    rows
}

fn qp_step(
    b: &DMatrix<f64>,
    pt: &NlpPoint,
    x: &[f64],
    lower: &[f64],
    upper: &[f64],
    elastic: f64,
) -> std::result::Result<QpStep, QpError> {
    let n = x.len();
    let m = pt.c.len();
    let bx = box_rows(lower, upper, x);
    let nv = n + 1;
    let rows = m + 1 + bx.len();

    let mut g = DMatrix::zeros(nv, nv);
    g.view_mut((0, 0), (n, n)).copy_from(b);
    g[(n, n)] = 1e-8 * b.diagonal().max().max(1.0);
    let mut c = DVector::zeros(nv);
    for j in 0..n {
        c[j] = pt.grad[j];
    }
    c[n] = elastic;

    let mut a = DMatrix::zeros(rows, nv);
    let mut rhs = DVector::zeros(rows);
    for i in 0..m {
        for j in 0..n {
            a[(i, j)] = pt.jac[i][j];
        }
        a[(i, n)] = -1.0;
        rhs[i] = -pt.c[i];
    }
    a[(m, n)] = -1.0;
    for (r, &(j, sign, bound)) in bx.iter().enumerate() {
        a[(m + 1 + r, j)] = sign;
        rhs[m + 1 + r] = bound;
    }
    let mut start = DVector::zeros(nv);
    start[n] = pt.max_violation();

    let sol = solve_qp(&g, &c, &a, &rhs, start)?;
    let mut box_mult = vec![0.0; n];
    for (r, &(j, sign, _)) in bx.iter().enumerate() {
        box_mult[j] += sign * sol.multipliers[m + 1 + r];
    }
    Ok(QpStep {
        p: sol.x.rows(0, n).into_owned(),
        lambda: (0..m).map(|i| sol.multipliers[i]).collect(),
        box_mult,
    })
}

fn merit(pt: &NlpPoint, mu: f64) -> f64 {
    pt.f + mu * pt.c.iter().map(|c| c.max(0.0)).sum::<f64>()
}

fn lagrangian_gradient(pt: &NlpPoint, lambda: &[f64]) -> DVector<f64> {
    let mut g = DVector::from_column_slice(&pt.grad);
    for (row, l) in pt.jac.iter().zip(lambda) {
        for (gj, r) in g.iter_mut().zip(row) {
            *gj += l * r;
        }
    }
    g
}

fn kkt_residual(pt: &NlpPoint, step: &QpStep) -> f64 {
    let mut g = lagrangian_gradient(pt, &step.lambda);
    for (gj, nu) in g.iter_mut().zip(&step.box_mult) {
        *gj += nu;
    }
    let stationarity = g.amax();
    let compl = pt
        .c
        .iter()
        .zip(&step.lambda)
        .fold(0.0f64, |m, (c, l)| m.max((c * l).abs()));
    stationarity.max(compl).max(pt.max_violation())
}

fn clamp(x: &mut [f64], lower: &[f64], upper: &[f64]) {
    for ((v, l), u) in x.iter_mut().zip(lower).zip(upper) {
        *v = v.clamp(*l, *u);
    }
}

/// Run SQP from `x0` (projected into the bounds).
pub fn minimize(problem: &mut dyn Nlp, x0: &[f64], opts: &SqpOptions) -> Result<SqpOutcome> {
    let n = problem.dim();
    let lower = problem.lower().to_vec();
    let upper = problem.upper().to_vec();
    let mut x = x0.to_vec();
    clamp(&mut x, &lower, &upper);
    let mut pt = problem.evaluate(&x)?;
    let mut evaluations = 1;
    let mut b = DMatrix::<f64>::identity(n, n);
    let mut scaled_once = false;
    let mut mu = opts.initial_penalty;
    let mut lambda = vec![0.0; pt.c.len()];
    let mut kkt = f64::INFINITY;
    let mut history = Vec::new();

    let finish = |x: Vec<f64>,
                  pt: NlpPoint,
                  lambda: Vec<f64>,
                  kkt: f64,
                  iterations: usize,
                  evaluations: usize,
                  status: SqpStatus,
                  history: Vec<SqpIterate>| {
        Ok(SqpOutcome {
            x,
            point: pt,
            multipliers: lambda,
            kkt_residual: kkt,
            iterations,
            evaluations,
            status,
            history,
        })
    };

    for iter in 0..opts.max_iters {
        let elastic = 1e3 * mu.max(1.0);
        let step = match qp_step(&b, &pt, &x, &lower, &upper, elastic) {
            Ok(s) => s,
            Err(_) => {
                // Factorization trouble: restart the Hessian model once.
                b = DMatrix::identity(n, n);
                match qp_step(&b, &pt, &x, &lower, &upper, elastic) {
                    Ok(s) => s,
                    Err(_) => {
                        return finish(x, pt, lambda, kkt, iter, evaluations, SqpStatus::LineSearchFailure, history)
                    }
                }
            }
        };
        lambda = step.lambda.clone();
        kkt = kkt_residual(&pt, &step);
        if kkt <= opts.kkt_tol {
            return finish(x, pt, lambda, kkt, iter, evaluations, SqpStatus::Converged, history);
        }
        let xnorm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let pnorm = step.p.norm();
        if pnorm <= opts.step_tol * (1.0 + xnorm) {
            return finish(x, pt, lambda, kkt, iter, evaluations, SqpStatus::SmallStep, history);
        }

        let lmax = lambda.iter().fold(0.0f64, |m, &l| m.max(l));
        if mu < 1.1 * lmax {
            mu = 1.5 * lmax;
        }
        let phi0 = merit(&pt, mu);
        let lin_viol: f64 = pt
            .c
            .iter()
            .zip(&pt.jac)
            .map(|(c, row)| {
                (c + row.iter().zip(step.p.iter()).map(|(a, p)| a * p).sum::<f64>()).max(0.0)
            })
            .sum();
        let cur_viol: f64 = pt.c.iter().map(|c| c.max(0.0)).sum();
        let gp: f64 = pt.grad.iter().zip(step.p.iter()).map(|(g, p)| g * p).sum();
        let mut dir = gp + mu * (lin_viol - cur_viol);
        if dir >= 0.0 {
            // Not a descent direction for the merit function: use the model
            // curvature as a surrogate decrease so the search still terminates.
            dir = -(step.p.transpose() * &b * &step.p)[(0, 0)].max(f64::EPSILON);
        }

        let mut alpha = 1.0;
        let mut accepted: Option<(Vec<f64>, NlpPoint)> = None;
        for bt in 0..MAX_BACKTRACKS {
            let mut xt: Vec<f64> = x.iter().zip(step.p.iter()).map(|(a, p)| a + alpha * p).collect();
            clamp(&mut xt, &lower, &upper);
            let trial = problem.evaluate(&xt)?;
            evaluations += 1;
            if merit(&trial, mu) <= phi0 + ARMIJO * alpha * dir {
                accepted = Some((xt, trial));
                break;
            }
            if bt == 0 {
                if let Some(corrected) = second_order_correction(&pt, &trial, &step, &xt) {
                    let mut xs = corrected;
                    clamp(&mut xs, &lower, &upper);
                    let soc = problem.evaluate(&xs)?;
                    evaluations += 1;
                    if merit(&soc, mu) <= phi0 + ARMIJO * dir {
                        accepted = Some((xs, soc));
                        break;
                    }
                }
            }
            alpha *= 0.5;
            if alpha * pnorm <= opts.step_tol * (1.0 + xnorm) {
                break;
            }
        }
        let Some((xn, ptn)) = accepted else {
            return finish(x, pt, lambda, kkt, iter + 1, evaluations, SqpStatus::LineSearchFailure, history);
        };

        // Damped BFGS on the Lagrangian gradient difference.
        let s = DVector::from_iterator(n, xn.iter().zip(&x).map(|(a, b)| a - b));
        let y = lagrangian_gradient(&ptn, &lambda) - lagrangian_gradient(&pt, &lambda);
        let ss = s.dot(&s);
        if ss > 0.0 {
            let sy = s.dot(&y);
            if !scaled_once && sy > 0.0 {
                b = DMatrix::identity(n, n) * (y.dot(&y) / sy);
                scaled_once = true;
            }
            let bs = &b * &s;
            let sbs = s.dot(&bs);
            if sbs > 0.0 {
                let theta = if sy >= 0.2 * sbs { 1.0 } else { 0.8 * sbs / (sbs - sy) };
                let r = theta * &y + (1.0 - theta) * &bs;
                let sr = s.dot(&r);
                if sr > 0.0 {
                    b = &b - (&bs * bs.transpose()) / sbs + (&r * r.transpose()) / sr;
                }
            }
        }

        let df = (ptn.f - pt.f).abs();
        let step_len = ss.sqrt();
        x = xn;
        pt = ptn;
        history.push(SqpIterate {
            x: x.clone(),
            f: pt.f,
            max_violation: pt.max_violation(),
            step: step_len,
            alpha,
            evaluations,
        });
        if let Some(ftol) = opts.f_tol {
            if df <= ftol && pt.max_violation() <= 0.0 {
                return finish(x, pt, lambda, kkt, iter + 1, evaluations, SqpStatus::FunctionStall, history);
            }
        }
    }
    finish(x, pt, lambda, kkt, opts.max_iters, evaluations, SqpStatus::MaxIterations, history)
}

/// Minimum-norm correction that removes the curvature error of the
/// constraints the QP treated as active.
fn second_order_correction(
    pt: &NlpPoint,
    trial: &NlpPoint,
    step: &QpStep,
    xt: &[f64],
) -> Option<Vec<f64>> {
    let n = xt.len();
    let active: Vec<usize> = (0..pt.c.len()).filter(|&i| step.lambda[i] > 0.0).collect();
    if active.is_empty() || active.len() > n {
        return None;
    }
    let k = active.len();
    let mut j = DMatrix::zeros(k, n);
    let mut r = DVector::zeros(k);
    for (row, &i) in active.iter().enumerate() {
        let lin: f64 = pt.c[i] + pt.jac[i].iter().zip(step.p.iter()).map(|(a, p)| a * p).sum::<f64>();
        r[row] = trial.c[i] - lin.max(0.0).min(trial.c[i]);
        for col in 0..n {
            j[(row, col)] = pt.jac[i][col];
        }
    }
    let jjt = &j * j.transpose();
    let w = jjt.lu().solve(&r)?;
    let d = j.transpose() * w;
    Some(xt.iter().zip(d.iter()).map(|(x, d)| x - d).collect())
}
