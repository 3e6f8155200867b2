//! The trust-region subproblem: minimize f(x) subject to the surrogate
//! constraint s(x) ≤ 0, the ball ‖x − x_k‖ ≤ ρ and the design box.
//!
//! The problem is solved in the scaled coordinates u = (x − x_k)/ρ, where the
//! ball becomes the smooth constraint ‖u‖² − 1 ≤ 0. Several SQP starts (the
//! centre plus random ball points) guard against disconnected feasible sets of
//! indefinite surrogates.

use std::cmp::Ordering;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{RboError, Result};
use crate::model::{CostFunction, DesignSpace};
use crate::sqp::{minimize, Nlp, NlpPoint, SqpOptions};
use crate::surrogate::{sample_ball, QuadraticSurrogate};

/// Tolerance on the surrogate value for a point to count as feasible.
pub const TOL_SURROGATE: f64 = 1e-8;
/// Relative tolerance on the ball radius.
pub const TOL_RADIUS: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    pub kkt_tol: f64,
    pub n_starts: usize,
    pub max_sqp_iters: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            kkt_tol: 1e-8,
            n_starts: 5,
            max_sqp_iters: 200,
        }
    }
}

impl SolverOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.kkt_tol > 0.0) || self.n_starts == 0 || self.max_sqp_iters == 0 {
            return Err(RboError::InvalidParameter(format!(
                "solver options need kkt_tol > 0, n_starts ≥ 1 and max_sqp_iters ≥ 1, got {self:?}"
            )));
        }
        Ok(())
    }

    fn sqp(&self) -> SqpOptions {
        SqpOptions {
            kkt_tol: self.kkt_tol,
            max_iters: self.max_sqp_iters,
            ..SqpOptions::default()
        }
    }
}

#[derive(Debug, Clone)]
pub struct SubproblemSpec<'a> {
    pub cost: &'a CostFunction,
    pub surrogate: &'a QuadraticSurrogate,
    pub center: &'a [f64],
    pub radius: f64,
    pub space: &'a DesignSpace,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActiveSet {
    pub surrogate: bool,
    pub ball: bool,
    pub lower: Vec<bool>,
    pub upper: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubproblemResult {
    pub x_next: Vec<f64>,
    pub f_value: f64,
    pub surrogate_value: f64,
    /// KKT residual of the winning SQP run, measured in scaled coordinates.
    pub kkt_residual: f64,
    pub feasible: bool,
    pub active: ActiveSet,
    /// Lagrange multipliers of the surrogate and ball constraints, in design
    /// coordinates, when the winner came straight from an SQP run.
    pub multipliers: Option<[f64; 2]>,
}

enum Objective {
    Cost,
    Surrogate,
}

struct ScaledProblem<'a> {
    spec: &'a SubproblemSpec<'a>,
    objective: Objective,
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl<'a> ScaledProblem<'a> {
    fn new(spec: &'a SubproblemSpec<'a>, objective: Objective) -> Self {
        let r = spec.radius;
        let lower = spec
            .space
            .lower()
            .iter()
            .zip(spec.center)
            .map(|(l, c)| ((l - c) / r).max(-1.0))
            .collect();
        let upper = spec
            .space
            .upper()
            .iter()
            .zip(spec.center)
            .map(|(u, c)| ((u - c) / r).min(1.0))
            .collect();
        Self {
            spec,
            objective,
            lower,
            upper,
        }
    }

    fn to_design(&self, u: &[f64]) -> Vec<f64> {
        u.iter()
            .zip(self.spec.center)
            .map(|(u, c)| c + self.spec.radius * u)
            .collect()
    }
}

impl Nlp for ScaledProblem<'_> {
    fn dim(&self) -> usize {
        self.spec.center.len()
    }

    fn lower(&self) -> &[f64] {
        &self.lower
    }

    fn upper(&self) -> &[f64] {
        &self.upper
    }

    fn evaluate(&mut self, u: &[f64]) -> Result<NlpPoint> {
        let x = self.to_design(u);
        let r = self.spec.radius;
        let s = self.spec.surrogate.eval(&x);
        let s_grad: Vec<f64> = self
            .spec
            .surrogate
            .gradient(&x)
            .into_iter()
            .map(|g| g * r)
            .collect();
        let ball = u.iter().map(|v| v * v).sum::<f64>() - 1.0;
        let ball_grad = u.iter().map(|v| 2.0 * v).collect();
        Ok(match self.objective {
            Objective::Cost => NlpPoint {
                f: self.spec.cost.eval(&x),
                grad: self.spec.cost.gradient(&x).into_iter().map(|g| g * r).collect(),
                c: vec![s, ball],
                jac: vec![s_grad, ball_grad],
            },
            Objective::Surrogate => NlpPoint {
                f: s,
                grad: s_grad,
                c: vec![ball],
                jac: vec![ball_grad],
            },
        })
    }
}

struct Candidate {
    x: Vec<f64>,
    f: f64,
    s: f64,
    kkt: f64,
    multipliers: Option<[f64; 2]>,
}

fn norm_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Pull a slightly outside point back onto the ball and into the box.
fn polish(spec: &SubproblemSpec<'_>, x: &mut Vec<f64>) {
    let d = norm_dist(x, spec.center);
    if d > spec.radius {
        let k = spec.radius / d;
        for (xi, ci) in x.iter_mut().zip(spec.center) {
            *xi = ci + (*xi - ci) * k;
        }
    }
    spec.space.clamp(x);
}

fn is_feasible(spec: &SubproblemSpec<'_>, x: &[f64], s: f64) -> bool {
    s <= TOL_SURROGATE
        && norm_dist(x, spec.center) <= spec.radius * (1.0 + TOL_RADIUS)
        && spec.space.contains(x)
}

fn better(a: &Candidate, b: &Candidate) -> bool {
    match a.f.total_cmp(&b.f) {
        Ordering::Less => true,
        Ordering::Greater => false,
        Ordering::Equal => {
            for (x, y) in a.x.iter().zip(&b.x) {
                match x.total_cmp(y) {
                    Ordering::Less => return true,
                    Ordering::Greater => return false,
                    Ordering::Equal => {}
                }
            }
            false
        }
    }
}

fn run_cost(spec: &SubproblemSpec<'_>, u0: &[f64], opts: &SolverOptions) -> Result<Candidate> {
    let mut nlp = ScaledProblem::new(spec, Objective::Cost);
    let out = minimize(&mut nlp, u0, &opts.sqp())?;
    let mut x = nlp.to_design(&out.x);
    polish(spec, &mut x);
    Ok(Candidate {
        f: spec.cost.eval(&x),
        s: spec.surrogate.eval(&x),
        x,
        kkt: out.kkt_residual,
        // ‖u‖² − 1 = (‖x − c‖² − ρ²)/ρ², and the scaled objective carries ρ.
        multipliers: Some([out.multipliers[0], out.multipliers[1] / (spec.radius * spec.radius)]),
    })
}

/// Solve the subproblem by multi-start SQP.
pub fn solve_subproblem(
    spec: &SubproblemSpec<'_>,
    opts: &SolverOptions,
    rng: &mut dyn RngCore,
) -> Result<SubproblemResult> {
    opts.validate()?;
    if !(spec.radius > 0.0 && spec.radius.is_finite()) {
        return Err(RboError::Precondition(format!(
            "trust-region radius {} must be positive",
            spec.radius
        )));
    }
    spec.space.check(spec.center)?;
    let d = spec.center.len();

    let mut starts = vec![vec![0.0; d]];
    if opts.n_starts > 1 {
        let pts = sample_ball(spec.center, spec.radius, opts.n_starts - 1, spec.space, rng)?;
        starts.extend(pts.into_iter().map(|p| {
            p.iter()
                .zip(spec.center)
                .map(|(x, c)| (x - c) / spec.radius)
                .collect::<Vec<_>>()
        }));
    }

    let mut best: Option<Candidate> = None;
    let mut runs = Vec::with_capacity(starts.len());
    for u0 in &starts {
        let cand = run_cost(spec, u0, opts)?;
        if is_feasible(spec, &cand.x, cand.s) && best.as_ref().is_none_or(|b| better(&cand, b)) {
            best = Some(cand);
        } else {
            runs.push(cand);
        }
    }

    if best.is_none() {
        // Look for a surrogate-feasible region first, then optimize from there.
        let mut least: Option<Candidate> = None;
        for u0 in &starts {
            let mut nlp = ScaledProblem::new(spec, Objective::Surrogate);
            let out = minimize(&mut nlp, u0, &opts.sqp())?;
            let mut x = nlp.to_design(&out.x);
            polish(spec, &mut x);
            let s = spec.surrogate.eval(&x);
            if is_feasible(spec, &x, s) {
                let u: Vec<f64> = x
                    .iter()
                    .zip(spec.center)
                    .map(|(x, c)| (x - c) / spec.radius)
                    .collect();
                let cand = run_cost(spec, &u, opts)?;
                let cand = if is_feasible(spec, &cand.x, cand.s) {
                    cand
                } else {
                    Candidate {
                        f: spec.cost.eval(&x),
                        s,
                        x,
                        kkt: f64::INFINITY,
                        multipliers: None,
                    }
                };
                if best.as_ref().is_none_or(|b| better(&cand, b)) {
                    best = Some(cand);
                }
            } else if least.as_ref().is_none_or(|l| s < l.s) {
                least = Some(Candidate {
                    f: spec.cost.eval(&x),
                    s,
                    x,
                    kkt: out.kkt_residual,
                    multipliers: None,
                });
            }
        }
        if best.is_none() {
            let least = least.expect("at least one start");
            return Err(RboError::InfeasibleSubproblem {
                min_violation: least.s,
            });
        }
    }

    let mut best = best.expect("feasible candidate");
    // The centre itself is always admissible when the surrogate allows it.
    let s_center = spec.surrogate.eval(spec.center);
    let f_center = spec.cost.eval(spec.center);
    if s_center <= TOL_SURROGATE && f_center < best.f {
        best = Candidate {
            x: spec.center.to_vec(),
            f: f_center,
            s: s_center,
            kkt: best.kkt,
            multipliers: None,
        };
    }

    let dist = norm_dist(&best.x, spec.center);
    let active = ActiveSet {
        surrogate: best.s.abs() <= 1e-6,
        ball: dist >= spec.radius * (1.0 - 1e-8),
        lower: best
            .x
            .iter()
            .zip(spec.space.lower())
            .map(|(x, l)| (x - l).abs() <= 1e-12 * (1.0 + l.abs()))
            .collect(),
        upper: best
            .x
            .iter()
            .zip(spec.space.upper())
            .map(|(x, u)| (x - u).abs() <= 1e-12 * (1.0 + u.abs()))
            .collect(),
    };
    Ok(SubproblemResult {
        feasible: true,
        f_value: best.f,
        surrogate_value: best.s,
        kkt_residual: best.kkt,
        x_next: best.x,
        active,
        multipliers: best.multipliers,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn linear_surrogate(center: &[f64], radius: f64, a0: f64, a: &[f64]) -> QuadraticSurrogate {
        // Scaled coefficients: s = a0 + aᵀ(c + ρu).
        let mut scaled = vec![0.0; crate::surrogate::basis_len(center.len())];
        scaled[0] = a0 + a.iter().zip(center).map(|(x, y)| x * y).sum::<f64>();
        for (k, ai) in a.iter().enumerate() {
            scaled[1 + k] = ai * radius;
        }
        QuadraticSurrogate::from_scaled(center.to_vec(), radius, scaled, 0.0)
    }

    fn solve(
        cost: CostFunction,
        sur: &QuadraticSurrogate,
        center: &[f64],
        radius: f64,
        space: &DesignSpace,
    ) -> Result<SubproblemResult> {
        let spec = SubproblemSpec {
            cost: &cost,
            surrogate: sur,
            center,
            radius,
            space,
        };
        solve_subproblem(&spec, &SolverOptions::default(), &mut ChaCha8Rng::seed_from_u64(1))
    }

    #[test]
    fn interior_minimizer() {
        let space = DesignSpace::unbounded(2);
        let sur = QuadraticSurrogate::constant(vec![0.0, 0.0], 1.0, -1.0);
        let cost = CostFunction::new(|x| x[0] * x[0] + x[1] * x[1]);
        let r = solve(cost, &sur, &[0.0, 0.0], 1.0, &space).unwrap();
        assert!(r.x_next.iter().all(|v| v.abs() < 1e-8));
        assert!(!r.active.ball && !r.active.surrogate);
    }

    #[test]
    fn box_bound_is_reported_active() {
        let space = DesignSpace::new(vec![-0.5, -5.0], vec![5.0, 5.0]).unwrap();
        let sur = QuadraticSurrogate::constant(vec![0.0, 0.0], 1.0, -1.0);
        let cost = CostFunction::new(|x| x[0]);
        let r = solve(cost, &sur, &[0.0, 0.0], 1.0, &space).unwrap();
        assert!((r.x_next[0] + 0.5).abs() < 1e-12);
        assert!(r.active.lower[0]);
    }

    #[test]
    fn surrogate_infeasible_everywhere_is_an_error() {
        let space = DesignSpace::unbounded(2);
        let sur = QuadraticSurrogate::constant(vec![0.0, 0.0], 1.0, 0.5);
        let cost = CostFunction::new(|x| x[0]);
        let err = solve(cost, &sur, &[0.0, 0.0], 1.0, &space).unwrap_err();
        assert!(matches!(err, RboError::InfeasibleSubproblem { .. }));
    }

    #[test]
    fn infeasible_centre_moves_into_the_surrogate_region() {
        // s(x) = 1 − 2 x1: feasible for x1 ≥ 0.5 only.
        let space = DesignSpace::unbounded(2);
        let sur = linear_surrogate(&[0.0, 0.0], 1.0, 1.0, &[-2.0, 0.0]);
        let cost = CostFunction::new(|x| x[0] + x[1]);
        let r = solve(cost, &sur, &[0.0, 0.0], 1.0, &space).unwrap();
        assert!(sur.eval(&r.x_next) <= TOL_SURROGATE);
        // min x1 + x2 on {x1 ≥ 0.5, ‖x‖ ≤ 1}: x = (0.5, −√0.75)
        assert!((r.x_next[0] - 0.5).abs() < 1e-6);
        assert!((r.x_next[1] + 0.75f64.sqrt()).abs() < 1e-6);
    }

    #[test]
    fn never_worse_than_a_feasible_centre() {
        let space = DesignSpace::unbounded(2);
        let sur = linear_surrogate(&[1.0, 1.0], 0.2, -0.1, &[0.3, -0.7]);
        let cost = CostFunction::new(|x| (x[0] - 3.0).powi(2) * x[1].sin() + x[1]);
        let f_center = cost.eval(&[1.0, 1.0]);
        let r = solve(cost, &sur, &[1.0, 1.0], 0.2, &space).unwrap();
        assert!(r.f_value <= f_center);
        assert!(norm_dist(&r.x_next, &[1.0, 1.0]) <= 0.2 * (1.0 + TOL_RADIUS));
    }
}
