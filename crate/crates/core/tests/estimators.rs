use std::sync::Arc;

use approx::assert_relative_eq;
use rbo_core::benchmark::{cantilever_problem, CantileverConfig};
use rbo_core::model::{make_gaussian_family, AffineMap, CostFunction, DesignSpace, LimitState, RboProblem};
use rbo_core::reliability::{full_evaluation, log_constraint, reweighted_evaluation, EvalCounters};
use rbo_core::sf::sf_gradient;
use rbo_core::streams::{labelled_rng, StreamLabel};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

const A: f64 = 1.5;

/// z ~ N(x, 1), failure when z < A, so P(x) = Φ(A − x) and P'(x) = −φ(A − x).
fn tail_problem() -> RboProblem {
    RboProblem::new(
        "tail",
        DesignSpace::new(vec![-5.0], vec![5.0]).unwrap(),
        CostFunction::new(|x| x[0]),
        Arc::new(make_gaussian_family(AffineMap::selecting(vec![0.0], &[0]), vec![1.0]).unwrap()),
        LimitState::new(|z| z[0] - A),
        0.5,
    )
    .unwrap()
}

fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).unwrap()
}

#[test]
fn monte_carlo_estimate_is_unbiased() {
    let p = tail_problem();
    let x = [2.5];
    let truth = std_normal().cdf(A - x[0]);
    let n = 20_000;
    let seeds = 200;
    let c = EvalCounters::new();
    let mean = (0..seeds)
        .map(|s| full_evaluation(&p, &x, n, &mut labelled_rng(s, StreamLabel::Sampling), &c).unwrap().p_hat)
        .sum::<f64>()
        / seeds as f64;
    let se = (truth * (1.0 - truth) / (n as f64 * seeds as f64)).sqrt();
    assert!((mean - truth).abs() <= 4.0 * se, "mean {mean} truth {truth} se {se}");
}

#[test]
fn reweighting_agrees_with_fresh_sampling() {
    let p = tail_problem();
    let (xc, x) = ([2.0], [2.15]);
    let n = 20_000;
    let c = EvalCounters::new();
    let mut hits = 0;
    for s in 0..100 {
        let centre = full_evaluation(&p, &xc, n, &mut labelled_rng(s, StreamLabel::Sampling), &c).unwrap();
        let rw = reweighted_evaluation(&centre, p.dist.as_ref(), &x, &c).unwrap();
        let fresh = full_evaluation(&p, &x, n, &mut labelled_rng(1000 + s, StreamLabel::Sampling), &c).unwrap();
        let se = (rw.std_err.powi(2) + fresh.std_err.powi(2)).sqrt();
        if (rw.p_hat - fresh.p_hat).abs() <= 3.0 * se {
            hits += 1;
        }
    }
    assert!(hits >= 95, "{hits}/100 within 3 SE");
}

#[test]
fn score_gradient_matches_the_gaussian_tail_derivative() {
    let p = tail_problem();
    let x = [1.0];
    let truth = -std_normal().pdf(A - x[0]);
    let c = EvalCounters::new();
    for s in 0..100 {
        let est = sf_gradient(&p, &x, 100_000, &mut labelled_rng(s, StreamLabel::Sampling), &c).unwrap();
        assert!(
            (est.grad_p[0] - truth).abs() <= 4.0 * est.grad_std_err[0],
            "seed {s}: {} vs {truth} (se {})",
            est.grad_p[0],
            est.grad_std_err[0]
        );
    }
}

#[test]
fn score_gradient_is_unbiased_over_many_seeds() {
    let p = tail_problem();
    let x = [0.5];
    let truth = -std_normal().pdf(A - x[0]);
    let c = EvalCounters::new();
    let ests: Vec<_> = (0..200)
        .map(|s| sf_gradient(&p, &x, 10_000, &mut labelled_rng(s, StreamLabel::Sampling), &c).unwrap())
        .collect();
    let mean = ests.iter().map(|e| e.grad_p[0]).sum::<f64>() / 200.0;
    let se = (ests.iter().map(|e| e.grad_std_err[0].powi(2)).sum::<f64>()).sqrt() / 200.0;
    assert!((mean - truth).abs() <= 4.0 * se, "mean {mean} truth {truth} se {se}");
}

#[test]
fn cantilever_score_gradient_matches_reweighted_differences() {
    let p = cantilever_problem(&CantileverConfig::with_sigma(0.1)).unwrap();
    let x = [2.1, 2.2];
    let n = 100_000;
    let c = EvalCounters::new();
    let est = sf_gradient(&p, &x, n, &mut labelled_rng(3, StreamLabel::Sampling), &c).unwrap();
    let centre = full_evaluation(&p, &x, n, &mut labelled_rng(4, StreamLabel::Sampling), &c).unwrap();
    let h = 1e-2;
    for j in 0..2 {
        let mut up = x;
        let mut dn = x;
        up[j] += h;
        dn[j] -= h;
        let cu = log_constraint(reweighted_evaluation(&centre, p.dist.as_ref(), &up, &c).unwrap().p_hat, 0.1, n);
        let cd = log_constraint(reweighted_evaluation(&centre, p.dist.as_ref(), &dn, &c).unwrap().p_hat, 0.1, n);
        let fd = (cu - cd) / (2.0 * h);
        assert_relative_eq!(est.grad_c[j], fd, max_relative = 0.1);
    }
}
