use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rbo_core::model::{CostFunction, DesignSpace};
use rbo_core::subproblem::{solve_subproblem, SolverOptions, SubproblemResult, SubproblemSpec};
use rbo_core::surrogate::{basis_len, QuadraticSurrogate};

fn linear(center: &[f64], radius: f64, a0: f64, a: &[f64]) -> QuadraticSurrogate {
    let mut scaled = vec![0.0; basis_len(center.len())];
    scaled[0] = a0 + a.iter().zip(center).map(|(x, y)| x * y).sum::<f64>();
    for (k, ai) in a.iter().enumerate() {
        scaled[1 + k] = ai * radius;
    }
    QuadraticSurrogate::from_scaled(center.to_vec(), radius, scaled, 0.0)
}

fn solve(cost: CostFunction, s: &QuadraticSurrogate, seed: u64) -> SubproblemResult {
    let space = DesignSpace::unbounded(2);
    let spec = SubproblemSpec {
        cost: &cost,
        surrogate: s,
        center: &[0.0, 0.0],
        radius: 1.0,
        space: &space,
    };
    solve_subproblem(&spec, &SolverOptions::default(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

#[test]
fn linear_cost_over_the_ball() {
    let s = QuadraticSurrogate::constant(vec![0.0, 0.0], 1.0, -1.0);
    for seed in 0..5 {
        let r = solve(CostFunction::new(|x| x[0] + x[1]), &s, seed);
        let h = -1.0 / 2f64.sqrt();
        assert!((r.x_next[0] - h).abs() < 1e-6 && (r.x_next[1] - h).abs() < 1e-6, "{:?}", r.x_next);
        assert!((r.f_value + 2f64.sqrt()).abs() < 1e-6);
        assert!(r.active.ball && !r.active.surrogate);
        // ∇f + μ·2x = 0 at x = −(1,1)/√2 gives μ = 1/√2.
        let [ls, lb] = r.multipliers.unwrap();
        assert!(ls.abs() < 1e-6);
        assert!((lb - 0.5f64.sqrt()).abs() < 1e-6, "{lb}");
    }
}

#[test]
fn interior_minimizer_of_a_bowl() {
    let s = QuadraticSurrogate::constant(vec![0.0, 0.0], 1.0, -1.0);
    let r = solve(CostFunction::new(|x| x[0] * x[0] + x[1] * x[1]), &s, 1);
    assert!(r.x_next.iter().all(|v| v.abs() < 1e-6));
    assert!(!r.active.ball);
}

#[test]
fn active_linear_surrogate_constraint() {
    let s = linear(&[0.0, 0.0], 1.0, 0.0, &[1.0, 0.0]);
    for seed in 0..5 {
        let r = solve(CostFunction::new(|x| -x[0]), &s, seed);
        assert!(r.x_next[0].abs() < 1e-6, "{:?}", r.x_next);
        assert!(r.surrogate_value <= 1e-8);
        assert!(r.active.surrogate);
        if let Some([ls, _]) = r.multipliers {
            assert!((ls - 1.0).abs() < 1e-6, "{ls}");
        }
    }
}

#[test]
fn returned_points_respect_all_constraints() {
    let space = DesignSpace::new(vec![0.0, -1.0], vec![2.0, 1.0]).unwrap();
    let cost = CostFunction::new(|x| x[0] * x[1]);
    for seed in 0..20u64 {
        let center = [0.5 + 0.05 * seed as f64, 0.1];
        let s = linear(&center, 0.4, -0.1, &[0.3, -0.8]);
        let spec = SubproblemSpec {
            cost: &cost,
            surrogate: &s,
            center: &center,
            radius: 0.4,
            space: &space,
        };
        let r = solve_subproblem(&spec, &SolverOptions::default(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        assert!(r.feasible);
        assert!(s.eval(&r.x_next) <= 1e-8);
        let d = r.x_next.iter().zip(&center).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        assert!(d <= 0.4 * (1.0 + 1e-10));
        assert!(space.contains(&r.x_next));
        if s.eval(&center) <= 0.0 {
            assert!(r.f_value <= cost.eval(&center));
        }
    }
}
