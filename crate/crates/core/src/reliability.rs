//! Monte Carlo failure-probability estimation and sample reweighting.
//!
//! A *full* evaluation draws fresh samples at a design and calls the limit
//! state on every one of them. A *reweighted* evaluation reuses the samples of
//! a full evaluation at a nearby centre, multiplying each failure indicator by
//! the likelihood ratio q(z; x) / q(z; x_c). It never calls the limit state.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{RboError, Result};
use crate::model::{ParametricDistribution, RboProblem, Samples};

/// Rows per independently seeded chunk. Part of the reproducibility contract:
/// changing it changes every sample stream.
pub const CHUNK_ROWS: usize = 4096;

/// Reweighted estimates with an effective sample size below this fraction of
/// N are flagged as degenerate.
pub const ESS_FLOOR_FRACTION: f64 = 0.1;

/// Evaluation counters shared by everything working on one run.
#[derive(Debug, Default)]
pub struct EvalCounters {
    full_evals: AtomicU64,
    reweighted_evals: AtomicU64,
    g_calls: AtomicU64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CounterSnapshot {
    pub full_evals: u64,
    pub reweighted_evals: u64,
    pub g_calls: u64,
}

impl EvalCounters {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn snapshot(&self) -> CounterSnapshot {
        CounterSnapshot {
            full_evals: self.full_evals.load(Ordering::Relaxed),
            reweighted_evals: self.reweighted_evals.load(Ordering::Relaxed),
            g_calls: self.g_calls.load(Ordering::Relaxed),
        }
    }

    pub(crate) fn record_full(&self, g_calls: u64) {
        self.full_evals.fetch_add(1, Ordering::Relaxed);
        self.g_calls.fetch_add(g_calls, Ordering::Relaxed);
    }

    fn record_reweighted(&self) {
        self.reweighted_evals.fetch_add(1, Ordering::Relaxed);
    }
}

/// A full Monte Carlo evaluation at `center`, with its samples retained for
/// reweighting.
#[derive(Debug, Clone)]
pub struct ReliabilityEvaluation {
    pub center: Vec<f64>,
    pub samples: Samples,
    pub g_values: Vec<f64>,
    pub indicator: Vec<bool>,
    pub p_hat: f64,
    pub std_err: f64,
    pub n: usize,
}

impl ReliabilityEvaluation {
    pub fn failures(&self) -> usize {
        self.indicator.iter().filter(|&&i| i).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightSummary {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReweightedEstimate {
    pub x: Vec<f64>,
    pub p_hat: f64,
    pub std_err: f64,
    pub ess: f64,
    pub weights: WeightSummary,
    /// Set when `ess` fell below `ESS_FLOOR_FRACTION · n`.
    pub degenerate: bool,
    pub n: usize,
}

fn chunk_rng(seed: u64, chunk: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(chunk as u64);
    rng
}

/// Draw `n` samples at `x` in fixed-size chunks, each with its own stream
/// derived from `seed`, and map every chunk with `f(first_row, rows)`.
/// Results come back in chunk order, so the outcome does not depend on how
/// many worker threads ran the map.
pub(crate) fn map_sample_chunks<T, F>(
    dist: &dyn ParametricDistribution,
    x: &[f64],
    n: usize,
    seed: u64,
    f: F,
) -> Vec<T>
where
    T: Send,
    F: Fn(usize, &[f64]) -> T + Sync,
{
    let z_dim = dist.z_dim();
    let n_chunks = n.div_ceil(CHUNK_ROWS);
    (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let start = c * CHUNK_ROWS;
            let rows = CHUNK_ROWS.min(n - start);
            let mut buf = vec![0.0; rows * z_dim];
            dist.sample_rows(x, &mut chunk_rng(seed, c), &mut buf);
            f(start, &buf)
        })
        .collect()
}

fn binomial_std_err(p: f64, n: usize) -> f64 {
    (p * (1.0 - p) / n as f64).max(0.0).sqrt()
}

fn check_design(problem: &RboProblem, x: &[f64], n: usize) -> Result<()> {
    if n == 0 {
        return Err(RboError::Precondition("sample count must be at least 1".into()));
    }
    problem.space.check(x)
}

/// Full Monte Carlo evaluation of P(x): draws `n` samples from q(·; x) and
/// evaluates the limit state on each.
pub fn full_evaluation(
    problem: &RboProblem,
    x: &[f64],
    n: usize,
    rng: &mut dyn RngCore,
    counters: &EvalCounters,
) -> Result<ReliabilityEvaluation> {
    check_design(problem, x, n)?;
    let seed = rng.next_u64();
    let z_dim = problem.dist.z_dim();
    let chunks = map_sample_chunks(problem.dist.as_ref(), x, n, seed, |_, rows| {
        let g: Vec<f64> = rows
            .chunks_exact(z_dim)
            .map(|z| problem.limit.eval(z))
            .collect();
        (rows.to_vec(), g)
    });
    counters.record_full(n as u64);

    let mut data = Vec::with_capacity(n * z_dim);
    let mut g_values = Vec::with_capacity(n);
    for (rows, g) in chunks {
        data.extend_from_slice(&rows);
        g_values.extend_from_slice(&g);
    }
    if let Some((index, &value)) = g_values.iter().enumerate().find(|(_, g)| !g.is_finite()) {
        return Err(RboError::TaintedSample { index, value });
    }
    let indicator: Vec<bool> = g_values.iter().map(|&g| g < 0.0).collect();
    let failures = indicator.iter().filter(|&&i| i).count();
    let p_hat = failures as f64 / n as f64;
    Ok(ReliabilityEvaluation {
        center: x.to_vec(),
        samples: Samples::from_rows(z_dim, data),
        g_values,
        indicator,
        p_hat,
        std_err: binomial_std_err(p_hat, n),
        n,
    })
}

/// Plain Monte Carlo estimate `(p_hat, std_err)` without retaining samples.
/// Draws exactly the samples `full_evaluation` would draw from the same
/// generator state, and counts as a full evaluation.
pub fn estimate_probability(
    problem: &RboProblem,
    x: &[f64],
    n: usize,
    rng: &mut dyn RngCore,
    counters: &EvalCounters,
) -> Result<(f64, f64)> {
    check_design(problem, x, n)?;
    let seed = rng.next_u64();
    let z_dim = problem.dist.z_dim();
    let chunks = map_sample_chunks(problem.dist.as_ref(), x, n, seed, |start, rows| {
        let mut failures = 0usize;
        for (i, z) in rows.chunks_exact(z_dim).enumerate() {
            let g = problem.limit.eval(z);
            if !g.is_finite() {
                return Err(RboError::TaintedSample {
                    index: start + i,
                    value: g,
                });
            }
            failures += usize::from(g < 0.0);
        }
        Ok(failures)
    });
    counters.record_full(n as u64);
    let mut failures = 0;
    for c in chunks {
        failures += c?;
    }
    let p_hat = failures as f64 / n as f64;
    Ok((p_hat, binomial_std_err(p_hat, n)))
}

/// Estimate P(x) by reweighting the samples of `eval` with
/// r(z) = exp(ln q(z; x) − ln q(z; x_c)).
pub fn reweighted_evaluation(
    eval: &ReliabilityEvaluation,
    dist: &dyn ParametricDistribution,
    x: &[f64],
    counters: &EvalCounters,
) -> Result<ReweightedEstimate> {
    if x.len() != eval.center.len() {
        return Err(RboError::InvalidParameter(format!(
            "design vector has dimension {}, evaluation centre has {}",
            x.len(),
            eval.center.len()
        )));
    }
    if eval.samples.z_dim() != dist.z_dim() {
        return Err(RboError::InvalidParameter(
            "evaluation was produced under a different distribution".into(),
        ));
    }
    let center = &eval.center;
    let z_dim = dist.z_dim();
    let weights: Vec<f64> = eval
        .samples
        .as_slice()
        .par_chunks(CHUNK_ROWS * z_dim)
        .flat_map_iter(|block| {
            let mut out = vec![0.0; block.len() / z_dim];
            dist.log_ratio_rows(block, x, center, &mut out);
            out.into_iter().map(f64::exp)
        })
        .collect();
    counters.record_reweighted();

    let n = eval.n;
    let nf = n as f64;
    let (mut sum_w, mut sum_w2, mut sum_iw, mut sum_iw2) = (0.0, 0.0, 0.0, 0.0);
    let (mut min, mut max) = (f64::INFINITY, f64::NEG_INFINITY);
    for (&w, &failed) in weights.iter().zip(&eval.indicator) {
        sum_w += w;
        sum_w2 += w * w;
        min = min.min(w);
        max = max.max(w);
        if failed {
            sum_iw += w;
            sum_iw2 += w * w;
        }
    }
    let p_hat = sum_iw / nf;
    let var = if n > 1 {
        ((sum_iw2 - nf * p_hat * p_hat) / (nf - 1.0)).max(0.0)
    } else {
        0.0
    };
    let ess = if sum_w2 > 0.0 {
        sum_w * sum_w / sum_w2
    } else {
        0.0
    };
    let degenerate = ess < ESS_FLOOR_FRACTION * nf;
    if degenerate {
        log::warn!(
            "degenerate reweighting at {x:?}: effective sample size {ess:.1} of {n} (centre {center:?})"
        );
    }
    Ok(ReweightedEstimate {
        x: x.to_vec(),
        p_hat,
        std_err: (var / nf).sqrt(),
        ess,
        weights: WeightSummary {
            min,
            max,
            mean: sum_w / nf,
        },
        degenerate,
        n,
    })
}

/// Log-constraint c = ln(max(p, 0.5/n)) − ln θ. The half-count floor keeps
/// zero-failure estimates finite.
pub fn log_constraint(p_hat: f64, theta: f64, n: usize) -> f64 {
    let floor = 0.5 / n.max(1) as f64;
    p_hat.max(floor).ln() - theta.ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{make_gaussian_family, AffineMap, CostFunction, DesignSpace, LimitState};
    use std::sync::Arc;

    fn shifted_normal(limit: LimitState) -> RboProblem {
        let dist = make_gaussian_family(AffineMap::selecting(vec![0.0], &[0]), vec![1.0]).unwrap();
        RboProblem::new(
            "shift",
            DesignSpace::unbounded(1),
            CostFunction::new(|x| x[0]),
            Arc::new(dist),
            limit,
            0.1,
        )
        .unwrap()
    }

    #[test]
    fn always_failing_limit_state() {
        let p = shifted_normal(LimitState::new(|_| -1.0));
        let c = EvalCounters::new();
        let e = full_evaluation(&p, &[0.0], 500, &mut ChaCha8Rng::seed_from_u64(1), &c).unwrap();
        assert_eq!(e.p_hat, 1.0);
        assert_eq!(e.std_err, 0.0);
        assert_eq!(c.snapshot().g_calls, 500);
    }

    #[test]
    fn never_failing_limit_state() {
        let p = shifted_normal(LimitState::new(|_| 1.0));
        let c = EvalCounters::new();
        let e = full_evaluation(&p, &[0.0], 500, &mut ChaCha8Rng::seed_from_u64(1), &c).unwrap();
        assert_eq!(e.p_hat, 0.0);
        assert!(e.indicator.iter().all(|i| !i));
    }

    #[test]
    fn indicator_follows_strict_sign_of_g() {
        let p = shifted_normal(LimitState::new(|z| z[0]));
        let c = EvalCounters::new();
        let e = full_evaluation(&p, &[0.0], 10_000, &mut ChaCha8Rng::seed_from_u64(5), &c).unwrap();
        for (g, i) in e.g_values.iter().zip(&e.indicator) {
            assert_eq!(*i, *g < 0.0);
        }
        assert_eq!(e.p_hat, e.failures() as f64 / 10_000.0);
        let se = (e.p_hat * (1.0 - e.p_hat) / 10_000.0).sqrt();
        assert!((e.std_err - se).abs() < 1e-15);
    }

    #[test]
    fn non_finite_limit_state_is_reported_with_index() {
        let p = shifted_normal(LimitState::new(|z| if z[0] > 2.0 { f64::NAN } else { 1.0 }));
        let c = EvalCounters::new();
        let err = full_evaluation(&p, &[0.0], 20_000, &mut ChaCha8Rng::seed_from_u64(2), &c)
            .unwrap_err();
        let RboError::TaintedSample { index, .. } = err else {
            panic!("unexpected {err:?}")
        };
        // Same samples drawn again: the first offending row is at `index`.
        let d = p.dist.as_ref();
        let seed = ChaCha8Rng::seed_from_u64(2).next_u64();
        let rows: Vec<f64> = map_sample_chunks(d, &[0.0], 20_000, seed, |_, r| r.to_vec())
            .concat();
        let first = rows.iter().position(|&z| z > 2.0).unwrap();
        assert_eq!(index, first);
    }

    #[test]
    fn zero_samples_is_a_precondition_error() {
        let p = shifted_normal(LimitState::new(|_| 1.0));
        let r = full_evaluation(&p, &[0.0], 0, &mut ChaCha8Rng::seed_from_u64(1), &EvalCounters::new());
        assert!(matches!(r, Err(RboError::Precondition(_))));
    }

    #[test]
    fn streaming_estimate_matches_full_evaluation() {
        let p = shifted_normal(LimitState::new(|z| z[0] + 1.0));
        let c = EvalCounters::new();
        let e = full_evaluation(&p, &[0.0], 9000, &mut ChaCha8Rng::seed_from_u64(8), &c).unwrap();
        let (ph, se) =
            estimate_probability(&p, &[0.0], 9000, &mut ChaCha8Rng::seed_from_u64(8), &c).unwrap();
        assert_eq!(ph, e.p_hat);
        assert_eq!(se, e.std_err);
    }

    #[test]
    fn reweighting_at_the_centre_is_exact() {
        let p = shifted_normal(LimitState::new(|z| 1.0 - z[0]));
        let c = EvalCounters::new();
        let e = full_evaluation(&p, &[0.3], 20_000, &mut ChaCha8Rng::seed_from_u64(3), &c).unwrap();
        let before = c.snapshot();
        let r = reweighted_evaluation(&e, p.dist.as_ref(), &[0.3], &c).unwrap();
        assert_eq!(r.p_hat.to_bits(), e.p_hat.to_bits());
        assert_eq!(r.weights.min, 1.0);
        assert_eq!(r.weights.max, 1.0);
        assert!((r.ess - 20_000.0).abs() < 1e-6);
        let after = c.snapshot();
        assert_eq!(after.g_calls, before.g_calls);
        assert_eq!(after.full_evals, before.full_evals);
        assert_eq!(after.reweighted_evals, before.reweighted_evals + 1);
    }

    #[test]
    fn design_free_coordinate_keeps_unit_weights() {
        let map = AffineMap {
            offset: vec![0.0],
            linear: vec![vec![1.0, 0.0]],
        };
        let dist = make_gaussian_family(map, vec![1.0]).unwrap();
        let p = RboProblem::new(
            "partial",
            DesignSpace::unbounded(2),
            CostFunction::new(|x| x[0]),
            Arc::new(dist),
            LimitState::new(|z| 1.0 - z[0]),
            0.1,
        )
        .unwrap();
        let c = EvalCounters::new();
        let e = full_evaluation(&p, &[0.0, 0.0], 5000, &mut ChaCha8Rng::seed_from_u64(3), &c)
            .unwrap();
        let r = reweighted_evaluation(&e, p.dist.as_ref(), &[0.0, 3.7], &c).unwrap();
        assert_eq!((r.weights.min, r.weights.max), (1.0, 1.0));
        assert_eq!(r.p_hat, e.p_hat);
    }

    #[test]
    fn log_density_ratio_matches_closed_form_likelihood_ratio() {
        let map = AffineMap::selecting(vec![29e6, 500.0, 500.0, 0.0, 0.0], &[3, 4]);
        let sigma = vec![1.45e6, 25.0, 25.0, 0.1, 0.1];
        let dist = make_gaussian_family(map, sigma.clone()).unwrap();
        let (xc, x) = ([2.0, 3.0], [2.07, 2.95]);
        let s = dist.sample(&xc, 2000, &mut ChaCha8Rng::seed_from_u64(17));
        let (mc, mx) = (dist.mean(&xc), dist.mean(&x));
        for z in s.rows() {
            let ratio = (dist.log_density(z, &x) - dist.log_density(z, &xc)).exp();
            let closed: f64 = (0..5)
                .map(|i| {
                    let a = (z[i] - mc[i]) / sigma[i];
                    let b = (z[i] - mx[i]) / sigma[i];
                    (-0.5 * (b * b - a * a)).exp()
                })
                .product();
            assert!((ratio - closed).abs() <= 1e-10 * closed);
        }
    }

    #[test]
    fn far_reweighting_is_flagged_degenerate() {
        let p = shifted_normal(LimitState::new(|z| 1.0 - z[0]));
        let c = EvalCounters::new();
        let e = full_evaluation(&p, &[0.0], 5000, &mut ChaCha8Rng::seed_from_u64(3), &c).unwrap();
        assert!(!reweighted_evaluation(&e, p.dist.as_ref(), &[0.2], &c).unwrap().degenerate);
        assert!(reweighted_evaluation(&e, p.dist.as_ref(), &[3.0], &c).unwrap().degenerate);
    }

    #[test]
    fn log_constraint_values() {
        assert_eq!(log_constraint(0.1, 0.1, 100), 0.0);
        // ln(5e-5) − ln(0.1) = ln(5e-4)
        assert!((log_constraint(0.0, 0.1, 10_000) - (-7.600_902_459_542_082)).abs() < 1e-12);
        assert!((log_constraint(0.2, 0.1, 100) - std::f64::consts::LN_2).abs() < 1e-15);
    }

    proptest::proptest! {
        #[test]
        fn log_constraint_is_monotone(a in 0.0f64..1.0, b in 0.0f64..1.0, n in 1usize..100_000) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            proptest::prop_assert!(log_constraint(lo, 0.1, n) <= log_constraint(hi, 0.1, n));
        }
    }
}
