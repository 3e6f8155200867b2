//! Problem data: design space, cost, parametric uncertainty and limit state.

use std::fmt;
use std::sync::Arc;

use rand::{Rng, RngCore};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{RboError, Result};

/// Box-shaped design space. Bounds may be infinite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignSpace {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl DesignSpace {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.is_empty() {
            return Err(RboError::InvalidParameter(
                "design space needs at least one dimension".into(),
            ));
        }
        if lower.len() != upper.len() {
            return Err(RboError::InvalidParameter(format!(
                "bound lengths differ ({} vs {})",
                lower.len(),
                upper.len()
            )));
        }
        for (i, (l, u)) in lower.iter().zip(&upper).enumerate() {
            if l.is_nan() || u.is_nan() || l >= u {
                return Err(RboError::InvalidParameter(format!(
                    "bounds for coordinate {i} must satisfy lower < upper, got [{l}, {u}]"
                )));
            }
        }
        Ok(Self { lower, upper })
    }

    pub fn unbounded(dim: usize) -> Self {
        Self {
            lower: vec![f64::NEG_INFINITY; dim],
            upper: vec![f64::INFINITY; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        self.check(x).is_ok()
    }

    /// Errors with the first offending coordinate.
    pub fn check(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(RboError::InvalidParameter(format!(
                "design vector has dimension {}, expected {}",
                x.len(),
                self.dim()
            )));
        }
        for (index, &value) in x.iter().enumerate() {
            let (lower, upper) = (self.lower[index], self.upper[index]);
            if !(value >= lower && value <= upper) {
                return Err(RboError::Domain {
                    index,
                    value,
                    lower,
                    upper,
                });
            }
        }
        Ok(())
    }

    pub fn clamp(&self, x: &mut [f64]) {
        for ((v, l), u) in x.iter_mut().zip(&self.lower).zip(&self.upper) {
            *v = v.clamp(*l, *u);
        }
    }
}

type ScalarFn = dyn Fn(&[f64]) -> f64 + Send + Sync;
type VectorFn = dyn Fn(&[f64]) -> Vec<f64> + Send + Sync;

/// Deterministic cost f(x), optionally with an analytic gradient.
#[derive(Clone)]
pub struct CostFunction {
    eval: Arc<ScalarFn>,
    gradient: Option<Arc<VectorFn>>,
}

impl CostFunction {
    pub fn new(eval: impl Fn(&[f64]) -> f64 + Send + Sync + 'static) -> Self {
        Self {
            eval: Arc::new(eval),
            gradient: None,
        }
    }

    pub fn with_gradient(
        mut self,
        gradient: impl Fn(&[f64]) -> Vec<f64> + Send + Sync + 'static,
    ) -> Self {
        self.gradient = Some(Arc::new(gradient));
        self
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        (self.eval)(x)
    }

    pub fn has_gradient(&self) -> bool {
        self.gradient.is_some()
    }

    /// Analytic gradient when available, central differences otherwise
    /// (step 1e-6·(1+|x_i|)).
    pub fn gradient(&self, x: &[f64]) -> Vec<f64> {
        if let Some(g) = &self.gradient {
            return g(x);
        }
        let mut probe = x.to_vec();
        (0..x.len())
            .map(|i| {
                let h = 1e-6 * (1.0 + x[i].abs());
                probe[i] = x[i] + h;
                let fp = self.eval(&probe);
                probe[i] = x[i] - h;
                let fm = self.eval(&probe);
                probe[i] = x[i];
                (fp - fm) / (2.0 * h)
            })
            .collect()
    }
}

impl fmt::Debug for CostFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CostFunction")
            .field("analytic_gradient", &self.gradient.is_some())
            .finish()
    }
}

/// Limit state g(z). Failure is g(z) < 0. It never sees the design vector.
#[derive(Clone)]
pub struct LimitState {
    eval: Arc<ScalarFn>,
}

impl LimitState {
    pub fn new(eval: impl Fn(&[f64]) -> f64 + Send + Sync + 'static) -> Self {
        Self {
            eval: Arc::new(eval),
        }
    }

    pub fn eval(&self, z: &[f64]) -> f64 {
        (self.eval)(z)
    }
}

impl fmt::Debug for LimitState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("LimitState")
    }
}

/// Row-major matrix of random-variable samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Samples {
    z_dim: usize,
    data: Vec<f64>,
}

impl Samples {
    pub fn from_rows(z_dim: usize, data: Vec<f64>) -> Self {
        assert!(z_dim > 0 && data.len() % z_dim == 0);
        Self { z_dim, data }
    }

    pub fn z_dim(&self) -> usize {
        self.z_dim
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.z_dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.z_dim..(i + 1) * self.z_dim]
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, f64> {
        self.data.chunks_exact(self.z_dim)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

/// A family of densities q(z; x) over the random variables, indexed by the
/// design vector.
pub trait ParametricDistribution: Send + Sync + fmt::Debug {
    fn z_dim(&self) -> usize;

    fn design_dim(&self) -> usize;

    /// Fill `out` (a whole number of rows) with independent draws from q(·; x).
    fn sample_rows(&self, x: &[f64], rng: &mut dyn RngCore, out: &mut [f64]);

    fn log_density(&self, z: &[f64], x: &[f64]) -> f64;

    /// Gradient of `log_density` with respect to the design vector.
    fn score(&self, z: &[f64], x: &[f64]) -> Vec<f64>;

    /// ln q(z; x) − ln q(z; x_c) for each row of `rows`, written to `out`.
    fn log_ratio_rows(&self, rows: &[f64], x: &[f64], x_c: &[f64], out: &mut [f64]) {
        for (z, o) in rows.chunks_exact(self.z_dim()).zip(out.iter_mut()) {
            *o = self.log_density(z, x) - self.log_density(z, x_c);
        }
    }

    fn sample(&self, x: &[f64], n: usize, rng: &mut dyn RngCore) -> Samples {
        let mut data = vec![0.0; n * self.z_dim()];
        self.sample_rows(x, rng, &mut data);
        Samples::from_rows(self.z_dim(), data)
    }
}

/// Affine map from design vectors to the means of the random variables:
/// `mean = offset + linear · x`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineMap {
    pub offset: Vec<f64>,
    /// `offset.len()` rows of length `design_dim`.
    pub linear: Vec<Vec<f64>>,
}

impl AffineMap {
    /// Design coordinate `j` drives the mean of variable `targets[j]` with unit
    /// slope; all other means are fixed at `offset`.
    pub fn selecting(offset: Vec<f64>, targets: &[usize]) -> Self {
        let linear = (0..offset.len())
            .map(|i| targets.iter().map(|&t| if t == i { 1.0 } else { 0.0 }).collect())
            .collect();
        Self { offset, linear }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.offset
            .iter()
            .zip(&self.linear)
            .map(|(o, row)| o + row.iter().zip(x).map(|(a, xi)| a * xi).sum::<f64>())
            .collect()
    }
}

/// Independent Gaussian components with design-dependent means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianFamily {
    mean_map: AffineMap,
    sigma: Vec<f64>,
    design_dim: usize,
}

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// Build an independent-Gaussian family with means given by `mean_map`.
pub fn make_gaussian_family(mean_map: AffineMap, sigma: Vec<f64>) -> Result<GaussianFamily> {
    if sigma.is_empty() || sigma.len() != mean_map.offset.len() {
        return Err(RboError::InvalidParameter(format!(
            "sigma has {} entries but the mean map produces {}",
            sigma.len(),
            mean_map.offset.len()
        )));
    }
    if let Some((i, s)) = sigma
        .iter()
        .enumerate()
        .find(|(_, s)| !(s.is_finite() && **s > 0.0))
    {
        return Err(RboError::InvalidParameter(format!(
            "sigma[{i}] = {s} must be positive and finite"
        )));
    }
    let design_dim = mean_map.linear.first().map_or(0, Vec::len);
    if design_dim == 0 || mean_map.linear.iter().any(|row| row.len() != design_dim) {
        return Err(RboError::InvalidParameter(
            "mean map rows must all have the design dimension".into(),
        ));
    }
    Ok(GaussianFamily {
        mean_map,
        sigma,
        design_dim,
    })
}

impl GaussianFamily {
    pub fn mean(&self, x: &[f64]) -> Vec<f64> {
        self.mean_map.apply(x)
    }

    pub fn sigma(&self) -> &[f64] {
        &self.sigma
    }
}

impl ParametricDistribution for GaussianFamily {
    fn z_dim(&self) -> usize {
        self.sigma.len()
    }

    fn design_dim(&self) -> usize {
        self.design_dim
    }

    fn sample_rows(&self, x: &[f64], rng: &mut dyn RngCore, out: &mut [f64]) {
        let mean = self.mean(x);
        for row in out.chunks_exact_mut(self.sigma.len()) {
            for ((v, m), s) in row.iter_mut().zip(&mean).zip(&self.sigma) {
                let xi: f64 = rng.sample(StandardNormal);
                *v = m + s * xi;
            }
        }
    }

    fn log_density(&self, z: &[f64], x: &[f64]) -> f64 {
        self.mean(x)
            .iter()
            .zip(z)
            .zip(&self.sigma)
            .map(|((m, zi), s)| {
                let u = (zi - m) / s;
                -0.5 * u * u - s.ln() - HALF_LN_2PI
            })
            .sum()
    }

    fn log_ratio_rows(&self, rows: &[f64], x: &[f64], x_c: &[f64], out: &mut [f64]) {
        let (m, m_c) = (self.mean(x), self.mean(x_c));
        // Components whose mean does not move contribute nothing.
        let moving: Vec<(usize, f64, f64, f64)> = (0..m.len())
            .filter(|&i| m[i] != m_c[i])
            .map(|i| (i, m[i], m_c[i], 0.5 / (self.sigma[i] * self.sigma[i])))
            .collect();
        for (z, o) in rows.chunks_exact(self.sigma.len()).zip(out.iter_mut()) {
            *o = moving
                .iter()
                .map(|&(i, a, b, h)| h * ((z[i] - b) * (z[i] - b) - (z[i] - a) * (z[i] - a)))
                .sum();
        }
    }

    fn score(&self, z: &[f64], x: &[f64]) -> Vec<f64> {
        let mean = self.mean(x);
        let mut grad = vec![0.0; self.design_dim];
        for (i, row) in self.mean_map.linear.iter().enumerate() {
            let w = (z[i] - mean[i]) / (self.sigma[i] * self.sigma[i]);
            for (g, a) in grad.iter_mut().zip(row) {
                *g += a * w;
            }
        }
        grad
    }
}

/// A reliability-constrained design problem: minimize f(x) over the design
/// space subject to ln P(x) − ln θ ≤ 0.
#[derive(Debug, Clone)]
pub struct RboProblem {
    pub name: String,
    pub space: DesignSpace,
    pub cost: CostFunction,
    pub dist: Arc<dyn ParametricDistribution>,
    pub limit: LimitState,
    pub theta: f64,
}

impl RboProblem {
    pub fn new(
        name: impl Into<String>,
        space: DesignSpace,
        cost: CostFunction,
        dist: Arc<dyn ParametricDistribution>,
        limit: LimitState,
        theta: f64,
    ) -> Result<Self> {
        if !(theta > 0.0 && theta < 1.0) {
            return Err(RboError::InvalidParameter(format!(
                "theta = {theta} must lie in (0, 1)"
            )));
        }
        if dist.design_dim() != space.dim() {
            return Err(RboError::InvalidParameter(format!(
                "distribution expects {}-dimensional designs, space has {}",
                dist.design_dim(),
                space.dim()
            )));
        }
        Ok(Self {
            name: name.into(),
            space,
            cost,
            dist,
            limit,
            theta,
        })
    }

    pub fn dim(&self) -> usize {
        self.space.dim()
    }
}

/// f(x), rejecting designs outside the space.
pub fn cost_eval(problem: &RboProblem, x: &[f64]) -> Result<f64> {
    problem.space.check(x)?;
    Ok(problem.cost.eval(x))
}
