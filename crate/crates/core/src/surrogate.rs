//! Quadratic regression surrogates of the log-constraint, certified by
//! leave-one-out cross-validation inside a trust region.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{RboError, Result};
use crate::model::{DesignSpace, RboProblem};
use crate::reliability::{
    full_evaluation, log_constraint, reweighted_evaluation, EvalCounters, ReliabilityEvaluation,
};
use crate::streams::RunStreams;

/// Number of quadratic monomials in `d` variables: (d+1)(d+2)/2.
pub fn basis_len(d: usize) -> usize {
    (d + 1) * (d + 2) / 2
}

/// Monomials in graded lexicographic order: 1, u_1..u_d, u_1², u_1u_2, …,
/// u_1u_d, u_2², …, u_d².
pub fn basis_values(u: &[f64], out: &mut [f64]) {
    let d = u.len();
    out[0] = 1.0;
    out[1..=d].copy_from_slice(u);
    let mut k = d + 1;
    for i in 0..d {
        for j in i..d {
            out[k] = u[i] * u[j];
            k += 1;
        }
    }
}

/// Quadratic model s(x) of the log-constraint around `center`.
///
/// Internally the model is held in the scaled coordinates u = (x − center) /
/// radius used for fitting; [`QuadraticSurrogate::coeffs`] expands it in the
/// raw monomial basis of x.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticSurrogate {
    center: Vec<f64>,
    radius: f64,
    scaled: Vec<f64>,
    pub loo_error: f64,
}

/// Serializable view of a surrogate for traces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurrogateRecord {
    pub center: Vec<f64>,
    pub radius: f64,
    pub coeffs: Vec<f64>,
    pub loo_error: f64,
}

impl QuadraticSurrogate {
    pub fn from_scaled(center: Vec<f64>, radius: f64, scaled: Vec<f64>, loo_error: f64) -> Self {
        assert_eq!(scaled.len(), basis_len(center.len()));
        Self {
            center,
            radius,
            scaled,
            loo_error,
        }
    }

    /// A surrogate equal to `value` everywhere.
    pub fn constant(center: Vec<f64>, radius: f64, value: f64) -> Self {
        let mut scaled = vec![0.0; basis_len(center.len())];
        scaled[0] = value;
        Self::from_scaled(center, radius, scaled, 0.0)
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    pub fn center(&self) -> &[f64] {
        &self.center
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn scaled_coeffs(&self) -> &[f64] {
        &self.scaled
    }

    pub fn to_scaled(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.center)
            .map(|(xi, ci)| (xi - ci) / self.radius)
            .collect()
    }

    pub fn eval_scaled(&self, u: &[f64]) -> f64 {
        let mut b = vec![0.0; self.scaled.len()];
        basis_values(u, &mut b);
        b.iter().zip(&self.scaled).map(|(b, a)| b * a).sum()
    }

    /// Gradient with respect to the scaled coordinates.
    pub fn gradient_scaled(&self, u: &[f64]) -> Vec<f64> {
        let d = u.len();
        let mut g = self.scaled[1..=d].to_vec();
        let mut k = d + 1;
        for i in 0..d {
            for j in i..d {
                let a = self.scaled[k];
                if i == j {
                    g[i] += 2.0 * a * u[i];
                } else {
                    g[i] += a * u[j];
                    g[j] += a * u[i];
                }
                k += 1;
            }
        }
        g
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.eval_scaled(&self.to_scaled(x))
    }

    pub fn gradient(&self, x: &[f64]) -> Vec<f64> {
        self.gradient_scaled(&self.to_scaled(x))
            .into_iter()
            .map(|g| g / self.radius)
            .collect()
    }

    /// Coefficients over the raw monomials of x, same ordering as
    /// [`basis_values`].
    pub fn coeffs(&self) -> Vec<f64> {
        let d = self.dim();
        let (c, r) = (&self.center, self.radius);
        let alpha = self.scaled[0];
        let beta = &self.scaled[1..=d];
        // Symmetric H with s = α + βᵀu + uᵀHu.
        let mut h = vec![vec![0.0; d]; d];
        let mut k = d + 1;
        for i in 0..d {
            for j in i..d {
                if i == j {
                    h[i][i] = self.scaled[k];
                } else {
                    h[i][j] = 0.5 * self.scaled[k];
                    h[j][i] = h[i][j];
                }
                k += 1;
            }
        }
        let hc: Vec<f64> = h
            .iter()
            .map(|row| row.iter().zip(c).map(|(a, b)| a * b).sum())
            .collect();
        let r2 = r * r;
        let mut out = Vec::with_capacity(basis_len(d));
        out.push(
            alpha - beta.iter().zip(c).map(|(b, ci)| b * ci).sum::<f64>() / r
                + hc.iter().zip(c).map(|(a, b)| a * b).sum::<f64>() / r2,
        );
        for i in 0..d {
            out.push(beta[i] / r - 2.0 * hc[i] / r2);
        }
        for i in 0..d {
            for j in i..d {
                out.push(if i == j { h[i][i] / r2 } else { 2.0 * h[i][j] / r2 });
            }
        }
        out
    }

    pub fn record(&self) -> SurrogateRecord {
        SurrogateRecord {
            center: self.center.clone(),
            radius: self.radius,
            coeffs: self.coeffs(),
            loo_error: self.loo_error,
        }
    }
}

/// Regression data {(x_m, y_m)} gathered in the ball O(center, radius).
#[derive(Debug, Clone, PartialEq)]
pub struct DesignSample {
    pub center: Vec<f64>,
    pub radius: f64,
    pub points: Vec<Vec<f64>>,
    pub values: Vec<f64>,
}

impl DesignSample {
    pub fn new(
        center: Vec<f64>,
        radius: f64,
        points: Vec<Vec<f64>>,
        values: Vec<f64>,
    ) -> Result<Self> {
        if !(radius > 0.0 && radius.is_finite()) {
            return Err(RboError::Precondition(format!("radius {radius} must be positive")));
        }
        if points.len() != values.len() {
            return Err(RboError::InvalidParameter(format!(
                "{} points but {} values",
                points.len(),
                values.len()
            )));
        }
        let d = center.len();
        for p in &points {
            if p.len() != d {
                return Err(RboError::InvalidParameter("point dimension mismatch".into()));
            }
            if dist(p, &center) > radius * (1.0 + 1e-12) {
                return Err(RboError::Precondition(format!(
                    "point {p:?} lies outside the ball of radius {radius}"
                )));
            }
        }
        Ok(Self {
            center,
            radius,
            points,
            values,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    fn design_matrix(&self, skip: Option<usize>) -> DMatrix<f64> {
        let d = self.center.len();
        let l = basis_len(d);
        let rows: Vec<usize> = (0..self.len()).filter(|&m| Some(m) != skip).collect();
        let mut a = DMatrix::zeros(rows.len(), l);
        let mut b = vec![0.0; l];
        for (r, &m) in rows.iter().enumerate() {
            let u: Vec<f64> = self.points[m]
                .iter()
                .zip(&self.center)
                .map(|(x, c)| (x - c) / self.radius)
                .collect();
            basis_values(&u, &mut b);
            for (k, v) in b.iter().enumerate() {
                a[(r, k)] = *v;
            }
        }
        a
    }

    fn solve(&self, skip: Option<usize>) -> Result<Vec<f64>> {
        let a = self.design_matrix(skip);
        let y = DVector::from_iterator(
            a.nrows(),
            (0..self.len())
                .filter(|&m| Some(m) != skip)
                .map(|m| self.values[m]),
        );
        least_squares(a, y)
    }
}

const RANK_TOL: f64 = 1e-10;

fn least_squares(a: DMatrix<f64>, y: DVector<f64>) -> Result<Vec<f64>> {
    let l = a.ncols();
    let svd = a.svd(true, true);
    let smax = svd.singular_values.max();
    let tol = RANK_TOL * smax.max(f64::MIN_POSITIVE);
    let rank = svd.singular_values.iter().filter(|&&s| s > tol).count();
    if rank < l {
        return Err(RboError::Poisedness { rank, required: l });
    }
    let coef = svd
        .solve(&y, tol)
        .map_err(|e| RboError::InvalidParameter(e.to_string()))?;
    Ok(coef.iter().copied().collect())
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Least-squares quadratic through `sample`, fitted in coordinates scaled to
/// the unit ball.
pub fn fit_quadratic(sample: &DesignSample) -> Result<QuadraticSurrogate> {
    let l = basis_len(sample.center.len());
    if sample.len() < l {
        return Err(RboError::Precondition(format!(
            "{} points cannot determine {l} quadratic coefficients",
            sample.len()
        )));
    }
    let scaled = sample.solve(None)?;
    Ok(QuadraticSurrogate::from_scaled(
        sample.center.clone(),
        sample.radius,
        scaled,
        f64::NAN,
    ))
}

/// Largest leave-one-out prediction error, max_m |y_m − s^m(x_m)|.
pub fn loo_error(sample: &DesignSample) -> Result<f64> {
    let l = basis_len(sample.center.len());
    if sample.len() < l + 1 {
        return Err(RboError::Precondition(format!(
            "leave-one-out needs at least {} points, got {}",
            l + 1,
            sample.len()
        )));
    }
    let mut worst: f64 = 0.0;
    for m in 0..sample.len() {
        let coef = sample.solve(Some(m))?;
        let s = QuadraticSurrogate::from_scaled(sample.center.clone(), sample.radius, coef, 0.0);
        worst = worst.max((sample.values[m] - s.eval(&sample.points[m])).abs());
    }
    Ok(worst)
}

/// Uniform points in the ball O(center, radius) intersected with the box, by
/// rejection.
pub fn sample_ball(
    center: &[f64],
    radius: f64,
    count: usize,
    space: &DesignSpace,
    rng: &mut dyn RngCore,
) -> Result<Vec<Vec<f64>>> {
    if !(radius > 0.0 && radius.is_finite()) {
        return Err(RboError::Precondition(format!("radius {radius} must be positive")));
    }
    if count == 0 {
        return Err(RboError::Precondition("point count must be at least 1".into()));
    }
    let d = center.len();
    if d != space.dim() {
        return Err(RboError::InvalidParameter("centre dimension mismatch".into()));
    }
    let mut nearest = center.to_vec();
    space.clamp(&mut nearest);
    if dist(&nearest, center) > radius {
        return Err(RboError::InfeasibleRegion(format!(
            "ball of radius {radius} around {center:?} misses the design space"
        )));
    }
    let max_attempts = 10_000 + 1_000 * count;
    let mut out = Vec::with_capacity(count);
    let mut dir = vec![0.0; d];
    for _ in 0..max_attempts {
        let norm = loop {
            for v in dir.iter_mut() {
                *v = rng.sample(StandardNormal);
            }
            let n = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > 0.0 {
                break n;
            }
        };
        let u: f64 = rng.random();
        let r = radius * u.powf(1.0 / d as f64);
        let p: Vec<f64> = center
            .iter()
            .zip(&dir)
            .map(|(c, v)| c + r * v / norm)
            .collect();
        if space.contains(&p) && dist(&p, center) <= radius {
            out.push(p);
            if out.len() == count {
                return Ok(out);
            }
        }
    }
    Err(RboError::InfeasibleRegion(format!(
        "rejection sampling found only {} of {count} points in the ball/box intersection",
        out.len()
    )))
}

/// Settings of the certification loop.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CertifySettings {
    /// Required LOO error bound ε*.
    pub eps_star: f64,
    /// Contraction factor applied when certification fails.
    pub omega: f64,
    /// Regression points per pass, centre included.
    pub m: usize,
    /// Radius below which certification gives up.
    pub rho_min_guard: f64,
    /// Fresh redraws allowed when the ball points are not poised.
    pub poisedness_retries: usize,
}

impl CertifySettings {
    pub fn validate(&self, d: usize) -> Result<()> {
        if !(self.eps_star > 0.0) {
            return Err(RboError::InvalidParameter(format!(
                "eps_star = {} must be positive",
                self.eps_star
            )));
        }
        if !(self.omega > 0.0 && self.omega < 1.0) {
            return Err(RboError::InvalidParameter(format!(
                "contraction factor {} must lie in (0, 1)",
                self.omega
            )));
        }
        if self.m <= basis_len(d) {
            return Err(RboError::Precondition(format!(
                "m = {} must exceed the {} quadratic coefficients",
                self.m,
                basis_len(d)
            )));
        }
        Ok(())
    }
}

/// Outcome of a successful certification loop.
#[derive(Debug, Clone)]
pub struct Certified {
    pub surrogate: QuadraticSurrogate,
    pub radius: f64,
    pub sample: DesignSample,
    pub passes: usize,
}

fn poised(center: &[f64], radius: f64, points: &[Vec<f64>]) -> bool {
    let probe = DesignSample {
        center: center.to_vec(),
        radius,
        points: points.to_vec(),
        values: vec![0.0; points.len()],
    };
    (0..points.len()).all(|m| probe.solve(Some(m)).is_ok())
}

/// Certification loop: draw m−1 ball points plus the centre, obtain their
/// constraint values from `values`, fit, and contract the radius by `omega`
/// until the LOO error drops below `eps_star`.
pub fn certify<F>(
    x_c: &[f64],
    rho_max: f64,
    settings: &CertifySettings,
    space: &DesignSpace,
    rng: &mut dyn RngCore,
    mut values: F,
) -> Result<Certified>
where
    F: FnMut(&[Vec<f64>]) -> Result<Vec<f64>>,
{
    settings.validate(x_c.len())?;
    if !(rho_max > 0.0) {
        return Err(RboError::Precondition(format!("rho_max = {rho_max} must be positive")));
    }
    let mut rho = rho_max;
    let mut passes = 0;
    loop {
        let mut points = None;
        for _ in 0..=settings.poisedness_retries {
            let mut pts = sample_ball(x_c, rho, settings.m - 1, space, rng)?;
            pts.push(x_c.to_vec());
            if poised(x_c, rho, &pts) {
                points = Some(pts);
                break;
            }
        }
        let points = points.ok_or(RboError::Poisedness {
            rank: 0,
            required: basis_len(x_c.len()),
        })?;
        passes += 1;
        let ys = values(&points)?;
        let sample = DesignSample::new(x_c.to_vec(), rho, points, ys)?;
        let loo = loo_error(&sample)?;
        if loo < settings.eps_star {
            let mut surrogate = fit_quadratic(&sample)?;
            surrogate.loo_error = loo;
            return Ok(Certified {
                surrogate,
                radius: rho,
                sample,
                passes,
            });
        }
        log::debug!("surrogate at radius {rho:.3e} rejected: LOO error {loo:.3e}");
        rho *= settings.omega;
        if rho < settings.rho_min_guard {
            return Err(RboError::SurrogateFailure {
                radius: rho,
                loo_error: loo,
            });
        }
    }
}

/// Result of [`surr_constr`].
#[derive(Debug, Clone)]
pub struct SurrConstrOutput {
    pub surrogate: QuadraticSurrogate,
    pub radius: f64,
    pub evaluation: Arc<ReliabilityEvaluation>,
    pub passes: usize,
    /// Whether this call ran the full evaluation itself (false when a centre
    /// evaluation was handed in).
    pub evaluated_center: bool,
    pub sample: DesignSample,
}

/// Certified surrogate of c(x) = ln P(x) − ln θ around `x_c` from a single
/// full evaluation at `x_c`. Constraint values at the ball points come from
/// reweighting that evaluation's samples. A previous evaluation at the same
/// centre may be passed in, in which case no limit-state calls occur at all.
pub fn surr_constr(
    problem: &RboProblem,
    x_c: &[f64],
    rho_max: f64,
    settings: &CertifySettings,
    n_mc: usize,
    streams: &mut RunStreams,
    counters: &EvalCounters,
    center_eval: Option<Arc<ReliabilityEvaluation>>,
) -> Result<SurrConstrOutput> {
    settings.validate(x_c.len())?;
    let reuse = center_eval.filter(|e| e.center == x_c && e.n == n_mc);
    let evaluated_center = reuse.is_none();
    let evaluation = match reuse {
        Some(e) => e,
        None => Arc::new(full_evaluation(
            problem,
            x_c,
            n_mc,
            &mut streams.sampling(),
            counters,
        )?),
    };
    let theta = problem.theta;
    let dist = problem.dist.as_ref();
    let certified = certify(
        x_c,
        rho_max,
        settings,
        &problem.space,
        &mut streams.ball,
        |points| {
            points
                .iter()
                .map(|p| {
                    let r = reweighted_evaluation(&evaluation, dist, p, counters)?;
                    Ok(log_constraint(r.p_hat, theta, n_mc))
                })
                .collect()
        },
    )?;
    Ok(SurrConstrOutput {
        surrogate: certified.surrogate,
        radius: certified.radius,
        evaluation,
        passes: certified.passes,
        evaluated_center,
        sample: certified.sample,
    })
}

/// Variant of [`surr_constr`] without reweighting: every regression point,
/// centre included, gets its own full evaluation on every pass.
pub fn surr_constr_independent(
    problem: &RboProblem,
    x_c: &[f64],
    rho_max: f64,
    settings: &CertifySettings,
    n_mc: usize,
    streams: &mut RunStreams,
    counters: &EvalCounters,
) -> Result<Certified> {
    let theta = problem.theta;
    let mut ball = streams.ball.clone();
    let out = certify(x_c, rho_max, settings, &problem.space, &mut ball, |points| {
        points
            .iter()
            .map(|p| {
                let e = full_evaluation(problem, p, n_mc, &mut streams.sampling(), counters)?;
                Ok(log_constraint(e.p_hat, theta, n_mc))
            })
            .collect()
    });
    streams.ball = ball;
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample_for(
        f: impl Fn(&[f64]) -> f64,
        center: &[f64],
        radius: f64,
        m: usize,
        seed: u64,
    ) -> DesignSample {
        let space = DesignSpace::unbounded(center.len());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pts = sample_ball(center, radius, m - 1, &space, &mut rng).unwrap();
        pts.push(center.to_vec());
        let ys = pts.iter().map(|p| f(p)).collect();
        DesignSample::new(center.to_vec(), radius, pts, ys).unwrap()
    }

    #[test]
    fn basis_ordering_is_graded_lexicographic() {
        let mut b = vec![0.0; basis_len(3)];
        basis_values(&[2.0, 3.0, 5.0], &mut b);
        assert_eq!(b, vec![1.0, 2.0, 3.0, 5.0, 4.0, 6.0, 10.0, 9.0, 15.0, 25.0]);
        assert_eq!(basis_len(2), 6);
        assert_eq!(basis_len(10), 66);
    }

    #[test]
    fn exact_quadratic_is_recovered() {
        // y = 1 + 2 x1 + 3 x2²; raw coefficients [1, 2, 0, 0, 0, 3].
        let truth = [1.0, 2.0, 0.0, 0.0, 0.0, 3.0];
        let s = sample_for(|x| 1.0 + 2.0 * x[0] + 3.0 * x[1] * x[1], &[0.4, -0.2], 0.7, 20, 1);
        let q = fit_quadratic(&s).unwrap();
        for (a, b) in q.coeffs().iter().zip(truth) {
            assert!((a - b).abs() < 1e-8, "{a} vs {b}");
        }
        for (p, y) in s.points.iter().zip(&s.values) {
            assert!((q.eval(p) - y).abs() <= 1e-10);
        }
    }

    #[test]
    fn constant_data_gives_constant_model() {
        let s = sample_for(|_| 4.0, &[1.0, 1.0], 0.5, 20, 2);
        let c = fit_quadratic(&s).unwrap().coeffs();
        assert!((c[0] - 4.0).abs() < 1e-10);
        assert!(c[1..].iter().all(|v| v.abs() <= 1e-10));
    }

    #[test]
    fn underdetermined_fits_are_rejected() {
        let s = sample_for(|x| x[0], &[0.0, 0.0], 1.0, 5, 3);
        assert!(matches!(fit_quadratic(&s), Err(RboError::Precondition(_))));
        let s = sample_for(|x| x[0], &[0.0, 0.0], 1.0, 6, 3);
        assert!(fit_quadratic(&s).is_ok());
        assert!(matches!(loo_error(&s), Err(RboError::Precondition(_))));
    }

    #[test]
    fn collinear_points_are_not_poised() {
        let pts: Vec<Vec<f64>> = (0..10).map(|i| vec![0.05 * i as f64, 0.0]).collect();
        let ys = vec![0.0; 10];
        let s = DesignSample::new(vec![0.0, 0.0], 1.0, pts, ys).unwrap();
        assert!(matches!(fit_quadratic(&s), Err(RboError::Poisedness { .. })));
    }

    #[test]
    fn loo_on_exact_and_perturbed_quadratics() {
        let f = |x: &[f64]| 0.5 - x[0] + 2.0 * x[0] * x[1] - x[1] * x[1];
        let mut s = sample_for(f, &[2.0, 3.0], 0.1, 20, 4);
        assert!(loo_error(&s).unwrap() <= 1e-8);
        s.values[3] += 1e-3;
        assert!(loo_error(&s).unwrap() > 0.0);
    }

    #[test]
    fn loo_matches_hat_matrix_shortcut() {
        // Independent route: e_m / (1 − h_mm) with H = A (AᵀA)⁻¹ Aᵀ.
        let s = sample_for(|x| (x[0] * 3.0).sin() + x[1].exp(), &[0.2, 0.1], 0.8, 20, 5);
        let a = s.design_matrix(None);
        let y = DVector::from_vec(s.values.clone());
        let ata_inv = (a.transpose() * &a).try_inverse().unwrap();
        let h = &a * ata_inv * a.transpose();
        let resid = &y - &h * &y;
        let shortcut = (0..s.len())
            .map(|m| (resid[m] / (1.0 - h[(m, m)])).abs())
            .fold(0.0f64, f64::max);
        assert!((loo_error(&s).unwrap() - shortcut).abs() < 1e-9);
    }

    #[test]
    fn raw_coefficients_reproduce_scaled_evaluation() {
        let s = sample_for(|x| (x[0] - x[1]).cos() * 3.0, &[1.5, -2.0], 0.3, 25, 6);
        let q = fit_quadratic(&s).unwrap();
        let raw = q.coeffs();
        let mut b = vec![0.0; raw.len()];
        for p in &s.points {
            basis_values(p, &mut b);
            let via_raw: f64 = b.iter().zip(&raw).map(|(b, a)| b * a).sum();
            assert!((via_raw - q.eval(p)).abs() < 1e-9);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let s = sample_for(|x| x[0] * x[0] * x[1] + x[1], &[0.5, 0.7], 0.4, 20, 7);
        let q = fit_quadratic(&s).unwrap();
        let x = [0.6, 0.55];
        let g = q.gradient(&x);
        for j in 0..2 {
            let mut xp = x;
            let mut xm = x;
            xp[j] += 1e-6;
            xm[j] -= 1e-6;
            let fd = (q.eval(&xp) - q.eval(&xm)) / 2e-6;
            assert!((fd - g[j]).abs() < 1e-6);
        }
    }

    #[test]
    fn ball_points_are_uniform_and_contained() {
        let space = DesignSpace::unbounded(2);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let pts = sample_ball(&[0.0, 0.0], 1.0, 100_000, &space, &mut rng).unwrap();
        assert!(pts.iter().all(|p| dist(p, &[0.0, 0.0]) <= 1.0));
        let inner = pts.iter().filter(|p| dist(p, &[0.0, 0.0]) <= 0.5).count() as f64;
        assert!((inner / 1e5 - 0.25).abs() < 0.01);
    }

    #[test]
    fn ball_points_respect_the_box() {
        let space = DesignSpace::new(vec![1.0, 1.0], vec![4.0, 4.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pts = sample_ball(&[1.0, 2.0], 0.3, 500, &space, &mut rng).unwrap();
        assert!(pts.iter().all(|p| space.contains(p)));
    }

    #[test]
    fn ball_sampling_errors() {
        let space = DesignSpace::new(vec![1.0], vec![4.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        assert!(matches!(
            sample_ball(&[2.0], 0.0, 3, &space, &mut rng),
            Err(RboError::Precondition(_))
        ));
        assert!(matches!(
            sample_ball(&[0.0], 0.5, 3, &space, &mut rng),
            Err(RboError::InfeasibleRegion(_))
        ));
    }

    #[test]
    fn certification_contracts_until_the_bound_holds() {
        let settings = CertifySettings {
            eps_star: 1e-4,
            omega: 0.5,
            m: 20,
            rho_min_guard: 1e-6,
            poisedness_retries: 3,
        };
        let space = DesignSpace::unbounded(2);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let out = certify(&[0.0, 0.0], 1.0, &settings, &space, &mut rng, |pts| {
            Ok(pts.iter().map(|p| (2.0 * p[0]).exp() + p[1].sin()).collect())
        })
        .unwrap();
        assert!(out.surrogate.loo_error < 1e-4);
        assert!(out.passes > 1);
        assert!((out.radius - 0.5f64.powi(out.passes as i32 - 1)).abs() < 1e-15);
        for p in &out.sample.points {
            assert!(dist(p, &[0.0, 0.0]) <= out.radius);
        }
    }

    #[test]
    fn certification_gives_up_at_the_guard() {
        let settings = CertifySettings {
            eps_star: 1e-3,
            omega: 0.5,
            m: 8,
            rho_min_guard: 1e-3,
            poisedness_retries: 3,
        };
        let space = DesignSpace::unbounded(1);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut noise = ChaCha8Rng::seed_from_u64(12);
        let err = certify(&[0.0], 1.0, &settings, &space, &mut rng, |pts| {
            Ok(pts.iter().map(|_| noise.random::<f64>()).collect())
        })
        .unwrap_err();
        assert!(matches!(err, RboError::SurrogateFailure { radius, .. } if radius < 1e-3));
    }

    #[test]
    fn infinite_bound_certifies_in_one_pass() {
        let settings = CertifySettings {
            eps_star: f64::INFINITY,
            omega: 0.9,
            m: 20,
            rho_min_guard: 1e-6,
            poisedness_retries: 3,
        };
        let space = DesignSpace::unbounded(2);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut noise = ChaCha8Rng::seed_from_u64(14);
        let out = certify(&[0.0, 0.0], 0.3, &settings, &space, &mut rng, |pts| {
            Ok(pts.iter().map(|_| noise.random::<f64>()).collect())
        })
        .unwrap();
        assert_eq!((out.passes, out.radius), (1, 0.3));
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(32))]

        #[test]
        fn translation_leaves_predictions_unchanged(
            sx in -50.0f64..50.0, sy in -50.0f64..50.0, seed in 0u64..1000,
        ) {
            let f = |x: &[f64]| (x[0]).sin() + 0.3 * x[1] * x[0];
            let base = sample_for(f, &[0.3, 0.4], 0.5, 20, seed);
            let shifted = DesignSample::new(
                vec![0.3 + sx, 0.4 + sy],
                0.5,
                base.points.iter().map(|p| vec![p[0] + sx, p[1] + sy]).collect(),
                base.values.clone(),
            ).unwrap();
            let q0 = fit_quadratic(&base).unwrap();
            let q1 = fit_quadratic(&shifted).unwrap();
            for p in &base.points {
                let a = q0.eval(p);
                let b = q1.eval(&[p[0] + sx, p[1] + sy]);
                proptest::prop_assert!((a - b).abs() < 1e-10);
            }
        }
    }
}
