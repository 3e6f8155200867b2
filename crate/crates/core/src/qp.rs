//! Primal active-set method for small dense strictly convex QPs
//!
//! ```text
//!     minimize    ½ xᵀ G x + cᵀ x
//!     subject to  A x ≤ b
//! ```
//!
//! started from a feasible point. Each iteration solves the equality-
//! constrained QP on the current working set through its KKT system.

use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpError {
    /// The KKT system of the working set could not be factorized.
    Singular,
    MaxIterations,
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub x: DVector<f64>,
    /// One multiplier per row of `A`, zero for inactive rows.
    pub multipliers: DVector<f64>,
    pub active: Vec<usize>,
    pub iterations: usize,
}

const STEP_TOL: f64 = 1e-12;
const MULT_TOL: f64 = 1e-12;

/// Solve the QP from the feasible start `x0`. `G` must be positive definite.
pub fn solve_qp(
    g: &DMatrix<f64>,
    c: &DVector<f64>,
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    x0: DVector<f64>,
) -> Result<QpSolution, QpError> {
    let n = g.nrows();
    let m = a.nrows();
    let mut x = x0;
    let mut working: Vec<usize> = Vec::new();
    let max_iter = 50 * (n + m) + 50;

    for iter in 0..max_iter {
        let grad = g * &x + c;
        let w = working.len();
        let mut kkt = DMatrix::zeros(n + w, n + w);
        kkt.view_mut((0, 0), (n, n)).copy_from(g);
        for (r, &i) in working.iter().enumerate() {
            for j in 0..n {
                kkt[(n + r, j)] = a[(i, j)];
                kkt[(j, n + r)] = a[(i, j)];
            }
        }
        let mut rhs = DVector::zeros(n + w);
        rhs.rows_mut(0, n).copy_from(&(-&grad));
        let sol = kkt.lu().solve(&rhs).ok_or(QpError::Singular)?;
        let p = sol.rows(0, n).into_owned();

        // Roundoff in the KKT solve grows with the multipliers.
        if p.norm() <= STEP_TOL * (1.0 + x.norm() + sol.norm()) {
            // Stationary on the working set: check multiplier signs.
            let lambdas = sol.rows(n, w);
            let (worst, lmin) = lambdas
                .iter()
                .enumerate()
                .fold((usize::MAX, -MULT_TOL), |acc, (r, &l)| if l < acc.1 { (r, l) } else { acc });
            if worst == usize::MAX || lmin >= -MULT_TOL {
                let mut multipliers = DVector::zeros(m);
                for (r, &i) in working.iter().enumerate() {
                    multipliers[i] = lambdas[r].max(0.0);
                }
                return Ok(QpSolution {
                    x,
                    multipliers,
                    active: working,
                    iterations: iter + 1,
                });
            }
            working.remove(worst);
            continue;
        }

        // Ratio test over constraints outside the working set.
        let mut alpha = 1.0;
        let mut blocking = None;
        for i in 0..m {
            if working.contains(&i) {
                continue;
            }
            let ap = a.row(i).dot(&p.transpose());
            if ap > 1e-14 * (1.0 + a.row(i).norm() * p.norm()) {
                let slack = (b[i] - a.row(i).dot(&x.transpose())).max(0.0);
                let step = slack / ap;
                if step < alpha {
                    alpha = step;
                    blocking = Some(i);
                }
            }
        }
        x += alpha * &p;
        if let Some(i) = blocking {
            working.push(i);
        }
    }
    Err(QpError::MaxIterations)
}
