//! Reference solver for the full personalized-weight problem, used by tests and
//! diagnostics only.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::numkit::{dot, kahan_sum, sq_dist, ParamVector, SquareMatrix};

/// Relative tolerance for symmetry and for treating an eigenvalue as zero or negative.
const EIGEN_TOLERANCE: f64 = 1e-9;
/// Two minimizers closer than this are considered the same point.
const DISTINCT_TOLERANCE: f64 = 1e-6;
/// Objectives within this (scaled by `max(1, |objective|)`) are considered equal.
const OBJECTIVE_TOLERANCE: f64 = 1e-10;
const MAX_ITERATIONS: usize = 200_000;

/// `W[j][k] = <g - m_j, g - m_k>` for one client's guidance model `g`.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossDistanceMatrix {
    matrix: SquareMatrix,
}

impl CrossDistanceMatrix {
    /// Wraps an arbitrary symmetric matrix.
    pub fn from_matrix(matrix: SquareMatrix) -> Result<Self> {
        let tol = EIGEN_TOLERANCE * matrix.max_abs().max(1.0);
        if !matrix.is_symmetric(tol) {
            return Err(Error::InvalidArgument("cross-distance matrix must be symmetric".into()));
        }
        if matrix.as_slice().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("cross-distance matrix entry".into()));
        }
        Ok(CrossDistanceMatrix { matrix })
    }

    pub fn matrix(&self) -> &SquareMatrix {
        &self.matrix
    }

    pub fn n(&self) -> usize {
        self.matrix.n()
    }
}

pub fn cross_distance_matrix(
    guidance: &ParamVector,
    models: &[ParamVector],
) -> Result<CrossDistanceMatrix> {
    if models.is_empty() {
        return Err(Error::Empty("cross_distance_matrix needs at least one model"));
    }
    let diffs = models
        .iter()
        .map(|m| guidance.sub(m))
        .collect::<Result<Vec<_>>>()?;
    let n = diffs.len();
    let mut w = SquareMatrix::zeros(n);
    for j in 0..n {
        w.set(j, j, sq_dist(guidance, &models[j])?);
        for k in j + 1..n {
            let v = dot(&diffs[j], &diffs[k])?;
            w.set(j, k, v);
            w.set(k, j, v);
        }
    }
    CrossDistanceMatrix::from_matrix(w)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleSolution {
    pub weights: Vec<f64>,
    pub objective: f64,
    /// False when another feasible point attains the same objective.
    pub unique: bool,
    /// A second minimizer, when one was found.
    pub alternative: Option<Vec<f64>>,
}

/// Minimizes `p' W p` over the probability simplex.
///
/// Uses the closed form `W^{-1} 1 / (1' W^{-1} 1)` when `W` is positive definite and that
/// point is feasible; otherwise accelerated projected gradient from the uniform point.
pub fn oracle_solve_full(w: &CrossDistanceMatrix) -> Result<OracleSolution> {
    let m = w.matrix();
    let n = m.n();
    if n == 0 {
        return Err(Error::Empty("empty cross-distance matrix"));
    }
    let (eigvals, eigvecs) = m.symmetric_eigen();
    let scale = eigvals.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
    let tol = EIGEN_TOLERANCE * scale.max(f64::MIN_POSITIVE);
    let lambda_min = eigvals[0];
    if lambda_min < -tol {
        return Err(Error::Indefinite {
            min_eigenvalue: lambda_min,
        });
    }
    let definite = lambda_min > tol;

    let closed = if definite { closed_form(m) } else { None };
    let weights = match closed {
        Some(p) => p,
        None => projected_gradient(m, &vec![1.0 / n as f64; n], scale),
    };
    let objective = m.quad_form(&weights);
    if definite {
        return Ok(OracleSolution {
            weights,
            objective,
            unique: true,
            alternative: None,
        });
    }

    let null: Vec<&Vec<f64>> = eigvals
        .iter()
        .zip(&eigvecs)
        .filter(|(v, _)| v.abs() <= tol)
        .map(|(_, vec)| vec)
        .collect();
    let mut alternative = null_space_alternative(&weights, &null);
    if alternative.is_none() {
        alternative = (0..n).find_map(|k| {
            let mut start = vec![0.0; n];
            start[k] = 1.0;
            let q = projected_gradient(m, &start, scale);
            let obj_q = m.quad_form(&q);
            (distance(&q, &weights) > DISTINCT_TOLERANCE && same_objective(obj_q, objective))
                .then_some(q)
        });
    }
    let alternative = alternative.filter(|q| same_objective(m.quad_form(q), objective));
    Ok(OracleSolution {
        weights,
        objective,
        unique: alternative.is_none(),
        alternative,
    })
}

fn same_objective(a: f64, b: f64) -> bool {
    (a - b).abs() <= OBJECTIVE_TOLERANCE * a.abs().max(b.abs()).max(1.0)
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    kahan_sum(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y))).sqrt()
}

fn closed_form(m: &SquareMatrix) -> Option<Vec<f64>> {
    let n = m.n();
    let x = m.solve(&vec![1.0; n])?;
    let total = kahan_sum(x.iter().copied());
    if !(total.is_finite() && total != 0.0) {
        return None;
    }
    let p: Vec<f64> = x.iter().map(|v| v / total).collect();
    if p.iter().any(|&v| v < -1e-14) {
        return None;
    }
    let p: Vec<f64> = p.into_iter().map(|v| v.max(0.0)).collect();
    let s = kahan_sum(p.iter().copied());
    Some(p.into_iter().map(|v| v / s).collect())
}

/// FISTA with gradient-based restart on `p' W p` over the simplex.
fn projected_gradient(m: &SquareMatrix, start: &[f64], lambda_max: f64) -> Vec<f64> {
    if lambda_max == 0.0 {
        return start.to_vec();
    }
    let step = 1.0 / (2.0 * lambda_max);
    let mut p = project_simplex(start);
    let mut y = p.clone();
    let mut t = 1.0_f64;
    let mut obj = m.quad_form(&p);
    for _ in 0..MAX_ITERATIONS {
        let g = m.mul_vec(&y);
        let trial: Vec<f64> = y.iter().zip(&g).map(|(yk, gk)| yk - step * 2.0 * gk).collect();
        let next = project_simplex(&trial);
        let next_obj = m.quad_form(&next);
        let moved = next.iter().zip(&p).fold(0.0_f64, |a, (x, y)| a.max((x - y).abs()));
        if next_obj > obj {
            // Momentum overshot; restart from the last iterate.
            y = p.clone();
            t = 1.0;
            if moved < 1e-16 {
                break;
            }
            continue;
        }
        let t_next = (1.0 + (1.0 + 4.0 * t * t).sqrt()) / 2.0;
        let beta = (t - 1.0) / t_next;
        y = next
            .iter()
            .zip(&p)
            .map(|(x, xp)| x + beta * (x - xp))
            .collect();
        p = next;
        obj = next_obj;
        t = t_next;
        if moved < 1e-15 {
            break;
        }
    }
    p
}

/// Looks for a second minimizer `p + s c` with `c` in `null(W)` and `sum(c) = 0`.
fn null_space_alternative(p: &[f64], null: &[&Vec<f64>]) -> Option<Vec<f64>> {
    if null.is_empty() {
        return None;
    }
    let n = p.len();
    // Directions inside the null space that keep the weights summing to one.
    let sums: Vec<f64> = null.iter().map(|v| kahan_sum(v.iter().copied())).collect();
    let mut dirs: Vec<Vec<f64>> = Vec::new();
    let s_norm = kahan_sum(sums.iter().map(|s| s * s)).sqrt();
    for (a, v) in null.iter().enumerate() {
        let mut c: Vec<f64> = v.to_vec();
        if s_norm > 1e-12 {
            let coef = sums[a] / (s_norm * s_norm);
            for (b, u) in null.iter().enumerate() {
                for k in 0..n {
                    c[k] -= coef * sums[b] * u[k];
                }
            }
        }
        if distance(&c, &vec![0.0; n]) > 1e-8 {
            dirs.push(c);
        }
    }
    for c in &dirs {
        for sign in [1.0, -1.0] {
            let mut t_max = f64::INFINITY;
            for k in 0..n {
                let ck = sign * c[k];
                if ck < 0.0 {
                    t_max = t_max.min(p[k] / -ck);
                }
            }
            if !t_max.is_finite() || t_max <= 0.0 {
                continue;
            }
            let q: Vec<f64> = (0..n).map(|k| (p[k] + t_max * sign * c[k]).max(0.0)).collect();
            let s = kahan_sum(q.iter().copied());
            let q: Vec<f64> = q.into_iter().map(|v| v / s).collect();
            if distance(&q, p) > DISTINCT_TOLERANCE {
                return Some(q);
            }
        }
    }
    None
}

/// Euclidean projection onto the probability simplex.
pub fn project_simplex(v: &[f64]) -> Vec<f64> {
    let mut u = v.to_vec();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut cum = 0.0;
    let mut theta = 0.0;
    for (i, ui) in u.iter().enumerate() {
        cum += ui;
        let cand = (cum - 1.0) / (i + 1) as f64;
        if ui - cand > 0.0 {
            theta = cand;
        }
    }
    v.iter().map(|x| (x - theta).max(0.0)).collect()
}

/// Splits `||trained - eta * grad - model_j||^2` into
/// `(||trained - model_j||^2, 2 eta (model_j - trained)' grad, eta^2 ||grad||^2)`.
pub fn decompose_distance(
    trained: &ParamVector,
    eta: f64,
    grad: &ParamVector,
    model_j: &ParamVector,
) -> Result<(f64, f64, f64)> {
    trained.ensure_same_layout(grad)?;
    trained.ensure_same_layout(model_j)?;
    if !eta.is_finite() {
        return Err(Error::InvalidArgument(format!("step size must be finite, got {eta}")));
    }
    let t1 = sq_dist(trained, model_j)?;
    let t2 = 2.0 * eta * dot(&model_j.sub(trained)?, grad)?;
    let t3 = eta * eta * grad.norm_sq();
    Ok((t1, t2, t3))
}
