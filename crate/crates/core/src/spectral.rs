//! Perron root and eigenvectors of the mean matrix, the limit of `A^n / gamma^n`,
//! and the uniform mean-ratio bound used to pick `k0`.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{Mat2, ModelSpec, Vec2, TYPES};

pub const DEFAULT_TOL: f64 = 1e-12;
pub const DEFAULT_N_MAX: usize = 10_000;
const MAX_POWER_ITERATIONS: usize = 100_000;
const RESIDUAL_FACTOR: f64 = 1e-10;

/// Perron root `rho` of `M` with right eigenvector `u` (`M u = rho u`, `u . 1 = 1`)
/// and left eigenvector `v` (`v M = rho v`, `v . u = 1`).
#[derive(Clone, Debug, Serialize)]
pub struct Perron {
    pub rho: f64,
    pub u: Vec2,
    pub v: Vec2,
    pub iterations: usize,
    pub residual_right: f64,
    pub residual_left: f64,
}

pub fn mat_vec(m: &Mat2, x: &Vec2) -> Vec2 {
    let mut out = [0.0; TYPES];
    for (i, row) in m.iter().enumerate() {
        out[i] = row.iter().zip(x).map(|(a, b)| a * b).sum();
    }
    out
}

pub fn vec_mat(x: &Vec2, m: &Mat2) -> Vec2 {
    let mut out = [0.0; TYPES];
    for (i, xi) in x.iter().enumerate() {
        for j in 0..TYPES {
            out[j] += xi * m[i][j];
        }
    }
    out
}

pub fn mat_mul(a: &Mat2, b: &Mat2) -> Mat2 {
    let mut out = [[0.0; TYPES]; TYPES];
    for i in 0..TYPES {
        for j in 0..TYPES {
            out[i][j] = (0..TYPES).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

pub fn dot(a: &Vec2, b: &Vec2) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Smallest `k <= 2 p^2` with `M^k` entrywise positive.
pub fn regularity_power(m: &Mat2) -> Option<usize> {
    let mut power = *m;
    for k in 1..=2 * TYPES * TYPES {
        if power.iter().flatten().all(|&x| x > 0.0) {
            return Some(k);
        }
        power = mat_mul(&power, m);
    }
    None
}

/// Normalised power iteration from the all-ones vector; `step` maps one iterate
/// to the next. Returns the fixed point (summing to one) and the iteration count.
fn power_iterate(step: impl Fn(&Vec2) -> Vec2, tol: f64) -> Option<(Vec2, f64, usize)> {
    let mut x = [1.0 / TYPES as f64; TYPES];
    for it in 1..=MAX_POWER_ITERATIONS {
        let y = step(&x);
        let total: f64 = y.iter().sum();
        if !(total > 0.0 && total.is_finite()) {
            return None;
        }
        let next = y.map(|c| c / total);
        if max_abs_diff(&next, &x) < tol {
            return Some((next, step(&next).iter().sum(), it));
        }
        x = next;
    }
    None
}

pub fn perron(m: &Mat2, tol: f64) -> Result<Perron> {
    if m.iter().flatten().any(|x| !(x.is_finite() && *x >= 0.0)) {
        return Err(Error::Domain(format!("mean matrix {m:?} must be finite and non-negative")));
    }
    if regularity_power(m).is_none() {
        return Err(Error::Hypothesis(format!("mean matrix {m:?} is not positively regular")));
    }
    let (u, rho, it_right) = power_iterate(|x| mat_vec(m, x), tol)
        .ok_or_else(|| Error::Numerical("right power iteration did not converge".into()))?;
    let (left, _, it_left) = power_iterate(|x| vec_mat(x, m), tol)
        .ok_or_else(|| Error::Numerical("left power iteration did not converge".into()))?;
    let scale = dot(&left, &u);
    let v = left.map(|c| c / scale);

    let mu = mat_vec(m, &u);
    let vm = vec_mat(&v, m);
    let residual_right = max_abs_diff(&mu, &u.map(|c| rho * c));
    let residual_left = max_abs_diff(&vm, &v.map(|c| rho * c));
    let bound = RESIDUAL_FACTOR * rho;
    if residual_right > bound || residual_left > bound {
        return Err(Error::Numerical(format!(
            "eigen residuals {residual_right:e} / {residual_left:e} exceed {bound:e}"
        )));
    }
    Ok(Perron {
        rho,
        u,
        v,
        iterations: it_right.max(it_left),
        residual_right,
        residual_left,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct GammaP0 {
    pub gamma: f64,
    pub p0: Mat2,
    pub steps: usize,
}

/// Outcome of the `A^n / gamma^n` limit. Failure is a reported result, not an error.
#[derive(Clone, Debug, Serialize)]
pub enum JacobianLimit {
    Converged(GammaP0),
    Fails { gamma: Option<f64>, reason: String },
}

impl JacobianLimit {
    pub fn converged(&self) -> Option<&GammaP0> {
        match self {
            JacobianLimit::Converged(g) => Some(g),
            JacobianLimit::Fails { .. } => None,
        }
    }
}

/// Spectral radius `gamma` of `A` and `P0 = lim A^n gamma^-n`.
pub fn gamma_p0(a: &Mat2, tol: f64, n_max: usize) -> JacobianLimit {
    let fails = |gamma: Option<f64>, reason: String| JacobianLimit::Fails { gamma, reason };
    if a.iter().flatten().all(|&x| x == 0.0) {
        return fails(Some(0.0), "A = 0: no offspring law has a single-child atom".into());
    }
    let Some((_, gamma, _)) = power_iterate(|x| mat_vec(a, x), tol) else {
        return fails(None, "power iteration on A oscillates or collapses".into());
    };
    if gamma <= 0.0 {
        return fails(Some(gamma), "A is nilpotent".into());
    }
    if gamma >= 1.0 {
        return fails(Some(gamma), format!("gamma = {gamma} is not below 1"));
    }
    let mut p = [[1.0, 0.0], [0.0, 1.0]];
    let mut last_change = f64::INFINITY;
    for step in 1..=n_max {
        let next = mat_mul(a, &p).map(|row| row.map(|x| x / gamma));
        last_change = max_abs_diff(next.as_flattened(), p.as_flattened());
        let scale = next.iter().flatten().fold(1.0f64, |m, x| m.max(x.abs()));
        p = next;
        if last_change < tol * scale {
            if p.iter().flatten().all(|&x| x.abs() < tol) {
                return fails(Some(gamma), "A^n / gamma^n tends to 0".into());
            }
            return JacobianLimit::Converged(GammaP0 { gamma, p0: p, steps: step });
        }
    }
    fails(
        Some(gamma),
        format!("A^n / gamma^n still moving by {last_change:e} after {n_max} steps"),
    )
}

/// Everything spectral about a model: `M`, `A`, the Perron data of `M` and the
/// `A^n / gamma^n` limit.
#[derive(Clone, Debug, Serialize)]
pub struct SpectralData {
    pub mean_matrix: Mat2,
    pub jacobian_at_zero: Mat2,
    pub perron: Perron,
    pub jacobian_limit: JacobianLimit,
}

impl SpectralData {
    pub fn compute(spec: &ModelSpec) -> Result<Self> {
        let mean_matrix = spec.mean_matrix();
        let jacobian_at_zero = spec.jacobian_at_zero();
        Ok(SpectralData {
            perron: perron(&mean_matrix, DEFAULT_TOL)?,
            jacobian_limit: gamma_p0(&jacobian_at_zero, DEFAULT_TOL, DEFAULT_N_MAX),
            mean_matrix,
            jacobian_at_zero,
        })
    }

    pub fn rho(&self) -> f64 {
        self.perron.rho
    }

    pub fn gamma(&self) -> Option<f64> {
        self.jacobian_limit.converged().map(|g| g.gamma)
    }
}

/// `sup_j || (j M^n + sum_{i<n} lambda M^i) / (u.(j + lambda (rho^-1 + ... + rho^-n)) rho^n) - v ||_inf`
/// over the grid.
pub fn mean_ratio_sup(spec: &ModelSpec, perron: &Perron, n: usize, grid: &[[u32; TYPES]]) -> Result<f64> {
    if grid.is_empty() {
        return Err(Error::Domain("mean_ratio_sup needs a non-empty grid".into()));
    }
    let m = spec.mean_matrix();
    let lambda = spec.immigration_mean();
    let rho = perron.rho;

    // lambda * (I + M + ... + M^{n-1}) and M^n, both independent of j.
    let mut mn = [[1.0, 0.0], [0.0, 1.0]];
    let mut imm = [0.0; TYPES];
    let mut lambda_power = lambda;
    for _ in 0..n {
        for t in 0..TYPES {
            imm[t] += lambda_power[t];
        }
        lambda_power = vec_mat(&lambda_power, &m);
        mn = mat_mul(&mn, &m);
    }
    let geometric: f64 = (1..=n).map(|k| rho.powi(-(k as i32))).sum();
    let rho_n = rho.powi(n as i32);
    let u_lambda = dot(&perron.u, &lambda);

    let mut sup = 0.0f64;
    for j in grid {
        let jf = j.map(|x| x as f64);
        let jm = vec_mat(&jf, &mn);
        let denom = (dot(&perron.u, &jf) + u_lambda * geometric) * rho_n;
        if denom <= 0.0 {
            return Err(Error::Domain(format!("grid point {j:?} gives a zero normaliser")));
        }
        for t in 0..TYPES {
            sup = sup.max(((jm[t] + imm[t]) / denom - perron.v[t]).abs());
        }
    }
    Ok(sup)
}

/// `{1..=max}^2`.
pub fn default_grid(max: u32) -> Vec<[u32; TYPES]> {
    (1..=max).flat_map(|a| (1..=max).map(move |b| [a, b])).collect()
}
