//! Dense reference solvers for the convex programs.
//!
//! * Square-root MC: `min_L ||P_Omega(L - M)||_F + lambda ||L||_*`, solved on
//!   the jointly convex perspective form by alternating the exact `theta`
//!   update with proximal-gradient (ISTA) steps
//!   `L <- svt(L - P_Omega(L - M), lambda theta)` at fixed `theta`.
//! * Vanilla: `min_L ||P_Omega(L - M)||_F^2 + lambda_v ||L||_*` by ISTA with
//!   step `1/2`, i.e. `L <- svt(L - P_Omega(L - M), lambda_v / 2)`.
//!
//! Both form full `n x n` SVDs and refuse `n > 1000`.

use std::time::Instant;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::certificate::DENSE_LIMIT;
use crate::error::{invalid, shape_mismatch, Error, Result};
use crate::masked_ops::ObservationSet;
use crate::solver::{theta_floor, SolverConfig};

/// Singular value soft-thresholding `U max(S - tau, 0) V^T`.
pub fn svt(a: &DMatrix<f64>, tau: f64) -> DMatrix<f64> {
    svt_with_norm(a, tau).0
}

/// [`svt`] together with the nuclear norm of the result.
fn svt_with_norm(a: &DMatrix<f64>, tau: f64) -> (DMatrix<f64>, f64) {
    if a.is_empty() {
        return (a.clone(), 0.0);
    }
    let svd = a.clone().svd(true, true);
    let u = svd.u.expect("requested U");
    let v_t = svd.v_t.expect("requested V^T");
    let kept: Vec<(usize, f64)> = svd
        .singular_values
        .iter()
        .enumerate()
        .filter_map(|(k, &s)| (s > tau).then_some((k, s - tau)))
        .collect();
    let mut z = DMatrix::zeros(a.nrows(), a.ncols());
    let mut nuclear = 0.0;
    for (k, s) in kept {
        z.ger(s, &u.column(k), &v_t.row(k).transpose(), 1.0);
        nuclear += s;
    }
    (z, nuclear)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConvexKind {
    ConvexSqrt,
    Vanilla,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConvexOptions {
    /// Stop when `||L_k - L_{k-1}||_F <= tol * max(||L_k||_F, tiny)` between outer rounds.
    pub tol: f64,
    pub max_outer: usize,
    /// ISTA steps per outer round.
    pub inner_iters: usize,
    pub theta_floor_rel: f64,
    /// Warm-started regularization path for the vanilla solver.
    pub continuation: bool,
}

impl Default for ConvexOptions {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_outer: 2000,
            inner_iters: 1,
            continuation: true,
            theta_floor_rel: SolverConfig::default().theta_floor_rel,
        }
    }
}

impl ConvexOptions {
    fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) {
            return Err(invalid("tol", "must be positive"));
        }
        if self.max_outer == 0 || self.inner_iters == 0 {
            return Err(invalid("max_outer", "outer and inner iteration counts must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ConvexSolveReport {
    pub solver: ConvexKind,
    pub l_hat: DMatrix<f64>,
    /// `||P_Omega(L_hat - M)||_F`, floored.
    pub theta_hat: f64,
    pub lambda: f64,
    /// Convex objective after each outer round.
    pub objective: Vec<f64>,
    /// `||L - prox(L - grad)||_F` at exit.
    pub fixed_point_residual: f64,
    pub iterations: usize,
    pub converged: bool,
    pub wall_time_s: f64,
}

impl ConvexSolveReport {
    pub fn final_objective(&self) -> f64 {
        *self.objective.last().expect("at least one round")
    }

    pub fn summary(&self) -> ConvexSummary {
        ConvexSummary {
            solver: self.solver,
            lambda: self.lambda,
            theta_hat: self.theta_hat,
            objective: self.objective.clone(),
            fixed_point_residual: self.fixed_point_residual,
            iterations: self.iterations,
            converged: self.converged,
            wall_time_s: self.wall_time_s,
        }
    }
}

/// JSON form of a [`ConvexSolveReport`], without the dense estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvexSummary {
    pub solver: ConvexKind,
    pub lambda: f64,
    pub theta_hat: f64,
    pub objective: Vec<f64>,
    pub fixed_point_residual: f64,
    pub iterations: usize,
    pub converged: bool,
    pub wall_time_s: f64,
}

fn check_dense(obs: &ObservationSet, init: Option<&DMatrix<f64>>) -> Result<DMatrix<f64>> {
    let n = obs.n_rows().max(obs.n_cols());
    if n > DENSE_LIMIT {
        return Err(Error::TooLarge { n, limit: DENSE_LIMIT });
    }
    match init {
        Some(l) if l.shape() != obs.shape() => Err(shape_mismatch("convex warm start", obs.shape(), l.shape())),
        Some(l) => Ok(l.clone()),
        None => Ok(DMatrix::zeros(obs.n_rows(), obs.n_cols())),
    }
}

/// Dense `P_Omega(L - M)` and its Frobenius norm.
fn residual(l: &DMatrix<f64>, obs: &ObservationSet) -> (DMatrix<f64>, f64) {
    let mut s = DMatrix::zeros(l.nrows(), l.ncols());
    let mut sq = 0.0;
    for (i, j, m) in obs.entries() {
        let d = l[(i, j)] - m;
        s[(i, j)] = d;
        sq += d * d;
    }
    (s, sq.sqrt())
}

/// `||P_Omega(L - M)||_F + lambda ||L||_*`.
pub fn sqrt_objective(l: &DMatrix<f64>, obs: &ObservationSet, lambda: f64) -> f64 {
    residual(l, obs).1 + lambda * l.singular_values().sum()
}

/// `||P_Omega(L - M)||_F^2 + lambda_v ||L||_*`.
pub fn vanilla_objective(l: &DMatrix<f64>, obs: &ObservationSet, lambda_v: f64) -> f64 {
    let rho = residual(l, obs).1;
    rho * rho + lambda_v * l.singular_values().sum()
}

fn relative_change(new: &DMatrix<f64>, old: &DMatrix<f64>) -> f64 {
    (new - old).norm() / new.norm().max(f64::MIN_POSITIVE)
}

/// Alternating exact-`theta` / ISTA solver for the square-root program, from `init` or zero.
pub fn solve_convex_sqrt(
    obs: &ObservationSet,
    lambda: f64,
    opts: &ConvexOptions,
    init: Option<&DMatrix<f64>>,
) -> Result<ConvexSolveReport> {
    opts.validate()?;
    if !(lambda >= 0.0) {
        return Err(invalid("lambda", "must be non-negative"));
    }
    let started = Instant::now();
    let floor = theta_floor(obs, opts.theta_floor_rel);
    let mut l = check_dense(obs, init)?;
    let mut objective = Vec::new();
    let mut converged = false;
    let mut outer = 0;
    let mut fixed_point_residual = f64::INFINITY;
    while outer < opts.max_outer {
        outer += 1;
        let before = l.clone();
        let theta = residual(&l, obs).1.max(floor);
        let tau = lambda * theta;
        let mut nuclear = 0.0;
        for _ in 0..opts.inner_iters {
            let (s, _) = residual(&l, obs);
            let (next, nuc) = svt_with_norm(&(&l - s), tau);
            fixed_point_residual = (&next - &l).norm();
            l = next;
            nuclear = nuc;
        }
        objective.push(residual(&l, obs).1 + lambda * nuclear);
        if relative_change(&l, &before) <= opts.tol {
            converged = true;
            break;
        }
    }
    let theta_hat = residual(&l, obs).1.max(floor);
    Ok(ConvexSolveReport {
        solver: ConvexKind::ConvexSqrt,
        l_hat: l,
        theta_hat,
        lambda,
        objective,
        fixed_point_residual,
        iterations: outer,
        converged,
        wall_time_s: started.elapsed().as_secs_f64(),
    })
}

/// ISTA for the nuclear-norm regularized least-squares program, from `init` or zero.
///
/// With `opts.continuation`, the solver first visits a geometric sequence of
/// larger regularization levels (factor 4 apart, starting at
/// `||P_Omega(M)||_F`), each warm-started from the previous solution and
/// solved to relative change `1e-4`. Only the target level enters the
/// objective trace.
pub fn solve_vanilla(
    obs: &ObservationSet,
    lambda_v: f64,
    opts: &ConvexOptions,
    init: Option<&DMatrix<f64>>,
) -> Result<ConvexSolveReport> {
    opts.validate()?;
    if !(lambda_v >= 0.0) {
        return Err(invalid("lambda_v", "must be non-negative"));
    }
    let started = Instant::now();
    let mut l = check_dense(obs, init)?;
    let mut levels = Vec::new();
    if opts.continuation {
        let mut level = obs.frobenius_norm();
        while level > lambda_v {
            levels.push(level);
            level /= 4.0;
        }
    }
    levels.push(lambda_v);

    let mut objective = Vec::new();
    let mut converged = false;
    let mut outer = 0;
    let mut fixed_point_residual = f64::INFINITY;
    for (k, &level) in levels.iter().enumerate() {
        let last = k + 1 == levels.len();
        let tol = if last { opts.tol } else { opts.tol.max(1e-6) };
        while outer < opts.max_outer {
            outer += 1;
            let before = l.clone();
            let mut nuclear = 0.0;
            for _ in 0..opts.inner_iters {
                let (s, _) = residual(&l, obs);
                let (next, nuc) = svt_with_norm(&(&l - s), 0.5 * level);
                fixed_point_residual = (&next - &l).norm();
                l = next;
                nuclear = nuc;
            }
            let done = relative_change(&l, &before) <= tol || l.norm() == 0.0 && before.norm() == 0.0;
            if last {
                let rho = residual(&l, obs).1;
                objective.push(rho * rho + level * nuclear);
                converged = done;
            }
            if done {
                break;
            }
        }
    }
    if objective.is_empty() {
        objective.push(vanilla_objective(&l, obs, lambda_v));
    }
    let theta_hat = residual(&l, obs).1;
    Ok(ConvexSolveReport {
        solver: ConvexKind::Vanilla,
        l_hat: l,
        theta_hat,
        lambda: lambda_v,
        objective,
        fixed_point_residual,
        iterations: outer,
        converged,
        wall_time_s: started.elapsed().as_secs_f64(),
    })
}
