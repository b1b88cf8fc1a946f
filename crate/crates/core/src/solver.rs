//! Factored gradient descent for square-root matrix completion.
//!
//! The convex estimator minimizes `||P_Omega(L - M)||_F + lambda ||L||_*`.
//! Writing `L = X Y^T` and introducing a scale variable `theta > 0` gives the
//! smooth surrogate
//!
//! ```text
//! f(X, Y, theta) = (||P_Omega(X Y^T - M)||_F^2 / theta + theta) / 2
//!                + (lambda / 2) (||X||_F^2 + ||Y||_F^2)
//! ```
//!
//! whose minimum over `theta` is attained at the residual norm, giving
//! `g(X, Y) = ||P_Omega(X Y^T - M)||_F + (lambda / 2)(||X||_F^2 + ||Y||_F^2)`.
//!
//! [`solve`] alternates one simultaneous gradient step on `(X, Y)` at fixed
//! `theta_t` with the exact `theta` update, and returns the iterate with the
//! smallest gradient norm seen (earliest on ties).
//!
//! Step size: with `eta = eta_tilde * theta_t` the factor update becomes
//! `X <- X - eta_tilde (S Y + lambda theta_t X)`, i.e. plain gradient descent
//! on the masked least-squares loss with the effective ridge weight
//! `lambda theta_t`. `eta_tilde = step_coeff / (p_hat * sigma1_hat)` matches
//! the curvature of the masked quadratic near a rank-`r` fit; optional
//! backtracking halves it until `f` does not increase.

use std::time::Instant;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::certificate::factored_svd;
use crate::error::{invalid, shape_mismatch, Error, Result};
use crate::experiments::{error_metrics, ErrorMetrics};
use crate::instance_gen::{GroundTruth, ProblemInstance};
use crate::linalg::{spectral_norm_of_product, top_singular_subspace, SortedSvd};
use crate::masked_ops::{
    masked_frobenius, masked_residual, sparse_times_dense, sparse_transpose_times_dense,
    ObservationSet, SparseResidual,
};

/// Current `(X_t, Y_t, theta_t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorIterate {
    pub x: DMatrix<f64>,
    pub y: DMatrix<f64>,
    pub theta: f64,
    pub iter: usize,
}

impl FactorIterate {
    /// `L = X Y^T`, dense.
    pub fn product(&self) -> DMatrix<f64> {
        &self.x * self.y.transpose()
    }

    pub fn rank(&self) -> usize {
        self.x.ncols()
    }

    /// Stacked factor `[X; Y]`.
    pub fn stacked(&self) -> DMatrix<f64> {
        stack(&self.x, &self.y)
    }

    /// `||X^T X - Y^T Y||_F`.
    pub fn imbalance(&self) -> f64 {
        (self.x.transpose() * &self.x - self.y.transpose() * &self.y).norm()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    Spectral,
    Oracle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    /// `C_lambda` in `lambda = C_lambda / sqrt(n)`.
    pub lambda_coeff: f64,
    /// `c_eta` in `eta_tilde = c_eta / (p_hat * sigma1_hat)`.
    pub step_coeff: f64,
    /// Defaults to `50 n` when absent.
    pub max_iters: Option<usize>,
    /// Stop when `grad_norm <= grad_tol * lambda * sqrt(sigma1_hat)`.
    pub grad_tol: f64,
    pub theta_floor_rel: f64,
    pub init_mode: InitMode,
    pub line_search: bool,
    pub max_halvings: u32,
    pub trace_every: usize,
    /// Stall when `f` improves by less than `stall_rel_tol * |f|` over this many iterations.
    pub stall_window: usize,
    pub stall_rel_tol: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            lambda_coeff: 4.0,
            step_coeff: 0.25,
            max_iters: None,
            grad_tol: 1e-10,
            theta_floor_rel: 1e-12,
            init_mode: InitMode::Spectral,
            line_search: true,
            max_halvings: 30,
            trace_every: 1,
            stall_window: 100,
            stall_rel_tol: 1e-14,
        }
    }
}

impl SolverConfig {
    pub fn lambda(&self, n: usize) -> f64 {
        self.lambda_coeff / (n as f64).sqrt()
    }

    pub fn max_iters_for(&self, n: usize) -> usize {
        self.max_iters.unwrap_or(50 * n)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lambda_coeff", self.lambda_coeff),
            ("step_coeff", self.step_coeff),
            ("grad_tol", self.grad_tol),
            ("theta_floor_rel", self.theta_floor_rel),
            ("stall_rel_tol", self.stall_rel_tol),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(invalid(name, format!("must be positive and finite, got {v}")));
            }
        }
        if self.trace_every == 0 {
            return Err(invalid("trace_every", "must be at least 1"));
        }
        if self.stall_window == 0 {
            return Err(invalid("stall_window", "must be at least 1"));
        }
        if self.max_iters == Some(0) {
            return Err(invalid("max_iters", "must be at least 1"));
        }
        Ok(())
    }
}

/// `theta_floor_rel * max(1, ||P_Omega(M)||_F)`.
pub fn theta_floor(obs: &ObservationSet, theta_floor_rel: f64) -> f64 {
    theta_floor_rel * obs.frobenius_norm().max(1.0)
}

/// Partial gradients of `g` at the current factors.
#[derive(Debug, Clone)]
pub struct Gradient {
    /// `theta^{-1} P_Omega(X Y^T - M) Y + lambda X`
    pub b1: DMatrix<f64>,
    /// `theta^{-1} [P_Omega(X Y^T - M)]^T X + lambda Y`
    pub b2: DMatrix<f64>,
    pub grad_norm: f64,
    /// The `theta` used: the residual norm at these factors.
    pub residual_norm: f64,
}

/// Gradient of `g(X, Y)`, using the residual norm at `(X, Y)` (not a stale `theta`).
///
/// Fails with [`Error::Kink`] when the residual norm is at or below `floor`.
pub fn gradient_g(
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    obs: &ObservationSet,
    lambda: f64,
    floor: f64,
) -> Result<Gradient> {
    let res = masked_residual(x, y, obs)?;
    gradient_from_residual(&res, x, y, lambda, floor)
}

fn gradient_from_residual(
    res: &SparseResidual<'_>,
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    lambda: f64,
    floor: f64,
) -> Result<Gradient> {
    let rho = masked_frobenius(res);
    if rho <= floor {
        return Err(Error::Kink {
            residual_norm: rho,
            floor,
        });
    }
    let mut b1 = sparse_times_dense(res, y)?;
    let mut b2 = sparse_transpose_times_dense(res, x)?;
    b1 /= rho;
    b2 /= rho;
    b1 += x * lambda;
    b2 += y * lambda;
    let grad_norm = (b1.norm_squared() + b2.norm_squared()).sqrt();
    Ok(Gradient {
        b1,
        b2,
        grad_norm,
        residual_norm: rho,
    })
}

/// `(rho^2 / theta + theta) / 2 + (lambda / 2)(||X||^2 + ||Y||^2)`.
pub fn objective_f(
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    theta: f64,
    obs: &ObservationSet,
    lambda: f64,
) -> Result<f64> {
    if !(theta > 0.0) {
        return Err(invalid("theta", format!("must be positive, got {theta}")));
    }
    let rho = masked_frobenius(&masked_residual(x, y, obs)?);
    Ok(f_value(rho, theta, regularizer(x, y, lambda)))
}

/// `rho + (lambda / 2)(||X||^2 + ||Y||^2)`, the minimum of `f` over `theta`.
pub fn objective_g(x: &DMatrix<f64>, y: &DMatrix<f64>, obs: &ObservationSet, lambda: f64) -> Result<f64> {
    let rho = masked_frobenius(&masked_residual(x, y, obs)?);
    Ok(rho + regularizer(x, y, lambda))
}

fn regularizer(x: &DMatrix<f64>, y: &DMatrix<f64>, lambda: f64) -> f64 {
    0.5 * lambda * (x.norm_squared() + y.norm_squared())
}

fn f_value(rho: f64, theta: f64, reg: f64) -> f64 {
    0.5 * (rho * rho / theta + theta) + reg
}

/// One step of the algorithm: simultaneous update
///
/// ```text
/// X+ = X - eta (theta^{-1} P_Omega(X Y^T - M) Y + lambda X)
/// Y+ = Y - eta (theta^{-1} [P_Omega(X Y^T - M)]^T X + lambda Y)
/// ```
///
/// with the same residual and `theta = it.theta` for both, then
/// `theta+ = max(||P_Omega(X+ Y+^T - M)||_F, floor)`.
pub fn gd_step(
    it: &FactorIterate,
    obs: &ObservationSet,
    lambda: f64,
    eta: f64,
    floor: f64,
) -> Result<FactorIterate> {
    if !(it.theta > 0.0) {
        return Err(invalid("theta", "iterate theta must be positive"));
    }
    let res = masked_residual(&it.x, &it.y, obs)?;
    let (x, y) = factor_update(&res, it, lambda, eta / it.theta)?;
    let theta = masked_frobenius(&masked_residual(&x, &y, obs)?).max(floor);
    if !all_finite(&x) || !all_finite(&y) || !theta.is_finite() {
        return Err(Error::Diverged {
            iteration: it.iter + 1,
            partial: Box::new(SolveReport::empty()),
        });
    }
    Ok(FactorIterate {
        x,
        y,
        theta,
        iter: it.iter + 1,
    })
}

/// `X - eta_tilde (S Y + lambda theta X)` and the matching `Y` update.
fn factor_update(
    res: &SparseResidual<'_>,
    it: &FactorIterate,
    lambda: f64,
    eta_tilde: f64,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let sy = sparse_times_dense(res, &it.y)?;
    let stx = sparse_transpose_times_dense(res, &it.x)?;
    let shrink = 1.0 - eta_tilde * lambda * it.theta;
    let x = &it.x * shrink - sy * eta_tilde;
    let y = &it.y * shrink - stx * eta_tilde;
    Ok((x, y))
}

fn all_finite(m: &DMatrix<f64>) -> bool {
    m.iter().all(|v| v.is_finite())
}

fn stack(x: &DMatrix<f64>, y: &DMatrix<f64>) -> DMatrix<f64> {
    let mut f = DMatrix::zeros(x.nrows() + y.nrows(), x.ncols());
    f.rows_mut(0, x.nrows()).copy_from(x);
    f.rows_mut(x.nrows(), y.nrows()).copy_from(y);
    f
}

/// Starts at the groundtruth factors with `theta_0 = ||P_Omega(E)||_F` (floored).
pub fn oracle_init(instance: &ProblemInstance, floor: f64) -> Result<FactorIterate> {
    init_from_factors(instance.x_star.clone(), instance.y_star.clone(), &instance.obs, floor)
}

/// Wraps given factors as iteration 0 with a synchronized, floored `theta`.
pub fn init_from_factors(
    x: DMatrix<f64>,
    y: DMatrix<f64>,
    obs: &ObservationSet,
    floor: f64,
) -> Result<FactorIterate> {
    let theta = masked_frobenius(&masked_residual(&x, &y, obs)?).max(floor);
    Ok(FactorIterate { x, y, theta, iter: 0 })
}

/// Top-`r` SVD `U S V^T` of `p_hat^{-1} P_Omega(M)`; returns `X = U S^{1/2}`, `Y = V S^{1/2}`.
///
/// The SVD is computed by subspace iteration on the sparse operator, so the
/// dense rescaled matrix is never formed.
pub fn spectral_init(obs: &ObservationSet, r: usize, floor: f64) -> Result<FactorIterate> {
    let (rows, cols) = obs.shape();
    if r == 0 || r > rows.min(cols) {
        return Err(invalid("r", format!("need 1 <= r <= min(shape), got {r}")));
    }
    if obs.is_empty() {
        return Err(Error::RankDeficient {
            rank: r,
            sigma_r: 0.0,
            sigma_1: 0.0,
        });
    }
    let mut scaled = obs.as_sparse();
    scaled.scale(1.0 / obs.p_hat());
    let svd: SortedSvd = top_singular_subspace(
        |m| sparse_times_dense(&scaled, m).expect("shape checked"),
        |m| sparse_transpose_times_dense(&scaled, m).expect("shape checked"),
        rows,
        cols,
        r,
        r.max(5),
        1e-14,
        1000,
    );
    let s = &svd.singular_values;
    if !(s[r - 1] > 1e-12 * s[0]) {
        return Err(Error::RankDeficient {
            rank: r,
            sigma_r: s[r - 1],
            sigma_1: s[0],
        });
    }
    let mut x = svd.u;
    let mut y = svd.v;
    for k in 0..r {
        let root = s[k].sqrt();
        x.column_mut(k).scale_mut(root);
        y.column_mut(k).scale_mut(root);
    }
    init_from_factors(x, y, obs, floor)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    GradTol,
    MaxIters,
    Stall,
    /// Residual reached the theta floor (exact fit).
    Kink,
}

/// Column-oriented per-iteration log.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub iter: Vec<usize>,
    pub f: Vec<f64>,
    pub g: Vec<f64>,
    pub grad_norm: Vec<f64>,
    pub theta: Vec<f64>,
}

impl Trace {
    fn push(&mut self, iter: usize, f: f64, g: f64, grad_norm: f64, theta: f64) {
        self.iter.push(iter);
        self.f.push(f);
        self.g.push(g);
        self.grad_norm.push(grad_norm);
        self.theta.push(theta);
    }

    pub fn len(&self) -> usize {
        self.iter.len()
    }

    pub fn is_empty(&self) -> bool {
        self.iter.is_empty()
    }
}

/// Flags runs whose noise level lies outside the regime the error bounds cover.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegimeCheck {
    /// `(sigma / sigma_min) sqrt(n / p_hat)`.
    pub noise_ratio: f64,
    /// `noise_ratio >= 1`: the bounds require this quantity to be small.
    pub outside_theory_regime: bool,
}

#[derive(Debug, Clone)]
pub struct SolveReport {
    pub config: SolverConfig,
    pub n: usize,
    pub rank: usize,
    pub lambda: f64,
    pub eta_tilde: f64,
    pub sigma1_hat: f64,
    /// Threshold scale `lambda * sqrt(sigma1_hat)` for the gradient tolerance.
    pub grad_scale: f64,
    /// Iterate `t*` with the smallest logged gradient norm.
    pub best: FactorIterate,
    pub best_grad_norm: f64,
    pub last: FactorIterate,
    pub traces: Trace,
    pub stop_reason: StopReason,
    pub wall_time_s: f64,
    pub metrics: Option<ErrorMetrics>,
    pub regime: Option<RegimeCheck>,
}

impl SolveReport {
    fn empty() -> Self {
        let z = DMatrix::zeros(0, 0);
        let it = FactorIterate {
            x: z.clone(),
            y: z,
            theta: 0.0,
            iter: 0,
        };
        Self {
            config: SolverConfig::default(),
            n: 0,
            rank: 0,
            lambda: 0.0,
            eta_tilde: 0.0,
            sigma1_hat: 0.0,
            grad_scale: 0.0,
            best: it.clone(),
            best_grad_norm: f64::INFINITY,
            last: it,
            traces: Trace::default(),
            stop_reason: StopReason::MaxIters,
            wall_time_s: 0.0,
            metrics: None,
            regime: None,
        }
    }

    pub fn t_star(&self) -> usize {
        self.best.iter
    }

    pub fn iterations(&self) -> usize {
        self.last.iter
    }

    /// `L_ncvx = X_{t*} Y_{t*}^T`.
    pub fn estimate(&self) -> DMatrix<f64> {
        self.best.product()
    }

    pub fn summary(&self) -> SolveSummary {
        SolveSummary {
            solver: "sqrt_mc_factored".to_string(),
            config: self.config.clone(),
            n: self.n,
            rank: self.rank,
            lambda: self.lambda,
            eta_tilde: self.eta_tilde,
            sigma1_hat: self.sigma1_hat,
            stop_reason: self.stop_reason,
            t_star: self.t_star(),
            iterations: self.iterations(),
            grad_norm: self.best_grad_norm,
            theta_final: self.last.theta,
            theta_at_t_star: self.best.theta,
            wall_time_s: self.wall_time_s,
            traces: self.traces.clone(),
            metrics: self.metrics,
            regime: self.regime,
        }
    }
}

/// JSON form of a [`SolveReport`] (factors omitted; rerun the solve to recover them).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveSummary {
    pub solver: String,
    pub config: SolverConfig,
    pub n: usize,
    pub rank: usize,
    pub lambda: f64,
    pub eta_tilde: f64,
    pub sigma1_hat: f64,
    pub stop_reason: StopReason,
    pub t_star: usize,
    pub iterations: usize,
    pub grad_norm: f64,
    pub theta_final: f64,
    pub theta_at_t_star: f64,
    pub wall_time_s: f64,
    pub traces: Trace,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub metrics: Option<ErrorMetrics>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub regime: Option<RegimeCheck>,
}

/// Runs the solver from the initialization named in `config`.
pub fn solve(
    obs: &ObservationSet,
    rank: usize,
    config: &SolverConfig,
    groundtruth: Option<GroundTruth<'_>>,
) -> Result<SolveReport> {
    config.validate()?;
    let floor = theta_floor(obs, config.theta_floor_rel);
    let init = match config.init_mode {
        InitMode::Spectral => spectral_init(obs, rank, floor)?,
        InitMode::Oracle => {
            let gt = groundtruth.ok_or(Error::NoGroundTruth("oracle initialization"))?;
            init_from_factors(gt.x_star.clone(), gt.y_star.clone(), obs, floor)?
        }
    };
    solve_from(obs, init, config, groundtruth)
}

/// Runs the solver from a given iterate. `sigma1_hat` is the top singular
/// value of the initial product `X_0 Y_0^T`.
pub fn solve_from(
    obs: &ObservationSet,
    init: FactorIterate,
    config: &SolverConfig,
    groundtruth: Option<GroundTruth<'_>>,
) -> Result<SolveReport> {
    config.validate()?;
    let started = Instant::now();
    let (n, n_cols) = obs.shape();
    if n != n_cols {
        return Err(shape_mismatch("solve (square matrices only)", (n, n), (n, n_cols)));
    }
    let rank = init.rank();
    if init.x.nrows() != n || init.y.nrows() != n || init.y.ncols() != rank {
        return Err(shape_mismatch("solve initial factors", (n, rank), init.y.shape()));
    }
    let lambda = config.lambda(n);
    let floor = theta_floor(obs, config.theta_floor_rel);
    let sigma1_hat = spectral_norm_of_product(&init.x, &init.y);
    if !(sigma1_hat > 0.0) {
        return Err(invalid("init", "initial factors are zero"));
    }
    let eta_tilde = config.step_coeff / (obs.p_hat() * sigma1_hat);
    let grad_scale = lambda * sigma1_hat.sqrt();
    let grad_stop = config.grad_tol * grad_scale;
    let max_iters = config.max_iters_for(n);

    let mut report = SolveReport {
        config: config.clone(),
        n,
        rank,
        lambda,
        eta_tilde,
        sigma1_hat,
        grad_scale,
        best: init.clone(),
        best_grad_norm: f64::INFINITY,
        last: init.clone(),
        traces: Trace::default(),
        stop_reason: StopReason::MaxIters,
        wall_time_s: 0.0,
        metrics: None,
        regime: None,
    };

    let mut it = init;
    let mut res = masked_residual(&it.x, &it.y, obs)?;
    let mut f_history: Vec<f64> = Vec::new();

    let stop_reason = loop {
        let t = it.iter;
        let rho = masked_frobenius(&res);
        let reg = regularizer(&it.x, &it.y, lambda);
        let f_cur = f_value(rho, it.theta, reg);
        let logged = t % config.trace_every == 0;

        let grad = match gradient_from_residual(&res, &it.x, &it.y, lambda, floor) {
            Ok(g) => g,
            Err(Error::Kink { .. }) => {
                // Exact fit: the data term is at its global minimum and the
                // iterate is reported with gradient norm zero.
                report.traces.push(t, f_cur, rho + reg, 0.0, it.theta);
                report.best = it.clone();
                report.best_grad_norm = 0.0;
                break StopReason::Kink;
            }
            Err(e) => return Err(e),
        };

        let stop = if grad.grad_norm <= grad_stop {
            Some(StopReason::GradTol)
        } else if t >= max_iters {
            Some(StopReason::MaxIters)
        } else if t >= config.stall_window
            && f_history[t - config.stall_window] - f_cur < config.stall_rel_tol * f_cur.abs()
        {
            Some(StopReason::Stall)
        } else {
            None
        };

        if logged || stop.is_some() {
            report.traces.push(t, f_cur, rho + reg, grad.grad_norm, it.theta);
            if grad.grad_norm < report.best_grad_norm {
                report.best_grad_norm = grad.grad_norm;
                report.best = it.clone();
            }
        }
        if let Some(reason) = stop {
            break reason;
        }
        f_history.push(f_cur);

        let mut step = eta_tilde;
        let mut accepted = None;
        for _ in 0..=config.max_halvings {
            let (x, y) = factor_update(&res, &it, lambda, step)?;
            if !all_finite(&x) || !all_finite(&y) {
                if config.line_search {
                    step *= 0.5;
                    continue;
                }
                report.last = it;
                report.wall_time_s = started.elapsed().as_secs_f64();
                return Err(Error::Diverged {
                    iteration: t + 1,
                    partial: Box::new(report),
                });
            }
            let cand = masked_residual(&x, &y, obs)?;
            let rho_new = masked_frobenius(&cand);
            if !config.line_search
                || f_value(rho_new, it.theta, regularizer(&x, &y, lambda)) <= f_cur
            {
                accepted = Some((x, y, cand, rho_new));
                break;
            }
            step *= 0.5;
        }
        match accepted {
            Some((x, y, cand, rho_new)) => {
                if !rho_new.is_finite() {
                    report.last = it;
                    report.wall_time_s = started.elapsed().as_secs_f64();
                    return Err(Error::Diverged {
                        iteration: t + 1,
                        partial: Box::new(report),
                    });
                }
                it = FactorIterate {
                    x,
                    y,
                    theta: rho_new.max(floor),
                    iter: t + 1,
                };
                res = cand;
            }
            // No decrease at any trial step: numerically stationary.
            None => {
                if !(logged) {
                    report.traces.push(t, f_cur, rho + reg, grad.grad_norm, it.theta);
                    if grad.grad_norm < report.best_grad_norm {
                        report.best_grad_norm = grad.grad_norm;
                        report.best = it.clone();
                    }
                }
                break StopReason::Stall;
            }
        }
    };

    report.stop_reason = stop_reason;
    report.last = it;
    if let Some(gt) = groundtruth {
        report.metrics = Some(error_metrics(&report.best.x, &report.best.y, gt.x_star, gt.y_star));
        let noise_ratio = gt.sigma / gt.sigma_min * (n as f64 / obs.p_hat()).sqrt();
        report.regime = Some(RegimeCheck {
            noise_ratio,
            outside_theory_regime: noise_ratio >= 1.0,
        });
    }
    report.wall_time_s = started.elapsed().as_secs_f64();
    Ok(report)
}

/// Optimal rotation aligning stacked factors to a reference.
#[derive(Debug, Clone)]
pub struct Alignment {
    /// Orthogonal `H` minimizing `||F H - F_star||_F`.
    pub rotation: DMatrix<f64>,
    /// The cross-Gram `F^T F_star` was numerically rank deficient, so `H`
    /// is not unique; the returned one follows the SVD sign convention.
    pub ambiguous: bool,
}

/// Procrustes: `H = U V^T` from the SVD `F^T F_star = U S V^T`.
pub fn align_factors(f: &DMatrix<f64>, f_star: &DMatrix<f64>) -> Result<Alignment> {
    if f.shape() != f_star.shape() {
        return Err(shape_mismatch("align_factors", f_star.shape(), f.shape()));
    }
    let cross = f.transpose() * f_star;
    let svd = SortedSvd::new(&cross);
    let s = &svd.singular_values;
    let ambiguous = s.is_empty() || !(s[s.len() - 1] > 1e-12 * s[0].max(f64::MIN_POSITIVE));
    if ambiguous {
        log::warn!("align_factors: rank-deficient cross-Gram, rotation is not unique");
    }
    Ok(Alignment {
        rotation: &svd.u * svd.v.transpose(),
        ambiguous,
    })
}

/// Aligns the iterate's stacked factors to the groundtruth factors.
pub fn align_to_groundtruth(it: &FactorIterate, gt: GroundTruth<'_>) -> Result<Alignment> {
    align_factors(&it.stacked(), &stack(gt.x_star, gt.y_star))
}

/// Top singular value and condition number of `X Y^T`.
pub fn product_spectrum(it: &FactorIterate) -> Result<(f64, f64)> {
    let svd = factored_svd(&it.x, &it.y)?;
    let s = &svd.singular_values;
    Ok((s[0], s[0] / s[s.len() - 1]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instance_gen::{generate_instance, random_orthonormal};
    use crate::rng::{stream, Purpose};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    /// Dense oracle for the masked residual matrix.
    fn dense_residual(x: &DMatrix<f64>, y: &DMatrix<f64>, obs: &ObservationSet) -> DMatrix<f64> {
        let l = x * y.transpose();
        let mut s = DMatrix::zeros(obs.n_rows(), obs.n_cols());
        for (i, j, m) in obs.entries() {
            s[(i, j)] = l[(i, j)] - m;
        }
        s
    }

    fn small_instance(seed: u64) -> ProblemInstance {
        generate_instance(8, 2, 0.6, 0.1, seed).unwrap()
    }

    #[test]
    fn zero_factors_have_zero_gradient_without_regularization() {
        let inst = small_instance(1);
        let z = DMatrix::zeros(8, 2);
        let g = gradient_g(&z, &z, &inst.obs, 0.0, 1e-12).unwrap();
        assert_eq!(g.grad_norm, 0.0);
    }

    #[test]
    fn gradient_matches_central_differences() {
        let inst = generate_instance(10, 2, 0.5, 0.05, 3).unwrap();
        let lambda = 4.0 / 10f64.sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let x = rand_mat(&mut rng, 10, 2);
            let y = rand_mat(&mut rng, 10, 2);
            let dx = rand_mat(&mut rng, 10, 2);
            let dy = rand_mat(&mut rng, 10, 2);
            let g = gradient_g(&x, &y, &inst.obs, lambda, 1e-12).unwrap();
            let h = 1e-6;
            let plus = objective_g(&(&x + &dx * h), &(&y + &dy * h), &inst.obs, lambda).unwrap();
            let minus = objective_g(&(&x - &dx * h), &(&y - &dy * h), &inst.obs, lambda).unwrap();
            let fd = (plus - minus) / (2.0 * h);
            let analytic = g.b1.dot(&dx) + g.b2.dot(&dy);
            assert!((fd - analytic).abs() <= 1e-5 * analytic.abs().max(1e-8), "{fd} vs {analytic}");
        }
    }

    #[test]
    fn gradient_reports_kink_at_exact_fit() {
        let inst = generate_instance(10, 2, 0.5, 0.0, 3).unwrap();
        let r = gradient_g(&inst.x_star, &inst.y_star, &inst.obs, 1.0, 1e-12);
        assert!(matches!(r, Err(Error::Kink { .. })));
    }

    #[test]
    fn objective_f_and_g_relations() {
        let inst = small_instance(2);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_mat(&mut rng, 8, 2);
        let y = rand_mat(&mut rng, 8, 2);
        let lambda = 0.7;
        let rho = masked_frobenius(&masked_residual(&x, &y, &inst.obs).unwrap());
        let g = objective_g(&x, &y, &inst.obs, lambda).unwrap();
        let f_at_rho = objective_f(&x, &y, rho, &inst.obs, lambda).unwrap();
        assert!((f_at_rho - g).abs() < 1e-12 * g.abs());
        assert!(objective_f(&x, &y, 1.3 * rho, &inst.obs, lambda).unwrap() > g);
        assert!(objective_f(&x, &y, 0.7 * rho, &inst.obs, lambda).unwrap() > g);
        let grid_min = (1..2000)
            .map(|k| objective_f(&x, &y, rho * k as f64 / 1000.0, &inst.obs, lambda).unwrap())
            .fold(f64::INFINITY, f64::min);
        assert!(grid_min >= g - 1e-9);
        assert!(objective_f(&x, &y, 0.0, &inst.obs, lambda).is_err());
    }

    #[test]
    fn zero_step_only_resynchronizes_theta() {
        let inst = small_instance(3);
        let mut it = init_from_factors(inst.x_star.clone(), inst.y_star.clone(), &inst.obs, 1e-12).unwrap();
        let rho = it.theta;
        it.theta = 5.0;
        let next = gd_step(&it, &inst.obs, 0.5, 0.0, 1e-12).unwrap();
        assert_eq!(next.x, it.x);
        assert_eq!(next.y, it.y);
        assert_eq!(next.theta, rho);
        assert_eq!(next.iter, 1);
    }

    #[test]
    fn step_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let inst = generate_instance(8, 2, 0.5, 0.1, 4).unwrap();
        let x = rand_mat(&mut rng, 8, 2);
        let y = rand_mat(&mut rng, 8, 2);
        let it = FactorIterate { x: x.clone(), y: y.clone(), theta: 0.8, iter: 0 };
        let (lambda, eta) = (0.3, 0.05);
        let next = gd_step(&it, &inst.obs, lambda, eta, 1e-12).unwrap();
        let s = dense_residual(&x, &y, &inst.obs);
        let want_x = &x - (&s * &y / 0.8 + &x * lambda) * eta;
        let want_y = &y - (s.transpose() * &x / 0.8 + &y * lambda) * eta;
        assert!((&next.x - want_x).amax() < 1e-12);
        assert!((&next.y - want_y).amax() < 1e-12);
        let want_theta = dense_residual(&next.x, &next.y, &inst.obs).norm();
        assert!((next.theta - want_theta).abs() < 1e-12);
    }

    #[test]
    fn step_from_oracle_on_noiseless_instance_does_not_hurt() {
        let inst = generate_instance(30, 2, 0.6, 0.0, 6).unwrap();
        let floor = theta_floor(&inst.obs, 1e-12);
        let it = oracle_init(&inst, floor).unwrap();
        assert_eq!(it.theta, floor);
        let next = gd_step(&it, &inst.obs, 4.0 / 30f64.sqrt(), 0.01 * it.theta, floor).unwrap();
        let l = inst.l_star();
        let before = (it.product() - &l).norm();
        let after = (next.product() - &l).norm();
        assert!(after <= before + 1e-12);
    }

    #[test]
    fn spectral_init_is_exact_on_full_noiseless_data() {
        let inst = generate_instance(40, 3, 1.0, 0.0, 2).unwrap();
        let it = spectral_init(&inst.obs, 3, 1e-12).unwrap();
        let l = inst.l_star();
        assert!((it.product() - &l).norm() <= 1e-8 * l.norm());
        assert!(it.imbalance() <= 1e-10);
    }

    #[test]
    fn spectral_init_rejects_excess_rank() {
        let inst = generate_instance(20, 2, 1.0, 0.0, 2).unwrap();
        assert!(matches!(spectral_init(&inst.obs, 3, 1e-12), Err(Error::RankDeficient { .. })));
        assert!(spectral_init(&inst.obs, 21, 1e-12).is_err());
    }

    #[test]
    fn oracle_init_theta_is_observed_noise_norm() {
        let inst = generate_instance(30, 2, 0.5, 0.01, 4).unwrap();
        let it = oracle_init(&inst, 1e-12).unwrap();
        assert!((it.theta - inst.noise_on_omega().frobenius_norm()).abs() < 1e-15);
    }

    #[test]
    fn oracle_init_gradient_is_bounded() {
        let inst = generate_instance(60, 3, 0.5, 1e-3, 9).unwrap();
        let lambda = 4.0 / 60f64.sqrt();
        let g = gradient_g(&inst.x_star, &inst.y_star, &inst.obs, lambda, 1e-12).unwrap();
        let bound = lambda * (inst.x_star.norm() + inst.y_star.norm()) + 2.0 * inst.sigma_max.sqrt();
        assert!(g.grad_norm <= bound);
    }

    #[test]
    fn alignment_recovers_rotations() {
        let f = random_orthonormal(12, 3, &mut stream(1, Purpose::LeftFactor)).unwrap() * 2.0;
        let a = align_factors(&f, &f).unwrap();
        assert!((a.rotation.clone() - DMatrix::identity(3, 3)).amax() < 1e-10);
        assert!(!a.ambiguous);

        let g = random_orthonormal(3, 3, &mut stream(2, Purpose::LeftFactor)).unwrap();
        let a = align_factors(&(&f * &g), &f).unwrap();
        assert!((a.rotation.clone() - g.transpose()).amax() < 1e-8);
        let h = &a.rotation;
        assert!((h.transpose() * h - DMatrix::identity(3, 3)).norm() <= 1e-10);
    }

    #[test]
    fn alignment_beats_random_rotations() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let f = rand_mat(&mut rng, 10, 3);
        let f_star = rand_mat(&mut rng, 10, 3);
        let h = align_factors(&f, &f_star).unwrap().rotation;
        let best = (&f * &h - &f_star).norm();
        for k in 0..100 {
            let q = random_orthonormal(3, 3, &mut stream(100 + k, Purpose::Noise)).unwrap();
            assert!(best <= (&f * &q - &f_star).norm() + 1e-12);
        }
    }

    #[test]
    fn alignment_flags_rank_deficient_cross_gram() {
        let mut f = DMatrix::zeros(6, 2);
        f[(0, 0)] = 1.0;
        let a = align_factors(&f, &f).unwrap();
        assert!(a.ambiguous);
        let h = &a.rotation;
        assert!((h.transpose() * h - DMatrix::identity(2, 2)).norm() <= 1e-10);
    }

    #[test]
    fn solve_small_noisy_instance_picks_min_gradient() {
        let inst = generate_instance(120, 2, 0.6, 1e-3, 12).unwrap();
        let cfg = SolverConfig::default();
        let rep = solve(&inst.obs, 2, &cfg, Some(inst.ground_truth())).unwrap();
        let min = rep.traces.grad_norm.iter().cloned().fold(f64::INFINITY, f64::min);
        assert_eq!(rep.best_grad_norm, min);
        let first = rep.traces.grad_norm.iter().position(|g| *g == min).unwrap();
        assert_eq!(rep.traces.iter[first], rep.t_star());
        assert!(rep.traces.f.windows(2).all(|w| w[1] <= w[0]));
        assert!(rep.metrics.unwrap().rel_fro < 0.5);
    }

    #[test]
    fn oracle_solve_requires_groundtruth() {
        let inst = small_instance(4);
        let cfg = SolverConfig {
            init_mode: InitMode::Oracle,
            ..SolverConfig::default()
        };
        assert!(matches!(solve(&inst.obs, 2, &cfg, None), Err(Error::NoGroundTruth(_))));
    }

    #[test]
    fn divergence_is_reported_with_partial_trace() {
        let inst = generate_instance(30, 2, 0.5, 0.01, 3).unwrap();
        let cfg = SolverConfig {
            step_coeff: 1e6,
            line_search: false,
            max_iters: Some(500),
            ..SolverConfig::default()
        };
        match solve(&inst.obs, 2, &cfg, None) {
            Err(Error::Diverged { iteration, partial }) => {
                assert!(iteration >= 1);
                assert!(!partial.traces.is_empty());
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn invalid_config_is_rejected() {
        let inst = small_instance(5);
        for cfg in [
            SolverConfig { lambda_coeff: 0.0, ..Default::default() },
            SolverConfig { trace_every: 0, ..Default::default() },
            SolverConfig { grad_tol: f64::NAN, ..Default::default() },
        ] {
            assert!(matches!(solve(&inst.obs, 2, &cfg, None), Err(Error::InvalidParameter { .. })));
        }
    }
}
