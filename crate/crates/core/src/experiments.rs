//! Error metrics, parameter sweeps, log-log slope fits and the tuning comparison.
//!
//! Sweep CSV columns:
//! `mode,swept_param,swept_value,trial,seed,rel_fro,rel_spec,rel_inf,grad_norm,iterations,wall_time_s,status`
//! plus `proximity_fro` in proximity mode. `proximity_fro` is
//! `||L_ncvx - L_cvx||_F / ||L*||_F`, on the same scale as `rel_fro`.
//!
//! The `n_sweep` slope is fitted against `sqrt(n)`, so the expected slope is 1.

use std::collections::HashSet;
use std::io::Write;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::convex::{solve_convex_sqrt, solve_vanilla, ConvexOptions};
use crate::error::{invalid, Error, Result};
use crate::instance_gen::{InstanceDescriptor, ProblemInstance};
use crate::linalg::{spectral_norm, spectral_norm_of_product};
use crate::rng::derive_seed;
use crate::solver::{solve, SolverConfig};

/// `||L_hat - L*|| / ||L*||` in three norms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorMetrics {
    pub rel_fro: f64,
    pub rel_spec: f64,
    pub rel_inf: f64,
}

impl ErrorMetrics {
    fn failed() -> Self {
        Self {
            rel_fro: f64::NAN,
            rel_spec: f64::NAN,
            rel_inf: f64::NAN,
        }
    }
}

fn max_abs(a: &DMatrix<f64>) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

/// Metrics of `X Y^T` against `X* Y*^T`; the spectral norms use the rank-`2r`
/// factorization `[X, -X*] [Y, Y*]^T` of the difference.
pub fn error_metrics(
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    x_star: &DMatrix<f64>,
    y_star: &DMatrix<f64>,
) -> ErrorMetrics {
    let l_star = x_star * y_star.transpose();
    let diff = x * y.transpose() - &l_star;
    let (n, r) = x.shape();
    let r_star = x_star.ncols();
    let mut a = DMatrix::zeros(n, r + r_star);
    let mut b = DMatrix::zeros(y.nrows(), r + r_star);
    a.columns_mut(0, r).copy_from(x);
    a.columns_mut(r, r_star).copy_from(&(-x_star));
    b.columns_mut(0, r).copy_from(y);
    b.columns_mut(r, r_star).copy_from(y_star);
    ErrorMetrics {
        rel_fro: diff.norm() / l_star.norm(),
        rel_spec: spectral_norm_of_product(&a, &b) / spectral_norm_of_product(x_star, y_star),
        rel_inf: max_abs(&diff) / max_abs(&l_star),
    }
}

/// Metrics of a dense estimate.
pub fn error_metrics_dense(l_hat: &DMatrix<f64>, l_star: &DMatrix<f64>) -> ErrorMetrics {
    let diff = l_hat - l_star;
    ErrorMetrics {
        rel_fro: diff.norm() / l_star.norm(),
        rel_spec: spectral_norm(&diff) / spectral_norm(l_star),
        rel_inf: max_abs(&diff) / max_abs(l_star),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogLogFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

/// OLS of `log y` on `log x`.
pub fn fit_loglog_slope(xs: &[f64], ys: &[f64]) -> Result<LogLogFit> {
    if xs.len() != ys.len() {
        return Err(invalid("ys", format!("length {} differs from xs length {}", ys.len(), xs.len())));
    }
    if xs.len() < 3 {
        return Err(invalid("xs", format!("need at least 3 points, got {}", xs.len())));
    }
    for (row, (&x, &y)) in xs.iter().zip(ys).enumerate() {
        for value in [x, y] {
            if !(value > 0.0 && value.is_finite()) {
                return Err(Error::NonPositive { row, value });
            }
        }
    }
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let k = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / k;
    let my = ly.iter().sum::<f64>() / k;
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ly.iter().map(|y| (y - my).powi(2)).sum();
    if sxx == 0.0 {
        return Err(invalid("xs", "all x values are equal"));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = lx
        .iter()
        .zip(&ly)
        .map(|(x, y)| (y - intercept - slope * x).powi(2))
        .sum();
    let r_squared = if syy == 0.0 { 1.0 } else { 1.0 - sse / syy };
    Ok(LogLogFit {
        slope,
        intercept,
        r_squared,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepMode {
    SigmaSweep,
    NSweep,
    PSweep,
    /// Sweeps `sigma` and also solves the convex program.
    Proximity,
}

impl SweepMode {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::SigmaSweep => "sigma_sweep",
            Self::NSweep => "n_sweep",
            Self::PSweep => "p_sweep",
            Self::Proximity => "proximity",
        }
    }

    pub fn swept_param(self) -> &'static str {
        match self {
            Self::SigmaSweep | Self::Proximity => "sigma",
            Self::NSweep => "n",
            Self::PSweep => "p",
        }
    }

    /// Abscissa of the log-log fit for a swept value.
    pub fn fit_abscissa(self, value: f64) -> f64 {
        match self {
            Self::NSweep => value.sqrt(),
            _ => value,
        }
    }
}

/// `k` points from `lo` to `hi`, evenly spaced in log scale.
pub fn logspace(lo: f64, hi: f64, k: usize) -> Vec<f64> {
    if k == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.log10(), hi.log10());
    (0..k)
        .map(|i| 10f64.powf(a + (b - a) * i as f64 / (k - 1) as f64))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub mode: SweepMode,
    /// Fixed parameters; the swept one is overridden per grid point.
    pub n: usize,
    pub r: usize,
    pub p: f64,
    pub sigma: f64,
    pub grid: Vec<f64>,
    pub trials: usize,
    pub base_seed: u64,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub convex: ConvexOptions,
}

pub const PRESETS: [&str; 8] = [
    "fig1a",
    "fig1b",
    "fig1c",
    "fig2-proximity",
    "fig1a-paper",
    "fig1b-paper",
    "fig1c-paper",
    "fig2-proximity-paper",
];

impl SweepSpec {
    /// Named sweep presets. The plain names are desk-scale; `-paper` variants
    /// use the published grid sizes and 20 trials.
    pub fn preset(name: &str) -> Result<Self> {
        let base = |mode, n, p, sigma, grid, trials| Self {
            mode,
            n,
            r: 5,
            p,
            sigma,
            grid,
            trials,
            base_seed: 2024,
            solver: SolverConfig::default(),
            convex: ConvexOptions::default(),
        };
        Ok(match name {
            "fig1a" => base(SweepMode::SigmaSweep, 500, 0.5, 0.0, logspace(1e-4, 1e-1, 7), 5),
            "fig1b" => base(SweepMode::NSweep, 0, 0.5, 1e-4, vec![100.0, 200.0, 400.0, 800.0], 3),
            "fig1c" => base(SweepMode::PSweep, 400, 0.0, 1e-4, logspace(0.1, 0.8, 5), 3),
            "fig2-proximity" => base(SweepMode::Proximity, 200, 0.5, 0.0, vec![1e-5, 1e-4, 1e-3], 1),
            "fig1a-paper" => base(SweepMode::SigmaSweep, 500, 0.5, 0.0, logspace(1e-4, 1e-1, 7), 20),
            "fig1b-paper" => base(
                SweepMode::NSweep,
                0,
                0.5,
                1e-4,
                vec![400.0, 900.0, 1600.0, 2500.0, 3600.0],
                20,
            ),
            "fig1c-paper" => base(SweepMode::PSweep, 2000, 0.0, 1e-4, logspace(0.1, 0.8, 8), 20),
            "fig2-proximity-paper" => base(SweepMode::Proximity, 200, 0.5, 0.0, logspace(1e-5, 1e-3, 5), 20),
            other => return Err(invalid("preset", format!("unknown preset `{other}`; known: {}", PRESETS.join(", ")))),
        })
    }

    pub fn row_seed(&self, point: usize, trial: usize) -> u64 {
        derive_seed(self.base_seed, &[point as u64, trial as u64])
    }

    /// Instance parameters at one grid point.
    pub fn descriptor(&self, point: usize, trial: usize) -> InstanceDescriptor {
        let v = self.grid[point];
        let (mut n, mut p, mut sigma) = (self.n, self.p, self.sigma);
        match self.mode {
            SweepMode::SigmaSweep | SweepMode::Proximity => sigma = v,
            SweepMode::NSweep => n = v as usize,
            SweepMode::PSweep => p = v,
        }
        InstanceDescriptor::new(n, self.r, p, sigma, self.row_seed(point, trial))
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid.is_empty() {
            return Err(invalid("grid", "must not be empty"));
        }
        if !self.grid.windows(2).all(|w| w[0] < w[1]) {
            return Err(invalid("grid", "must be strictly increasing"));
        }
        if self.trials == 0 {
            return Err(invalid("trials", "must be at least 1"));
        }
        if self.mode == SweepMode::NSweep && self.grid.iter().any(|v| v.fract() != 0.0 || *v < 1.0) {
            return Err(invalid("grid", "n values must be positive integers"));
        }
        self.solver.validate()?;
        for point in 0..self.grid.len() {
            self.descriptor(point, 0).validate()?;
        }
        let mut seen = HashSet::new();
        for point in 0..self.grid.len() {
            for trial in 0..self.trials {
                if !seen.insert(self.row_seed(point, trial)) {
                    return Err(invalid("base_seed", format!("row seed collision at point {point}, trial {trial}")));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub mode: SweepMode,
    pub swept_param: String,
    pub swept_value: f64,
    pub trial: usize,
    pub seed: u64,
    pub rel_fro: f64,
    pub rel_spec: f64,
    pub rel_inf: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub wall_time_s: f64,
    /// `ok`, `diverged`, or `failed: <reason>`.
    pub status: String,
    pub proximity_fro: Option<f64>,
}

impl SweepRow {
    pub fn is_ok(&self) -> bool {
        self.status == "ok"
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointAggregate {
    pub swept_value: f64,
    pub rows_ok: usize,
    pub mean_rel_fro: f64,
    pub mean_rel_spec: f64,
    pub mean_rel_inf: f64,
    pub mean_proximity_fro: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub spec: SweepSpec,
    /// Ordered by (grid index, trial).
    pub rows: Vec<SweepRow>,
    pub aggregates: Vec<PointAggregate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlopeSummary {
    pub mode: SweepMode,
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub rows_used: usize,
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, count) = values.fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
    if count == 0 {
        f64::NAN
    } else {
        sum / count as f64
    }
}

/// Per-point means over successful rows.
pub fn aggregate(rows: &[SweepRow], grid: &[f64]) -> Vec<PointAggregate> {
    grid.iter()
        .map(|&v| {
            let ok: Vec<&SweepRow> = rows.iter().filter(|r| r.swept_value == v && r.is_ok()).collect();
            let has_proximity = ok.iter().any(|r| r.proximity_fro.is_some());
            PointAggregate {
                swept_value: v,
                rows_ok: ok.len(),
                mean_rel_fro: mean(ok.iter().map(|r| r.rel_fro)),
                mean_rel_spec: mean(ok.iter().map(|r| r.rel_spec)),
                mean_rel_inf: mean(ok.iter().map(|r| r.rel_inf)),
                mean_proximity_fro: has_proximity.then(|| mean(ok.iter().filter_map(|r| r.proximity_fro))),
            }
        })
        .collect()
}

impl SweepResult {
    pub fn csv_header(&self) -> Vec<&'static str> {
        let mut h = vec![
            "mode",
            "swept_param",
            "swept_value",
            "trial",
            "seed",
            "rel_fro",
            "rel_spec",
            "rel_inf",
            "grad_norm",
            "iterations",
            "wall_time_s",
            "status",
        ];
        if self.spec.mode == SweepMode::Proximity {
            h.push("proximity_fro");
        }
        h
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(self.csv_header())?;
        for row in &self.rows {
            let mut rec = vec![
                row.mode.as_str().to_string(),
                row.swept_param.clone(),
                row.swept_value.to_string(),
                row.trial.to_string(),
                row.seed.to_string(),
                row.rel_fro.to_string(),
                row.rel_spec.to_string(),
                row.rel_inf.to_string(),
                row.grad_norm.to_string(),
                row.iterations.to_string(),
                row.wall_time_s.to_string(),
                row.status.clone(),
            ];
            if self.spec.mode == SweepMode::Proximity {
                rec.push(row.proximity_fro.map_or("NaN".to_string(), |v| v.to_string()));
            }
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Log-log fit of the per-point mean `rel_fro` against the swept value
    /// (`sqrt(n)` for `n_sweep`), over points with at least one successful row.
    pub fn slope(&self) -> Result<SlopeSummary> {
        let used: Vec<&PointAggregate> = self.aggregates.iter().filter(|a| a.rows_ok > 0).collect();
        let xs: Vec<f64> = used.iter().map(|a| self.spec.mode.fit_abscissa(a.swept_value)).collect();
        let ys: Vec<f64> = used.iter().map(|a| a.mean_rel_fro).collect();
        let fit = fit_loglog_slope(&xs, &ys)?;
        Ok(SlopeSummary {
            mode: self.spec.mode,
            slope: fit.slope,
            intercept: fit.intercept,
            r_squared: fit.r_squared,
            rows_used: used.iter().map(|a| a.rows_ok).sum(),
        })
    }
}

fn run_row(spec: &SweepSpec, point: usize, trial: usize) -> SweepRow {
    let desc = spec.descriptor(point, trial);
    let started = std::time::Instant::now();
    let mut row = SweepRow {
        mode: spec.mode,
        swept_param: spec.mode.swept_param().to_string(),
        swept_value: spec.grid[point],
        trial,
        seed: desc.seed,
        rel_fro: f64::NAN,
        rel_spec: f64::NAN,
        rel_inf: f64::NAN,
        grad_norm: f64::NAN,
        iterations: 0,
        wall_time_s: 0.0,
        status: "ok".to_string(),
        proximity_fro: None,
    };
    let outcome = (|| -> Result<()> {
        let inst = desc.generate()?;
        let report = solve(&inst.obs, inst.r(), &spec.solver, Some(inst.ground_truth()))?;
        let m = report.metrics.unwrap_or_else(ErrorMetrics::failed);
        row.rel_fro = m.rel_fro;
        row.rel_spec = m.rel_spec;
        row.rel_inf = m.rel_inf;
        row.grad_norm = report.best_grad_norm;
        row.iterations = report.iterations();
        if spec.mode == SweepMode::Proximity {
            let cvx = solve_convex_sqrt(&inst.obs, report.lambda, &spec.convex, None)?;
            let l_star_norm = (&inst.x_star * inst.y_star.transpose()).norm();
            row.proximity_fro = Some((report.estimate() - &cvx.l_hat).norm() / l_star_norm);
        }
        Ok(())
    })();
    match outcome {
        Ok(()) => {}
        Err(Error::Diverged { iteration, .. }) => {
            row.status = "diverged".to_string();
            row.iterations = iteration;
        }
        Err(e) => row.status = format!("failed: {e}"),
    }
    row.wall_time_s = started.elapsed().as_secs_f64();
    if !row.is_ok() {
        log::warn!("sweep row point={point} trial={trial}: {}", row.status);
    }
    row
}

/// Runs every (grid point, trial) on up to `workers` threads; row order is
/// independent of completion order.
pub fn run_sweep(spec: &SweepSpec, workers: usize) -> Result<SweepResult> {
    spec.validate()?;
    let tasks: Vec<(usize, usize)> = (0..spec.grid.len())
        .flat_map(|p| (0..spec.trials).map(move |t| (p, t)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| invalid("workers", e.to_string()))?;
    let rows: Vec<SweepRow> = pool.install(|| tasks.par_iter().map(|&(p, t)| run_row(spec, p, t)).collect());
    let aggregates = aggregate(&rows, &spec.grid);
    Ok(SweepResult {
        spec: spec.clone(),
        rows,
        aggregates,
    })
}

/// Square-root MC against nuclear-norm least squares tuned with a supplied noise level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub n: usize,
    pub p_hat: f64,
    pub sigma_true: f64,
    /// Noise level used to tune the vanilla estimator.
    pub sigma_known: f64,
    pub lambda_sqrt: f64,
    /// `2 sigma_known sqrt(n p_hat)`.
    pub lambda_vanilla: f64,
    pub sqrt_mc: ErrorMetrics,
    pub sqrt_mc_grad_norm: f64,
    pub sqrt_mc_iterations: usize,
    pub vanilla: ErrorMetrics,
    pub vanilla_converged: bool,
    pub vanilla_iterations: usize,
    /// `lambda_vanilla = 0`: the vanilla estimator is unregularized.
    pub vanilla_degenerate: bool,
    pub vanilla_over_sqrt_mc: f64,
}

pub fn compare(
    instance: &ProblemInstance,
    sigma_known: f64,
    solver: &SolverConfig,
    convex: &ConvexOptions,
) -> Result<CompareReport> {
    if !(sigma_known >= 0.0 && sigma_known.is_finite()) {
        return Err(invalid("sigma_known", "must be non-negative and finite"));
    }
    let obs = &instance.obs;
    let n = instance.n();
    let p_hat = obs.p_hat();
    let report = solve(obs, instance.r(), solver, Some(instance.ground_truth()))?;
    let sqrt_mc = report.metrics.expect("groundtruth supplied");
    let lambda_vanilla = 2.0 * sigma_known * (n as f64 * p_hat).sqrt();
    let vanilla_degenerate = lambda_vanilla == 0.0;
    if vanilla_degenerate {
        log::warn!("compare: sigma_known = 0 makes the vanilla estimator unregularized");
    }
    let van = solve_vanilla(obs, lambda_vanilla, convex, None)?;
    let vanilla = error_metrics_dense(&van.l_hat, &instance.l_star());
    Ok(CompareReport {
        n,
        p_hat,
        sigma_true: instance.sigma(),
        sigma_known,
        lambda_sqrt: report.lambda,
        lambda_vanilla,
        sqrt_mc,
        sqrt_mc_grad_norm: report.best_grad_norm,
        sqrt_mc_iterations: report.iterations(),
        vanilla,
        vanilla_converged: van.converged,
        vanilla_iterations: van.iterations,
        vanilla_degenerate,
        vanilla_over_sqrt_mc: vanilla.rel_fro / sqrt_mc.rel_fro,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instance_gen::generate_instance;
    use proptest::prelude::*;

    #[test]
    fn metrics_of_exact_and_zero_estimates() {
        let inst = generate_instance(20, 2, 0.5, 0.0, 1).unwrap();
        let m = error_metrics(&inst.x_star, &inst.y_star, &inst.x_star, &inst.y_star);
        assert!(m.rel_fro < 1e-15 && m.rel_spec < 1e-7 && m.rel_inf < 1e-15);
        let z = DMatrix::zeros(20, 2);
        let m = error_metrics(&z, &z, &inst.x_star, &inst.y_star);
        for v in [m.rel_fro, m.rel_spec, m.rel_inf] {
            assert!((v - 1.0).abs() < 1e-12, "{v}");
        }
        let d = error_metrics_dense(&DMatrix::zeros(20, 20), &inst.l_star());
        assert!((d.rel_spec - 1.0).abs() < 1e-12);
    }

    #[test]
    fn single_entry_perturbation_inf_error() {
        let inst = generate_instance(12, 2, 0.5, 0.0, 2).unwrap();
        let l = inst.l_star();
        let sigma = 0.3;
        let mut l_hat = l.clone();
        l_hat[(0, 0)] += sigma;
        let m = error_metrics_dense(&l_hat, &l);
        assert!((m.rel_inf - sigma / max_abs(&l)).abs() < 1e-15);
        assert!((m.rel_fro - sigma / l.norm()).abs() < 1e-12);
    }

    #[test]
    fn factored_and_dense_metrics_agree() {
        let a = generate_instance(25, 3, 0.5, 0.0, 1).unwrap();
        let b = generate_instance(25, 3, 0.5, 0.0, 2).unwrap();
        let f = error_metrics(&a.x_star, &a.y_star, &b.x_star, &b.y_star);
        let d = error_metrics_dense(&a.l_star(), &b.l_star());
        assert!((f.rel_fro - d.rel_fro).abs() < 1e-12);
        assert!((f.rel_spec - d.rel_spec).abs() < 1e-10);
        assert!((f.rel_inf - d.rel_inf).abs() < 1e-12);
    }

    #[test]
    fn exact_power_laws_fit_exactly() {
        let xs = [1.0, 2.0, 4.0, 8.0, 16.0];
        let ys: Vec<f64> = xs.iter().map(|x| 3.0 * x).collect();
        let fit = fit_loglog_slope(&xs, &ys).unwrap();
        assert!((fit.slope - 1.0).abs() < 1e-12 && (fit.r_squared - 1.0).abs() < 1e-12);
        assert!((fit.intercept - 3f64.ln()).abs() < 1e-12);
        let ys: Vec<f64> = xs.iter().map(|x| 0.2 * x.powf(-0.5)).collect();
        assert!((fit_loglog_slope(&xs, &ys).unwrap().slope + 0.5).abs() < 1e-12);
    }

    #[test]
    fn noisy_linear_law_fits_near_one() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let xs = logspace(1e-4, 1e-1, 10);
        let ys: Vec<f64> = xs.iter().map(|x| 2.0 * x * (1.0 + rng.random_range(-0.01..0.01))).collect();
        let s = fit_loglog_slope(&xs, &ys).unwrap().slope;
        assert!((0.99..=1.01).contains(&s), "{s}");
    }

    #[test]
    fn fit_rejects_bad_input() {
        assert!(matches!(
            fit_loglog_slope(&[1.0, 2.0, 3.0], &[1.0, -2.0, 3.0]),
            Err(Error::NonPositive { row: 1, .. })
        ));
        assert!(fit_loglog_slope(&[1.0, 2.0], &[1.0, 2.0]).is_err());
    }

    proptest! {
        #[test]
        fn fit_recovers_any_power_law(c in 0.01f64..100.0, a in -3.0f64..3.0) {
            let xs = [0.5f64, 1.0, 3.0, 7.0];
            let ys: Vec<f64> = xs.iter().map(|x| c * x.powf(a)).collect();
            let fit = fit_loglog_slope(&xs, &ys).unwrap();
            prop_assert!((fit.slope - a).abs() < 1e-10);
        }
    }

    #[test]
    fn logspace_endpoints() {
        let g = logspace(1e-4, 1e-1, 7);
        assert_eq!(g.len(), 7);
        assert!((g[0] - 1e-4).abs() < 1e-18 && (g[6] - 1e-1).abs() < 1e-15);
        assert!((g[1] / g[0] - 10f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn presets_validate() {
        for name in PRESETS {
            SweepSpec::preset(name).unwrap().validate().unwrap();
        }
        assert!(SweepSpec::preset("nope").is_err());
    }

    #[test]
    fn spec_validation() {
        let mut spec = SweepSpec::preset("fig1a").unwrap();
        spec.grid = vec![1e-3, 1e-4];
        assert!(spec.validate().is_err());
        spec.grid = vec![1e-4];
        spec.trials = 0;
        assert!(spec.validate().is_err());
        let mut spec = SweepSpec::preset("fig1b").unwrap();
        spec.grid = vec![10.5, 20.0];
        assert!(spec.validate().is_err());
    }

    fn tiny_spec(mode: SweepMode) -> SweepSpec {
        SweepSpec {
            mode,
            n: 30,
            r: 2,
            p: 0.6,
            sigma: 1e-3,
            grid: match mode {
                SweepMode::NSweep => vec![20.0, 30.0, 40.0],
                SweepMode::PSweep => vec![0.5, 0.7, 0.9],
                _ => vec![1e-4, 1e-3, 1e-2],
            },
            trials: 2,
            base_seed: 5,
            solver: SolverConfig::default(),
            convex: ConvexOptions {
                tol: 1e-8,
                ..ConvexOptions::default()
            },
        }
    }

    #[test]
    fn sweep_rows_aggregates_and_csv() {
        let spec = tiny_spec(SweepMode::SigmaSweep);
        let res = run_sweep(&spec, 2).unwrap();
        assert_eq!(res.rows.len(), 6);
        for (k, row) in res.rows.iter().enumerate() {
            assert_eq!((row.swept_value, row.trial), (spec.grid[k / 2], k % 2));
        }
        for (agg, recomputed) in res.aggregates.iter().zip(aggregate(&res.rows, &spec.grid)) {
            assert!((agg.mean_rel_fro - recomputed.mean_rel_fro).abs() <= 1e-12);
        }
        let mut buf = Vec::new();
        res.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with(
            "mode,swept_param,swept_value,trial,seed,rel_fro,rel_spec,rel_inf,grad_norm,iterations,wall_time_s,status\n"
        ));
        assert_eq!(text.lines().count(), 7);
        let s = res.slope().unwrap();
        assert_eq!(s.rows_used, 6);
    }

    #[test]
    fn sweep_is_deterministic_up_to_wall_time() {
        let spec = tiny_spec(SweepMode::PSweep);
        let strip = |mut r: SweepResult| {
            for row in &mut r.rows {
                row.wall_time_s = 0.0;
            }
            let mut buf = Vec::new();
            r.write_csv(&mut buf).unwrap();
            buf
        };
        let a = strip(run_sweep(&spec, 1).unwrap());
        let b = strip(run_sweep(&spec, 3).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn proximity_sweep_has_extra_column() {
        let mut spec = tiny_spec(SweepMode::Proximity);
        spec.trials = 1;
        let res = run_sweep(&spec, 1).unwrap();
        let mut buf = Vec::new();
        res.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.lines().next().unwrap().ends_with(",status,proximity_fro"));
        assert!(res.rows.iter().all(|r| r.proximity_fro.is_some()));
    }

    #[test]
    fn failed_rows_are_recorded_and_excluded() {
        let mut spec = tiny_spec(SweepMode::SigmaSweep);
        spec.solver.step_coeff = 1e8;
        spec.solver.line_search = false;
        let res = run_sweep(&spec, 1).unwrap();
        assert!(res.rows.iter().all(|r| r.status == "diverged"));
        assert!(res.aggregates.iter().all(|a| a.rows_ok == 0));
        assert!(res.slope().is_err());
    }

    #[test]
    fn compare_flags_degenerate_tuning() {
        let inst = generate_instance(30, 2, 0.6, 0.0, 3).unwrap();
        let opts = ConvexOptions {
            tol: 1e-8,
            ..ConvexOptions::default()
        };
        let rep = compare(&inst, 0.0, &SolverConfig::default(), &opts).unwrap();
        assert!(rep.vanilla_degenerate);
        assert_eq!(rep.lambda_vanilla, 0.0);
    }
}
