//! Post-hoc optimality diagnostics for a factored solution.
//!
//! At a stationary point of the surrogate with `L = X Y^T = U S V^T`,
//!
//! ```text
//! theta^{-1} P_Omega(L - M) = -lambda (U V^T + R)
//! ```
//!
//! defines the residual matrix `R`. When `||P_T(R)||_F` is small and
//! `||P_{T^perp}(R)|| < 1/2`, `L` also solves the convex square-root program.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{shape_mismatch, Error, Result};
use crate::instance_gen::ProblemInstance;
use crate::linalg::{orthonormality_defect, spectral_norm, SortedSvd};
use crate::masked_ops::{debias, masked_frobenius, masked_residual, ObservationSet, SparseResidual};
use crate::solver::{gradient_g, theta_floor, FactorIterate, SolverConfig};

/// Largest `n` for which dense `n x n` diagnostics are formed.
pub const DENSE_LIMIT: usize = 1000;

/// Thin SVD of `X Y^T` via `X = Qx Rx`, `Y = Qy Ry` and an `r x r` SVD of `Rx Ry^T`.
pub fn factored_svd(x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<SortedSvd> {
    if x.ncols() != y.ncols() {
        return Err(shape_mismatch("factored_svd", (y.nrows(), x.ncols()), y.shape()));
    }
    let r = x.ncols();
    let qx = x.clone().qr();
    let qy = y.clone().qr();
    let core = SortedSvd::new(&(qx.r() * qy.r().transpose()));
    let s = &core.singular_values;
    if r == 0 || !(s[r - 1] > 1e-12 * s[0]) {
        return Err(Error::RankDeficient {
            rank: r,
            sigma_r: if r == 0 { 0.0 } else { s[r - 1] },
            sigma_1: if r == 0 { 0.0 } else { s[0] },
        });
    }
    Ok(SortedSvd {
        u: qx.q() * &core.u,
        singular_values: core.singular_values.clone(),
        v: qy.q() * &core.v,
    })
}

/// Tangent space `T = {U A^T + B V^T}` of the rank-`r` manifold at `U S V^T`.
#[derive(Debug, Clone)]
pub struct TangentSpace {
    pub u: DMatrix<f64>,
    pub v: DMatrix<f64>,
}

impl TangentSpace {
    pub fn new(u: DMatrix<f64>, v: DMatrix<f64>) -> Result<Self> {
        if u.ncols() != v.ncols() {
            return Err(shape_mismatch("tangent space", (v.nrows(), u.ncols()), v.shape()));
        }
        let deviation = orthonormality_defect(&u).max(orthonormality_defect(&v));
        if deviation > 1e-10 {
            return Err(Error::NotOrthonormal { deviation });
        }
        Ok(Self { u, v })
    }

    /// `U V^T`.
    pub fn uv_t(&self) -> DMatrix<f64> {
        &self.u * self.v.transpose()
    }
}

/// `(P_T(A), P_{T^perp}(A))` with `P_{T^perp}(A) = (I - U U^T) A (I - V V^T)`.
pub fn tangent_project(a: &DMatrix<f64>, ts: &TangentSpace) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let want = (ts.u.nrows(), ts.v.nrows());
    if a.shape() != want {
        return Err(shape_mismatch("tangent_project", want, a.shape()));
    }
    let ut_a = ts.u.transpose() * a;
    let left = a - &ts.u * &ut_a;
    let perp = &left - (&left * &ts.v) * ts.v.transpose();
    let pt = a - &perp;
    Ok((pt, perp))
}

/// `R = -(lambda theta)^{-1} P_Omega(L - M) - U V^T` and the quantities it was built from.
#[derive(Debug, Clone)]
pub struct ResidualMatrix {
    pub r: DMatrix<f64>,
    pub tangent: TangentSpace,
    pub singular_values: Vec<f64>,
    /// `||P_Omega(L - M)||_F`.
    pub theta: f64,
    /// Dense `P_Omega(L - M)`.
    pub masked_residual: DMatrix<f64>,
}

impl ResidualMatrix {
    /// `||theta^{-1} P_Omega(L - M) + lambda (U V^T + R)||_F`, zero up to rounding.
    pub fn identity_defect(&self, lambda: f64) -> f64 {
        (&self.masked_residual / self.theta + (self.tangent.uv_t() + &self.r) * lambda).norm()
    }
}

pub fn compute_residual_r(it: &FactorIterate, obs: &ObservationSet, lambda: f64) -> Result<ResidualMatrix> {
    let n = obs.n_rows().max(obs.n_cols());
    if n > DENSE_LIMIT {
        return Err(Error::TooLarge { n, limit: DENSE_LIMIT });
    }
    let floor = theta_floor(obs, SolverConfig::default().theta_floor_rel);
    let res = masked_residual(&it.x, &it.y, obs)?;
    let theta = masked_frobenius(&res);
    if theta <= floor {
        return Err(Error::Kink { residual_norm: theta, floor });
    }
    let svd = factored_svd(&it.x, &it.y)?;
    let tangent = TangentSpace::new(svd.u, svd.v)?;
    let dense = res.to_dense();
    let r = &dense * (-1.0 / (lambda * theta)) - tangent.uv_t();
    Ok(ResidualMatrix {
        r,
        tangent,
        singular_values: svd.singular_values.iter().copied().collect(),
        theta,
        masked_residual: dense,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimalityCertificate {
    pub lambda: f64,
    pub theta: f64,
    pub kappa_hat: f64,
    pub sigma_min_hat: f64,
    pub grad_norm: f64,
    /// `||P_T(R)||_F`.
    pub pt_r_fro: f64,
    /// `||P_{T^perp}(R)||`.
    pub ptperp_r_spec: f64,
    /// `70 kappa_hat sigma_min_hat^{-1/2} grad_norm`.
    pub pt_bound: f64,
    /// `(32 kappa_hat)^{-1/2}`.
    pub c_inj: f64,
    pub lemma6_pt_bound_ok: bool,
    pub lemma6_ptperp_ok: bool,
    /// `pt_bound - pt_r_fro`.
    pub pt_margin: f64,
    /// `1/2 - ptperp_r_spec`.
    pub ptperp_margin: f64,
    pub identity_defect: f64,
}

impl OptimalityCertificate {
    pub fn passed(&self) -> bool {
        self.lemma6_pt_bound_ok && self.lemma6_ptperp_ok
    }
}

/// Both residual inequalities, with `kappa_hat` and `sigma_min_hat` taken from the iterate's own spectrum.
pub fn check_certificate(it: &FactorIterate, obs: &ObservationSet, lambda: f64) -> Result<OptimalityCertificate> {
    let rm = compute_residual_r(it, obs, lambda)?;
    let (pt, perp) = tangent_project(&rm.r, &rm.tangent)?;
    let floor = theta_floor(obs, SolverConfig::default().theta_floor_rel);
    let grad_norm = gradient_g(&it.x, &it.y, obs, lambda, floor)?.grad_norm;
    let s = &rm.singular_values;
    let sigma_min_hat = s[s.len() - 1];
    let kappa_hat = s[0] / sigma_min_hat;
    let pt_r_fro = pt.norm();
    let ptperp_r_spec = spectral_norm(&perp);
    let pt_bound = 70.0 * kappa_hat / sigma_min_hat.sqrt() * grad_norm;
    Ok(OptimalityCertificate {
        lambda,
        theta: rm.theta,
        kappa_hat,
        sigma_min_hat,
        grad_norm,
        pt_r_fro,
        ptperp_r_spec,
        pt_bound,
        c_inj: (32.0 * kappa_hat).powf(-0.5),
        lemma6_pt_bound_ok: pt_r_fro <= pt_bound,
        lemma6_ptperp_ok: ptperp_r_spec < 0.5,
        pt_margin: pt_bound - pt_r_fro,
        ptperp_margin: 0.5 - ptperp_r_spec,
        identity_defect: rm.identity_defect(lambda),
    })
}

/// A spectral-norm inequality `lhs <= rhs`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundCheck {
    pub lhs: f64,
    pub rhs: f64,
    /// `lhs / rhs`, or 0 when `lhs = 0`.
    pub ratio: f64,
    pub ok: bool,
}

impl BoundCheck {
    fn new(lhs: f64, rhs: f64) -> Self {
        let ratio = if lhs == 0.0 { 0.0 } else { lhs / rhs };
        Self {
            lhs,
            rhs,
            ratio,
            ok: lhs <= rhs,
        }
    }
}

/// `(lambda / 16) n sqrt(p) sigma`, the level the regularization must dominate.
pub fn noise_level_bound(lambda: f64, sigma: f64, n: usize, p: f64) -> f64 {
    lambda / 16.0 * n as f64 * p.sqrt() * sigma
}

/// `||P_Omega(E)|| <= (lambda / 16) n sqrt(p_hat) sigma`.
pub fn check_noise_bound(
    noise: &SparseResidual<'_>,
    lambda: f64,
    sigma: f64,
    n: usize,
    p_hat: f64,
) -> Result<BoundCheck> {
    let (rows, cols) = noise.shape();
    if rows.max(cols) > DENSE_LIMIT {
        return Err(Error::TooLarge { n: rows.max(cols), limit: DENSE_LIMIT });
    }
    let lhs = spectral_norm(&noise.to_dense());
    Ok(BoundCheck::new(lhs, noise_level_bound(lambda, sigma, n, p_hat)))
}

/// `||P_Omega(XY^T - L*) - p_hat (XY^T - L*)|| <= (lambda / 16) n sqrt(p_hat) sigma`.
pub fn check_debias_bound(it: &FactorIterate, instance: &ProblemInstance, lambda: f64) -> Result<BoundCheck> {
    let n = instance.n();
    if n > DENSE_LIMIT {
        return Err(Error::TooLarge { n, limit: DENSE_LIMIT });
    }
    let diff = it.product() - instance.l_star();
    let lhs = spectral_norm(&debias(&diff, &instance.obs)?);
    let p_hat = instance.obs.p_hat();
    Ok(BoundCheck::new(lhs, noise_level_bound(lambda, instance.sigma(), n, p_hat)))
}

/// Certificate JSON: the Lemma-style checks plus optional groundtruth bounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertificateReport {
    pub n: usize,
    pub rank: usize,
    pub t_star: usize,
    /// `None` when the iterate fits the data exactly (no residual direction).
    pub certificate: Option<OptimalityCertificate>,
    pub kink: bool,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub noise_bound: Option<BoundCheck>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub debias_bound: Option<BoundCheck>,
}

/// Runs every applicable check on `it`; the kink case yields `certificate: None`.
pub fn certify(
    it: &FactorIterate,
    obs: &ObservationSet,
    lambda: f64,
    instance: Option<&ProblemInstance>,
) -> Result<CertificateReport> {
    let (certificate, kink) = match check_certificate(it, obs, lambda) {
        Ok(c) => (Some(c), false),
        Err(Error::Kink { .. }) => (None, true),
        Err(e) => return Err(e),
    };
    let (noise_bound, debias_bound) = match instance {
        Some(inst) => (
            Some(check_noise_bound(&inst.noise_on_omega(), lambda, inst.sigma(), inst.n(), obs.p_hat())?),
            Some(check_debias_bound(it, inst, lambda)?),
        ),
        None => (None, None),
    };
    Ok(CertificateReport {
        n: obs.n_rows(),
        rank: it.rank(),
        t_star: it.iter,
        certificate,
        kink,
        noise_bound,
        debias_bound,
    })
}
