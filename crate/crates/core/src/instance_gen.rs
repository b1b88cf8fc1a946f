//! Synthetic problem instances and model diagnostics.
//!
//! An instance is fully determined by its [`InstanceDescriptor`]: the
//! groundtruth `L* = X* Y*^T` is built from two random orthonormal `n x r`
//! matrices (optionally scaled by an explicit spectrum), every index is
//! observed independently with probability `p`, and noise is drawn only on
//! the observed entries. Instances are persisted as descriptors and
//! regenerated, never as raw matrices.
//!
//! Random streams (see [`crate::rng`]): left factor, right factor, mask and
//! noise each use their own ChaCha20 stream under the instance seed. Gaussian
//! variates come from `rand_distr::StandardNormal` (ziggurat method); the
//! mask draws one uniform per index in row-major order.

use std::hash::{Hash, Hasher};

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::certificate::factored_svd;
use crate::error::{invalid, Error, Result};
use crate::linalg::{orthonormality_defect, orthonormalize, SortedSvd};
use crate::masked_ops::{ObservationSet, SparseResidual};
use crate::rng::{stream, Purpose};

pub const GENERATOR_VERSION: u32 = 1;

/// Entrywise noise distribution; all variants have standard deviation `sigma`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    #[default]
    Gaussian,
    /// Uniform on `[-sqrt(3) sigma, sqrt(3) sigma]`.
    Uniform,
    /// `+-sigma` with equal probability.
    Rademacher,
}

impl NoiseKind {
    fn is_default(&self) -> bool {
        *self == NoiseKind::Gaussian
    }

    fn sample(&self, rng: &mut impl Rng, sigma: f64) -> f64 {
        match self {
            NoiseKind::Gaussian => {
                let z: f64 = StandardNormal.sample(rng);
                sigma * z
            }
            NoiseKind::Uniform => sigma * 3f64.sqrt() * rng.random_range(-1.0..1.0),
            NoiseKind::Rademacher => {
                if rng.random::<bool>() {
                    sigma
                } else {
                    -sigma
                }
            }
        }
    }
}

/// The persisted form of an instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceDescriptor {
    pub n: usize,
    pub r: usize,
    pub p: f64,
    pub sigma: f64,
    pub seed: u64,
    pub generator_version: u32,
    #[serde(default, skip_serializing_if = "NoiseKind::is_default")]
    pub noise: NoiseKind,
    /// Singular values of `L*`; all ones when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spectrum: Option<Vec<f64>>,
}

impl InstanceDescriptor {
    pub fn new(n: usize, r: usize, p: f64, sigma: f64, seed: u64) -> Self {
        Self {
            n,
            r,
            p,
            sigma,
            seed,
            generator_version: GENERATOR_VERSION,
            noise: NoiseKind::Gaussian,
            spectrum: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(invalid("n", "must be at least 1"));
        }
        if self.r == 0 || self.r > self.n {
            return Err(invalid("r", format!("need 1 <= r <= n, got r = {}", self.r)));
        }
        if !(self.p > 0.0 && self.p <= 1.0) {
            return Err(invalid("p", format!("need 0 < p <= 1, got {}", self.p)));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(invalid("sigma", format!("need sigma >= 0, got {}", self.sigma)));
        }
        if self.generator_version != GENERATOR_VERSION {
            return Err(invalid(
                "generator_version",
                format!(
                    "descriptor has version {}, this build generates version {}",
                    self.generator_version, GENERATOR_VERSION
                ),
            ));
        }
        if let Some(s) = &self.spectrum {
            if s.len() != self.r || s.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
                return Err(invalid("spectrum", "need r positive singular values"));
            }
        }
        Ok(())
    }

    pub fn generate(&self) -> Result<ProblemInstance> {
        self.validate()?;
        let (n, r) = (self.n, self.r);
        let mut x_star = random_orthonormal(n, r, &mut stream(self.seed, Purpose::LeftFactor))?;
        let mut y_star = random_orthonormal(n, r, &mut stream(self.seed, Purpose::RightFactor))?;
        if let Some(spectrum) = &self.spectrum {
            for (k, s) in spectrum.iter().enumerate() {
                let root = s.sqrt();
                x_star.column_mut(k).scale_mut(root);
                y_star.column_mut(k).scale_mut(root);
            }
        }

        let mut mask_rng = stream(self.seed, Purpose::Mask);
        let mut noise_rng = stream(self.seed, Purpose::Noise);
        let mut entries = Vec::with_capacity((self.p * (n * n) as f64) as usize + n);
        let mut noise = Vec::with_capacity(entries.capacity());
        let mut x_row = vec![0.0; r];
        for i in 0..n {
            for (k, v) in x_row.iter_mut().enumerate() {
                *v = x_star[(i, k)];
            }
            for j in 0..n {
                if mask_rng.random::<f64>() < self.p {
                    let e = self.noise.sample(&mut noise_rng, self.sigma);
                    let l: f64 = (0..r).map(|k| x_row[k] * y_star[(j, k)]).sum();
                    entries.push((i, j, l + e));
                    noise.push(e);
                }
            }
        }
        let obs = ObservationSet::from_sorted_unchecked(n, n, entries);

        let svd = factored_svd(&x_star, &y_star)?;
        let s = &svd.singular_values;
        let kappa = s[0] / s[r - 1];
        let mu = incoherence(&svd.u)?.max(incoherence(&svd.v)?);

        Ok(ProblemInstance {
            descriptor: self.clone(),
            x_star,
            y_star,
            obs,
            noise,
            sigma_max: s[0],
            sigma_min: s[r - 1],
            kappa,
            mu,
        })
    }
}

/// A generated instance: groundtruth factors, observations and noise on the index set.
#[derive(Debug, Clone)]
pub struct ProblemInstance {
    pub descriptor: InstanceDescriptor,
    pub x_star: DMatrix<f64>,
    pub y_star: DMatrix<f64>,
    pub obs: ObservationSet,
    /// `E_ij` for each observed entry, parallel to `obs` in canonical order.
    noise: Vec<f64>,
    pub sigma_max: f64,
    pub sigma_min: f64,
    pub kappa: f64,
    pub mu: f64,
}

impl ProblemInstance {
    pub fn n(&self) -> usize {
        self.descriptor.n
    }

    pub fn r(&self) -> usize {
        self.descriptor.r
    }

    pub fn sigma(&self) -> f64 {
        self.descriptor.sigma
    }

    /// `L* = X* Y*^T`, dense.
    pub fn l_star(&self) -> DMatrix<f64> {
        &self.x_star * self.y_star.transpose()
    }

    /// `P_Omega(E)`.
    pub fn noise_on_omega(&self) -> SparseResidual<'_> {
        self.obs
            .with_values(self.noise.clone())
            .expect("noise is parallel to the observation set")
    }

    pub fn ground_truth(&self) -> GroundTruth<'_> {
        GroundTruth {
            x_star: &self.x_star,
            y_star: &self.y_star,
            sigma: self.descriptor.sigma,
            sigma_min: self.sigma_min,
        }
    }

    /// Hash of the observation set (indices and value bits), stable within one build.
    pub fn obs_checksum(&self) -> u64 {
        let mut h = std::hash::DefaultHasher::new();
        self.obs.shape().hash(&mut h);
        for (i, j, v) in self.obs.entries() {
            (i, j, v.to_bits()).hash(&mut h);
        }
        h.finish()
    }
}

/// Groundtruth handed to the solvers for error reporting.
#[derive(Debug, Clone, Copy)]
pub struct GroundTruth<'a> {
    pub x_star: &'a DMatrix<f64>,
    pub y_star: &'a DMatrix<f64>,
    pub sigma: f64,
    pub sigma_min: f64,
}

pub fn generate_instance(n: usize, r: usize, p: f64, sigma: f64, seed: u64) -> Result<ProblemInstance> {
    InstanceDescriptor::new(n, r, p, sigma, seed).generate()
}

/// Haar-distributed `n x r` matrix with orthonormal columns: QR of a
/// Gaussian matrix with the signs of `diag(R)` absorbed into `Q`.
pub fn random_orthonormal(n: usize, r: usize, rng: &mut impl Rng) -> Result<DMatrix<f64>> {
    if r > n {
        return Err(invalid("r", format!("r = {r} exceeds n = {n}")));
    }
    let g = DMatrix::from_fn(n, r, |_, _| StandardNormal.sample(rng));
    let qr = g.qr();
    let mut q = qr.q();
    let rmat = qr.r();
    for k in 0..r {
        if rmat[(k, k)] < 0.0 {
            q.column_mut(k).neg_mut();
        }
    }
    // One re-orthonormalization pass tightens ||Q^T Q - I|| to machine precision.
    Ok(if orthonormality_defect(&q) > 1e-13 {
        orthonormalize(&q)
    } else {
        q
    })
}

/// `(n/r) * max_i ||row_i(U)||^2`, the smallest `mu` for which `U` is `mu`-incoherent.
pub fn incoherence(u: &DMatrix<f64>) -> Result<f64> {
    let defect = orthonormality_defect(u);
    if defect > 1e-8 {
        return Err(Error::NotOrthonormal { deviation: defect });
    }
    let (n, r) = u.shape();
    let max_row = u
        .row_iter()
        .map(|row| row.norm_squared())
        .fold(0.0, f64::max);
    Ok(n as f64 / r as f64 * max_row)
}

/// `sigma_1(L) / sigma_r(L)` from a full SVD.
pub fn condition_number(l: &DMatrix<f64>, r: usize) -> Result<f64> {
    if r == 0 || r > l.nrows().min(l.ncols()) {
        return Err(invalid("r", format!("need 1 <= r <= min(shape), got {r}")));
    }
    let s = SortedSvd::new(l).singular_values;
    let (sigma_1, sigma_r) = (s[0], s[r - 1]);
    if !(sigma_r > 1e-12 * sigma_1) {
        return Err(Error::RankDeficient {
            rank: r,
            sigma_r,
            sigma_1,
        });
    }
    Ok(sigma_1 / sigma_r)
}
