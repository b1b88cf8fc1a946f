//! Dense linear-algebra helpers shared by the solvers and diagnostics.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};

/// Thin SVD `A = U diag(s) V^T` with singular values sorted descending.
///
/// Signs are fixed so the first entry of each left singular vector with
/// magnitude above 1e-12 is positive (the right vector is flipped with it).
#[derive(Debug, Clone)]
pub struct SortedSvd {
    pub u: DMatrix<f64>,
    pub singular_values: DVector<f64>,
    pub v: DMatrix<f64>,
}

impl SortedSvd {
    pub fn new(a: &DMatrix<f64>) -> Self {
        let svd = a.clone().svd(true, true);
        let u = svd.u.expect("requested U");
        let v_t = svd.v_t.expect("requested V^T");
        let s = svd.singular_values;
        let mut order: Vec<usize> = (0..s.len()).collect();
        order.sort_by(|&a, &b| s[b].total_cmp(&s[a]));

        let k = s.len();
        let mut u_sorted = DMatrix::zeros(u.nrows(), k);
        let mut v_sorted = DMatrix::zeros(v_t.ncols(), k);
        let mut s_sorted = DVector::zeros(k);
        for (dst, &src) in order.iter().enumerate() {
            let mut uc = u.column(src).into_owned();
            let mut vc = v_t.row(src).transpose();
            if let Some(first) = uc.iter().find(|x| x.abs() > 1e-12) {
                if *first < 0.0 {
                    uc.neg_mut();
                    vc.neg_mut();
                }
            }
            u_sorted.set_column(dst, &uc);
            v_sorted.set_column(dst, &vc);
            s_sorted[dst] = s[src];
        }
        Self {
            u: u_sorted,
            singular_values: s_sorted,
            v: v_sorted,
        }
    }

    /// Keeps the leading `r` triplets.
    pub fn truncate(mut self, r: usize) -> Self {
        let r = r.min(self.singular_values.len());
        self.u = self.u.columns(0, r).into_owned();
        self.v = self.v.columns(0, r).into_owned();
        self.singular_values = self.singular_values.rows(0, r).into_owned();
        self
    }
}

/// Largest singular value.
pub fn spectral_norm(a: &DMatrix<f64>) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    a.singular_values().max()
}

/// Sum of singular values.
pub fn nuclear_norm(a: &DMatrix<f64>) -> f64 {
    a.singular_values().sum()
}

/// `||A B^T||` without forming the product: `A = Qa Ra`, `B = Qb Rb`,
/// so the spectral norm equals that of the small `Ra Rb^T`.
pub fn spectral_norm_of_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    debug_assert_eq!(a.ncols(), b.ncols());
    let ra = a.clone().qr().r();
    let rb = b.clone().qr().r();
    spectral_norm(&(ra * rb.transpose()))
}

/// Orthonormal basis for the column span of `a` (thin Householder QR).
pub fn orthonormalize(a: &DMatrix<f64>) -> DMatrix<f64> {
    a.clone().qr().q()
}

/// `||Q^T Q - I||_F`.
pub fn orthonormality_defect(q: &DMatrix<f64>) -> f64 {
    let gram = q.transpose() * q;
    (gram - DMatrix::identity(q.ncols(), q.ncols())).norm()
}

/// Fixed seed for the random start of [`top_singular_subspace`]; the
/// result is a deterministic function of the operator.
const SUBSPACE_START_SEED: u64 = 0x5EED_5B5C_0DE5_7A27;

/// Leading `r` singular triplets of an implicit `rows x cols` operator.
///
/// Block subspace iteration with `r + oversample` columns, re-orthonormalized
/// every half step, followed by a Rayleigh–Ritz SVD of the projected
/// operator. Stops when the leading `r` Ritz values change by less than
/// `tol` relative, or after `max_iters` rounds.
#[allow(clippy::too_many_arguments)]
pub fn top_singular_subspace(
    apply: impl Fn(&DMatrix<f64>) -> DMatrix<f64>,
    apply_t: impl Fn(&DMatrix<f64>) -> DMatrix<f64>,
    rows: usize,
    cols: usize,
    r: usize,
    oversample: usize,
    tol: f64,
    max_iters: usize,
) -> SortedSvd {
    let k = (r + oversample).min(rows).min(cols);
    let mut rng = ChaCha20Rng::seed_from_u64(SUBSPACE_START_SEED);
    let start = DMatrix::from_fn(cols, k, |_, _| StandardNormal.sample(&mut rng));
    let mut q = orthonormalize(&apply(&start));
    let mut previous: Option<DVector<f64>> = None;
    let mut ritz = rayleigh_ritz(&q, &apply_t);
    for _ in 0..max_iters {
        let w = orthonormalize(&apply_t(&q));
        q = orthonormalize(&apply(&w));
        ritz = rayleigh_ritz(&q, &apply_t);
        let lead = ritz.singular_values.rows(0, r).into_owned();
        if let Some(prev) = &previous {
            let scale = lead[0].max(f64::MIN_POSITIVE);
            if (&lead - prev).amax() <= tol * scale {
                break;
            }
        }
        previous = Some(lead);
    }
    ritz.truncate(r)
}

fn rayleigh_ritz(
    q: &DMatrix<f64>,
    apply_t: &impl Fn(&DMatrix<f64>) -> DMatrix<f64>,
) -> SortedSvd {
    // A^T Q = V S W^T  =>  Q^T A = W S V^T  =>  A ~ (Q W) S V^T
    let at_q = apply_t(q);
    let small = SortedSvd::new(&at_q);
    SortedSvd {
        u: q * small.v,
        singular_values: small.singular_values,
        v: small.u,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sorted_svd_reconstructs_and_sorts() {
        let a = DMatrix::from_row_slice(3, 3, &[1.0, 2.0, 0.0, 0.0, 3.0, 1.0, 4.0, 0.0, 1.0]);
        let svd = SortedSvd::new(&a);
        let s = &svd.singular_values;
        assert!(s[0] >= s[1] && s[1] >= s[2]);
        let rec = &svd.u * DMatrix::from_diagonal(s) * svd.v.transpose();
        assert!((rec - a).norm() < 1e-12);
    }

    #[test]
    fn product_norm_matches_dense() {
        let a = DMatrix::from_fn(7, 3, |i, j| ((i * 3 + j) as f64).sin());
        let b = DMatrix::from_fn(6, 3, |i, j| ((i + 2 * j) as f64).cos());
        let dense = spectral_norm(&(&a * b.transpose()));
        assert!((spectral_norm_of_product(&a, &b) - dense).abs() < 1e-12 * dense);
    }

    #[test]
    fn subspace_iteration_recovers_low_rank() {
        let x = DMatrix::from_fn(30, 2, |i, j| ((i + 1) as f64 * (j + 1) as f64).sin());
        let y = DMatrix::from_fn(25, 2, |i, j| ((i * 2 + j) as f64).cos());
        let l = &x * y.transpose();
        let svd = top_singular_subspace(|m| &l * m, |m| l.transpose() * m, 30, 25, 2, 5, 1e-14, 50);
        let rec = &svd.u * DMatrix::from_diagonal(&svd.singular_values) * svd.v.transpose();
        assert!((rec - &l).norm() < 1e-10 * l.norm());
    }
}
