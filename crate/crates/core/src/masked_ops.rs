//! Observation sets and the masked kernels the solvers are built on.
//!
//! An [`ObservationSet`] stores the observed entries of an `n_rows x n_cols`
//! matrix as row-major sorted triplets plus a per-row offset table. The
//! kernels here never form the dense product `X Y^T`; everything runs over
//! the observed index set in its canonical order, so summation order (and
//! therefore every bit of the output) is fixed.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{shape_mismatch, Error, Result};

/// Observed entries `M_ij` for `(i, j)` in the index set, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationSet {
    n_rows: usize,
    n_cols: usize,
    /// `row_offsets[i]..row_offsets[i + 1]` indexes the entries of row `i`.
    row_offsets: Vec<usize>,
    cols: Vec<usize>,
    values: Vec<f64>,
}

impl ObservationSet {
    /// Builds an observation set from unordered triplets.
    ///
    /// Triplets are sorted into row-major order. Duplicate or out-of-range
    /// indices are rejected, naming the offending pair.
    pub fn from_triplets(
        triplets: impl IntoIterator<Item = (usize, usize, f64)>,
        n_rows: usize,
        n_cols: usize,
    ) -> Result<Self> {
        if n_rows == 0 || n_cols == 0 {
            return Err(crate::error::invalid("n_rows/n_cols", "must be positive"));
        }
        let mut entries: Vec<(usize, usize, f64)> = triplets.into_iter().collect();
        for &(row, col, _) in &entries {
            if row >= n_rows || col >= n_cols {
                return Err(Error::IndexOutOfRange {
                    row,
                    col,
                    n_rows,
                    n_cols,
                });
            }
        }
        entries.sort_by_key(|&(i, j, _)| (i, j));
        if let Some(w) = entries
            .windows(2)
            .find(|w| (w[0].0, w[0].1) == (w[1].0, w[1].1))
        {
            return Err(Error::DuplicateIndex {
                row: w[0].0,
                col: w[0].1,
            });
        }
        Ok(Self::from_sorted_unchecked(n_rows, n_cols, entries))
    }

    /// Assembles from triplets already in strictly increasing row-major order.
    pub(crate) fn from_sorted_unchecked(
        n_rows: usize,
        n_cols: usize,
        entries: Vec<(usize, usize, f64)>,
    ) -> Self {
        let mut row_offsets = vec![0usize; n_rows + 1];
        for &(i, _, _) in &entries {
            row_offsets[i + 1] += 1;
        }
        for i in 0..n_rows {
            row_offsets[i + 1] += row_offsets[i];
        }
        let (cols, values) = entries.into_iter().map(|(_, j, v)| (j, v)).unzip();
        Self {
            n_rows,
            n_cols,
            row_offsets,
            cols,
            values,
        }
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.n_rows, self.n_cols)
    }

    /// Number of observed entries `|Omega|`.
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Empirical sampling rate `|Omega| / (n_rows * n_cols)`.
    pub fn p_hat(&self) -> f64 {
        self.len() as f64 / (self.n_rows as f64 * self.n_cols as f64)
    }

    /// Observed values in canonical order.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row_offsets(&self) -> &[usize] {
        &self.row_offsets
    }

    pub fn col_indices(&self) -> &[usize] {
        &self.cols
    }

    /// Iterates `(i, j, M_ij)` in canonical row-major order.
    pub fn entries(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.indices()
            .zip(self.values.iter())
            .map(|((i, j), &v)| (i, j, v))
    }

    /// Iterates `(i, j)` in canonical row-major order.
    pub fn indices(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.n_rows).flat_map(move |i| {
            self.cols[self.row_offsets[i]..self.row_offsets[i + 1]]
                .iter()
                .map(move |&j| (i, j))
        })
    }

    /// `||P_Omega(M)||_F`.
    pub fn frobenius_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Observed values viewed as a sparse matrix over this index set.
    pub fn as_sparse(&self) -> SparseResidual<'_> {
        SparseResidual {
            obs: self,
            values: self.values.clone(),
        }
    }

    /// A sparse matrix over this index set with the given values.
    pub fn with_values(&self, values: Vec<f64>) -> Result<SparseResidual<'_>> {
        if values.len() != self.len() {
            return Err(Error::DimensionMismatch {
                context: "with_values",
                expected: self.len().to_string(),
                actual: values.len().to_string(),
            });
        }
        Ok(SparseResidual { obs: self, values })
    }

    /// `P_Omega(A - M)` for a dense `A`.
    pub fn dense_residual(&self, a: &DMatrix<f64>) -> Result<SparseResidual<'_>> {
        self.check_dense(a, "dense_residual")?;
        let values = self.entries().map(|(i, j, m)| a[(i, j)] - m).collect();
        Ok(SparseResidual { obs: self, values })
    }

    /// `P_Omega(A)` as sparse values.
    pub fn sample(&self, a: &DMatrix<f64>) -> Result<SparseResidual<'_>> {
        self.check_dense(a, "sample")?;
        let values = self.indices().map(|(i, j)| a[(i, j)]).collect();
        Ok(SparseResidual { obs: self, values })
    }

    /// `P_Omega(A)` as a dense matrix with zeros off the index set.
    pub fn project_dense(&self, a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        Ok(self.sample(a)?.to_dense())
    }

    fn check_dense(&self, a: &DMatrix<f64>, context: &'static str) -> Result<()> {
        if a.shape() != self.shape() {
            return Err(shape_mismatch(context, self.shape(), a.shape()));
        }
        Ok(())
    }

    /// Reads a triplet CSV with header `i,j,value` and zero-based indices.
    pub fn read_csv<R: Read>(reader: R, n_rows: usize, n_cols: usize) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(reader);
        let mut triplets = Vec::new();
        for record in rdr.deserialize() {
            let TripletRecord { i, j, value } = record?;
            triplets.push((i, j, value));
        }
        Self::from_triplets(triplets, n_rows, n_cols)
    }

    /// Writes the observations as a triplet CSV (`i,j,value`).
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        for (i, j, value) in self.entries() {
            wtr.serialize(TripletRecord { i, j, value })?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn write_csv_file(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(file))
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct TripletRecord {
    i: usize,
    j: usize,
    value: f64,
}

/// Values on the index set of a parent [`ObservationSet`], zero elsewhere.
///
/// Used for `P_Omega(X Y^T - M)` and for the observed noise `P_Omega(E)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseResidual<'a> {
    obs: &'a ObservationSet,
    values: Vec<f64>,
}

impl<'a> SparseResidual<'a> {
    pub fn observation_set(&self) -> &'a ObservationSet {
        self.obs
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn shape(&self) -> (usize, usize) {
        self.obs.shape()
    }

    pub fn frobenius_norm(&self) -> f64 {
        masked_frobenius(self)
    }

    pub fn scale(&mut self, factor: f64) {
        self.values.iter_mut().for_each(|v| *v *= factor);
    }

    pub fn entries(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.obs
            .indices()
            .zip(self.values.iter())
            .map(|((i, j), &v)| (i, j, v))
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.obs.n_rows, self.obs.n_cols);
        for (i, j, v) in self.entries() {
            out[(i, j)] = v;
        }
        out
    }
}

/// `P_Omega(X Y^T - M)`, evaluated entrywise on the index set only.
pub fn masked_residual<'a>(
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    obs: &'a ObservationSet,
) -> Result<SparseResidual<'a>> {
    check_factors(x, y, obs, "masked_residual")?;
    let rank = x.ncols();
    let mut values = Vec::with_capacity(obs.len());
    let mut x_row = vec![0.0; rank];
    for i in 0..obs.n_rows {
        let (start, end) = (obs.row_offsets[i], obs.row_offsets[i + 1]);
        if start == end {
            continue;
        }
        for (k, xv) in x_row.iter_mut().enumerate() {
            *xv = x[(i, k)];
        }
        for idx in start..end {
            let j = obs.cols[idx];
            let mut dot = 0.0;
            for (k, xv) in x_row.iter().enumerate() {
                dot += xv * y[(j, k)];
            }
            values.push(dot - obs.values[idx]);
        }
    }
    Ok(SparseResidual { obs, values })
}

/// `sqrt(sum of squared values)`.
pub fn masked_frobenius(res: &SparseResidual<'_>) -> f64 {
    res.values.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// `S * Y` where `S` is the sparse matrix viewed densely.
pub fn sparse_times_dense(res: &SparseResidual<'_>, y: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let obs = res.obs;
    if y.nrows() != obs.n_cols {
        return Err(shape_mismatch(
            "sparse_times_dense",
            (obs.n_cols, y.ncols()),
            y.shape(),
        ));
    }
    let rank = y.ncols();
    let mut out = DMatrix::zeros(obs.n_rows, rank);
    let mut acc = vec![0.0; rank];
    for i in 0..obs.n_rows {
        acc.iter_mut().for_each(|a| *a = 0.0);
        for idx in obs.row_offsets[i]..obs.row_offsets[i + 1] {
            let (j, v) = (obs.cols[idx], res.values[idx]);
            for (k, a) in acc.iter_mut().enumerate() {
                *a += v * y[(j, k)];
            }
        }
        for (k, a) in acc.iter().enumerate() {
            out[(i, k)] = *a;
        }
    }
    Ok(out)
}

/// `S^T * X` where `S` is the sparse matrix viewed densely.
pub fn sparse_transpose_times_dense(
    res: &SparseResidual<'_>,
    x: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let obs = res.obs;
    if x.nrows() != obs.n_rows {
        return Err(shape_mismatch(
            "sparse_transpose_times_dense",
            (obs.n_rows, x.ncols()),
            x.shape(),
        ));
    }
    let rank = x.ncols();
    let mut out = DMatrix::zeros(obs.n_cols, rank);
    let mut x_row = vec![0.0; rank];
    for i in 0..obs.n_rows {
        for (k, xv) in x_row.iter_mut().enumerate() {
            *xv = x[(i, k)];
        }
        for idx in obs.row_offsets[i]..obs.row_offsets[i + 1] {
            let (j, v) = (obs.cols[idx], res.values[idx]);
            for (k, xv) in x_row.iter().enumerate() {
                out[(j, k)] += v * xv;
            }
        }
    }
    Ok(out)
}

/// `P_Omega(A) - p_hat * A`, dense. Desk-scale diagnostics only.
pub fn debias(a: &DMatrix<f64>, obs: &ObservationSet) -> Result<DMatrix<f64>> {
    obs.check_dense(a, "debias")?;
    let p = obs.p_hat();
    let mut out = a * (-p);
    for (i, j) in obs.indices() {
        out[(i, j)] += a[(i, j)];
    }
    Ok(out)
}

fn check_factors(
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    obs: &ObservationSet,
    context: &'static str,
) -> Result<()> {
    if x.nrows() != obs.n_rows {
        return Err(shape_mismatch(context, (obs.n_rows, x.ncols()), x.shape()));
    }
    if y.nrows() != obs.n_cols || y.ncols() != x.ncols() {
        return Err(shape_mismatch(context, (obs.n_cols, x.ncols()), y.shape()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_dense(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
        DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    fn random_obs(rng: &mut ChaCha8Rng, n: usize, count: usize) -> ObservationSet {
        let mut all: Vec<(usize, usize)> = (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).collect();
        for k in 0..count {
            let swap = rng.random_range(k..all.len());
            all.swap(k, swap);
        }
        let trip = all[..count]
            .iter()
            .map(|&(i, j)| (i, j, rng.random_range(-1.0..1.0)))
            .collect::<Vec<_>>();
        ObservationSet::from_triplets(trip, n, n).unwrap()
    }

    #[test]
    fn empty_set_has_zero_rate() {
        let obs = ObservationSet::from_triplets(vec![], 3, 3).unwrap();
        assert!(obs.is_empty());
        assert_eq!(obs.p_hat(), 0.0);
    }

    #[test]
    fn full_observation_has_unit_rate() {
        let trip = (0..3).flat_map(|i| (0..3).map(move |j| (i, j, 1.0)));
        let obs = ObservationSet::from_triplets(trip, 3, 3).unwrap();
        assert_eq!(obs.p_hat(), 1.0);
    }

    #[test]
    fn two_entries_rate_and_canonical_order() {
        let obs = ObservationSet::from_triplets(vec![(2, 1, -2.0), (0, 0, 1.5)], 3, 3).unwrap();
        assert_eq!(obs.p_hat(), 2.0 / 9.0);
        let e: Vec<_> = obs.entries().collect();
        assert_eq!(e, vec![(0, 0, 1.5), (2, 1, -2.0)]);
    }

    #[test]
    fn rejects_duplicates_and_out_of_range() {
        let dup = ObservationSet::from_triplets(vec![(1, 1, 0.0), (1, 1, 2.0)], 3, 3);
        assert!(matches!(dup, Err(Error::DuplicateIndex { row: 1, col: 1 })));
        let oor = ObservationSet::from_triplets(vec![(3, 0, 0.0)], 3, 3);
        assert!(matches!(oor, Err(Error::IndexOutOfRange { row: 3, col: 0, .. })));
    }

    #[test]
    fn residual_of_zero_factors_is_negated_observations() {
        let obs = ObservationSet::from_triplets(vec![(0, 1, 2.0), (1, 0, -3.0)], 2, 2).unwrap();
        let z = DMatrix::zeros(2, 1);
        let res = masked_residual(&z, &z, &obs).unwrap();
        assert_eq!(res.values(), &[-2.0, 3.0]);
    }

    #[test]
    fn residual_vanishes_on_exact_fit() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_dense(&mut rng, 6, 2);
        let y = random_dense(&mut rng, 6, 2);
        let l = &x * y.transpose();
        let trip = [(0, 0), (1, 3), (5, 5), (2, 4)].map(|(i, j)| (i, j, l[(i, j)]));
        let obs = ObservationSet::from_triplets(trip, 6, 6).unwrap();
        let res = masked_residual(&x, &y, &obs).unwrap();
        assert!(res.values().iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn residual_matches_dense_computation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let obs = random_obs(&mut rng, 10, 30);
        let x = random_dense(&mut rng, 10, 2);
        let y = random_dense(&mut rng, 10, 2);
        let dense = &x * y.transpose();
        let res = masked_residual(&x, &y, &obs).unwrap();
        for (i, j, v) in res.entries() {
            let m = obs.entries().find(|e| e.0 == i && e.1 == j).unwrap().2;
            assert!((v - (dense[(i, j)] - m)).abs() < 1e-12);
        }
    }

    #[test]
    fn frobenius_small_cases() {
        let obs = ObservationSet::from_triplets(vec![(0, 0, 3.0), (1, 1, 4.0)], 2, 2).unwrap();
        assert_eq!(masked_frobenius(&obs.as_sparse()), 5.0);
        let one = ObservationSet::from_triplets(vec![(0, 0, 3.0)], 2, 2).unwrap();
        assert_eq!(masked_frobenius(&one.as_sparse()), 3.0);
        let empty = ObservationSet::from_triplets(vec![], 2, 2).unwrap();
        assert_eq!(masked_frobenius(&empty.as_sparse()), 0.0);
    }

    #[test]
    fn products_with_zero_and_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 4;
        let ident = (0..n).flat_map(|i| (0..n).map(move |j| (i, j, if i == j { 1.0 } else { 0.0 })));
        let obs = ObservationSet::from_triplets(ident, n, n).unwrap();
        let y = random_dense(&mut rng, n, 2);
        let s = obs.as_sparse();
        assert_eq!(sparse_times_dense(&s, &y).unwrap(), y);
        assert_eq!(sparse_transpose_times_dense(&s, &y).unwrap(), y);
        let zero = obs.with_values(vec![0.0; n * n]).unwrap();
        assert_eq!(sparse_times_dense(&zero, &y).unwrap(), DMatrix::zeros(n, 2));
    }

    #[test]
    fn products_match_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let obs = random_obs(&mut rng, 8, 25);
        let s = obs.as_sparse();
        let dense = s.to_dense();
        let y = random_dense(&mut rng, 8, 2);
        let sy = sparse_times_dense(&s, &y).unwrap();
        let sty = sparse_transpose_times_dense(&s, &y).unwrap();
        assert!((sy - &dense * &y).abs().max() < 1e-12);
        assert!((sty - dense.transpose() * &y).abs().max() < 1e-12);
    }

    #[test]
    fn products_reject_bad_shapes() {
        let obs = ObservationSet::from_triplets(vec![(0, 0, 1.0)], 3, 3).unwrap();
        let y = DMatrix::zeros(4, 2);
        assert!(sparse_times_dense(&obs.as_sparse(), &y).is_err());
        assert!(sparse_transpose_times_dense(&obs.as_sparse(), &y).is_err());
        assert!(masked_residual(&y, &y, &obs).is_err());
    }

    #[test]
    fn debias_extremes_and_entrywise_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random_dense(&mut rng, 5, 5);
        let full = ObservationSet::from_triplets(
            (0..5).flat_map(|i| (0..5).map(move |j| (i, j, 0.0))),
            5,
            5,
        )
        .unwrap();
        assert!(debias(&a, &full).unwrap().abs().max() < 1e-15);
        let empty = ObservationSet::from_triplets(vec![], 5, 5).unwrap();
        assert_eq!(debias(&a, &empty).unwrap(), DMatrix::zeros(5, 5));

        let half = random_obs(&mut rng, 5, 12);
        let p = half.p_hat();
        let d = debias(&a, &half).unwrap();
        let on: std::collections::HashSet<_> = half.indices().collect();
        for i in 0..5 {
            for j in 0..5 {
                let want = if on.contains(&(i, j)) {
                    a[(i, j)] * (1.0 - p)
                } else {
                    -p * a[(i, j)]
                };
                assert!((d[(i, j)] - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn csv_round_trip() {
        let obs = ObservationSet::from_triplets(vec![(0, 2, 1.25), (1, 0, -0.5)], 2, 3).unwrap();
        let mut buf = Vec::new();
        obs.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("i,j,value\n"));
        let back = ObservationSet::read_csv(buf.as_slice(), 2, 3).unwrap();
        assert_eq!(back, obs);
    }
}
