//! Sparse storage for the whitened Jacobian and an orthogonal (Givens)
//! factorization of it.
//!
//! The factor graph's Jacobian is block banded in time with a dense border
//! for the global calibration parameters. Under an ordering that places the
//! time blocks first and the global block last, its triangular factor `R`
//! (with `R^T R = L^T L`) is banded plus a dense trailing block, so the
//! factorization is linear in the number of epochs. Factoring `L` directly
//! keeps the conditioning of `L` rather than squaring it.

use nalgebra::{DMatrix, DVector};

/// Compressed sparse row matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    nrows: usize,
    ncols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    /// Builds from rows given in order; each row lists `(col, value)` pairs.
    pub fn from_rows<I>(ncols: usize, rows: I) -> Self
    where
        I: IntoIterator<Item = Vec<(usize, f64)>>,
    {
        let mut row_ptr = vec![0];
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        for mut row in rows {
            row.sort_by_key(|(c, _)| *c);
            for (c, v) in row {
                debug_assert!(c < ncols);
                col_idx.push(c);
                values.push(v);
            }
            row_ptr.push(col_idx.len());
        }
        CsrMatrix {
            nrows: row_ptr.len() - 1,
            ncols,
            row_ptr,
            col_idx,
            values,
        }
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// Column indices and values of row `i`.
    pub fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        (&self.col_idx[r.clone()], &self.values[r])
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (cols, vals) = self.row(i);
        cols.binary_search(&j).map(|p| vals[p]).unwrap_or(0.0)
    }

    pub fn mul_vec(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(
            self.nrows,
            (0..self.nrows).map(|i| {
                let (c, v) = self.row(i);
                c.iter().zip(v).map(|(j, a)| a * x[*j]).sum::<f64>()
            }),
        )
    }

    pub fn tr_mul_vec(&self, y: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.ncols);
        for i in 0..self.nrows {
            let (c, v) = self.row(i);
            for (j, a) in c.iter().zip(v) {
                out[*j] += a * y[i];
            }
        }
        out
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.nrows, self.ncols);
        for i in 0..self.nrows {
            let (c, v) = self.row(i);
            for (j, a) in c.iter().zip(v) {
                m[(i, *j)] = *a;
            }
        }
        m
    }
}

/// Symmetric permutation: `new = perm[old]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Ordering {
    perm: Vec<usize>,
    inverse: Vec<usize>,
}

impl Ordering {
    /// From the list of old indices in their new order.
    pub fn from_sequence(sequence: Vec<usize>) -> Self {
        let mut perm = vec![usize::MAX; sequence.len()];
        for (new, &old) in sequence.iter().enumerate() {
            perm[old] = new;
        }
        debug_assert!(perm.iter().all(|p| *p != usize::MAX));
        Ordering {
            perm,
            inverse: sequence,
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_sequence((0..n).collect())
    }

    pub fn len(&self) -> usize {
        self.perm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.perm.is_empty()
    }

    pub fn new_index(&self, old: usize) -> usize {
        self.perm[old]
    }

    pub fn old_index(&self, new: usize) -> usize {
        self.inverse[new]
    }

    pub fn permute(&self, v: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(v.len(), self.inverse.iter().map(|&o| v[o]))
    }

    pub fn unpermute(&self, v: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(v.len(), self.perm.iter().map(|&n| v[n]))
    }
}

/// Row-by-row Givens QR of a matrix whose leading `n - tail` columns have
/// row spans of at most `width` and whose trailing `tail` columns are dense.
#[derive(Debug, Clone)]
pub struct BandedQr {
    nb: usize,
    tail: usize,
    width: usize,
    /// Row `j` of `R`, columns `j..j + width` (clipped to `nb`).
    band: Vec<f64>,
    /// Row `j < nb` of `R`, trailing columns.
    band_tail: Vec<f64>,
    /// Trailing `tail x tail` upper block, row-major.
    corner: Vec<f64>,
    qty: Vec<f64>,
    filled: Vec<bool>,
    col_norm_sq: Vec<f64>,
    residual_sq: f64,
    work: Vec<f64>,
    work_tail: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FactorError {
    /// A row's leading-block span exceeds the declared width.
    BandOverflow { span: usize, width: usize },
    /// Column `column` is (numerically) dependent on earlier ones.
    RankDeficient { column: usize, ratio: f64 },
}

/// Pivots below this fraction of the column norm count as rank deficient.
const RANK_TOLERANCE: f64 = 1e-13;

impl BandedQr {
    pub fn new(n: usize, tail: usize, width: usize) -> Self {
        assert!(tail <= n && width >= 1);
        let nb = n - tail;
        BandedQr {
            nb,
            tail,
            width,
            band: vec![0.0; nb * width],
            band_tail: vec![0.0; nb * tail],
            corner: vec![0.0; tail * tail],
            qty: vec![0.0; n],
            filled: vec![false; n],
            col_norm_sq: vec![0.0; n],
            residual_sq: 0.0,
            work: vec![0.0; nb],
            work_tail: vec![0.0; tail],
        }
    }

    pub fn dim(&self) -> usize {
        self.nb + self.tail
    }

    /// Smallest width that accommodates every row of `rows` (leading block only).
    pub fn required_width<'a, I>(nb: usize, rows: I) -> usize
    where
        I: IntoIterator<Item = &'a [usize]>,
    {
        rows.into_iter()
            .filter_map(|cols| {
                let lead = cols.iter().filter(|&&c| c < nb);
                let lo = lead.clone().min()?;
                let hi = lead.max()?;
                Some(hi - lo + 1)
            })
            .max()
            .unwrap_or(1)
    }

    /// Appends row `sum_i vals[i] x[cols[i]] = rhs` and rotates it into `R`.
    pub fn add_row(&mut self, cols: &[usize], vals: &[f64], rhs: f64) -> Result<(), FactorError> {
        let (nb, w, p) = (self.nb, self.width, self.tail);
        let mut lo = usize::MAX;
        let mut hi = 0;
        for (&c, &v) in cols.iter().zip(vals) {
            self.col_norm_sq[c] += v * v;
            if c < nb {
                lo = lo.min(c);
                hi = hi.max(c);
                self.work[c] += v;
            } else {
                self.work_tail[c - nb] += v;
            }
        }
        if lo != usize::MAX && hi - lo + 1 > w {
            for &c in cols {
                if c < nb {
                    self.work[c] = 0.0;
                }
            }
            self.work_tail.iter_mut().for_each(|v| *v = 0.0);
            return Err(FactorError::BandOverflow {
                span: hi - lo + 1,
                width: w,
            });
        }
        let mut rhs = rhs;
        if lo != usize::MAX {
            for j in lo..nb {
                if j > hi {
                    break;
                }
                let a = self.work[j];
                if a == 0.0 {
                    continue;
                }
                let end = (j + w).min(nb);
                let row = &mut self.band[j * w..j * w + (end - j)];
                let row_tail = &mut self.band_tail[j * p..(j + 1) * p];
                if !self.filled[j] {
                    row.copy_from_slice(&self.work[j..end]);
                    row_tail.copy_from_slice(&self.work_tail);
                    self.qty[j] = rhs;
                    self.filled[j] = true;
                    self.work[j..end].iter_mut().for_each(|v| *v = 0.0);
                    self.work_tail.iter_mut().for_each(|v| *v = 0.0);
                    return Ok(());
                }
                let (c, s) = givens(row[0], a);
                for (r, x) in row.iter_mut().zip(self.work[j..end].iter_mut()) {
                    let (nr, nx) = (c * *r + s * *x, -s * *r + c * *x);
                    *r = nr;
                    *x = nx;
                }
                for (r, x) in row_tail.iter_mut().zip(self.work_tail.iter_mut()) {
                    let (nr, nx) = (c * *r + s * *x, -s * *r + c * *x);
                    *r = nr;
                    *x = nx;
                }
                let q = self.qty[j];
                self.qty[j] = c * q + s * rhs;
                rhs = -s * q + c * rhs;
                self.work[j] = 0.0;
                hi = hi.max(end - 1);
            }
        }
        for t in 0..p {
            let a = self.work_tail[t];
            if a == 0.0 {
                continue;
            }
            let row = &mut self.corner[t * p..(t + 1) * p];
            if !self.filled[nb + t] {
                row[t..].copy_from_slice(&self.work_tail[t..]);
                self.qty[nb + t] = rhs;
                self.filled[nb + t] = true;
                self.work_tail.iter_mut().for_each(|v| *v = 0.0);
                return Ok(());
            }
            let (c, s) = givens(row[t], a);
            for (r, x) in row[t..].iter_mut().zip(self.work_tail[t..].iter_mut()) {
                let (nr, nx) = (c * *r + s * *x, -s * *r + c * *x);
                *r = nr;
                *x = nx;
            }
            let q = self.qty[nb + t];
            self.qty[nb + t] = c * q + s * rhs;
            rhs = -s * q + c * rhs;
            self.work_tail[t] = 0.0;
        }
        self.residual_sq += rhs * rhs;
        Ok(())
    }

    /// Checks the pivots and freezes the factor.
    pub fn finish(self) -> Result<TriangularFactor, FactorError> {
        let f = TriangularFactor { qr: self };
        for j in 0..f.dim() {
            let norm = f.qr.col_norm_sq[j].sqrt();
            let d = if f.qr.filled[j] { f.diag(j).abs() } else { 0.0 };
            if !(d > RANK_TOLERANCE * norm) || !d.is_finite() {
                return Err(FactorError::RankDeficient {
                    column: j,
                    ratio: if norm > 0.0 { d / norm } else { 0.0 },
                });
            }
        }
        Ok(f)
    }
}

fn givens(r: f64, a: f64) -> (f64, f64) {
    let h = r.hypot(a);
    (r / h, a / h)
}

/// Upper-triangular `R` from [`BandedQr`] together with `Q^T y`.
#[derive(Debug, Clone)]
pub struct TriangularFactor {
    qr: BandedQr,
}

impl TriangularFactor {
    pub fn dim(&self) -> usize {
        self.qr.dim()
    }

    fn diag(&self, j: usize) -> f64 {
        let q = &self.qr;
        if j < q.nb {
            q.band[j * q.width]
        } else {
            let t = j - q.nb;
            q.corner[t * q.tail + t]
        }
    }

    /// `|R_jj|` over all columns.
    pub fn pivots(&self) -> DVector<f64> {
        DVector::from_fn(self.dim(), |j, _| self.diag(j).abs())
    }

    /// Column norms of the factored matrix.
    pub fn column_norms(&self) -> DVector<f64> {
        DVector::from_iterator(self.dim(), self.qr.col_norm_sq.iter().map(|v| v.sqrt()))
    }

    /// Squared norm of the part of the right-hand side outside the column space.
    pub fn residual_sq(&self) -> f64 {
        self.qr.residual_sq
    }

    /// Least-squares solution of the factored system.
    pub fn solution(&self) -> DVector<f64> {
        self.solve_r(&DVector::from_column_slice(&self.qr.qty))
    }

    /// Solves `R x = b`.
    pub fn solve_r(&self, b: &DVector<f64>) -> DVector<f64> {
        let q = &self.qr;
        let (nb, p, w) = (q.nb, q.tail, q.width);
        let mut x = b.clone();
        for t in (0..p).rev() {
            let row = &q.corner[t * p..(t + 1) * p];
            let mut s = x[nb + t];
            for u in t + 1..p {
                s -= row[u] * x[nb + u];
            }
            x[nb + t] = s / row[t];
        }
        for j in (0..nb).rev() {
            let end = (j + w).min(nb);
            let row = &q.band[j * w..j * w + (end - j)];
            let row_tail = &q.band_tail[j * p..(j + 1) * p];
            let mut s = x[j];
            for (off, r) in row.iter().enumerate().skip(1) {
                s -= r * x[j + off];
            }
            for (t, r) in row_tail.iter().enumerate() {
                s -= r * x[nb + t];
            }
            x[j] = s / row[0];
        }
        x
    }

    /// Solves `R^T x = b`.
    pub fn solve_rt(&self, b: &DVector<f64>) -> DVector<f64> {
        let q = &self.qr;
        let (nb, p, w) = (q.nb, q.tail, q.width);
        let mut x = b.clone();
        for j in 0..nb {
            let end = (j + w).min(nb);
            let row = &q.band[j * w..j * w + (end - j)];
            let xj = x[j] / row[0];
            x[j] = xj;
            for (off, r) in row.iter().enumerate().skip(1) {
                x[j + off] -= r * xj;
            }
            for (t, r) in q.band_tail[j * p..(j + 1) * p].iter().enumerate() {
                x[nb + t] -= r * xj;
            }
        }
        for t in 0..p {
            let row = &q.corner[t * p..(t + 1) * p];
            let xt = x[nb + t] / row[t];
            x[nb + t] = xt;
            for u in t + 1..p {
                x[nb + u] -= row[u] * xt;
            }
        }
        x
    }

    /// `R x`.
    pub fn mul_r(&self, x: &DVector<f64>) -> DVector<f64> {
        let q = &self.qr;
        let (nb, p, w) = (q.nb, q.tail, q.width);
        let mut out = DVector::zeros(self.dim());
        for j in 0..nb {
            let end = (j + w).min(nb);
            let row = &q.band[j * w..j * w + (end - j)];
            let mut s: f64 = row.iter().enumerate().map(|(off, r)| r * x[j + off]).sum();
            s += q.band_tail[j * p..(j + 1) * p]
                .iter()
                .enumerate()
                .map(|(t, r)| r * x[nb + t])
                .sum::<f64>();
            out[j] = s;
        }
        for t in 0..p {
            let row = &q.corner[t * p..(t + 1) * p];
            out[nb + t] = (t..p).map(|u| row[u] * x[nb + u]).sum();
        }
        out
    }

    /// `R^T x`.
    pub fn mul_rt(&self, x: &DVector<f64>) -> DVector<f64> {
        let q = &self.qr;
        let (nb, p, w) = (q.nb, q.tail, q.width);
        let mut out = DVector::zeros(self.dim());
        for j in 0..nb {
            let end = (j + w).min(nb);
            let row = &q.band[j * w..j * w + (end - j)];
            for (off, r) in row.iter().enumerate() {
                out[j + off] += r * x[j];
            }
            for (t, r) in q.band_tail[j * p..(j + 1) * p].iter().enumerate() {
                out[nb + t] += r * x[j];
            }
        }
        for t in 0..p {
            let row = &q.corner[t * p..(t + 1) * p];
            for u in t..p {
                out[nb + u] += row[u] * x[nb + t];
            }
        }
        out
    }

    /// Trailing block of `(R^T R)^-1`.
    pub fn tail_covariance(&self) -> DMatrix<f64> {
        let q = &self.qr;
        let p = q.tail;
        let corner = DMatrix::from_row_slice(p, p, &q.corner);
        let inv = corner
            .solve_upper_triangular(&DMatrix::identity(p, p))
            .expect("nonzero pivots checked in finish");
        &inv * inv.transpose()
    }

    /// `R^T R` as a dense matrix.
    pub fn normal_dense(&self) -> DMatrix<f64> {
        let n = self.dim();
        let mut r = DMatrix::zeros(n, n);
        for j in 0..n {
            let mut e = DVector::zeros(n);
            e[j] = 1.0;
            r.set_column(j, &self.mul_r(&e));
        }
        r.transpose() * r
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    struct Lcg(u64);

    impl Lcg {
        fn next(&mut self) -> f64 {
            self.0 = self
                .0
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            ((self.0 >> 11) as f64 / (1u64 << 53) as f64) - 0.5
        }
    }

    /// Random rows with leading-block span `< width` plus a dense tail.
    fn banded_rows(n: usize, tail: usize, width: usize, rows: usize, seed: u64) -> Vec<(Vec<usize>, Vec<f64>, f64)> {
        let mut rng = Lcg(seed.wrapping_add(17));
        let nb = n - tail;
        let mut out = Vec::new();
        for i in 0..rows {
            let mut cols = Vec::new();
            if nb > 0 {
                let lo = (i * nb / rows).min(nb - 1);
                for c in lo..(lo + width).min(nb) {
                    if c == lo || rng.next() > 0.0 {
                        cols.push(c);
                    }
                }
            }
            for t in 0..tail {
                if rng.next() > -0.2 {
                    cols.push(nb + t);
                }
            }
            let vals = cols.iter().map(|_| rng.next() * 4.0).collect();
            out.push((cols, vals, rng.next()));
        }
        out
    }

    fn dense_of(n: usize, rows: &[(Vec<usize>, Vec<f64>, f64)]) -> (DMatrix<f64>, DVector<f64>) {
        let mut a = DMatrix::zeros(rows.len(), n);
        let mut y = DVector::zeros(rows.len());
        for (i, (c, v, r)) in rows.iter().enumerate() {
            for (j, x) in c.iter().zip(v) {
                a[(i, *j)] = *x;
            }
            y[i] = *r;
        }
        (a, y)
    }

    fn factor(n: usize, tail: usize, width: usize, rows: &[(Vec<usize>, Vec<f64>, f64)]) -> TriangularFactor {
        let mut qr = BandedQr::new(n, tail, width);
        for (c, v, r) in rows {
            qr.add_row(c, v, *r).unwrap();
        }
        qr.finish().unwrap()
    }

    #[test]
    fn least_squares_matches_dense_normal_equations() {
        let (n, tail, width) = (30, 5, 4);
        let rows = banded_rows(n, tail, width, 90, 3);
        let (a, y) = dense_of(n, &rows);
        let f = factor(n, tail, width, &rows);
        let expected = (a.transpose() * &a).cholesky().unwrap().solve(&(a.transpose() * &y));
        assert_relative_eq!(f.solution(), expected, epsilon = 1e-10);
        let r = &y - &a * &expected;
        assert_relative_eq!(f.residual_sq(), r.norm_squared(), epsilon = 1e-10);
        assert_relative_eq!(f.normal_dense(), a.transpose() * &a, epsilon = 1e-10);
    }

    #[test]
    fn triangular_products_and_solves_are_consistent() {
        let (n, tail, width) = (25, 3, 6);
        let f = factor(n, tail, width, &banded_rows(n, tail, width, 60, 8));
        let x = DVector::from_fn(n, |i, _| (i as f64 * 0.7).sin());
        assert_relative_eq!(f.solve_r(&f.mul_r(&x)), x.clone(), epsilon = 1e-9);
        assert_relative_eq!(f.solve_rt(&f.mul_rt(&x)), x.clone(), epsilon = 1e-9);
        assert_relative_eq!(f.mul_r(&x).dot(&x), f.mul_rt(&x).dot(&x), epsilon = 1e-9);
    }

    #[test]
    fn tail_covariance_matches_dense_inverse() {
        let (n, tail, width) = (20, 4, 3);
        let rows = banded_rows(n, tail, width, 70, 5);
        let (a, _) = dense_of(n, &rows);
        let f = factor(n, tail, width, &rows);
        let inv = (a.transpose() * &a).try_inverse().unwrap();
        assert_relative_eq!(
            f.tail_covariance(),
            inv.view((n - tail, n - tail), (tail, tail)).into_owned(),
            epsilon = 1e-9
        );
    }

    #[test]
    fn missing_column_is_rank_deficient() {
        let mut qr = BandedQr::new(3, 0, 2);
        qr.add_row(&[0, 1], &[1.0, 2.0], 1.0).unwrap();
        qr.add_row(&[0, 1], &[2.0, 4.0], 1.0).unwrap();
        qr.add_row(&[2], &[1.0], 0.0).unwrap();
        assert!(matches!(qr.finish(), Err(FactorError::RankDeficient { column: 1, .. })));
    }

    #[test]
    fn wide_row_is_rejected() {
        let mut qr = BandedQr::new(5, 1, 2);
        assert_eq!(
            qr.add_row(&[0, 3], &[1.0, 1.0], 0.0),
            Err(FactorError::BandOverflow { span: 4, width: 2 })
        );
        assert_eq!(BandedQr::required_width(4, [&[0usize, 3, 4][..], &[1, 2][..]]), 4);
    }

    #[test]
    fn csr_products() {
        let m = CsrMatrix::from_rows(3, vec![vec![(2, 1.0), (0, 2.0)], vec![], vec![(1, -1.0)]]);
        assert_eq!(m.nnz(), 3);
        assert_eq!(m.get(0, 2), 1.0);
        assert_eq!(m.get(1, 1), 0.0);
        let x = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        assert_eq!(m.mul_vec(&x), DVector::from_vec(vec![5.0, 0.0, -2.0]));
        assert_eq!(m.tr_mul_vec(&x), m.to_dense().transpose() * &x);
    }

    #[test]
    fn ordering_round_trip() {
        let o = Ordering::from_sequence(vec![2, 0, 1]);
        assert_eq!(o.new_index(2), 0);
        assert_eq!(o.old_index(0), 2);
        let v = DVector::from_vec(vec![10.0, 20.0, 30.0]);
        assert_eq!(o.permute(&v), DVector::from_vec(vec![30.0, 10.0, 20.0]));
        assert_eq!(o.unpermute(&o.permute(&v)), v);
    }

    proptest! {
        #[test]
        fn random_banded_least_squares(nb in 1usize..40, tail in 0usize..6, width in 1usize..7, extra in 0usize..40, seed in 0u64..1000) {
            let n = nb + tail;
            let rows = banded_rows(n, tail, width, 2 * n + extra, seed);
            let (a, y) = dense_of(n, &rows);
            let normal = a.transpose() * &a;
            prop_assume!(normal.clone().cholesky().is_some());
            let svd = a.clone().svd(false, false);
            prop_assume!(svd.singular_values.min() > 1e-6 * svd.singular_values.max());
            let mut qr = BandedQr::new(n, tail, width);
            for (c, v, r) in &rows {
                qr.add_row(c, v, *r).unwrap();
            }
            let f = qr.finish().unwrap();
            let x = f.solution();
            let g = a.transpose() * (&y - &a * &x);
            prop_assert!(g.amax() < 1e-8, "gradient {}", g.amax());
        }
    }
}
