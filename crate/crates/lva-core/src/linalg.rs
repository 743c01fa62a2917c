//! Dense matrices and the few decompositions the rest of the crate needs.
//!
//! Everything is `f64` and row-major. The solvers are deliberately small:
//! a blocked Householder QR for least squares (never the normal equations,
//! which square the condition number), a one-sided Jacobi SVD for the small
//! triangular factors, and a power iteration for spectral norms. Hot paths
//! used by the training loops (`mul_into`, `mul_at_b_into`) write into
//! caller-owned buffers and use `mul_add` so the compiler can emit fused
//! multiply-adds; results are bit-reproducible across runs because every
//! reduction has a fixed order.

use crate::error::{Error, Result};

/// Dense row-major matrix. `data[i * cols + j]` is entry `(i, j)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Matrix {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Matrix {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Matrix> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "Matrix::from_vec",
                format!("{rows}x{cols} needs {} values, got {}", rows * cols, data.len()),
            ));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Matrix> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != c {
                return Err(Error::shape(
                    "Matrix::from_rows",
                    format!("row {i} has {} entries, expected {c}", row.len()),
                ));
            }
            data.extend_from_slice(row);
        }
        Ok(Matrix { rows: r, cols: c, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Matrix {
        let mut m = Matrix::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m.data[i * cols + j] = f(i, j);
            }
        }
        m
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        t
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// `a * b`, checking that the inner dimensions agree.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::shape(
            "matmul",
            format!("{}x{} times {}x{}", a.rows, a.cols, b.rows, b.cols),
        ));
    }
    let mut c = Matrix::zeros(a.rows, b.cols);
    mul_into(&mut c, a, b);
    Ok(c)
}

/// `c = a * b` into a preallocated buffer. Shapes are the caller's problem;
/// they are only debug-asserted here because this sits inside epoch loops.
pub(crate) fn mul_into(c: &mut Matrix, a: &Matrix, b: &Matrix) {
    debug_assert_eq!(a.cols, b.rows);
    debug_assert_eq!(c.rows, a.rows);
    debug_assert_eq!(c.cols, b.cols);
    let n = b.cols;
    let k = a.cols;
    c.data.fill(0.0);
    for (crow, arow) in c.data.chunks_exact_mut(n).zip(a.data.chunks_exact(k)) {
        for (brow, &aik) in b.data.chunks_exact(n).zip(arow) {
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv = aik.mul_add(bv, *cv);
            }
        }
    }
}

/// `c = a^T * b` where `a` is `m x p` and `b` is `m x n`.
///
/// Accumulation runs over the shared row index in a single fixed order, so
/// the result does not depend on anything but the inputs.
pub(crate) fn mul_at_b_into(c: &mut Matrix, a: &Matrix, b: &Matrix) {
    debug_assert_eq!(a.rows, b.rows);
    debug_assert_eq!(c.rows, a.cols);
    debug_assert_eq!(c.cols, b.cols);
    let p = a.cols;
    let n = b.cols;
    c.data.fill(0.0);
    for (arow, brow) in a.data.chunks_exact(p).zip(b.data.chunks_exact(n)) {
        for (i, &av) in arow.iter().enumerate() {
            let crow = &mut c.data[i * n..(i + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv = av.mul_add(bv, *cv);
            }
        }
    }
}

/// `c = a * b^T` where `a` is `m x k` and `b` is `n x k`.
///
/// Each entry is a dot product of two contiguous rows, accumulated in index
/// order.
pub(crate) fn matvec(m: &Matrix, v: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; m.rows()];
    for (o, slot) in out.iter_mut().enumerate() {
        let mut acc = 0.0;
        for (&w, &x) in m.row(o).iter().zip(v) {
            acc = w.mul_add(x, acc);
        }
        *slot = acc;
    }
    out
}

pub(crate) fn mul_a_bt_into(c: &mut Matrix, a: &Matrix, b: &Matrix) {
    debug_assert_eq!(a.cols, b.cols);
    debug_assert_eq!(c.rows, a.rows);
    debug_assert_eq!(c.cols, b.rows);
    let k = a.cols;
    for (crow, arow) in c.data.chunks_exact_mut(b.rows.max(1)).zip(a.data.chunks_exact(k)) {
        for (cv, brow) in crow.iter_mut().zip(b.data.chunks_exact(k)) {
            let mut acc = 0.0;
            for (&av, &bv) in arow.iter().zip(brow) {
                acc = av.mul_add(bv, acc);
            }
            *cv = acc;
        }
    }
}

/// Result of a least-squares solve.
#[derive(Clone, Debug)]
pub struct LstsqSolution {
    /// `design.cols x targets.cols` coefficient matrix.
    pub coefficients: Matrix,
    /// Euclidean norm of `design * coefficients - targets` over all entries
    /// (the ridge penalty is not included).
    pub residual_norm: f64,
    /// Number of singular values above the truncation cutoff.
    pub rank: usize,
    /// Ratio of the largest to the smallest singular value of the design
    /// (after ridge augmentation); `inf` if the design is exactly singular.
    pub condition_estimate: f64,
    /// Set when `condition_estimate` exceeds `1e8` or the design is rank
    /// deficient; small singular values were truncated and the returned
    /// coefficients are the minimum-norm choice.
    pub ill_conditioned: bool,
}

impl LstsqSolution {
    pub fn full_rank(&self) -> bool {
        self.rank == self.coefficients.rows()
    }
}

const ILL_CONDITIONED_AT: f64 = 1e8;

/// Minimum-norm least squares `argmin_X |design * X - targets|^2 + ridge |X|^2`.
///
/// Solved through a Householder QR of the (optionally ridge-augmented) design
/// with the targets carried along, followed by an SVD of the small triangular
/// factor. Singular values below `eps * max(rows, cols) * s_max` are dropped,
/// which is what makes the rank-deficient answer the minimum-norm one.
pub fn least_squares(design: &Matrix, targets: &Matrix, ridge: f64) -> Result<LstsqSolution> {
    if design.rows != targets.rows {
        return Err(Error::shape(
            "least_squares",
            format!("design has {} rows, targets {}", design.rows, targets.rows),
        ));
    }
    if design.rows == 0 || design.cols == 0 {
        return Err(Error::data("least_squares", "empty design matrix"));
    }
    if !(ridge >= 0.0 && ridge.is_finite()) {
        return Err(Error::argument("least_squares", format!("ridge {ridge} must be >= 0")));
    }
    if !design.all_finite() || !targets.all_finite() {
        return Err(Error::data("least_squares", "non-finite entries"));
    }

    let n = design.cols;
    let k = targets.cols;
    let mut qr = StackedQr::new(n + k);
    let mut joint_row = vec![0.0; n + k];
    let mut block: Vec<f64> = Vec::new();
    let block_rows = 2048usize;
    for i in 0..design.rows {
        joint_row[..n].copy_from_slice(design.row(i));
        joint_row[n..].copy_from_slice(targets.row(i));
        block.extend_from_slice(&joint_row);
        if block.len() == block_rows * (n + k) {
            qr.push_rows(&block);
            block.clear();
        }
    }
    if !block.is_empty() {
        qr.push_rows(&block);
    }
    if ridge > 0.0 {
        let s = ridge.sqrt();
        let mut rows = vec![0.0; n * (n + k)];
        for j in 0..n {
            rows[j * (n + k) + j] = s;
        }
        qr.push_rows(&rows);
    }

    let r = qr.r(); // (n + k) x (n + k) upper triangular, column-major
    let dim = n + k;

    // Split out R_a (n x n) and c = Q^T * targets (n x k); the trailing k x k
    // block holds the part of the targets orthogonal to the design's range.
    let mut ra = vec![0.0; n * n]; // column-major
    for j in 0..n {
        for i in 0..=j {
            ra[j * n + i] = r[j * dim + i];
        }
    }
    let mut c = Matrix::zeros(n, k);
    for j in 0..k {
        for i in 0..n {
            c.set(i, j, r[(n + j) * dim + i]);
        }
    }
    let mut tail_sq = vec![0.0; k]; // |S_j|^2 per target column
    for j in 0..k {
        for i in n..dim.min(n + k) {
            let v = r[(n + j) * dim + i];
            tail_sq[j] += v * v;
        }
    }

    let svd = jacobi_svd_colmajor(ra, n, n);
    let s_max = svd.s.first().copied().unwrap_or(0.0);
    let s_min = svd.s.last().copied().unwrap_or(0.0);
    let cutoff = f64::EPSILON * design.rows.max(n) as f64 * s_max;
    let rank = svd.s.iter().filter(|&&s| s > cutoff).count();
    let condition_estimate = if s_min > 0.0 { s_max / s_min } else { f64::INFINITY };

    // X = V * S^+ * U^T * c, and the energy of c along dropped directions
    // joins the residual.
    let ut_c = matmul(&svd.u.transpose(), &c)?;
    let mut dropped_sq = vec![0.0; k];
    let mut scaled = Matrix::zeros(n, k);
    for i in 0..n {
        for j in 0..k {
            if i < rank {
                scaled.set(i, j, ut_c.get(i, j) / svd.s[i]);
            } else {
                let v = ut_c.get(i, j);
                dropped_sq[j] += v * v;
            }
        }
    }
    let coefficients = matmul(&svd.v, &scaled)?;

    let mut res_sq = 0.0;
    for j in 0..k {
        let mut col = tail_sq[j] + dropped_sq[j];
        if ridge > 0.0 {
            // The QR solved the augmented system; take the penalty term back
            // out so the report refers to the data residual.
            let coef_sq: f64 = (0..n).map(|i| coefficients.get(i, j).powi(2)).sum();
            col = (col - ridge * coef_sq).max(0.0);
        }
        res_sq += col;
    }

    let ill_conditioned = condition_estimate > ILL_CONDITIONED_AT || rank < n;
    Ok(LstsqSolution {
        coefficients,
        residual_norm: res_sq.sqrt(),
        rank,
        condition_estimate,
        ill_conditioned,
    })
}

/// Largest singular value by power iteration on `a^T a`.
///
/// Stops when the estimate changes by less than `tol` in relative terms or
/// after `max_iter` rounds, whichever comes first. The starting vector is a
/// fixed pseudo-random direction, so repeated calls agree bit-for-bit.
pub fn spectral_norm(a: &Matrix, tol: f64, max_iter: usize) -> Result<f64> {
    if !a.all_finite() {
        return Err(Error::data("spectral_norm", "non-finite entries"));
    }
    if a.rows == 0 || a.cols == 0 {
        return Ok(0.0);
    }
    if !(tol > 0.0) {
        return Err(Error::argument("spectral_norm", format!("tol {tol} must be > 0")));
    }
    let n = a.cols;
    let mut v: Vec<f64> = (0..n)
        .map(|i| crate::rng::uniform(0x5eed, crate::rng::Stream::PowerIter, i as u64) - 0.5)
        .collect();
    normalize(&mut v);
    let mut w = vec![0.0; a.rows];
    let mut u = vec![0.0; n];
    let mut sigma = 0.0f64;
    for _ in 0..max_iter {
        // w = A v
        for (i, wi) in w.iter_mut().enumerate() {
            let row = a.row(i);
            let mut acc = 0.0;
            for (&r, &x) in row.iter().zip(&v) {
                acc = r.mul_add(x, acc);
            }
            *wi = acc;
        }
        let new_sigma = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        // u = A^T w
        u.fill(0.0);
        for (i, &wi) in w.iter().enumerate() {
            let row = a.row(i);
            for (uj, &r) in u.iter_mut().zip(row) {
                *uj = r.mul_add(wi, *uj);
            }
        }
        let un = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        if un == 0.0 {
            return Ok(0.0);
        }
        for (vj, &uj) in v.iter_mut().zip(&u) {
            *vj = uj / un;
        }
        if (new_sigma - sigma).abs() <= tol * new_sigma.max(1e-300) {
            return Ok(new_sigma);
        }
        sigma = new_sigma;
    }
    Ok(sigma)
}

pub const SPECTRAL_NORM_TOL: f64 = 1e-10;
pub const SPECTRAL_NORM_MAX_ITER: usize = 1000;

/// Minimum-norm solution of `argmin_M |P M Z - S|_F^2 + ridge |M|_F^2`.
///
/// `P` is `d x l`, `Z` is `l2 x n`, `S` is `d x n`, and the result is
/// `l x l2`. Using the SVDs of `P` and `Z`, the objective separates per
/// entry of `V_p^T M U_z`, which gives the closed form directly.
pub fn two_sided_least_squares(p: &Matrix, s: &Matrix, z: &Matrix, ridge: f64) -> Result<Matrix> {
    if p.rows != s.rows || z.cols != s.cols {
        return Err(Error::shape(
            "two_sided_least_squares",
            format!(
                "P {}x{}, S {}x{}, Z {}x{}",
                p.rows, p.cols, s.rows, s.cols, z.rows, z.cols
            ),
        ));
    }
    if !(ridge >= 0.0 && ridge.is_finite()) {
        return Err(Error::argument("two_sided_least_squares", "ridge must be >= 0"));
    }
    let (up, sp, vp) = svd_thin(p);
    let (uz, sz, vz) = svd_thin(z);
    // sh = U_p^T S V_z
    let sh = matmul(&up.transpose(), &matmul(s, &vz)?)?;
    let mut core = Matrix::zeros(sp.len(), sz.len());
    let cutoff = f64::EPSILON
        * (p.rows.max(p.cols).max(z.rows).max(z.cols)) as f64
        * sp.first().copied().unwrap_or(0.0)
        * sz.first().copied().unwrap_or(0.0);
    for i in 0..sp.len() {
        for j in 0..sz.len() {
            let prod = sp[i] * sz[j];
            let val = if ridge > 0.0 {
                prod * sh.get(i, j) / (prod * prod + ridge)
            } else if prod > cutoff {
                sh.get(i, j) / prod
            } else {
                0.0
            };
            core.set(i, j, val);
        }
    }
    // M = V_p core U_z^T
    matmul(&matmul(&vp, &core)?, &uz.transpose())
}

/// Thin SVD `a = U diag(s) V^T` with singular values sorted descending.
/// Returns `(U, s, V)`.
fn svd_thin(a: &Matrix) -> (Matrix, Vec<f64>, Matrix) {
    if a.rows >= a.cols {
        let mut cm = vec![0.0; a.rows * a.cols];
        for j in 0..a.cols {
            for i in 0..a.rows {
                cm[j * a.rows + i] = a.get(i, j);
            }
        }
        let svd = jacobi_svd_colmajor(cm, a.rows, a.cols);
        (svd.u, svd.s, svd.v)
    } else {
        let t = a.transpose();
        let (u, s, v) = svd_thin(&t);
        (v, s, u)
    }
}

struct SvdResult {
    u: Matrix,
    s: Vec<f64>,
    v: Matrix,
}

/// One-sided Jacobi SVD of a column-major `m x n` matrix with `m >= n`.
///
/// Right rotations orthogonalize the columns; afterwards the column norms are
/// the singular values. Plenty for the small-to-moderate factors handled here
/// and, unlike a bidiagonal approach, hard to get subtly wrong.
fn jacobi_svd_colmajor(mut a: Vec<f64>, m: usize, n: usize) -> SvdResult {
    debug_assert!(m >= n);
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let max_sweeps = 60;
    for _ in 0..max_sweeps {
        let mut converged = true;
        for p in 0..n.saturating_sub(1) {
            for q in (p + 1)..n {
                let (app, aqq, apq) = {
                    let (mut app, mut aqq, mut apq) = (0.0, 0.0, 0.0);
                    for i in 0..m {
                        let x = a[p * m + i];
                        let y = a[q * m + i];
                        app += x * x;
                        aqq += y * y;
                        apq += x * y;
                    }
                    (app, aqq, apq)
                };
                if apq.abs() <= 1e-15 * (app * aqq).sqrt() + 1e-300 {
                    continue;
                }
                converged = false;
                let tau = (aqq - app) / (2.0 * apq);
                let t = tau.signum() / (tau.abs() + (1.0 + tau * tau).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                for i in 0..m {
                    let x = a[p * m + i];
                    let y = a[q * m + i];
                    a[p * m + i] = c * x - s * y;
                    a[q * m + i] = s * x + c * y;
                }
                for i in 0..n {
                    let x = v[p * n + i];
                    let y = v[q * n + i];
                    v[p * n + i] = c * x - s * y;
                    v[q * n + i] = s * x + c * y;
                }
            }
        }
        if converged {
            break;
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    let norms: Vec<f64> = (0..n)
        .map(|j| a[j * m..(j + 1) * m].iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    order.sort_by(|&i, &j| norms[j].partial_cmp(&norms[i]).unwrap());
    let mut u = Matrix::zeros(m, n);
    let mut vm = Matrix::zeros(n, n);
    let mut s = Vec::with_capacity(n);
    for (out_j, &j) in order.iter().enumerate() {
        let norm = norms[j];
        s.push(norm);
        if norm > 0.0 {
            for i in 0..m {
                u.set(i, out_j, a[j * m + i] / norm);
            }
        }
        for i in 0..n {
            vm.set(i, out_j, v[j * n + i]);
        }
    }
    SvdResult { u, s, v: vm }
}

/// Incremental Householder QR over row blocks.
///
/// Only the triangular factor is kept, which is all a least-squares solve
/// needs when the targets ride along as extra columns. The workspace is
/// column-major so the reflector updates walk contiguous memory.
struct StackedQr {
    ncols: usize,
    /// Current R, column-major, `ncols x ncols`, upper triangular.
    r: Vec<f64>,
    have_rows: usize,
}

impl StackedQr {
    fn new(ncols: usize) -> StackedQr {
        StackedQr { ncols, r: vec![0.0; ncols * ncols], have_rows: 0 }
    }

    /// Fold a block of row-major rows (each of length `ncols`) into R.
    fn push_rows(&mut self, rows_flat: &[f64]) {
        let n = self.ncols;
        let new_rows = rows_flat.len() / n;
        debug_assert_eq!(rows_flat.len(), new_rows * n);
        let top = self.have_rows.min(n);
        let m = top + new_rows;
        // Stack [R; block] column-major.
        let mut w = vec![0.0; m * n];
        for j in 0..n {
            for i in 0..top {
                w[j * m + i] = self.r[j * n + i];
            }
            for b in 0..new_rows {
                w[j * m + top + b] = rows_flat[b * n + j];
            }
        }
        householder_qr_colmajor(&mut w, m, n);
        self.r.fill(0.0);
        for j in 0..n {
            for i in 0..=j.min(m - 1) {
                self.r[j * n + i] = w[j * m + i];
            }
        }
        self.have_rows += new_rows;
    }

    fn r(&self) -> &[f64] {
        &self.r
    }
}

/// In-place Householder QR of a column-major `m x n` matrix; on return the
/// upper triangle holds R and the rest is scratch.
fn householder_qr_colmajor(a: &mut [f64], m: usize, n: usize) {
    let steps = n.min(m);
    let mut v = vec![0.0; m];
    for j in 0..steps {
        // Build the reflector from column j below the diagonal.
        let col = &a[j * m..(j + 1) * m];
        let mut norm_sq = 0.0;
        for i in j..m {
            norm_sq += col[i] * col[i];
        }
        let norm = norm_sq.sqrt();
        if norm == 0.0 {
            continue;
        }
        let x0 = col[j];
        let alpha = if x0 >= 0.0 { -norm } else { norm };
        let v0 = x0 - alpha;
        v[j] = v0;
        v[(j + 1)..m].copy_from_slice(&a[j * m + j + 1..(j + 1) * m]);
        let vtv = v0 * v0 + (norm_sq - x0 * x0);
        if vtv == 0.0 {
            continue;
        }
        let scale = 2.0 / vtv;
        // Column j becomes [.., alpha, 0, .., 0].
        a[j * m + j] = alpha;
        for i in (j + 1)..m {
            a[j * m + i] = 0.0;
        }
        // Apply I - scale * v v^T to the remaining columns.
        for k in (j + 1)..n {
            let colk = &mut a[k * m..(k + 1) * m];
            let mut dot = 0.0;
            for i in j..m {
                dot = v[i].mul_add(colk[i], dot);
            }
            let f = scale * dot;
            for i in j..m {
                colk[i] = (-f).mul_add(v[i], colk[i]);
            }
        }
    }
}

#[inline]
fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        for x in v.iter_mut() {
            *x /= n;
        }
    }
}
