//! Dense symmetric kernels for the delta method: streamed Gram
//! accumulation, blocked Cholesky, triangular solves.
//!
//! Matrices are row-major `n x n`. Only the lower triangle of a symmetric
//! matrix is meaningful; kernels may leave garbage above the diagonal of
//! diagonal tiles.

use crate::error::{Error, Result};

/// Rows buffered before a rank-k update.
const GRAM_BLOCK_ROWS: usize = 256;
/// Column tile for the lower-triangular update.
const TILE: usize = 512;
/// Panel width of the blocked Cholesky.
const PANEL: usize = 96;

/// `C[i0.., j0..] += alpha * A B` with raw strides; thin safe wrapper.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    a_off: usize,
    rsa: usize,
    csa: usize,
    b: &[f64],
    b_off: usize,
    rsb: usize,
    csb: usize,
    c: &mut [f64],
    c_off: usize,
    rsc: usize,
) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    // Bounds of every element touched.
    assert!(a_off + (m - 1) * rsa + (k - 1) * csa < a.len());
    assert!(b_off + (k - 1) * rsb + (n - 1) * csb < b.len());
    assert!(c_off + (m - 1) * rsc + (n - 1) < c.len());
    // SAFETY: the asserts above keep every access inside the slices, and `c`
    // is borrowed mutably so it cannot alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr().add(a_off),
            rsa as isize,
            csa as isize,
            b.as_ptr().add(b_off),
            rsb as isize,
            csb as isize,
            1.0,
            c.as_mut_ptr().add(c_off),
            rsc as isize,
            1,
        );
    }
}

/// `C_lower += sign * P P^T` where `P` is the `rows x k` row-major panel
/// starting at `p_off` with row stride `rsp`, and `C` is `rows x rows` at
/// `c_off` with row stride `rsc`. Only tiles on or below the diagonal are
/// computed.
#[allow(clippy::too_many_arguments)]
fn syrk_lower(
    rows: usize,
    k: usize,
    sign: f64,
    p: &[f64],
    p_off: usize,
    rsp: usize,
    csp: usize,
    c: &mut [f64],
    c_off: usize,
    rsc: usize,
) {
    let mut i0 = 0;
    while i0 < rows {
        let i1 = (i0 + TILE).min(rows);
        let mut j0 = 0;
        while j0 < i1 {
            let j1 = (j0 + TILE).min(i1);
            gemm(
                i1 - i0,
                k,
                j1 - j0,
                sign,
                p,
                p_off + i0 * rsp,
                rsp,
                csp,
                p,
                p_off + j0 * rsp,
                csp,
                rsp,
                c,
                c_off + i0 * rsc + j0,
                rsc,
            );
            j0 = j1;
        }
        i0 = i1;
    }
}

/// Accumulates `sum_i f_i f_i^T` from streamed rows without ever holding
/// more than [`GRAM_BLOCK_ROWS`] of them.
#[derive(Debug, Clone)]
pub struct GramAccumulator {
    p: usize,
    gram: Vec<f64>,
    block: Vec<f64>,
    buffered: usize,
    rows: usize,
}

impl GramAccumulator {
    pub fn new(p: usize) -> Self {
        Self {
            p,
            gram: vec![0.0; p * p],
            block: vec![0.0; GRAM_BLOCK_ROWS * p],
            buffered: 0,
            rows: 0,
        }
    }

    pub fn dim(&self) -> usize {
        self.p
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    /// Free slots of the row buffer, for callers that fill it in bulk.
    pub fn block_capacity(&self) -> usize {
        GRAM_BLOCK_ROWS
    }

    pub fn push_row(&mut self, row: &[f64]) {
        assert_eq!(row.len(), self.p, "row length mismatch");
        let at = self.buffered * self.p;
        self.block[at..at + self.p].copy_from_slice(row);
        self.buffered += 1;
        self.rows += 1;
        if self.buffered == GRAM_BLOCK_ROWS {
            self.flush();
        }
    }

    /// Adds `rows` rows stored contiguously in `block`.
    pub fn push_block(&mut self, block: &[f64]) {
        assert_eq!(block.len() % self.p, 0, "block is not a whole number of rows");
        self.flush();
        let k = block.len() / self.p;
        syrk_lower(self.p, k, 1.0, block, 0, 1, self.p, &mut self.gram, 0, self.p);
        self.rows += k;
    }

    fn flush(&mut self) {
        if self.buffered == 0 {
            return;
        }
        let k = self.buffered;
        // Transposed view: P[i][r] = block[r * p + i].
        syrk_lower(self.p, k, 1.0, &self.block[..k * self.p], 0, 1, self.p, &mut self.gram, 0, self.p);
        self.buffered = 0;
    }

    /// Finished Gram matrix, lower triangle valid, upper mirrored.
    pub fn finish(mut self) -> SymMatrix {
        self.flush();
        let p = self.p;
        for i in 0..p {
            for j in i + 1..p {
                self.gram[i * p + j] = self.gram[j * p + i];
            }
        }
        SymMatrix { n: p, data: self.gram }
    }
}

/// Dense symmetric matrix, row-major, both triangles filled.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix {
    pub n: usize,
    pub data: Vec<f64>,
}

impl SymMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn trace(&self) -> f64 {
        (0..self.n).map(|i| self.data[i * self.n + i]).sum()
    }

    pub fn add_diagonal(&mut self, lambda: f64) {
        for i in 0..self.n {
            self.data[i * self.n + i] += lambda;
        }
    }

    /// Consumes the matrix and returns its lower Cholesky factor.
    pub fn cholesky(mut self) -> Result<LowerFactor> {
        cholesky_in_place(&mut self.data, self.n)?;
        Ok(LowerFactor::from_dense(&self.data, self.n))
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        for k in 0..4 {
            acc[k] += a[4 * c + k] * b[4 * c + k];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in 4 * chunks..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// Right-looking blocked Cholesky `A = L L^T` on the lower triangle of a
/// row-major `n x n` buffer. On success the lower triangle holds `L`.
pub fn cholesky_in_place(a: &mut [f64], n: usize) -> Result<()> {
    assert_eq!(a.len(), n * n);
    let mut k0 = 0;
    while k0 < n {
        let k1 = (k0 + PANEL).min(n);
        // Diagonal block.
        for j in k0..k1 {
            let row_j = j * n;
            let d = a[row_j + j] - dot(&a[row_j + k0..row_j + j], &a[row_j + k0..row_j + j]);
            if !(d > 0.0) || !d.is_finite() {
                return Err(Error::Factorization { pivot: j, value: d });
            }
            let l_jj = d.sqrt();
            a[row_j + j] = l_jj;
            for i in j + 1..k1 {
                let (head, tail) = a.split_at_mut(i * n);
                let lj = &head[row_j + k0..row_j + j];
                let row_i = &mut tail[..n];
                row_i[j] = (row_i[j] - dot(&row_i[k0..j], lj)) / l_jj;
            }
        }
        // Panel below the diagonal block: L21 = A21 L11^-T.
        for i in k1..n {
            let (head, tail) = a.split_at_mut(i * n);
            let row_i = &mut tail[..n];
            for c in k0..k1 {
                let lc = &head[c * n + k0..c * n + c];
                row_i[c] = (row_i[c] - dot(&row_i[k0..c], lc)) / head[c * n + c];
            }
        }
        // Trailing update A22 -= L21 L21^T.
        if k1 < n {
            let rows = n - k1;
            let (top, bottom) = a.split_at_mut(k1 * n);
            let _ = top;
            // Panel and target live in the same rows; copy the panel out.
            let width = k1 - k0;
            let mut panel = vec![0.0; rows * width];
            for r in 0..rows {
                panel[r * width..(r + 1) * width].copy_from_slice(&bottom[r * n + k0..r * n + k1]);
            }
            syrk_lower(rows, width, -1.0, &panel, 0, width, 1, bottom, k1, n);
        }
        k0 = k1;
    }
    Ok(())
}

/// Lower-triangular factor in packed row-major storage: row `i` holds
/// `L[i][0..=i]` starting at offset `i (i + 1) / 2`.
#[derive(Debug, Clone, PartialEq)]
pub struct LowerFactor {
    pub n: usize,
    pub packed: Vec<f64>,
}

impl LowerFactor {
    pub fn from_dense(a: &[f64], n: usize) -> Self {
        let mut packed = Vec::with_capacity(n * (n + 1) / 2);
        for i in 0..n {
            packed.extend_from_slice(&a[i * n..i * n + i + 1]);
        }
        Self { n, packed }
    }

    pub fn from_packed(n: usize, packed: Vec<f64>) -> Result<Self> {
        if packed.len() != n * (n + 1) / 2 {
            return Err(Error::Format(format!(
                "packed factor of order {n} needs {} entries, got {}",
                n * (n + 1) / 2,
                packed.len()
            )));
        }
        if (0..n).any(|i| !(packed[i * (i + 1) / 2 + i] > 0.0)) {
            return Err(Error::Format("factor has a non-positive diagonal".into()));
        }
        Ok(Self { n, packed })
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        let start = i * (i + 1) / 2;
        &self.packed[start..start + i + 1]
    }

    /// Solves `L y = b`.
    pub fn solve_lower(&self, b: &[f64]) -> Vec<f64> {
        assert_eq!(b.len(), self.n);
        let mut y = b.to_vec();
        for i in 0..self.n {
            let row = self.row(i);
            y[i] = (y[i] - dot(&row[..i], &y[..i])) / row[i];
        }
        y
    }

    /// Solves `L^T x = y`.
    pub fn solve_upper_transposed(&self, y: &[f64]) -> Vec<f64> {
        assert_eq!(y.len(), self.n);
        let mut x = y.to_vec();
        for i in (0..self.n).rev() {
            let row = self.row(i);
            x[i] /= row[i];
            let xi = x[i];
            for (xj, &l) in x[..i].iter_mut().zip(&row[..i]) {
                *xj -= l * xi;
            }
        }
        x
    }

    /// `(L L^T)^-1 b`, by two triangular solves.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        self.solve_upper_transposed(&self.solve_lower(b))
    }

    /// `f^T (L L^T)^-1 f = |L^-1 f|^2`.
    pub fn quadratic_form(&self, f: &[f64]) -> f64 {
        self.solve_lower(f).iter().map(|v| v * v).sum()
    }

    /// `|L^-1 f|^2` for several vectors at once. Each row of `L` is read
    /// once per call, which matters when the factor is far larger than cache.
    pub fn quadratic_forms(&self, fs: &[Vec<f64>]) -> Vec<f64> {
        let n = self.n;
        let k = fs.len();
        let mut y = vec![0.0; k * n];
        for (r, f) in fs.iter().enumerate() {
            assert_eq!(f.len(), n);
            y[r * n..(r + 1) * n].copy_from_slice(f);
        }
        for i in 0..n {
            let row = self.row(i);
            for yr in y.chunks_mut(n) {
                yr[i] = (yr[i] - dot(&row[..i], &yr[..i])) / row[i];
            }
        }
        y.chunks(n).map(|yr| yr.iter().map(|v| v * v).sum()).collect()
    }

    /// `L L^T` as a dense row-major matrix.
    pub fn reconstruct(&self) -> Vec<f64> {
        let n = self.n;
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..=i {
                let k = j + 1;
                let v = dot(&self.row(i)[..k], &self.row(j)[..k]);
                out[i * n + j] = v;
                out[j * n + i] = v;
            }
        }
        out
    }
}
