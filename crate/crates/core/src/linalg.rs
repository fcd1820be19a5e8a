//! Dense real linear algebra: Pauli/Kronecker construction of transverse-field
//! Ising Hamiltonians and a cyclic Jacobi eigensolver.
//!
//! The eigensolver is used both to label datasets and as the reference
//! oracle when validating network predictions.

use std::fmt;
use std::ops::{Index, IndexMut};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Largest spin count accepted by [`ising_hamiltonian`].
pub const MAX_SPINS: usize = 12;

const JACOBI_MAX_SWEEPS: usize = 100;
const JACOBI_OFF_TOL: f64 = 1e-12;
const SYMMETRY_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("unsupported Pauli operator {0:?} (complex entries)")]
    UnsupportedPauli(Pauli),
    #[error("matrix must be square, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("matrix is not symmetric: |a[{i}][{j}] - a[{j}][{i}]| = {diff:e}")]
    NotSymmetric { i: usize, j: usize, diff: f64 },
    #[error("site {site} out of range for a chain of {n} spins")]
    SiteOutOfRange { site: usize, n: usize },
    #[error("spin count {0} outside supported range 1..={MAX_SPINS}")]
    SpinCount(usize),
    #[error("Jacobi iteration did not converge after {sweeps} sweeps (off-diagonal norm {residual:e})")]
    NoConvergence { sweeps: usize, residual: f64 },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("zero-norm vector")]
    ZeroVector,
    #[error("non-finite entry")]
    NonFinite,
}

pub type Result<T> = std::result::Result<T, LinalgError>;

/// Row-major dense matrix of `f64`.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(LinalgError::Dimension(format!(
                "{} entries for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from nested rows. Panics on ragged input; meant for literals.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Self {
            rows: r,
            cols: c,
            data,
        }
    }

    pub fn diag(values: &[f64]) -> Self {
        let mut m = Self::zeros(values.len(), values.len());
        for (i, &v) in values.iter().enumerate() {
            m[(i, i)] = v;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> DenseVector {
        DenseVector((0..self.rows).map(|i| self[(i, j)]).collect())
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).sum()
    }

    pub fn frobenius_norm_sq(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn matmul(&self, rhs: &DenseMatrix) -> Result<DenseMatrix> {
        if self.cols != rhs.rows {
            return Err(LinalgError::Dimension(format!(
                "matmul {}x{} by {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let mut out = DenseMatrix::zeros(self.rows, rhs.cols);
        gemm(
            self.rows, self.cols, rhs.cols, 1.0, &self.data, false, &rhs.data, false, 0.0,
            &mut out.data,
        );
        Ok(out)
    }

    pub fn matvec(&self, x: &[f64]) -> Result<DenseVector> {
        if self.cols != x.len() {
            return Err(LinalgError::Dimension(format!(
                "matvec {}x{} by length {}",
                self.rows,
                self.cols,
                x.len()
            )));
        }
        Ok(DenseVector(
            (0..self.rows).map(|i| dot(self.row(i), x)).collect(),
        ))
    }

    pub fn add_scaled(&mut self, alpha: f64, other: &DenseMatrix) {
        assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
    }

    fn check_square(&self) -> Result<usize> {
        if self.rows != self.cols {
            return Err(LinalgError::NotSquare {
                rows: self.rows,
                cols: self.cols,
            });
        }
        Ok(self.rows)
    }

    fn check_symmetric(&self) -> Result<()> {
        let n = self.check_square()?;
        if !self.is_finite() {
            return Err(LinalgError::NonFinite);
        }
        let scale = self.max_abs().max(1.0);
        for i in 0..n {
            for j in (i + 1)..n {
                let diff = (self[(i, j)] - self[(j, i)]).abs();
                if diff > SYMMETRY_TOL * scale {
                    return Err(LinalgError::NotSymmetric { i, j, diff });
                }
            }
        }
        Ok(())
    }
}

impl Index<(usize, usize)> for DenseMatrix {
    type Output = f64;
    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for DenseMatrix {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

impl fmt::Debug for DenseMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "DenseMatrix {}x{} [", self.rows, self.cols)?;
        for i in 0..self.rows {
            writeln!(f, "  {:?}", self.row(i))?;
        }
        write!(f, "]")
    }
}

/// Dense `f64` vector.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DenseVector(pub Vec<f64>);

impl DenseVector {
    pub fn zeros(n: usize) -> Self {
        Self(vec![0.0; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        norm(&self.0)
    }
}

impl From<Vec<f64>> for DenseVector {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

impl std::ops::Deref for DenseVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `c = alpha * op(a) * op(b) + beta * c` with row-major operands, where
/// `op(a)` is `m x k` and `op(b)` is `k x n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    // Stored shapes: a is m x k (or k x m if transposed), b is k x n (or n x k).
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices are checked above to hold exactly the number of
    // elements addressed by the given dimensions and strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Pauli {
    X,
    Y,
    Z,
    Identity,
}

/// The 2x2 Pauli matrix of the given kind. `Y` is rejected since it is complex.
pub fn pauli(kind: Pauli) -> Result<DenseMatrix> {
    match kind {
        Pauli::Identity => Ok(DenseMatrix::identity(2)),
        Pauli::X => Ok(DenseMatrix::from_rows(&[&[0.0, 1.0], &[1.0, 0.0]])),
        Pauli::Z => Ok(DenseMatrix::from_rows(&[&[1.0, 0.0], &[0.0, -1.0]])),
        Pauli::Y => Err(LinalgError::UnsupportedPauli(kind)),
    }
}

pub fn kron(a: &DenseMatrix, b: &DenseMatrix) -> DenseMatrix {
    let (ra, ca) = a.shape();
    let (rb, cb) = b.shape();
    let mut out = DenseMatrix::zeros(ra * rb, ca * cb);
    for i in 0..ra {
        for j in 0..ca {
            let s = a[(i, j)];
            if s == 0.0 {
                continue;
            }
            for k in 0..rb {
                for l in 0..cb {
                    out[(i * rb + k, j * cb + l)] = s * b[(k, l)];
                }
            }
        }
    }
    out
}

/// Embeds a single-site operator into an `n`-spin chain:
/// `I ⊗ … ⊗ op ⊗ … ⊗ I`, with site 0 as the leftmost factor.
pub fn site_operator(op: &DenseMatrix, site: usize, n: usize) -> Result<DenseMatrix> {
    if site >= n {
        return Err(LinalgError::SiteOutOfRange { site, n });
    }
    if op.shape() != (2, 2) {
        return Err(LinalgError::Dimension(format!(
            "site operator must be 2x2, got {}x{}",
            op.rows(),
            op.cols()
        )));
    }
    let id = DenseMatrix::identity(2);
    let mut acc = if site == 0 { op.clone() } else { id.clone() };
    for k in 1..n {
        acc = kron(&acc, if k == site { op } else { &id });
    }
    Ok(acc)
}

/// Transverse-field Ising Hamiltonian on a ring of `n` spins:
///
/// ```text
/// H = -Σ σᶻ_i σᶻ_{i+1 mod n} - B_x Σ σˣ_i - B_z Σ σᶻ_i
/// ```
///
/// All three sums run over `i = 0..n`. For `n = 2` the ring visits the single
/// bond twice; for `n = 1` the coupling term is `σᶻσᶻ = I`.
pub fn ising_hamiltonian(n: usize, bx: f64, bz: f64) -> Result<DenseMatrix> {
    if n == 0 || n > MAX_SPINS {
        return Err(LinalgError::SpinCount(n));
    }
    if !bx.is_finite() || !bz.is_finite() {
        return Err(LinalgError::NonFinite);
    }
    let sx = pauli(Pauli::X)?;
    let sz = pauli(Pauli::Z)?;
    let dim = 1usize << n;
    let z_ops = (0..n)
        .map(|i| site_operator(&sz, i, n))
        .collect::<Result<Vec<_>>>()?;
    let mut h = DenseMatrix::zeros(dim, dim);
    for i in 0..n {
        let zz = z_ops[i].matmul(&z_ops[(i + 1) % n])?;
        h.add_scaled(-1.0, &zz);
    }
    // Sum the integer-valued field operators first so each entry sees a
    // single multiplication by the field strength.
    let mut x_total = DenseMatrix::zeros(dim, dim);
    let mut z_total = DenseMatrix::zeros(dim, dim);
    for (i, z) in z_ops.iter().enumerate() {
        x_total.add_scaled(1.0, &site_operator(&sx, i, n)?);
        z_total.add_scaled(1.0, z);
    }
    h.add_scaled(-bx, &x_total);
    h.add_scaled(-bz, &z_total);
    Ok(h)
}

/// Full eigendecomposition of a symmetric matrix.
#[derive(Clone, Debug)]
pub struct EigenDecomposition {
    /// Ascending.
    pub eigenvalues: Vec<f64>,
    /// Column `k` is the unit eigenvector paired with `eigenvalues[k]`.
    pub eigenvectors: DenseMatrix,
}

impl EigenDecomposition {
    pub fn eigenvector(&self, k: usize) -> DenseVector {
        self.eigenvectors.column(k)
    }
}

/// Cyclic Jacobi eigensolver for real symmetric matrices.
///
/// Sweeps over all `(p, q)` pairs until the off-diagonal Frobenius norm drops
/// below `1e-12 · max(1, ‖A‖_F)`, capped at 100 sweeps. Eigenpairs are
/// returned sorted ascending by eigenvalue; ties keep their diagonal order.
pub fn eig_symmetric(a: &DenseMatrix) -> Result<EigenDecomposition> {
    a.check_symmetric()?;
    let n = a.rows();
    let mut m = a.clone();
    // Symmetrize exactly so rotations see a consistent matrix.
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
    let mut v = DenseMatrix::identity(n);
    let tol = JACOBI_OFF_TOL * a.frobenius_norm_sq().sqrt().max(1.0);

    let off_norm = |m: &DenseMatrix| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    s += m[(i, j)] * m[(i, j)];
                }
            }
        }
        s.sqrt()
    };

    let mut sweeps = 0;
    loop {
        let off = off_norm(&m);
        if off <= tol {
            break;
        }
        if sweeps == JACOBI_MAX_SWEEPS {
            return Err(LinalgError::NoConvergence {
                sweeps,
                residual: off,
            });
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let app = m[(p, p)];
                let aqq = m[(q, q)];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                rotate(&mut m, &mut v, p, q, c, s, t, apq);
            }
        }
        sweeps += 1;
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[(i, i)].total_cmp(&m[(j, j)]).then(i.cmp(&j)));
    let eigenvalues = order.iter().map(|&k| m[(k, k)]).collect();
    let mut eigenvectors = DenseMatrix::zeros(n, n);
    for (col, &k) in order.iter().enumerate() {
        for r in 0..n {
            eigenvectors[(r, col)] = v[(r, k)];
        }
    }
    Ok(EigenDecomposition {
        eigenvalues,
        eigenvectors,
    })
}

#[allow(clippy::too_many_arguments)]
#[inline]
fn rotate(
    m: &mut DenseMatrix,
    v: &mut DenseMatrix,
    p: usize,
    q: usize,
    c: f64,
    s: f64,
    t: f64,
    apq: f64,
) {
    let n = m.rows();
    m[(p, p)] -= t * apq;
    m[(q, q)] += t * apq;
    m[(p, q)] = 0.0;
    m[(q, p)] = 0.0;
    for r in 0..n {
        if r == p || r == q {
            continue;
        }
        let mrp = m[(r, p)];
        let mrq = m[(r, q)];
        let new_rp = c * mrp - s * mrq;
        let new_rq = s * mrp + c * mrq;
        m[(r, p)] = new_rp;
        m[(p, r)] = new_rp;
        m[(r, q)] = new_rq;
        m[(q, r)] = new_rq;
    }
    for r in 0..n {
        let vrp = v[(r, p)];
        let vrq = v[(r, q)];
        v[(r, p)] = c * vrp - s * vrq;
        v[(r, q)] = s * vrp + c * vrq;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpectrumDirection {
    #[default]
    Smallest,
    Largest,
}

/// Flips `y` so its largest-magnitude component is positive. Components within
/// a relative `1e-10` of the maximum count as ties and the lowest index wins.
pub fn normalize_sign(y: &mut [f64]) {
    let max_abs = y.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
    if max_abs == 0.0 {
        return;
    }
    let pivot = y
        .iter()
        .position(|x| x.abs() >= max_abs * (1.0 - 1e-10))
        .unwrap_or(0);
    if y[pivot] < 0.0 {
        y.iter_mut().for_each(|x| *x = -*x);
    }
}

/// Extreme eigenpair `(b, y)` with the sign convention of [`normalize_sign`].
pub fn ground_state(a: &DenseMatrix, direction: SpectrumDirection) -> Result<(f64, DenseVector)> {
    let eig = eig_symmetric(a)?;
    let k = match direction {
        SpectrumDirection::Smallest => 0,
        SpectrumDirection::Largest => eig.eigenvalues.len() - 1,
    };
    let mut y = eig.eigenvector(k);
    let nrm = y.norm();
    y.0.iter_mut().for_each(|x| *x /= nrm);
    normalize_sign(&mut y.0);
    Ok((eig.eigenvalues[k], y))
}

/// Signed cosine similarity `⟨u,v⟩ / (‖u‖‖v‖)`.
pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(LinalgError::Dimension(format!(
            "cosine of lengths {} and {}",
            u.len(),
            v.len()
        )));
    }
    let nu = norm(u);
    let nv = norm(v);
    if nu == 0.0 || nv == 0.0 {
        return Err(LinalgError::ZeroVector);
    }
    Ok((dot(u, v) / (nu * nv)).clamp(-1.0, 1.0))
}

/// `max_k ‖A v_k − λ_k v_k‖_∞` over all eigenpairs.
pub fn eigen_residual(a: &DenseMatrix, eig: &EigenDecomposition) -> f64 {
    let n = a.rows();
    let mut worst = 0.0_f64;
    for k in 0..n {
        let v = eig.eigenvector(k);
        let av = a.matvec(&v).expect("square");
        for i in 0..n {
            worst = worst.max((av[i] - eig.eigenvalues[k] * v[i]).abs());
        }
    }
    worst
}

/// `max |VᵀV − I|`.
pub fn orthonormality_error(v: &DenseMatrix) -> f64 {
    let vtv = v.transpose().matmul(v).expect("conformable");
    let mut worst = 0.0_f64;
    for i in 0..vtv.rows() {
        for j in 0..vtv.cols() {
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((vtv[(i, j)] - target).abs());
        }
    }
    worst
}
