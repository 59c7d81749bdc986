//! Linear-algebraic core: plant dynamics, structural tests, eigen-structure,
//! and a real Jordan decomposition factored into magnitudes and rotations.
//!
//! The plant is the discrete-time system
//!
//! ```text
//! X_{t+1} = A X_t + B_u U_t + B_w W_t        ||W_t||_inf <= Omega / 2
//! Y_t     = C_y X_t + N_t                    ||N_t||_inf <= Gamma / 2
//! ```
//!
//! with the infinity norm as the default state norm throughout. The real
//! Jordan decomposition produced here writes `V A V^{-1} = Lambda * R`,
//! where `Lambda` is block upper-triangular with eigenvalue magnitudes on
//! its diagonal and `R` is block-diagonal orthogonal (identity blocks for
//! positive real eigenvalues, sign flips for negative ones, and 2x2
//! rotations for complex pairs). `Lambda` and `R` commute, so powers of the
//! dynamics split into a pure magnitude part and a pure rotation part; the
//! rotating frame `x' = R^{-k} V x` removes the rotation while preserving
//! the Euclidean norm.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

type C64 = Complex<f64>;

/// Relative cutoff deciding whether a computed entry is nonzero in exact
/// arithmetic (intrinsic delay, rank tests).
pub const ZERO_TOL: f64 = 1e-9;
/// Eigenvalues closer than this (relative to the matrix scale) are treated
/// as one Jordan cluster.
pub const EIGEN_GROUP_TOL: f64 = 1e-8;

/// Errors from model construction and structural operations.
#[derive(Debug, Error, PartialEq)]
pub enum StateSpaceError {
    /// Matrix dimensions are mutually inconsistent.
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    /// A bound parameter is negative.
    #[error("{name} must be nonnegative, got {value}")]
    NegativeBound { name: &'static str, value: f64 },
    /// Observation noise exceeds the declared bound.
    #[error("noise infinity norm {norm} exceeds Gamma/2 = {bound}")]
    NoiseBoundViolated { norm: f64, bound: f64 },
    /// `C_y A^i B_u = 0` for every `i < n`.
    #[error("no input-output path: C_y A^i B_u vanishes for all i < n")]
    NoInputOutputPath,
    /// The Jordan structure could not be resolved at the working tolerances.
    #[error("real Jordan decomposition failed: {0}")]
    DecompositionFailure(String),
}

/// The plant `X_{t+1} = A X_t + B_u U_t + B_w W_t`, `Y_t = C_y X_t + N_t`
/// with infinity-norm bounds on disturbance, noise, and initial condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawModel", into = "RawModel")]
pub struct StateSpaceModel {
    a: DMatrix<f64>,
    b_u: DMatrix<f64>,
    b_w: DMatrix<f64>,
    c_y: DMatrix<f64>,
    omega: f64,
    gamma: f64,
    omega0: f64,
}

/// JSON form of a model: matrices as arrays of row arrays.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawModel {
    #[serde(rename = "A")]
    a: Vec<Vec<f64>>,
    #[serde(rename = "B_u")]
    b_u: Vec<Vec<f64>>,
    #[serde(rename = "B_w")]
    b_w: Vec<Vec<f64>>,
    #[serde(rename = "C_y")]
    c_y: Vec<Vec<f64>>,
    omega: f64,
    gamma: f64,
    omega0: f64,
}

impl TryFrom<RawModel> for StateSpaceModel {
    type Error = StateSpaceError;

    fn try_from(raw: RawModel) -> Result<Self, Self::Error> {
        StateSpaceModel::new(
            mat_from_rows(&raw.a)?,
            mat_from_rows(&raw.b_u)?,
            mat_from_rows(&raw.b_w)?,
            mat_from_rows(&raw.c_y)?,
            raw.omega,
            raw.gamma,
            raw.omega0,
        )
    }
}

impl From<StateSpaceModel> for RawModel {
    fn from(m: StateSpaceModel) -> Self {
        RawModel {
            a: mat_to_rows(&m.a),
            b_u: mat_to_rows(&m.b_u),
            b_w: mat_to_rows(&m.b_w),
            c_y: mat_to_rows(&m.c_y),
            omega: m.omega,
            gamma: m.gamma,
            omega0: m.omega0,
        }
    }
}

fn mat_from_rows(rows: &[Vec<f64>]) -> Result<DMatrix<f64>, StateSpaceError> {
    if rows.is_empty() || rows[0].is_empty() {
        return Err(StateSpaceError::DimensionMismatch(
            "matrix must have at least one row and column".into(),
        ));
    }
    let ncols = rows[0].len();
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(StateSpaceError::DimensionMismatch(
            "ragged matrix rows".into(),
        ));
    }
    Ok(DMatrix::from_row_iterator(
        rows.len(),
        ncols,
        rows.iter().flatten().copied(),
    ))
}

fn mat_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

impl StateSpaceModel {
    /// Builds a model, checking dimensional consistency and bound signs.
    pub fn new(
        a: DMatrix<f64>,
        b_u: DMatrix<f64>,
        b_w: DMatrix<f64>,
        c_y: DMatrix<f64>,
        omega: f64,
        gamma: f64,
        omega0: f64,
    ) -> Result<Self, StateSpaceError> {
        let n = a.nrows();
        if n == 0 || a.ncols() != n {
            return Err(StateSpaceError::DimensionMismatch(format!(
                "A must be square and nonempty, got {}x{}",
                a.nrows(),
                a.ncols()
            )));
        }
        if b_u.nrows() != n || b_w.nrows() != n {
            return Err(StateSpaceError::DimensionMismatch(format!(
                "B_u ({} rows) and B_w ({} rows) must have {} rows",
                b_u.nrows(),
                b_w.nrows(),
                n
            )));
        }
        if c_y.ncols() != n || c_y.nrows() == 0 {
            return Err(StateSpaceError::DimensionMismatch(format!(
                "C_y must have {} columns, got {}x{}",
                n,
                c_y.nrows(),
                c_y.ncols()
            )));
        }
        for (name, value) in [("omega", omega), ("gamma", gamma), ("omega0", omega0)] {
            if value < 0.0 {
                return Err(StateSpaceError::NegativeBound { name, value });
            }
        }
        Ok(Self {
            a,
            b_u,
            b_w,
            c_y,
            omega,
            gamma,
            omega0,
        })
    }

    /// State dimension `n`.
    pub fn n(&self) -> usize {
        self.a.nrows()
    }
    /// Control input dimension.
    pub fn m_u(&self) -> usize {
        self.b_u.ncols()
    }
    /// Disturbance input dimension.
    pub fn m_w(&self) -> usize {
        self.b_w.ncols()
    }
    /// Observation dimension.
    pub fn m_y(&self) -> usize {
        self.c_y.nrows()
    }
    /// State dynamics matrix.
    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }
    /// Control input matrix.
    pub fn b_u(&self) -> &DMatrix<f64> {
        &self.b_u
    }
    /// Disturbance input matrix.
    pub fn b_w(&self) -> &DMatrix<f64> {
        &self.b_w
    }
    /// Observation matrix.
    pub fn c_y(&self) -> &DMatrix<f64> {
        &self.c_y
    }
    /// Disturbance bound: `||W_t||_inf <= omega / 2`.
    pub fn omega(&self) -> f64 {
        self.omega
    }
    /// Observation noise bound: `||N_t||_inf <= gamma / 2`.
    pub fn gamma(&self) -> f64 {
        self.gamma
    }
    /// Initial-condition bound: `||X_0||_inf <= omega0 / 2`.
    pub fn omega0(&self) -> f64 {
        self.omega0
    }

    /// One step of the dynamics: `A x + B_u u + B_w w`.
    pub fn step(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
        w: &DVector<f64>,
    ) -> Result<DVector<f64>, StateSpaceError> {
        if x.len() != self.n() || u.len() != self.m_u() || w.len() != self.m_w() {
            return Err(StateSpaceError::DimensionMismatch(format!(
                "step expects ({}, {}, {}), got ({}, {}, {})",
                self.n(),
                self.m_u(),
                self.m_w(),
                x.len(),
                u.len(),
                w.len()
            )));
        }
        Ok(&self.a * x + &self.b_u * u + &self.b_w * w)
    }

    /// One observation: `C_y x + noise`, rejecting noise beyond `Gamma/2`.
    pub fn observe(
        &self,
        x: &DVector<f64>,
        noise: &DVector<f64>,
    ) -> Result<DVector<f64>, StateSpaceError> {
        if x.len() != self.n() || noise.len() != self.m_y() {
            return Err(StateSpaceError::DimensionMismatch(format!(
                "observe expects ({}, {}), got ({}, {})",
                self.n(),
                self.m_y(),
                x.len(),
                noise.len()
            )));
        }
        let norm = noise.amax();
        let bound = self.gamma / 2.0;
        if norm > bound {
            return Err(StateSpaceError::NoiseBoundViolated { norm, bound });
        }
        Ok(&self.c_y * x + noise)
    }
}

/// Smallest `i >= 0` with `C_y A^i B_u != 0`: the number of steps before a
/// control input becomes visible at the output. Only `i < n` need checking.
pub fn intrinsic_delay(model: &StateSpaceModel) -> Result<usize, StateSpaceError> {
    let scale = model
        .a
        .amax()
        .max(model.b_u.amax())
        .max(model.c_y.amax())
        .max(1.0);
    let mut left = model.c_y.clone();
    for i in 0..model.n() {
        let product = &left * &model.b_u;
        if product.amax() > ZERO_TOL * scale {
            return Ok(i);
        }
        left *= &model.a;
    }
    Err(StateSpaceError::NoInputOutputPath)
}

/// Rank of `m` counted from singular values above `ZERO_TOL` relative to
/// the largest one.
fn numerical_rank(m: &DMatrix<f64>) -> usize {
    let svals = m.clone().singular_values();
    let smax = svals.max();
    if smax <= 0.0 {
        return 0;
    }
    svals.iter().filter(|&&s| s > ZERO_TOL * smax).count()
}

/// Whether the stacked map `[C; CA; ...; CA^{n-1}]` has full column rank,
/// so that `n` consecutive outputs pin down the state.
pub fn is_observable(a: &DMatrix<f64>, c: &DMatrix<f64>) -> bool {
    let n = a.nrows();
    assert_eq!(a.ncols(), n, "A must be square");
    assert_eq!(c.ncols(), n, "C must have n columns");
    let mut stacked = DMatrix::zeros(c.nrows() * n, n);
    let mut block = c.clone();
    for i in 0..n {
        stacked.rows_mut(i * c.nrows(), c.nrows()).copy_from(&block);
        block *= a;
    }
    numerical_rank(&stacked) == n
}

/// Whether `[B, AB, ..., A^{n-1}B]` has full row rank, so that `n` steps of
/// control reach every state direction.
pub fn is_reachable(a: &DMatrix<f64>, b: &DMatrix<f64>) -> bool {
    let n = a.nrows();
    assert_eq!(a.ncols(), n, "A must be square");
    assert_eq!(b.nrows(), n, "B must have n rows");
    numerical_rank(&controllability_matrix(a, b)) == n
}

/// The controllability matrix `[A^{n-1}B | A^{n-2}B | ... | B]`, columns
/// ordered so block `k` multiplies the control applied at step `k` of an
/// `n`-step batch.
pub fn controllability_matrix(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let m = b.ncols();
    let mut k = DMatrix::zeros(n, n * m);
    let mut block = b.clone();
    for i in (0..n).rev() {
        k.columns_mut(i * m, m).copy_from(&block);
        block = a * block;
    }
    k
}

/// The set of eigenvalues outside the unit circle, with multiplicity,
/// sorted by descending magnitude.
#[derive(Debug, Clone, PartialEq)]
pub struct EigenSpectrum {
    /// Unstable eigenvalues (complex pairs appear as both conjugates).
    pub unstable: Vec<C64>,
    /// Their magnitudes, descending.
    pub magnitudes: Vec<f64>,
    /// `log2` of each magnitude, aligned with `magnitudes`.
    pub log_magnitudes: Vec<f64>,
}

/// Extracts the unstable eigenvalues of `a` (those with `|lambda| > 1`),
/// keeping multiplicity.
pub fn unstable_spectrum(a: &DMatrix<f64>) -> EigenSpectrum {
    let mut unstable: Vec<C64> = a
        .clone()
        .complex_eigenvalues()
        .iter()
        .copied()
        .filter(|l| l.norm() > 1.0)
        .collect();
    unstable.sort_by(|x, y| {
        y.norm()
            .total_cmp(&x.norm())
            .then(y.im.total_cmp(&x.im))
            .then(y.re.total_cmp(&x.re))
    });
    let magnitudes: Vec<f64> = unstable.iter().map(|l| l.norm()).collect();
    let log_magnitudes: Vec<f64> = magnitudes.iter().map(|m| m.log2()).collect();
    EigenSpectrum {
        unstable,
        magnitudes,
        log_magnitudes,
    }
}

/// One diagonal block of the decomposition.
#[derive(Debug, Clone, PartialEq)]
pub struct JordanBlock {
    /// Eigenvalue magnitude on this block's diagonal.
    pub magnitude: f64,
    /// Real dimension of the block (twice the chain length for complex
    /// pairs).
    pub size: usize,
    /// Rotation angle per step for complex pairs, `None` for real
    /// eigenvalues (negative reals carry angle `pi` via a sign-flip block).
    pub angle: Option<f64>,
    /// First row/column of this block in the assembled matrices.
    pub start: usize,
}

/// The factored real Jordan form `V A V^{-1} = Lambda * R`.
#[derive(Debug, Clone, PartialEq)]
pub struct RealJordanForm {
    v: DMatrix<f64>,
    v_inv: DMatrix<f64>,
    lambda: DMatrix<f64>,
    r: DMatrix<f64>,
    blocks: Vec<JordanBlock>,
}

impl RealJordanForm {
    /// Coordinate change `V` with `V A V^{-1} = Lambda R`.
    pub fn v(&self) -> &DMatrix<f64> {
        &self.v
    }
    /// Inverse of the coordinate change.
    pub fn v_inv(&self) -> &DMatrix<f64> {
        &self.v_inv
    }
    /// Magnitude part: block upper-triangular, eigenvalue magnitudes on the
    /// diagonal.
    pub fn lambda(&self) -> &DMatrix<f64> {
        &self.lambda
    }
    /// Rotation part: block-diagonal orthogonal, commuting with `lambda`.
    pub fn r(&self) -> &DMatrix<f64> {
        &self.r
    }
    /// Block layout, ordered by descending magnitude.
    pub fn blocks(&self) -> &[JordanBlock] {
        &self.blocks
    }
}

/// Computes the factored real Jordan form of a square matrix.
///
/// Eigenvalues within `EIGEN_GROUP_TOL` (relative to the matrix scale) are
/// merged into one cluster; chains are recovered from nullspaces of powers
/// of `A - lambda I`. Fails if the numerical structure cannot be resolved,
/// which happens for severely defective or extremely ill-conditioned
/// inputs.
pub fn real_jordan(a: &DMatrix<f64>) -> Result<RealJordanForm, StateSpaceError> {
    let n = a.nrows();
    if n == 0 || a.ncols() != n {
        return Err(StateSpaceError::DimensionMismatch(
            "real_jordan needs a square nonempty matrix".into(),
        ));
    }
    let scale = a.amax().max(1.0);
    let clusters = cluster_eigenvalues(a, EIGEN_GROUP_TOL * scale)?;

    struct BlockColumns {
        magnitude: f64,
        angle: Option<f64>,
        columns: Vec<DVector<f64>>,
        lambda_block: DMatrix<f64>,
        r_block: DMatrix<f64>,
    }

    let ac: DMatrix<C64> = a.map(|x| C64::new(x, 0.0));
    let mut blocks_cols: Vec<BlockColumns> = Vec::new();
    for cl in &clusters {
        let chains = jordan_chains(&ac, cl.center, cl.multiplicity, scale)?;
        for chain in chains {
            let len = chain.len();
            if cl.center.im.abs() > EIGEN_GROUP_TOL * scale {
                // Complex pair: interleave real and imaginary parts.
                let (re, im) = (cl.center.re, cl.center.im);
                let magnitude = cl.center.norm();
                let angle = im.atan2(re);
                let mut columns = Vec::with_capacity(2 * len);
                for v in &chain {
                    columns.push(v.map(|z| z.re));
                    columns.push(v.map(|z| z.im));
                }
                let size = 2 * len;
                // C = [[re, im], [-im, re]] = magnitude * Q with Q orthogonal;
                // Lambda block gets magnitude on the diagonal and Q^T on the
                // superdiagonal blocks, R block repeats Q.
                let q = DMatrix::from_row_slice(
                    2,
                    2,
                    &[
                        re / magnitude,
                        im / magnitude,
                        -im / magnitude,
                        re / magnitude,
                    ],
                );
                let mut lambda_block = DMatrix::zeros(size, size);
                let mut r_block = DMatrix::zeros(size, size);
                for j in 0..len {
                    lambda_block
                        .view_mut((2 * j, 2 * j), (2, 2))
                        .copy_from(&(DMatrix::identity(2, 2) * magnitude));
                    r_block.view_mut((2 * j, 2 * j), (2, 2)).copy_from(&q);
                    if j + 1 < len {
                        lambda_block
                            .view_mut((2 * j, 2 * (j + 1)), (2, 2))
                            .copy_from(&q.transpose());
                    }
                }
                blocks_cols.push(BlockColumns {
                    magnitude,
                    angle: Some(angle),
                    columns,
                    lambda_block,
                    r_block,
                });
            } else {
                let lam = cl.center.re;
                let magnitude = lam.abs();
                let sign = if lam < 0.0 { -1.0 } else { 1.0 };
                let columns: Vec<DVector<f64>> = chain.iter().map(|v| v.map(|z| z.re)).collect();
                let mut lambda_block = DMatrix::identity(len, len) * magnitude;
                for j in 0..len.saturating_sub(1) {
                    lambda_block[(j, j + 1)] = sign;
                }
                let r_block = DMatrix::identity(len, len) * sign;
                blocks_cols.push(BlockColumns {
                    magnitude,
                    angle: if lam < 0.0 { Some(std::f64::consts::PI) } else { None },
                    columns,
                    lambda_block,
                    r_block,
                });
            }
        }
    }

    blocks_cols.sort_by(|x, y| {
        y.magnitude
            .total_cmp(&x.magnitude)
            .then_with(|| {
                x.angle
                    .unwrap_or(0.0)
                    .abs()
                    .total_cmp(&y.angle.unwrap_or(0.0).abs())
            })
            .then(y.columns.len().cmp(&x.columns.len()))
    });

    let total: usize = blocks_cols.iter().map(|b| b.columns.len()).sum();
    if total != n {
        return Err(StateSpaceError::DecompositionFailure(format!(
            "collected {total} chain columns for dimension {n}"
        )));
    }

    let mut basis = DMatrix::zeros(n, n);
    let mut lambda = DMatrix::zeros(n, n);
    let mut r = DMatrix::zeros(n, n);
    let mut blocks = Vec::with_capacity(blocks_cols.len());
    let mut at = 0;
    for b in &blocks_cols {
        let size = b.columns.len();
        for (j, col) in b.columns.iter().enumerate() {
            basis.set_column(at + j, col);
        }
        lambda
            .view_mut((at, at), (size, size))
            .copy_from(&b.lambda_block);
        r.view_mut((at, at), (size, size)).copy_from(&b.r_block);
        blocks.push(JordanBlock {
            magnitude: b.magnitude,
            size,
            angle: b.angle,
            start: at,
        });
        at += size;
    }

    // V maps plant coordinates to block coordinates, so V = basis^{-1}.
    let v_inv = basis.clone();
    let v = basis.try_inverse().ok_or_else(|| {
        StateSpaceError::DecompositionFailure("chain basis is numerically singular".into())
    })?;

    let reconstructed = &v * a * &v_inv;
    let target = &lambda * &r;
    let err = (reconstructed - target).amax();
    if err > 1e-6 * scale {
        return Err(StateSpaceError::DecompositionFailure(format!(
            "residual {err:.3e} exceeds tolerance"
        )));
    }

    Ok(RealJordanForm {
        v,
        v_inv,
        lambda,
        r,
        blocks,
    })
}

/// Applies the rotating coordinate frame: `R^{-k} V x`.
///
/// `R` is orthogonal, so the Euclidean norm of the result equals that of
/// `V x` for every `k`.
pub fn rotating_frame(k: i64, jf: &RealJordanForm, x: &DVector<f64>) -> DVector<f64> {
    let y = jf.v() * x;
    let base = if k >= 0 {
        jf.r().transpose()
    } else {
        jf.r().clone()
    };
    mat_pow(&base, k.unsigned_abs()) * y
}

/// Matrix power by repeated squaring.
fn mat_pow(m: &DMatrix<f64>, mut e: u64) -> DMatrix<f64> {
    let mut result = DMatrix::identity(m.nrows(), m.ncols());
    let mut base = m.clone();
    while e > 0 {
        if e & 1 == 1 {
            result = &result * &base;
        }
        base = &base * &base;
        e >>= 1;
    }
    result
}

struct EigenCluster {
    center: C64,
    multiplicity: usize,
}

/// Groups numerically coincident eigenvalues and keeps one representative
/// per conjugate pair (the one with positive imaginary part).
fn cluster_eigenvalues(a: &DMatrix<f64>, tol: f64) -> Result<Vec<EigenCluster>, StateSpaceError> {
    let eigs = a.clone().complex_eigenvalues();
    let mut clusters: Vec<(C64, usize)> = Vec::new();
    for &e in eigs.iter() {
        // Snap near-real eigenvalues onto the axis so pairing is exact.
        let e = if e.im.abs() <= tol {
            C64::new(e.re, 0.0)
        } else {
            e
        };
        match clusters.iter_mut().find(|(c, _)| (*c - e).norm() <= tol) {
            Some((c, m)) => {
                *c = (*c * (*m as f64) + e) / (*m as f64 + 1.0);
                *m += 1;
            }
            None => clusters.push((e, 1)),
        }
    }
    let mut out = Vec::new();
    let mut used = vec![false; clusters.len()];
    for i in 0..clusters.len() {
        if used[i] {
            continue;
        }
        let (c, m) = clusters[i];
        if c.im.abs() <= tol {
            out.push(EigenCluster {
                center: C64::new(c.re, 0.0),
                multiplicity: m,
            });
            used[i] = true;
            continue;
        }
        let conj = c.conj();
        let j = (0..clusters.len())
            .find(|&j| !used[j] && j != i && (clusters[j].0 - conj).norm() <= tol)
            .ok_or_else(|| {
                StateSpaceError::DecompositionFailure(format!(
                    "complex eigenvalue {c} lacks a conjugate partner"
                ))
            })?;
        if clusters[j].1 != m {
            return Err(StateSpaceError::DecompositionFailure(
                "conjugate pair with mismatched multiplicities".into(),
            ));
        }
        used[i] = true;
        used[j] = true;
        let rep = if c.im > 0.0 { c } else { conj };
        out.push(EigenCluster {
            center: rep,
            multiplicity: m,
        });
    }
    Ok(out)
}

/// Orthonormal kernel basis of a complex matrix via SVD.
fn kernel_basis(m: &DMatrix<C64>, rel_tol: f64) -> Vec<DVector<C64>> {
    let svd = m.clone().svd(false, true);
    let v_t = svd.v_t.expect("kernel_basis requested V^T");
    let smax = svd.singular_values.max().max(1e-300);
    let mut out = Vec::new();
    for (i, &s) in svd.singular_values.iter().enumerate() {
        if s <= rel_tol * smax {
            out.push(v_t.row(i).transpose().map(|z| z.conj()));
        }
    }
    // Rows of V^T beyond the singular-value count also span the kernel when
    // the matrix is wide; square inputs here make this a no-op.
    for i in svd.singular_values.len()..v_t.nrows() {
        out.push(v_t.row(i).transpose().map(|z| z.conj()));
    }
    out
}

/// Component of `v` orthogonal to the (orthonormal) columns in `basis`.
fn deflate(v: &DVector<C64>, basis: &[DVector<C64>]) -> DVector<C64> {
    let mut r = v.clone();
    for b in basis {
        let coef = b.dotc(&r);
        r -= b * coef;
    }
    r
}

/// Jordan chains for one eigenvalue cluster, longest chains first. Each
/// chain is returned foot-first: eigenvector, then successive generalized
/// eigenvectors.
fn jordan_chains(
    ac: &DMatrix<C64>,
    lambda: C64,
    multiplicity: usize,
    scale: f64,
) -> Result<Vec<Vec<DVector<C64>>>, StateSpaceError> {
    let n = ac.nrows();
    let m = ac - DMatrix::identity(n, n) * lambda;
    let rel_tol = 1e-8;

    // Kernels of successive powers, up to the algebraic multiplicity.
    let mut kernels: Vec<Vec<DVector<C64>>> = vec![Vec::new()];
    let mut power = DMatrix::identity(n, n).map(|x: f64| C64::new(x, 0.0));
    for _ in 1..=multiplicity {
        power = &power * &m;
        let k = kernel_basis(&power, rel_tol);
        let done = k.len() >= multiplicity;
        kernels.push(k);
        if done {
            break;
        }
    }
    let k_max = kernels.len() - 1;
    if kernels[k_max].len() < multiplicity {
        return Err(StateSpaceError::DecompositionFailure(format!(
            "kernel of (A - {lambda} I)^{k_max} has dimension {} < multiplicity {multiplicity}",
            kernels[k_max].len()
        )));
    }

    let dim = |j: usize| -> usize {
        if j >= kernels.len() {
            kernels[k_max].len()
        } else {
            kernels[j].len()
        }
    };

    // Chain tops, chosen height by height; feet (eigenvector-level images)
    // must stay independent, tracked by an orthonormalized list.
    let mut feet: Vec<DVector<C64>> = Vec::new();
    let mut chains: Vec<Vec<DVector<C64>>> = Vec::new();
    for h in (1..=k_max).rev() {
        let new_tops = (dim(h) - dim(h - 1)).saturating_sub(dim(h + 1) - dim(h));
        if new_tops == 0 {
            continue;
        }
        let mut found = 0;
        for cand in &kernels[h] {
            if found == new_tops {
                break;
            }
            let mut foot = cand.clone();
            for _ in 0..h - 1 {
                foot = &m * foot;
            }
            let fresh = deflate(&foot, &feet);
            if fresh.norm() <= 1e-6 * foot.norm().max(1e-300) {
                continue;
            }
            // Build the chain foot-first from the accepted top.
            let mut chain = vec![cand.clone()];
            for _ in 0..h - 1 {
                let prev = &m * chain.last().unwrap();
                chain.push(prev);
            }
            chain.reverse();
            let foot_norm = chain[0].norm();
            if foot_norm <= 1e-12 * scale {
                continue;
            }
            feet.push(fresh.clone() / C64::new(fresh.norm(), 0.0));
            // Normalize the whole chain by the foot for conditioning.
            for v in &mut chain {
                *v /= C64::new(foot_norm, 0.0);
            }
            chains.push(chain);
            found += 1;
        }
        if found < new_tops {
            return Err(StateSpaceError::DecompositionFailure(format!(
                "could not complete {new_tops} chain(s) of height {h} for eigenvalue {lambda}"
            )));
        }
    }
    let covered: usize = chains.iter().map(|c| c.len()).sum();
    if covered != multiplicity {
        return Err(StateSpaceError::DecompositionFailure(format!(
            "chains cover {covered} of multiplicity {multiplicity} for eigenvalue {lambda}"
        )));
    }
    Ok(chains)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dv(v: &[f64]) -> DVector<f64> {
        DVector::from_row_slice(v)
    }

    fn simple_model(a: DMatrix<f64>) -> StateSpaceModel {
        let n = a.nrows();
        StateSpaceModel::new(
            a,
            DMatrix::identity(n, n),
            DMatrix::identity(n, n),
            DMatrix::identity(n, n),
            1.0,
            1.0,
            1.0,
        )
        .unwrap()
    }

    fn example_triangular() -> DMatrix<f64> {
        let l1 = 2f64.powf(0.34);
        let l2 = 2f64.powf(0.05);
        DMatrix::from_row_slice(2, 2, &[l1, l2 - l1, 0.0, l2])
    }

    #[test]
    fn step_identity_dynamics() {
        let m = simple_model(DMatrix::identity(2, 2));
        let x = m
            .step(&dv(&[1.0, 2.0]), &dv(&[0.0, 0.0]), &dv(&[0.0, 0.0]))
            .unwrap();
        assert_eq!(x, dv(&[1.0, 2.0]));
    }

    #[test]
    fn step_diagonal_growth() {
        let a = DMatrix::from_row_slice(2, 2, &[2f64.powf(0.34), 0.0, 0.0, 2f64.powf(0.05)]);
        let m = simple_model(a);
        let x = m
            .step(&dv(&[1.0, 1.0]), &dv(&[0.0, 0.0]), &dv(&[0.0, 0.0]))
            .unwrap();
        assert!((x[0] - 2f64.powf(0.34)).abs() < 1e-12);
        assert!((x[1] - 2f64.powf(0.05)).abs() < 1e-12);
    }

    #[test]
    fn step_triangular_first_basis_vector() {
        let m = simple_model(example_triangular());
        let x = m
            .step(&dv(&[1.0, 0.0]), &dv(&[0.0, 0.0]), &dv(&[0.0, 0.0]))
            .unwrap();
        assert!((x[0] - 2f64.powf(0.34)).abs() < 1e-12);
        assert!(x[1].abs() < 1e-15);
    }

    #[test]
    fn step_is_linear() {
        let m = simple_model(example_triangular());
        let (x1, u1, w1) = (dv(&[0.3, -1.2]), dv(&[0.5, 0.1]), dv(&[-0.2, 0.4]));
        let (x2, u2, w2) = (dv(&[-2.0, 0.7]), dv(&[0.0, -0.3]), dv(&[0.1, 0.1]));
        let lhs = m.step(&(&x1 + &x2), &(&u1 + &u2), &(&w1 + &w2)).unwrap();
        let rhs = m.step(&x1, &u1, &w1).unwrap() + m.step(&x2, &u2, &w2).unwrap();
        assert!((lhs - rhs).amax() < 1e-12);
    }

    #[test]
    fn observe_sums_components() {
        let mut m = simple_model(example_triangular());
        m.c_y = DMatrix::from_row_slice(1, 2, &[1.0, 1.0]);
        let y = m.observe(&dv(&[3.0, 4.0]), &dv(&[0.0])).unwrap();
        assert!((y[0] - 7.0).abs() < 1e-12);
        let y2 = m.observe(&dv(&[1.0, -1.0]), &dv(&[0.5])).unwrap();
        assert!((y2[0] - 0.5).abs() < 1e-12);
        let err = m.observe(&dv(&[1.0, -1.0]), &dv(&[0.51])).unwrap_err();
        assert!(matches!(err, StateSpaceError::NoiseBoundViolated { .. }));
    }

    #[test]
    fn intrinsic_delay_examples() {
        // Direct feedthrough from input to the summed output.
        let mut m = simple_model(example_triangular());
        m.b_u = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
        m.c_y = DMatrix::from_row_slice(1, 2, &[1.0, 1.0]);
        assert_eq!(intrinsic_delay(&m).unwrap(), 0);

        // Single 4x4 shift chain: the superdiagonal feeds component i+1
        // into component i, so an input entering at the last component
        // takes n - 1 steps to reach the first one.
        let n = 4;
        let mut a = DMatrix::identity(n, n) * 2.0;
        for i in 0..n - 1 {
            a[(i, i + 1)] = 1.0;
        }
        let mut b = DMatrix::zeros(n, 1);
        b[(n - 1, 0)] = 1.0;
        let mut c = DMatrix::zeros(1, n);
        c[(0, 0)] = 1.0;
        let model = StateSpaceModel::new(
            a,
            b,
            DMatrix::identity(n, n),
            c,
            1.0,
            0.0,
            1.0,
        )
        .unwrap();
        assert_eq!(intrinsic_delay(&model).unwrap(), n - 1);

        // No path at all.
        let mut blocked = simple_model(DMatrix::identity(2, 2));
        blocked.b_u = DMatrix::from_row_slice(2, 1, &[1.0, 0.0]);
        blocked.c_y = DMatrix::from_row_slice(1, 2, &[0.0, 1.0]);
        assert_eq!(
            intrinsic_delay(&blocked).unwrap_err(),
            StateSpaceError::NoInputOutputPath
        );
    }

    #[test]
    fn observability_examples() {
        let a = example_triangular();
        let c = DMatrix::from_row_slice(1, 2, &[1.0, 1.0]);
        assert!(is_observable(&a, &c));
        let c_blind = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        assert!(!is_observable(&DMatrix::identity(2, 2), &c_blind));
        let a23 = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 3.0]);
        assert!(is_observable(&a23, &c));
    }

    #[test]
    fn reachability_examples() {
        let a = example_triangular();
        let b = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
        assert!(is_reachable(&a, &b));
        let e1 = DMatrix::from_row_slice(2, 1, &[1.0, 0.0]);
        assert!(!is_reachable(&DMatrix::identity(2, 2), &e1));
        let a23 = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 3.0]);
        let ones = DMatrix::from_row_slice(2, 1, &[1.0, 1.0]);
        assert!(is_reachable(&a23, &ones));
    }

    #[test]
    fn spectrum_of_diagonal_growth() {
        let a = DMatrix::from_row_slice(2, 2, &[2f64.powf(0.34), 0.0, 0.0, 2f64.powf(0.05)]);
        let s = unstable_spectrum(&a);
        assert_eq!(s.unstable.len(), 2);
        assert!((s.log_magnitudes[0] - 0.34).abs() < 1e-12);
        assert!((s.log_magnitudes[1] - 0.05).abs() < 1e-12);
    }

    #[test]
    fn spectrum_empty_for_stable() {
        let a = DMatrix::from_row_slice(2, 2, &[0.9, 0.5, 0.0, -0.3]);
        assert!(unstable_spectrum(&a).unstable.is_empty());
    }

    #[test]
    fn spectrum_multiplicity_preserved() {
        let a8 = DMatrix::from_row_slice(1, 1, &[8.0]);
        let s8 = unstable_spectrum(&a8);
        assert_eq!(s8.log_magnitudes, vec![3.0]);
        let a222 = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 2.0, 2.0]));
        let s222 = unstable_spectrum(&a222);
        assert_eq!(s222.log_magnitudes.len(), 3);
        for l in &s222.log_magnitudes {
            assert!((l - 1.0).abs() < 1e-12);
        }
    }

    fn check_jordan(a: &DMatrix<f64>, tol: f64) -> RealJordanForm {
        let jf = real_jordan(a).unwrap();
        let err = (jf.v() * a * jf.v_inv() - jf.lambda() * jf.r()).amax();
        assert!(err <= tol, "residual {err}");
        let orth = (jf.r() * jf.r().transpose() - DMatrix::identity(a.nrows(), a.nrows())).amax();
        assert!(orth <= tol, "R orthogonality off by {orth}");
        let comm = (jf.lambda() * jf.r() - jf.r() * jf.lambda()).amax();
        assert!(comm <= tol, "Lambda and R fail to commute by {comm}");
        jf
    }

    #[test]
    fn jordan_of_rotation_scaling() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, -1.0, 1.0]);
        let jf = check_jordan(&a, 1e-12);
        assert_eq!(jf.blocks().len(), 1);
        let b = &jf.blocks()[0];
        assert!((b.magnitude - 2f64.sqrt()).abs() < 1e-12);
        assert_eq!(b.size, 2);
        let angle = b.angle.unwrap().abs();
        assert!((angle - std::f64::consts::FRAC_PI_4).abs() < 1e-12);
        // Lambda is sqrt(2) I, so the rotation part carries all of A's mix.
        assert!((jf.lambda() - DMatrix::identity(2, 2) * 2f64.sqrt()).amax() < 1e-12);
    }

    #[test]
    fn jordan_of_diagonal_is_diagonal() {
        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![3.0, -0.5, 1.5]));
        let jf = check_jordan(&a, 1e-12);
        // Magnitudes sorted descending.
        let mags: Vec<f64> = jf.blocks().iter().map(|b| b.magnitude).collect();
        assert_eq!(mags, vec![3.0, 1.5, 0.5]);
        // The negative eigenvalue carries a sign-flip rotation.
        let neg = &jf.blocks()[2];
        assert_eq!(jf.r()[(neg.start, neg.start)], -1.0);
    }

    #[test]
    fn jordan_of_the_example_triangular_matrix() {
        let a = example_triangular();
        let jf = check_jordan(&a, 1e-9);
        assert_eq!(jf.blocks().len(), 2);
        assert!((jf.blocks()[0].magnitude - 2f64.powf(0.34)).abs() < 1e-9);
        assert!((jf.blocks()[1].magnitude - 2f64.powf(0.05)).abs() < 1e-9);
        assert!((jf.r() - DMatrix::identity(2, 2)).amax() < 1e-9);
    }

    #[test]
    fn jordan_of_defective_block() {
        let a = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 0.0, 2.0]);
        let jf = check_jordan(&a, 1e-9);
        assert_eq!(jf.blocks().len(), 1);
        assert_eq!(jf.blocks()[0].size, 2);
        assert!((jf.lambda()[(0, 1)]).abs() > 0.0);
    }

    #[test]
    fn jordan_of_negative_defective_block() {
        let a = DMatrix::from_row_slice(2, 2, &[-2.0, 1.0, 0.0, -2.0]);
        let jf = check_jordan(&a, 1e-9);
        assert_eq!(jf.blocks().len(), 1);
        assert!((jf.blocks()[0].magnitude - 2.0).abs() < 1e-9);
    }

    #[test]
    fn jordan_of_complex_defective_pair() {
        // One 4x4 block: double complex pair sqrt(2) e^{+-i pi/4}.
        let c = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, -1.0, 1.0]);
        let mut a = DMatrix::zeros(4, 4);
        a.view_mut((0, 0), (2, 2)).copy_from(&c);
        a.view_mut((2, 2), (2, 2)).copy_from(&c);
        a[(0, 2)] = 1.0;
        a[(1, 3)] = 1.0;
        let jf = check_jordan(&a, 1e-8);
        assert_eq!(jf.blocks().len(), 1);
        assert_eq!(jf.blocks()[0].size, 4);
    }

    #[test]
    fn rotating_frame_basics() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, -1.0, 1.0]);
        let jf = real_jordan(&a).unwrap();
        let x = dv(&[1.0, 0.0]);
        // k = 0 applies only the coordinate change.
        let y0 = rotating_frame(0, &jf, &x);
        assert!((y0 - jf.v() * &x).amax() < 1e-12);
        // Eight 45-degree rotations complete a revolution.
        let y8 = rotating_frame(8, &jf, &x);
        assert!((y8 - jf.v() * &x).amax() < 1e-9);
        // The Euclidean norm never depends on k.
        for k in [-5, -1, 1, 3, 17] {
            let y = rotating_frame(k, &jf, &x);
            assert!((y.norm() - (jf.v() * &x).norm()).abs() < 1e-9);
        }
    }

    #[test]
    fn rotating_frame_trivial_rotation() {
        let a = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 1.5]);
        let jf = real_jordan(&a).unwrap();
        let x = dv(&[0.3, -0.7]);
        for k in [0, 1, 9] {
            let y = rotating_frame(k, &jf, &x);
            assert!((y - jf.v() * &x).amax() < 1e-12);
        }
    }

    #[test]
    fn model_json_round_trip() {
        let m = StateSpaceModel::new(
            example_triangular(),
            DMatrix::from_row_slice(2, 1, &[0.0, 1.0]),
            DMatrix::identity(2, 2),
            DMatrix::from_row_slice(1, 2, &[1.0, 1.0]),
            1.0,
            0.25,
            0.5,
        )
        .unwrap();
        let json = serde_json::to_string(&m).unwrap();
        let back: StateSpaceModel = serde_json::from_str(&json).unwrap();
        assert_eq!(m, back);
        assert!(json.contains("\"B_u\""));
    }

    #[test]
    fn model_json_rejects_unknown_keys() {
        let json = r#"{"A":[[1.0]],"B_u":[[1.0]],"B_w":[[1.0]],"C_y":[[1.0]],
                       "omega":1.0,"gamma":0.0,"omega0":1.0,"extra":3}"#;
        assert!(serde_json::from_str::<StateSpaceModel>(json).is_err());
    }

    #[test]
    fn model_rejects_bad_dimensions() {
        let err = StateSpaceModel::new(
            DMatrix::identity(2, 2),
            DMatrix::identity(3, 3),
            DMatrix::identity(2, 2),
            DMatrix::identity(2, 2),
            1.0,
            0.0,
            1.0,
        )
        .unwrap_err();
        assert!(matches!(err, StateSpaceError::DimensionMismatch(_)));
        let err = StateSpaceModel::new(
            DMatrix::identity(2, 2),
            DMatrix::identity(2, 2),
            DMatrix::identity(2, 2),
            DMatrix::identity(2, 2),
            -1.0,
            0.0,
            1.0,
        )
        .unwrap_err();
        assert!(matches!(err, StateSpaceError::NegativeBound { .. }));
    }
}
