//! Rotations in SO(n) and the orthonormalization machinery that turns a set
//! of `n - 1` independent vectors into a proper rotation.

use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector, Vector3};
// Shadowed by inherent methods whenever std is linked into the build.
#[allow(unused_imports)]
use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

/// Elementwise tolerance on `MᵀM = I` and on `det M = 1`.
pub const ROTATION_TOL: f64 = 1e-9;
/// Orthonormality tolerance for inputs to [`complete_rotation`].
pub const COMPLETION_TOL: f64 = 1e-8;
/// Gram-Schmidt residuals below this fraction of the largest input norm are
/// reported as degenerate.
pub const GS_DEGENERACY: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RotationError {
    #[error("matrix is {rows}x{cols}, expected square of size at least 2")]
    BadShape { rows: usize, cols: usize },
    #[error("matrix contains non-finite entries")]
    NonFinite,
    #[error("MᵀM deviates from identity by {deviation:e}")]
    NotOrthogonal { deviation: f64 },
    #[error("determinant is {det}, expected +1")]
    NotProper { det: f64 },
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("expected {expected} vectors, got {got}")]
    WrongCount { expected: usize, got: usize },
    #[error("vector {index} is (nearly) dependent on its predecessors: residual {residual:e} below {threshold:e}")]
    DegenerateInput { index: usize, residual: f64, threshold: f64 },
    #[error("input vectors are not orthonormal (deviation {deviation:e})")]
    NotOrthonormal { deviation: f64 },
    #[error("rotation axis has zero length")]
    ZeroAxis,
}

/// A proper orthogonal matrix, validated on construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Rotation(DMatrix<f64>);

impl Rotation {
    pub fn new(m: DMatrix<f64>) -> Result<Self, RotationError> {
        let (rows, cols) = m.shape();
        if rows != cols || rows < 2 {
            return Err(RotationError::BadShape { rows, cols });
        }
        if m.iter().any(|x| !x.is_finite()) {
            return Err(RotationError::NonFinite);
        }
        let gram = m.transpose() * &m;
        let deviation = (gram - DMatrix::identity(rows, rows)).amax();
        if deviation > ROTATION_TOL {
            return Err(RotationError::NotOrthogonal { deviation });
        }
        let det = m.determinant();
        if (det - 1.0).abs() > ROTATION_TOL {
            return Err(RotationError::NotProper { det });
        }
        Ok(Self(m))
    }

    pub fn from_row_slice(n: usize, entries: &[f64]) -> Result<Self, RotationError> {
        if entries.len() != n * n {
            return Err(RotationError::WrongCount { expected: n * n, got: entries.len() });
        }
        Self::new(DMatrix::from_row_slice(n, n, entries))
    }

    /// Rotation by `angle` radians about `axis` (right-hand rule), 3-D only.
    pub fn from_axis_angle(axis: [f64; 3], angle: f64) -> Result<Self, RotationError> {
        let a = Vector3::from(axis);
        let norm = a.norm();
        if !(norm > 0.0) {
            return Err(RotationError::ZeroAxis);
        }
        let k = (a / norm).cross_matrix();
        let r = nalgebra::Matrix3::identity() + k * angle.sin() + k * k * (1.0 - angle.cos());
        Self::new(DMatrix::from_column_slice(3, 3, r.as_slice()))
    }

    pub fn identity(n: usize) -> Self {
        assert!(n >= 2, "rotations need dimension at least 2");
        Self(DMatrix::identity(n, n))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.0
    }

    /// The inverse rotation.
    pub fn transpose(&self) -> Self {
        Self(self.0.transpose())
    }

    pub fn compose(&self, rhs: &Rotation) -> Result<Self, RotationError> {
        same_dim(self, rhs)?;
        Ok(Self(&self.0 * &rhs.0))
    }

    pub fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        &self.0 * v
    }

    /// Row-major entries.
    pub fn to_row_major(&self) -> Vec<f64> {
        self.0.transpose().as_slice().to_vec()
    }
}

fn same_dim(a: &Rotation, b: &Rotation) -> Result<(), RotationError> {
    if a.dim() != b.dim() {
        return Err(RotationError::DimensionMismatch { left: a.dim(), right: b.dim() });
    }
    Ok(())
}

/// `C_ji = C_j C_iᵀ`: orientation of frame `j` seen from frame `i`.
pub fn relative_orientation(c_j: &Rotation, c_i: &Rotation) -> Result<Rotation, RotationError> {
    same_dim(c_j, c_i)?;
    Ok(Rotation(&c_j.0 * c_i.0.transpose()))
}

/// Frobenius distance `‖A - B‖_F`.
pub fn rotation_distance(a: &Rotation, b: &Rotation) -> Result<f64, RotationError> {
    same_dim(a, b)?;
    Ok((&a.0 - &b.0).norm())
}

/// Orthonormal vectors produced by Gram-Schmidt; the leading columns of a
/// frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameBasis {
    vectors: Vec<DVector<f64>>,
}

impl FrameBasis {
    pub fn vectors(&self) -> &[DVector<f64>] {
        &self.vectors
    }

    pub fn into_vectors(self) -> Vec<DVector<f64>> {
        self.vectors
    }

    /// Append the pseudovector and return the full proper rotation.
    pub fn complete(&self) -> Result<Rotation, RotationError> {
        complete_rotation(&self.vectors)
    }
}

/// Gram-Schmidt orthonormalization of `vectors`, preserving nested spans.
///
/// Each vector is orthogonalized against its predecessors twice; the first
/// pass is the textbook recursion and its residual decides degeneracy, the
/// second removes the round-off the first leaves behind.
pub fn gram_schmidt(vectors: &[DVector<f64>]) -> Result<FrameBasis, RotationError> {
    let Some(first) = vectors.first() else {
        return Err(RotationError::WrongCount { expected: 1, got: 0 });
    };
    let n = first.len();
    if vectors.len() > n {
        return Err(RotationError::WrongCount { expected: n, got: vectors.len() });
    }
    if let Some(v) = vectors.iter().find(|v| v.len() != n) {
        return Err(RotationError::DimensionMismatch { left: n, right: v.len() });
    }
    let scale = vectors.iter().map(|v| v.norm()).fold(0.0, f64::max);
    let threshold = GS_DEGENERACY * scale;

    let mut basis: Vec<DVector<f64>> = Vec::with_capacity(vectors.len());
    for (index, z) in vectors.iter().enumerate() {
        let mut v = z.clone();
        for b in &basis {
            v.axpy(-z.dot(b), b, 1.0);
        }
        let residual = v.norm();
        if !(residual >= threshold && residual > 0.0) {
            return Err(RotationError::DegenerateInput { index, residual, threshold });
        }
        for b in &basis {
            let c = v.dot(b);
            v.axpy(-c, b, 1.0);
        }
        let norm = v.norm();
        basis.push(v / norm);
    }
    Ok(FrameBasis { vectors: basis })
}

/// Extends `n - 1` orthonormal vectors in `R^n` to a rotation by appending
/// their generalized cross product.
///
/// In 3-D the last column is `b_1 × b_2`. In general dimension its entries
/// are the signed cofactors of the `n × (n-1)` matrix of inputs, which makes
/// the determinant the sum of squared maximal minors, hence `+1`.
pub fn complete_rotation(columns: &[DVector<f64>]) -> Result<Rotation, RotationError> {
    let n = columns.len() + 1;
    if n < 2 {
        return Err(RotationError::WrongCount { expected: 1, got: 0 });
    }
    if let Some(v) = columns.iter().find(|v| v.len() != n) {
        return Err(RotationError::DimensionMismatch { left: n, right: v.len() });
    }
    let partial = DMatrix::from_columns(columns);
    let deviation = (partial.transpose() * &partial - DMatrix::identity(n - 1, n - 1)).amax();
    if !(deviation <= COMPLETION_TOL) {
        return Err(RotationError::NotOrthonormal { deviation });
    }

    let mut last = if n == 3 {
        let b1 = Vector3::new(columns[0][0], columns[0][1], columns[0][2]);
        let b2 = Vector3::new(columns[1][0], columns[1][1], columns[1][2]);
        let c = b1.cross(&b2);
        DVector::from_column_slice(c.as_slice())
    } else {
        DVector::from_fn(n, |r, _| {
            let minor = partial.clone().remove_row(r).determinant();
            if (r + n - 1) % 2 == 0 {
                minor
            } else {
                -minor
            }
        })
    };
    if n != 3 {
        let norm = last.norm();
        last /= norm;
    }

    let mut full = partial.insert_column(n - 1, 0.0);
    full.set_column(n - 1, &last);
    if full.determinant() < 0.0 {
        let flipped = -full.column(n - 1);
        full.set_column(n - 1, &flipped);
    }
    Rotation::new(full)
}

/// Gram-Schmidt followed by completion: the frame spanned by `vectors`.
pub fn orthonormal_frame(vectors: &[DVector<f64>]) -> Result<Rotation, RotationError> {
    gram_schmidt(vectors)?.complete()
}

/// Haar-distributed rotation, deterministic in `seed`.
pub fn random_rotation(n: usize, seed: u64) -> Rotation {
    random_rotation_with(n, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Haar-distributed rotation drawn from `rng`.
pub fn random_rotation_with<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Rotation {
    assert!(n >= 2, "rotations need dimension at least 2");
    loop {
        let g = DMatrix::from_fn(n, n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let qr = g.qr();
        let r = qr.r();
        if (0..n).any(|k| r[(k, k)].abs() < 1e-10) {
            continue;
        }
        let mut q = qr.q();
        for k in 0..n {
            if r[(k, k)] < 0.0 {
                q.column_mut(k).neg_mut();
            }
        }
        if q.determinant() < 0.0 {
            q.column_mut(0).neg_mut();
        }
        if let Ok(rot) = Rotation::new(q) {
            return rot;
        }
    }
}

/// Standard normal vector of length `n`.
pub fn gaussian_vector<R: Rng + ?Sized>(n: usize, rng: &mut R) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal))
}
