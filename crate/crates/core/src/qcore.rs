//! Small-dimension dense complex linear algebra and projective measurement.
//!
//! Everything here is an immutable value type. Randomness is never drawn
//! internally: [`measure`] takes the uniform draw as an argument so callers
//! own the generator and runs stay replayable.
//!
//! Kronecker products put the left operand in the most-significant position,
//! so a control qubit tensored on the left selects the upper or lower block.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Complex scalar used throughout.
pub type C64 = Complex64;

/// Dense complex matrix.
pub type Matrix = DMatrix<C64>;

/// Tolerance for state norms.
pub const NORM_TOL: f64 = 1e-12;

/// Tolerance for operator identities (unitarity, involution, conjugation).
pub const OPERATOR_TOL: f64 = 1e-10;

/// Hermiticity tolerance for dichotomic observables.
pub const HERMITIAN_TOL: f64 = 1e-12;

/// Largest imaginary residue tolerated when reducing an expectation to a real number.
pub const IMAG_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QcoreError {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("matrix is not square ({rows}x{cols})")]
    NotSquare { rows: usize, cols: usize },
    #[error("empty state or operator")]
    Empty,
    #[error("non-finite entry")]
    NonFinite,
    #[error("state is not normalized (squared norm {norm_sq})")]
    NotNormalized { norm_sq: f64 },
    #[error("zero vector cannot be normalized")]
    ZeroVector,
    #[error("matrix is not Hermitian (residual {residual:e})")]
    NotHermitian { residual: f64 },
    #[error("observable does not square to identity (residual {residual:e})")]
    NotInvolution { residual: f64 },
    #[error("matrix is not unitary (residual {residual:e})")]
    NotUnitary { residual: f64 },
    #[error("observables do not commute (residual {residual:e})")]
    Incompatible { residual: f64 },
    #[error("uniform draw {0} outside [0, 1)")]
    InvalidDraw(f64),
    #[error("expectation has imaginary residue {0:e}")]
    ImaginaryResidue(f64),
}

pub type Result<T> = std::result::Result<T, QcoreError>;

/// Largest absolute entry of a matrix.
pub fn max_abs(m: &Matrix) -> f64 {
    m.iter().map(|z| z.norm()).fold(0.0, f64::max)
}

fn check_square(m: &Matrix) -> Result<usize> {
    if m.nrows() != m.ncols() {
        return Err(QcoreError::NotSquare {
            rows: m.nrows(),
            cols: m.ncols(),
        });
    }
    if m.nrows() == 0 {
        return Err(QcoreError::Empty);
    }
    if m.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
        return Err(QcoreError::NonFinite);
    }
    Ok(m.nrows())
}

fn check_dim(expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(QcoreError::DimensionMismatch { expected, found });
    }
    Ok(())
}

/// Identity matrix of the given dimension.
pub fn identity_matrix(dim: usize) -> Matrix {
    Matrix::identity(dim, dim)
}

/// Builds a matrix from real row-major entries.
pub fn real_matrix(dim: usize, entries: &[f64]) -> Matrix {
    assert_eq!(entries.len(), dim * dim, "entry count must be dim^2");
    Matrix::from_fn(dim, dim, |r, c| C64::new(entries[r * dim + c], 0.0))
}

/// Outcome of a dichotomic measurement.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "i8", try_from = "i8")]
pub enum Outcome {
    Plus,
    Minus,
}

impl Outcome {
    pub fn value(self) -> i8 {
        match self {
            Outcome::Plus => 1,
            Outcome::Minus => -1,
        }
    }

    pub fn as_f64(self) -> f64 {
        f64::from(self.value())
    }

    /// Table index: 0 for +1, 1 for -1.
    pub fn index(self) -> usize {
        match self {
            Outcome::Plus => 0,
            Outcome::Minus => 1,
        }
    }

    pub fn from_index(i: usize) -> Self {
        if i == 0 {
            Outcome::Plus
        } else {
            Outcome::Minus
        }
    }

    pub fn flipped(self) -> Self {
        match self {
            Outcome::Plus => Outcome::Minus,
            Outcome::Minus => Outcome::Plus,
        }
    }

    /// Product of two outcomes as an outcome.
    pub fn times(self, other: Outcome) -> Self {
        if self == other {
            Outcome::Plus
        } else {
            Outcome::Minus
        }
    }

    pub fn from_sign(positive: bool) -> Self {
        if positive {
            Outcome::Plus
        } else {
            Outcome::Minus
        }
    }
}

impl From<Outcome> for i8 {
    fn from(o: Outcome) -> i8 {
        o.value()
    }
}

impl TryFrom<i8> for Outcome {
    type Error = String;

    fn try_from(v: i8) -> std::result::Result<Self, Self::Error> {
        match v {
            1 => Ok(Outcome::Plus),
            -1 => Ok(Outcome::Minus),
            other => Err(format!("outcome must be +1 or -1, got {other}")),
        }
    }
}

/// A normalized pure state.
#[derive(Debug, Clone, PartialEq)]
pub struct StateVector {
    amplitudes: DVector<C64>,
}

impl StateVector {
    /// Wraps amplitudes that must already be normalized.
    pub fn new(amplitudes: Vec<C64>) -> Result<Self> {
        let v = DVector::from_vec(amplitudes);
        Self::validate(&v)?;
        let norm_sq = v.norm_squared();
        if (norm_sq - 1.0).abs() > NORM_TOL {
            return Err(QcoreError::NotNormalized { norm_sq });
        }
        Ok(StateVector { amplitudes: v })
    }

    /// Normalizes arbitrary nonzero amplitudes.
    pub fn normalized(amplitudes: Vec<C64>) -> Result<Self> {
        Self::from_unnormalized(DVector::from_vec(amplitudes))
    }

    pub fn from_real(amplitudes: &[f64]) -> Result<Self> {
        Self::normalized(amplitudes.iter().map(|&x| C64::new(x, 0.0)).collect())
    }

    /// Computational basis state |k⟩.
    pub fn basis(dim: usize, k: usize) -> Self {
        assert!(k < dim, "basis index {k} out of range for dim {dim}");
        let mut v = DVector::from_element(dim, C64::new(0.0, 0.0));
        v[k] = C64::new(1.0, 0.0);
        StateVector { amplitudes: v }
    }

    /// The qubit state (|0⟩ + |1⟩)/√2.
    pub fn plus() -> Self {
        let h = std::f64::consts::FRAC_1_SQRT_2;
        StateVector {
            amplitudes: DVector::from_vec(vec![C64::new(h, 0.0), C64::new(h, 0.0)]),
        }
    }

    fn validate(v: &DVector<C64>) -> Result<()> {
        if v.is_empty() {
            return Err(QcoreError::Empty);
        }
        if v.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(QcoreError::NonFinite);
        }
        Ok(())
    }

    pub(crate) fn from_unnormalized(v: DVector<C64>) -> Result<Self> {
        Self::validate(&v)?;
        let norm = v.norm();
        if norm == 0.0 {
            return Err(QcoreError::ZeroVector);
        }
        Ok(StateVector {
            amplitudes: v.unscale(norm),
        })
    }

    pub fn dim(&self) -> usize {
        self.amplitudes.len()
    }

    pub fn amplitudes(&self) -> &DVector<C64> {
        &self.amplitudes
    }

    pub fn norm_squared(&self) -> f64 {
        self.amplitudes.norm_squared()
    }

    /// ⟨self|other⟩.
    pub fn inner(&self, other: &StateVector) -> Result<C64> {
        check_dim(self.dim(), other.dim())?;
        Ok(self.amplitudes.dotc(&other.amplitudes))
    }

    /// Largest componentwise distance to another state.
    pub fn distance(&self, other: &StateVector) -> f64 {
        (&self.amplitudes - &other.amplitudes)
            .iter()
            .map(|z| z.norm())
            .fold(0.0, f64::max)
    }

    /// Distance after removing the best global phase.
    pub fn distance_up_to_phase(&self, other: &StateVector) -> f64 {
        let overlap = self.amplitudes.dotc(&other.amplitudes);
        let phase = if overlap.norm() > 0.0 {
            overlap / overlap.norm()
        } else {
            C64::new(1.0, 0.0)
        };
        (&self.amplitudes * phase - &other.amplitudes)
            .iter()
            .map(|z| z.norm())
            .fold(0.0, f64::max)
    }
}

/// A Hermitian operator with ±1 spectrum, stored with its eigenprojectors.
#[derive(Debug, Clone, PartialEq)]
pub struct DichotomicObservable {
    matrix: Matrix,
    plus: Matrix,
    minus: Matrix,
}

impl DichotomicObservable {
    /// Validates Hermiticity and involution, then derives P± = (I ± M)/2.
    pub fn new(matrix: Matrix) -> Result<Self> {
        let dim = check_square(&matrix)?;
        let herm = max_abs(&(&matrix - matrix.adjoint()));
        if herm > HERMITIAN_TOL {
            return Err(QcoreError::NotHermitian { residual: herm });
        }
        let id = identity_matrix(dim);
        let inv = max_abs(&(&matrix * &matrix - &id));
        if inv > OPERATOR_TOL {
            return Err(QcoreError::NotInvolution { residual: inv });
        }
        let half = C64::new(0.5, 0.0);
        let plus = (&id + &matrix) * half;
        let minus = (&id - &matrix) * half;
        Ok(DichotomicObservable {
            matrix,
            plus,
            minus,
        })
    }

    pub fn identity(dim: usize) -> Self {
        Self::new(identity_matrix(dim)).expect("identity is dichotomic")
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.matrix
    }

    pub fn plus_projector(&self) -> &Matrix {
        &self.plus
    }

    pub fn minus_projector(&self) -> &Matrix {
        &self.minus
    }

    pub fn projector(&self, outcome: Outcome) -> &Matrix {
        match outcome {
            Outcome::Plus => &self.plus,
            Outcome::Minus => &self.minus,
        }
    }

    /// Product of two compatible observables; itself dichotomic.
    pub fn product(&self, other: &DichotomicObservable) -> Result<Self> {
        let residual = commutator_residual(self, other)?;
        if residual > OPERATOR_TOL {
            return Err(QcoreError::Incompatible { residual });
        }
        // Jordan product; equals AB exactly when the pair commutes.
        let ab = &self.matrix * &other.matrix;
        let ba = &other.matrix * &self.matrix;
        Self::new((ab + ba) * C64::new(0.5, 0.0))
    }

    /// U†·A·U.
    pub fn conjugated_by(&self, u: &UnitaryOperator) -> Result<Self> {
        check_dim(self.dim(), u.dim())?;
        let m = u.matrix.adjoint() * &self.matrix * &u.matrix;
        // Rounding in the triple product can leave ~1e-16 anti-Hermitian noise.
        let m = (&m + m.adjoint()) * C64::new(0.5, 0.0);
        Self::new(m)
    }

    pub fn negated(&self) -> Self {
        DichotomicObservable {
            matrix: -&self.matrix,
            plus: self.minus.clone(),
            minus: self.plus.clone(),
        }
    }
}

/// A unitary matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitaryOperator {
    matrix: Matrix,
}

impl UnitaryOperator {
    pub fn new(matrix: Matrix) -> Result<Self> {
        let dim = check_square(&matrix)?;
        let residual = unitarity_residual(&matrix, dim);
        if residual > OPERATOR_TOL {
            return Err(QcoreError::NotUnitary { residual });
        }
        Ok(UnitaryOperator { matrix })
    }

    pub fn identity(dim: usize) -> Self {
        UnitaryOperator {
            matrix: identity_matrix(dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.matrix
    }

    pub fn adjoint(&self) -> Self {
        UnitaryOperator {
            matrix: self.matrix.adjoint(),
        }
    }

    /// self · other (other acts first).
    pub fn compose(&self, other: &UnitaryOperator) -> Result<Self> {
        check_dim(self.dim(), other.dim())?;
        Ok(UnitaryOperator {
            matrix: &self.matrix * &other.matrix,
        })
    }

    pub fn with_global_phase(&self, theta: f64) -> Self {
        UnitaryOperator {
            matrix: &self.matrix * C64::from_polar(1.0, theta),
        }
    }

    /// U†U − I, largest entry.
    pub fn unitarity_residual(&self) -> f64 {
        unitarity_residual(&self.matrix, self.dim())
    }
}

fn unitarity_residual(m: &Matrix, dim: usize) -> f64 {
    max_abs(&(m.adjoint() * m - identity_matrix(dim)))
}

/// Kronecker product with the left operand as the most-significant factor.
pub trait Tensor: Sized {
    fn tensor(&self, other: &Self) -> Self;
}

impl Tensor for StateVector {
    fn tensor(&self, other: &Self) -> Self {
        StateVector {
            amplitudes: self.amplitudes.kronecker(&other.amplitudes),
        }
    }
}

impl Tensor for UnitaryOperator {
    fn tensor(&self, other: &Self) -> Self {
        UnitaryOperator {
            matrix: self.matrix.kronecker(&other.matrix),
        }
    }
}

impl Tensor for DichotomicObservable {
    fn tensor(&self, other: &Self) -> Self {
        let matrix = self.matrix.kronecker(&other.matrix);
        let dim = matrix.nrows();
        let half = C64::new(0.5, 0.0);
        let id = identity_matrix(dim);
        DichotomicObservable {
            plus: (&id + &matrix) * half,
            minus: (&id - &matrix) * half,
            matrix,
        }
    }
}

/// Free-function form of [`Tensor::tensor`].
pub fn tensor_product<T: Tensor>(a: &T, b: &T) -> T {
    a.tensor(b)
}

/// C_U = |0⟩⟨0| ⊗ I + |1⟩⟨1| ⊗ U, control qubit most significant.
pub fn controlled(u: &UnitaryOperator) -> UnitaryOperator {
    let d = u.dim();
    let mut m = Matrix::zeros(2 * d, 2 * d);
    for i in 0..d {
        m[(i, i)] = C64::new(1.0, 0.0);
    }
    m.view_mut((d, d), (d, d)).copy_from(&u.matrix);
    UnitaryOperator { matrix: m }
}

/// U|ψ⟩. The result is renormalized to absorb rounding drift.
pub fn apply(u: &UnitaryOperator, psi: &StateVector) -> Result<StateVector> {
    check_dim(u.dim(), psi.dim())?;
    let out = &u.matrix * &psi.amplitudes;
    debug_assert!((out.norm_squared() - 1.0).abs() < OPERATOR_TOL);
    StateVector::from_unnormalized(out)
}

/// Result of a non-destructive projective measurement.
#[derive(Debug, Clone, PartialEq)]
pub struct Measurement {
    pub outcome: Outcome,
    pub collapsed: StateVector,
    pub prob_plus: f64,
}

/// Lüders measurement of `a` on `psi`; outcome +1 iff `u < ⟨ψ|P₊|ψ⟩`.
pub fn measure(a: &DichotomicObservable, psi: &StateVector, u: f64) -> Result<Measurement> {
    check_dim(a.dim(), psi.dim())?;
    if !(0.0..1.0).contains(&u) {
        return Err(QcoreError::InvalidDraw(u));
    }
    let plus_branch = &a.plus * &psi.amplitudes;
    let prob_plus = plus_branch.norm_squared().clamp(0.0, 1.0);
    let mut outcome = Outcome::from_sign(u < prob_plus);
    let mut branch = match outcome {
        Outcome::Plus => plus_branch,
        Outcome::Minus => &a.minus * &psi.amplitudes,
    };
    // A draw can only land on a vanishing branch through rounding at the boundary.
    if branch.norm_squared() < 1e-300 {
        outcome = outcome.flipped();
        branch = &*a.projector(outcome) * &psi.amplitudes;
    }
    Ok(Measurement {
        outcome,
        collapsed: StateVector::from_unnormalized(branch)?,
        prob_plus,
    })
}

/// ⟨ψ|M|ψ⟩ for a Hermitian matrix, reduced to a real number.
pub fn operator_expectation(m: &Matrix, psi: &StateVector) -> Result<f64> {
    check_square(m)?;
    check_dim(m.nrows(), psi.dim())?;
    let z = psi.amplitudes.dotc(&(m * &psi.amplitudes));
    if z.im.abs() > IMAG_TOL {
        return Err(QcoreError::ImaginaryResidue(z.im));
    }
    Ok(z.re)
}

/// ⟨ψ|A|ψ⟩, clamped into [−1, 1].
pub fn expectation(a: &DichotomicObservable, psi: &StateVector) -> Result<f64> {
    Ok(operator_expectation(&a.matrix, psi)?.clamp(-1.0, 1.0))
}

/// Largest entry of AB − BA.
pub fn commutator_residual(a: &DichotomicObservable, b: &DichotomicObservable) -> Result<f64> {
    check_dim(a.dim(), b.dim())?;
    Ok(max_abs(&(&a.matrix * &b.matrix - &b.matrix * &a.matrix)))
}

/// Single-qubit Pauli operators and rotations.
pub mod pauli {
    use super::*;

    pub fn x() -> DichotomicObservable {
        DichotomicObservable::new(real_matrix(2, &[0.0, 1.0, 1.0, 0.0])).unwrap()
    }

    pub fn z() -> DichotomicObservable {
        DichotomicObservable::new(real_matrix(2, &[1.0, 0.0, 0.0, -1.0])).unwrap()
    }

    pub fn y() -> DichotomicObservable {
        let i = C64::new(0.0, 1.0);
        let zero = C64::new(0.0, 0.0);
        DichotomicObservable::new(Matrix::from_row_slice(2, 2, &[zero, -i, i, zero])).unwrap()
    }

    /// cos(α)·Z + sin(α)·X, the Bloch direction at angle α in the x–z plane.
    pub fn xz_plane(angle: f64) -> DichotomicObservable {
        let (s, c) = angle.sin_cos();
        DichotomicObservable::new(real_matrix(2, &[c, s, s, -c])).unwrap()
    }

    /// exp(−i·angle·Y/2): rotates Bloch vectors by `angle` about ŷ, taking ẑ toward x̂.
    pub fn y_rotation(angle: f64) -> UnitaryOperator {
        let (s, c) = (angle / 2.0).sin_cos();
        UnitaryOperator::new(real_matrix(2, &[c, -s, s, c])).unwrap()
    }
}
