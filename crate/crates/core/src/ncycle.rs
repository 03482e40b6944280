//! n-cycle observable families, test states and bounds.
//!
//! Odd cycles live on a qutrit: `A_j = 1 − 2|v_j⟩⟨v_j|` with rays `v_j` spaced
//! so that neighbours are orthogonal. Even cycles live on a ququart viewed as
//! two qubits (`|k⟩ ↔ |k₁k₂⟩`, `k = 2k₁ + k₂`), with even-indexed observables on
//! the first qubit and odd-indexed ones on the second, both in the x–z plane at
//! angle `πj/n`.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::qcore::{
    commutator_residual, expectation, pauli, real_matrix, DichotomicObservable, Matrix, QcoreError,
    StateVector, Tensor, C64, OPERATOR_TOL,
};

/// Smallest and largest supported cycle lengths.
pub const MIN_N: usize = 4;
pub const MAX_N: usize = 12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NcycleError {
    #[error("cycle length {0} outside supported range {MIN_N}..={MAX_N}")]
    UnsupportedN(usize),
    #[error("operation requires {expected:?} n, got n = {n}")]
    WrongParity { n: usize, expected: Parity },
    #[error("index {index} out of range for {bound}")]
    IndexOutOfRange { index: usize, bound: usize },
    #[error("family invariant violated: {0}")]
    Invariant(String),
    #[error(transparent)]
    Qcore(#[from] QcoreError),
}

pub type Result<T> = std::result::Result<T, NcycleError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Parity {
    Even,
    Odd,
}

impl Parity {
    pub fn of(n: usize) -> Self {
        if n % 2 == 0 {
            Parity::Even
        } else {
            Parity::Odd
        }
    }
}

/// A validated cycle length.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "usize", into = "usize")]
pub struct CycleSpec {
    n: usize,
}

impl CycleSpec {
    pub fn new(n: usize) -> Result<Self> {
        if !(MIN_N..=MAX_N).contains(&n) {
            return Err(NcycleError::UnsupportedN(n));
        }
        Ok(CycleSpec { n })
    }

    pub fn n(self) -> usize {
        self.n
    }

    pub fn parity(self) -> Parity {
        Parity::of(self.n)
    }

    pub fn register_dim(self) -> usize {
        match self.parity() {
            Parity::Odd => 3,
            Parity::Even => 4,
        }
    }

    /// Number of delayed-choice settings: `j ∈ 0..n−1` for even, `0..n` for odd.
    pub fn setting_count(self) -> usize {
        match self.parity() {
            Parity::Even => self.n - 1,
            Parity::Odd => self.n,
        }
    }

    fn require(self, parity: Parity) -> Result<()> {
        if self.parity() != parity {
            return Err(NcycleError::WrongParity {
                n: self.n,
                expected: parity,
            });
        }
        Ok(())
    }
}

impl TryFrom<usize> for CycleSpec {
    type Error = NcycleError;
    fn try_from(n: usize) -> Result<Self> {
        CycleSpec::new(n)
    }
}

impl From<CycleSpec> for usize {
    fn from(s: CycleSpec) -> usize {
        s.n
    }
}

/// Sign of the closing term `⟨A_{n−1}A_0⟩` in the cycle expression: `(−1)^{n−1}`.
pub fn closing_sign(n: usize) -> f64 {
    if n % 2 == 1 {
        1.0
    } else {
        -1.0
    }
}

/// Sign attached to edge `i` (the pair `A_i, A_{i+1 mod n}`).
pub fn edge_sign(n: usize, i: usize) -> f64 {
    if i + 1 == n {
        closing_sign(n)
    } else {
        1.0
    }
}

/// Left-hand side of the cycle inequality `Σ sign_i ⟨A_iA_{i+1}⟩ ≥ 2 − n`.
pub fn cycle_sum(n: usize, edge_correlators: &[f64]) -> f64 {
    assert_eq!(edge_correlators.len(), n, "one correlator per edge");
    edge_correlators
        .iter()
        .enumerate()
        .map(|(i, c)| edge_sign(n, i) * c)
        .sum()
}

/// Noncontextual bound `2 − n`.
pub fn noncontextual_bound(n: usize) -> f64 {
    2.0 - n as f64
}

/// Maximal quantum value of the cycle expression.
pub fn tsirelson_bound(n: usize) -> Result<f64> {
    let spec = CycleSpec::new(n)?;
    let nf = n as f64;
    let c = (PI / nf).cos();
    Ok(match spec.parity() {
        Parity::Even => -nf * c,
        Parity::Odd => (nf - 3.0 * nf * c) / (1.0 + c),
    })
}

/// `cos²φ` of the odd-cycle rays.
pub fn odd_ray_cos_sq(n: usize) -> f64 {
    let c = (PI / n as f64).cos();
    c / (1.0 + c)
}

/// Unit ray `v_j` for an odd cycle.
pub fn odd_ray(n: usize, j: usize) -> Result<[f64; 3]> {
    let spec = CycleSpec::new(n)?;
    spec.require(Parity::Odd)?;
    if j >= n {
        return Err(NcycleError::IndexOutOfRange { index: j, bound: n });
    }
    let cos_phi = odd_ray_cos_sq(n).sqrt();
    let sin_phi = (1.0 - cos_phi * cos_phi).sqrt();
    let angle = PI * (j * (n - 1)) as f64 / n as f64;
    Ok([sin_phi * angle.cos(), sin_phi * angle.sin(), cos_phi])
}

/// `1 − 2|v⟩⟨v|` for a real unit ray.
pub fn reflection(v: &[f64; 3]) -> Result<DichotomicObservable> {
    let mut m = [0.0; 9];
    for r in 0..3 {
        for c in 0..3 {
            m[r * 3 + c] = if r == c { 1.0 } else { 0.0 } - 2.0 * v[r] * v[c];
        }
    }
    Ok(DichotomicObservable::new(real_matrix(3, &m))?)
}

pub fn odd_observable(n: usize, j: usize) -> Result<DichotomicObservable> {
    reflection(&odd_ray(n, j)?)
}

fn basis_sum_operator(map: impl Fn(usize) -> (usize, f64)) -> Matrix {
    // Σ_k coeff(k) |target(k)⟩⟨k|
    let mut m = Matrix::zeros(4, 4);
    for k in 0..4 {
        let (target, coeff) = map(k);
        m[(target, k)] += C64::new(coeff, 0.0);
    }
    m
}

/// The four ququart operators `X₁, Z₁, X₂, Z₂`, transcribed as basis sums.
#[derive(Debug, Clone)]
pub struct QuquartOperators {
    pub x1: DichotomicObservable,
    pub z1: DichotomicObservable,
    pub x2: DichotomicObservable,
    pub z2: DichotomicObservable,
}

impl QuquartOperators {
    pub fn new() -> Result<Self> {
        let sign = |e: usize| if e % 2 == 0 { 1.0 } else { -1.0 };
        let x1 = basis_sum_operator(|k| ((k + 2) % 4, 1.0));
        let z1 = basis_sum_operator(|k| (k, sign(k / 2)));
        // k + (−1)^k mod 4
        let x2 = basis_sum_operator(|k| (if k % 2 == 0 { k + 1 } else { k - 1 }, 1.0));
        let z2 = basis_sum_operator(|k| (k, sign(k)));
        // Construction fails loudly if the transcription is not Hermitian.
        Ok(QuquartOperators {
            x1: DichotomicObservable::new(x1)?,
            z1: DichotomicObservable::new(z1)?,
            x2: DichotomicObservable::new(x2)?,
            z2: DichotomicObservable::new(z2)?,
        })
    }
}

/// Even-cycle observable `A_j`.
pub fn even_observable(n: usize, j: usize) -> Result<DichotomicObservable> {
    let spec = CycleSpec::new(n)?;
    spec.require(Parity::Even)?;
    if j >= n {
        return Err(NcycleError::IndexOutOfRange { index: j, bound: n });
    }
    let ops = QuquartOperators::new()?;
    let (z, x) = if j % 2 == 0 {
        (&ops.z1, &ops.x1)
    } else {
        (&ops.z2, &ops.x2)
    };
    let (s, c) = even_angle(n, j).sin_cos();
    let m = z.matrix() * C64::new(c, 0.0) + x.matrix() * C64::new(s, 0.0);
    Ok(DichotomicObservable::new(m)?)
}

/// Angle `πj/n` of even-cycle observable `A_j` within its qubit's x–z plane.
pub fn even_angle(n: usize, j: usize) -> f64 {
    PI * j as f64 / n as f64
}

/// Which qubit (0 = most significant) carries even-cycle observable `A_j`.
pub fn even_qubit(j: usize) -> usize {
    j % 2
}

/// The maximally violating test state for the family.
///
/// Odd cycles use `|2⟩`. Even cycles use the antisymmetric two-qubit state
/// `(|1⟩ − |2⟩)/√2`: with the observables above it gives
/// `⟨A_iA_{i+1}⟩ = −cos(π/n)` on every edge, so the cycle expression reaches
/// `−n·cos(π/n)`. The symmetric state `(|0⟩ + |3⟩)/√2` flips every
/// correlator and only saturates the mirrored bound `+n·cos(π/n)`.
pub fn test_state(spec: CycleSpec) -> StateVector {
    match spec.parity() {
        Parity::Odd => StateVector::basis(3, 2),
        Parity::Even => StateVector::from_real(&[0.0, 1.0, -1.0, 0.0]).unwrap(),
    }
}

/// `(|0⟩ + |3⟩)/√2`, the symmetric Bell-type ququart state.
pub fn symmetric_even_state() -> StateVector {
    StateVector::from_real(&[1.0, 0.0, 0.0, 1.0]).unwrap()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Party {
    Alice,
    Bob,
}

/// Two-qubit chained-Bell settings, built from Pauli tensor products.
///
/// Alice's `i` sits at angle `2πi/n` on qubit one, Bob's `i` at `π(2i+1)/n`
/// on qubit two; they coincide with `A_{2i}` and `A_{2i+1}` respectively.
pub fn chained_bell_observable(n: usize, party: Party, i: usize) -> Result<DichotomicObservable> {
    let spec = CycleSpec::new(n)?;
    spec.require(Parity::Even)?;
    if i >= n / 2 {
        return Err(NcycleError::IndexOutOfRange {
            index: i,
            bound: n / 2,
        });
    }
    let id = DichotomicObservable::identity(2);
    let nf = n as f64;
    Ok(match party {
        Party::Alice => pauli::xz_plane(2.0 * PI * i as f64 / nf).tensor(&id),
        Party::Bob => id.tensor(&pauli::xz_plane(PI * (2 * i + 1) as f64 / nf)),
    })
}

/// Observables and test state for one cycle length.
#[derive(Debug, Clone)]
pub struct ObservableFamily {
    spec: CycleSpec,
    observables: Vec<DichotomicObservable>,
    test_state: StateVector,
}

impl ObservableFamily {
    pub fn new(spec: CycleSpec) -> Result<Self> {
        let n = spec.n();
        let observables = (0..n)
            .map(|j| match spec.parity() {
                Parity::Odd => odd_observable(n, j),
                Parity::Even => even_observable(n, j),
            })
            .collect::<Result<Vec<_>>>()?;
        for i in 0..n {
            let r = commutator_residual(&observables[i], &observables[(i + 1) % n])?;
            if r > OPERATOR_TOL {
                return Err(NcycleError::Invariant(format!(
                    "A_{i} and A_{} do not commute (residual {r:e})",
                    (i + 1) % n
                )));
            }
        }
        Ok(ObservableFamily {
            spec,
            observables,
            test_state: test_state(spec),
        })
    }

    pub fn for_n(n: usize) -> Result<Self> {
        Self::new(CycleSpec::new(n)?)
    }

    pub fn spec(&self) -> CycleSpec {
        self.spec
    }

    pub fn n(&self) -> usize {
        self.spec.n()
    }

    /// `A_j`, index taken mod n.
    pub fn observable(&self, j: usize) -> &DichotomicObservable {
        &self.observables[j % self.n()]
    }

    pub fn observables(&self) -> &[DichotomicObservable] {
        &self.observables
    }

    pub fn test_state(&self) -> &StateVector {
        &self.test_state
    }

    /// Exact `⟨A_iA_{i+1}⟩` on the test state.
    pub fn exact_edge_correlator(&self, i: usize) -> Result<f64> {
        let p = self.observable(i).product(self.observable(i + 1))?;
        Ok(expectation(&p, &self.test_state)?)
    }

    pub fn exact_edge_correlators(&self) -> Result<Vec<f64>> {
        (0..self.n())
            .map(|i| self.exact_edge_correlator(i))
            .collect()
    }

    /// Exact cycle expression on the test state.
    pub fn exact_cycle_sum(&self) -> Result<f64> {
        Ok(cycle_sum(self.n(), &self.exact_edge_correlators()?))
    }
}

/// Dot product of two real 3-vectors.
pub fn dot3(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Cross product of two real 3-vectors.
pub fn cross3(a: &[f64; 3], b: &[f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

/// Real 3-vector as a qutrit state.
pub fn ray_state(v: &[f64; 3]) -> StateVector {
    StateVector::from_real(v).expect("rays are unit vectors")
}
