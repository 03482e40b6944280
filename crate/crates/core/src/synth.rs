//! Context-switching unitaries and their conjugation certificates.
//!
//! Every unitary leaving this module has been checked against the
//! conjugation relations it is supposed to realize.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ncycle::{
    cross3, even_angle, even_qubit, odd_ray, ray_state, NcycleError, ObservableFamily, Parity,
};
use crate::qcore::{
    max_abs, pauli, DichotomicObservable, Matrix, QcoreError, Tensor, UnitaryOperator, C64,
    OPERATOR_TOL,
};

/// Residual allowed when a conjugation chain is walked all the way round the cycle.
pub const CYCLE_CHAIN_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthError {
    #[error("conjugation check failed for {what}: residual {residual:e}")]
    VerificationFailed { what: String, residual: f64 },
    #[error("setting index {index} out of range (expected < {bound})")]
    IndexOutOfRange { index: usize, bound: usize },
    #[error("operation requires a {0:?} family")]
    WrongParity(Parity),
    #[error(transparent)]
    Ncycle(#[from] NcycleError),
    #[error(transparent)]
    Qcore(#[from] QcoreError),
}

pub type Result<T> = std::result::Result<T, SynthError>;

/// Largest entry of `U†AU − B`.
pub fn verify_conjugation(
    u: &UnitaryOperator,
    a: &DichotomicObservable,
    b: &DichotomicObservable,
) -> f64 {
    let m = u.matrix().adjoint() * a.matrix() * u.matrix();
    max_abs(&(m - b.matrix()))
}

fn require(family: &ObservableFamily, parity: Parity) -> Result<()> {
    if family.spec().parity() != parity {
        return Err(SynthError::WrongParity(parity));
    }
    Ok(())
}

fn checked(what: impl Into<String>, residual: f64, tol: f64) -> Result<()> {
    if residual < tol {
        Ok(())
    } else {
        Err(SynthError::VerificationFailed {
            what: what.into(),
            residual,
        })
    }
}

fn outer_sum(terms: &[(f64, [f64; 3], [f64; 3])]) -> Matrix {
    // Σ c |left⟩⟨right|
    let mut m = Matrix::zeros(3, 3);
    for (c, left, right) in terms {
        for r in 0..3 {
            for k in 0..3 {
                m[(r, k)] += C64::new(c * left[r] * right[k], 0.0);
            }
        }
    }
    m
}

fn odd_basis(family: &ObservableFamily, j: usize) -> Result<([f64; 3], [f64; 3], [f64; 3])> {
    let n = family.n();
    let vj = odd_ray(n, j % n)?;
    let vk = odd_ray(n, (j + 1) % n)?;
    Ok((vj, vk, cross3(&vj, &vk)))
}

/// Odd-cycle step `U_{j,j+1}` with `U†A_jU = A_{j+1}`.
///
/// Rotation by π/2 in span{v_j, v_{j+1}} taking `v_{j+1} ↦ v_j` and
/// `v_j ↦ −v_{j+1}`, identity on `v_j × v_{j+1}`.
pub fn odd_step_unitary(family: &ObservableFamily, j: usize) -> Result<UnitaryOperator> {
    require(family, Parity::Odd)?;
    let n = family.n();
    if j >= n {
        return Err(SynthError::IndexOutOfRange { index: j, bound: n });
    }
    let (vj, vk, w) = odd_basis(family, j)?;
    let u = UnitaryOperator::new(outer_sum(&[(1.0, vj, vk), (-1.0, vk, vj), (1.0, w, w)]))?;
    checked(
        format!("odd step U_{{{j},{}}}", (j + 1) % n),
        verify_conjugation(&u, family.observable(j), family.observable(j + 1)),
        OPERATOR_TOL,
    )?;
    Ok(u)
}

/// The matrix `−|v_j⟩⟨−_j|/√2 + |v_{j+1}⟩⟨+_j|/√2 + |w⟩⟨w|`, taken literally.
///
/// This is a π/4 plane rotation and does not conjugate `A_j` into `A_{j+1}`;
/// it is kept unverified as a regression witness.
pub fn literal_odd_step_matrix(family: &ObservableFamily, j: usize) -> Result<UnitaryOperator> {
    require(family, Parity::Odd)?;
    let (vj, vk, w) = odd_basis(family, j)?;
    let h = std::f64::consts::FRAC_1_SQRT_2;
    // ⟨−_j| = ⟨v_{j+1}| − ⟨v_j|,  ⟨+_j| = ⟨v_j| + ⟨v_{j+1}|
    let m = outer_sum(&[
        (-h, vj, vk),
        (h, vj, vj),
        (h, vk, vj),
        (h, vk, vk),
        (1.0, w, w),
    ]);
    Ok(UnitaryOperator::new(m)?)
}

/// Angle of the y-rotation in the even step `U_k`, acting on the qubit of `A_{k±1}`.
///
/// `R_y(θ)† σ(α) R_y(θ) = σ(α − θ)`, so mapping `A_{k−1}` onto `A_{k+1}`
/// needs `θ = α_{k−1} − α_{k+1}`.
pub fn even_step_angle(n: usize, k: usize) -> f64 {
    let prev = (k + n - 1) % n;
    even_angle(n, prev) - even_angle(n, k + 1)
}

/// Product-form factors `(U₁, U₂)` of the even step `U_k`.
pub fn even_step_factors(n: usize, k: usize) -> (UnitaryOperator, UnitaryOperator) {
    let rot = pauli::y_rotation(even_step_angle(n, k));
    let id = UnitaryOperator::identity(2);
    // A_k's qubit is left alone; the other qubit carries A_{k−1} and A_{k+1}.
    if even_qubit(k) == 0 {
        (id, rot)
    } else {
        (rot, id)
    }
}

/// Even-cycle step `U_k`: fixes `A_k`, maps `A_{k−1 mod n}` to `A_{k+1}`.
pub fn even_step_unitary(family: &ObservableFamily, k: usize) -> Result<UnitaryOperator> {
    require(family, Parity::Even)?;
    let n = family.n();
    if k + 1 >= n {
        return Err(SynthError::IndexOutOfRange {
            index: k,
            bound: n - 1,
        });
    }
    let (u1, u2) = even_step_factors(n, k);
    let u = u1.tensor(&u2);
    checked(
        format!("even step U_{k} fixing A_{k}"),
        verify_conjugation(&u, family.observable(k), family.observable(k)),
        OPERATOR_TOL,
    )?;
    checked(
        format!(
            "even step U_{k} mapping A_{} to A_{}",
            (k + n - 1) % n,
            k + 1
        ),
        verify_conjugation(&u, family.observable(k + n - 1), family.observable(k + 1)),
        OPERATOR_TOL,
    )?;
    Ok(u)
}

/// Logical observables realized by the two physical measurement slots.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotMap {
    /// Observable indices effectively measured when the ancilla reads 0.
    pub branch0: [usize; 2],
    /// Observable indices effectively measured when the ancilla reads 1.
    pub branch1: [usize; 2],
}

impl SlotMap {
    /// Slot assignment for setting `j` of an n-cycle.
    pub fn for_setting(n: usize, j: usize) -> Self {
        match Parity::of(n) {
            Parity::Even => {
                let branch1 = if j % 2 == 0 { [j, j + 1] } else { [j + 1, j] };
                SlotMap {
                    branch0: [0, n - 1],
                    branch1,
                }
            }
            Parity::Odd => SlotMap {
                branch0: [j, j],
                branch1: [j, (j + 1) % n],
            },
        }
    }

    pub fn branch(&self, b: u8) -> [usize; 2] {
        if b == 0 {
            self.branch0
        } else {
            self.branch1
        }
    }
}

/// A verified controlled-unitary setting.
#[derive(Debug, Clone)]
pub struct SettingUnitary {
    pub j: usize,
    pub unitary: UnitaryOperator,
    pub slot_map: SlotMap,
}

/// `W_j = U_0 U_1 ⋯ U_j`; conjugating by it walks `{A_0, A_{n−1}}` onto `{A_j, A_{j+1}}`.
///
/// The steps act on alternating qubits with y-rotations only, so they commute
/// and the product order is immaterial.
pub fn even_setting_unitary(family: &ObservableFamily, j: usize) -> Result<SettingUnitary> {
    require(family, Parity::Even)?;
    let n = family.n();
    if j + 1 >= n {
        return Err(SynthError::IndexOutOfRange {
            index: j,
            bound: n - 1,
        });
    }
    let mut w = UnitaryOperator::identity(4);
    for k in 0..=j {
        w = w.compose(&even_step_unitary(family, k)?)?;
    }
    let slot_map = SlotMap::for_setting(n, j);
    let physical = [0, n - 1];
    for (slot, &phys) in physical.iter().enumerate() {
        let target = slot_map.branch1[slot];
        checked(
            format!("W_{j} slot {slot}: A_{phys} -> A_{target}"),
            verify_conjugation(&w, family.observable(phys), family.observable(target)),
            OPERATOR_TOL,
        )?;
    }
    Ok(SettingUnitary {
        j,
        unitary: w,
        slot_map,
    })
}

/// Odd setting: the single step `U_{j,j+1}`, slots `(A_j, A_j)` / `(A_j, A_{j+1})`.
pub fn odd_setting_unitary(family: &ObservableFamily, j: usize) -> Result<SettingUnitary> {
    Ok(SettingUnitary {
        j,
        unitary: odd_step_unitary(family, j)?,
        slot_map: SlotMap::for_setting(family.n(), j),
    })
}

/// The verified setting unitary for any parity.
pub fn setting_unitary(family: &ObservableFamily, j: usize) -> Result<SettingUnitary> {
    match family.spec().parity() {
        Parity::Even => even_setting_unitary(family, j),
        Parity::Odd => odd_setting_unitary(family, j),
    }
}

/// All settings of a family, in order.
pub fn all_settings(family: &ObservableFamily) -> Result<Vec<SettingUnitary>> {
    (0..family.spec().setting_count())
        .map(|j| setting_unitary(family, j))
        .collect()
}

/// The ray orthogonal to both `v_j` and `v_{j+1}`.
pub fn odd_fixed_ray(family: &ObservableFamily, j: usize) -> Result<crate::qcore::StateVector> {
    let (_, _, w) = odd_basis(family, j)?;
    Ok(ray_state(&w))
}
