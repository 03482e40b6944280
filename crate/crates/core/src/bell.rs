//! Auxiliary CHSH test on the ancilla–register state left by the control gate.
//!
//! Bob holds the ancilla and asks `Z` or `X`; Alice asks one of two questions
//! on the effective qubit spanned by `|χ⟩` and the part of `U|χ⟩` orthogonal to it.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::boxes::{classical_chsh_answers, BoxKind, BoxModel};
use crate::engine::{Estimate, RunStream, MIN_CELL_COUNT, SIGMA};
use crate::ncycle::{ObservableFamily, Parity};
use crate::qcore::{
    apply, controlled, measure, pauli, DichotomicObservable, Matrix, Outcome, QcoreError,
    StateVector, Tensor, UnitaryOperator, C64,
};
use crate::synth::{setting_unitary, SynthError};

/// Overlaps this close to 1 leave no room for an effective qubit.
pub const DEGENERACY_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BellError {
    #[error("⟨χ|U|χ⟩ has modulus squared {0}; the effective basis is degenerate")]
    Degenerate(f64),
    #[error("a = {0} outside [0, 1)")]
    OverlapOutOfRange(f64),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Qcore(#[from] QcoreError),
}

pub type Result<T> = std::result::Result<T, BellError>;

/// `{|0̄⟩, |1̄⟩}` with `U|χ⟩ = e^{iδ}(√a|0̄⟩ + √(1−a)|1̄⟩)`.
#[derive(Debug, Clone, PartialEq)]
pub struct EffectiveQubit {
    pub bar0: StateVector,
    pub bar1: StateVector,
    pub a: f64,
    /// Phase of `⟨χ|U|χ⟩`; Bob's `X` question is rotated by it.
    pub delta: f64,
}

pub fn effective_basis(chi: &StateVector, u: &UnitaryOperator) -> Result<EffectiveQubit> {
    let u_chi = apply(u, chi)?;
    let z = chi.inner(&u_chi)?;
    let a = z.norm_sqr();
    if a >= 1.0 - DEGENERACY_TOL {
        return Err(BellError::Degenerate(a));
    }
    let delta = if z.norm() > 0.0 { z.arg() } else { 0.0 };
    let rotated = u_chi.amplitudes() * C64::from_polar(1.0, -delta);
    let rest = rotated - chi.amplitudes() * C64::new(a.sqrt(), 0.0);
    let bar1 = StateVector::normalized(rest.iter().copied().collect())?;
    Ok(EffectiveQubit {
        bar0: chi.clone(),
        bar1,
        a,
        delta,
    })
}

/// `(|0⟩|χ⟩ + |1⟩U|χ⟩)/√2`, built as `C_U(|+⟩ ⊗ |χ⟩)`.
pub fn circuit_state(chi: &StateVector, u: &UnitaryOperator) -> Result<StateVector> {
    Ok(apply(&controlled(u), &StateVector::plus().tensor(chi))?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChshSettings {
    pub theta: f64,
    pub phi: f64,
    pub omega: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AliceQuestion {
    A1,
    A2,
}

fn outer(x: &StateVector, y: &StateVector) -> Matrix {
    x.amplitudes() * y.amplitudes().adjoint()
}

/// `Ā₁ = sinθ Σ_z + cosθ Σ_x` or `Ā₂ = sinφ Σ_x + cosφ Σ_z` on the effective span, `+1` elsewhere.
pub fn alice_observable(
    settings: &ChshSettings,
    which: AliceQuestion,
    eff: &EffectiveQubit,
) -> Result<DichotomicObservable> {
    let (p0, p1) = (outer(&eff.bar0, &eff.bar0), outer(&eff.bar1, &eff.bar1));
    let sz = &p0 - &p1;
    let sx = outer(&eff.bar0, &eff.bar1) + outer(&eff.bar1, &eff.bar0);
    let (cz, cx) = match which {
        AliceQuestion::A1 => (settings.theta.sin(), settings.theta.cos()),
        AliceQuestion::A2 => (settings.phi.cos(), settings.phi.sin()),
    };
    let d = eff.bar0.dim();
    let complement = Matrix::identity(d, d) - p0 - p1;
    let m = sz * C64::new(cz, 0.0) + sx * C64::new(cx, 0.0) + complement;
    Ok(DichotomicObservable::new(m)?)
}

/// Bob's `B̄₁ = Z` and `B̄₂ = cosδ X + sinδ Y`.
pub fn bob_observables(delta: f64) -> [DichotomicObservable; 2] {
    let (s, c) = delta.sin_cos();
    let b2 = pauli::x().matrix() * C64::new(c, 0.0) + pauli::y().matrix() * C64::new(s, 0.0);
    [
        pauli::z(),
        DichotomicObservable::new(b2).expect("rotated Pauli is dichotomic"),
    ]
}

/// The four question pairs, as `(bob, alice, sign)` with the CHSH signs.
pub const CHSH_TERMS: [(usize, usize, f64); 4] =
    [(0, 0, 1.0), (1, 1, 1.0), (1, 0, 1.0), (0, 1, -1.0)];

/// `B̄₁Ā₁ + B̄₂Ā₂ + B̄₂Ā₁ − B̄₁Ā₂` on the full ancilla ⊗ register space.
pub fn chsh_operator(settings: &ChshSettings, eff: &EffectiveQubit) -> Result<Matrix> {
    let alice = [
        alice_observable(settings, AliceQuestion::A1, eff)?,
        alice_observable(settings, AliceQuestion::A2, eff)?,
    ];
    let bob = bob_observables(eff.delta);
    let d = 2 * eff.bar0.dim();
    let mut m = Matrix::zeros(d, d);
    for (y, x, sign) in CHSH_TERMS {
        m += bob[y].tensor(&alice[x]).matrix() * C64::new(sign, 0.0);
    }
    Ok(m)
}

/// Closed-form CHSH value on the three-term circuit state.
pub fn analytic_chsh(a: f64, theta: f64, phi: f64) -> f64 {
    let r = a.sqrt();
    let s = (1.0 - a).sqrt();
    (1.0 + r - a) * theta.sin() + s * (1.0 - r) * theta.cos() - (1.0 - r - a) * phi.cos()
        + s * (1.0 + r) * phi.sin()
}

/// `θ = π/2`, `φ = ω + π/2` with `√(2−a)·(sin ω, cos ω) = (1−√a−a, √(1−a)(1+√a))`.
///
/// The sine leg carries the `cos φ` coefficient, `1 − √a − a`; only then is
/// the pair a unit vector and the φ term equal to `√(2−a)·sin(φ − ω)`.
pub fn optimal_angles(a: f64) -> Result<ChshSettings> {
    if !(0.0..1.0).contains(&a) {
        return Err(BellError::OverlapOutOfRange(a));
    }
    let r = a.sqrt();
    let omega = (1.0 - r - a).atan2((1.0 - a).sqrt() * (1.0 + r));
    Ok(ChshSettings {
        theta: std::f64::consts::FRAC_PI_2,
        phi: omega + std::f64::consts::FRAC_PI_2,
        omega,
    })
}

/// `1 + √a − a + √(2 − a)`.
pub fn chsh_lower_bound(a: f64) -> f64 {
    1.0 + a.sqrt() - a + (2.0 - a).sqrt()
}

/// One CHSH round.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChshRecord {
    pub n: usize,
    pub j: usize,
    /// First register outcome for odd cycles, which selects `|χ⟩`.
    pub branch: Option<Outcome>,
    /// Alice's question, 0 for `Ā₁`.
    pub x: u8,
    /// Bob's question, 0 for `B̄₁`.
    pub y: u8,
    pub alice: Outcome,
    pub bob: Outcome,
    pub box_kind: BoxKind,
    pub rng_stream_id: u64,
    pub run_index: u64,
}

/// The state and questions for one certification branch.
#[derive(Debug, Clone)]
pub struct BranchPlan {
    pub branch: Option<Outcome>,
    pub probability: f64,
    pub eff: EffectiveQubit,
    pub settings: ChshSettings,
    pub circuit: StateVector,
    alice: [DichotomicObservable; 2],
    bob: [DichotomicObservable; 2],
}

impl BranchPlan {
    pub fn new(
        branch: Option<Outcome>,
        probability: f64,
        chi: &StateVector,
        u: &UnitaryOperator,
    ) -> Result<Self> {
        let eff = effective_basis(chi, u)?;
        let settings = optimal_angles(eff.a)?;
        Self::with_settings(branch, probability, chi, u, eff, settings)
    }

    pub fn with_settings(
        branch: Option<Outcome>,
        probability: f64,
        chi: &StateVector,
        u: &UnitaryOperator,
        eff: EffectiveQubit,
        settings: ChshSettings,
    ) -> Result<Self> {
        let id2 = DichotomicObservable::identity(2);
        let alice = [
            id2.tensor(&alice_observable(&settings, AliceQuestion::A1, &eff)?),
            id2.tensor(&alice_observable(&settings, AliceQuestion::A2, &eff)?),
        ];
        let reg = DichotomicObservable::identity(chi.dim());
        let bob = bob_observables(eff.delta).map(|b| b.tensor(&reg));
        Ok(BranchPlan {
            branch,
            probability,
            circuit: circuit_state(chi, u)?,
            eff,
            settings,
            alice,
            bob,
        })
    }

    pub fn analytic(&self) -> f64 {
        analytic_chsh(self.eff.a, self.settings.theta, self.settings.phi)
    }

    /// Alice measures first, then Bob; both Lüders.
    fn sample(&self, x: u8, y: u8, ua: f64, ub: f64) -> Result<(Outcome, Outcome)> {
        let ma = measure(&self.alice[usize::from(x)], &self.circuit, ua)?;
        let mb = measure(&self.bob[usize::from(y)], &ma.collapsed, ub)?;
        Ok((ma.outcome, mb.outcome))
    }
}

/// Certification branches for setting `j`.
///
/// Even cycles use the test state as `|χ⟩` with `U = W_j`. Odd cycles first
/// measure `A_j`; each outcome leaves its own `|χ⟩` before `U_{j,j+1}`.
pub fn certification_plan(family: &ObservableFamily, j: usize) -> Result<Vec<BranchPlan>> {
    let setting = setting_unitary(family, j)?;
    let psi = family.test_state();
    match family.spec().parity() {
        Parity::Even => Ok(vec![BranchPlan::new(None, 1.0, psi, &setting.unitary)?]),
        Parity::Odd => {
            let a = family.observable(j);
            let mut plans = Vec::new();
            for q0 in [Outcome::Plus, Outcome::Minus] {
                let branch = a.projector(q0) * psi.amplitudes();
                let p = branch.norm_squared();
                if p < 1e-12 {
                    continue;
                }
                let chi = StateVector::normalized(branch.iter().copied().collect())?;
                plans.push(BranchPlan::new(Some(q0), p, &chi, &setting.unitary)?);
            }
            Ok(plans)
        }
    }
}

/// CHSH statistics for one branch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchChsh {
    pub branch: Option<Outcome>,
    pub a: Option<f64>,
    pub analytic: Option<f64>,
    pub lower_bound: Option<f64>,
    /// `⟨B̄_yĀ_x⟩` in [`CHSH_TERMS`] order.
    pub correlators: Vec<Option<Estimate>>,
    pub value: Option<Estimate>,
    pub rounds: u64,
    pub sufficient: bool,
}

impl BranchChsh {
    /// CHSH value above 2 by at least `sigma` standard errors.
    pub fn violates(&self, sigma: f64) -> bool {
        self.sufficient
            && self
                .value
                .is_some_and(|v| v.se > 0.0 && v.value - 2.0 >= sigma * v.se)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChshRun {
    pub j: usize,
    pub box_kind: BoxKind,
    pub branches: Vec<BranchChsh>,
}

impl ChshRun {
    /// Every branch violates at `sigma`.
    pub fn certified(&self, sigma: f64) -> bool {
        !self.branches.is_empty() && self.branches.iter().all(|b| b.violates(sigma))
    }

    pub fn certified_3sigma(&self) -> bool {
        self.certified(SIGMA)
    }
}

/// Tallies CHSH records, one branch per distinct first outcome.
pub fn summarize_chsh(
    records: &[ChshRecord],
    plans: Option<&[BranchPlan]>,
    j: usize,
    box_kind: BoxKind,
) -> ChshRun {
    let mut labels: Vec<Option<Outcome>> = Vec::new();
    for r in records {
        if !labels.contains(&r.branch) {
            labels.push(r.branch);
        }
    }
    labels.sort_by_key(|b| b.map(|o| o.index()));
    let branches = labels
        .into_iter()
        .map(|label| {
            let mut sums = [[0i64; 2]; 2];
            let mut counts = [[0u64; 2]; 2];
            let mut rounds = 0;
            for r in records.iter().filter(|r| r.branch == label) {
                sums[usize::from(r.y)][usize::from(r.x)] += i64::from(r.alice.times(r.bob).value());
                counts[usize::from(r.y)][usize::from(r.x)] += 1;
                rounds += 1;
            }
            let correlators: Vec<Option<Estimate>> = CHSH_TERMS
                .iter()
                .map(|&(y, x, _)| {
                    (counts[y][x] > 0).then(|| Estimate::from_product_sum(sums[y][x], counts[y][x]))
                })
                .collect();
            let sufficient = CHSH_TERMS
                .iter()
                .all(|&(y, x, _)| counts[y][x] >= MIN_CELL_COUNT);
            let value = correlators.iter().all(Option::is_some).then(|| {
                let c: Vec<Estimate> = correlators.iter().flatten().copied().collect();
                Estimate {
                    value: c
                        .iter()
                        .zip(CHSH_TERMS)
                        .map(|(e, (_, _, s))| s * e.value)
                        .sum(),
                    se: c.iter().map(|e| e.se * e.se).sum::<f64>().sqrt(),
                    count: rounds,
                }
            });
            let plan = plans.and_then(|p| p.iter().find(|p| p.branch == label));
            BranchChsh {
                branch: label,
                a: plan.map(|p| p.eff.a),
                analytic: plan.map(BranchPlan::analytic),
                lower_bound: plan.map(|p| chsh_lower_bound(p.eff.a)),
                correlators,
                value,
                rounds,
                sufficient,
            }
        })
        .collect();
    ChshRun {
        j,
        box_kind,
        branches,
    }
}

/// Plays one CHSH round of `model` at setting `j`.
///
/// Classical and cheating boxes hold a predetermined `b` and answer with the
/// local strategy of [`classical_chsh_answers`].
pub fn chsh_round(
    plans: &[BranchPlan],
    model: &BoxModel,
    family: &ObservableFamily,
    j: usize,
    stream: &RunStream,
    run_index: u64,
) -> Result<ChshRecord> {
    let mut d = stream.run(run_index);
    let x = d.fair_bit();
    let y = d.fair_bit();
    let (branch, alice, bob) = match model {
        BoxModel::Honest => {
            let u = d.uniform();
            let mut acc = 0.0;
            let plan = plans
                .iter()
                .find(|p| {
                    acc += p.probability;
                    u < acc
                })
                .unwrap_or_else(|| plans.last().expect("at least one branch"));
            let (a, b) = plan.sample(x, y, d.uniform(), d.uniform())?;
            (plan.branch, a, b)
        }
        _ => {
            let branch = match family.spec().parity() {
                Parity::Even => None,
                Parity::Odd => Some(Outcome::from_sign(d.fair_bit() == 0)),
            };
            let (a, b) = classical_chsh_answers(d.fair_bit());
            (branch, a, b)
        }
    };
    Ok(ChshRecord {
        n: family.n(),
        j,
        branch,
        x,
        y,
        alice,
        bob,
        box_kind: model.kind(),
        rng_stream_id: stream.id(),
        run_index,
    })
}

pub fn chsh_stream(seed: u64, n: usize, j: usize) -> RunStream {
    RunStream::derive(seed, n, j, "chsh")
}

/// `rounds` CHSH rounds at setting `j` with uniformly random question pairs.
pub fn run_chsh(
    family: &ObservableFamily,
    j: usize,
    model: &BoxModel,
    rounds: u64,
    seed: u64,
) -> Result<(Vec<ChshRecord>, ChshRun)> {
    let plans = certification_plan(family, j)?;
    let stream = chsh_stream(seed, family.n(), j);
    let records: Vec<ChshRecord> = (0..rounds)
        .into_par_iter()
        .map(|k| chsh_round(&plans, model, family, j, &stream, k))
        .collect::<Result<_>>()?;
    let summary = summarize_chsh(&records, Some(&plans), j, model.kind());
    Ok((records, summary))
}

/// CHSH estimate on an arbitrary `(χ, U)` at fixed angles, honest sampling only.
pub fn simulate_chsh(
    chi: &StateVector,
    u: &UnitaryOperator,
    theta: f64,
    phi: f64,
    rounds: u64,
    seed: u64,
) -> Result<BranchChsh> {
    let eff = effective_basis(chi, u)?;
    let omega = optimal_angles(eff.a)?.omega;
    let plan =
        BranchPlan::with_settings(None, 1.0, chi, u, eff, ChshSettings { theta, phi, omega })?;
    let stream = RunStream::derive(seed, chi.dim(), 0, "chsh-grid");
    let records: Vec<ChshRecord> = (0..rounds)
        .into_par_iter()
        .map(|k| {
            let mut d = stream.run(k);
            let (x, y) = (d.fair_bit(), d.fair_bit());
            let (alice, bob) = plan.sample(x, y, d.uniform(), d.uniform())?;
            Ok(ChshRecord {
                n: 0,
                j: 0,
                branch: None,
                x,
                y,
                alice,
                bob,
                box_kind: BoxKind::Honest,
                rng_stream_id: stream.id(),
                run_index: k,
            })
        })
        .collect::<Result<_>>()?;
    let mut run = summarize_chsh(&records, None, 0, BoxKind::Honest);
    let mut branch = run.branches.remove(0);
    branch.a = Some(plan.eff.a);
    branch.analytic = Some(analytic_chsh(plan.eff.a, theta, phi));
    branch.lower_bound = Some(chsh_lower_bound(plan.eff.a));
    Ok(branch)
}

/// A real qubit pair `(|0⟩, R_y(t))` whose overlap gives `a = cos²(t/2)`.
pub fn qubit_witness(a: f64) -> (StateVector, UnitaryOperator) {
    let t = 2.0 * a.sqrt().clamp(0.0, 1.0).acos();
    (StateVector::basis(2, 0), pauli::y_rotation(t))
}

/// Rounds of local zooming applied after the coarse grid.
pub const GRID_REFINEMENTS: usize = 60;

fn refine_max(f: &dyn Fn(f64) -> f64, steps: usize) -> f64 {
    let mut h = std::f64::consts::TAU / steps as f64;
    let (mut x, mut y) = (0..steps).map(|k| (k as f64 * h, f(k as f64 * h))).fold(
        (0.0, f64::NEG_INFINITY),
        |b, c| if c.1 > b.1 { c } else { b },
    );
    for _ in 0..GRID_REFINEMENTS {
        for t in [x - h / 2.0, x + h / 2.0] {
            let v = f(t);
            if v > y {
                (x, y) = (t, v);
            }
        }
        h /= 2.0;
    }
    y
}

/// Maximum of [`analytic_chsh`] from a `steps`-point angle grid per leg, zoomed locally.
///
/// The closed form is a θ term plus a φ term, so each is maximized separately.
pub fn grid_maximum(a: f64, steps: usize) -> f64 {
    let best = |f: &dyn Fn(f64) -> f64| refine_max(f, steps);
    let theta_part = best(&|t| analytic_chsh(a, t, 0.0) - analytic_chsh(a, 0.0, 0.0));
    let phi_part = best(&|p| analytic_chsh(a, 0.0, p));
    theta_part + phi_part
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qcore::operator_expectation;
    use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI, SQRT_2};

    fn exact_chsh(chi: &StateVector, u: &UnitaryOperator, s: &ChshSettings) -> f64 {
        let eff = effective_basis(chi, u).unwrap();
        let op = chsh_operator(s, &eff).unwrap();
        operator_expectation(&op, &circuit_state(chi, u).unwrap()).unwrap()
    }

    #[test]
    fn zero_overlap_basis() {
        let chi = StateVector::basis(3, 0);
        let u = UnitaryOperator::new(crate::qcore::real_matrix(
            3,
            &[0., 0., 1., 1., 0., 0., 0., 1., 0.],
        ))
        .unwrap();
        let eff = effective_basis(&chi, &u).unwrap();
        assert_eq!(eff.a, 0.0);
        assert!(eff.bar1.distance(&apply(&u, &chi).unwrap()) < 1e-15);
    }

    #[test]
    fn identity_is_degenerate() {
        let chi = StateVector::basis(2, 1);
        assert!(matches!(
            effective_basis(&chi, &UnitaryOperator::identity(2)),
            Err(BellError::Degenerate(_))
        ));
        let c = circuit_state(&chi, &UnitaryOperator::identity(2)).unwrap();
        assert!(c.distance(&StateVector::plus().tensor(&chi)) < 1e-12);
    }

    #[test]
    fn odd_protocol_basis() {
        let f = ObservableFamily::for_n(5).unwrap();
        for plan in certification_plan(&f, 0).unwrap() {
            let e = &plan.eff;
            assert!(e.bar0.inner(&e.bar1).unwrap().norm() < 1e-10);
            assert!((e.bar1.norm_squared() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn decomposition_with_complex_phase() {
        let chi = StateVector::from_real(&[0.6, 0.8, 0.0]).unwrap();
        let m = crate::qcore::real_matrix(3, &[0., 1., 0., 1., 0., 0., 0., 0., 1.]);
        let phase = Matrix::from_diagonal(&nalgebra::DVector::from_vec(vec![
            C64::from_polar(1.0, 0.4),
            C64::from_polar(1.0, -1.1),
            C64::new(1.0, 0.0),
        ]));
        let u = UnitaryOperator::new(
            phase
                * m
                * crate::qcore::real_matrix(3, &[0.96, -0.28, 0., 0.28, 0.96, 0., 0., 0., 1.]),
        )
        .unwrap();
        let eff = effective_basis(&chi, &u).unwrap();
        assert!(eff.delta.abs() > 1e-3);
        let rebuilt = (eff.bar0.amplitudes() * C64::new(eff.a.sqrt(), 0.0)
            + eff.bar1.amplitudes() * C64::new((1.0 - eff.a).sqrt(), 0.0))
            * C64::from_polar(1.0, eff.delta);
        assert!((rebuilt - apply(&u, &chi).unwrap().amplitudes()).norm() < 1e-10);
        for (t, p) in [(0.3, 1.2), (FRAC_PI_2, 2.0), (-1.0, 4.0)] {
            let s = ChshSettings {
                theta: t,
                phi: p,
                omega: 0.0,
            };
            assert!((exact_chsh(&chi, &u, &s) - analytic_chsh(eff.a, t, p)).abs() < 1e-10);
        }
    }

    #[test]
    fn a_zero_is_maximally_entangled() {
        let (chi, u) = qubit_witness(0.0);
        let c = circuit_state(&chi, &u).unwrap();
        // Reshape to a 2×2 coefficient matrix; both singular values 1/√2.
        let m = Matrix::from_row_slice(2, 2, c.amplitudes().as_slice());
        let sv = m.svd(false, false).singular_values;
        for s in sv.iter() {
            assert!((s - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        }
    }

    #[test]
    fn alice_observables() {
        let (chi, u) = qubit_witness(0.3);
        let eff = effective_basis(&chi, &u).unwrap();
        let s = ChshSettings {
            theta: FRAC_PI_2,
            phi: 0.0,
            omega: 0.0,
        };
        let a1 = alice_observable(&s, AliceQuestion::A1, &eff).unwrap();
        let sz = outer(&eff.bar0, &eff.bar0) - outer(&eff.bar1, &eff.bar1);
        assert!(crate::qcore::max_abs(&(a1.matrix() - sz)) < 1e-12);
        let s0 = ChshSettings {
            theta: 0.0,
            phi: 0.0,
            omega: 0.0,
        };
        let sx = alice_observable(&s0, AliceQuestion::A1, &eff).unwrap();
        let plus = StateVector::normalized(
            (eff.bar0.amplitudes() + eff.bar1.amplitudes())
                .iter()
                .copied()
                .collect(),
        )
        .unwrap();
        assert!((crate::qcore::expectation(&sx, &plus).unwrap() - 1.0).abs() < 1e-12);
        // Complement eigenvalue on a qutrit.
        let f = ObservableFamily::for_n(5).unwrap();
        let plan = &certification_plan(&f, 2).unwrap()[0];
        let a = alice_observable(&plan.settings, AliceQuestion::A2, &plan.eff).unwrap();
        let sq = a.matrix() * a.matrix();
        assert!(crate::qcore::max_abs(&(sq - Matrix::identity(3, 3))) < 1e-12);
    }

    #[test]
    fn analytic_edges() {
        for (t, p) in [(0.1, 0.2), (1.0, -2.0), (3.0, 0.5)] {
            assert!((analytic_chsh(1.0, t, p) - (t.sin() + p.cos())).abs() < 1e-15);
        }
        assert!((analytic_chsh(0.0, FRAC_PI_2, 3.0 * FRAC_PI_4) - (1.0 + SQRT_2)).abs() < 1e-12);
    }

    #[test]
    fn optimal_angle_identities() {
        let s = optimal_angles(0.0).unwrap();
        assert!((s.omega - FRAC_PI_4).abs() < 1e-12);
        for a in [0.0f64, 0.25, 0.5, 0.75, 0.9] {
            let r: f64 = a.sqrt();
            let lhs = (1.0 - r - a).powi(2) + (1.0 - a) * (1.0 + r).powi(2);
            assert!((lhs - (2.0 - a)).abs() < 1e-12);
            // With 1 + √a − a on the sine leg the pair is not a unit vector.
            let literal = (1.0 + r - a).powi(2) + (1.0 - a) * (1.0 + r).powi(2);
            assert!(a == 0.0 || (literal - (2.0 - a)).abs() > 0.1);
            let s = optimal_angles(a).unwrap();
            let k = (2.0 - a).sqrt();
            assert!((k * s.omega.sin() - (1.0 - r - a)).abs() < 1e-10);
            assert!((k * s.omega.cos() - (1.0 - a).sqrt() * (1.0 + r)).abs() < 1e-10);
            assert!((analytic_chsh(a, s.theta, s.phi) - chsh_lower_bound(a)).abs() < 1e-10);
        }
        assert!(optimal_angles(1.0).is_err());
        assert!((chsh_lower_bound(0.5) - 2.431_851_652_578_136_5).abs() < 1e-12);
    }

    #[test]
    fn bound_endpoints() {
        assert!((chsh_lower_bound(0.0) - (1.0 + SQRT_2)).abs() < 1e-15);
        assert_eq!(chsh_lower_bound(1.0), 2.0);
        for k in 0..100 {
            assert!(chsh_lower_bound(k as f64 / 100.0) > 2.0);
        }
    }

    #[test]
    fn analytic_matches_projector_algebra() {
        for k in 0..9 {
            let a = k as f64 / 9.0;
            let (chi, u) = qubit_witness(a);
            for t in [-2.0, 0.0, 0.7, FRAC_PI_2, PI] {
                for p in [-1.0, 0.3, 2.5] {
                    let s = ChshSettings {
                        theta: t,
                        phi: p,
                        omega: 0.0,
                    };
                    assert!(
                        (exact_chsh(&chi, &u, &s) - analytic_chsh(a, t, p)).abs() < 1e-10,
                        "a={a} t={t} p={p}"
                    );
                }
            }
        }
    }

    #[test]
    fn protocol_overlaps() {
        let f = ObservableFamily::for_n(4).unwrap();
        let a: Vec<f64> = (0..3)
            .map(|j| certification_plan(&f, j).unwrap()[0].eff.a)
            .collect();
        assert!((a[0] - 0.5).abs() < 1e-12 && a[1].abs() < 1e-12 && (a[2] - 0.5).abs() < 1e-12);
        let f = ObservableFamily::for_n(5).unwrap();
        let plans = certification_plan(&f, 0).unwrap();
        assert_eq!(plans.len(), 2);
        let minus = plans
            .iter()
            .find(|p| p.branch == Some(Outcome::Minus))
            .unwrap();
        assert!(minus.eff.a < 1e-12);
        let total: f64 = plans.iter().map(|p| p.probability).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn grid_maximum_separates() {
        let brute = |a: f64, steps: usize| {
            let h = std::f64::consts::TAU / steps as f64;
            let mut best = f64::NEG_INFINITY;
            for i in 0..steps {
                for k in 0..steps {
                    best = best.max(analytic_chsh(a, i as f64 * h, k as f64 * h));
                }
            }
            best
        };
        for a in [0.0, 0.3, 0.8, 0.99] {
            let g = grid_maximum(a, 90);
            assert!(g >= brute(a, 90) - 1e-12);
            let (r, s) = (a.sqrt(), (1.0 - a).sqrt());
            let closed = (1.0 + r - a).hypot(s * (1.0 - r)) + (2.0 - a).sqrt();
            assert!((g - closed).abs() < 1e-10, "a = {a}: {g} vs {closed}");
        }
    }

    #[test]
    fn honest_violates_classical_does_not() {
        let f = ObservableFamily::for_n(4).unwrap();
        let (_, honest) = run_chsh(&f, 1, &BoxModel::Honest, 20_000, 3).unwrap();
        assert!(honest.certified_3sigma(), "{honest:?}");
        for kind in [
            BoxKind::Noncontextual,
            BoxKind::Automaton,
            BoxKind::Cheating,
        ] {
            let (_, run) = run_chsh(&f, 1, &BoxModel::from_kind(kind), 2_000, 3).unwrap();
            assert!(!run.certified_3sigma());
            let v = run.branches[0].value.unwrap();
            assert!(v.value <= 2.0 + SIGMA * v.se);
        }
    }

    #[test]
    fn odd_branches_reported_separately() {
        let f = ObservableFamily::for_n(5).unwrap();
        let (recs, run) = run_chsh(&f, 3, &BoxModel::Honest, 20_000, 8).unwrap();
        assert_eq!(run.branches.len(), 2);
        assert_eq!(
            run.branches.iter().map(|b| b.rounds).sum::<u64>(),
            recs.len() as u64
        );
        assert!(run.certified_3sigma(), "{run:?}");
    }
}
