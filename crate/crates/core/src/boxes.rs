//! Box models answering the two register questions of a run.
//!
//! Classical responders never see the ancilla bit `b`: their signatures do not
//! carry it. Only [`CheatingBox`] is handed `b`, and it is there to be caught.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ncycle::{closing_sign, CycleSpec, ObservableFamily, Parity};
use crate::qcore::{controlled, Matrix, Outcome, QcoreError, StateVector, Tensor, C64};
use crate::synth::{setting_unitary, SettingUnitary, SynthError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BoxError {
    #[error("setting {j} out of range for n = {n} ({count} settings)")]
    SettingOutOfRange { n: usize, j: usize, count: usize },
    #[error("lambda table has {got} entries, expected {expected}")]
    LambdaLength { got: usize, expected: usize },
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Qcore(#[from] QcoreError),
}

pub type Result<T> = std::result::Result<T, BoxError>;

/// What Alice has set up for setting `j`: the physically asked pair and the primed pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SettingContext {
    pub spec: CycleSpec,
    pub j: usize,
    pub declared_s: Vec<usize>,
    pub declared_sprime: Vec<usize>,
}

impl SettingContext {
    pub const QUESTION_COUNT: usize = 2;

    pub fn new(spec: CycleSpec, j: usize) -> Result<Self> {
        let n = spec.n();
        let count = spec.setting_count();
        if j >= count {
            return Err(BoxError::SettingOutOfRange { n, j, count });
        }
        let (declared_s, declared_sprime) = match spec.parity() {
            Parity::Even => (vec![0, n - 1], vec![j, j + 1]),
            Parity::Odd => (vec![j], vec![(j + 1) % n]),
        };
        Ok(SettingContext {
            spec,
            j,
            declared_s,
            declared_sprime,
        })
    }

    pub fn n(&self) -> usize {
        self.spec.n()
    }

    /// Observable indices behind the two physical questions `(Q₀, Q₁)`.
    ///
    /// Even settings ask `A_0` then `A_{n−1}`; odd settings ask `A_j` twice.
    pub fn asked(&self) -> (usize, usize) {
        let first = self.declared_s[0];
        let second = *self.declared_s.last().expect("declared set is never empty");
        (first, second)
    }

    /// The pair the primed context would pair the answers with.
    pub fn primed_pair(&self) -> (usize, usize) {
        match self.spec.parity() {
            Parity::Even => (self.declared_sprime[0], self.declared_sprime[1]),
            Parity::Odd => (self.j, self.declared_sprime[0]),
        }
    }
}

/// Box kinds as they appear in run records.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoxKind {
    #[serde(alias = "honest_quantum")]
    Honest,
    #[serde(alias = "noncontextual_hv")]
    Noncontextual,
    #[serde(alias = "contextual_automaton")]
    Automaton,
    #[serde(alias = "cheating_hv")]
    Cheating,
}

impl BoxKind {
    pub fn name(self) -> &'static str {
        match self {
            BoxKind::Honest => "honest",
            BoxKind::Noncontextual => "noncontextual",
            BoxKind::Automaton => "automaton",
            BoxKind::Cheating => "cheating",
        }
    }
}

impl std::fmt::Display for BoxKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for BoxKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "honest" | "honest_quantum" => Ok(BoxKind::Honest),
            "noncontextual" | "noncontextual_hv" => Ok(BoxKind::Noncontextual),
            "automaton" | "contextual_automaton" => Ok(BoxKind::Automaton),
            "cheating" | "cheating_hv" => Ok(BoxKind::Cheating),
            other => Err(format!("unknown box kind `{other}`")),
        }
    }
}

/// How a noncontextual box chooses its value table λ.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaStrategy {
    /// λ_i = (−1)^i, which attains the noncontextual bound.
    #[default]
    Alternating,
    /// A fresh uniform table every run.
    Random,
    Table(Vec<Outcome>),
}

impl LambdaStrategy {
    pub fn table(&self, n: usize, bits: u64) -> Vec<Outcome> {
        match self {
            LambdaStrategy::Alternating => (0..n).map(|i| Outcome::from_sign(i % 2 == 0)).collect(),
            LambdaStrategy::Random => (0..n)
                .map(|i| Outcome::from_sign(bits >> i & 1 == 0))
                .collect(),
            LambdaStrategy::Table(t) => t.clone(),
        }
    }
}

/// Answer given on the closing pair `(A_{n−1}, A_0)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClosingRule {
    /// Signed closing term equals −1, so every term of the cycle sum does.
    #[default]
    ParityCorrected,
    /// `a_0 = −a_{n−1} + 2a_{n−1}(n mod 2)` read literally; only reaches `2 − n`.
    Literal,
}

/// Which pair an automaton answers for in a delayed-choice run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AutomatonTarget {
    /// The physically asked pair.
    #[default]
    Declared,
    /// The primed pair, as if the register had already been rotated.
    Primed,
}

/// A box model with its parameters, as named in manifests.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BoxModel {
    #[serde(alias = "honest_quantum")]
    Honest,
    #[serde(alias = "noncontextual_hv")]
    Noncontextual {
        #[serde(default)]
        lambda: LambdaStrategy,
    },
    #[serde(alias = "contextual_automaton")]
    Automaton {
        #[serde(default)]
        closing: ClosingRule,
        #[serde(default)]
        target: AutomatonTarget,
    },
    #[serde(alias = "cheating_hv")]
    Cheating,
}

impl BoxModel {
    pub fn from_kind(kind: BoxKind) -> Self {
        match kind {
            BoxKind::Honest => BoxModel::Honest,
            BoxKind::Noncontextual => BoxModel::Noncontextual {
                lambda: LambdaStrategy::default(),
            },
            BoxKind::Automaton => BoxModel::Automaton {
                closing: ClosingRule::default(),
                target: AutomatonTarget::default(),
            },
            BoxKind::Cheating => BoxModel::Cheating,
        }
    }

    pub fn kind(&self) -> BoxKind {
        match self {
            BoxModel::Honest => BoxKind::Honest,
            BoxModel::Noncontextual { .. } => BoxKind::Noncontextual,
            BoxModel::Automaton { .. } => BoxKind::Automaton,
            BoxModel::Cheating => BoxKind::Cheating,
        }
    }

    /// Only the cheating box may look at `b` before answering.
    pub fn reads_b(&self) -> bool {
        matches!(self, BoxModel::Cheating)
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        if let BoxModel::Noncontextual {
            lambda: LambdaStrategy::Table(t),
        } = self
        {
            if t.len() != n {
                return Err(BoxError::LambdaLength {
                    got: t.len(),
                    expected: n,
                });
            }
        }
        Ok(())
    }

    /// The b-blind responder, if this is a classical blind model.
    pub fn blind(&self) -> Option<BlindBox> {
        match self {
            BoxModel::Noncontextual { lambda } => Some(BlindBox::Noncontextual(lambda.clone())),
            BoxModel::Automaton { closing, target } => Some(BlindBox::Automaton {
                closing: *closing,
                target: *target,
            }),
            _ => None,
        }
    }
}

/// Randomness handed to a classical box for one run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxDraw {
    /// Uniform in `[0, 1)`.
    pub coin: f64,
    /// Uniform bits, one per observable.
    pub bits: u64,
}

/// `q0 = λ[first asked]`, `q1 = λ[second asked]`.
pub fn respond_noncontextual(lambda: &[Outcome], ctx: &SettingContext) -> (Outcome, Outcome) {
    let (first, second) = ctx.asked();
    (lambda[first], lambda[second])
}

/// Automaton answer to the pair `(first, second)` given its own first answer.
pub fn automaton_pair(
    n: usize,
    first: usize,
    second: usize,
    q0: Outcome,
    closing: ClosingRule,
) -> (Outcome, Outcome) {
    let closing_pair = (first == n - 1 && second == 0) || (first == 0 && second == n - 1);
    let q1 = if first == second {
        q0
    } else if closing_pair {
        let keep = match closing {
            ClosingRule::ParityCorrected => closing_sign(n) < 0.0,
            ClosingRule::Literal => n % 2 == 1,
        };
        if keep {
            q0
        } else {
            q0.flipped()
        }
    } else {
        q0.flipped()
    };
    (q0, q1)
}

/// Contextual automaton in a delayed-choice run: a fair coin for `q0`, the pair rule for `q1`.
pub fn respond_contextual_automaton(
    ctx: &SettingContext,
    coin: f64,
    closing: ClosingRule,
    target: AutomatonTarget,
) -> (Outcome, Outcome) {
    let (first, second) = match target {
        AutomatonTarget::Declared => ctx.asked(),
        AutomatonTarget::Primed => ctx.primed_pair(),
    };
    automaton_pair(
        ctx.n(),
        first,
        second,
        Outcome::from_sign(coin < 0.5),
        closing,
    )
}

/// A classical box that must answer without `b`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BlindBox {
    Noncontextual(LambdaStrategy),
    Automaton {
        closing: ClosingRule,
        target: AutomatonTarget,
    },
}

impl BlindBox {
    pub fn respond(&self, ctx: &SettingContext, draw: BoxDraw) -> (Outcome, Outcome) {
        match self {
            BlindBox::Noncontextual(strategy) => {
                respond_noncontextual(&strategy.table(ctx.n(), draw.bits), ctx)
            }
            BlindBox::Automaton { closing, target } => {
                respond_contextual_automaton(ctx, draw.coin, *closing, *target)
            }
        }
    }

    /// Answers to an explicitly asked pair, for the non-delayed harness.
    pub fn respond_pair(
        &self,
        n: usize,
        first: usize,
        second: usize,
        draw: BoxDraw,
    ) -> (Outcome, Outcome) {
        match self {
            BlindBox::Noncontextual(strategy) => {
                let lambda = strategy.table(n, draw.bits);
                (lambda[first], lambda[second])
            }
            BlindBox::Automaton { closing, .. } => automaton_pair(
                n,
                first,
                second,
                Outcome::from_sign(draw.coin < 0.5),
                *closing,
            ),
        }
    }
}

/// Joint distribution of `(q0, q1)`, indexed by [`Outcome::index`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JointDistribution {
    pub p: [[f64; 2]; 2],
}

impl JointDistribution {
    pub fn prob(&self, q0: Outcome, q1: Outcome) -> f64 {
        self.p[q0.index()][q1.index()]
    }

    pub fn total(&self) -> f64 {
        self.p.iter().flatten().sum()
    }

    /// `Σ q0·q1·p(q0, q1)`.
    pub fn correlator(&self) -> f64 {
        self.p[0][0] + self.p[1][1] - self.p[0][1] - self.p[1][0]
    }

    /// Marginal `p(q0 = +1)` or `p(q1 = +1)`.
    pub fn marginal_plus(&self, slot: usize) -> f64 {
        if slot == 0 {
            self.p[0][0] + self.p[0][1]
        } else {
            self.p[0][0] + self.p[1][0]
        }
    }

    /// Inverse-CDF sample in the order (+,+), (+,−), (−,+), (−,−).
    pub fn sample(&self, u: f64) -> (Outcome, Outcome) {
        let mut acc = 0.0;
        let mut last = (Outcome::Plus, Outcome::Plus);
        for a in 0..2 {
            for b in 0..2 {
                if self.p[a][b] <= 0.0 {
                    continue;
                }
                last = (Outcome::from_index(a), Outcome::from_index(b));
                acc += self.p[a][b];
                if u < acc {
                    return last;
                }
            }
        }
        last
    }
}

fn lift_register(m: &Matrix) -> Matrix {
    Matrix::identity(2, 2).kronecker(m)
}

fn ancilla_projector(b: u8, d: usize) -> Matrix {
    let mut m = Matrix::zeros(2 * d, 2 * d);
    let off = if b == 0 { 0 } else { d };
    for i in 0..d {
        m[(off + i, off + i)] = C64::new(1.0, 0.0);
    }
    m
}

fn ancilla_plus(register: &StateVector) -> StateVector {
    StateVector::plus().tensor(register)
}

/// Exact `p(q0, q1 | b)` for a verified setting, by projector algebra on the full circuit.
pub fn joint_from_setting(
    family: &ObservableFamily,
    setting: &SettingUnitary,
    b: u8,
) -> Result<JointDistribution> {
    let n = family.n();
    let d = family.spec().register_dim();
    let cu = controlled(&setting.unitary);
    let pb = ancilla_projector(b, d);
    let mut p = [[0.0; 2]; 2];
    match family.spec().parity() {
        Parity::Even => {
            let first = family.observable(0);
            let second = family.observable(n - 1);
            let out = cu.matrix() * ancilla_plus(family.test_state()).amplitudes();
            for q0 in [Outcome::Plus, Outcome::Minus] {
                for q1 in [Outcome::Plus, Outcome::Minus] {
                    let proj = &pb
                        * lift_register(second.projector(q1))
                        * lift_register(first.projector(q0));
                    p[q0.index()][q1.index()] = (proj * &out).norm_squared();
                }
            }
        }
        Parity::Odd => {
            let a = family.observable(setting.j);
            let psi = family.test_state().amplitudes();
            for q0 in [Outcome::Plus, Outcome::Minus] {
                let branch = a.projector(q0) * psi;
                let weight = branch.norm_squared();
                if weight < 1e-300 {
                    continue;
                }
                let chi =
                    StateVector::new(branch.unscale(weight.sqrt()).iter().copied().collect())?;
                let out = cu.matrix() * ancilla_plus(&chi).amplitudes();
                for q1 in [Outcome::Plus, Outcome::Minus] {
                    let proj = &pb * lift_register(a.projector(q1));
                    p[q0.index()][q1.index()] = weight * (proj * &out).norm_squared();
                }
            }
        }
    }
    let total: f64 = p.iter().flatten().sum();
    for row in p.iter_mut() {
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    Ok(JointDistribution { p })
}

/// Exact `p(q0, q1 | b)` for setting `ctx.j`.
pub fn quantum_joint_distribution(
    family: &ObservableFamily,
    ctx: &SettingContext,
    b: u8,
) -> Result<JointDistribution> {
    let setting = setting_unitary(family, ctx.j)?;
    joint_from_setting(family, &setting, b)
}

/// A box that learns `b` before answering and replays the quantum statistics.
#[derive(Debug, Clone)]
pub struct CheatingBox {
    tables: Vec<[JointDistribution; 2]>,
}

impl CheatingBox {
    pub fn new(family: &ObservableFamily) -> Result<Self> {
        let tables = (0..family.spec().setting_count())
            .map(|j| {
                let s = setting_unitary(family, j)?;
                Ok([
                    joint_from_setting(family, &s, 0)?,
                    joint_from_setting(family, &s, 1)?,
                ])
            })
            .collect::<Result<_>>()?;
        Ok(CheatingBox { tables })
    }

    pub fn table(&self, j: usize, b: u8) -> &JointDistribution {
        &self.tables[j][usize::from(b != 0)]
    }

    pub fn respond(&self, ctx: &SettingContext, b: u8, draw: f64) -> (Outcome, Outcome) {
        self.table(ctx.j, b).sample(draw)
    }
}

/// Local deterministic CHSH answers of a hidden-variable pair with a preassigned `b`.
///
/// Every question is answered with `s = (−1)^b`, which scores exactly 2.
pub fn classical_chsh_answers(b: u8) -> (Outcome, Outcome) {
    let s = Outcome::from_sign(b == 0);
    (s, s)
}
