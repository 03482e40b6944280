//! Delayed-choice runs, record estimation and the statistical screens.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::boxes::{BlindBox, BoxDraw, BoxError, BoxKind, BoxModel, CheatingBox, SettingContext};
use crate::ncycle::{cycle_sum, tsirelson_bound, CycleSpec, NcycleError, ObservableFamily, Parity};
use crate::qcore::{
    apply, controlled, measure, pauli, DichotomicObservable, Outcome, QcoreError, StateVector,
    Tensor, UnitaryOperator,
};
use crate::synth::{all_settings, SettingUnitary, SlotMap, SynthError};

/// Cells with fewer records than this are reported as insufficient.
pub const MIN_CELL_COUNT: u64 = 30;

/// Default significance threshold in standard errors.
pub const SIGMA: f64 = 3.0;

/// ChaCha20 words reserved per run (sixteen 64-bit draws).
pub const WORDS_PER_RUN: u128 = 32;

/// Domain tag mixed into every stream key. Bump it if the draw layout changes.
pub const RNG_DOMAIN: &str = "dcc/chacha20/v1";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EngineError {
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("epsilon {epsilon} outside the admissible range (0, {max})")]
    EpsilonOutOfRange { epsilon: f64, max: f64 },
    #[error("record set mixes cycle lengths {0} and {1}")]
    MixedRecords(usize, usize),
    #[error("record for setting {j} is invalid for n = {n}")]
    BadRecord { n: usize, j: usize },
    #[error("{0} requires {1:?}-cycle records")]
    WrongParity(&'static str, Parity),
    #[error("the honest box cannot be forced onto a branch")]
    ForcedHonest,
    #[error(transparent)]
    Box(#[from] BoxError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Ncycle(#[from] NcycleError),
    #[error(transparent)]
    Qcore(#[from] QcoreError),
}

pub type Result<T> = std::result::Result<T, EngineError>;

/// A deterministic, counter-addressed random stream.
///
/// The key is `sha256(domain, seed, n, j, purpose)`; run `k` reads from word
/// `32k` onward, so any partition of runs across threads draws identical numbers.
#[derive(Debug, Clone)]
pub struct RunStream {
    key: [u8; 32],
    id: u64,
}

impl RunStream {
    pub fn derive(seed: u64, n: usize, j: usize, purpose: &str) -> Self {
        let mut h = Sha256::new();
        h.update(RNG_DOMAIN.as_bytes());
        h.update(seed.to_le_bytes());
        h.update((n as u64).to_le_bytes());
        h.update((j as u64).to_le_bytes());
        h.update(purpose.as_bytes());
        let key: [u8; 32] = h.finalize().into();
        let id = u64::from_le_bytes(key[..8].try_into().expect("eight bytes"));
        RunStream { key, id }
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn run(&self, run_index: u64) -> RunDraws {
        let mut rng = ChaCha20Rng::from_seed(self.key);
        rng.set_word_pos(u128::from(run_index) * WORDS_PER_RUN);
        RunDraws { rng, used: 0 }
    }
}

/// The draws available to a single run.
pub struct RunDraws {
    rng: ChaCha20Rng,
    used: u32,
}

impl RunDraws {
    fn tick(&mut self) {
        self.used += 1;
        assert!(
            u128::from(self.used) * 2 <= WORDS_PER_RUN,
            "run exceeded its draw budget"
        );
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.tick();
        self.rng.random::<f64>()
    }

    pub fn bits(&mut self) -> u64 {
        self.tick();
        self.rng.random::<u64>()
    }

    pub fn fair_bit(&mut self) -> u8 {
        u8::from(self.uniform() >= 0.5)
    }

    pub fn box_draw(&mut self) -> BoxDraw {
        BoxDraw {
            coin: self.uniform(),
            bits: self.bits(),
        }
    }
}

/// One delayed-choice run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunRecord {
    pub n: usize,
    pub parity: Parity,
    pub j: usize,
    pub q0: Outcome,
    pub q1: Outcome,
    pub b: u8,
    pub box_kind: BoxKind,
    pub rng_stream_id: u64,
    pub run_index: u64,
}

#[derive(Debug, Clone)]
struct HonestEven {
    after_control: StateVector,
}

/// Executes runs of one box model against one observable family.
#[derive(Debug, Clone)]
pub struct Engine {
    family: ObservableFamily,
    model: BoxModel,
    settings: Vec<SettingUnitary>,
    controlled_settings: Vec<UnitaryOperator>,
    honest_even: Vec<HonestEven>,
    lifted: Vec<DichotomicObservable>,
    ancilla_z: DichotomicObservable,
    blind: Option<BlindBox>,
    cheating: Option<CheatingBox>,
}

impl Engine {
    pub fn new(family: ObservableFamily, model: BoxModel) -> Result<Self> {
        model.validate(family.n())?;
        let settings = all_settings(&family)?;
        let controlled_settings: Vec<_> = settings.iter().map(|s| controlled(&s.unitary)).collect();
        let id2 = DichotomicObservable::identity(2);
        let lifted = family.observables().iter().map(|a| id2.tensor(a)).collect();
        let ancilla_z = pauli::z().tensor(&DichotomicObservable::identity(
            family.spec().register_dim(),
        ));
        let honest_even = if family.spec().parity() == Parity::Even {
            let start = StateVector::plus().tensor(family.test_state());
            controlled_settings
                .iter()
                .map(|cu| {
                    Ok(HonestEven {
                        after_control: apply(cu, &start)?,
                    })
                })
                .collect::<Result<_>>()?
        } else {
            Vec::new()
        };
        let cheating = match model {
            BoxModel::Cheating => Some(CheatingBox::new(&family)?),
            _ => None,
        };
        let blind = model.blind();
        Ok(Engine {
            family,
            model,
            settings,
            controlled_settings,
            honest_even,
            lifted,
            ancilla_z,
            blind,
            cheating,
        })
    }

    pub fn family(&self) -> &ObservableFamily {
        &self.family
    }

    pub fn model(&self) -> &BoxModel {
        &self.model
    }

    pub fn settings(&self) -> &[SettingUnitary] {
        &self.settings
    }

    fn spec(&self) -> CycleSpec {
        self.family.spec()
    }

    fn record(
        &self,
        j: usize,
        (q0, q1): (Outcome, Outcome),
        b: u8,
        stream: &RunStream,
        run_index: u64,
    ) -> RunRecord {
        RunRecord {
            n: self.family.n(),
            parity: self.spec().parity(),
            j,
            q0,
            q1,
            b,
            box_kind: self.model.kind(),
            rng_stream_id: stream.id(),
            run_index,
        }
    }

    /// Answers from a non-honest box. `forced_b` replaces the engine's coin.
    fn run_box(
        &self,
        ctx: &SettingContext,
        draws: &mut RunDraws,
        forced_b: Option<u8>,
    ) -> ((Outcome, Outcome), u8) {
        if let Some(cheat) = &self.cheating {
            // b is settled first and leaked to the box.
            let coin = draws.fair_bit();
            let b = forced_b.unwrap_or(coin);
            let answers = cheat.respond(ctx, b, draws.uniform());
            return (answers, b);
        }
        let blind = self
            .blind
            .as_ref()
            .expect("non-honest boxes are blind or cheating");
        let answers = blind.respond(ctx, draws.box_draw());
        let coin = draws.fair_bit();
        (answers, forced_b.unwrap_or(coin))
    }

    fn ancilla_bit(&self, psi: &StateVector, u: f64) -> Result<u8> {
        let m = measure(&self.ancilla_z, psi, u)?;
        Ok(u8::from(m.outcome == Outcome::Minus))
    }

    fn honest_even(&self, j: usize, draws: &mut RunDraws) -> Result<((Outcome, Outcome), u8)> {
        let n = self.family.n();
        let psi = &self.honest_even[j].after_control;
        let m0 = measure(&self.lifted[0], psi, draws.uniform())?;
        let m1 = measure(&self.lifted[n - 1], &m0.collapsed, draws.uniform())?;
        let b = self.ancilla_bit(&m1.collapsed, draws.uniform())?;
        Ok(((m0.outcome, m1.outcome), b))
    }

    fn honest_odd(&self, j: usize, draws: &mut RunDraws) -> Result<((Outcome, Outcome), u8)> {
        let first = measure(
            self.family.observable(j),
            self.family.test_state(),
            draws.uniform(),
        )?;
        let joined = StateVector::plus().tensor(&first.collapsed);
        let rotated = apply(&self.controlled_settings[j], &joined)?;
        let second = measure(&self.lifted[j], &rotated, draws.uniform())?;
        let b = self.ancilla_bit(&second.collapsed, draws.uniform())?;
        Ok(((first.outcome, second.outcome), b))
    }

    fn run_inner(
        &self,
        j: usize,
        stream: &RunStream,
        run_index: u64,
        forced_b: Option<u8>,
    ) -> Result<RunRecord> {
        let count = self.spec().setting_count();
        if j >= count {
            return Err(BoxError::SettingOutOfRange {
                n: self.family.n(),
                j,
                count,
            }
            .into());
        }
        let mut draws = stream.run(run_index);
        let (answers, b) = match (&self.model, forced_b) {
            (BoxModel::Honest, None) => match self.spec().parity() {
                Parity::Even => self.honest_even(j, &mut draws)?,
                Parity::Odd => self.honest_odd(j, &mut draws)?,
            },
            (BoxModel::Honest, Some(_)) => return Err(EngineError::ForcedHonest),
            _ => {
                let ctx = SettingContext::new(self.spec(), j)?;
                self.run_box(&ctx, &mut draws, forced_b)
            }
        };
        Ok(self.record(j, answers, b, stream, run_index))
    }

    /// Even protocol, one run of setting `j`.
    pub fn run_even(&self, j: usize, stream: &RunStream, run_index: u64) -> Result<RunRecord> {
        if self.spec().parity() != Parity::Even {
            return Err(EngineError::WrongParity("run_even", Parity::Even));
        }
        self.run_inner(j, stream, run_index, None)
    }

    /// Odd protocol, one run of setting `j`.
    pub fn run_odd(&self, j: usize, stream: &RunStream, run_index: u64) -> Result<RunRecord> {
        if self.spec().parity() != Parity::Odd {
            return Err(EngineError::WrongParity("run_odd", Parity::Odd));
        }
        self.run_inner(j, stream, run_index, None)
    }

    pub fn run(&self, j: usize, stream: &RunStream, run_index: u64) -> Result<RunRecord> {
        self.run_inner(j, stream, run_index, None)
    }

    /// A classical or cheating run with the ancilla bit pinned to `b`.
    pub fn run_forced_b(
        &self,
        j: usize,
        stream: &RunStream,
        run_index: u64,
        b: u8,
    ) -> Result<RunRecord> {
        self.run_inner(j, stream, run_index, Some(b))
    }

    pub fn setting_stream(&self, seed: u64, j: usize) -> RunStream {
        RunStream::derive(seed, self.family.n(), j, "delayed-choice")
    }

    /// `runs` runs of setting `j`, in run-index order.
    pub fn run_setting(&self, j: usize, runs: u64, seed: u64) -> Result<Vec<RunRecord>> {
        let stream = self.setting_stream(seed, j);
        (0..runs)
            .into_par_iter()
            .map(|k| self.run(j, &stream, k))
            .collect()
    }

    /// Every setting in order, `runs` runs each.
    pub fn run_all(&self, runs: u64, seed: u64) -> Result<Vec<RunRecord>> {
        let mut out = Vec::with_capacity(runs as usize * self.settings.len());
        for j in 0..self.settings.len() {
            out.extend(self.run_setting(j, runs, seed)?);
        }
        Ok(out)
    }

    /// Non-delayed harness: each edge's pair is asked directly, `runs` times.
    pub fn run_standard(&self, runs: u64, seed: u64) -> Result<StandardReport> {
        let n = self.family.n();
        let edges = (0..n)
            .map(|i| {
                let next = (i + 1) % n;
                let stream = RunStream::derive(seed, n, i, "standard");
                let sum: i64 = (0..runs)
                    .into_par_iter()
                    .map(|k| {
                        let mut draws = stream.run(k);
                        let (a, b) = match &self.blind {
                            Some(bx) => bx.respond_pair(n, i, next, draws.box_draw()),
                            None => {
                                let first = measure(
                                    self.family.observable(i),
                                    self.family.test_state(),
                                    draws.uniform(),
                                )?;
                                let second = measure(
                                    self.family.observable(next),
                                    &first.collapsed,
                                    draws.uniform(),
                                )?;
                                (first.outcome, second.outcome)
                            }
                        };
                        Ok(i64::from(a.times(b).value()))
                    })
                    .sum::<Result<i64>>()?;
                Ok(Estimate::from_product_sum(sum, runs))
            })
            .collect::<Result<Vec<_>>>()?;
        let values: Vec<f64> = edges.iter().map(|e| e.value).collect();
        let se = edges.iter().map(|e| e.se * e.se).sum::<f64>().sqrt();
        Ok(StandardReport {
            n,
            cycle_sum: Estimate {
                value: cycle_sum(n, &values),
                se,
                count: runs * n as u64,
            },
            edges,
        })
    }
}

/// A sample mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub se: f64,
    pub count: u64,
}

impl Estimate {
    /// Mean of `count` values in {−1, +1} whose sum is `sum`.
    pub fn from_product_sum(sum: i64, count: u64) -> Self {
        let value = sum as f64 / count as f64;
        Estimate {
            value,
            se: pm_one_se(value, count),
            count,
        }
    }

    /// `|value − target| ≤ k·se`.
    pub fn within(&self, target: f64, k: f64) -> bool {
        (self.value - target).abs() <= k * self.se
    }
}

fn pm_one_se(mean: f64, count: u64) -> f64 {
    match count {
        0 => f64::NAN,
        1 => 1.0,
        c => ((1.0 - mean * mean).max(0.0) / (c - 1) as f64).sqrt(),
    }
}

/// Non-delayed cycle estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StandardReport {
    pub n: usize,
    pub edges: Vec<Estimate>,
    pub cycle_sum: Estimate,
}

/// Outcome counts for one `(j, b)` cell, indexed by [`Outcome::index`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cell {
    pub counts: [[u64; 2]; 2],
}

const SIGNS: [f64; 4] = [1.0, -1.0, -1.0, 1.0];

impl Cell {
    pub fn add(&mut self, q0: Outcome, q1: Outcome) {
        self.counts[q0.index()][q1.index()] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    /// Empirical joint table in the order (+,+), (+,−), (−,+), (−,−).
    pub fn frequencies(&self) -> Option<[f64; 4]> {
        let t = self.total();
        if t == 0 {
            return None;
        }
        let c = self.counts;
        Some([c[0][0], c[0][1], c[1][0], c[1][1]].map(|k| k as f64 / t as f64))
    }

    pub fn correlator(&self) -> Option<Estimate> {
        let f = self.frequencies()?;
        let value = (0..4).map(|i| SIGNS[i] * f[i]).sum();
        Some(Estimate {
            value,
            se: pm_one_se(value, self.total()),
            count: self.total(),
        })
    }

    /// Marginal `p(q_slot = +1)` with its binomial standard error.
    pub fn marginal_plus(&self, slot: usize) -> Option<Estimate> {
        let t = self.total();
        if t == 0 {
            return None;
        }
        let plus = if slot == 0 {
            self.counts[0][0] + self.counts[0][1]
        } else {
            self.counts[0][0] + self.counts[1][0]
        };
        let p = plus as f64 / t as f64;
        Some(Estimate {
            value: p,
            se: (p * (1.0 - p) / t as f64).sqrt(),
            count: t,
        })
    }
}

/// `D(P, Q) = Σ |P(q0q1) − Q(q0q1)|`.
pub fn table_distance(p: &[f64; 4], q: &[f64; 4]) -> f64 {
    (0..4).map(|i| (p[i] - q[i]).abs()).sum()
}

/// `Σ s(q0q1)·(P − Q)`, clamped to `±D(P, Q)` so the bound survives rounding.
pub fn table_contrast(p: &[f64; 4], q: &[f64; 4]) -> f64 {
    let corr = |t: &[f64; 4]| (t[0] + t[3]) - (t[1] + t[2]);
    let d = table_distance(p, q);
    (corr(p) - corr(q)).clamp(-d, d)
}

/// A `(j, b)` cell with too few records.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellId {
    pub j: usize,
    pub b: u8,
    pub count: u64,
}

/// Per-setting estimates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SettingEstimate {
    pub j: usize,
    /// Edge `(i, i+1)` read off the `b = 1` branch.
    pub edge: (usize, usize),
    pub cells: [Cell; 2],
    /// `⟨q0q1 | b⟩` for `b = 0, 1`.
    pub branch_correlators: [Option<Estimate>; 2],
    /// `C_j` (even) or `C*_j` (odd): primed-branch minus reference-branch correlator.
    pub contrast: Option<Estimate>,
    /// The cycle sum with this setting's edge removed.
    pub companion: Option<f64>,
    pub variational_distance: Option<f64>,
}

/// Pooled `b = 0` reference `⟨A_{n−1}A_0⟩` of an even experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PooledReference {
    pub estimate: Option<Estimate>,
    /// Homogeneity statistic `Σ_j N_j (m_j − m̄)² / (1 − m̄²)`.
    pub chi_square: f64,
    pub dof: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RepeatabilityResult {
    pub rate: f64,
    pub count: u64,
    pub failures: u64,
}

impl RepeatabilityResult {
    pub fn pass(&self) -> bool {
        self.failures == 0
    }
}

/// Everything estimated from a record set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub n: usize,
    pub parity: Parity,
    pub record_count: u64,
    pub settings: Vec<SettingEstimate>,
    /// `⟨A_iA_{i+1 mod n}⟩` for every edge of the cycle.
    pub edges: Vec<Option<Estimate>>,
    pub reference: Option<PooledReference>,
    pub repeatability: Option<RepeatabilityResult>,
    pub cycle_sum: Option<Estimate>,
    pub insufficient: Vec<CellId>,
}

impl CorrelationReport {
    pub fn is_sufficient(&self) -> bool {
        self.insufficient.is_empty() && self.cycle_sum.is_some()
    }

    pub fn setting(&self, j: usize) -> &SettingEstimate {
        &self.settings[j]
    }
}

fn cells_by_setting(records: &[RunRecord]) -> Result<(CycleSpec, Vec<[Cell; 2]>)> {
    let first = records
        .first()
        .ok_or_else(|| EngineError::InsufficientData("no records".into()))?;
    let spec = CycleSpec::new(first.n)?;
    let mut cells = vec![[Cell::default(); 2]; spec.setting_count()];
    for r in records {
        if r.n != spec.n() {
            return Err(EngineError::MixedRecords(spec.n(), r.n));
        }
        if r.j >= cells.len() || r.b > 1 {
            return Err(EngineError::BadRecord { n: r.n, j: r.j });
        }
        cells[r.j][usize::from(r.b)].add(r.q0, r.q1);
    }
    Ok((spec, cells))
}

fn pooled_reference(cells: &[[Cell; 2]]) -> PooledReference {
    let mut sum = 0.0;
    let mut total = 0u64;
    let mut means = Vec::new();
    for c in cells {
        if let Some(e) = c[0].correlator() {
            sum += e.value * e.count as f64;
            total += e.count;
            means.push(e);
        }
    }
    if total == 0 {
        return PooledReference {
            estimate: None,
            chi_square: f64::NAN,
            dof: 0,
        };
    }
    let mean = sum / total as f64;
    let var = 1.0 - mean * mean;
    let spread: f64 = means
        .iter()
        .map(|e| e.count as f64 * (e.value - mean).powi(2))
        .sum();
    let chi_square = if var > 0.0 {
        spread / var
    } else if spread == 0.0 {
        0.0
    } else {
        f64::INFINITY
    };
    PooledReference {
        estimate: Some(Estimate {
            value: mean,
            se: pm_one_se(mean, total),
            count: total,
        }),
        chi_square,
        dof: means.len().saturating_sub(1),
    }
}

/// Builds the correlation report from merged records.
///
/// The contrast for setting `j` pairs its own branches; the pooled reference
/// feeds only the closing edge of the even cycle sum.
pub fn estimate(records: &[RunRecord]) -> Result<CorrelationReport> {
    let (spec, cells) = cells_by_setting(records)?;
    let n = spec.n();
    let parity = spec.parity();

    let mut insufficient = Vec::new();
    for (j, c) in cells.iter().enumerate() {
        for b in 0..2u8 {
            let count = c[usize::from(b)].total();
            if count < MIN_CELL_COUNT {
                insufficient.push(CellId { j, b, count });
            }
        }
    }

    let mut settings: Vec<SettingEstimate> = cells
        .iter()
        .enumerate()
        .map(|(j, c)| {
            let (p, q) = (c[1].frequencies(), c[0].frequencies());
            let (contrast, variational_distance) = match (p, q) {
                (Some(p), Some(q)) => {
                    let (e1, e0) = (c[1].correlator().unwrap(), c[0].correlator().unwrap());
                    let est = Estimate {
                        value: table_contrast(&p, &q),
                        se: (e1.se * e1.se + e0.se * e0.se).sqrt(),
                        count: e1.count + e0.count,
                    };
                    (Some(est), Some(table_distance(&p, &q)))
                }
                _ => (None, None),
            };
            SettingEstimate {
                j,
                edge: (j, (j + 1) % n),
                cells: *c,
                branch_correlators: [c[0].correlator(), c[1].correlator()],
                contrast,
                companion: None,
                variational_distance,
            }
        })
        .collect();

    let mut edges: Vec<Option<Estimate>> =
        settings.iter().map(|s| s.branch_correlators[1]).collect();
    let (reference, repeatability) = match parity {
        Parity::Even => {
            let pooled = pooled_reference(&cells);
            edges.push(pooled.estimate);
            (Some(pooled), None)
        }
        Parity::Odd => (None, repeatability_check(records).ok()),
    };

    let cycle = if edges.iter().all(Option::is_some) {
        let e: Vec<Estimate> = edges.iter().flatten().copied().collect();
        let values: Vec<f64> = e.iter().map(|x| x.value).collect();
        Some(Estimate {
            value: cycle_sum(n, &values),
            se: e.iter().map(|x| x.se * x.se).sum::<f64>().sqrt(),
            count: records.len() as u64,
        })
    } else {
        None
    };

    if let Some(total) = cycle {
        for s in settings.iter_mut() {
            s.companion = match parity {
                Parity::Even => s.contrast.map(|c| total.value - c.value),
                Parity::Odd => s.branch_correlators[1]
                    .map(|c| total.value - crate::ncycle::edge_sign(n, s.j) * c.value),
            };
        }
    }

    Ok(CorrelationReport {
        n,
        parity,
        record_count: records.len() as u64,
        settings,
        edges,
        reference,
        repeatability,
        cycle_sum: cycle,
        insufficient,
    })
}

/// Upper end of the admissible ε range, `|T_n + n − 2|`.
pub fn epsilon_ceiling(n: usize) -> Result<f64> {
    Ok((tsirelson_bound(n)? + n as f64 - 2.0).abs())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpsilonVerdict {
    pub j: usize,
    pub contrast: Option<f64>,
    pub se: Option<f64>,
    /// `−ε − Ĉ_j`; positive when the setting passes.
    pub margin: Option<f64>,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpsilonReport {
    pub epsilon: f64,
    pub per_setting: Vec<EpsilonVerdict>,
    pub all_pass: bool,
}

/// `Ĉ_j < −ε` for every setting. Empty or undersized cells never pass.
pub fn epsilon_test(report: &CorrelationReport, epsilon: f64) -> Result<EpsilonReport> {
    let max = epsilon_ceiling(report.n)?;
    if !(epsilon > 0.0 && epsilon < max) {
        return Err(EngineError::EpsilonOutOfRange { epsilon, max });
    }
    let per_setting: Vec<EpsilonVerdict> = report
        .settings
        .iter()
        .map(|s| {
            let big_enough = s.cells.iter().all(|c| c.total() >= MIN_CELL_COUNT);
            let margin = s.contrast.map(|c| -epsilon - c.value);
            EpsilonVerdict {
                j: s.j,
                contrast: s.contrast.map(|c| c.value),
                se: s.contrast.map(|c| c.se),
                margin,
                pass: big_enough && margin.is_some_and(|m| m > 0.0),
            }
        })
        .collect();
    let all_pass = per_setting.iter().all(|v| v.pass);
    Ok(EpsilonReport {
        epsilon,
        per_setting,
        all_pass,
    })
}

/// Fraction of odd-cycle `b = 0` runs with `q0 = q1`.
pub fn repeatability_check(records: &[RunRecord]) -> Result<RepeatabilityResult> {
    if records.iter().any(|r| r.parity != Parity::Odd) {
        return Err(EngineError::WrongParity("repeatability_check", Parity::Odd));
    }
    let (count, failures) = records
        .iter()
        .filter(|r| r.b == 0)
        .fold((0u64, 0u64), |(c, f), r| {
            (c + 1, f + u64::from(r.q0 != r.q1))
        });
    if count == 0 {
        return Err(EngineError::InsufficientData(
            "no odd-cycle b = 0 runs".into(),
        ));
    }
    Ok(RepeatabilityResult {
        rate: (count - failures) as f64 / count as f64,
        count,
        failures,
    })
}

/// Where one observable's marginal was read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MarginalContext {
    pub j: usize,
    pub b: u8,
    pub slot: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoDisturbanceResult {
    pub observable: usize,
    pub contexts: (MarginalContext, MarginalContext),
    pub max_deviation: f64,
    pub se: f64,
    pub z: f64,
    /// Largest z-score over all compared pairs.
    pub max_z: f64,
    pub pairs_compared: usize,
}

impl NoDisturbanceResult {
    pub fn consistent(&self, sigma: f64) -> bool {
        self.z <= sigma
    }
}

/// Largest gap between marginals of one observable read in two different `(j, b)` contexts.
pub fn no_disturbance_check(records: &[RunRecord]) -> Result<NoDisturbanceResult> {
    let (spec, cells) = cells_by_setting(records)?;
    let n = spec.n();
    let mut by_observable: Vec<Vec<(MarginalContext, Estimate)>> = vec![Vec::new(); n];
    for (j, c) in cells.iter().enumerate() {
        let map = SlotMap::for_setting(n, j);
        for b in 0..2u8 {
            let cell = &c[usize::from(b)];
            if cell.total() < MIN_CELL_COUNT {
                continue;
            }
            for (slot, &k) in map.branch(b).iter().enumerate() {
                let m = cell.marginal_plus(slot).expect("nonempty cell");
                by_observable[k].push((MarginalContext { j, b, slot }, m));
            }
        }
    }
    let mut best: Option<NoDisturbanceResult> = None;
    let mut max_z: f64 = 0.0;
    let mut pairs = 0;
    for (k, entries) in by_observable.iter().enumerate() {
        for (x, (cx, ex)) in entries.iter().enumerate() {
            for (cy, ey) in &entries[x + 1..] {
                if (cx.j, cx.b) == (cy.j, cy.b) {
                    continue;
                }
                pairs += 1;
                let dev = (ex.value - ey.value).abs();
                let se = (ex.se * ex.se + ey.se * ey.se).sqrt();
                let z = if se > 0.0 {
                    dev / se
                } else if dev == 0.0 {
                    0.0
                } else {
                    f64::INFINITY
                };
                max_z = max_z.max(z);
                if best.as_ref().is_none_or(|b| dev > b.max_deviation) {
                    best = Some(NoDisturbanceResult {
                        observable: k,
                        contexts: (*cx, *cy),
                        max_deviation: dev,
                        se,
                        z,
                        max_z: 0.0,
                        pairs_compared: 0,
                    });
                }
            }
        }
    }
    let mut result = best.ok_or_else(|| {
        EngineError::InsufficientData("no observable was read in two populated contexts".into())
    })?;
    result.max_z = max_z;
    result.pairs_compared = pairs;
    Ok(result)
}

/// `D(P, Q)` between the `b = 1` and `b = 0` tables of setting `j`.
pub fn variational_distance(records: &[RunRecord], j: usize) -> Result<f64> {
    let (_, cells) = cells_by_setting(records)?;
    let c = cells
        .get(j)
        .ok_or_else(|| EngineError::InsufficientData(format!("setting {j} absent")))?;
    match (c[1].frequencies(), c[0].frequencies()) {
        (Some(p), Some(q)) => Ok(table_distance(&p, &q)),
        _ => Err(EngineError::InsufficientData(format!(
            "setting {j} lacks one branch"
        ))),
    }
}

/// Constant in [`detection_bound`].
pub const DETECTION_RATE: f64 = 1.0 / 16.0;

/// Bound `exp(−N·ε²/16)` on the chance that a b-blind box passes `Ĉ_j < −ε` at one setting.
///
/// With b independent of the answers, `E[Ĉ_j | N₁] = 0` and Hoeffding over the
/// `N₁` primed and `N₀ = N − N₁` reference runs gives
/// `exp(−ε²N₁N₀/(2N))`. Writing `N₁N₀/N = N/4 − Y²/N` with
/// `Y = N₁ − N/2` sub-Gaussian of variance proxy `N/4`, averaging over the
/// fair-coin split costs at most `(1 − ε²/4)^{−1/2} ≤ exp(ε²N/16)` for
/// `ε ≤ 1.6` and `N ≥ 4`, leaving `exp(−ε²N/16)`. Every admissible ε for
/// `n ≤ 12` is below 1.6. Runs with an empty branch never pass, so the
/// bound also covers `N < 4` whenever it is at least the exact mixture (checked in tests).
pub fn detection_bound(runs: u64, epsilon: f64) -> f64 {
    (-DETECTION_RATE * runs as f64 * epsilon * epsilon).exp()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::boxes::{AutomatonTarget, ClosingRule, LambdaStrategy};
    use std::f64::consts::FRAC_1_SQRT_2;

    fn engine(n: usize, model: BoxModel) -> Engine {
        Engine::new(ObservableFamily::for_n(n).unwrap(), model).unwrap()
    }

    fn rec(n: usize, j: usize, q0: i8, q1: i8, b: u8) -> RunRecord {
        RunRecord {
            n,
            parity: Parity::of(n),
            j,
            q0: q0.try_into().unwrap(),
            q1: q1.try_into().unwrap(),
            b,
            box_kind: BoxKind::Noncontextual,
            rng_stream_id: 0,
            run_index: 0,
        }
    }

    #[test]
    fn streams_are_counter_addressed() {
        let s = RunStream::derive(42, 5, 1, "x");
        let a: Vec<f64> = (0..4).map(|k| s.run(k).uniform()).collect();
        let b: Vec<f64> = (0..4).rev().map(|k| s.run(k).uniform()).collect();
        assert_eq!(a, b.into_iter().rev().collect::<Vec<_>>());
        assert_ne!(s.id(), RunStream::derive(42, 5, 2, "x").id());
        assert_ne!(s.id(), RunStream::derive(43, 5, 1, "x").id());
        // Blocks do not overlap.
        let mut r0 = s.run(0);
        let tail: Vec<u64> = (0..16).map(|_| r0.bits()).collect();
        assert_ne!(tail[0], s.run(1).bits());
    }

    #[test]
    fn parallel_equals_serial() {
        let e = engine(5, BoxModel::Honest);
        let par = e.run_setting(2, 500, 7).unwrap();
        let stream = e.setting_stream(7, 2);
        let ser: Vec<RunRecord> = (0..500).map(|k| e.run(2, &stream, k).unwrap()).collect();
        assert_eq!(par, ser);
    }

    #[test]
    fn honest_odd_reference_repeats() {
        let e = engine(5, BoxModel::Honest);
        let recs = e.run_setting(0, 2000, 1).unwrap();
        assert!(recs.iter().filter(|r| r.b == 0).all(|r| r.q0 == r.q1));
        assert_eq!(repeatability_check(&recs).unwrap().rate, 1.0);
    }

    #[test]
    fn noncontextual_all_plus() {
        let e = engine(
            4,
            BoxModel::Noncontextual {
                lambda: LambdaStrategy::Table(vec![Outcome::Plus; 4]),
            },
        );
        let recs = e.run_all(200, 3).unwrap();
        assert!(recs
            .iter()
            .all(|r| r.q0 == Outcome::Plus && r.q1 == Outcome::Plus));
        assert!(recs.iter().any(|r| r.b == 0) && recs.iter().any(|r| r.b == 1));
    }

    #[test]
    fn blind_answers_ignore_b() {
        for model in [
            BoxModel::from_kind(BoxKind::Automaton),
            BoxModel::Noncontextual {
                lambda: LambdaStrategy::Random,
            },
        ] {
            let e = engine(6, model);
            let stream = e.setting_stream(9, 2);
            for k in 0..200 {
                let natural = e.run(2, &stream, k).unwrap();
                for b in [0, 1] {
                    let forced = e.run_forced_b(2, &stream, k, b).unwrap();
                    assert_eq!((forced.q0, forced.q1), (natural.q0, natural.q1));
                    assert_eq!(forced.b, b);
                }
            }
        }
    }

    #[test]
    fn forced_honest_rejected() {
        let e = engine(4, BoxModel::Honest);
        assert_eq!(
            e.run_forced_b(0, &e.setting_stream(1, 0), 0, 0),
            Err(EngineError::ForcedHonest)
        );
        assert!(e.run_odd(0, &e.setting_stream(1, 0), 0).is_err());
    }

    #[test]
    fn equal_answers_cancel() {
        let mut recs = Vec::new();
        for j in 0..3 {
            for k in 0..80 {
                let q = if k % 3 == 0 { 1 } else { -1 };
                recs.push(rec(4, j, q, q, (k % 2) as u8));
            }
        }
        let r = estimate(&recs).unwrap();
        for s in &r.settings {
            assert_eq!(s.contrast.unwrap().value, 0.0);
        }
        assert!(r.is_sufficient());
    }

    #[test]
    fn contrast_formula() {
        // b=1: 30 equal, 10 unequal; b=0: 10 equal, 30 unequal.
        let mut recs = Vec::new();
        for _ in 0..30 {
            recs.push(rec(5, 0, 1, 1, 1));
            recs.push(rec(5, 0, 1, -1, 0));
        }
        for _ in 0..10 {
            recs.push(rec(5, 0, -1, 1, 1));
            recs.push(rec(5, 0, -1, -1, 0));
        }
        let r = estimate(&recs).unwrap();
        let s = r.setting(0);
        // (0.75 − 0.25) − (0.25 − 0.75)
        assert!((s.contrast.unwrap().value - 1.0).abs() < 1e-15);
        assert!(s.contrast.unwrap().value.abs() <= s.variational_distance.unwrap());
        assert!(!r.is_sufficient());
        assert!(r.insufficient.iter().any(|c| c.j == 1 && c.count == 0));
        assert!(r.cycle_sum.is_none());
    }

    #[test]
    fn empty_records_are_insufficient() {
        assert!(matches!(
            estimate(&[]),
            Err(EngineError::InsufficientData(_))
        ));
        assert!(matches!(
            estimate(&[rec(4, 0, 1, 1, 0), rec(5, 0, 1, 1, 0)]),
            Err(EngineError::MixedRecords(4, 5))
        ));
        assert!(estimate(&[rec(4, 3, 1, 1, 0)]).is_err());
    }

    #[test]
    fn epsilon_range() {
        let mut recs = Vec::new();
        for j in 0..3 {
            for b in 0..2 {
                for _ in 0..40 {
                    recs.push(rec(4, j, 1, if b == 1 { -1 } else { 1 }, b));
                }
            }
        }
        let r = estimate(&recs).unwrap();
        assert!(epsilon_test(&r, 0.0).is_err());
        assert!(epsilon_test(&r, epsilon_ceiling(4).unwrap()).is_err());
        let v = epsilon_test(&r, 0.3).unwrap();
        assert!(v.all_pass);
        assert!((v.per_setting[0].margin.unwrap() - 1.7).abs() < 1e-12);
        assert!((epsilon_ceiling(4).unwrap() - (2.0 * 2f64.sqrt() - 2.0)).abs() < 1e-12);
    }

    #[test]
    fn repeatability_inversions() {
        let flipped: Vec<_> = (0..50).map(|_| rec(5, 1, 1, -1, 0)).collect();
        assert_eq!(repeatability_check(&flipped).unwrap().rate, 0.0);
        assert!(repeatability_check(&[rec(5, 1, 1, -1, 1)]).is_err());
        assert!(repeatability_check(&[rec(4, 1, 1, 1, 0)]).is_err());

        let e = engine(
            5,
            BoxModel::Automaton {
                closing: ClosingRule::ParityCorrected,
                target: AutomatonTarget::Primed,
            },
        );
        let recs = e.run_all(200, 5).unwrap();
        let r = repeatability_check(&recs).unwrap();
        assert_eq!(r.rate, 0.0);
        assert!(!r.pass());
    }

    #[test]
    fn honest_no_disturbance() {
        for n in [4, 5] {
            let e = engine(n, BoxModel::Honest);
            let recs = e.run_all(20_000, 11).unwrap();
            let nd = no_disturbance_check(&recs).unwrap();
            assert!(nd.consistent(SIGMA), "n = {n}: {nd:?}");
        }
    }

    #[test]
    fn shifted_marginal_detected() {
        // q0 has p(+) = 0.5 at j = 0 and 0.7 at j = 1.
        let mut recs = Vec::new();
        for j in 0..3 {
            for k in 0..2000 {
                let plus = if j == 1 {
                    k / 2 % 10 < 7
                } else {
                    k / 2 % 2 == 0
                };
                recs.push(rec(4, j, if plus { 1 } else { -1 }, 1, (k % 2) as u8));
            }
        }
        let nd = no_disturbance_check(&recs).unwrap();
        assert!((nd.max_deviation - 0.2).abs() < 0.02);
        assert!(!nd.consistent(SIGMA));
    }

    #[test]
    fn single_context_is_insufficient() {
        let recs: Vec<_> = (0..100).map(|_| rec(4, 0, 1, 1, 0)).collect();
        assert!(matches!(
            no_disturbance_check(&recs),
            Err(EngineError::InsufficientData(_))
        ));
        assert!(variational_distance(&recs, 0).is_err());
    }

    #[test]
    fn distance_of_identical_tables() {
        let t = [0.1, 0.2, 0.3, 0.4];
        assert_eq!(table_distance(&t, &t), 0.0);
        assert_eq!(table_contrast(&t, &t), 0.0);
    }

    #[test]
    fn detection_bound_shape() {
        assert_eq!(detection_bound(100, 0.0), 1.0);
        assert!(detection_bound(200, 0.3) < detection_bound(100, 0.3));
        assert!(detection_bound(100, 0.4) < detection_bound(100, 0.3));
    }

    fn ln_binomial(n: u64, k: u64) -> f64 {
        let lg = |m: u64| (1..=m).map(|i| (i as f64).ln()).sum::<f64>();
        lg(n) - lg(k) - lg(n - k)
    }

    #[test]
    fn detection_bound_dominates_mixture() {
        // E over N₁ ~ Bin(N, ½) of the conditional Hoeffding bound; a split
        // with an empty branch cannot pass.
        for n in [4usize, 5, 8, 12] {
            let max_eps = epsilon_ceiling(n).unwrap();
            for runs in (1..=60).chain([100, 500, 1000]) {
                for step in 1..=20 {
                    let eps = max_eps * step as f64 / 20.0;
                    let mix: f64 = (1..runs)
                        .map(|n1| {
                            let w = (ln_binomial(runs, n1) - runs as f64 * 2f64.ln()).exp();
                            let n0 = runs - n1;
                            w * (-eps * eps * (n1 * n0) as f64 / (2.0 * runs as f64)).exp()
                        })
                        .sum();
                    assert!(
                        mix <= detection_bound(runs, eps) + 1e-15,
                        "N = {runs}, ε = {eps}"
                    );
                }
            }
        }
    }

    #[test]
    fn honest_even_zero_setting() {
        let e = engine(4, BoxModel::Honest);
        let recs = e.run_setting(0, 20_000, 42).unwrap();
        let r = estimate(&recs).unwrap();
        let s = r.setting(0);
        assert!(s.branch_correlators[1]
            .unwrap()
            .within(-FRAC_1_SQRT_2, SIGMA));
        assert!(s.branch_correlators[0]
            .unwrap()
            .within(FRAC_1_SQRT_2, SIGMA));
        let ones = recs.iter().filter(|r| r.b == 1).count() as f64;
        let p = ones / recs.len() as f64;
        assert!((p - 0.5).abs() <= SIGMA * (0.25 / recs.len() as f64).sqrt());
    }

    #[test]
    fn cheating_forced_reference_branch() {
        let f = ObservableFamily::for_n(4).unwrap();
        let e = Engine::new(f, BoxModel::Cheating).unwrap();
        let stream = e.setting_stream(2, 1);
        let recs: Vec<_> = (0..20_000)
            .map(|k| e.run_forced_b(1, &stream, k, 0).unwrap())
            .collect();
        let mut cell = Cell::default();
        recs.iter().for_each(|r| cell.add(r.q0, r.q1));
        let c = cell.correlator().unwrap();
        assert!(c.within(FRAC_1_SQRT_2, SIGMA), "{c:?}");
        for slot in 0..2 {
            assert!(cell.marginal_plus(slot).unwrap().within(0.5, SIGMA));
        }
    }

    #[test]
    fn standard_harness_automaton() {
        for n in [4, 5] {
            let e = engine(n, BoxModel::from_kind(BoxKind::Automaton));
            let r = e.run_standard(2000, 1).unwrap();
            assert_eq!(r.cycle_sum.value, -(n as f64));
        }
    }

    #[test]
    fn exact_values_force_negative_contrasts() {
        for n in [4, 5, 6, 7] {
            let f = ObservableFamily::for_n(n).unwrap();
            let edges = f.exact_edge_correlators().unwrap();
            let total = cycle_sum(n, &edges);
            assert!(total < crate::ncycle::noncontextual_bound(n));
            for j in 0..f.spec().setting_count() {
                let reference = if n % 2 == 0 { edges[n - 1] } else { 1.0 };
                assert!(edges[j] - reference < 0.0);
            }
        }
    }
}
