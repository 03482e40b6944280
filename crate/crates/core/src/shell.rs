//! Manifests, experiment pipelines, verdicts and on-disk output.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bell::{self, BellError, ChshRecord, ChshRun};
use crate::boxes::{BoxKind, BoxModel};
use crate::engine::{
    self, detection_bound, epsilon_ceiling, CorrelationReport, EngineError, EpsilonReport,
    NoDisturbanceResult, RepeatabilityResult, RunRecord, RunStream, SIGMA,
};
use crate::ncycle::{noncontextual_bound, tsirelson_bound, ObservableFamily, Parity, MAX_N, MIN_N};

pub const VERSION_TAG: &str = concat!(
    "delayed-choice ",
    env!("CARGO_PKG_VERSION"),
    " rng=",
    "dcc/chacha20/v1"
);

pub const RECORDS_FILE: &str = "records.jsonl";
pub const CHSH_RECORDS_FILE: &str = "chsh_records.jsonl";
pub const REPORT_FILE: &str = "report.json";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const MANIFEST_FILE: &str = "manifest.toml";
pub const SWEEP_FILE: &str = "sweep.csv";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TestKind {
    Cycle,
    Epsilon,
    Repeatability,
    NoDisturbance,
    VariationalDistance,
    Chsh,
}

impl TestKind {
    pub const ALL: [TestKind; 6] = [
        TestKind::Cycle,
        TestKind::Epsilon,
        TestKind::Repeatability,
        TestKind::NoDisturbance,
        TestKind::VariationalDistance,
        TestKind::Chsh,
    ];

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim() {
            "cycle" => Some(TestKind::Cycle),
            "epsilon" => Some(TestKind::Epsilon),
            "repeatability" => Some(TestKind::Repeatability),
            "no-disturbance" => Some(TestKind::NoDisturbance),
            "variational-distance" => Some(TestKind::VariationalDistance),
            "chsh" => Some(TestKind::Chsh),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    #[default]
    Json,
    Csv,
}

fn default_tests() -> Vec<TestKind> {
    TestKind::ALL.to_vec()
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("dcc-out")
}

fn default_ratio() -> f64 {
    0.1
}

fn default_box() -> BoxModel {
    BoxModel::Honest
}

/// Everything needed to reproduce an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentManifest {
    pub n: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parity: Option<Parity>,
    pub runs_per_setting: u64,
    pub epsilon: f64,
    pub seed: u64,
    #[serde(rename = "box", default = "default_box")]
    pub box_model: BoxModel,
    #[serde(default = "default_tests")]
    pub tests: Vec<TestKind>,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default = "default_ratio")]
    pub certify_ratio: f64,
    #[serde(default)]
    pub format: OutputFormat,
    /// CHSH rounds per setting for `run`; defaults to `runs_per_setting`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chsh_rounds: Option<u64>,
}

impl ExperimentManifest {
    pub fn new(
        n: usize,
        runs_per_setting: u64,
        epsilon: f64,
        seed: u64,
        box_model: BoxModel,
    ) -> Self {
        ExperimentManifest {
            n,
            parity: None,
            runs_per_setting,
            epsilon,
            seed,
            box_model,
            tests: default_tests(),
            out_dir: default_out_dir(),
            certify_ratio: default_ratio(),
            format: OutputFormat::Json,
            chsh_rounds: None,
        }
    }

    pub fn enabled(&self, t: TestKind) -> bool {
        self.tests.contains(&t)
    }

    pub fn chsh_rounds(&self) -> u64 {
        self.chsh_rounds.unwrap_or(self.runs_per_setting)
    }

    /// Every field problem at once.
    pub fn validate(&self) -> std::result::Result<(), ManifestError> {
        let mut issues = Vec::new();
        let mut bad = |field: &str, message: String| {
            issues.push(FieldIssue {
                field: field.to_string(),
                message,
            })
        };
        let n_ok = (MIN_N..=MAX_N).contains(&self.n);
        if !n_ok {
            bad("n", format!("must be in {MIN_N}..={MAX_N}, got {}", self.n));
        }
        if let Some(p) = self.parity {
            if n_ok && p != Parity::of(self.n) {
                bad("parity", format!("{p:?} contradicts n = {}", self.n));
            }
        }
        if self.runs_per_setting == 0 {
            bad("runs_per_setting", "must be at least 1".into());
        }
        if n_ok {
            let max = epsilon_ceiling(self.n).expect("n validated");
            if !(self.epsilon > 0.0 && self.epsilon < max) {
                bad(
                    "epsilon",
                    format!(
                        "must lie in (0, {max:.6}) for n = {}, got {}",
                        self.n, self.epsilon
                    ),
                );
            }
            if let Err(e) = self.box_model.validate(self.n) {
                bad("box", e.to_string());
            }
        }
        if self.tests.is_empty() {
            bad("tests", "at least one test must be enabled".into());
        }
        if self.tests.iter().collect::<BTreeSet<_>>().len() != self.tests.len() {
            bad("tests", "duplicate entries".into());
        }
        if !(self.certify_ratio > 0.0 && self.certify_ratio < 1.0) {
            bad(
                "certify_ratio",
                format!("must lie in (0, 1), got {}", self.certify_ratio),
            );
        }
        if self.chsh_rounds == Some(0) {
            bad("chsh_rounds", "must be at least 1".into());
        }
        if self.out_dir.as_os_str().is_empty() {
            bad("out_dir", "must not be empty".into());
        }
        if issues.is_empty() {
            Ok(())
        } else {
            Err(ManifestError { issues })
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| {
            ShellError::InvalidManifest(ManifestError {
                issues: vec![FieldIssue {
                    field: "manifest".into(),
                    message: e.to_string(),
                }],
            })
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| ShellError::Io(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest serializes")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldIssue {
    pub field: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("invalid manifest: {}", issues.iter().map(|i| format!("{}: {}", i.field, i.message)).collect::<Vec<_>>().join("; "))]
pub struct ManifestError {
    pub issues: Vec<FieldIssue>,
}

#[derive(Debug, Error)]
pub enum ShellError {
    #[error(transparent)]
    InvalidManifest(#[from] ManifestError),
    #[error("{0}")]
    InvalidArgument(String),
    #[error("io: {0}")]
    Io(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Bell(#[from] BellError),
}

impl From<std::io::Error> for ShellError {
    fn from(e: std::io::Error) -> Self {
        ShellError::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, ShellError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    QuantumContextual,
    ClassicalExplained,
    Inconclusive,
}

impl std::fmt::Display for Verdict {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Verdict::QuantumContextual => "quantum-contextual",
            Verdict::ClassicalExplained => "classical-explained",
            Verdict::Inconclusive => "inconclusive",
        })
    }
}

/// Sub-test outcomes feeding the verdict; `None` means not evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerdictInputs {
    pub sufficient: bool,
    pub repeatability: Option<bool>,
    pub epsilon: Option<bool>,
    pub chsh: Option<bool>,
}

/// Insufficient data is inconclusive; any failed screen is classical; the
/// ε screen must have run for a quantum verdict.
pub fn verdict(v: VerdictInputs) -> Verdict {
    if !v.sufficient {
        return Verdict::Inconclusive;
    }
    if [v.repeatability, v.epsilon, v.chsh].contains(&Some(false)) {
        return Verdict::ClassicalExplained;
    }
    if v.epsilon.is_none() {
        return Verdict::Inconclusive;
    }
    Verdict::QuantumContextual
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleTest {
    pub value: f64,
    pub se: f64,
    pub noncontextual_bound: f64,
    pub tsirelson_bound: f64,
    /// `(bound − value)/se`.
    pub violation_sigma: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceEntry {
    pub j: usize,
    pub distance: f64,
    pub abs_contrast: f64,
    pub bound_holds: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepeatabilityTest {
    pub applicable: bool,
    pub result: Option<RepeatabilityResult>,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoDisturbanceTest {
    pub result: Option<NoDisturbanceResult>,
    pub consistent: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TestResults {
    pub cycle: Option<CycleTest>,
    pub epsilon: Option<EpsilonReport>,
    pub repeatability: Option<RepeatabilityTest>,
    pub no_disturbance: Option<NoDisturbanceTest>,
    pub variational_distance: Option<Vec<DistanceEntry>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertificationSection {
    /// Fraction of rounds spent on CHSH, when rounds were interleaved.
    pub ratio: Option<f64>,
    pub chsh_rounds: u64,
    pub per_setting: Vec<ChshRun>,
    pub certified: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportDocument {
    pub version: String,
    pub manifest: ExperimentManifest,
    pub correlation: CorrelationReport,
    pub tests: TestResults,
    pub certification: Option<CertificationSection>,
    pub inputs: VerdictInputs,
    pub verdict: Verdict,
    pub insufficient: Vec<String>,
}

impl ReportDocument {
    pub fn verdict_line(&self) -> String {
        format!(
            "verdict: {} (n = {}, box = {}, runs/setting = {}, seed = {})",
            self.verdict,
            self.manifest.n,
            self.manifest.box_model.kind(),
            self.manifest.runs_per_setting,
            self.manifest.seed
        )
    }

    pub fn is_insufficient(&self) -> bool {
        !self.inputs.sufficient
    }
}

/// Records and report of a pipeline, prior to persistence.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub records: Vec<RunRecord>,
    pub chsh_records: Vec<ChshRecord>,
    pub report: ReportDocument,
}

fn family_of(m: &ExperimentManifest) -> Result<ObservableFamily> {
    Ok(ObservableFamily::for_n(m.n).map_err(EngineError::from)?)
}

fn certification_section(
    runs: Vec<ChshRun>,
    ratio: Option<f64>,
    rounds: u64,
) -> CertificationSection {
    let certified = !runs.is_empty() && runs.iter().all(ChshRun::certified_3sigma);
    CertificationSection {
        ratio,
        chsh_rounds: rounds,
        per_setting: runs,
        certified,
    }
}

/// Applies the enabled tests and the verdict to merged records.
pub fn build_report(
    manifest: &ExperimentManifest,
    records: &[RunRecord],
    certification: Option<CertificationSection>,
) -> Result<ReportDocument> {
    let correlation = engine::estimate(records)?;
    let n = manifest.n;
    let mut tests = TestResults::default();
    let mut insufficient: Vec<String> = correlation
        .insufficient
        .iter()
        .map(|c| format!("setting {} branch b={} has {} runs", c.j, c.b, c.count))
        .collect();

    if manifest.enabled(TestKind::Cycle) {
        if let Some(c) = correlation.cycle_sum {
            let bound = noncontextual_bound(n);
            let violation_sigma = if c.se > 0.0 {
                (bound - c.value) / c.se
            } else if c.value < bound {
                f64::INFINITY
            } else {
                0.0
            };
            tests.cycle = Some(CycleTest {
                value: c.value,
                se: c.se,
                noncontextual_bound: bound,
                tsirelson_bound: tsirelson_bound(n).map_err(EngineError::from)?,
                violation_sigma,
                pass: violation_sigma >= SIGMA,
            });
        }
    }
    if manifest.enabled(TestKind::Epsilon) {
        tests.epsilon = Some(engine::epsilon_test(&correlation, manifest.epsilon)?);
    }
    if manifest.enabled(TestKind::Repeatability) {
        tests.repeatability = Some(match correlation.parity {
            Parity::Even => RepeatabilityTest {
                applicable: false,
                result: None,
                pass: true,
            },
            Parity::Odd => match engine::repeatability_check(records) {
                Ok(r) => RepeatabilityTest {
                    applicable: true,
                    pass: r.pass(),
                    result: Some(r),
                },
                Err(EngineError::InsufficientData(msg)) => {
                    insufficient.push(msg);
                    RepeatabilityTest {
                        applicable: true,
                        result: None,
                        pass: false,
                    }
                }
                Err(e) => return Err(e.into()),
            },
        });
    }
    if manifest.enabled(TestKind::NoDisturbance) {
        tests.no_disturbance = Some(match engine::no_disturbance_check(records) {
            Ok(r) => NoDisturbanceTest {
                consistent: r.consistent(SIGMA),
                result: Some(r),
            },
            Err(EngineError::InsufficientData(_)) => NoDisturbanceTest {
                result: None,
                consistent: false,
            },
            Err(e) => return Err(e.into()),
        });
    }
    if manifest.enabled(TestKind::VariationalDistance) {
        tests.variational_distance = Some(
            correlation
                .settings
                .iter()
                .filter_map(|s| {
                    let d = s.variational_distance?;
                    let c = s.contrast?.value.abs();
                    Some(DistanceEntry {
                        j: s.j,
                        distance: d,
                        abs_contrast: c,
                        bound_holds: c <= d,
                    })
                })
                .collect(),
        );
    }

    if let Some(cert) = &certification {
        for run in &cert.per_setting {
            for b in run.branches.iter().filter(|b| !b.sufficient) {
                insufficient.push(format!(
                    "chsh setting {} branch {:?} has {} rounds",
                    run.j, b.branch, b.rounds
                ));
            }
        }
    }

    let inputs = VerdictInputs {
        sufficient: insufficient.is_empty() && correlation.is_sufficient(),
        repeatability: tests.repeatability.as_ref().map(|r| r.pass),
        epsilon: tests.epsilon.as_ref().map(|e| e.all_pass),
        chsh: certification.as_ref().map(|c| c.certified),
    };
    if !correlation.is_sufficient() && insufficient.is_empty() {
        insufficient.push("cycle sum unavailable".into());
    }
    Ok(ReportDocument {
        version: VERSION_TAG.to_string(),
        manifest: manifest.clone(),
        correlation,
        tests,
        certification,
        verdict: verdict(inputs),
        inputs,
        insufficient,
    })
}

/// Runs every setting and, if enabled, a separate CHSH block per setting.
pub fn evaluate_run(manifest: &ExperimentManifest) -> Result<Outcome> {
    manifest.validate()?;
    let family = family_of(manifest)?;
    let eng = engine::Engine::new(family.clone(), manifest.box_model.clone())?;
    let records = eng.run_all(manifest.runs_per_setting, manifest.seed)?;
    let (chsh_records, certification) = if manifest.enabled(TestKind::Chsh) {
        let rounds = manifest.chsh_rounds();
        let mut all = Vec::new();
        let mut runs = Vec::new();
        for j in 0..family.spec().setting_count() {
            let (recs, run) =
                bell::run_chsh(&family, j, &manifest.box_model, rounds, manifest.seed)?;
            all.extend(recs);
            runs.push(run);
        }
        (all, Some(certification_section(runs, None, rounds)))
    } else {
        (Vec::new(), None)
    };
    let report = build_report(manifest, &records, certification)?;
    Ok(Outcome {
        records,
        chsh_records,
        report,
    })
}

/// Interleaves contextuality and CHSH rounds; each round is CHSH with probability `certify_ratio`.
pub fn evaluate_certify(manifest: &ExperimentManifest) -> Result<Outcome> {
    manifest.validate()?;
    if !manifest.enabled(TestKind::Chsh) {
        return Err(ShellError::InvalidManifest(ManifestError {
            issues: vec![FieldIssue {
                field: "tests".into(),
                message: "certify requires the chsh test".into(),
            }],
        }));
    }
    let family = family_of(manifest)?;
    let eng = engine::Engine::new(family.clone(), manifest.box_model.clone())?;
    let mut records = Vec::new();
    let mut chsh_records = Vec::new();
    let mut runs = Vec::new();
    let mut chsh_total = 0;
    for j in 0..family.spec().setting_count() {
        let schedule = RunStream::derive(manifest.seed, manifest.n, j, "schedule");
        let plans = bell::certification_plan(&family, j)?;
        let ctx_stream = eng.setting_stream(manifest.seed, j);
        let chsh_stream = bell::chsh_stream(manifest.seed, manifest.n, j);
        let rounds: Vec<Round> = (0..manifest.runs_per_setting)
            .into_par_iter()
            .map(|k| {
                if schedule.run(k).uniform() < manifest.certify_ratio {
                    Ok(Round::Chsh(bell::chsh_round(
                        &plans,
                        &manifest.box_model,
                        &family,
                        j,
                        &chsh_stream,
                        k,
                    )?))
                } else {
                    Ok(Round::Context(eng.run(j, &ctx_stream, k)?))
                }
            })
            .collect::<Result<_>>()?;
        let mut these = Vec::new();
        for r in rounds {
            match r {
                Round::Chsh(c) => these.push(c),
                Round::Context(c) => records.push(c),
            }
        }
        chsh_total += these.len() as u64;
        runs.push(bell::summarize_chsh(
            &these,
            Some(&plans),
            j,
            manifest.box_model.kind(),
        ));
        chsh_records.extend(these);
    }
    let report = build_report(
        manifest,
        &records,
        Some(certification_section(
            runs,
            Some(manifest.certify_ratio),
            chsh_total,
        )),
    )?;
    Ok(Outcome {
        records,
        chsh_records,
        report,
    })
}

enum Round {
    Context(RunRecord),
    Chsh(ChshRecord),
}

/// One row of `summary.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub n: usize,
    pub j: usize,
    pub box_kind: BoxKind,
    pub runs_b0: u64,
    pub runs_b1: u64,
    pub corr_b0: Option<f64>,
    pub se_b0: Option<f64>,
    pub corr_b1: Option<f64>,
    pub se_b1: Option<f64>,
    pub contrast: Option<f64>,
    pub contrast_se: Option<f64>,
    pub variational_distance: Option<f64>,
    pub epsilon_pass: Option<bool>,
    pub chsh: Option<f64>,
    pub chsh_se: Option<f64>,
    pub verdict: Verdict,
}

pub fn summary_rows(report: &ReportDocument) -> Vec<SummaryRow> {
    report
        .correlation
        .settings
        .iter()
        .map(|s| {
            let chsh = report
                .certification
                .as_ref()
                .and_then(|c| c.per_setting.iter().find(|r| r.j == s.j))
                .and_then(|r| {
                    // Weakest branch.
                    r.branches.iter().filter_map(|b| b.value).min_by(|x, y| {
                        (x.value - 2.0 - SIGMA * x.se).total_cmp(&(y.value - 2.0 - SIGMA * y.se))
                    })
                });
            SummaryRow {
                n: report.correlation.n,
                j: s.j,
                box_kind: report.manifest.box_model.kind(),
                runs_b0: s.cells[0].total(),
                runs_b1: s.cells[1].total(),
                corr_b0: s.branch_correlators[0].map(|e| e.value),
                se_b0: s.branch_correlators[0].map(|e| e.se),
                corr_b1: s.branch_correlators[1].map(|e| e.value),
                se_b1: s.branch_correlators[1].map(|e| e.se),
                contrast: s.contrast.map(|e| e.value),
                contrast_se: s.contrast.map(|e| e.se),
                variational_distance: s.variational_distance,
                epsilon_pass: report
                    .tests
                    .epsilon
                    .as_ref()
                    .map(|e| e.per_setting[s.j].pass),
                chsh: chsh.map(|e| e.value),
                chsh_se: chsh.map(|e| e.se),
                verdict: report.verdict,
            }
        })
        .collect()
}

pub fn to_csv<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| ShellError::Io(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| ShellError::Io(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn to_jsonl<T: Serialize>(rows: &[T]) -> String {
    let mut out = String::new();
    for r in rows {
        out.push_str(&serde_json::to_string(r).expect("records serialize"));
        out.push('\n');
    }
    out
}

pub fn report_json(report: &ReportDocument) -> String {
    let mut s = serde_json::to_string_pretty(report).expect("report serializes");
    s.push('\n');
    s
}

/// Writes each file beside its target, then renames it into place.
fn write_atomically(dir: &Path, files: &[(&str, String)]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut staged = Vec::new();
    for (name, body) in files {
        let tmp = dir.join(format!(".{name}.partial"));
        let mut f = fs::File::create(&tmp)?;
        f.write_all(body.as_bytes())?;
        f.sync_all()?;
        staged.push((tmp, dir.join(name)));
    }
    for (tmp, target) in staged {
        fs::rename(tmp, target)?;
    }
    Ok(())
}

/// Persists records, report, summary and the manifest echo under `out_dir`.
pub fn persist(outcome: &Outcome) -> Result<()> {
    let m = &outcome.report.manifest;
    let mut files = vec![
        (MANIFEST_FILE, m.to_toml()),
        (RECORDS_FILE, to_jsonl(&outcome.records)),
        (REPORT_FILE, report_json(&outcome.report)),
        (SUMMARY_FILE, to_csv(&summary_rows(&outcome.report))?),
    ];
    if !outcome.chsh_records.is_empty() {
        files.push((CHSH_RECORDS_FILE, to_jsonl(&outcome.chsh_records)));
    }
    write_atomically(&m.out_dir, &files)
}

pub fn cmd_run(manifest: &ExperimentManifest) -> Result<Outcome> {
    let out = evaluate_run(manifest)?;
    persist(&out)?;
    Ok(out)
}

pub fn cmd_certify(manifest: &ExperimentManifest) -> Result<Outcome> {
    let out = evaluate_certify(manifest)?;
    persist(&out)?;
    Ok(out)
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text =
        fs::read_to_string(path).map_err(|e| ShellError::Io(format!("{}: {e}", path.display())))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| ShellError::Io(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}

/// Rebuilds the report from the files of a previous run.
pub fn cmd_report(dir: &Path) -> Result<ReportDocument> {
    let manifest = ExperimentManifest::load(&dir.join(MANIFEST_FILE))?;
    manifest.validate()?;
    let records: Vec<RunRecord> = read_jsonl(&dir.join(RECORDS_FILE))?;
    let chsh_path = dir.join(CHSH_RECORDS_FILE);
    let certification = if chsh_path.exists() {
        let chsh: Vec<ChshRecord> = read_jsonl(&chsh_path)?;
        let family = family_of(&manifest)?;
        let ratio = fs::read_to_string(dir.join(REPORT_FILE))
            .ok()
            .and_then(|s| serde_json::from_str::<ReportDocument>(&s).ok())
            .and_then(|r| r.certification)
            .and_then(|c| c.ratio);
        let mut runs = Vec::new();
        for j in 0..family.spec().setting_count() {
            let these: Vec<ChshRecord> = chsh.iter().filter(|r| r.j == j).copied().collect();
            let plans = bell::certification_plan(&family, j)?;
            runs.push(bell::summarize_chsh(
                &these,
                Some(&plans),
                j,
                manifest.box_model.kind(),
            ));
        }
        Some(certification_section(runs, ratio, chsh.len() as u64))
    } else {
        None
    };
    build_report(&manifest, &records, certification)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepAxis {
    N,
    Epsilon,
    #[serde(rename = "N")]
    Runs,
    A,
}

impl SweepAxis {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "n" => Some(SweepAxis::N),
            "epsilon" => Some(SweepAxis::Epsilon),
            "N" | "runs" => Some(SweepAxis::Runs),
            "a" => Some(SweepAxis::A),
            _ => None,
        }
    }
}

/// One row of a sweep table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis: SweepAxis,
    pub value: f64,
    pub n: Option<usize>,
    pub runs_per_setting: Option<u64>,
    pub epsilon: Option<f64>,
    pub cycle_sum: Option<f64>,
    pub cycle_se: Option<f64>,
    pub tsirelson_bound: Option<f64>,
    pub epsilon_all_pass: Option<bool>,
    pub detection_bound: Option<f64>,
    pub chsh_lower_bound: Option<f64>,
    pub chsh_grid_max: Option<f64>,
    pub verdict: Option<Verdict>,
    pub error: Option<String>,
}

impl SweepRow {
    fn empty(axis: SweepAxis, value: f64) -> Self {
        SweepRow {
            axis,
            value,
            n: None,
            runs_per_setting: None,
            epsilon: None,
            cycle_sum: None,
            cycle_se: None,
            tsirelson_bound: None,
            epsilon_all_pass: None,
            detection_bound: None,
            chsh_lower_bound: None,
            chsh_grid_max: None,
            verdict: None,
            error: None,
        }
    }
}

/// Angle steps used for the `a` axis grid maximum.
pub const SWEEP_GRID_STEPS: usize = 720;

fn sweep_cell(base: &ExperimentManifest, axis: SweepAxis, value: f64) -> Result<SweepRow> {
    let mut row = SweepRow::empty(axis, value);
    if axis == SweepAxis::A {
        if !(0.0..=1.0).contains(&value) {
            return Err(ShellError::InvalidArgument(format!(
                "a = {value} outside [0, 1]"
            )));
        }
        row.chsh_lower_bound = Some(bell::chsh_lower_bound(value));
        row.chsh_grid_max = Some(bell::grid_maximum(value, SWEEP_GRID_STEPS));
        return Ok(row);
    }
    let mut m = base.clone();
    match axis {
        SweepAxis::N => {
            if value.fract() != 0.0 || value < 0.0 {
                return Err(ShellError::InvalidArgument(format!(
                    "n = {value} is not a cycle length"
                )));
            }
            m.n = value as usize;
            m.parity = None;
        }
        SweepAxis::Epsilon => m.epsilon = value,
        SweepAxis::Runs => {
            if value.fract() != 0.0 || value < 1.0 {
                return Err(ShellError::InvalidArgument(format!(
                    "N = {value} is not a run count"
                )));
            }
            m.runs_per_setting = value as u64;
        }
        SweepAxis::A => unreachable!(),
    }
    // The sweep reports the contextuality statistics; CHSH is left to `certify`.
    m.tests.retain(|t| *t != TestKind::Chsh);
    if m.tests.is_empty() {
        m.tests.push(TestKind::Cycle);
    }
    let out = evaluate_run(&m)?;
    let r = &out.report;
    row.n = Some(m.n);
    row.runs_per_setting = Some(m.runs_per_setting);
    row.epsilon = Some(m.epsilon);
    row.cycle_sum = r.correlation.cycle_sum.map(|c| c.value);
    row.cycle_se = r.correlation.cycle_sum.map(|c| c.se);
    row.tsirelson_bound = tsirelson_bound(m.n).ok();
    row.epsilon_all_pass = r.tests.epsilon.as_ref().map(|e| e.all_pass);
    row.detection_bound = Some(detection_bound(m.runs_per_setting, m.epsilon));
    row.verdict = Some(r.verdict);
    Ok(row)
}

/// One summary row per value; failing cells carry their error and the sweep goes on.
pub fn cmd_sweep(
    base: &ExperimentManifest,
    axis: SweepAxis,
    values: &[f64],
) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(ShellError::InvalidArgument(
            "sweep needs at least one value".into(),
        ));
    }
    Ok(values
        .iter()
        .map(|&v| {
            sweep_cell(base, axis, v).unwrap_or_else(|e| {
                let mut row = SweepRow::empty(axis, v);
                row.error = Some(e.to_string());
                row
            })
        })
        .collect())
}

pub fn persist_sweep(dir: &Path, rows: &[SweepRow]) -> Result<()> {
    write_atomically(dir, &[(SWEEP_FILE, to_csv(rows)?)])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manifest(n: usize, runs: u64, kind: BoxKind) -> ExperimentManifest {
        ExperimentManifest::new(n, runs, 0.3, 42, BoxModel::from_kind(kind))
    }

    #[test]
    fn verdict_truth_table() {
        for mask in 0..8u8 {
            let [r, e, c] = [mask & 1 != 0, mask & 2 != 0, mask & 4 != 0];
            let v = verdict(VerdictInputs {
                sufficient: true,
                repeatability: Some(r),
                epsilon: Some(e),
                chsh: Some(c),
            });
            let expected = if r && e && c {
                Verdict::QuantumContextual
            } else {
                Verdict::ClassicalExplained
            };
            assert_eq!(v, expected, "mask {mask:03b}");
            let thin = verdict(VerdictInputs {
                sufficient: false,
                repeatability: Some(r),
                epsilon: Some(e),
                chsh: Some(c),
            });
            assert_eq!(thin, Verdict::Inconclusive);
        }
        let no_eps = VerdictInputs {
            sufficient: true,
            repeatability: Some(true),
            epsilon: None,
            chsh: None,
        };
        assert_eq!(verdict(no_eps), Verdict::Inconclusive);
    }

    #[test]
    fn manifest_round_trip() {
        let text = r#"
n = 5
runs_per_setting = 1000
epsilon = 0.3
seed = 42
tests = ["cycle", "epsilon", "no-disturbance"]
out_dir = "out"

[box]
kind = "automaton"
closing = "literal"
"#;
        let m = ExperimentManifest::from_toml(text).unwrap();
        assert_eq!(m.box_model.kind(), BoxKind::Automaton);
        assert!(m.validate().is_ok());
        let again = ExperimentManifest::from_toml(&m.to_toml()).unwrap();
        assert_eq!(again, m);
    }

    #[test]
    fn field_level_errors() {
        let mut m = manifest(13, 0, BoxKind::Honest);
        m.epsilon = 0.0;
        m.certify_ratio = 1.0;
        m.tests.clear();
        let err = m.validate().unwrap_err();
        let fields: Vec<&str> = err.issues.iter().map(|i| i.field.as_str()).collect();
        assert_eq!(fields, ["n", "runs_per_setting", "tests", "certify_ratio"]);
        let mut m = manifest(4, 10, BoxKind::Honest);
        m.epsilon = 0.9;
        m.parity = Some(Parity::Odd);
        let fields: Vec<String> = m
            .validate()
            .unwrap_err()
            .issues
            .into_iter()
            .map(|i| i.field)
            .collect();
        assert_eq!(fields, ["parity", "epsilon"]);
        assert!(ExperimentManifest::from_toml("n = 5\nbogus = 1").is_err());
    }

    #[test]
    fn invalid_manifest_writes_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = manifest(5, 100, BoxKind::Honest);
        m.out_dir = dir.path().join("out");
        m.epsilon = 5.0;
        assert!(matches!(cmd_run(&m), Err(ShellError::InvalidManifest(_))));
        assert!(!m.out_dir.exists());
    }

    #[test]
    fn tiny_runs_are_inconclusive() {
        let r = evaluate_run(&manifest(5, 10, BoxKind::Honest))
            .unwrap()
            .report;
        assert_eq!(r.verdict, Verdict::Inconclusive);
        assert!(!r.insufficient.is_empty());
    }

    #[test]
    fn outputs_are_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let mut bodies = Vec::new();
        for sub in ["a", "b"] {
            let mut m = manifest(5, 400, BoxKind::Honest);
            m.out_dir = dir.path().join(sub);
            cmd_run(&m).unwrap();
            let files: Vec<Vec<u8>> = [RECORDS_FILE, CHSH_RECORDS_FILE, SUMMARY_FILE]
                .iter()
                .map(|f| fs::read(m.out_dir.join(f)).unwrap())
                .collect();
            bodies.push(files);
        }
        assert_eq!(bodies[0], bodies[1]);
    }

    #[test]
    fn report_echoes_manifest_and_rebuilds() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = manifest(4, 300, BoxKind::Automaton);
        m.out_dir = dir.path().to_path_buf();
        let out = cmd_run(&m).unwrap();
        let text = fs::read_to_string(dir.path().join(REPORT_FILE)).unwrap();
        let doc: ReportDocument = serde_json::from_str(&text).unwrap();
        assert_eq!(doc.manifest, m);
        assert_eq!(doc.version, VERSION_TAG);
        let rebuilt = cmd_report(dir.path()).unwrap();
        assert_eq!(rebuilt.verdict, out.report.verdict);
        assert_eq!(rebuilt.correlation, out.report.correlation);
        let first = fs::read_to_string(dir.path().join(RECORDS_FILE)).unwrap();
        let line: serde_json::Value = serde_json::from_str(first.lines().next().unwrap()).unwrap();
        let keys: Vec<&str> = line
            .as_object()
            .unwrap()
            .keys()
            .map(String::as_str)
            .collect();
        for k in [
            "n",
            "parity",
            "j",
            "q0",
            "q1",
            "b",
            "box_kind",
            "rng_stream_id",
            "run_index",
        ] {
            assert!(keys.contains(&k));
        }
        assert_eq!(keys.len(), 9);
    }

    #[test]
    fn certify_ratio_enforced() {
        let mut m = manifest(5, 100, BoxKind::Honest);
        m.certify_ratio = 0.0;
        assert!(evaluate_certify(&m).is_err());
        let mut m = manifest(5, 100, BoxKind::Honest);
        m.tests = vec![TestKind::Epsilon];
        assert!(evaluate_certify(&m).is_err());
    }

    #[test]
    fn sweep_rows() {
        let base = manifest(5, 200, BoxKind::Honest);
        assert!(cmd_sweep(&base, SweepAxis::N, &[]).is_err());
        let values: Vec<f64> = (0..=10).map(|k| k as f64 / 10.0).collect();
        let rows = cmd_sweep(&base, SweepAxis::A, &values).unwrap();
        for r in &rows {
            let a = r.value;
            let closed = 1.0 + a.sqrt() - a + (2.0 - a).sqrt();
            assert!((r.chsh_lower_bound.unwrap() - closed).abs() < 1e-10);
        }
        let rows = cmd_sweep(&base, SweepAxis::N, &[4.0, 13.0, 5.5]).unwrap();
        assert!(rows[0].error.is_none());
        assert!(rows[1].error.is_some() && rows[2].error.is_some());
        assert!(SweepAxis::parse("N") == Some(SweepAxis::Runs));
    }
}
