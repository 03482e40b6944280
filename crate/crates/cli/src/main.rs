//! `dcc`: runs, sweeps, certifies and re-reports delayed-choice contextuality experiments.
//!
//! Exit codes: 0 when a verdict is produced, 1 on other errors, 2 for an
//! invalid manifest and 3 when the data are insufficient.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use delayed_choice::boxes::{BoxKind, BoxModel};
use delayed_choice::shell::{
    self, ExperimentManifest, OutputFormat, ReportDocument, ShellError, SweepAxis, TestKind,
};

#[derive(Parser)]
#[command(
    name = "dcc",
    version,
    about = "Delayed-choice n-cycle contextuality experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every setting and write records, report and summary.
    Run(ExperimentArgs),
    /// Interleave CHSH certification rounds with contextuality runs.
    Certify(ExperimentArgs),
    /// Repeat an experiment along one parameter axis.
    Sweep {
        #[command(flatten)]
        exp: ExperimentArgs,
        /// One of n, epsilon, N, a.
        #[arg(long)]
        axis: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',')]
        values: Vec<f64>,
    },
    /// Rebuild the report from a previous run directory.
    Report {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, value_parser = parse_format)]
        format: Option<OutputFormat>,
    },
}

#[derive(Args)]
struct ExperimentArgs {
    /// TOML manifest; flags override its fields.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    n: Option<usize>,
    /// Runs per setting.
    #[arg(long, visible_alias = "N")]
    runs: Option<u64>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long = "box")]
    box_kind: Option<BoxKind>,
    /// Comma-separated subset of cycle, epsilon, repeatability, no-disturbance, variational-distance, chsh.
    #[arg(long, value_delimiter = ',', value_parser = parse_test)]
    tests: Option<Vec<TestKind>>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    certify_ratio: Option<f64>,
    #[arg(long, value_parser = parse_format)]
    format: Option<OutputFormat>,
}

fn parse_test(s: &str) -> Result<TestKind, String> {
    TestKind::parse(s).ok_or_else(|| format!("unknown test `{s}`"))
}

fn parse_format(s: &str) -> Result<OutputFormat, String> {
    match s {
        "json" => Ok(OutputFormat::Json),
        "csv" => Ok(OutputFormat::Csv),
        _ => Err(format!("unknown format `{s}`")),
    }
}

impl ExperimentArgs {
    fn manifest(&self) -> Result<ExperimentManifest, ShellError> {
        let mut m = match &self.manifest {
            Some(path) => ExperimentManifest::load(path)?,
            None => ExperimentManifest::new(5, 10_000, 0.3, 42, BoxModel::Honest),
        };
        if let Some(n) = self.n {
            m.n = n;
            m.parity = None;
        }
        if let Some(r) = self.runs {
            m.runs_per_setting = r;
        }
        if let Some(e) = self.epsilon {
            m.epsilon = e;
        }
        if let Some(s) = self.seed {
            m.seed = s;
        }
        if let Some(k) = self.box_kind {
            m.box_model = BoxModel::from_kind(k);
        }
        if let Some(t) = &self.tests {
            m.tests = t.clone();
        }
        if let Some(d) = &self.out_dir {
            m.out_dir = d.clone();
        }
        if let Some(r) = self.certify_ratio {
            m.certify_ratio = r;
        }
        if let Some(f) = self.format {
            m.format = f;
        }
        m.validate()?;
        Ok(m)
    }
}

fn print_report(report: &ReportDocument, format: OutputFormat) -> anyhow::Result<()> {
    match format {
        OutputFormat::Json => print!("{}", shell::report_json(report)),
        OutputFormat::Csv => print!("{}", shell::to_csv(&shell::summary_rows(report))?),
    }
    eprintln!("{}", report.verdict_line());
    for line in &report.insufficient {
        eprintln!("insufficient: {line}");
    }
    Ok(())
}

fn exit_for(report: &ReportDocument) -> ExitCode {
    if report.is_insufficient() {
        ExitCode::from(3)
    } else {
        ExitCode::SUCCESS
    }
}

fn execute(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::Run(args) => {
            let m = args.manifest()?;
            let out = shell::cmd_run(&m)?;
            print_report(&out.report, m.format)?;
            Ok(exit_for(&out.report))
        }
        Command::Certify(args) => {
            let m = args.manifest()?;
            let out = shell::cmd_certify(&m)?;
            print_report(&out.report, m.format)?;
            Ok(exit_for(&out.report))
        }
        Command::Sweep { exp, axis, values } => {
            let m = exp.manifest()?;
            let axis = SweepAxis::parse(&axis).ok_or_else(|| {
                ShellError::InvalidArgument(format!("unknown sweep axis `{axis}`"))
            })?;
            let rows = shell::cmd_sweep(&m, axis, &values)?;
            shell::persist_sweep(&m.out_dir, &rows)?;
            match m.format {
                OutputFormat::Csv => print!("{}", shell::to_csv(&rows)?),
                OutputFormat::Json => println!("{}", serde_json_rows(&rows)),
            }
            for r in rows.iter().filter(|r| r.error.is_some()) {
                eprintln!(
                    "cell {} failed: {}",
                    r.value,
                    r.error.as_deref().unwrap_or_default()
                );
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Report { out_dir, format } => {
            let report = shell::cmd_report(&out_dir)
                .with_context(|| format!("reading {}", out_dir.display()))?;
            print_report(&report, format.unwrap_or(report.manifest.format))?;
            Ok(exit_for(&report))
        }
    }
}

fn serde_json_rows(rows: &[shell::SweepRow]) -> String {
    shell::to_jsonl(rows).trim_end().to_string()
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            match e.downcast_ref::<ShellError>() {
                Some(ShellError::InvalidManifest(_)) => ExitCode::from(2),
                Some(ShellError::Engine(
                    delayed_choice::engine::EngineError::InsufficientData(_),
                )) => ExitCode::from(3),
                _ => ExitCode::from(1),
            }
        }
    }
}
