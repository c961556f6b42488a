//! Command-line front end: run scenarios, re-analyze recorded logs, fit
//! polarization compensation, and reshape reports.
//!
//! Exit codes tell failure modes apart for scripting: 2 for configuration
//! problems, 3 when no pulse lock was found, 4 when the run finished but no
//! positive key length remained, 1 for anything else.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use qkdlab::scenario::{self, PipelineError, RunReport, Scenario};

#[derive(Parser)]
#[command(name = "qkdlab", version, about = "Free-space QKD link simulation and analysis")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a scenario end to end and leave the session records in a directory.
    ///
    /// SCENARIO is a TOML file, or the literal `drive-by` for the bundled
    /// drive-by session.
    Simulate {
        scenario: String,
        /// Run directory (created; existing files are overwritten)
        #[arg(long)]
        out: PathBuf,
        /// Master seed, overriding the scenario file
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Analyze a recorded detection-event log.
    ///
    /// The log's directory must hold the scenario copy, the event metadata
    /// and the transmitter's pulse log, as written by `simulate`.
    Analyze {
        events: PathBuf,
        /// Trajectory CSV replacing the recorded one
        #[arg(long)]
        traj: Option<PathBuf>,
        /// Output directory for the report and series
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit a compensation waveplate stack against a tomography counts file.
    Compensate {
        counts: PathBuf,
        /// Output CSV with the stack angles and predicted error rates
        #[arg(long)]
        out: PathBuf,
    },
    /// Print a run report, as recorded or flattened to CSV.
    Report {
        report: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Json)]
        format: Format,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Csv,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                PipelineError::Config(_) => ExitCode::from(2),
                PipelineError::NoLock(_) => ExitCode::from(3),
                _ => ExitCode::FAILURE,
            }
        }
    }
}

fn run(cmd: Cmd) -> Result<ExitCode, PipelineError> {
    match cmd {
        Cmd::Simulate { scenario, out, seed } => {
            let mut sc = if scenario == "drive-by" {
                Scenario::drive_by()
            } else {
                Scenario::from_path(Path::new(&scenario))?
            };
            if let Some(seed) = seed {
                sc.seed = Some(seed);
            }
            let report = scenario::simulate(&sc, &out)?;
            print_summary(&report, &out);
            Ok(key_exit(&report))
        }
        Cmd::Analyze { events, traj, out } => {
            let report = scenario::analyze(&events, traj.as_deref(), &out)?;
            print_summary(&report, &out);
            Ok(key_exit(&report))
        }
        Cmd::Compensate { counts, out } => {
            let summary = scenario::compensate(&counts, &out)?;
            println!(
                "stack {:.2} / {:.2} / {:.2} deg",
                summary.angles.theta1_deg, summary.angles.theta2_deg, summary.angles.theta3_deg
            );
            println!(
                "predicted error {:.2}% before, {:.2}% after",
                100.0 * summary.pre_qber,
                100.0 * summary.post_qber
            );
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Report { report, format } => {
            let text = std::fs::read_to_string(&report)
                .map_err(|e| PipelineError::Config(format!("{}: {e}", report.display())))?;
            let parsed = RunReport::from_json(&text)?;
            match format {
                Format::Json => print!("{}", parsed.to_json()),
                Format::Csv => print_report_csv(&parsed),
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn key_exit(report: &RunReport) -> ExitCode {
    if report.secure_bits == 0 {
        ExitCode::from(4)
    } else {
        ExitCode::SUCCESS
    }
}

fn print_summary(report: &RunReport, out: &Path) {
    println!(
        "{}: retained {} of {} s, loss {:.1} dB",
        report.scenario,
        report.retained_seconds.len(),
        report.seconds_total,
        report.loss_db
    );
    println!(
        "sifted {} bits, signal QBER {:.2}%, single-photon error bound {:.2}%",
        report.sifted_bits,
        100.0 * report.qber_signal,
        100.0 * report.e1_upper
    );
    println!("secure {} bits ({:.1} bit/s)", report.secure_bits, report.key_rate_bps);
    for w in &report.warnings {
        println!("warning: {w}");
    }
    println!("report: {}", out.join(scenario::REPORT_FILE).display());
}

/// Top-level report fields as `field,value` rows; lists joined with spaces.
fn print_report_csv(report: &RunReport) {
    let value = serde_json::to_value(report).expect("report serializes");
    println!("field,value");
    for (k, v) in value.as_object().expect("report is an object") {
        let rendered = match v {
            serde_json::Value::String(s) => s.clone(),
            serde_json::Value::Array(items) => items
                .iter()
                .map(render_scalar)
                .collect::<Vec<_>>()
                .join(" "),
            serde_json::Value::Object(map) => map
                .values()
                .map(render_scalar)
                .collect::<Vec<_>>()
                .join(" "),
            other => render_scalar(other),
        };
        println!("{k},{}", csv_escape(&rendered));
    }
}

fn render_scalar(v: &serde_json::Value) -> String {
    match v {
        serde_json::Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

fn csv_escape(field: &str) -> String {
    if field.contains([',', '"', '\n']) {
        format!("\"{}\"", field.replace('"', "\"\""))
    } else {
        field.to_string()
    }
}
