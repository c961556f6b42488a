//! End-to-end runs of the scenario pipeline on small, fast configurations.

use std::fs;
use std::path::Path;

use qkdlab::scenario::{self, PipelineError, Scenario, EVENTS_FILE, REPORT_FILE};

/// Noise-free bench link: no background, no jitter, no attenuation, ideal
/// states. Everything the receiver sees must decode perfectly.
const BENCH: &str = r#"
duration_s = 0.02
seed = 7

[source]
pulse_rate_hz = 1.0e7

[trajectory]
kind = "straight-pass"
standoff_m = 650.0
road_length_m = 0.0
speed_mps = 0.0
samples = 2

[loss]
mode = "constant"
constant_db = 0.0

[filter]
min_counts_per_s = 0
"#;

fn bench_scenario() -> Scenario {
    Scenario::from_toml_str(BENCH).unwrap()
}

#[test]
fn noise_free_bench_link_decodes_without_errors() {
    let dir = tempfile::tempdir().unwrap();
    let report = scenario::simulate(&bench_scenario(), dir.path()).unwrap();

    assert_eq!(report.qber_signal, 0.0);
    assert_eq!(report.qber_decoy, 0.0);
    assert_eq!(report.background_yield, 0.0);
    assert_eq!(report.retained_seconds, vec![0]);
    assert!(report.warnings.is_empty(), "{:?}", report.warnings);

    // Flight time fully modeled, so the lock sits at the slot boundary.
    assert!(report.phase_ps.abs() < 50.0, "phase {}", report.phase_ps);
    assert!(report.phase_contrast > 100.0);
    assert_eq!(report.rejected_events, 0);

    // Sifting keeps about half of the raw detections (basis agreement).
    let ratio = report.sifted_bits as f64 / report.raw_bits as f64;
    assert!((0.45..0.55).contains(&ratio), "sift ratio {ratio}");

    // With a zero error estimate the syndrome stage sends nothing; only the
    // verification digest leaks.
    assert_eq!(report.ec_efficiency, 0.0);
    assert_eq!(report.leaked_bits, 50);
    assert!(report.secure_bits > 0);
    assert_eq!(report.secure_key_hex.len(), (report.secure_bits as usize).div_ceil(4));
}

#[test]
fn calibrated_source_shows_its_intrinsic_error_rate() {
    let mut sc = bench_scenario();
    sc.source.states =
        qkdlab::scenario::StatesSpec::Calibrated { purity: 1.0, fidelity: 0.95 };
    let dir = tempfile::tempdir().unwrap();
    let report = scenario::simulate(&sc, dir.path()).unwrap();
    assert!(
        (0.035..0.065).contains(&report.qber_signal),
        "qber {}",
        report.qber_signal
    );
}

#[test]
fn reanalysis_of_a_run_reproduces_the_report_byte_for_byte() {
    let run = tempfile::tempdir().unwrap();
    let again = tempfile::tempdir().unwrap();
    scenario::simulate(&bench_scenario(), run.path()).unwrap();
    scenario::analyze_run(run.path(), again.path()).unwrap();

    for name in [REPORT_FILE, "counts.csv", "tof.csv", "compensation.csv", "deviation.csv"] {
        let a = fs::read(run.path().join(name)).unwrap();
        let b = fs::read(again.path().join(name)).unwrap();
        assert_eq!(a, b, "{name} differs between run and re-analysis");
    }
}

#[test]
fn identical_seeds_give_identical_event_logs() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    scenario::simulate(&bench_scenario(), a.path()).unwrap();
    scenario::simulate(&bench_scenario(), b.path()).unwrap();
    for name in [EVENTS_FILE, "truth.csv", "tomo.csv", REPORT_FILE] {
        assert_eq!(
            fs::read(a.path().join(name)).unwrap(),
            fs::read(b.path().join(name)).unwrap(),
            "{name} differs between identical runs"
        );
    }
}

#[test]
fn truncated_event_log_is_analyzed_up_to_the_cut() {
    let run = tempfile::tempdir().unwrap();
    let full = scenario::simulate(&bench_scenario(), run.path()).unwrap();

    let events = run.path().join(EVENTS_FILE);
    let bytes = fs::read(&events).unwrap();
    fs::write(&events, &bytes[..bytes.len() * 2 / 3]).unwrap();

    let out = run.path().join("out");
    let report = scenario::analyze_run(run.path(), &out).unwrap();
    assert!(
        report.warnings.iter().any(|w| w.contains("mid-record")),
        "{:?}",
        report.warnings
    );
    assert!(report.raw_bits < full.raw_bits);
    assert_eq!(report.qber_signal, 0.0);
    assert!(out.join(REPORT_FILE).exists());
}

#[test]
fn background_only_link_reports_no_lock_and_leaves_no_files() {
    let mut sc = Scenario::from_toml_str(
        r#"
        duration_s = 0.5
        seed = 9
        [source]
        pulse_rate_hz = 1.0e6
        [detector]
        background_rate_hz = 2.0e5
        [trajectory]
        kind = "straight-pass"
        standoff_m = 650.0
        road_length_m = 0.0
        speed_mps = 0.0
        samples = 2
        [loss]
        mode = "constant"
        constant_db = 300.0
        [filter]
        min_counts_per_s = 0
        "#,
    )
    .unwrap();
    sc.name = "background-only".into();

    let parent = tempfile::tempdir().unwrap();
    let dir = parent.path().join("run");
    let err = scenario::simulate(&sc, &dir).unwrap_err();
    assert!(matches!(err, PipelineError::NoLock(_)), "{err}");
    assert!(!dir.exists(), "failed run must not leave a partial directory");
}

#[test]
fn analysis_refuses_a_directory_without_the_scenario_record() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join(EVENTS_FILE), "timestamp_ps,channel\n100,0\n").unwrap();
    let err = scenario::analyze_run(dir.path(), Path::new("/tmp/nowhere-out")).unwrap_err();
    assert!(matches!(err, PipelineError::Config(_)), "{err}");
}
