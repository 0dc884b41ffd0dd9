mod common;

use std::process::Command;

use mbisac::baselines::SchemeId;
use mbisac::harness::*;
use mbisac::model::SystemConfig;

fn small() -> SystemConfig {
    SystemConfig::default().with_bands(2)
}

const QUICK: [SchemeId; 2] = [SchemeId::Proposed, SchemeId::UpperBound];

#[test]
fn trials_are_reproducible() {
    let cfg = small();
    let a = run_trial(&cfg, 0, 17, &QUICK).unwrap();
    let b = run_trial(&cfg, 0, 17, &QUICK).unwrap();
    assert_eq!(a.without_timing(), b.without_timing());
    assert!(a.all_completed());
    assert!(a.dominance_ok);
}

#[test]
fn thread_count_does_not_change_results() {
    let cfg = small();
    let one = run_montecarlo(&cfg, 3, 5, &QUICK, Some(1)).unwrap();
    let two = run_montecarlo(&cfg, 3, 5, &QUICK, Some(2)).unwrap();
    let strip = |m: &MonteCarloResult| m.trials.iter().map(TrialResult::without_timing).collect::<Vec<_>>();
    assert_eq!(strip(&one), strip(&two));
    let seeds: Vec<u64> = one.trials.iter().map(|t| t.seed).collect();
    assert_eq!(seeds, (0..3).map(|i| trial_seed(5, i)).collect::<Vec<_>>());
}

#[test]
fn single_trial_has_no_stderr() {
    let mc = run_montecarlo(&small(), 1, 3, &QUICK, None).unwrap();
    for st in mc.stats() {
        assert_eq!(st.completed, 1);
        assert!(st.stderr_sr_bits.is_none());
    }
    assert!(run_montecarlo(&small(), 0, 3, &QUICK, None).is_err());
}

#[test]
fn csv_and_json_outputs() {
    let mc = run_montecarlo(&small(), 2, 4, &QUICK, None).unwrap();
    let mut csv = Vec::new();
    mc.write_csv(&mut csv).unwrap();
    let csv = String::from_utf8(csv).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], TRIALS_CSV_HEADER);
    assert_eq!(lines.len(), 1 + 2 * QUICK.len());
    assert!(lines[1..].iter().all(|l| l.split(',').count() == 9));

    let mut js = Vec::new();
    mc.write_json_lines(&mut js).unwrap();
    let parsed: Vec<TrialResult> = String::from_utf8(js)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(parsed, mc.trials);
}

#[test]
fn failures_are_recorded_not_raised() {
    let mut cfg = small();
    cfg.r_min_bps = 1e12;
    cfg.solver.max_feasibility_iters = 3;
    let t = run_trial(&cfg, 0, 1, &QUICK).unwrap();
    let rec = t.record(SchemeId::Proposed).unwrap();
    assert!(rec.report.is_none());
    assert!(rec.failure.as_deref().unwrap().contains("infeasible"));
    assert!(t.record(SchemeId::UpperBound).unwrap().report.is_some());
    assert!(!t.all_completed());
}

#[test]
fn sweep_grid_validated_and_ordered() {
    let cfg = small();
    for bad in [vec![], vec![0.1, 0.1], vec![0.2, 0.1], vec![-1.0]] {
        assert!(sweep_power(&cfg, &bad, 1, 1, &QUICK, None).is_err());
    }
    let sw = sweep_power(&cfg, &[0.01, 0.1], 2, 1, &[SchemeId::UpperBound], None).unwrap();
    assert!(sw.all_completed);
    assert_eq!(sw.powers, vec![0.01, 0.1]);
    assert!(sw.is_monotone(SchemeId::UpperBound, 0.0));
    let mut csv = Vec::new();
    sw.write_csv(&mut csv).unwrap();
    assert!(String::from_utf8(csv).unwrap().starts_with(SWEEP_CSV_HEADER));
}

#[test]
fn convergence_csv_rows() {
    let traces = convergence_trace(&small(), 2, &[SchemeId::Proposed, SchemeId::UpperBound]).unwrap();
    assert_eq!(traces.len(), 1);
    let mut out = Vec::new();
    write_convergence_csv(&traces, &mut out).unwrap();
    let text = String::from_utf8(out).unwrap();
    assert!(text.lines().skip(1).all(|l| l.starts_with("proposed,")));
    assert_eq!(text.lines().count(), 1 + traces[0].1.rows.len());
}

#[test]
fn cli_round_trip() {
    let exe = env!("CARGO_BIN_EXE_mbisac");
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("cfg.toml");
    let out = Command::new(exe).args(["defaults", "--out"]).arg(&cfg_path).output().unwrap();
    assert!(out.status.success());
    let cfg = SystemConfig::load(&cfg_path).unwrap();
    assert_eq!(cfg, SystemConfig::default());

    let csv_path = dir.path().join("trial.csv");
    let out = Command::new(exe)
        .args(["trial", "--bands", "1", "--schemes", "proposed,upper-bound", "--seed", "3", "--config"])
        .arg(&cfg_path)
        .arg("--out")
        .arg(&csv_path)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(&csv_path).unwrap();
    assert_eq!(text.lines().count(), 3);

    let bad = Command::new(exe).args(["trial", "--schemes", "bs4-only"]).output().unwrap();
    assert_eq!(bad.status.code(), Some(1));
}
