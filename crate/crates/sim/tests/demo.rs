use std::path::{Path, PathBuf};

use isac_core::callflow::{AbortReason, TaskOutcome};
use isac_core::sdsf::Coverage;
use isac_sim::config::parse_config_str;
use isac_sim::trace::write_trace;
use isac_sim::{demo_callflow, Config};

fn golden(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name)
}

fn trace_text(report: &isac_sim::DemoReport) -> String {
    let mut buf = Vec::new();
    write_trace(&report.trace, &mut buf).unwrap();
    String::from_utf8(buf).unwrap()
}

/// Compares with the checked-in trace; `ISAC_BLESS=1` rewrites it.
fn assert_golden(name: &str, text: &str) {
    let path = golden(name);
    if std::env::var_os("ISAC_BLESS").is_some() {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        std::fs::write(&path, text).unwrap();
    }
    let want = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    assert_eq!(text, want, "trace differs from {}", path.display());
}

fn variants(report: &isac_sim::DemoReport) -> Vec<(u8, &str)> {
    report.trace.iter().map(|e| (e.step, e.variant.as_str())).collect()
}

#[test]
fn partial_availability_golden() {
    let dir = tempfile::tempdir().unwrap();
    let report = demo_callflow(&Config::default(), &dir.path().join("sdsf.log")).unwrap();
    assert!(report.fresh_store);
    let TaskOutcome::Completed { availability, .. } = &report.outcome else {
        panic!("{:?}", report.outcome)
    };
    assert_eq!(*availability, Some(Coverage::Partial));
    let mut families: Vec<u8> = report.trace.iter().map(|e| e.step).collect();
    families.dedup();
    assert_eq!(families, (1..=16).collect::<Vec<u8>>());
    assert_golden("partial.jsonl", &trace_text(&report));
}

#[test]
fn policy_deny_golden() {
    let cfg = parse_config_str("[policy]\nprohibited_areas = [[50, 50, 70, 70]]\n", Path::new(".")).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let report = demo_callflow(&cfg, &dir.path().join("sdsf.log")).unwrap();
    assert!(matches!(
        report.outcome,
        TaskOutcome::Aborted {
            step: 5,
            reason: AbortReason::PolicyDenied(_),
            ..
        }
    ));
    assert!(variants(&report).iter().all(|(_, v)| *v != "SensingDataRequest"));
    assert_eq!(report.trace.last().unwrap().step, 5);
    assert_golden("deny.jsonl", &trace_text(&report));
}

#[test]
fn second_run_uses_the_archive_golden() {
    let dir = tempfile::tempdir().unwrap();
    let store = dir.path().join("sdsf.log");
    let cfg = Config::default();
    let first = demo_callflow(&cfg, &store).unwrap();
    let second = demo_callflow(&cfg, &store).unwrap();
    assert!(!second.fresh_store);
    let TaskOutcome::Completed {
        availability, result, ..
    } = &second.outcome
    else {
        panic!("{:?}", second.outcome)
    };
    assert_eq!(*availability, Some(Coverage::Exists));
    assert!(second.trace.iter().all(|e| !e.receiver.starts_with("SE-")));
    assert!(variants(&second).iter().all(|(s, _)| !(9..=11).contains(s)));
    let TaskOutcome::Completed { result: r1, .. } = &first.outcome else {
        panic!()
    };
    assert_eq!(result.metrics, r1.metrics);
    assert_golden("exists.jsonl", &trace_text(&second));
}

#[test]
fn demo_is_deterministic() {
    let run = || {
        let dir = tempfile::tempdir().unwrap();
        let r = demo_callflow(&Config::default(), &dir.path().join("sdsf.log")).unwrap();
        let log = std::fs::read(dir.path().join("sdsf.log")).unwrap();
        (trace_text(&r), log)
    };
    assert_eq!(run(), run());
}

#[test]
fn without_consent_the_store_is_not_consulted() {
    let cfg = parse_config_str("[demo]\nconsent = false\n", Path::new(".")).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let report = demo_callflow(&cfg, &dir.path().join("sdsf.log")).unwrap();
    let v = variants(&report);
    assert!(!v.iter().any(|(_, x)| *x == "AvailabilityQuery" || *x == "HistoricalDataRequest"));
    assert!(v.iter().any(|(_, x)| *x == "SensingDataRequest"));
}

#[test]
fn archived_sweep_rejects_infeasible_kpi() {
    let dir = tempfile::tempdir().unwrap();
    let table = dir.path().join("sweep.csv");
    std::fs::write(&table, "g,g_det,pd_mean,pd_std,fa_mean,fa_std,n\n2,3,0.9,0.01,18,0.5,50\n").unwrap();
    let text = format!("[demo]\npd_min = 0.95\nkpi_table = {:?}\n", table.display().to_string());
    let cfg = parse_config_str(&text, dir.path()).unwrap();
    let report = demo_callflow(&cfg, &dir.path().join("sdsf.log")).unwrap();
    assert!(matches!(
        report.outcome,
        TaskOutcome::Aborted {
            step: 3,
            reason: AbortReason::KpiInfeasible,
            ..
        }
    ));
}
