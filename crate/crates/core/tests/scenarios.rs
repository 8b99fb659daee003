//! Runs every checked-in scenario fixture and holds it to its own
//! `[expect]` block: verdict fields, evidence replay, report shape.

use refdel::harness::{run_scenario, Scenario};

fn fixture_dir() -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/scenarios")
}

#[test]
fn every_fixture_scenario_comes_out_as_declared() {
    let mut paths: Vec<_> = std::fs::read_dir(fixture_dir())
        .expect("fixtures/scenarios exists")
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "cfg"))
        .collect();
    paths.sort();
    assert!(paths.len() >= 10, "expected a full fixture set, found {}", paths.len());

    for path in paths {
        let name = path.file_name().unwrap().to_string_lossy().into_owned();
        let scenario = Scenario::load(&path).unwrap_or_else(|e| panic!("{name}: {e}"));
        let out = run_scenario(&scenario).unwrap_or_else(|e| panic!("{name}: {e}"));
        assert!(out.passed(), "{name}: {:?}\n{}", out.mismatches, out.report);
        assert!(out.report.ends_with("expect = ok\n"), "{name}");
        assert!(out.report.contains("evidence = verified\n"), "{name}");
    }
}

#[test]
fn fixture_reports_are_reproducible() {
    let path = fixture_dir().join("wrong_matmul_output.cfg");
    let scenario = Scenario::load(&path).unwrap();
    let a = run_scenario(&scenario).unwrap();
    let b = run_scenario(&scenario).unwrap();
    assert_eq!(a.report, b.report);
    assert_eq!(a.transcript, b.transcript);
}
