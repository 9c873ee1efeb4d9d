//! The built-in self-test suite used by the CLI gate.

#[test]
fn every_selftest_check_passes() {
    let checks = salu_core::selftest::run_all();
    for c in &checks {
        println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    assert!(checks.len() >= 12);
    assert!(checks.iter().all(|c| c.passed));
}
