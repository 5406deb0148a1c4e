//! Runs the property suite used by `architts verify`, then repeats the CTC
//! check with a deliberately broken recursion to show it is caught.

use architts::cli::verify::{off_by_one_ctc_loss, run_verify, run_verify_with};

pub fn main() {
    let report = run_verify(0);
    for c in &report.checks {
        println!("{} {:<20} {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    assert!(report.passed);
    let broken = run_verify_with(0, off_by_one_ctc_loss);
    let ctc = broken.checks.iter().find(|c| c.name == "ctc_oracle").expect("ctc check present");
    println!("with an off-by-one CTC: {} (seed {:?})", ctc.detail, ctc.failing_seed);
    assert!(!ctc.passed);
}
