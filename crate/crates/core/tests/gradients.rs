mod common;

use common::gradsuite::{cases, check_case, stage2_loss_case};

#[test]
fn every_operation_passes_finite_differences() {
    for (i, case) in cases().iter().enumerate() {
        let report = check_case(case, 10, 100 + i as u64);
        let worst = report.worst().map(|w| w.name.clone()).unwrap_or_default();
        assert!(
            report.passed(),
            "{}: rel error {:.3e} at {worst}",
            case.name,
            report.max_rel_error()
        );
        assert!(report.checked() > 0, "{}: nothing checked", case.name);
    }
}

#[test]
fn stage2_loss_passes_finite_differences() {
    let report = check_case(&stage2_loss_case(), 10, 7);
    let worst = report.worst().map(|w| w.name.clone()).unwrap_or_default();
    assert!(report.passed(), "rel error {:.3e} at {worst}", report.max_rel_error());
    assert!(report.checked() > 100);
}
