mod common;

#[test]
fn every_op_matches_finite_differences() {
    let results = common::gradient_suite();
    let mut failures = Vec::new();
    for r in &results {
        println!(
            "{:<40} rel err {:.2e} (tol {:.0e}, worst tensor {:.2e})",
            r.name, r.error, r.tolerance, r.worst_tensor
        );
        if !r.ok() {
            failures.push(r.name);
        }
    }
    assert!(failures.is_empty(), "gradient mismatch: {failures:?}");
}
