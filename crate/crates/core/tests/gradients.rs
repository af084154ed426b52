mod common;

#[test]
fn every_layer_and_the_loss_match_finite_differences() {
    let cases = common::gradient_suite().unwrap();
    let mut failed = Vec::new();
    for c in &cases {
        assert!(c.report.probes.len() >= 10);
        let err = c.report.max_relative_error();
        println!("{:<32} max rel err {err:.2e} (tol {:.0e})", c.name, c.tol);
        if !(err < c.tol) {
            failed.push(format!("{}: {:?}", c.name, c.report.worst()));
        }
    }
    assert!(failed.is_empty(), "{failed:#?}");
}
