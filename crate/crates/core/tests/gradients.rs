mod common;

use common::gradcheck::{run_suite, POINTS};

#[test]
fn every_op_matches_central_differences() {
    let results = run_suite().unwrap();
    assert!(results.len() >= 20);
    for r in &results {
        eprintln!("{:<40} {:>3} points  max rel err {:.2e}", r.op, r.points, r.max_rel_err);
        assert!(r.points >= POINTS, "{}: only {} points", r.op, r.points);
        assert!(r.max_rel_err <= 1e-6, "{}: relative error {:.3e}", r.op, r.max_rel_err);
    }
}
