use posebench::gradient_suite::{loss_cases, op_cases, CaseResult};
use posebench::nn::gradcheck::check_gradients;
use posebench::nn::Tensor;

const PROBES: usize = 100;
const TOL: f64 = 1e-4;

fn assert_all(cases: &[CaseResult]) {
    let failed: Vec<_> = cases.iter().filter(|c| !c.report.passed()).collect();
    assert!(failed.is_empty(), "{failed:#?}");
}

#[test]
fn every_op_matches_finite_differences() {
    let cases = op_cases(PROBES, TOL).unwrap();
    assert!(cases.len() >= 30);
    assert_all(&cases);
}

#[test]
fn every_loss_configuration_matches_finite_differences() {
    let cases = loss_cases(PROBES, TOL).unwrap();
    assert_eq!(cases.len(), 21);
    assert_all(&cases);
}

#[test]
fn detached_operand_is_caught() {
    // y = x · stop(x) has true derivative 2x but the tape only sees x.
    let x = Tensor::from_fn(&[6], |i| 0.3 + i as f64 * 0.2);
    let report = check_gradients(
        &[x],
        |g, v| {
            let frozen = g.input(g.value(v[0]).clone());
            let y = g.mul(v[0], frozen)?;
            Ok(g.sum(y))
        },
        PROBES,
        1e-6,
        TOL,
        1,
    )
    .unwrap();
    assert_eq!(report.failures, PROBES);
}
