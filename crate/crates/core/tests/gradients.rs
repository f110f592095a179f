use itergrid::gradcheck::{check_inputs, random_check, CheckKind};
use itergrid::Tensor;
use proptest::prelude::*;

const TOL: f64 = 1e-4;

#[test]
fn every_kind_passes_on_fixed_seeds() {
    for kind in CheckKind::ALL {
        for seed in 0..6 {
            let err = random_check(kind, seed).unwrap();
            assert!(err < TOL, "{kind:?} seed {seed}: relative error {err:e}");
        }
    }
}

#[test]
fn a_wrong_gradient_is_detected() {
    // Value uses x^2 but the detached factor removes half the derivative.
    let x = Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap();
    let err = check_inputs(&[x], |_, v| v[0].mul(v[0].stop_gradient()).sum()).unwrap();
    assert!(err > 0.4, "error {err}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn random_cases_match_finite_differences(kind_idx in 0usize..CheckKind::ALL.len(), seed in any::<u64>()) {
        let kind = CheckKind::ALL[kind_idx];
        let err = random_check(kind, seed).unwrap();
        prop_assert!(err < TOL, "{:?} seed {}: relative error {:e}", kind, seed, err);
    }
}
