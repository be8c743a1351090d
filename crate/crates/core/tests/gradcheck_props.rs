use proptest::prelude::*;
use viewforge::autograd::op_suite;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn every_op_matches_finite_differences(seed in any::<u64>()) {
        for (name, err) in op_suite(seed).unwrap() {
            prop_assert!(err < 1e-3, "{} relative error {}", name, err);
        }
    }
}
