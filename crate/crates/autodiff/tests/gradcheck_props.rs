use jacmatch_autodiff::gradcheck::{catalogue, check, sample_inputs};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn every_op_passes_first_and_second_order_checks(seed in any::<u64>(), size in 1usize..=3) {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        for kind in catalogue() {
            let mut uniform = || rng.random::<f64>();
            let (kind, inputs) = sample_inputs(&kind, size, &mut uniform);
            let report = check(&kind, &inputs, 1e-5).unwrap();
            prop_assert!(report.first_order <= 1e-6, "{} first-order {}", report.op, report.first_order);
            prop_assert!(report.second_order <= 1e-4, "{} second-order {}", report.op, report.second_order);
        }
    }
}
