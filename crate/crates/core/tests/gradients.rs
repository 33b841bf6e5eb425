use mmssl::engine::gradcheck::{check, DEFAULT_STEP};
use mmssl::losses::{nt_xent, EmbeddingBank};
use mmssl::verify::{check_op, gradient_suite, DEFAULT_TOLERANCE, SUITE_OPS};
use mmssl::Tensor;
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn analytic_gradients_match_central_differences(seed in any::<u64>(), op in 0..SUITE_OPS.len()) {
        let o = check_op(SUITE_OPS[op], seed).unwrap();
        prop_assert!(o.passed(DEFAULT_TOLERANCE), "{} seed {}: {}", o.op, seed, o.max_rel_error);
    }

    #[test]
    fn nt_xent_gradients_at_varied_temperatures(
        data in proptest::collection::vec(-2.0f64..2.0, 24),
        temperature in 0.05f64..2.0,
    ) {
        let x = Tensor::new(vec![6, 4], data).unwrap();
        prop_assume!((0..6).all(|r| x.row(r).iter().map(|v| v * v).sum::<f64>() > 1e-2));
        let res = check(&[x], DEFAULT_STEP, |g, v| {
            let b = EmbeddingBank::normalize(g, v[0])?;
            nt_xent(g, &b, temperature)
        }).unwrap();
        prop_assert!(res.max_rel_error < DEFAULT_TOLERANCE, "{}", res.max_rel_error);
    }
}

#[test]
fn suite_covers_every_operation_for_every_seed() {
    let outcomes = gradient_suite(2).unwrap();
    assert_eq!(outcomes.len(), SUITE_OPS.len() * 2);
    for op in SUITE_OPS {
        assert_eq!(outcomes.iter().filter(|o| o.op == op).count(), 2);
    }
}
