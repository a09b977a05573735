use crystal_pirnn::autodiff::gradcheck;
use crystal_pirnn::selfcheck::{contract, loss_checks, primitive_cases, primitive_checks, random};
use proptest::prelude::*;

#[test]
fn every_primitive_passes_gradcheck() {
    let checks = primitive_checks().unwrap();
    assert_eq!(checks.len(), primitive_cases().len());
    for c in checks {
        assert!(c.passed(), "{}: relative error {}", c.name, c.error);
    }
}

#[test]
fn composite_losses_pass_gradcheck() {
    for c in loss_checks().unwrap() {
        assert!(c.error < 1e-4, "{}: relative error {}", c.name, c.error);
    }
}

proptest! {
    #[test]
    fn composite_expression_gradcheck(seed in 0u64..1000) {
        let x = random(2, 3, -1.0, 1.0, seed);
        let err = gradcheck(
            |v| {
                let a = v.tanh();
                let b = (&a * v).softplus();
                Ok(contract(&(&b + &v.sigmoid().square())))
            },
            &x,
            1e-6,
        )
        .unwrap();
        prop_assert!(err < 1e-5, "relative error {}", err);
    }
}
