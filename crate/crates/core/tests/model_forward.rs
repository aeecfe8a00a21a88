use misscal_core::models::{model_logits, DeskModel};
use proptest::prelude::*;

proptest! {
    #[test]
    fn softmax_regression_matches_reference(
        weights in prop::collection::vec(-5.0f64..5.0, 9),
        bias in prop::collection::vec(-5.0f64..5.0, 3),
        mean in prop::collection::vec(-2.0f64..2.0, 3),
        scale in prop::collection::vec(0.1f64..4.0, 3),
        x in prop::collection::vec(-10.0f64..10.0, 3),
    ) {
        let model = DeskModel::softmax_regression(weights.clone(), bias.clone(), mean.clone(), scale.clone()).unwrap();
        let got = model_logits(&model, &x).unwrap();
        for class in 0..3 {
            let mut want = bias[class];
            for feature in 0..3 {
                want += weights[feature * 3 + class] * (x[feature] - mean[feature]) / scale[feature];
            }
            prop_assert!((got.as_slice()[class] - want).abs() <= 1e-9);
        }
        prop_assert_eq!(got, model_logits(&model, &x).unwrap());
    }
}
