//! CLT moments against exhaustive enumeration of every weight assignment.

mod oracles;

use blrnet_core::linalg::ConvGeometry;
use blrnet_core::stochastic::LinearKind;
use blrnet_core::Tensor;
use oracles::enumeration::{enumerate, layer_error, random_layers, TOL};
use proptest::prelude::*;

fn assert_matches(h: &Tensor, logits: &Tensor, kind: LinearKind) -> Result<(), TestCaseError> {
    let err = layer_error(h, logits, kind).map_err(TestCaseError::fail)?;
    prop_assert!(err <= TOL, "error {err:e}");
    Ok(())
}

fn dense_case() -> impl Strategy<Value = (Tensor, Tensor)> {
    (1usize..=3, 1usize..=4, 1usize..=3).prop_flat_map(|(batch, inputs, outputs)| {
        let outputs = outputs.min(12 / inputs);
        (
            prop::collection::vec(-3.0f64..3.0, batch * inputs),
            prop::collection::vec(-4.0f64..4.0, outputs * inputs),
        )
            .prop_map(move |(h, w)| (Tensor::new(vec![batch, inputs], h).unwrap(), Tensor::new(vec![outputs, inputs], w).unwrap()))
    })
}

fn conv_case() -> impl Strategy<Value = (Tensor, Tensor, usize)> {
    (1usize..=2, 0usize..=1).prop_flat_map(|(channels, padding)| {
        (
            prop::collection::vec(-2.0f64..2.0, channels * 9),
            prop::collection::vec(-4.0f64..4.0, channels * 4),
        )
            .prop_map(move |(h, w)| {
                (
                    Tensor::new(vec![1, channels, 3, 3], h).unwrap(),
                    Tensor::new(vec![1, channels, 2, 2], w).unwrap(),
                    padding,
                )
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn dense_moments_match_enumeration((h, w) in dense_case()) {
        assert_matches(&h, &w, LinearKind::Dense)?;
    }

    #[test]
    fn conv_moments_match_enumeration((h, w, padding) in conv_case()) {
        assert_matches(&h, &w, LinearKind::Conv2d(ConvGeometry { stride: 1, padding }))?;
    }
}

#[test]
fn deterministic_weights_have_zero_variance() {
    let h = Tensor::new(vec![1, 3], vec![0.5, -1.0, 2.0]).unwrap();
    let w = Tensor::new(vec![1, 3], vec![-60.0, 60.0, -60.0]).unwrap();
    let (mean, var) = enumerate(&h, &w, LinearKind::Dense);
    assert!((mean[0] - (0.5 + 1.0 + 2.0)).abs() < 1e-12);
    assert!(var[0].abs() < 1e-12);
}

#[test]
fn random_layers_match_match_enumeration() {
    random_layers(200, 11).unwrap();
}
