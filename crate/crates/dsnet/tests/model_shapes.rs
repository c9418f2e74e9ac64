//! Whole-model shape contracts at realistic resolutions.

use dsnet::backbone::DSNetModel;
use dsnet::blocks::Phase;
use dsnet::config::ModelConfig;
use dsnet::plan::Mode;
use dsnet::tensor::Tensor;
use ndarray::Array4;

#[test]
fn full_model_forward_at_512() {
    // 150-class config, 512x512 input -> logits at input resolution
    let model = DSNetModel::build(&ModelConfig::dsnet(150), Mode::Segmentation, 0).unwrap();
    let x = Tensor::constant(Array4::<f64>::from_elem((1, 3, 512, 512), 0.5).into_dyn());
    let y = model.forward(&x, Phase::Eval).unwrap();
    assert_eq!(y.shape(), vec![1, 150, 512, 512]);
    assert!(y.data().iter().all(|v| v.is_finite()));
}

#[test]
fn full_model_rejects_off_grid_input() {
    let model = DSNetModel::build(&ModelConfig::dsnet(19), Mode::Segmentation, 0).unwrap();
    let x = Tensor::constant(Array4::<f64>::zeros((1, 3, 511, 512)).into_dyn());
    let err = model.forward(&x, Phase::Eval).unwrap_err();
    assert!(err.to_string().contains("divisible"));
}
