mod common;

use common::*;
use egt::model::conv_encoder;
use egt::net::{Layer, Network};
use egt::Tensor;

#[test]
fn every_layer_kind_matches_central_differences() {
    let mut r = rng(11);
    for i in 0..60 {
        let (net, x) = random_layer_instance(&mut r, i);
        let err = gradient_check(&net, &x, 1e-4, &mut r);
        assert!(err < 1e-3, "instance {i} ({:?}): rel err {err}", net.layers()[0].kind());
    }
}

#[test]
fn stacked_network_matches_central_differences() {
    let mut r = rng(12);
    let net = Network::new(
        &[2, 6, 6],
        vec![
            Layer::conv2d(2, 3, 3, 1, 1, &mut r),
            Layer::Relu,
            Layer::MaxPool2d { kernel: 2, stride: 2, padding: 0 },
            Layer::AvgPool2d { kernel: 2, stride: 1, padding: 0 },
            Layer::Flatten,
            Layer::linear(12, 4, &mut r),
        ],
    )
    .unwrap();
    for _ in 0..5 {
        let x = uniform(&[2, 2, 6, 6], -1.0, 1.0, &mut r);
        assert!(gradient_check(&net, &x, 1e-5, &mut r) < 1e-3);
    }
}

#[test]
fn encoder_gradients_sum_over_the_batch() {
    let mut r = rng(13);
    let enc = conv_encoder(&[1, 8, 8], &[3, 3], false, &mut r).unwrap();
    let x = uniform(&[3, 1, 8, 8], 0.0, 1.0, &mut r);
    let (y, trace) = enc.forward(&x, true).unwrap();
    let g = randn(y.shape(), &mut r);
    let (_, total) = enc.backward_grad(&trace.unwrap(), &g).unwrap();
    let mut summed = None::<egt::net::ParamGrads>;
    for b in 0..3 {
        let (_, t) = enc.forward(&x.index_outer(b), true).unwrap();
        let (_, gb) = enc.backward_grad(&t.unwrap(), &g.index_outer(b)).unwrap();
        match &mut summed {
            None => summed = Some(gb),
            Some(s) => s.accumulate(&gb).unwrap(),
        }
    }
    let err = max_rel_err(&total.flatten(), &summed.unwrap().flatten(), 1e-9);
    assert!(err < 1e-10, "{err}");
}

#[test]
fn backward_params_equals_backward_grad_params() {
    let mut r = rng(14);
    let enc = conv_encoder(&[2, 8, 8], &[4, 4], true, &mut r).unwrap();
    let x = uniform(&[2, 2, 8, 8], 0.0, 1.0, &mut r);
    let (y, trace) = enc.forward(&x, true).unwrap();
    let trace = trace.unwrap();
    let g = randn(y.shape(), &mut r);
    let (_, a) = enc.backward_grad(&trace, &g).unwrap();
    let b = enc.backward_params(&trace, &g).unwrap();
    assert_eq!(a, b);
}

#[test]
fn forward_rejects_wrong_input_shape() {
    let mut r = rng(15);
    let net = Network::new(&[3], vec![Layer::linear(3, 2, &mut r)]).unwrap();
    assert!(net.forward(&Tensor::zeros(&[4]), false).is_err());
    assert!(Network::new(&[3], vec![Layer::linear(4, 2, &mut r)]).is_err());
}
