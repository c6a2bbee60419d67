mod common;

use common::*;
use egt::lrp::*;
use egt::net::{Layer, LayerKind, Network};
use egt::train::lrp_weights;
use egt::Tensor;
use proptest::prelude::*;
use rand::Rng;

fn dense(weight: Vec<f64>, outputs: usize, inputs: usize) -> Layer {
    Layer::Linear {
        weight: Tensor::new(vec![outputs, inputs], weight).unwrap(),
        bias: Tensor::zeros(&[outputs]),
    }
}

#[test]
fn epsilon_rule_hand_example() {
    let layer = dense(vec![0.5, 0.25], 1, 2);
    let x = Tensor::vector(vec![1.0, 2.0]);
    let y = Tensor::vector(vec![1.0]);
    let r = lrp_epsilon(&layer, &x, &y, &Tensor::vector(vec![1.0]), 0.0).unwrap();
    assert_eq!(r.data(), &[0.5, 0.5]);
    let r = lrp_epsilon(&layer, &x, &y, &Tensor::vector(vec![0.0]), 0.1).unwrap();
    assert_eq!(r.data(), &[0.0, 0.0]);
}

#[test]
fn epsilon_rule_single_unit_closed_form() {
    let mut r = rng(1);
    for _ in 0..50 {
        let (w, x, eps, rel) = (
            r.random_range(-2.0..2.0),
            r.random_range(-2.0..2.0),
            r.random_range(0.0..0.5),
            r.random_range(-3.0..3.0),
        );
        let y: f64 = w * x;
        let layer = dense(vec![w], 1, 1);
        let got = lrp_epsilon(&layer, &Tensor::vector(vec![x]), &Tensor::vector(vec![y]), &Tensor::vector(vec![rel]), eps)
            .unwrap();
        let sign = if y >= 0.0 { 1.0 } else { -1.0 };
        assert!((got.data()[0] - rel * y / (y + eps * sign)).abs() < 1e-12);
    }
}

#[test]
fn growing_epsilon_shrinks_relevance() {
    let mut r = rng(2);
    for _ in 0..30 {
        let n = r.random_range(2..6);
        let w: Vec<f64> = (0..n).map(|_| r.random_range(0.1..1.0)).collect();
        let x: Vec<f64> = (0..n).map(|_| r.random_range(0.1..1.0)).collect();
        let y: f64 = w.iter().zip(&x).map(|(a, b)| a * b).sum();
        let layer = dense(w, 1, n);
        let run = |eps: f64| {
            lrp_epsilon(&layer, &Tensor::vector(x.clone()), &Tensor::vector(vec![y]), &Tensor::vector(vec![1.0]), eps)
                .unwrap()
        };
        let (a, b) = (run(0.01), run(0.5));
        for (u, v) in a.data().iter().zip(b.data()) {
            assert!(v.abs() < u.abs());
        }
    }
}

#[test]
fn alpha_one_matches_epsilon_zero_on_positive_terms() {
    let mut r = rng(3);
    for _ in 0..30 {
        let (o, n) = (r.random_range(1..4), r.random_range(1..5));
        let w: Vec<f64> = (0..o * n).map(|_| r.random_range(0.01..1.0)).collect();
        let x: Vec<f64> = (0..n).map(|_| r.random_range(0.01..1.0)).collect();
        let net = Network::new(&[n], vec![dense(w, o, n)]).unwrap();
        let xt = Tensor::vector(x);
        let (y, _) = net.forward(&xt, false).unwrap();
        let rel = uniform(&[o], -1.0, 1.0, &mut r);
        let layer = &net.layers()[0];
        let a = lrp_alpha(layer, &xt, &y, &rel, 1.0).unwrap();
        let e = lrp_epsilon(layer, &xt, &y, &rel, 0.0).unwrap();
        assert!(max_rel_err(a.data(), e.data(), 1e-12) < 1e-12);
    }
}

#[test]
fn alpha_rule_cancelling_contributions() {
    let layer = dense(vec![1.0, -1.0], 1, 2);
    let x = Tensor::vector(vec![1.0, 1.0]);
    let y = Tensor::vector(vec![0.0]);
    let one = Tensor::vector(vec![1.0]);
    // normalizers from the clamped pre-activation: y+ = 0 so nothing propagates
    let r = lrp_alpha_with(&layer, &x, &y, &one, 1.0, AlphaDenominator::Clamped).unwrap();
    assert_eq!(r.data(), &[0.0, 0.0]);
    // normalizers from the signed contributions: the positive term keeps it all
    let r = lrp_alpha_with(&layer, &x, &y, &one, 1.0, AlphaDenominator::SignedContributions).unwrap();
    assert_eq!(r.data(), &[1.0, 0.0]);
}

#[test]
fn passthrough_examples() {
    let relu = Layer::Relu;
    let r = lrp_passthrough(&relu, &Tensor::vector(vec![-1.0, 3.0]), &Tensor::vector(vec![1.0, 2.0])).unwrap();
    assert_eq!(r.data(), &[1.0, 2.0]);

    let pool = Layer::MaxPool2d { kernel: 2, stride: 2, padding: 0 };
    let x = Tensor::new(vec![1, 2, 2], vec![1.0, 5.0, 2.0, 3.0]).unwrap();
    let r = lrp_passthrough(&pool, &x, &Tensor::new(vec![1, 1, 1], vec![4.0]).unwrap()).unwrap();
    assert_eq!(r.data(), &[0.0, 4.0, 0.0, 0.0]);
    let tie = Tensor::full(&[1, 2, 2], 2.0);
    let r = lrp_passthrough(&pool, &tie, &Tensor::new(vec![1, 1, 1], vec![4.0]).unwrap()).unwrap();
    assert_eq!(r.data(), &[4.0, 0.0, 0.0, 0.0]);

    let avg = Layer::AvgPool2d { kernel: 2, stride: 2, padding: 0 };
    let r = lrp_passthrough(&avg, &tie, &Tensor::new(vec![1, 1, 1], vec![4.0]).unwrap()).unwrap();
    assert_eq!(r.data(), &[1.0; 4]);
}

#[test]
fn conservation_on_random_bias_free_nets() {
    let mut r = rng(4);
    for i in 0..100 {
        let net = random_conservation_net(&mut r);
        let mut shape = vec![2];
        shape.extend_from_slice(net.input_shape());
        let x = randn(&shape, &mut r);
        let err = conservation_error(&net, &x, LrpRule::Epsilon);
        assert!(err < 1e-5, "net {i}: {err}");
    }
}

// The α=1 rule keeps only positive contributions, so a unit whose
// contributions are all negative passes nothing on. When every linear layer
// feeds a relu such units carry no relevance and conservation holds again.
#[test]
fn alpha_one_conserves_when_every_linear_feeds_a_relu() {
    let mut r = rng(9);
    let mut checked = 0;
    while checked < 50 {
        let net = random_conservation_net(&mut r);
        let layers = net.layers();
        let gated = (0..layers.len())
            .filter(|&l| matches!(layers[l], Layer::Linear { .. }))
            .all(|l| matches!(layers.get(l + 1), Some(Layer::Relu)));
        if !gated {
            continue;
        }
        let x = randn(net.input_shape(), &mut r);
        let err = conservation_error(&net, &x, LrpRule::Alpha);
        assert!(err < 1e-5, "net {checked}: {err}");
        checked += 1;
    }
}

#[test]
fn epsilon_lrp_is_gradient_times_input_on_relu_nets() {
    let mut r = rng(5);
    for i in 0..50 {
        let hidden = r.random_range(1..4);
        let net = random_relu_net(&mut r, hidden);
        let x = randn(net.input_shape(), &mut r);
        let k = r.random_range(0..net.output_shape()[0]);
        let err = gradient_times_input_error(&net, &x, k);
        assert!(err < 1e-4, "net {i}: {err}");
    }
}

#[test]
fn alpha_one_keeps_relevance_nonnegative() {
    let mut r = rng(6);
    let net = Network::new(
        &[2, 6, 6],
        vec![
            Layer::conv2d(2, 3, 3, 1, 1, &mut r),
            Layer::Relu,
            Layer::MaxPool2d { kernel: 2, stride: 2, padding: 0 },
            Layer::conv2d(3, 2, 3, 1, 1, &mut r),
            Layer::Relu,
        ],
    )
    .unwrap();
    for _ in 0..10 {
        let x = uniform(&[2, 6, 6], 0.0, 1.0, &mut r);
        let (y, trace) = net.forward(&x, true).unwrap();
        let rel = lrp_backward(&net, &trace.unwrap(), &y, &LrpConfig::default()).unwrap();
        for l in 0..=rel.len() {
            assert!(rel.at(l).data().iter().all(|&v| v >= 0.0), "layer {l}");
        }
    }
}

#[test]
fn trace_shapes_follow_activations_and_zero_start_stays_zero() {
    let mut r = rng(7);
    let net = random_conservation_net(&mut r);
    let x = randn(net.input_shape(), &mut r);
    let (y, trace) = net.forward(&x, true).unwrap();
    let trace = trace.unwrap();
    let rel = lrp_backward(&net, &trace, &Tensor::zeros(y.shape()), &LrpConfig::default()).unwrap();
    assert_eq!(rel.len(), net.layers().len());
    for l in 0..=rel.len() {
        assert_eq!(&rel.at(l).shape()[1..], net.shape_at(l));
        assert!(rel.at(l).data().iter().all(|&v| v == 0.0));
    }
    assert_eq!(rel.input_relevance().shape(), net.input_shape());
}

#[test]
fn config_errors() {
    assert!(LrpConfig::with(-1.0, 1.0).validate().is_err());
    assert!(LrpConfig::with(0.001, 0.5).validate().is_err());
    let bad = LrpConfig::default().set_rule(LayerKind::Relu, LrpRule::Alpha);
    assert!(bad.validate().is_err());
    let mut missing = LrpConfig::default();
    missing.rule_map.remove(&LayerKind::Flatten);
    let mut r = rng(8);
    let net = Network::new(&[1, 2, 2], vec![Layer::Flatten, Layer::linear(4, 2, &mut r)]).unwrap();
    let (y, trace) = net.forward(&Tensor::full(&[1, 2, 2], 1.0), true).unwrap();
    assert!(lrp_backward(&net, &trace.unwrap(), &y, &missing).is_err());
}

fn argmax_abs(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    best
}

proptest! {
    #[test]
    fn normalized_relevance_is_bounded_and_keeps_sign(v in prop::collection::vec(-1e6f64..1e6, 1..64)) {
        let t = Tensor::vector(v.clone());
        let n = normalize_relevance(&t);
        let m = t.max_abs();
        for (a, b) in n.data().iter().zip(&v) {
            prop_assert!((-1.0..=1.0).contains(a));
            prop_assert!(a * b >= 0.0);
        }
        if m > 0.0 {
            prop_assert_eq!(n.max_abs(), 1.0);
            prop_assert_eq!(argmax_abs(n.data()), argmax_abs(t.data()));
        }
    }

    #[test]
    fn relevance_weights_lie_in_zero_two(v in prop::collection::vec(-1e3f64..1e3, 1..64)) {
        let w = lrp_weights(&normalize_relevance(&Tensor::vector(v))).unwrap();
        prop_assert!(w.data().iter().all(|x| (0.0..=2.0).contains(x)));
    }

    #[test]
    fn lrp_is_linear_in_output_relevance(seed in 0u64..1000, k in 0.1f64..10.0) {
        let mut r = rng(seed);
        let net = random_conservation_net(&mut r);
        let x = randn(net.input_shape(), &mut r);
        let (y, trace) = net.forward(&x, true).unwrap();
        let trace = trace.unwrap();
        let cfg = LrpConfig::with(0.01, 1.0);
        let a = lrp_backward(&net, &trace, &y, &cfg).unwrap().input_relevance();
        let b = lrp_backward(&net, &trace, &y.scale(k), &cfg).unwrap().input_relevance();
        prop_assert!(max_rel_err(&a.scale(k).into_data(), b.data(), 1e-9) < 1e-9);
    }
}
