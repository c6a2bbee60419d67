//! Random networks and independent reference computations shared by the test targets.
#![allow(dead_code)]

use egt::net::{Layer, Network};
use egt::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Random bias-free network of at most four layers built from linear, relu,
/// avgpool and flatten, on either a vector or a `[C, H, W]` input.
pub fn random_conservation_net(rng: &mut impl Rng) -> Network {
    let mut layers = Vec::new();
    let input: Vec<usize> = if rng.random_bool(0.5) {
        let (c, h, w) = (rng.random_range(1..4), rng.random_range(2..7), rng.random_range(2..7));
        if rng.random_bool(0.6) {
            layers.push(Layer::AvgPool2d {
                kernel: 2,
                stride: rng.random_range(1..3),
                padding: 0,
            });
        }
        if rng.random_bool(0.3) {
            layers.push(Layer::Relu);
        }
        layers.push(Layer::Flatten);
        vec![c, h, w]
    } else {
        vec![rng.random_range(2..10)]
    };
    let mut width = flat_size(&input, &layers);
    let budget = rng.random_range(layers.len() + 1..=4);
    while layers.len() < budget {
        if layers.last().is_some_and(|l| matches!(l, Layer::Linear { .. })) && rng.random_bool(0.6) {
            layers.push(Layer::Relu);
        } else {
            let out = rng.random_range(1..8);
            layers.push(Layer::linear(width, out, rng));
            width = out;
        }
    }
    if !layers.iter().any(|l| matches!(l, Layer::Linear { .. })) {
        *layers.last_mut().unwrap() = Layer::linear(width, rng.random_range(1..8), rng);
    }
    Network::new(&input, layers).unwrap()
}

fn flat_size(input: &[usize], layers: &[Layer]) -> usize {
    let mut shape = input.to_vec();
    for l in layers {
        shape = l.output_shape(&shape).unwrap();
    }
    shape.iter().product()
}

/// Bias-free dense relu network `linear (relu linear)*` with `hidden` layers.
pub fn random_relu_net(rng: &mut impl Rng, hidden: usize) -> Network {
    let mut width = rng.random_range(2..10);
    let input = vec![width];
    let mut layers = Vec::new();
    for _ in 0..hidden {
        let out = rng.random_range(2..10);
        layers.push(Layer::linear(width, out, rng));
        layers.push(Layer::Relu);
        width = out;
    }
    layers.push(Layer::linear(width, rng.random_range(1..5), rng));
    Network::new(&input, layers).unwrap()
}

/// Gradient of output `k` of a dense linear/relu network with respect to its
/// input, by explicit matrix products over the active-unit masks.
pub fn dense_input_gradient(net: &Network, x: &[f64], k: usize) -> Vec<f64> {
    // forward, remembering which relu units pass
    let mut h = x.to_vec();
    let mut jac: Vec<Vec<f64>> = (0..x.len())
        .map(|i| (0..x.len()).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    for layer in net.layers() {
        match layer {
            Layer::Linear { weight, bias } => {
                let (out, inp) = (weight.shape()[0], weight.shape()[1]);
                let w = weight.data();
                let mut nh = vec![0.0; out];
                let mut nj = vec![vec![0.0; x.len()]; out];
                for o in 0..out {
                    nh[o] = bias.data()[o];
                    for i in 0..inp {
                        nh[o] += w[o * inp + i] * h[i];
                        for d in 0..x.len() {
                            nj[o][d] += w[o * inp + i] * jac[i][d];
                        }
                    }
                }
                h = nh;
                jac = nj;
            }
            Layer::Relu => {
                for (v, row) in h.iter_mut().zip(jac.iter_mut()) {
                    if *v <= 0.0 {
                        *v = 0.0;
                        row.iter_mut().for_each(|r| *r = 0.0);
                    }
                }
            }
            Layer::Flatten => {}
            other => panic!("dense oracle cannot handle {:?}", other.kind()),
        }
    }
    jac[k].clone()
}

/// Central difference of `f` at `x` along every coordinate.
pub fn central_diff(x: &[f64], step: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut xp = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = xp[i];
            xp[i] = orig + step;
            let up = f(&xp);
            xp[i] = orig - step;
            let down = f(&xp);
            xp[i] = orig;
            (up - down) / (2.0 * step)
        })
        .collect()
}

/// Largest elementwise `|a - b| / max(|a|, |b|, floor)`.
pub fn max_rel_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// `|a - b| / max(|a|, |b|)`, zero when both vanish.
pub fn rel_diff(a: f64, b: f64) -> f64 {
    let s = a.abs().max(b.abs());
    if s == 0.0 {
        0.0
    } else {
        (a - b).abs() / s
    }
}

/// One random single-layer instance for the finite-difference suite, with an
/// input placed away from relu and max-pool kinks.
pub fn random_layer_instance(rng: &mut impl Rng, which: usize) -> (Network, Tensor) {
    let batch = rng.random_range(1..3);
    let (c, h, w) = (rng.random_range(1..4), rng.random_range(3..7), rng.random_range(3..7));
    let (layer, shape): (Layer, Vec<usize>) = match which % 6 {
        0 => {
            let n = rng.random_range(1..9);
            let mut l = Layer::linear(n, rng.random_range(1..7), rng);
            randomize_bias(&mut l, rng);
            (l, vec![n])
        }
        1 => {
            let k = rng.random_range(1..4).min(h).min(w);
            let mut l = Layer::conv2d(c, rng.random_range(1..4), k, rng.random_range(1..3), rng.random_range(0..2), rng);
            randomize_bias(&mut l, rng);
            (l, vec![c, h, w])
        }
        2 => (Layer::Relu, vec![c, h, w]),
        3 => (
            Layer::MaxPool2d {
                kernel: 2,
                stride: rng.random_range(1..3),
                padding: rng.random_range(0..2),
            },
            vec![c, h, w],
        ),
        4 => (
            Layer::AvgPool2d {
                kernel: rng.random_range(2..4).min(h).min(w),
                stride: rng.random_range(1..3),
                padding: rng.random_range(0..2),
            },
            vec![c, h, w],
        ),
        _ => (Layer::Flatten, vec![c, h, w]),
    };
    let net = Network::new(&shape, vec![layer]).unwrap();
    let mut full = vec![batch];
    full.extend_from_slice(&shape);
    let n: usize = full.iter().product();
    // distinct values at least 1e-2 apart and at least 5e-3 away from zero
    let mid = (n / 2) as f64;
    let mut vals: Vec<f64> = (0..n).map(|i| (i as f64 - mid) * 1e-2 + 5e-3).collect();
    for i in (1..n).rev() {
        vals.swap(i, rng.random_range(0..=i));
    }
    let scale = rng.random_range(1.0..20.0);
    let x = Tensor::new(full, vals.into_iter().map(|v| v * scale).collect()).unwrap();
    (net, x)
}

fn randomize_bias(layer: &mut Layer, rng: &mut impl Rng) {
    let (_, b) = layer.params_mut().unwrap();
    for v in b.data_mut() {
        *v = rng.random_range(-0.5..0.5);
    }
}

/// Worst relative error between analytic and central-difference gradients of
/// `<c, f(x)>` with respect to the input and every parameter of `net`.
pub fn gradient_check(net: &Network, x: &Tensor, step: f64, rng: &mut impl Rng) -> f64 {
    let (y, trace) = net.forward(x, true).unwrap();
    let c = randn(y.shape(), rng);
    let (gin, grads) = net.backward_grad(&trace.unwrap(), &c).unwrap();
    let loss = |n: &Network, x: &Tensor| n.forward(x, false).unwrap().0.dot(&c).unwrap();
    let floor = 1e-6;
    let num = central_diff(x.data(), step, |v| loss(net, &Tensor::new(x.shape().to_vec(), v.to_vec()).unwrap()));
    let mut worst = max_rel_err(gin.data(), &num, floor);
    for (l, g) in grads.layers.iter().enumerate() {
        let Some(g) = g else { continue };
        for (part, analytic) in [(0, g.weight.data()), (1, g.bias.data())] {
            let base = {
                let mut n = net.clone();
                let (w, b) = n.params_mut(l).unwrap();
                if part == 0 { w.to_vec() } else { b.to_vec() }
            };
            let num = central_diff(&base, step, |v| {
                let mut n = net.clone();
                let (w, b) = n.params_mut(l).unwrap();
                if part == 0 { w.copy_from_slice(v) } else { b.copy_from_slice(v) }
                loss(&n, x)
            });
            worst = worst.max(max_rel_err(analytic, &num, floor));
        }
    }
    worst
}

/// Relative conservation error `|sum R_in - sum R_out| / |sum R_out|` of an
/// ε=0, α=1 pass started from the network output itself.
pub fn conservation_error(net: &Network, x: &Tensor, linear_rule: egt::lrp::LrpRule) -> f64 {
    use egt::lrp::{lrp_backward, LrpConfig};
    use egt::net::LayerKind;
    let cfg = LrpConfig::with(0.0, 1.0).set_rule(LayerKind::Linear, linear_rule);
    let (y, trace) = net.forward(x, true).unwrap();
    let rel = lrp_backward(net, &trace.unwrap(), &y, &cfg).unwrap();
    let (sin, sout) = (rel.input_relevance().sum(), y.sum());
    if sout == 0.0 {
        sin.abs()
    } else {
        (sin - sout).abs() / sout.abs()
    }
}

/// Worst elementwise deviation between ε=1e-9 relevance of output `k` and the
/// dense-oracle gradient times input, relative to the largest oracle entry's
/// magnitude below which entries are compared absolutely.
pub fn gradient_times_input_error(net: &Network, x: &Tensor, k: usize) -> f64 {
    use egt::lrp::{lrp_backward, LrpConfig};
    let (y, trace) = net.forward(x, true).unwrap();
    let mut start = vec![0.0; y.len()];
    start[k] = y.data()[k];
    let rel = lrp_backward(net, &trace.unwrap(), &Tensor::vector(start), &LrpConfig::with(1e-9, 1.0)).unwrap();
    let grad = dense_input_gradient(net, x.data(), k);
    let oracle: Vec<f64> = grad.iter().zip(x.data()).map(|(g, v)| g * v).collect();
    let scale = oracle.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    max_rel_err(rel.input_relevance().data(), &oracle, (1e-6 * scale).max(1e-300))
}

/// Two small synthetic domains (`d0`, `d1`) of 8x8 images.
pub fn tiny_domains(seed: u64, channels: usize) -> std::collections::BTreeMap<String, egt::data::LabeledImageSet> {
    let spec = egt::data::GenSpec {
        classes: 6,
        images_per_class: 12,
        channels,
        size: 8,
        ..egt::data::GenSpec::default()
    };
    egt::data::gen_synthetic_domains(&spec, &mut rng(seed)).unwrap()
}

pub fn tiny_model(head: egt::heads::HeadKind, channels: usize, seed: u64) -> egt::model::FewShotModel {
    let spec = egt::model::ModelSpec {
        image_shape: vec![channels, 8, 8],
        channels: vec![3, 3],
        head,
        relation_hidden: 4,
        ..egt::model::ModelSpec::default()
    };
    egt::model::FewShotModel::build(&spec, &mut rng(seed)).unwrap()
}

/// Conventional episodic training of a cosine-head model written directly
/// against the network, head and optimizer primitives: the plain
/// cross-entropy of the queries, back through the prototypes and encoder.
pub struct PlainTrainer {
    pub model: egt::model::FewShotModel,
    opt: egt::net::Sgd,
}

impl PlainTrainer {
    pub fn new(model: egt::model::FewShotModel, momentum: f64) -> Self {
        PlainTrainer {
            model,
            opt: egt::net::Sgd::new(momentum).unwrap(),
        }
    }

    pub fn step(&mut self, ep: &egt::data::Episode, lr: f64) {
        use egt::heads::{cosine_head_grads, ClassPrototypes};
        let beta = match self.model.head {
            egt::model::Head::Cosine { beta } => beta,
            _ => panic!("plain trainer covers the cosine head"),
        };
        let ns = ep.support_labels.len();
        let (feats, trace) = self.model.embed(&ep.all_images(), true).unwrap();
        let rows = feats.unstack();
        let support = Tensor::stack(&rows[..ns]).unwrap();
        let queries = Tensor::stack(&rows[ns..]).unwrap();
        let protos = ClassPrototypes::from_support(&support, &ep.support_labels, ep.way).unwrap();
        let g = cosine_head_grads(&protos, &queries, &ep.query_labels, beta, None).unwrap();
        let mut grads = protos.support_grad(&g.d_protos, &ep.support_labels).unstack();
        grads.extend(g.d_queries.unstack());
        let pg = self
            .model
            .encoder
            .backward_params(&trace.unwrap(), &Tensor::stack(&grads).unwrap())
            .unwrap();
        self.opt.step(&mut self.model.encoder, &pg, lr).unwrap();
    }
}

/// Every encoder parameter in layer order, weights before biases.
pub fn encoder_params(model: &egt::model::FewShotModel) -> Vec<f64> {
    model
        .encoder
        .layers()
        .iter()
        .filter_map(|l| l.params())
        .flat_map(|(w, b)| w.data().iter().chain(b.data()).copied().collect::<Vec<_>>())
        .collect()
}
