use super::network::{Network, ParamGrads};
use crate::error::{Error, Result};

/// Momentum SGD: `v <- momentum * v + g; p <- p - lr * v`.
///
/// Velocity buffers are created lazily on the first step and persist across calls,
/// so one optimizer must stay paired with one network.
#[derive(Debug, Clone)]
pub struct Sgd {
    momentum: f64,
    velocity: Vec<Option<(Vec<f64>, Vec<f64>)>>,
}

impl Sgd {
    pub fn new(momentum: f64) -> Result<Sgd> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {momentum}")));
        }
        Ok(Sgd {
            momentum,
            velocity: Vec::new(),
        })
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn step(&mut self, net: &mut Network, grads: &ParamGrads, lr: f64) -> Result<()> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {lr}")));
        }
        if grads.layers.len() != net.layers().len() {
            return Err(Error::Contract(format!(
                "gradients cover {} layers, network has {}",
                grads.layers.len(),
                net.layers().len()
            )));
        }
        // Validate everything before touching any parameter.
        for (l, (layer, g)) in net.layers().iter().zip(&grads.layers).enumerate() {
            match (layer.params(), g) {
                (Some((w, b)), Some(g)) => {
                    if g.weight.shape() != w.shape() || g.bias.shape() != b.shape() {
                        return Err(Error::LayerShape {
                            layer: l,
                            msg: "gradient shape does not match parameters".into(),
                        });
                    }
                    if !g.weight.is_finite() || !g.bias.is_finite() {
                        return Err(Error::NonFinite {
                            layer: l,
                            what: "gradient".into(),
                        });
                    }
                }
                (None, None) => {}
                _ => {
                    return Err(Error::LayerShape {
                        layer: l,
                        msg: "gradient presence does not match layer parameters".into(),
                    })
                }
            }
        }
        if self.velocity.is_empty() {
            self.velocity = grads
                .layers
                .iter()
                .map(|g| {
                    g.as_ref()
                        .map(|g| (vec![0.0; g.weight.len()], vec![0.0; g.bias.len()]))
                })
                .collect();
        }
        for (l, g) in grads.layers.iter().enumerate() {
            let (Some(g), Some((vw, vb))) = (g, self.velocity[l].as_mut()) else {
                continue;
            };
            let (w, b) = net.params_mut(l).expect("validated above");
            update(w, vw, g.weight.data(), lr, self.momentum);
            update(b, vb, g.bias.data(), lr, self.momentum);
        }
        Ok(())
    }
}

fn update(param: &mut [f64], velocity: &mut [f64], grad: &[f64], lr: f64, momentum: f64) {
    for ((p, v), &g) in param.iter_mut().zip(velocity.iter_mut()).zip(grad) {
        *v = momentum * *v + g;
        *p -= lr * *v;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{Layer, LayerGrads};
    use crate::tensor::Tensor;

    fn scalar_net(w: f64) -> Network {
        Network::new(
            &[1],
            vec![Layer::Linear {
                weight: Tensor::new(vec![1, 1], vec![w]).unwrap(),
                bias: Tensor::zeros(&[1]),
            }],
        )
        .unwrap()
    }

    fn grad(g: f64) -> ParamGrads {
        ParamGrads {
            layers: vec![Some(LayerGrads {
                weight: Tensor::new(vec![1, 1], vec![g]).unwrap(),
                bias: Tensor::zeros(&[1]),
            })],
        }
    }

    fn weight(net: &Network) -> f64 {
        net.layers()[0].params().unwrap().0.data()[0]
    }

    #[test]
    fn plain_step() {
        let mut net = scalar_net(1.0);
        Sgd::new(0.0).unwrap().step(&mut net, &grad(1.0), 0.1).unwrap();
        assert!((weight(&net) - 0.9).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut net = scalar_net(0.7);
        let mut opt = Sgd::new(0.9).unwrap();
        for _ in 0..5 {
            opt.step(&mut net, &grad(0.0), 0.1).unwrap();
        }
        assert_eq!(weight(&net), 0.7);
    }

    #[test]
    fn momentum_accumulates() {
        let mut net = scalar_net(0.0);
        let mut opt = Sgd::new(0.9).unwrap();
        opt.step(&mut net, &grad(1.0), 0.1).unwrap();
        assert!((weight(&net) + 0.1).abs() < 1e-15);
        opt.step(&mut net, &grad(1.0), 0.1).unwrap();
        assert!((weight(&net) + 0.29).abs() < 1e-12);
    }

    #[test]
    fn non_finite_gradient_names_layer() {
        let mut net = scalar_net(0.5);
        let mut g = grad(0.0);
        g.layers[0].as_mut().unwrap().weight.data_mut()[0] = f64::INFINITY;
        let err = Sgd::new(0.9).unwrap().step(&mut net, &g, 0.1).unwrap_err();
        assert!(matches!(err, Error::NonFinite { layer: 0, .. }));
        assert_eq!(weight(&net), 0.5);
    }

    #[test]
    fn rejects_bad_hyperparameters() {
        assert!(Sgd::new(1.0).is_err());
        assert!(Sgd::new(-0.1).is_err());
        let mut net = scalar_net(0.5);
        assert!(Sgd::new(0.0).unwrap().step(&mut net, &grad(1.0), 0.0).is_err());
    }
}
