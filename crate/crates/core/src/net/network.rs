use super::kernels;
use super::layer::{Layer, LayerKind};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// An ordered stack of layers whose shapes are validated at construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    layers: Vec<Layer>,
    /// `shapes[l]` is the per-sample input shape of layer `l`; the last entry is the output shape.
    shapes: Vec<Vec<usize>>,
}

/// Activations recorded by [`Network::forward`].
///
/// Every stored tensor carries a leading batch axis, even when the forward call
/// was made on a single unbatched sample.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    activations: Vec<Tensor>,
    batched: bool,
}

impl ForwardTrace {
    /// Number of layers covered by the trace.
    pub fn len(&self) -> usize {
        self.activations.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Input of layer `l`, shape `[B, ..]`.
    pub fn input(&self, l: usize) -> &Tensor {
        &self.activations[l]
    }

    /// Output of layer `l`; for weighted layers this is the pre-activation.
    pub fn output(&self, l: usize) -> &Tensor {
        &self.activations[l + 1]
    }

    pub fn batch_size(&self) -> usize {
        self.activations[0].shape()[0]
    }

    pub fn is_batched(&self) -> bool {
        self.batched
    }
}

/// Gradient of a parameterized layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Per-layer parameter gradients, `None` for parameter-free layers.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub layers: Vec<Option<LayerGrads>>,
}

impl ParamGrads {
    pub fn zeros(net: &Network) -> ParamGrads {
        ParamGrads {
            layers: net
                .layers()
                .iter()
                .map(|l| {
                    l.params().map(|(w, b)| LayerGrads {
                        weight: Tensor::zeros(w.shape()),
                        bias: Tensor::zeros(b.shape()),
                    })
                })
                .collect(),
        }
    }

    /// `self += other`
    pub fn accumulate(&mut self, other: &ParamGrads) -> Result<()> {
        if self.layers.len() != other.layers.len() {
            return Err(Error::Contract("gradient sets cover different networks".into()));
        }
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            match (a, b) {
                (Some(a), Some(b)) => {
                    a.weight.add_scaled(&b.weight, 1.0)?;
                    a.bias.add_scaled(&b.bias, 1.0)?;
                }
                (None, None) => {}
                _ => return Err(Error::Contract("gradient sets cover different networks".into())),
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, k: f64) {
        for g in self.layers.iter_mut().flatten() {
            g.weight = g.weight.scale(k);
            g.bias = g.bias.scale(k);
        }
    }

    /// Concatenation of all gradient values in layer order, weights before biases.
    pub fn flatten(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flatten()
            .flat_map(|g| g.weight.data().iter().chain(g.bias.data()).copied())
            .collect()
    }
}

impl Network {
    pub fn new(input_shape: &[usize], layers: Vec<Layer>) -> Result<Network> {
        if input_shape.is_empty() || input_shape.contains(&0) {
            return Err(Error::Shape(format!("invalid network input shape {input_shape:?}")));
        }
        let mut shapes = vec![input_shape.to_vec()];
        for (i, layer) in layers.iter().enumerate() {
            let next = layer
                .output_shape(shapes.last().expect("non-empty"))
                .map_err(|msg| Error::LayerShape { layer: i, msg })?;
            shapes.push(next);
        }
        Ok(Network { layers, shapes })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.shapes[0]
    }

    pub fn output_shape(&self) -> &[usize] {
        self.shapes.last().expect("non-empty")
    }

    /// Per-sample input shape of layer `l` (`l == len` gives the output shape).
    pub fn shape_at(&self, l: usize) -> &[usize] {
        &self.shapes[l]
    }

    /// Mutable views of a layer's `(weight, bias)` values. Shapes stay fixed.
    pub fn params_mut(&mut self, l: usize) -> Option<(&mut [f64], &mut [f64])> {
        self.layers[l]
            .params_mut()
            .map(|(w, b)| (w.data_mut(), b.data_mut()))
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .filter_map(|l| l.params())
            .map(|(w, b)| w.len() + b.len())
            .sum()
    }

    /// Returns `(batch, batched)` for an input of either the declared shape or `[B, ..declared]`.
    fn batch_of(&self, shape: &[usize]) -> Result<(usize, bool)> {
        if shape == self.input_shape() {
            Ok((1, false))
        } else if shape.len() == self.input_shape().len() + 1 && &shape[1..] == self.input_shape() {
            Ok((shape[0], true))
        } else {
            Err(Error::LayerShape {
                layer: 0,
                msg: format!(
                    "expected input {:?} (optionally batched), got {shape:?}",
                    self.input_shape()
                ),
            })
        }
    }

    fn batched_shape(&self, l: usize, batch: usize) -> Vec<usize> {
        let mut s = vec![batch];
        s.extend_from_slice(&self.shapes[l]);
        s
    }

    /// Runs the network. With `record`, returns every intermediate activation.
    pub fn forward(&self, x: &Tensor, record: bool) -> Result<(Tensor, Option<ForwardTrace>)> {
        let (batch, batched) = self.batch_of(x.shape())?;
        let mut current = x.clone().reshape(&self.batched_shape(0, batch))?;
        let mut activations = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            let next = self.layer_forward(l, layer, &current, batch);
            if !next.is_finite() {
                return Err(Error::NonFinite {
                    layer: l,
                    what: format!("{} output", layer.kind()),
                });
            }
            if record {
                activations.push(current);
            }
            current = next;
        }
        let trace = record.then(|| {
            activations.push(current.clone());
            ForwardTrace {
                activations,
                batched,
            }
        });
        let out = if batched {
            current
        } else {
            current.reshape(self.output_shape())?
        };
        Ok((out, trace))
    }

    fn layer_forward(&self, l: usize, layer: &Layer, x: &Tensor, batch: usize) -> Tensor {
        let in_shape = &self.shapes[l];
        let out_shape = &self.shapes[l + 1];
        let n_in: usize = in_shape.iter().product();
        let n_out: usize = out_shape.iter().product();
        let mut out = vec![0.0; batch * n_out];
        let src = x.data();
        match layer {
            Layer::Linear { weight, bias } => {
                for b in 0..batch {
                    kernels::linear(
                        &src[b * n_in..(b + 1) * n_in],
                        weight.data(),
                        Some(bias.data()),
                        &mut out[b * n_out..(b + 1) * n_out],
                    );
                }
            }
            Layer::Conv2d { weight, bias, .. } => {
                let g = layer.window(in_shape).expect("validated");
                out = kernels::conv2d_batch(src, batch, weight.data(), bias.data(), &g, out_shape[0]);
            }
            Layer::Relu => {
                for (o, &v) in out.iter_mut().zip(src) {
                    *o = v.max(0.0);
                }
            }
            Layer::MaxPool2d { .. } => {
                let g = layer.window(in_shape).expect("validated");
                for b in 0..batch {
                    let sample = &src[b * n_in..(b + 1) * n_in];
                    for (j, w) in kernels::maxpool_winners(sample, &g).into_iter().enumerate() {
                        out[b * n_out + j] = sample[w];
                    }
                }
            }
            Layer::AvgPool2d { .. } => {
                let g = layer.window(in_shape).expect("validated");
                for b in 0..batch {
                    kernels::avgpool(
                        &src[b * n_in..(b + 1) * n_in],
                        &g,
                        &mut out[b * n_out..(b + 1) * n_out],
                    );
                }
            }
            Layer::Flatten => out.copy_from_slice(src),
        }
        Tensor::from_parts(self.batched_shape(l + 1, batch), out)
    }

    /// Checks that `trace` was recorded on a network with this layer chain.
    pub(crate) fn check_trace(&self, trace: &ForwardTrace) -> Result<()> {
        if trace.len() != self.layers.len() {
            return Err(Error::Contract(format!(
                "trace covers {} layers, network has {}",
                trace.len(),
                self.layers.len()
            )));
        }
        let batch = trace.batch_size();
        for (l, a) in trace.activations.iter().enumerate() {
            if a.shape() != self.batched_shape(l, batch) {
                return Err(Error::Contract(format!(
                    "trace activation {l} has shape {:?}, network expects {:?}",
                    a.shape(),
                    self.batched_shape(l, batch)
                )));
            }
        }
        Ok(())
    }

    /// Normalizes a tensor aligned with the trace's output to the batched layout.
    pub(crate) fn batched_output(&self, trace: &ForwardTrace, t: &Tensor) -> Result<Tensor> {
        let want = self.batched_shape(self.layers.len(), trace.batch_size());
        let ok = if trace.batched {
            t.shape() == want.as_slice()
        } else {
            t.shape() == self.output_shape()
        };
        if !ok {
            return Err(Error::Shape(format!(
                "expected tensor shaped like the network output {:?}, got {:?}",
                if trace.batched { &want[..] } else { self.output_shape() },
                t.shape()
            )));
        }
        t.clone().reshape(&want)
    }

    /// Strips the batch axis again for traces recorded from an unbatched input.
    pub(crate) fn unbatch(&self, trace: &ForwardTrace, t: Tensor, l: usize) -> Result<Tensor> {
        if trace.batched {
            Ok(t)
        } else {
            t.reshape(&self.shapes[l])
        }
    }

    /// Backpropagates `grad_out` (the gradient of some scalar with respect to the
    /// network output) through a recorded pass.
    ///
    /// Parameter gradients are summed over the batch.
    pub fn backward_grad(
        &self,
        trace: &ForwardTrace,
        grad_out: &Tensor,
    ) -> Result<(Tensor, ParamGrads)> {
        let (g, grads) = self.backward(trace, grad_out, true)?;
        Ok((g.expect("requested"), grads))
    }

    /// Parameter gradients only; skips the input-gradient work of the first layer.
    pub fn backward_params(&self, trace: &ForwardTrace, grad_out: &Tensor) -> Result<ParamGrads> {
        Ok(self.backward(trace, grad_out, false)?.1)
    }

    fn backward(
        &self,
        trace: &ForwardTrace,
        grad_out: &Tensor,
        input_grad: bool,
    ) -> Result<(Option<Tensor>, ParamGrads)> {
        self.check_trace(trace)?;
        let batch = trace.batch_size();
        let mut grads = ParamGrads::zeros(self);
        let mut g = self.batched_output(trace, grad_out)?;
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let in_shape = &self.shapes[l];
            let n_in: usize = in_shape.iter().product();
            let n_out: usize = self.shapes[l + 1].iter().product();
            let x = trace.input(l).data();
            let go = g.data();
            let mut gin = vec![0.0; batch * n_in];
            match layer {
                Layer::Linear { weight, .. } => {
                    let lg = grads.layers[l].as_mut().expect("linear has params");
                    for b in 0..batch {
                        let gob = &go[b * n_out..(b + 1) * n_out];
                        let xb = &x[b * n_in..(b + 1) * n_in];
                        kernels::linear_transpose(gob, weight.data(), &mut gin[b * n_in..(b + 1) * n_in]);
                        kernels::linear_weight_grad(gob, xb, lg.weight.data_mut());
                        for (d, v) in lg.bias.data_mut().iter_mut().zip(gob) {
                            *d += v;
                        }
                    }
                }
                Layer::Conv2d { weight, .. } => {
                    let geo = layer.window(in_shape).expect("validated");
                    let lg = grads.layers[l].as_mut().expect("conv has params");
                    let gin_opt = (l > 0 || input_grad).then_some(&mut gin[..]);
                    kernels::conv2d_batch_backward(
                        go,
                        x,
                        batch,
                        weight.data(),
                        &geo,
                        self.shapes[l + 1][0],
                        lg.weight.data_mut(),
                        lg.bias.data_mut(),
                        gin_opt,
                    );
                }
                Layer::Relu => {
                    for ((d, &v), &gv) in gin.iter_mut().zip(x).zip(go) {
                        *d = if v > 0.0 { gv } else { 0.0 };
                    }
                }
                Layer::MaxPool2d { .. } => {
                    let geo = layer.window(in_shape).expect("validated");
                    for b in 0..batch {
                        let winners = kernels::maxpool_winners(&x[b * n_in..(b + 1) * n_in], &geo);
                        for (j, w) in winners.into_iter().enumerate() {
                            gin[b * n_in + w] += go[b * n_out + j];
                        }
                    }
                }
                Layer::AvgPool2d { .. } => {
                    let geo = layer.window(in_shape).expect("validated");
                    for b in 0..batch {
                        kernels::avgpool_transpose(
                            &go[b * n_out..(b + 1) * n_out],
                            &geo,
                            &mut gin[b * n_in..(b + 1) * n_in],
                        );
                    }
                }
                Layer::Flatten => gin.copy_from_slice(go),
            }
            g = Tensor::from_parts(self.batched_shape(l, batch), gin);
        }
        let grad_in = if input_grad { Some(self.unbatch(trace, g, 0)?) } else { None };
        Ok((grad_in, grads))
    }

    pub fn kinds(&self) -> impl Iterator<Item = LayerKind> + '_ {
        self.layers.iter().map(Layer::kind)
    }
}
