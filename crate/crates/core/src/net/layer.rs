use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use super::kernels::Window;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// The closed vocabulary of layer types a [`Network`](super::Network) may contain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Linear,
    Conv2d,
    Relu,
    MaxPool2d,
    AvgPool2d,
    Flatten,
}

impl LayerKind {
    pub const ALL: [LayerKind; 6] = [
        LayerKind::Linear,
        LayerKind::Conv2d,
        LayerKind::Relu,
        LayerKind::MaxPool2d,
        LayerKind::AvgPool2d,
        LayerKind::Flatten,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LayerKind::Linear => "linear",
            LayerKind::Conv2d => "conv2d",
            LayerKind::Relu => "relu",
            LayerKind::MaxPool2d => "maxpool2d",
            LayerKind::AvgPool2d => "avgpool2d",
            LayerKind::Flatten => "flatten",
        }
    }

    pub fn has_params(self) -> bool {
        matches!(self, LayerKind::Linear | LayerKind::Conv2d)
    }
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LayerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LayerKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown layer kind `{s}`")))
    }
}

/// One layer with its parameters and hyperparameters.
///
/// Linear weights are `[out, in]`; conv weights are `[out_c, in_c, k_h, k_w]`.
/// Padding is zero padding on every spatial border; max pooling never selects
/// a padded position.
#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Linear {
        weight: Tensor,
        bias: Tensor,
    },
    Conv2d {
        weight: Tensor,
        bias: Tensor,
        stride: usize,
        padding: usize,
    },
    Relu,
    MaxPool2d {
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    AvgPool2d {
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Flatten,
}

/// He-style uniform fan-in initialization, zero bias.
fn he_uniform<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    let limit = (6.0 / fan_in as f64).sqrt();
    let dist = Uniform::new_inclusive(-limit, limit).expect("finite positive limit");
    let n: usize = shape.iter().product();
    Tensor::from_parts(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect())
}

impl Layer {
    pub fn linear<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Layer {
        Layer::Linear {
            weight: he_uniform(&[outputs, inputs], inputs, rng),
            bias: Tensor::zeros(&[outputs]),
        }
    }

    pub fn conv2d<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Layer {
        Layer::Conv2d {
            weight: he_uniform(
                &[out_channels, in_channels, kernel, kernel],
                in_channels * kernel * kernel,
                rng,
            ),
            bias: Tensor::zeros(&[out_channels]),
            stride,
            padding,
        }
    }

    pub fn kind(&self) -> LayerKind {
        match self {
            Layer::Linear { .. } => LayerKind::Linear,
            Layer::Conv2d { .. } => LayerKind::Conv2d,
            Layer::Relu => LayerKind::Relu,
            Layer::MaxPool2d { .. } => LayerKind::MaxPool2d,
            Layer::AvgPool2d { .. } => LayerKind::AvgPool2d,
            Layer::Flatten => LayerKind::Flatten,
        }
    }

    /// `(weight, bias)` for parameterized layers.
    pub fn params(&self) -> Option<(&Tensor, &Tensor)> {
        match self {
            Layer::Linear { weight, bias } | Layer::Conv2d { weight, bias, .. } => {
                Some((weight, bias))
            }
            _ => None,
        }
    }

    pub fn params_mut(&mut self) -> Option<(&mut Tensor, &mut Tensor)> {
        match self {
            Layer::Linear { weight, bias } | Layer::Conv2d { weight, bias, .. } => {
                Some((weight, bias))
            }
            _ => None,
        }
    }

    /// Sliding-window geometry for conv and pooling layers given a `[C, H, W]` input.
    pub(crate) fn window(&self, input: &[usize]) -> Option<Window> {
        let &[c, h, w] = input else { return None };
        match self {
            Layer::Conv2d {
                weight,
                stride,
                padding,
                ..
            } => {
                let ws = weight.shape();
                Window::new(c, h, w, ws[2], ws[3], *stride, *padding)
            }
            Layer::MaxPool2d {
                kernel,
                stride,
                padding,
            }
            | Layer::AvgPool2d {
                kernel,
                stride,
                padding,
            } => Window::new(c, h, w, *kernel, *kernel, *stride, *padding),
            _ => None,
        }
    }

    /// Per-sample output shape, validating parameters against the input shape.
    pub fn output_shape(&self, input: &[usize]) -> std::result::Result<Vec<usize>, String> {
        match self {
            Layer::Linear { weight, bias } => {
                let ws = weight.shape();
                if ws.len() != 2 {
                    return Err(format!("linear weight must be rank 2, got {ws:?}"));
                }
                if bias.shape() != [ws[0]] {
                    return Err(format!(
                        "linear bias {:?} does not match {} outputs",
                        bias.shape(),
                        ws[0]
                    ));
                }
                if input != [ws[1]] {
                    return Err(format!("linear expects input [{}], got {input:?}", ws[1]));
                }
                Ok(vec![ws[0]])
            }
            Layer::Conv2d {
                weight,
                bias,
                stride,
                padding,
            } => {
                let ws = weight.shape();
                if ws.len() != 4 {
                    return Err(format!("conv2d weight must be rank 4, got {ws:?}"));
                }
                if bias.shape() != [ws[0]] {
                    return Err(format!(
                        "conv2d bias {:?} does not match {} output channels",
                        bias.shape(),
                        ws[0]
                    ));
                }
                if input.len() != 3 || input[0] != ws[1] {
                    return Err(format!(
                        "conv2d expects [{}, H, W] input, got {input:?}",
                        ws[1]
                    ));
                }
                if *stride == 0 {
                    return Err("conv2d stride must be positive".into());
                }
                let g = Window::new(input[0], input[1], input[2], ws[2], ws[3], *stride, *padding)
                    .ok_or_else(|| format!("kernel {ws:?} larger than padded input {input:?}"))?;
                Ok(vec![ws[0], g.out_h, g.out_w])
            }
            Layer::Relu => Ok(input.to_vec()),
            Layer::MaxPool2d {
                kernel,
                stride,
                padding,
            }
            | Layer::AvgPool2d {
                kernel,
                stride,
                padding,
            } => {
                if input.len() != 3 {
                    return Err(format!("pooling expects [C, H, W] input, got {input:?}"));
                }
                if *kernel == 0 || *stride == 0 {
                    return Err("pooling kernel and stride must be positive".into());
                }
                if 2 * padding > *kernel {
                    return Err(format!("pool padding {padding} exceeds half of kernel {kernel}"));
                }
                let g = self
                    .window(input)
                    .ok_or_else(|| format!("pool kernel {kernel} larger than input {input:?}"))?;
                Ok(vec![input[0], g.out_h, g.out_w])
            }
            Layer::Flatten => Ok(vec![input.iter().product()]),
        }
    }
}
