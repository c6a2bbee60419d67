//! Single-layer relevance redistribution rules, one sample at a time.

use super::{AlphaDenominator, LrpRule};
use crate::error::{Error, Result};
use crate::net::kernels::{self, Window};
use crate::net::{Layer, LayerKind};
use crate::tensor::Tensor;

/// A weighted layer viewed as the linear map `y = W z + b`.
enum WeightedMap {
    Dense,
    Conv { geometry: Window, out_channels: usize },
}

impl WeightedMap {
    fn apply(&self, z: &[f64], w: &[f64], out: &mut [f64]) {
        match self {
            WeightedMap::Dense => kernels::linear(z, w, None, out),
            WeightedMap::Conv { geometry, out_channels } => {
                kernels::conv2d(z, w, None, geometry, *out_channels, out)
            }
        }
    }

    /// `out += W^T s`
    fn apply_transpose(&self, s: &[f64], w: &[f64], out: &mut [f64]) {
        match self {
            WeightedMap::Dense => kernels::linear_transpose(s, w, out),
            WeightedMap::Conv { geometry, out_channels } => {
                kernels::conv2d_transpose(s, w, geometry, *out_channels, out)
            }
        }
    }
}

/// Weighted-layer view plus its parameters, after checking the recorded shapes.
fn weighted<'a>(
    layer: &'a Layer,
    input: &Tensor,
    pre_activation: &Tensor,
    rel_out: &Tensor,
) -> Result<(WeightedMap, &'a Tensor, &'a Tensor)> {
    let (weight, bias) = layer.params().ok_or_else(|| {
        Error::Contract(format!("{} layer has no weights to redistribute over", layer.kind()))
    })?;
    let out_shape = layer.output_shape(input.shape()).map_err(Error::Shape)?;
    if pre_activation.shape() != out_shape.as_slice() {
        return Err(Error::Shape(format!(
            "pre-activation {:?} does not match layer output {out_shape:?}",
            pre_activation.shape()
        )));
    }
    rel_out.expect_shape(&out_shape)?;
    let map = match layer.kind() {
        LayerKind::Linear => WeightedMap::Dense,
        _ => WeightedMap::Conv {
            geometry: layer.window(input.shape()).expect("validated conv input"),
            out_channels: out_shape[0],
        },
    };
    Ok((map, weight, bias))
}

fn sign(v: f64) -> f64 {
    if v >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

/// ε-rule: `R_i = z_i * sum_j w_ij * R_j / (y_j + ε·sign(y_j))` with `sign(0) = +1`.
///
/// `pre_activation` is the recorded `y` including bias, so bias relevance is
/// absorbed rather than passed on. A zero denominator contributes nothing.
pub fn lrp_epsilon(
    layer: &Layer,
    input: &Tensor,
    pre_activation: &Tensor,
    rel_out: &Tensor,
    epsilon: f64,
) -> Result<Tensor> {
    let (map, weight, _) = weighted(layer, input, pre_activation, rel_out)?;
    let s: Vec<f64> = pre_activation
        .data()
        .iter()
        .zip(rel_out.data())
        .map(|(&y, &r)| {
            let d = y + epsilon * sign(y);
            if d == 0.0 {
                0.0
            } else {
                r / d
            }
        })
        .collect();
    let mut c = vec![0.0; input.len()];
    map.apply_transpose(&s, weight.data(), &mut c);
    let data = input.data().iter().zip(&c).map(|(z, c)| z * c).collect();
    Ok(Tensor::from_parts(input.shape().to_vec(), data))
}

fn ratio(r: &[f64], d: &[f64], k: f64) -> Vec<f64> {
    r.iter()
        .zip(d)
        .map(|(&r, &d)| if d == 0.0 { 0.0 } else { k * r / d })
        .collect()
}

/// α-rule with the default [`AlphaDenominator::SignedContributions`] normalizers.
pub fn lrp_alpha(
    layer: &Layer,
    input: &Tensor,
    pre_activation: &Tensor,
    rel_out: &Tensor,
    alpha: f64,
) -> Result<Tensor> {
    lrp_alpha_with(
        layer,
        input,
        pre_activation,
        rel_out,
        alpha,
        AlphaDenominator::SignedContributions,
    )
}

/// α-rule: `R_i = sum_j R_j (α (z_i w_ij)^+ / y_j^+ − (α−1) (z_i w_ij)^− / y_j^−)`.
///
/// Terms whose normalizer is zero contribute nothing.
pub fn lrp_alpha_with(
    layer: &Layer,
    input: &Tensor,
    pre_activation: &Tensor,
    rel_out: &Tensor,
    alpha: f64,
    denominator: AlphaDenominator,
) -> Result<Tensor> {
    if alpha < 1.0 || !alpha.is_finite() {
        return Err(Error::Config(format!("alpha must be >= 1, got {alpha}")));
    }
    let (map, weight, bias) = weighted(layer, input, pre_activation, rel_out)?;
    let z = input.data();
    let z_pos: Vec<f64> = z.iter().map(|v| v.max(0.0)).collect();
    let z_neg: Vec<f64> = z.iter().map(|v| v.min(0.0)).collect();
    let w_pos: Vec<f64> = weight.data().iter().map(|v| v.max(0.0)).collect();
    let w_neg: Vec<f64> = weight.data().iter().map(|v| v.min(0.0)).collect();
    let n_out = rel_out.len();

    let (y_pos, y_neg) = match denominator {
        AlphaDenominator::SignedContributions => {
            let sum2 = |(za, wa): (&[f64], &[f64]), (zb, wb): (&[f64], &[f64])| {
                let mut acc = vec![0.0; n_out];
                let mut tmp = vec![0.0; n_out];
                map.apply(za, wa, &mut acc);
                map.apply(zb, wb, &mut tmp);
                acc.iter_mut().zip(&tmp).for_each(|(a, t)| *a += t);
                acc
            };
            let mut y_pos = sum2((&z_pos, &w_pos), (&z_neg, &w_neg));
            let mut y_neg = sum2((&z_pos, &w_neg), (&z_neg, &w_pos));
            let per_unit = n_out / bias.len();
            for (j, (p, n)) in y_pos.iter_mut().zip(y_neg.iter_mut()).enumerate() {
                let b = bias.data()[j / per_unit];
                *p += b.max(0.0);
                *n += b.min(0.0);
            }
            (y_pos, y_neg)
        }
        AlphaDenominator::Clamped => (
            pre_activation.data().iter().map(|v| v.max(0.0)).collect(),
            pre_activation.data().iter().map(|v| v.min(0.0)).collect(),
        ),
    };

    let r = rel_out.data();
    let mut out = vec![0.0; z.len()];
    let mut back = vec![0.0; z.len()];
    let mut scatter = |s: &[f64], zz: &[f64], ww: &[f64], sign: f64, out: &mut [f64]| {
        back.fill(0.0);
        map.apply_transpose(s, ww, &mut back);
        for ((o, &zi), &c) in out.iter_mut().zip(zz).zip(&back) {
            *o += sign * zi * c;
        }
    };
    let s_pos = ratio(r, &y_pos, alpha);
    scatter(&s_pos, &z_pos, &w_pos, 1.0, &mut out);
    scatter(&s_pos, &z_neg, &w_neg, 1.0, &mut out);
    if alpha > 1.0 {
        let s_neg = ratio(r, &y_neg, alpha - 1.0);
        scatter(&s_neg, &z_pos, &w_neg, -1.0, &mut out);
        scatter(&s_neg, &z_neg, &w_pos, -1.0, &mut out);
    }
    Ok(Tensor::from_parts(input.shape().to_vec(), out))
}

/// Relevance through a parameter-free layer with its default convention:
/// identity for relu and flatten, winner-takes-all for max pooling and
/// proportional splitting for average pooling.
pub fn lrp_passthrough(layer: &Layer, input: &Tensor, rel_out: &Tensor) -> Result<Tensor> {
    let rule = match layer.kind() {
        LayerKind::MaxPool2d => LrpRule::WinnerTakesAll,
        LayerKind::AvgPool2d => LrpRule::Proportional,
        _ => LrpRule::PassThrough,
    };
    lrp_passthrough_with(layer, input, rel_out, rule)
}

pub fn lrp_passthrough_with(
    layer: &Layer,
    input: &Tensor,
    rel_out: &Tensor,
    rule: LrpRule,
) -> Result<Tensor> {
    let out_shape = layer.output_shape(input.shape()).map_err(Error::Shape)?;
    rel_out.expect_shape(&out_shape)?;
    match (layer.kind(), rule) {
        (LayerKind::Relu | LayerKind::Flatten, LrpRule::PassThrough) => {
            rel_out.clone().reshape(input.shape())
        }
        (LayerKind::MaxPool2d, LrpRule::WinnerTakesAll) => {
            let g = layer.window(input.shape()).expect("validated");
            let mut out = vec![0.0; input.len()];
            for (j, w) in kernels::maxpool_winners(input.data(), &g).into_iter().enumerate() {
                out[w] += rel_out.data()[j];
            }
            Ok(Tensor::from_parts(input.shape().to_vec(), out))
        }
        (LayerKind::MaxPool2d | LayerKind::AvgPool2d, LrpRule::Proportional) => {
            let g = layer.window(input.shape()).expect("validated");
            Ok(Tensor::from_parts(
                input.shape().to_vec(),
                pool_proportional(input.data(), rel_out.data(), &g),
            ))
        }
        (kind, rule) => Err(Error::Config(format!("rule {rule:?} does not apply to {kind} layers"))),
    }
}

/// Splits each window's relevance in proportion to its inputs, equally when they sum to zero.
fn pool_proportional(z: &[f64], rel: &[f64], g: &Window) -> Vec<f64> {
    let mut out = vec![0.0; z.len()];
    let mut taps = Vec::with_capacity(g.kernel_h * g.kernel_w);
    for c in 0..g.channels_in {
        let base = c * g.in_plane();
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let r = rel[c * g.out_plane() + oy * g.out_w + ox];
                taps.clear();
                taps.extend(g.taps(oy, ox).map(|i| base + i));
                let total: f64 = taps.iter().map(|&i| z[i]).sum();
                if total == 0.0 {
                    let share = r / taps.len() as f64;
                    taps.iter().for_each(|&i| out[i] += share);
                } else {
                    taps.iter().for_each(|&i| out[i] += r * z[i] / total);
                }
            }
        }
    }
    out
}
