//! Layer-wise relevance propagation over recorded forward passes.
//!
//! Weighted layers use the ε-rule or the α-rule, parameter-free layers move
//! relevance along the forward index mapping. The assignment of rules to layer
//! kinds lives in [`LrpConfig::rule_map`]; the default explains linear layers
//! with ε and convolutions with α.

mod rules;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use rules::{lrp_alpha, lrp_alpha_with, lrp_epsilon, lrp_passthrough, lrp_passthrough_with};

use crate::error::{Error, Result};
use crate::net::{ForwardTrace, LayerKind, Network};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LrpRule {
    Epsilon,
    Alpha,
    /// Relevance follows the forward index mapping unchanged (relu, flatten).
    PassThrough,
    /// All of a pooling window's relevance goes to its maximum, lowest index on ties.
    WinnerTakesAll,
    /// A pooling window's relevance is split in proportion to its inputs.
    Proportional,
}

impl LrpRule {
    fn applies_to(self, kind: LayerKind) -> bool {
        use LayerKind::*;
        match self {
            LrpRule::Epsilon | LrpRule::Alpha => matches!(kind, Linear | Conv2d),
            LrpRule::PassThrough => matches!(kind, Relu | Flatten),
            LrpRule::WinnerTakesAll => kind == MaxPool2d,
            LrpRule::Proportional => matches!(kind, MaxPool2d | AvgPool2d),
        }
    }
}

/// Normalizers of the α-rule's positive and negative parts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AlphaDenominator {
    /// `y+ = sum_i (z_i w_ij)+ + b+` and `y- = sum_i (z_i w_ij)- + b-`.
    #[default]
    SignedContributions,
    /// `y+ = max(y, 0)` and `y- = min(y, 0)` of the recorded pre-activation.
    Clamped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrpConfig {
    pub epsilon: f64,
    pub alpha: f64,
    pub alpha_denominator: AlphaDenominator,
    pub rule_map: BTreeMap<LayerKind, LrpRule>,
}

impl Default for LrpConfig {
    fn default() -> Self {
        LrpConfig {
            epsilon: 1e-3,
            alpha: 1.0,
            alpha_denominator: AlphaDenominator::default(),
            rule_map: BTreeMap::from([
                (LayerKind::Linear, LrpRule::Epsilon),
                (LayerKind::Conv2d, LrpRule::Alpha),
                (LayerKind::Relu, LrpRule::PassThrough),
                (LayerKind::Flatten, LrpRule::PassThrough),
                (LayerKind::MaxPool2d, LrpRule::WinnerTakesAll),
                (LayerKind::AvgPool2d, LrpRule::Proportional),
            ]),
        }
    }
}

impl LrpConfig {
    /// Default rules with the given ε and α.
    pub fn with(epsilon: f64, alpha: f64) -> Self {
        LrpConfig {
            epsilon,
            alpha,
            ..LrpConfig::default()
        }
    }

    /// Every layer kind explained with `rule` where applicable, e.g. ε for all weighted layers.
    pub fn set_rule(mut self, kind: LayerKind, rule: LrpRule) -> Self {
        self.rule_map.insert(kind, rule);
        self
    }

    /// ε must be non-negative; zero is allowed for exact conservation checks.
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config(format!("epsilon must be >= 0, got {}", self.epsilon)));
        }
        if !(self.alpha >= 1.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be >= 1, got {}", self.alpha)));
        }
        for (&kind, &rule) in &self.rule_map {
            if !rule.applies_to(kind) {
                return Err(Error::Config(format!("rule {rule:?} cannot explain {kind} layers")));
            }
        }
        Ok(())
    }

    pub fn rule_for(&self, kind: LayerKind) -> Result<LrpRule> {
        self.rule_map
            .get(&kind)
            .copied()
            .ok_or_else(|| Error::Config(format!("no relevance rule configured for {kind} layers")))
    }
}

/// Relevance at every layer boundary of a network, aligned with a [`ForwardTrace`].
#[derive(Debug, Clone, PartialEq)]
pub struct RelevanceTrace {
    /// `relevances[l]` is the relevance of layer `l`'s input, with a leading batch axis;
    /// the last entry is the output relevance the pass started from.
    relevances: Vec<Tensor>,
    batched: bool,
}

impl RelevanceTrace {
    pub fn len(&self) -> usize {
        self.relevances.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Relevance of the input of layer `l` (`l == len` gives the output relevance), batched.
    pub fn at(&self, l: usize) -> &Tensor {
        &self.relevances[l]
    }

    pub fn output_relevance(&self) -> &Tensor {
        self.relevances.last().expect("non-empty")
    }

    /// Relevance of the network input, without the batch axis if the pass was unbatched.
    pub fn input_relevance(&self) -> Tensor {
        let r = self.relevances[0].clone();
        if self.batched {
            r
        } else {
            let shape = r.shape()[1..].to_vec();
            r.reshape(&shape).expect("same size")
        }
    }
}

/// Propagates `output_relevance` from the network output back to its input.
///
/// `output_relevance` has the shape of the traced output (batched or not).
pub fn lrp_backward(
    net: &Network,
    trace: &ForwardTrace,
    output_relevance: &Tensor,
    cfg: &LrpConfig,
) -> Result<RelevanceTrace> {
    cfg.validate()?;
    net.check_trace(trace)?;
    let rules = net
        .kinds()
        .map(|k| cfg.rule_for(k))
        .collect::<Result<Vec<_>>>()?;
    let out = net.batched_output(trace, output_relevance)?;
    if !out.is_finite() {
        return Err(Error::Numeric("non-finite output relevance".into()));
    }
    let batch = trace.batch_size();
    let mut relevances = vec![out];
    for l in (0..net.layers().len()).rev() {
        let layer = &net.layers()[l];
        let rel_out = relevances.last().expect("non-empty");
        let mut per_sample = Vec::with_capacity(batch);
        for b in 0..batch {
            let input = trace.input(l).index_outer(b);
            let r = rel_out.index_outer(b);
            let rel_in = match rules[l] {
                LrpRule::Epsilon => {
                    lrp_epsilon(layer, &input, &trace.output(l).index_outer(b), &r, cfg.epsilon)?
                }
                LrpRule::Alpha => lrp_alpha_with(
                    layer,
                    &input,
                    &trace.output(l).index_outer(b),
                    &r,
                    cfg.alpha,
                    cfg.alpha_denominator,
                )?,
                rule => lrp_passthrough_with(layer, &input, &r, rule)?,
            };
            if !rel_in.is_finite() {
                return Err(Error::NonFinite {
                    layer: l,
                    what: "relevance".into(),
                });
            }
            per_sample.push(rel_in);
        }
        relevances.push(Tensor::stack(&per_sample)?);
    }
    relevances.reverse();
    Ok(RelevanceTrace {
        relevances,
        batched: trace.is_batched(),
    })
}

/// Divides by the largest absolute value; an all-zero tensor is returned unchanged.
pub fn normalize_relevance(rel: &Tensor) -> Tensor {
    let m = rel.max_abs();
    if m == 0.0 {
        rel.clone()
    } else {
        rel.map(|v| (v / m).clamp(-1.0, 1.0))
    }
}
