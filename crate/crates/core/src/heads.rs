//! Metric classifier heads over encoder features, their relevance
//! initialization, and the relevance pass from a class score back onto the
//! classifier input.
//!
//! Features are handled in batches: a `[n, F..]` tensor holds `n` feature maps.
//! The cosine head compares flattened features; the relation head feeds
//! `concat(prototype, query)` along the leading axis into a relation network.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lrp::{lrp_backward, LrpConfig};
use crate::net::{ForwardTrace, Network, ParamGrads};
use crate::tensor::{argmax, Tensor};

/// Softmax scale of the cosine head.
pub const DEFAULT_BETA: f64 = 7.0;

/// Probabilities are clamped to `1 - PROB_CLAMP` before the log-odds of relevance initialization.
pub const PROB_CLAMP: f64 = 1e-7;

/// Cross-entropy clamps the true-class probability from below at this value.
pub const CE_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    Cosine,
    Relation,
}

impl HeadKind {
    pub fn name(self) -> &'static str {
        match self {
            HeadKind::Cosine => "cosine",
            HeadKind::Relation => "relation",
        }
    }
}

impl fmt::Display for HeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for HeadKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(HeadKind::Cosine),
            "relation" => Ok(HeadKind::Relation),
            _ => Err(Error::Config(format!("unknown head kind `{s}` (expected cosine or relation)"))),
        }
    }
}

/// Class-mean support features, one per episode class.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassPrototypes {
    /// `[K, F..]`
    protos: Tensor,
    counts: Vec<usize>,
}

impl ClassPrototypes {
    /// Averages the `[n, F..]` support features by their episode-local label.
    pub fn from_support(features: &Tensor, labels: &[usize], way: usize) -> Result<Self> {
        if features.rank() < 2 || features.outer() != labels.len() {
            return Err(Error::Shape(format!(
                "{} labels for support features shaped {:?}",
                labels.len(),
                features.shape()
            )));
        }
        let dim = features.len() / features.outer();
        let mut sums = vec![0.0; way * dim];
        let mut counts = vec![0usize; way];
        for (i, &l) in labels.iter().enumerate() {
            if l >= way {
                return Err(Error::Contract(format!("support label {l} outside 0..{way}")));
            }
            counts[l] += 1;
            let src = &features.data()[i * dim..(i + 1) * dim];
            for (s, v) in sums[l * dim..(l + 1) * dim].iter_mut().zip(src) {
                *s += v;
            }
        }
        if let Some(k) = counts.iter().position(|&c| c == 0) {
            return Err(Error::Contract(format!("class {k} has no support features")));
        }
        for (k, &c) in counts.iter().enumerate() {
            for s in &mut sums[k * dim..(k + 1) * dim] {
                *s /= c as f64;
            }
        }
        let mut shape = features.shape().to_vec();
        shape[0] = way;
        Ok(ClassPrototypes {
            protos: Tensor::new(shape, sums)?,
            counts,
        })
    }

    /// Prototypes given directly as a `[K, F..]` tensor.
    pub fn from_tensor(protos: Tensor) -> Result<Self> {
        if protos.rank() < 2 || protos.outer() < 2 {
            return Err(Error::Shape(format!("prototypes must be [K >= 2, F..], got {:?}", protos.shape())));
        }
        let counts = vec![1; protos.outer()];
        Ok(ClassPrototypes { protos, counts })
    }

    pub fn way(&self) -> usize {
        self.protos.outer()
    }

    pub fn feature_shape(&self) -> &[usize] {
        &self.protos.shape()[1..]
    }

    pub fn dim(&self) -> usize {
        self.protos.len() / self.way()
    }

    pub fn get(&self, k: usize) -> &[f64] {
        let d = self.dim();
        &self.protos.data()[k * d..(k + 1) * d]
    }

    pub fn as_tensor(&self) -> &Tensor {
        &self.protos
    }

    /// Number of support features averaged into each prototype.
    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    /// Distributes a gradient on the prototypes back onto the support features.
    pub fn support_grad(&self, d_protos: &Tensor, labels: &[usize]) -> Tensor {
        let d = self.dim();
        let mut out = Vec::with_capacity(labels.len() * d);
        for &l in labels {
            let n = self.counts[l] as f64;
            out.extend(d_protos.data()[l * d..(l + 1) * d].iter().map(|g| g / n));
        }
        let mut shape = self.protos.shape().to_vec();
        shape[0] = labels.len();
        Tensor::from_parts(shape, out)
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn cosine_row(q: &[f64], protos: &ClassPrototypes) -> Result<Vec<f64>> {
    if q.len() != protos.dim() {
        return Err(Error::Shape(format!(
            "query has {} features, prototypes {}",
            q.len(),
            protos.dim()
        )));
    }
    let nq = norm(q);
    if nq == 0.0 {
        return Err(Error::Degenerate("query embedding has zero norm".into()));
    }
    (0..protos.way())
        .map(|k| {
            let p = protos.get(k);
            let np = norm(p);
            if np == 0.0 {
                return Err(Error::Degenerate(format!("prototype {k} has zero norm")));
            }
            Ok((dot(q, p) / (nq * np)).clamp(-1.0, 1.0))
        })
        .collect()
}

/// Cosine similarity of one query feature to every prototype.
pub fn cosine_scores(query: &Tensor, protos: &ClassPrototypes) -> Result<Vec<f64>> {
    cosine_row(query.data(), protos)
}

/// `exp(beta * s_c) / sum_k exp(beta * s_k)`, shifted by the maximum score.
pub fn scaled_softmax(scores: &[f64], beta: f64) -> Vec<f64> {
    let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = scores.iter().map(|s| (beta * (s - m)).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Log-odds relevance `log(P / (1 - P) * (K - 1))`, positive exactly when `P > 1/K`.
///
/// Evaluated as `log(x (K - 1) / (K - x))` with `x = P K`, which is exactly zero
/// whenever `P * K` rounds to one.
pub fn relevance_init_nonparametric(probs: &[f64]) -> Vec<f64> {
    let k = probs.len() as f64;
    probs
        .iter()
        .map(|&p| {
            let x = p.clamp(f64::MIN_POSITIVE, 1.0 - PROB_CLAMP) * k;
            (x * (k - 1.0) / (k - x)).ln()
        })
        .collect()
}

/// Neural heads start relevance from their logits.
pub fn relevance_init_parametric(logits: &[f64]) -> Vec<f64> {
    logits.to_vec()
}

/// The `K` pairs `concat(p_k, q)` for one query, as a `[K, 2 F0, F..]` batch.
pub fn relation_pairs(query: &Tensor, protos: &ClassPrototypes) -> Result<Tensor> {
    if query.shape() != protos.feature_shape() {
        return Err(Error::Shape(format!(
            "query shaped {:?}, prototypes {:?}",
            query.shape(),
            protos.feature_shape()
        )));
    }
    let pairs = (0..protos.way())
        .map(|k| Tensor::concat(&protos.as_tensor().index_outer(k), query))
        .collect::<Result<Vec<_>>>()?;
    Tensor::stack(&pairs)
}

fn check_relation_net(net: &Network) -> Result<()> {
    if net.output_shape() != [1] {
        return Err(Error::Contract(format!(
            "relation network must output one score, got shape {:?}",
            net.output_shape()
        )));
    }
    Ok(())
}

/// Relation scores of one query against every prototype, with the recorded pass.
pub fn relation_head(
    query: &Tensor,
    protos: &ClassPrototypes,
    net: &Network,
) -> Result<(Vec<f64>, ForwardTrace)> {
    check_relation_net(net)?;
    let pairs = relation_pairs(query, protos)?;
    let (out, trace) = net.forward(&pairs, true)?;
    Ok((out.into_data(), trace.expect("recorded")))
}

/// The recorded classifier pass an explanation starts from.
pub enum HeadPass<'a> {
    Cosine {
        query: &'a Tensor,
        protos: &'a ClassPrototypes,
    },
    /// `pairs` is the relation network input for one query, as built by [`relation_pairs`].
    Relation {
        net: &'a Network,
        pairs: &'a Tensor,
    },
}

/// Relevance of the classifier input for class `target`, starting from `relevance_init[target]`.
///
/// The cosine head treats the similarity to the target as the linear form
/// `<q, p_hat / |q|>` and applies the ε-rule over its terms; the result has
/// the query's shape. The relation head runs the configured rules through
/// the relation network for the target pair; the result has the pair's shape.
pub fn lrp_through_head(
    pass: &HeadPass<'_>,
    relevance_init: &[f64],
    target: usize,
    cfg: &LrpConfig,
) -> Result<Tensor> {
    let r = *relevance_init
        .get(target)
        .ok_or_else(|| Error::Contract(format!("target {target} outside {} classes", relevance_init.len())))?;
    match pass {
        HeadPass::Cosine { query, protos } => {
            let q = query.data();
            if target >= protos.way() || q.len() != protos.dim() {
                return Err(Error::Shape("query or target does not match the prototypes".into()));
            }
            let p = protos.get(target);
            let (nq, np) = (norm(q), norm(p));
            if nq == 0.0 || np == 0.0 {
                return Err(Error::Degenerate("zero-norm embedding in cosine head".into()));
            }
            let terms: Vec<f64> = q.iter().zip(p).map(|(a, b)| a * b / (np * nq)).collect();
            let y: f64 = terms.iter().sum();
            let denom = y + cfg.epsilon * if y >= 0.0 { 1.0 } else { -1.0 };
            let data = if denom == 0.0 {
                vec![0.0; q.len()]
            } else {
                terms.iter().map(|t| r * t / denom).collect()
            };
            Tensor::new(query.shape().to_vec(), data)
        }
        HeadPass::Relation { net, pairs } => {
            check_relation_net(net)?;
            if target >= pairs.outer() {
                return Err(Error::Contract(format!("target {target} outside {} pairs", pairs.outer())));
            }
            let pair = pairs.index_outer(target);
            let (_, trace) = net.forward(&pair, true)?;
            let rel = lrp_backward(net, &trace.expect("recorded"), &Tensor::vector(vec![r]), cfg)?;
            Ok(rel.input_relevance())
        }
    }
}

/// Mean cross-entropy of a head over the queries of an episode, with gradients.
#[derive(Debug, Clone)]
pub struct HeadGrads {
    pub loss: f64,
    /// Cosine similarities or relation logits per query.
    pub scores: Vec<Vec<f64>>,
    /// Class probabilities per query.
    pub probs: Vec<Vec<f64>>,
    /// `[K, F..]`
    pub d_protos: Tensor,
    /// `[n_q, F..]`
    pub d_queries: Tensor,
    /// Gradient on the per-query input weights, `[n_q, W..]`, when weights were given.
    pub d_weights: Option<Tensor>,
    /// Relation network parameter gradients.
    pub d_net: Option<ParamGrads>,
}

/// `-log max(p_y, CE_CLAMP)` and `d/dp_y`-aware softmax gradient `p - onehot(y)`,
/// zeroed when the clamp is active.
fn ce_with_grad(probs: &[f64], y: usize) -> (f64, Vec<f64>) {
    let py = probs[y];
    if py < CE_CLAMP {
        return (-CE_CLAMP.ln(), vec![0.0; probs.len()]);
    }
    let mut g = probs.to_vec();
    g[y] -= 1.0;
    (-py.ln(), g)
}

pub fn cross_entropy(probs: &[f64], y: usize) -> f64 {
    -probs[y].max(CE_CLAMP).ln()
}

fn check_batch(queries: &Tensor, labels: &[usize], feature_shape: &[usize]) -> Result<()> {
    if queries.rank() < 2 || queries.outer() != labels.len() || &queries.shape()[1..] != feature_shape {
        return Err(Error::Shape(format!(
            "queries shaped {:?} with {} labels do not match features {:?}",
            queries.shape(),
            labels.len(),
            feature_shape
        )));
    }
    Ok(())
}

fn weighted(q: &[f64], w: Option<&[f64]>) -> Vec<f64> {
    match w {
        Some(w) => q.iter().zip(w).map(|(a, b)| a * b).collect(),
        None => q.to_vec(),
    }
}

/// Cosine head loss and gradients. With `weights` (`[n_q, F..]`) each query
/// feature is multiplied elementwise by its weights before classification.
pub fn cosine_head_grads(
    protos: &ClassPrototypes,
    queries: &Tensor,
    labels: &[usize],
    beta: f64,
    weights: Option<&Tensor>,
) -> Result<HeadGrads> {
    check_batch(queries, labels, protos.feature_shape())?;
    if let Some(w) = weights {
        w.expect_shape(queries.shape())?;
    }
    let (nq_total, d, kway) = (labels.len(), protos.dim(), protos.way());
    let scale = 1.0 / nq_total as f64;
    let pnorms: Vec<f64> = (0..kway).map(|k| norm(protos.get(k))).collect();
    let mut loss = 0.0;
    let mut probs = Vec::with_capacity(nq_total);
    let mut scores = Vec::with_capacity(nq_total);
    let mut d_protos = vec![0.0; kway * d];
    let mut d_queries = vec![0.0; nq_total * d];
    let mut d_weights = weights.map(|_| vec![0.0; nq_total * d]);
    for (j, &y) in labels.iter().enumerate() {
        let q_raw = &queries.data()[j * d..(j + 1) * d];
        let w = weights.map(|w| &w.data()[j * d..(j + 1) * d]);
        let q = weighted(q_raw, w);
        let s = cosine_row(&q, protos)?;
        let p = scaled_softmax(&s, beta);
        let (ce, g) = ce_with_grad(&p, y);
        loss += ce * scale;
        let qn = norm(&q);
        let mut dq = vec![0.0; d];
        for k in 0..kway {
            let gs = beta * g[k] * scale;
            if gs == 0.0 {
                continue;
            }
            let pk = protos.get(k);
            let pn = pnorms[k];
            let dp = &mut d_protos[k * d..(k + 1) * d];
            for i in 0..d {
                dq[i] += gs * (pk[i] / (pn * qn) - s[k] * q[i] / (qn * qn));
                dp[i] += gs * (q[i] / (qn * pn) - s[k] * pk[i] / (pn * pn));
            }
        }
        let out = &mut d_queries[j * d..(j + 1) * d];
        match w {
            Some(w) => {
                let dw = &mut d_weights.as_mut().expect("weighted")[j * d..(j + 1) * d];
                for i in 0..d {
                    out[i] = w[i] * dq[i];
                    dw[i] = q_raw[i] * dq[i];
                }
            }
            None => out.copy_from_slice(&dq),
        }
        probs.push(p);
        scores.push(s);
    }
    Ok(HeadGrads {
        loss,
        scores,
        probs,
        d_protos: Tensor::new(protos.as_tensor().shape().to_vec(), d_protos)?,
        d_queries: Tensor::new(queries.shape().to_vec(), d_queries)?,
        d_weights: d_weights.map(|v| Tensor::from_parts(queries.shape().to_vec(), v)),
        d_net: None,
    })
}

/// Relation head loss and gradients. With `weights` (`[n_q, 2 F0, F..]`) every
/// pair of query `j` is multiplied elementwise by row `j` before scoring.
pub fn relation_head_grads(
    net: &Network,
    protos: &ClassPrototypes,
    queries: &Tensor,
    labels: &[usize],
    weights: Option<&Tensor>,
) -> Result<HeadGrads> {
    check_relation_net(net)?;
    check_batch(queries, labels, protos.feature_shape())?;
    let (n, d, kway) = (labels.len(), protos.dim(), protos.way());
    let pair_len = 2 * d;
    if let Some(w) = weights {
        if w.len() != n * pair_len || w.outer() != n {
            return Err(Error::Shape(format!("pair weights shaped {:?}", w.shape())));
        }
    }
    // All n * K pairs in one batch, query-major.
    let mut batch = Vec::with_capacity(n * kway * pair_len);
    for j in 0..n {
        let q = &queries.data()[j * d..(j + 1) * d];
        let w = weights.map(|w| &w.data()[j * pair_len..(j + 1) * pair_len]);
        for k in 0..kway {
            let start = batch.len();
            batch.extend_from_slice(protos.get(k));
            batch.extend_from_slice(q);
            if let Some(w) = w {
                for (v, wi) in batch[start..].iter_mut().zip(w) {
                    *v *= wi;
                }
            }
        }
    }
    let mut shape = vec![n * kway, 2 * protos.feature_shape()[0]];
    shape.extend_from_slice(&protos.feature_shape()[1..]);
    let pairs = Tensor::new(shape, batch)?;
    let (logits, trace) = net.forward(&pairs, true)?;
    let trace = trace.expect("recorded");
    let scale = 1.0 / n as f64;
    let mut loss = 0.0;
    let mut probs = Vec::with_capacity(n);
    let mut scores = Vec::with_capacity(n);
    let mut g_logits = vec![0.0; n * kway];
    for (j, &y) in labels.iter().enumerate() {
        let s = logits.data()[j * kway..(j + 1) * kway].to_vec();
        let p = scaled_softmax(&s, 1.0);
        let (ce, g) = ce_with_grad(&p, y);
        loss += ce * scale;
        for (dst, gk) in g_logits[j * kway..(j + 1) * kway].iter_mut().zip(&g) {
            *dst = gk * scale;
        }
        probs.push(p);
        scores.push(s);
    }
    let (d_pairs, d_net) = net.backward_grad(&trace, &Tensor::new(vec![n * kway, 1], g_logits)?)?;
    let mut d_protos = vec![0.0; kway * d];
    let mut d_queries = vec![0.0; n * d];
    let mut d_weights = weights.map(|_| vec![0.0; n * pair_len]);
    for j in 0..n {
        let q = &queries.data()[j * d..(j + 1) * d];
        let w = weights.map(|w| &w.data()[j * pair_len..(j + 1) * pair_len]);
        for k in 0..kway {
            let g = &d_pairs.data()[(j * kway + k) * pair_len..(j * kway + k + 1) * pair_len];
            let raw: Vec<&f64> = protos.get(k).iter().chain(q).collect();
            let dp = &mut d_protos[k * d..(k + 1) * d];
            let dq = &mut d_queries[j * d..(j + 1) * d];
            for i in 0..pair_len {
                let wi = w.map_or(1.0, |w| w[i]);
                if i < d {
                    dp[i] += wi * g[i];
                } else {
                    dq[i - d] += wi * g[i];
                }
                if let Some(dw) = d_weights.as_mut() {
                    dw[j * pair_len + i] += raw[i] * g[i];
                }
            }
        }
    }
    let w_shape = weights.map(|w| w.shape().to_vec());
    Ok(HeadGrads {
        loss,
        scores,
        probs,
        d_protos: Tensor::new(protos.as_tensor().shape().to_vec(), d_protos)?,
        d_queries: Tensor::new(queries.shape().to_vec(), d_queries)?,
        d_weights: d_weights.map(|v| Tensor::from_parts(w_shape.expect("weighted"), v)),
        d_net: Some(d_net),
    })
}

/// Index of the most probable class, lowest index on ties.
pub fn predicted_class(probs: &[f64]) -> usize {
    argmax(probs)
}
