//! Episodic training with optional explanation-guided re-weighting.
//!
//! Per episode: classify the queries (`p`), explain the predicted class of each
//! query down to the classifier input, turn the normalized relevance into
//! weights `w = 1 + R`, classify the re-weighted input again (`p_lrp`) and
//! descend on `xi * CE(p) + lambda * CE(p_lrp)`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Episode;
use crate::error::{Error, Result};
use crate::heads::{
    cosine_head_grads, cross_entropy, lrp_through_head, predicted_class, relation_head_grads, relation_pairs,
    relevance_init_nonparametric, relevance_init_parametric, ClassPrototypes, HeadGrads, HeadKind, HeadPass,
};
use crate::io_util::write_atomic;
use crate::lrp::{normalize_relevance, LrpConfig};
use crate::model::{FewShotModel, Head};
use crate::net::{ParamGrads, Sgd};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub xi: f64,
    pub lambda: f64,
    pub lrp: LrpConfig,
    pub lr: f64,
    pub momentum: f64,
    /// Multiply the learning rate by `lr_decay` every `lr_decay_every` epochs.
    pub lr_decay: f64,
    pub lr_decay_every: usize,
    pub episodes_per_epoch: usize,
    pub epochs: usize,
    pub way: usize,
    pub shot: usize,
    pub queries: usize,
    pub seed: u64,
    /// Treat the relevance weights as constants in the backward pass.
    pub stop_gradient_through_weights: bool,
    /// Write a checkpoint every this many epochs (0: only after the last epoch).
    pub checkpoint_every: usize,
}

/// `(xi, lambda)` of explanation-guided training for a head and shot count.
pub fn egt_weights(head: HeadKind, shot: usize) -> (f64, f64) {
    match (head, shot) {
        (HeadKind::Cosine, _) => (0.0, 1.0),
        (HeadKind::Relation, 1) => (1.0, 0.5),
        (HeadKind::Relation, _) => (1.0, 1.0),
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            xi: 1.0,
            lambda: 0.0,
            lrp: LrpConfig::default(),
            lr: 1e-3,
            momentum: 0.9,
            lr_decay: 0.5,
            lr_decay_every: 40,
            episodes_per_epoch: 100,
            epochs: 100,
            way: 5,
            shot: 5,
            queries: 16,
            seed: 0,
            stop_gradient_through_weights: true,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    /// Conventional episodic training: only the plain prediction is scored.
    pub fn baseline() -> Self {
        TrainConfig::default()
    }

    /// Explanation-guided training with the default loss weights for `head`.
    pub fn egt(head: HeadKind, shot: usize) -> Self {
        let (xi, lambda) = egt_weights(head, shot);
        TrainConfig {
            xi,
            lambda,
            shot,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.xi >= 0.0 && self.lambda >= 0.0 && self.xi.is_finite() && self.lambda.is_finite()) {
            return bad(format!("xi and lambda must be >= 0, got {} and {}", self.xi, self.lambda));
        }
        if self.xi + self.lambda <= 0.0 {
            return bad("xi + lambda must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad(format!("lr_decay must lie in (0, 1], got {}", self.lr_decay));
        }
        if self.way < 2 || self.shot == 0 || self.queries == 0 {
            return bad(format!(
                "need way >= 2, shot >= 1 and queries >= 1, got {}/{}/{}",
                self.way, self.shot, self.queries
            ));
        }
        self.lrp.validate()
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        if self.lr_decay_every == 0 {
            return self.lr;
        }
        self.lr * self.lr_decay.powi((epoch / self.lr_decay_every) as i32)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeResult {
    pub loss_plain: f64,
    pub loss_lrp: f64,
    pub loss_total: f64,
    /// Predicted class of every query from `p` and from `p_lrp`.
    pub pred: Vec<usize>,
    pub pred_lrp: Vec<usize>,
    /// Query accuracy of `p`.
    pub accuracy: f64,
}

/// `w = 1 + R` for relevance normalized into `[-1, 1]`.
pub fn lrp_weights(rel_normalized: &Tensor) -> Result<Tensor> {
    if let Some(v) = rel_normalized.data().iter().find(|v| !(-1.0..=1.0).contains(*v)) {
        return Err(Error::Contract(format!("normalized relevance {v} outside [-1, 1]")));
    }
    Ok(rel_normalized.map(|r| 1.0 + r))
}

/// Elementwise `f_p * w`.
pub fn weighted_features(f_p: &Tensor, w: &Tensor) -> Result<Tensor> {
    f_p.zip_map(w, |a, b| a * b)
}

/// `xi * CE(y, p) + lambda * CE(y, p_lrp)` for one query.
pub fn egt_loss(y: usize, p: &[f64], p_lrp: &[f64], xi: f64, lambda: f64) -> f64 {
    xi * cross_entropy(p, y) + lambda * cross_entropy(p_lrp, y)
}

/// Everything one episode contributes to a parameter update.
#[derive(Debug, Clone)]
pub struct EpisodeGrads {
    pub result: EpisodeResult,
    /// Relevance weights of every query, `[n_q, W..]`.
    pub weights: Tensor,
    pub encoder: ParamGrads,
    pub relation: Option<ParamGrads>,
}

/// Per-query relevance weights from the plain pass.
fn explain_weights(
    model: &FewShotModel,
    protos: &ClassPrototypes,
    queries: &Tensor,
    plain: &HeadGrads,
    lrp: &LrpConfig,
) -> Result<Tensor> {
    let mut rows = Vec::with_capacity(queries.outer());
    for (j, q) in queries.unstack().iter().enumerate() {
        let target = predicted_class(&plain.probs[j]);
        let rel = match &model.head {
            Head::Cosine { .. } => {
                let init = relevance_init_nonparametric(&plain.probs[j]);
                lrp_through_head(&HeadPass::Cosine { query: q, protos }, &init, target, lrp)?
            }
            Head::Relation { net } => {
                let init = relevance_init_parametric(&plain.scores[j]);
                let pairs = relation_pairs(q, protos)?;
                lrp_through_head(&HeadPass::Relation { net, pairs: &pairs }, &init, target, lrp)?
            }
        };
        rows.push(lrp_weights(&normalize_relevance(&rel))?);
    }
    Tensor::stack(&rows)
}

/// `a * x + b * y` over the terms whose coefficient is nonzero.
fn combine(a: f64, x: &Tensor, b: f64, y: &Tensor) -> Result<Tensor> {
    match (a != 0.0, b != 0.0) {
        (true, false) => Ok(x.scale(a)),
        (false, true) => Ok(y.scale(b)),
        _ => {
            let mut out = x.scale(a);
            out.add_scaled(y, b)?;
            Ok(out)
        }
    }
}

/// Adds the gradient that flows through `w = 1 + normalize(R)` of the cosine
/// head. After normalization `w_i = 1 + s * a_i / max|a|` with `a_i = q_i * p_hat_i`
/// for the target prototype and `s` the sign of the relevance scale.
#[allow(clippy::too_many_arguments)]
fn cosine_weight_path(
    protos: &ClassPrototypes,
    queries: &Tensor,
    plain: &HeadGrads,
    d_weights: &Tensor,
    lambda: f64,
    lrp: &LrpConfig,
    d_queries: &mut Tensor,
    d_protos: &mut Tensor,
) {
    let d = protos.dim();
    for j in 0..queries.outer() {
        let c = predicted_class(&plain.probs[j]);
        let r_c = relevance_init_nonparametric(&plain.probs[j])[c];
        let q = &queries.data()[j * d..(j + 1) * d];
        let p = protos.get(c);
        let pn = p.iter().map(|v| v * v).sum::<f64>().sqrt();
        let phat: Vec<f64> = p.iter().map(|v| v / pn).collect();
        let a: Vec<f64> = q.iter().zip(&phat).map(|(x, y)| x * y).collect();
        let m_idx = a
            .iter()
            .enumerate()
            .fold(0, |best, (i, v)| if v.abs() > a[best].abs() { i } else { best });
        let m = a[m_idx].abs();
        let y: f64 = a.iter().sum();
        let denom = y + lrp.epsilon * if y >= 0.0 { 1.0 } else { -1.0 };
        if r_c == 0.0 || m == 0.0 || denom == 0.0 {
            continue;
        }
        let s = (r_c / denom).signum();
        let gw: Vec<f64> = d_weights.data()[j * d..(j + 1) * d].iter().map(|g| lambda * g).collect();
        let ga_dot: f64 = gw.iter().zip(&a).map(|(g, v)| g * v).sum();
        let mut ga: Vec<f64> = gw.iter().map(|g| s * g / m).collect();
        ga[m_idx] -= s * a[m_idx].signum() * ga_dot / (m * m);
        let dq = &mut d_queries.data_mut()[j * d..(j + 1) * d];
        for i in 0..d {
            dq[i] += ga[i] * phat[i];
        }
        let g_phat: Vec<f64> = ga.iter().zip(q).map(|(g, x)| g * x).collect();
        let proj: f64 = g_phat.iter().zip(&phat).map(|(g, v)| g * v).sum();
        let dp = &mut d_protos.data_mut()[c * d..(c + 1) * d];
        for i in 0..d {
            dp[i] += (g_phat[i] - phat[i] * proj) / pn;
        }
    }
}

/// Runs the four training steps on one episode without touching parameters.
///
/// With `fixed_weights`, those relevance weights replace the ones the
/// explanation would produce.
pub fn episode_gradients(
    model: &FewShotModel,
    episode: &Episode,
    cfg: &TrainConfig,
    fixed_weights: Option<&Tensor>,
) -> Result<EpisodeGrads> {
    let ns = episode.support_labels.len();
    let (feats, trace) = model.embed(&episode.all_images(), true)?;
    let trace = trace.expect("recorded");
    let all = feats.unstack();
    let support = Tensor::stack(&all[..ns])?;
    let queries = Tensor::stack(&all[ns..])?;
    let protos = ClassPrototypes::from_support(&support, &episode.support_labels, episode.way)?;
    let labels = &episode.query_labels;

    let head = |w: Option<&Tensor>| match &model.head {
        Head::Cosine { beta } => cosine_head_grads(&protos, &queries, labels, *beta, w),
        Head::Relation { net } => relation_head_grads(net, &protos, &queries, labels, w),
    };
    let plain = head(None)?;
    let weights = match fixed_weights {
        Some(w) => w.clone(),
        None => explain_weights(model, &protos, &queries, &plain, &cfg.lrp)?,
    };
    let lrp = head(Some(&weights))?;

    let (xi, lambda) = (cfg.xi, cfg.lambda);
    let mut d_protos = combine(xi, &plain.d_protos, lambda, &lrp.d_protos)?;
    let mut d_queries = combine(xi, &plain.d_queries, lambda, &lrp.d_queries)?;
    if !cfg.stop_gradient_through_weights && lambda != 0.0 && fixed_weights.is_none() {
        match &model.head {
            Head::Cosine { .. } => cosine_weight_path(
                &protos,
                &queries,
                &plain,
                lrp.d_weights.as_ref().expect("weighted pass"),
                lambda,
                &cfg.lrp,
                &mut d_queries,
                &mut d_protos,
            ),
            Head::Relation { .. } => {
                return Err(Error::Config(
                    "gradients through relevance weights are only available for the cosine head".into(),
                ))
            }
        }
    }
    let relation = match (&plain.d_net, &lrp.d_net) {
        (Some(a), Some(b)) => {
            let mut g = ParamGrads::zeros(match &model.head {
                Head::Relation { net } => net,
                Head::Cosine { .. } => unreachable!("cosine head has no network"),
            });
            let mut a = a.clone();
            let mut b = b.clone();
            a.scale(xi);
            b.scale(lambda);
            match (xi != 0.0, lambda != 0.0) {
                (true, false) => g = a,
                (false, true) => g = b,
                _ => {
                    g.accumulate(&a)?;
                    g.accumulate(&b)?;
                }
            }
            Some(g)
        }
        _ => None,
    };

    let d_support = protos.support_grad(&d_protos, &episode.support_labels);
    let mut g_feats = d_support.unstack();
    g_feats.extend(d_queries.unstack());
    let encoder = model.encoder.backward_params(&trace, &Tensor::stack(&g_feats)?)?;

    let pred: Vec<usize> = plain.probs.iter().map(|p| predicted_class(p)).collect();
    let pred_lrp: Vec<usize> = lrp.probs.iter().map(|p| predicted_class(p)).collect();
    let correct = pred.iter().zip(labels).filter(|(a, b)| a == b).count();
    let result = EpisodeResult {
        loss_plain: plain.loss,
        loss_lrp: lrp.loss,
        loss_total: xi * plain.loss + lambda * lrp.loss,
        accuracy: correct as f64 / labels.len() as f64,
        pred,
        pred_lrp,
    };
    Ok(EpisodeGrads {
        result,
        weights,
        encoder,
        relation,
    })
}

/// Owns a model and its optimizer state.
pub struct Trainer {
    pub model: FewShotModel,
    pub cfg: TrainConfig,
    encoder_opt: Sgd,
    relation_opt: Sgd,
}

/// One row of the training log: means over an epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub epoch: usize,
    /// Episodes trained so far.
    pub step: usize,
    pub loss_plain: f64,
    pub loss_lrp: f64,
    pub loss_total: f64,
    pub acc: f64,
}

impl Trainer {
    pub fn new(model: FewShotModel, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if !cfg.stop_gradient_through_weights && model.head_kind() == HeadKind::Relation {
            return Err(Error::Config(
                "gradients through relevance weights are only available for the cosine head".into(),
            ));
        }
        Ok(Trainer {
            model,
            encoder_opt: Sgd::new(cfg.momentum)?,
            relation_opt: Sgd::new(cfg.momentum)?,
            cfg,
        })
    }

    /// Trains on one episode with learning rate `lr`.
    pub fn step(&mut self, episode: &Episode, lr: f64) -> Result<EpisodeResult> {
        let g = episode_gradients(&self.model, episode, &self.cfg, None)?;
        if !g.result.loss_total.is_finite() {
            return Err(Error::Numeric(format!("non-finite episode loss {}", g.result.loss_total)));
        }
        self.encoder_opt.step(&mut self.model.encoder, &g.encoder, lr)?;
        if let (Head::Relation { net }, Some(rg)) = (&mut self.model.head, &g.relation) {
            self.relation_opt.step(net, rg, lr)?;
        }
        Ok(g.result)
    }

    /// Runs the configured schedule, drawing episodes from `episodes`.
    ///
    /// Writes the CSV log to `log_path` and checkpoints to `checkpoint_path` when given.
    pub fn run(
        &mut self,
        episodes: &mut dyn Iterator<Item = Result<Episode>>,
        log_path: Option<&Path>,
        checkpoint_path: Option<&Path>,
    ) -> Result<Vec<LogRow>> {
        let mut rows = Vec::with_capacity(self.cfg.epochs);
        let mut step = 0;
        for epoch in 0..self.cfg.epochs {
            let lr = self.cfg.lr_at(epoch);
            let mut sums = [0.0; 4];
            for _ in 0..self.cfg.episodes_per_epoch {
                let ep = episodes
                    .next()
                    .ok_or_else(|| Error::Sampling("episode stream ended".into()))??;
                let r = self.step(&ep, lr)?;
                for (s, v) in sums.iter_mut().zip([r.loss_plain, r.loss_lrp, r.loss_total, r.accuracy]) {
                    *s += v;
                }
                step += 1;
            }
            let n = self.cfg.episodes_per_epoch.max(1) as f64;
            let row = LogRow {
                epoch,
                step,
                loss_plain: sums[0] / n,
                loss_lrp: sums[1] / n,
                loss_total: sums[2] / n,
                acc: sums[3] / n,
            };
            log::info!(
                "epoch {epoch}: loss {:.4} (plain {:.4}, lrp {:.4}) acc {:.3} lr {lr:.2e}",
                row.loss_total,
                row.loss_plain,
                row.loss_lrp,
                row.acc
            );
            rows.push(row);
            if let Some(path) = log_path {
                write_log(&rows, path)?;
            }
            let every = self.cfg.checkpoint_every;
            if let Some(path) = checkpoint_path {
                if every > 0 && (epoch + 1) % every == 0 && epoch + 1 < self.cfg.epochs {
                    self.model.save(path)?;
                }
            }
        }
        if let Some(path) = log_path {
            write_log(&rows, path)?;
        }
        if let Some(path) = checkpoint_path {
            self.model.save(path)?;
        }
        Ok(rows)
    }
}

pub fn encode_log(rows: &[LogRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    if rows.is_empty() {
        w.write_record(["epoch", "step", "loss_plain", "loss_lrp", "loss_total", "acc"])
            .map_err(|e| Error::InvalidData(e.to_string()))?;
    }
    for r in rows {
        w.serialize(r).map_err(|e| Error::InvalidData(e.to_string()))?;
    }
    w.into_inner().map_err(|e| Error::InvalidData(e.to_string()))
}

fn write_log(rows: &[LogRow], path: &Path) -> Result<()> {
    write_atomic(path, &encode_log(rows)?)
}

/// Trains `model` on `episodes` under `cfg`; see [`Trainer::run`].
pub fn train(
    model: FewShotModel,
    episodes: &mut dyn Iterator<Item = Result<Episode>>,
    cfg: &TrainConfig,
    log_path: Option<&Path>,
    checkpoint_path: Option<&Path>,
) -> Result<(FewShotModel, Vec<LogRow>)> {
    let mut t = Trainer::new(model, cfg.clone())?;
    let rows = t.run(episodes, log_path, checkpoint_path)?;
    Ok((t.model, rows))
}
