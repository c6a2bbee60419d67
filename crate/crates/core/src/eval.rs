//! Episodic evaluation, transductive inference, feature statistics and heatmaps.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Episode, EpisodeSampler, LabeledImageSet};
use crate::error::{Error, Result};
use crate::heads::{
    lrp_through_head, predicted_class, relation_pairs, relevance_init_nonparametric, relevance_init_parametric,
    ClassPrototypes, HeadPass,
};
use crate::io_util::write_atomic;
use crate::lrp::{lrp_backward, LrpConfig};
use crate::model::{FewShotModel, Head};
use crate::tensor::Tensor;

/// Episodes sampled ahead of one parallel evaluation round.
const EVAL_CHUNK: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub way: usize,
    pub shot: usize,
    pub queries: usize,
    pub episodes: usize,
    pub seed: u64,
    /// Queries absorbed into the support set per transductive iteration; empty for plain inference.
    pub candidates: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            way: 5,
            shot: 5,
            queries: 16,
            episodes: 2000,
            seed: 0,
            candidates: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub episodes: usize,
    pub mean_acc: f64,
    /// Half-width of the 95% confidence interval of `mean_acc`.
    pub ci95: f64,
    /// Set when the interval is undefined (a single episode); `ci95` is then 0.
    pub degenerate: bool,
    pub accuracies: Vec<f64>,
    pub domain: String,
    pub config: EvalConfig,
}

/// Mean and `1.96 * s / sqrt(n)` with the sample standard deviation `s`.
///
/// Returns `(mean, half_width, degenerate)`; `n < 2` gives a zero half-width flagged degenerate.
pub fn mean_ci95(values: &[f64]) -> (f64, f64, bool) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, 0.0, true);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0, true);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, 1.96 * var.sqrt() / (n as f64).sqrt(), false)
}

impl EvalReport {
    pub fn from_accuracies(accuracies: Vec<f64>, domain: &str, config: EvalConfig) -> Self {
        let (mean_acc, ci95, degenerate) = mean_ci95(&accuracies);
        EvalReport {
            episodes: accuracies.len(),
            mean_acc,
            ci95,
            degenerate,
            accuracies,
            domain: domain.to_string(),
            config,
        }
    }

    /// `episodes,mean_acc,ci95` with one data row.
    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let err = |e: csv::Error| Error::InvalidData(format!("encoding report: {e}"));
        w.write_record(["episodes", "mean_acc", "ci95"]).map_err(err)?;
        w.write_record([self.episodes.to_string(), self.mean_acc.to_string(), self.ci95.to_string()])
            .map_err(err)?;
        w.into_inner().map_err(|e| Error::InvalidData(format!("encoding report: {e}")))
    }

    pub fn summary(&self) -> String {
        let flag = if self.degenerate { " (CI undefined for a single episode)" } else { "" };
        format!(
            "{}: {:.2}% +- {:.2}% over {} episodes{}",
            self.domain,
            100.0 * self.mean_acc,
            100.0 * self.ci95,
            self.episodes,
            flag
        )
    }
}

/// Class probabilities of every query, optionally with transductive support augmentation.
pub fn episode_predictions(model: &FewShotModel, episode: &Episode, candidates: &[usize]) -> Result<Vec<Vec<f64>>> {
    if candidates.is_empty() {
        return model.predict(episode);
    }
    Ok(transductive_infer(model, episode, candidates)?.probs)
}

fn episode_accuracy(model: &FewShotModel, episode: &Episode, candidates: &[usize]) -> Result<f64> {
    let probs = episode_predictions(model, episode, candidates)?;
    let hits = probs
        .iter()
        .zip(&episode.query_labels)
        .filter(|(p, &y)| predicted_class(p) == y)
        .count();
    Ok(hits as f64 / episode.n_query() as f64)
}

/// Mean query accuracy over freshly sampled episodes of `set`.
///
/// Episodes are drawn sequentially from one seeded sampler and scored in
/// parallel, so the report does not depend on the number of worker threads.
pub fn evaluate(model: &FewShotModel, set: &LabeledImageSet, cfg: &EvalConfig) -> Result<EvalReport> {
    if cfg.episodes == 0 {
        return Err(Error::Config("need at least one evaluation episode".into()));
    }
    check_candidates(&cfg.candidates)?;
    let mut sampler = EpisodeSampler::new(set, cfg.way, cfg.shot, cfg.queries, cfg.seed);
    let mut accuracies = Vec::with_capacity(cfg.episodes);
    while accuracies.len() < cfg.episodes {
        let n = EVAL_CHUNK.min(cfg.episodes - accuracies.len());
        let chunk = sampler.by_ref().take(n).collect::<Result<Vec<_>>>()?;
        let accs = chunk
            .par_iter()
            .map(|e| episode_accuracy(model, e, &cfg.candidates))
            .collect::<Result<Vec<_>>>()?;
        accuracies.extend(accs);
    }
    Ok(EvalReport::from_accuracies(accuracies, set.domain_tag(), cfg.clone()))
}

fn check_candidates(candidates: &[usize]) -> Result<()> {
    if candidates.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::Config(format!("candidate counts must be nondecreasing, got {candidates:?}")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransductiveResult {
    /// Final class probabilities of every query.
    pub probs: Vec<Vec<f64>>,
    /// Size of the working support set after each iteration.
    pub support_sizes: Vec<usize>,
    /// Query indices absorbed in each iteration, most confident first.
    pub absorbed: Vec<Vec<usize>>,
}

/// Repeatedly moves the most confidently classified queries, with their predicted
/// labels, into a working copy of the support set and re-classifies.
///
/// Each iteration picks `candidates[t]` queries not absorbed yet, ranked by
/// maximum class probability over all queries of the episode (ties go to the
/// lower index). Counts beyond the remaining queries are clamped with a warning.
pub fn transductive_infer(model: &FewShotModel, episode: &Episode, candidates: &[usize]) -> Result<TransductiveResult> {
    check_candidates(candidates)?;
    let ns = episode.support_labels.len();
    let (feats, _) = model.embed(&episode.all_images(), false)?;
    let all = feats.unstack();
    let queries = Tensor::stack(&all[ns..])?;
    let mut support: Vec<Tensor> = all[..ns].to_vec();
    let mut labels = episode.support_labels.clone();
    let mut taken = vec![false; episode.n_query()];

    let classify = |support: &[Tensor], labels: &[usize]| -> Result<Vec<Vec<f64>>> {
        let protos = ClassPrototypes::from_support(&Tensor::stack(support)?, labels, episode.way)?;
        model.classify(&protos, &queries)
    };

    let mut probs = classify(&support, &labels)?;
    let mut support_sizes = Vec::with_capacity(candidates.len());
    let mut absorbed = Vec::with_capacity(candidates.len());
    for (t, &want) in candidates.iter().enumerate() {
        let mut open: Vec<usize> = (0..taken.len()).filter(|&j| !taken[j]).collect();
        if want > open.len() {
            log::warn!(
                "transductive iteration {t}: {want} candidates requested but only {} queries remain",
                open.len()
            );
        }
        let conf = |j: usize| probs[j].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        open.sort_by(|&a, &b| conf(b).total_cmp(&conf(a)).then(a.cmp(&b)));
        open.truncate(want);
        for &j in &open {
            taken[j] = true;
            support.push(all[ns + j].clone());
            labels.push(predicted_class(&probs[j]));
        }
        support_sizes.push(support.len());
        absorbed.push(open);
        probs = classify(&support, &labels)?;
    }
    Ok(TransductiveResult {
        probs,
        support_sizes,
        absorbed,
    })
}

/// Input-level relevance of query `query` for class `target` (the predicted
/// class when `None`), shaped like one image.
pub fn explain_query(
    model: &FewShotModel,
    episode: &Episode,
    query: usize,
    target: Option<usize>,
    cfg: &LrpConfig,
) -> Result<(Tensor, Vec<f64>)> {
    if query >= episode.n_query() {
        return Err(Error::Contract(format!("query {query} outside {} queries", episode.n_query())));
    }
    let support = model.embed(&episode.support, false)?.0;
    let protos = ClassPrototypes::from_support(&support, &episode.support_labels, episode.way)?;
    let image = episode.query.index_outer(query);
    let (feat, trace) = model.encoder.forward(&image, true)?;
    let trace = trace.expect("recorded");
    let probs = model.classify(&protos, &Tensor::stack(std::slice::from_ref(&feat))?)?.remove(0);
    let target = target.unwrap_or_else(|| predicted_class(&probs));
    if target >= episode.way {
        return Err(Error::Contract(format!("target {target} outside {} classes", episode.way)));
    }
    let feat_rel = match &model.head {
        Head::Cosine { .. } => {
            let init = relevance_init_nonparametric(&probs);
            lrp_through_head(&HeadPass::Cosine { query: &feat, protos: &protos }, &init, target, cfg)?
        }
        Head::Relation { net } => {
            let pairs = relation_pairs(&feat, &protos)?;
            let logits = net.forward(&pairs, false)?.0.into_data();
            let init = relevance_init_parametric(&logits);
            let pair_rel = lrp_through_head(&HeadPass::Relation { net, pairs: &pairs }, &init, target, cfg)?;
            // The pair is concat(prototype, query) along channels; keep the query half.
            let half = pair_rel.len() / 2;
            Tensor::new(feat.shape().to_vec(), pair_rel.data()[half..].to_vec())?
        }
    };
    let rel = lrp_backward(&model.encoder, &trace, &feat_rel, cfg)?;
    Ok((rel.input_relevance(), probs))
}

/// Linear-interpolation quantile of unsorted values: `x[floor h] + frac(h) * (x[ceil h] - x[floor h])`
/// with `h = (n - 1) q` on the sorted values.
pub fn quantile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Contract("quantile of an empty set".into()));
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::Contract(format!("quantile fraction must lie in [0, 1], got {q}")));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let h = (v.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(v.len() - 1);
    Ok(v[lo] + (h - lo as f64) * (v[hi] - v[lo]))
}

/// Per-channel `q`-quantile over the spatial positions of a `[C, H, W]` map.
pub fn spatial_quantile_pool(feat: &Tensor, q: f64) -> Result<Vec<f64>> {
    if feat.rank() != 3 {
        return Err(Error::Shape(format!("expected a [C, H, W] map, got {:?}", feat.shape())));
    }
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::Contract(format!("quantile fraction must lie in (0, 1), got {q}")));
    }
    let plane = feat.shape()[1] * feat.shape()[2];
    if plane == 0 {
        return Err(Error::Contract("empty spatial extent".into()));
    }
    feat.data().chunks_exact(plane).map(|ch| quantile(ch, q)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FeatureStats {
    /// 95% spatial quantile of every channel.
    pub f: Vec<f64>,
    /// Population variance of `f` across channels.
    pub s2: f64,
    /// 95% minus 45% quantile of `f`.
    pub qdiff: f64,
}

pub fn feature_stats(feat: &Tensor) -> Result<FeatureStats> {
    let f = spatial_quantile_pool(feat, 0.95)?;
    if f.len() < 2 {
        return Err(Error::Contract(format!("feature statistics need >= 2 channels, got {}", f.len())));
    }
    let c = f.len() as f64;
    let mean = f.iter().sum::<f64>() / c;
    let s2 = f.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c;
    let qdiff = quantile(&f, 0.95)? - quantile(&f, 0.45)?;
    Ok(FeatureStats { f, s2, qdiff })
}

/// Feature statistics of the encoder output for every image of `set`, in storage order.
pub fn dataset_feature_stats(model: &FewShotModel, set: &LabeledImageSet) -> Result<Vec<FeatureStats>> {
    if set.is_empty() {
        return Err(Error::InvalidData("empty dataset".into()));
    }
    if model.encoder.input_shape() != set.image_shape() {
        return Err(Error::Shape(format!(
            "model expects {:?} images, dataset has {:?}",
            model.encoder.input_shape(),
            set.image_shape()
        )));
    }
    let ids: Vec<usize> = (0..set.len()).collect();
    let per_chunk: Vec<Vec<FeatureStats>> = ids
        .par_chunks(EVAL_CHUNK)
        .map(|chunk| {
            let (feats, _) = model.embed(&set.batch(chunk), false)?;
            feats.unstack().iter().map(feature_stats).collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(per_chunk.into_iter().flatten().collect())
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Colour of a relevance value already scaled into `[-1, 1]`: white at zero,
/// towards pure red `(255, 0, 0)` for +1 and pure blue `(0, 0, 255)` for -1.
pub fn diverging_color(v: f64) -> [u8; 3] {
    let fade = (255.0 * (1.0 - v.abs().min(1.0))).round() as u8;
    if v > 0.0 {
        [255, fade, fade]
    } else {
        [fade, fade, 255]
    }
}

/// Channel-summed relevance coloured by [`diverging_color`] after division by
/// the largest absolute value. With an underlay the colours are blended with
/// weight `alpha` over the underlay's grey level.
pub fn heatmap_pixels(rel: &Tensor, underlay: Option<(&Tensor, f64)>) -> Result<(usize, usize, Vec<u8>)> {
    if rel.rank() != 3 {
        return Err(Error::Shape(format!("expected [C, H, W] relevance, got {:?}", rel.shape())));
    }
    let (h, w) = (rel.shape()[1], rel.shape()[2]);
    let plane = h * w;
    let mut summed = vec![0.0; plane];
    for ch in rel.data().chunks_exact(plane) {
        for (s, v) in summed.iter_mut().zip(ch) {
            *s += v;
        }
    }
    let m = summed.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let grey = match underlay {
        Some((img, alpha)) => {
            if img.rank() != 3 || img.shape()[1..] != rel.shape()[1..] {
                return Err(Error::Shape(format!(
                    "underlay {:?} does not match relevance {:?}",
                    img.shape(),
                    rel.shape()
                )));
            }
            if !(0.0..=1.0).contains(&alpha) {
                return Err(Error::Config(format!("alpha must lie in [0, 1], got {alpha}")));
            }
            let ic = img.shape()[0];
            let g: Vec<f64> = (0..plane)
                .map(|p| (0..ic).map(|k| img.data()[k * plane + p]).sum::<f64>() / ic as f64)
                .collect();
            Some((g, alpha))
        }
        None => None,
    };
    let mut out = Vec::with_capacity(3 * plane);
    for (p, &s) in summed.iter().enumerate() {
        let v = if m > 0.0 { s / m } else { 0.0 };
        let rgb = diverging_color(v);
        match &grey {
            None => out.extend_from_slice(&rgb),
            Some((g, alpha)) => {
                let base = 255.0 * g[p].clamp(0.0, 1.0);
                out.extend(rgb.iter().map(|&x| (alpha * x as f64 + (1.0 - alpha) * base).round() as u8));
            }
        }
    }
    Ok((w, h, out))
}

/// Writes [`heatmap_pixels`] as a binary PPM.
pub fn render_heatmap(rel: &Tensor, underlay: Option<(&Tensor, f64)>, path: &Path) -> Result<()> {
    let (w, h, px) = heatmap_pixels(rel, underlay)?;
    let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
    bytes.extend_from_slice(&px);
    write_atomic(path, &bytes)
}
