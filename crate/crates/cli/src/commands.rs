use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use egt::data::{gen_synthetic_domains, load_dataset, save_dataset, EpisodeSampler, GenSpec, LabeledImageSet};
use egt::eval::{dataset_feature_stats, evaluate, explain_query, mean_std, render_heatmap, EvalConfig};
use egt::heads::{predicted_class, HeadKind};
use egt::io_util::write_atomic;
use egt::lrp::LrpConfig;
use egt::model::{FewShotModel, ModelSpec};
use egt::train::{egt_weights, train, TrainConfig};

use crate::{Command, UsageError};

pub const CONFIG_ECHO: &str = "config.json";
pub const CHECKPOINT: &str = "model.egt1";
pub const TRAIN_LOG: &str = "train_log.csv";

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Baseline,
    Egt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadArg {
    Cosine,
    Relation,
}

impl From<HeadArg> for HeadKind {
    fn from(h: HeadArg) -> Self {
        match h {
            HeadArg::Cosine => HeadKind::Cosine,
            HeadArg::Relation => HeadKind::Relation,
        }
    }
}

#[derive(Args, Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenDataArgs {
    /// Existing directory that receives `d<i>.egtd` files.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 2)]
    pub domains: usize,
    #[arg(long, default_value_t = 20)]
    pub classes: usize,
    #[arg(long, default_value_t = 60)]
    pub images_per_class: usize,
    #[arg(long, default_value_t = 3)]
    pub channels: usize,
    /// Image side length in pixels.
    #[arg(long, default_value_t = 32)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrpArgs {
    /// Stabilizer of the ε-rule.
    #[arg(long, default_value_t = 1e-3)]
    pub epsilon: f64,
    /// Weight of positive contributions in the α-rule (β = α - 1).
    #[arg(long, default_value_t = 1.0)]
    pub alpha: f64,
}

impl LrpArgs {
    fn config(&self) -> LrpConfig {
        LrpConfig::with(self.epsilon, self.alpha)
    }
}

#[derive(Args, Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeArgs {
    #[arg(long, default_value_t = 5)]
    pub way: usize,
    #[arg(long, default_value_t = 5)]
    pub shot: usize,
    /// Query images per episode.
    #[arg(long, default_value_t = 16)]
    pub queries: usize,
}

#[derive(Args, Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainArgs {
    /// Training dataset (EGTD).
    #[arg(long)]
    pub data: PathBuf,
    /// Existing directory for the checkpoint, log and config echo.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = Mode::Egt)]
    pub mode: Mode,
    #[arg(long, value_enum, default_value_t = HeadArg::Cosine)]
    pub head: HeadArg,
    #[command(flatten)]
    #[serde(flatten)]
    pub episode: EpisodeArgs,
    /// Weight of the explanation-guided loss (EGT mode only; default depends on head and shot).
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Weight of the plain loss (default depends on mode, head and shot).
    #[arg(long)]
    pub xi: Option<f64>,
    #[arg(long, default_value_t = 100)]
    pub epochs: usize,
    #[arg(long, default_value_t = 100)]
    pub episodes_per_epoch: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    #[arg(long, default_value_t = 0.5)]
    pub lr_decay: f64,
    /// Epochs between learning-rate decays.
    #[arg(long, default_value_t = 40)]
    pub lr_decay_every: usize,
    /// Output channels of each encoder block.
    #[arg(long, value_delimiter = ',', default_value = "16,16,16,16")]
    pub channels: Vec<usize>,
    /// Softmax scale of the cosine head.
    #[arg(long, default_value_t = egt::heads::DEFAULT_BETA)]
    pub beta: f64,
    #[arg(long, default_value_t = 8)]
    pub relation_hidden: usize,
    /// Keep the relu in the last encoder block.
    #[arg(long)]
    pub final_relu: bool,
    /// Differentiate through the relevance weights instead of treating them as constants (cosine head only).
    #[arg(long)]
    pub full_gradient: bool,
    #[command(flatten)]
    #[serde(flatten)]
    pub lrp: LrpArgs,
    /// Also checkpoint every this many epochs (0: only at the end).
    #[arg(long, default_value_t = 0)]
    pub checkpoint_every: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

impl TrainArgs {
    /// `(xi, lambda)` after applying mode defaults and overrides.
    pub fn loss_weights(&self) -> Result<(f64, f64)> {
        match self.mode {
            Mode::Baseline => {
                if self.lambda.is_some_and(|l| l != 0.0) {
                    return Err(UsageError("--lambda needs --mode egt".into()).into());
                }
                Ok((self.xi.unwrap_or(1.0), 0.0))
            }
            Mode::Egt => {
                let (xi, lambda) = egt_weights(self.head.into(), self.episode.shot);
                let lambda = self.lambda.unwrap_or(lambda);
                // Without the explanation term the objective falls back to the plain loss.
                let xi = self.xi.unwrap_or(if lambda == 0.0 { 1.0 } else { xi });
                Ok((xi, lambda))
            }
        }
    }

    fn train_config(&self) -> Result<TrainConfig> {
        let (xi, lambda) = self.loss_weights()?;
        Ok(TrainConfig {
            xi,
            lambda,
            lrp: self.lrp.config(),
            lr: self.lr,
            momentum: self.momentum,
            lr_decay: self.lr_decay,
            lr_decay_every: self.lr_decay_every,
            episodes_per_epoch: self.episodes_per_epoch,
            epochs: self.epochs,
            way: self.episode.way,
            shot: self.episode.shot,
            queries: self.episode.queries,
            seed: self.seed,
            stop_gradient_through_weights: !self.full_gradient,
            checkpoint_every: self.checkpoint_every,
        })
    }
}

#[derive(Args, Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalArgs {
    /// Checkpoint (EGT1).
    #[arg(long)]
    pub model: PathBuf,
    /// Datasets to evaluate on; one report each.
    #[arg(long, required = true, num_args = 1..)]
    pub data: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    pub episode: EpisodeArgs,
    #[arg(long, default_value_t = 2000)]
    pub episodes: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Grow the support set with confidently classified queries.
    #[arg(long)]
    pub transductive: bool,
    /// Queries absorbed in each transductive iteration.
    #[arg(long, value_delimiter = ',', requires = "transductive", default_value = "4,8")]
    pub candidates: Vec<usize>,
}

#[derive(Args, Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplainArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    pub episode: EpisodeArgs,
    /// Seed of the sampled episode.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Query index within the episode.
    #[arg(long, default_value_t = 0)]
    pub query: usize,
    /// `all`, `predicted`, or an episode class index.
    #[arg(long, default_value = "all")]
    pub target: String,
    /// Blend the heatmap over the query image with this opacity.
    #[arg(long)]
    pub overlay: Option<f64>,
    #[command(flatten)]
    #[serde(flatten)]
    pub lrp: LrpArgs,
}

#[derive(Args, Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, required = true, num_args = 1..)]
    pub data: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

fn absolute(p: &mut PathBuf) -> Result<()> {
    *p = std::path::absolute(&*p).with_context(|| format!("resolving {}", p.display()))?;
    Ok(())
}

impl Command {
    fn out_dir(&self) -> &Path {
        match self {
            Command::GenData(a) => &a.out,
            Command::Train(a) => &a.out,
            Command::Eval(a) => &a.out,
            Command::Explain(a) => &a.out,
            Command::Stats(a) => &a.out,
        }
    }

    /// Makes every path absolute so the echo replays from any directory.
    fn resolve_paths(&mut self) -> Result<()> {
        match self {
            Command::GenData(a) => absolute(&mut a.out),
            Command::Train(a) => {
                absolute(&mut a.data)?;
                absolute(&mut a.out)
            }
            Command::Eval(a) => {
                absolute(&mut a.model)?;
                a.data.iter_mut().try_for_each(absolute)?;
                absolute(&mut a.out)
            }
            Command::Explain(a) => {
                absolute(&mut a.model)?;
                absolute(&mut a.data)?;
                absolute(&mut a.out)
            }
            Command::Stats(a) => {
                absolute(&mut a.model)?;
                a.data.iter_mut().try_for_each(absolute)?;
                absolute(&mut a.out)
            }
        }
    }
}

pub fn execute(mut command: Command) -> Result<()> {
    command.resolve_paths()?;
    let out = command.out_dir().to_path_buf();
    if !out.is_dir() {
        return Err(egt::Error::InvalidData(format!("output directory {} does not exist", out.display())).into());
    }
    match &command {
        Command::GenData(a) => gen_data(a)?,
        Command::Train(a) => cmd_train(a)?,
        Command::Eval(a) => cmd_eval(a)?,
        Command::Explain(a) => cmd_explain(a)?,
        Command::Stats(a) => cmd_stats(a)?,
    }
    let echo = serde_json::to_vec_pretty(&command)?;
    write_atomic(&out.join(CONFIG_ECHO), &echo)?;
    Ok(())
}

fn load(path: &Path) -> Result<LabeledImageSet> {
    load_dataset(path).with_context(|| format!("loading dataset {}", path.display()))
}

fn load_model(path: &Path) -> Result<FewShotModel> {
    FewShotModel::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "data".into())
}

fn gen_data(a: &GenDataArgs) -> Result<()> {
    let spec = GenSpec {
        classes: a.classes,
        images_per_class: a.images_per_class,
        channels: a.channels,
        size: a.size,
        domains: a.domains,
        ..GenSpec::default()
    };
    let sets = gen_synthetic_domains(&spec, &mut ChaCha8Rng::seed_from_u64(a.seed))?;
    for (tag, set) in &sets {
        let path = a.out.join(format!("{tag}.egtd"));
        save_dataset(set, &path)?;
        println!("wrote {} ({} images, {} classes)", path.display(), set.len(), set.num_classes());
    }
    Ok(())
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let cfg = a.train_config()?;
    let set = load(&a.data)?;
    let spec = ModelSpec {
        image_shape: set.image_shape().to_vec(),
        channels: a.channels.clone(),
        head: a.head.into(),
        beta: a.beta,
        relation_hidden: a.relation_hidden,
        final_relu: a.final_relu,
    };
    let model = FewShotModel::build(&spec, &mut ChaCha8Rng::seed_from_u64(a.seed))?;
    let mut episodes = EpisodeSampler::new(&set, cfg.way, cfg.shot, cfg.queries, a.seed.wrapping_add(1));
    log::info!("training {} head, xi {} lambda {}", spec.head, cfg.xi, cfg.lambda);
    let ckpt = a.out.join(CHECKPOINT);
    let (_, rows) = train(model, &mut episodes, &cfg, Some(&a.out.join(TRAIN_LOG)), Some(&ckpt))?;
    if let Some(last) = rows.last() {
        println!(
            "trained {} epochs: loss {:.4}, query accuracy {:.2}%",
            rows.len(),
            last.loss_total,
            100.0 * last.acc
        );
    }
    println!("wrote {}", ckpt.display());
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let cfg = EvalConfig {
        way: a.episode.way,
        shot: a.episode.shot,
        queries: a.episode.queries,
        episodes: a.episodes,
        seed: a.seed,
        candidates: if a.transductive { a.candidates.clone() } else { Vec::new() },
    };
    if a.transductive && cfg.candidates.is_empty() {
        return Err(UsageError("--transductive needs at least one candidate count".into()).into());
    }
    let mut seen = std::collections::BTreeSet::new();
    for path in &a.data {
        let name = stem(path);
        if !seen.insert(name.clone()) {
            bail!(UsageError(format!("two datasets share the report name {name}")));
        }
        let set = load(path)?;
        let report = evaluate(&model, &set, &cfg)?;
        if report.degenerate {
            log::warn!("{name}: a single episode gives no confidence interval");
        }
        write_atomic(&a.out.join(format!("eval_{name}.csv")), &report.to_csv()?)?;
        println!("{name} {}", report.summary());
    }
    Ok(())
}

enum Target {
    All,
    Predicted,
    Class(usize),
}

fn parse_target(s: &str) -> Result<Target> {
    match s {
        "all" => Ok(Target::All),
        "predicted" => Ok(Target::Predicted),
        _ => s
            .parse()
            .map(Target::Class)
            .map_err(|_| UsageError(format!("--target must be all, predicted or a class index, got {s:?}")).into()),
    }
}

#[derive(Serialize)]
struct RawRelevance<'a> {
    query: usize,
    target: usize,
    probs: &'a [f64],
    shape: &'a [usize],
    data: &'a [f64],
}

fn cmd_explain(a: &ExplainArgs) -> Result<()> {
    let target = parse_target(&a.target)?;
    if let Some(alpha) = a.overlay {
        if !(0.0..=1.0).contains(&alpha) {
            bail!(UsageError(format!("--overlay must lie in [0, 1], got {alpha}")));
        }
    }
    let model = load_model(&a.model)?;
    let set = load(&a.data)?;
    let e = &a.episode;
    let episode = EpisodeSampler::new(&set, e.way, e.shot, e.queries, a.seed)
        .next()
        .expect("sampler is endless")?;
    if a.query >= episode.n_query() {
        bail!(UsageError(format!("--query {} outside {} queries", a.query, episode.n_query())));
    }
    let cfg = a.lrp.config();
    let probs = model.predict(&episode)?.swap_remove(a.query);
    let targets: Vec<usize> = match target {
        Target::All => (0..episode.way).collect(),
        Target::Predicted => vec![predicted_class(&probs)],
        Target::Class(k) => vec![k],
    };
    let image = episode.query.index_outer(a.query);
    for k in targets {
        let (rel, probs) = explain_query(&model, &episode, a.query, Some(k), &cfg)?;
        let base = format!("q{}_class{k}", a.query);
        let heatmap = a.out.join(format!("heatmap_{base}.ppm"));
        render_heatmap(&rel, a.overlay.map(|alpha| (&image, alpha)), &heatmap)?;
        let raw = RawRelevance {
            query: a.query,
            target: k,
            probs: &probs,
            shape: rel.shape(),
            data: rel.data(),
        };
        write_atomic(&a.out.join(format!("relevance_{base}.json")), &serde_json::to_vec(&raw)?)?;
        println!("wrote {}", heatmap.display());
    }
    println!(
        "query {} (true class {}): predicted {} with p = {:.4}",
        a.query,
        episode.query_labels[a.query],
        predicted_class(&probs),
        probs[predicted_class(&probs)]
    );
    Ok(())
}

fn cmd_stats(a: &StatsArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    for path in &a.data {
        let name = stem(path);
        let set = load(path)?;
        let stats = dataset_feature_stats(&model, &set)?;
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["image", "label", "s2", "qdiff"])?;
        for (i, s) in stats.iter().enumerate() {
            w.write_record([i.to_string(), set.labels()[i].to_string(), s.s2.to_string(), s.qdiff.to_string()])?;
        }
        write_atomic(&a.out.join(format!("stats_{name}.csv")), &w.into_inner()?)?;

        let s2: Vec<f64> = stats.iter().map(|s| s.s2).collect();
        let qd: Vec<f64> = stats.iter().map(|s| s.qdiff).collect();
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["statistic", "mean", "std"])?;
        for (label, v) in [("s2", &s2), ("qdiff", &qd)] {
            let (m, s) = mean_std(v);
            w.write_record([label.to_string(), m.to_string(), s.to_string()])?;
            println!("{name} {label}: mean {m:.6} std {s:.6} over {} images", v.len());
        }
        write_atomic(&a.out.join(format!("stats_{name}_summary.csv")), &w.into_inner()?)?;
    }
    Ok(())
}
