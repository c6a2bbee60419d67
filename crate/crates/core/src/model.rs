//! Encoder plus classifier head, and their `EGT1` persistence.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Episode;
use crate::error::{Error, Result};
use crate::heads::{cosine_scores, relation_head, scaled_softmax, ClassPrototypes, HeadKind, DEFAULT_BETA};
use crate::net::checkpoint::{self, Checkpoint};
use crate::net::{ForwardTrace, Layer, Network};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    /// `[C, H, W]` of input images.
    pub image_shape: Vec<usize>,
    /// Output channels of the conv→relu→maxpool blocks of the encoder.
    pub channels: Vec<usize>,
    pub head: HeadKind,
    pub beta: f64,
    /// Hidden units of the relation network.
    pub relation_hidden: usize,
    /// Apply the relu in the last encoder block too. Without it the features
    /// are signed and cannot collapse to an all-zero (cosine-undefined) vector.
    pub final_relu: bool,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            image_shape: vec![3, 32, 32],
            channels: vec![16, 16, 16, 16],
            head: HeadKind::Cosine,
            beta: DEFAULT_BETA,
            relation_hidden: 8,
            final_relu: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Head {
    Cosine { beta: f64 },
    Relation { net: Network },
}

impl Head {
    pub fn kind(&self) -> HeadKind {
        match self {
            Head::Cosine { .. } => HeadKind::Cosine,
            Head::Relation { .. } => HeadKind::Relation,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FewShotModel {
    pub encoder: Network,
    pub head: Head,
}

/// A stack of 3x3 conv (padding 1) → relu → 2x2 maxpool blocks; the last
/// block skips its relu unless `final_relu`.
pub fn conv_encoder<R: Rng + ?Sized>(
    image_shape: &[usize],
    channels: &[usize],
    final_relu: bool,
    rng: &mut R,
) -> Result<Network> {
    if image_shape.len() != 3 || channels.is_empty() {
        return Err(Error::Config(format!(
            "encoder needs a [C, H, W] input and at least one block, got {image_shape:?} and {channels:?}"
        )));
    }
    let mut layers = Vec::new();
    let mut c_in = image_shape[0];
    for (i, &c) in channels.iter().enumerate() {
        layers.push(Layer::conv2d(c_in, c, 3, 1, 1, rng));
        if final_relu || i + 1 < channels.len() {
            layers.push(Layer::Relu);
        }
        layers.push(Layer::MaxPool2d { kernel: 2, stride: 2, padding: 0 });
        c_in = c;
    }
    Network::new(image_shape, layers)
}

/// Flatten → linear → relu → linear scoring one `concat(prototype, query)` pair.
pub fn relation_network<R: Rng + ?Sized>(feature_shape: &[usize], hidden: usize, rng: &mut R) -> Result<Network> {
    let mut input = feature_shape.to_vec();
    input[0] *= 2;
    let n: usize = input.iter().product();
    Network::new(
        &input,
        vec![
            Layer::Flatten,
            Layer::linear(n, hidden, rng),
            Layer::Relu,
            Layer::linear(hidden, 1, rng),
        ],
    )
}

impl FewShotModel {
    pub fn build<R: Rng + ?Sized>(spec: &ModelSpec, rng: &mut R) -> Result<Self> {
        if !(spec.beta > 0.0 && spec.beta.is_finite()) {
            return Err(Error::Config(format!("beta must be positive, got {}", spec.beta)));
        }
        let encoder = conv_encoder(&spec.image_shape, &spec.channels, spec.final_relu, rng)?;
        let head = match spec.head {
            HeadKind::Cosine => Head::Cosine { beta: spec.beta },
            HeadKind::Relation => {
                if spec.relation_hidden == 0 {
                    return Err(Error::Config("relation_hidden must be positive".into()));
                }
                Head::Relation {
                    net: relation_network(encoder.output_shape(), spec.relation_hidden, rng)?,
                }
            }
        };
        Ok(FewShotModel { encoder, head })
    }

    pub fn head_kind(&self) -> HeadKind {
        self.head.kind()
    }

    pub fn feature_shape(&self) -> &[usize] {
        self.encoder.output_shape()
    }

    /// Encoder features of a `[B, C, H, W]` batch, shaped `[B, F..]`.
    pub fn embed(&self, images: &Tensor, record: bool) -> Result<(Tensor, Option<ForwardTrace>)> {
        if images.rank() != self.encoder.input_shape().len() + 1 {
            return Err(Error::Shape(format!(
                "expected a batch of {:?} images, got {:?}",
                self.encoder.input_shape(),
                images.shape()
            )));
        }
        self.encoder.forward(images, record)
    }

    /// Class probabilities of every `[n, F..]` query feature given prototypes.
    pub fn classify(&self, protos: &ClassPrototypes, queries: &Tensor) -> Result<Vec<Vec<f64>>> {
        queries
            .unstack()
            .iter()
            .map(|q| match &self.head {
                Head::Cosine { beta } => Ok(scaled_softmax(&cosine_scores(q, protos)?, *beta)),
                Head::Relation { net } => {
                    let (logits, _) = relation_head(q, protos, net)?;
                    Ok(scaled_softmax(&logits, 1.0))
                }
            })
            .collect()
    }

    /// Class probabilities for every query of an episode.
    pub fn predict(&self, episode: &Episode) -> Result<Vec<Vec<f64>>> {
        let (feats, _) = self.embed(&episode.all_images(), false)?;
        let ns = episode.support_labels.len();
        let all = feats.unstack();
        let support = Tensor::stack(&all[..ns])?;
        let queries = Tensor::stack(&all[ns..])?;
        let protos = ClassPrototypes::from_support(&support, &episode.support_labels, episode.way)?;
        self.classify(&protos, &queries)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut networks = vec![("encoder".to_string(), self.encoder.clone())];
        let meta = match &self.head {
            Head::Cosine { beta } => format!("model head=cosine beta={beta}"),
            Head::Relation { net } => {
                networks.push(("relation".to_string(), net.clone()));
                "model head=relation".to_string()
            }
        };
        Checkpoint { meta, networks }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let fields = ckpt.meta_fields();
        let bad = |m: &str| Error::InvalidData(format!("checkpoint {m}"));
        let encoder = ckpt.network("encoder").ok_or_else(|| bad("has no encoder network"))?.clone();
        let head = match fields.get("head").copied() {
            Some("cosine") => {
                let beta = fields
                    .get("beta")
                    .and_then(|b| b.parse::<f64>().ok())
                    .filter(|b| *b > 0.0 && b.is_finite())
                    .ok_or_else(|| bad("has no valid beta"))?;
                Head::Cosine { beta }
            }
            Some("relation") => {
                let net = ckpt.network("relation").ok_or_else(|| bad("has no relation network"))?.clone();
                let mut want = encoder.output_shape().to_vec();
                want[0] *= 2;
                if net.input_shape() != want.as_slice() || net.output_shape() != [1] {
                    return Err(bad("relation network does not fit the encoder"));
                }
                Head::Relation { net }
            }
            other => return Err(bad(&format!("names unknown head {other:?}"))),
        };
        Ok(FewShotModel { encoder, head })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.to_checkpoint())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&checkpoint::load(path)?)
    }
}
