//! Labeled image collections, episode sampling and the `EGTD` dataset format.

mod format;
mod synth;

use std::collections::BTreeMap;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use format::{load_dataset, save_dataset, DATASET_MAGIC};
pub use synth::{gen_synthetic_domains, DomainStyle, GenSpec, Texture};

/// Images of one shape grouped by class, stored class-major.
///
/// Pixel values are kept at single precision so a save/load round trip is exact.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImageSet {
    image_shape: Vec<usize>,
    pixels: Vec<f64>,
    labels: Vec<u32>,
    domain_tag: String,
    class_index: BTreeMap<u32, Vec<usize>>,
}

impl LabeledImageSet {
    /// Builds a set from `[C, H, W]` images. Images are reordered stably by label.
    pub fn new(images: Vec<Tensor>, labels: Vec<u32>, domain_tag: &str) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::InvalidData(format!(
                "{} images but {} labels",
                images.len(),
                labels.len()
            )));
        }
        let first = images
            .first()
            .ok_or_else(|| Error::InvalidData("image set is empty".into()))?;
        let shape = first.shape().to_vec();
        if shape.len() != 3 {
            return Err(Error::InvalidData(format!("images must be [C, H, W], got {shape:?}")));
        }
        let mut order: Vec<usize> = (0..images.len()).collect();
        order.sort_by_key(|&i| labels[i]);
        let mut pixels = Vec::with_capacity(images.len() * first.len());
        for &i in &order {
            if images[i].shape() != shape.as_slice() {
                return Err(Error::InvalidData(format!(
                    "image {i} has shape {:?}, expected {shape:?}",
                    images[i].shape()
                )));
            }
            pixels.extend(images[i].data().iter().map(|&v| v as f32 as f64));
        }
        let labels = order.iter().map(|&i| labels[i]).collect();
        Self::from_raw(shape, pixels, labels, domain_tag)
    }

    /// `pixels` must already be class-major and single-precision representable.
    pub(crate) fn from_raw(
        image_shape: Vec<usize>,
        pixels: Vec<f64>,
        labels: Vec<u32>,
        domain_tag: &str,
    ) -> Result<Self> {
        if domain_tag.is_empty() || domain_tag.chars().any(char::is_whitespace) {
            return Err(Error::InvalidData(format!(
                "domain tag must be a non-empty word, got {domain_tag:?}"
            )));
        }
        if pixels.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidData("pixel values must lie in [0, 1]".into()));
        }
        let mut class_index: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, &l) in labels.iter().enumerate() {
            class_index.entry(l).or_default().push(i);
        }
        Ok(LabeledImageSet {
            image_shape,
            pixels,
            labels,
            domain_tag: domain_tag.to_string(),
            class_index,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_shape(&self) -> &[usize] {
        &self.image_shape
    }

    pub fn domain_tag(&self) -> &str {
        &self.domain_tag
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn classes(&self) -> Vec<u32> {
        self.class_index.keys().copied().collect()
    }

    pub fn num_classes(&self) -> usize {
        self.class_index.len()
    }

    /// Image ids of `class`, empty if the class does not exist.
    pub fn class_images(&self, class: u32) -> &[usize] {
        self.class_index.get(&class).map_or(&[], Vec::as_slice)
    }

    pub(crate) fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    fn image_len(&self) -> usize {
        self.image_shape.iter().product()
    }

    pub fn image_data(&self, id: usize) -> &[f64] {
        let n = self.image_len();
        &self.pixels[id * n..(id + 1) * n]
    }

    pub fn image(&self, id: usize) -> Tensor {
        Tensor::from_parts(self.image_shape.clone(), self.image_data(id).to_vec())
    }

    /// Stacks the given images into a `[B, C, H, W]` batch.
    pub fn batch(&self, ids: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(ids.len() * self.image_len());
        for &id in ids {
            data.extend_from_slice(self.image_data(id));
        }
        let mut shape = vec![ids.len()];
        shape.extend_from_slice(&self.image_shape);
        Tensor::from_parts(shape, data)
    }

    /// The images of the classes accepted by `keep`, as a new set.
    pub fn filter_classes(&self, keep: impl Fn(u32) -> bool) -> Result<Self> {
        let ids: Vec<usize> = (0..self.len()).filter(|&i| keep(self.labels[i])).collect();
        if ids.is_empty() {
            return Err(Error::InvalidData("class filter selected no images".into()));
        }
        let mut pixels = Vec::with_capacity(ids.len() * self.image_len());
        for &id in &ids {
            pixels.extend_from_slice(self.image_data(id));
        }
        let labels = ids.iter().map(|&i| self.labels[i]).collect();
        Self::from_raw(self.image_shape.clone(), pixels, labels, &self.domain_tag)
    }

    /// Mean pixel value of every channel over the whole set.
    pub fn channel_means(&self) -> Vec<f64> {
        let c = self.image_shape[0];
        let plane = self.image_len() / c;
        let mut sums = vec![0.0; c];
        for img in self.pixels.chunks_exact(self.image_len()) {
            for (ch, s) in sums.iter_mut().enumerate() {
                *s += img[ch * plane..(ch + 1) * plane].iter().sum::<f64>();
            }
        }
        let n = (self.len() * plane) as f64;
        sums.iter().map(|s| s / n).collect()
    }
}

/// One K-way N-shot task. Labels are episode-local class positions `0..way`.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub way: usize,
    pub shot: usize,
    /// `[way * shot, C, H, W]`, class-major.
    pub support: Tensor,
    pub support_labels: Vec<usize>,
    /// `[n_q, C, H, W]`.
    pub query: Tensor,
    pub query_labels: Vec<usize>,
    /// Dataset class id of every episode-local label.
    pub classes: Vec<u32>,
    pub support_ids: Vec<usize>,
    pub query_ids: Vec<usize>,
    pub domain_tag: String,
}

impl Episode {
    pub fn n_query(&self) -> usize {
        self.query_labels.len()
    }

    /// Support followed by query images as one batch.
    pub fn all_images(&self) -> Tensor {
        let mut data = self.support.data().to_vec();
        data.extend_from_slice(self.query.data());
        let mut shape = self.support.shape().to_vec();
        shape[0] += self.n_query();
        Tensor::from_parts(shape, data)
    }
}

/// An endless seeded stream of episodes from one set.
pub struct EpisodeSampler<'a> {
    set: &'a LabeledImageSet,
    way: usize,
    shot: usize,
    n_query: usize,
    rng: ChaCha8Rng,
}

impl<'a> EpisodeSampler<'a> {
    pub fn new(set: &'a LabeledImageSet, way: usize, shot: usize, n_query: usize, seed: u64) -> Self {
        EpisodeSampler {
            set,
            way,
            shot,
            n_query,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

impl Iterator for EpisodeSampler<'_> {
    type Item = Result<Episode>;

    fn next(&mut self) -> Option<Self::Item> {
        Some(sample_episode(self.set, self.way, self.shot, self.n_query, &mut self.rng))
    }
}

/// Samples `way` classes, then `shot` support and a balanced share of `n_query`
/// query images per class, all without replacement.
pub fn sample_episode<R: Rng + ?Sized>(
    set: &LabeledImageSet,
    way: usize,
    shot: usize,
    n_query: usize,
    rng: &mut R,
) -> Result<Episode> {
    if way < 2 || shot == 0 || n_query == 0 {
        return Err(Error::Sampling(format!(
            "need way >= 2, shot >= 1 and at least one query (got way={way}, shot={shot}, queries={n_query})"
        )));
    }
    let per_class_max = shot + n_query.div_ceil(way);
    let eligible: Vec<u32> = set
        .class_index
        .iter()
        .filter(|(_, ids)| ids.len() >= per_class_max)
        .map(|(&c, _)| c)
        .collect();
    if eligible.len() < way {
        return Err(Error::Sampling(format!(
            "{way}-way episodes with {shot} shots and {n_query} queries need {way} classes with >= {per_class_max} images; \
             domain {:?} has {} such classes out of {}",
            set.domain_tag,
            eligible.len(),
            set.num_classes()
        )));
    }
    let classes: Vec<u32> = index::sample(rng, eligible.len(), way)
        .into_iter()
        .map(|i| eligible[i])
        .collect();
    let base = n_query / way;
    let extra = n_query % way;
    let mut support_ids = Vec::with_capacity(way * shot);
    let mut support_labels = Vec::with_capacity(way * shot);
    let mut query_ids = Vec::with_capacity(n_query);
    let mut query_labels = Vec::with_capacity(n_query);
    for (k, &class) in classes.iter().enumerate() {
        let pool = set.class_images(class);
        let nq = base + usize::from(k < extra);
        let picks = index::sample(rng, pool.len(), shot + nq).into_vec();
        for &p in &picks[..shot] {
            support_ids.push(pool[p]);
            support_labels.push(k);
        }
        for &p in &picks[shot..] {
            query_ids.push(pool[p]);
            query_labels.push(k);
        }
    }
    Ok(Episode {
        way,
        shot,
        support: set.batch(&support_ids),
        support_labels,
        query: set.batch(&query_ids),
        query_labels,
        classes,
        support_ids,
        query_ids,
        domain_tag: set.domain_tag.clone(),
    })
}
