//! Procedural multi-domain image sets.
//!
//! A class is a fixed composite of geometric primitives. Every domain renders
//! the same classes with its own palette, background texture, stroke thickness
//! and noise level, so class identity transfers across domains while pixel
//! statistics do not.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::LabeledImageSet;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Texture {
    Flat,
    Stripes,
    Checker,
    Gradient,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenSpec {
    pub classes: usize,
    pub images_per_class: usize,
    pub channels: usize,
    /// Images are `size x size`.
    pub size: usize,
    pub domains: usize,
    /// Each class draws between 1 and this many primitives.
    pub max_primitives: usize,
    /// Per-image displacement of primitive centers, as a fraction of the image side.
    pub jitter: f64,
    /// Background texture families domains may draw from.
    pub textures: Vec<Texture>,
    /// Every pair of domains must differ by at least this much in some channel mean.
    pub min_domain_gap: f64,
}

impl Default for GenSpec {
    fn default() -> Self {
        GenSpec {
            classes: 20,
            images_per_class: 60,
            channels: 3,
            size: 32,
            domains: 2,
            max_primitives: 3,
            jitter: 0.06,
            textures: vec![Texture::Flat, Texture::Stripes, Texture::Checker, Texture::Gradient],
            min_domain_gap: 0.05,
        }
    }
}

impl GenSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.classes));
        }
        if self.images_per_class == 0 || self.channels == 0 || self.domains == 0 {
            return bad("images per class, channels and domains must be positive".into());
        }
        if self.size < 8 {
            return bad(format!("image size must be >= 8, got {}", self.size));
        }
        if self.max_primitives == 0 {
            return bad("max_primitives must be >= 1".into());
        }
        if !(0.0..=0.2).contains(&self.jitter) {
            return bad(format!("jitter must lie in [0, 0.2], got {}", self.jitter));
        }
        if self.textures.is_empty() {
            return bad("at least one texture family is required".into());
        }
        if !(0.0..0.5).contains(&self.min_domain_gap) {
            return bad(format!("min_domain_gap must lie in [0, 0.5), got {}", self.min_domain_gap));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Shape {
    Disk,
    Square,
    Ring,
    Cross,
    HBar,
    VBar,
    Triangle,
}

const SHAPES: [Shape; 7] = [
    Shape::Disk,
    Shape::Square,
    Shape::Ring,
    Shape::Cross,
    Shape::HBar,
    Shape::VBar,
    Shape::Triangle,
];

#[derive(Debug, Clone, Copy)]
struct Primitive {
    shape: Shape,
    cx: f64,
    cy: f64,
    radius: f64,
}

impl Primitive {
    fn covers(&self, x: f64, y: f64, thickness: f64) -> bool {
        let (dx, dy, r) = (x - self.cx, y - self.cy, self.radius);
        let t = 0.35 * r * thickness;
        match self.shape {
            Shape::Disk => dx.hypot(dy) < r,
            Shape::Square => dx.abs().max(dy.abs()) < 0.85 * r,
            Shape::Ring => (dx.hypot(dy) - r).abs() < t / 2.0,
            Shape::Cross => (dx.abs() < t / 2.0 && dy.abs() < r) || (dy.abs() < t / 2.0 && dx.abs() < r),
            Shape::HBar => dx.abs() < r && dy.abs() < t / 2.0,
            Shape::VBar => dy.abs() < r && dx.abs() < t / 2.0,
            Shape::Triangle => dy > -r && dy < r && dx.abs() < (dy + r) / 2.0,
        }
    }
}

/// Rendering parameters shared by every image of one domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainStyle {
    pub foreground: Vec<f64>,
    pub background: Vec<f64>,
    pub texture: Texture,
    pub texture_amplitude: f64,
    /// Cycles per image side.
    pub texture_frequency: f64,
    pub texture_angle: f64,
    pub thickness: f64,
    pub noise: f64,
}

impl DomainStyle {
    fn draw<R: Rng + ?Sized>(channels: usize, textures: &[Texture], rng: &mut R) -> Self {
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let (foreground, background) = loop {
            let fg: Vec<f64> = (0..channels).map(|_| rng.random_range(0.0..1.0)).collect();
            let bg: Vec<f64> = (0..channels).map(|_| rng.random_range(0.0..1.0)).collect();
            if (mean(&fg) - mean(&bg)).abs() >= 0.3 {
                break (fg, bg);
            }
        };
        DomainStyle {
            foreground,
            background,
            texture: textures[rng.random_range(0..textures.len())],
            texture_amplitude: rng.random_range(0.05..0.25),
            texture_frequency: rng.random_range(2.0..6.0),
            texture_angle: rng.random_range(0.0..PI),
            thickness: rng.random_range(0.6..1.6),
            noise: rng.random_range(0.02..0.1),
        }
    }

    /// Background texture value in `[-1, 1]` at normalized coordinates.
    fn texture_at(&self, x: f64, y: f64) -> f64 {
        let f = self.texture_frequency;
        let u = x * self.texture_angle.cos() + y * self.texture_angle.sin();
        match self.texture {
            Texture::Flat => 0.0,
            Texture::Stripes => (2.0 * PI * f * u).sin(),
            Texture::Checker => ((2.0 * PI * f * x).sin() * (2.0 * PI * f * y).sin()).signum(),
            Texture::Gradient => (2.0 * u - 1.0).clamp(-1.0, 1.0),
        }
    }
}

fn draw_class<R: Rng + ?Sized>(max_primitives: usize, rng: &mut R) -> Vec<Primitive> {
    let n = rng.random_range(1..=max_primitives);
    (0..n)
        .map(|_| Primitive {
            shape: SHAPES[rng.random_range(0..SHAPES.len())],
            cx: rng.random_range(0.28..0.72),
            cy: rng.random_range(0.28..0.72),
            radius: rng.random_range(0.12..0.24),
        })
        .collect()
}

fn render<R: Rng + ?Sized>(
    spec: &GenSpec,
    style: &DomainStyle,
    prims: &[Primitive],
    noise: &Normal<f64>,
    rng: &mut R,
    out: &mut Vec<f64>,
) {
    let placed: Vec<Primitive> = prims
        .iter()
        .map(|p| {
            let mut p = *p;
            if spec.jitter > 0.0 {
                p.cx += rng.random_range(-spec.jitter..spec.jitter);
                p.cy += rng.random_range(-spec.jitter..spec.jitter);
                p.radius *= rng.random_range(0.85..1.15);
            }
            p
        })
        .collect();
    let s = spec.size;
    let mut mask = vec![false; s * s];
    let mut tex = vec![0.0; s * s];
    for py in 0..s {
        for px in 0..s {
            let (x, y) = ((px as f64 + 0.5) / s as f64, (py as f64 + 0.5) / s as f64);
            mask[py * s + px] = placed.iter().any(|p| p.covers(x, y, style.thickness));
            tex[py * s + px] = style.texture_at(x, y);
        }
    }
    for c in 0..spec.channels {
        for i in 0..s * s {
            let base = if mask[i] {
                style.foreground[c]
            } else {
                style.background[c] + style.texture_amplitude * tex[i]
            };
            let v = base + style.noise * noise.sample(rng);
            out.push(v.clamp(0.0, 1.0) as f32 as f64);
        }
    }
}

fn max_channel_gap(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Generates `spec.domains` image sets tagged `d0`, `d1`, ... sharing one class geometry.
pub fn gen_synthetic_domains<R: Rng + ?Sized>(
    spec: &GenSpec,
    rng: &mut R,
) -> Result<BTreeMap<String, LabeledImageSet>> {
    spec.validate()?;
    let geometry: Vec<Vec<Primitive>> = (0..spec.classes)
        .map(|_| draw_class(spec.max_primitives, rng))
        .collect();
    let std_normal = Normal::new(0.0, 1.0).expect("valid");
    let mut out = BTreeMap::new();
    let mut means: Vec<Vec<f64>> = Vec::new();
    for d in 0..spec.domains {
        let tag = format!("d{d}");
        let mut attempt = 0;
        let set = loop {
            let style = DomainStyle::draw(spec.channels, &spec.textures, rng);
            let mut img_rng = ChaCha8Rng::seed_from_u64(rng.random());
            let mut pixels = Vec::with_capacity(spec.classes * spec.images_per_class * spec.channels * spec.size * spec.size);
            let mut labels = Vec::with_capacity(spec.classes * spec.images_per_class);
            for (c, prims) in geometry.iter().enumerate() {
                for _ in 0..spec.images_per_class {
                    render(spec, &style, prims, &std_normal, &mut img_rng, &mut pixels);
                    labels.push(c as u32);
                }
            }
            let set = LabeledImageSet::from_raw(vec![spec.channels, spec.size, spec.size], pixels, labels, &tag)?;
            let m = set.channel_means();
            if means.iter().all(|prev| max_channel_gap(prev, &m) >= spec.min_domain_gap) {
                means.push(m);
                break set;
            }
            attempt += 1;
            if attempt == 32 {
                return Err(Error::InvalidData(format!(
                    "could not draw a style for domain {tag} whose channel means differ from the other domains by {}",
                    spec.min_domain_gap
                )));
            }
        };
        log::debug!("generated domain {tag} after {} style draws", attempt + 1);
        out.insert(tag, set);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> GenSpec {
        GenSpec {
            classes: 4,
            images_per_class: 3,
            size: 12,
            ..GenSpec::default()
        }
    }

    #[test]
    fn shapes_and_tags() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let sets = gen_synthetic_domains(&small(), &mut rng).unwrap();
        assert_eq!(sets.keys().collect::<Vec<_>>(), ["d0", "d1"]);
        for s in sets.values() {
            assert_eq!(s.len(), 12);
            assert_eq!(s.image_shape(), &[3, 12, 12]);
            assert_eq!(s.num_classes(), 4);
        }
        let m0 = sets["d0"].channel_means();
        let m1 = sets["d1"].channel_means();
        assert!(max_channel_gap(&m0, &m1) >= 0.05);
    }

    #[test]
    fn degenerate_spec_gives_identical_class_images_up_to_noise() {
        let spec = GenSpec {
            max_primitives: 1,
            jitter: 0.0,
            textures: vec![Texture::Flat],
            domains: 1,
            ..small()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let set = &gen_synthetic_domains(&spec, &mut rng).unwrap()["d0"];
        let a = set.image_data(0);
        let b = set.image_data(1);
        let diff = a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64;
        // Pure noise of std <= 0.1 per pixel: mean absolute difference stays small.
        assert!(diff < 0.15, "{diff}");
    }

    #[test]
    fn invalid_specs() {
        for spec in [
            GenSpec { classes: 1, ..GenSpec::default() },
            GenSpec { size: 4, ..GenSpec::default() },
            GenSpec { textures: vec![], ..GenSpec::default() },
            GenSpec { jitter: 0.5, ..GenSpec::default() },
        ] {
            assert!(matches!(spec.validate(), Err(Error::Config(_))));
        }
    }
}
