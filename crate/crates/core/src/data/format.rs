//! `EGTD` dataset files.
//!
//! ```text
//! EGTD\n
//! classes=<K> counts=<n_1,..,n_K> shape=<C,H,W> domain=<tag>\n
//! <f32 LE pixels, class-major, each image C*H*W values>
//! <u32 LE label of every image>
//! ```

use std::path::Path;

use super::LabeledImageSet;
use crate::error::{Error, Result};
use crate::io_util::{write_atomic, ByteReader};

pub const DATASET_MAGIC: &[u8; 4] = b"EGTD";

pub fn save_dataset(set: &LabeledImageSet, path: &Path) -> Result<()> {
    write_atomic(path, &encode(set))
}

pub fn load_dataset(path: &Path) -> Result<LabeledImageSet> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

pub(crate) fn encode(set: &LabeledImageSet) -> Vec<u8> {
    let counts: Vec<usize> = set.classes().iter().map(|&c| set.class_images(c).len()).collect();
    let mut out = Vec::with_capacity(64 + set.pixels().len() * 4 + set.len() * 4);
    out.extend_from_slice(DATASET_MAGIC);
    out.push(b'\n');
    out.extend_from_slice(
        format!(
            "classes={} counts={} shape={} domain={}\n",
            counts.len(),
            join(&counts),
            join(set.image_shape()),
            set.domain_tag()
        )
        .as_bytes(),
    );
    for &v in set.pixels() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    for &l in set.labels() {
        out.extend_from_slice(&l.to_le_bytes());
    }
    out
}

fn parse_list(offset: u64, key: &str, v: &str) -> Result<Vec<usize>> {
    v.split(',')
        .map(|s| {
            s.parse().map_err(|_| Error::Format {
                offset,
                msg: format!("{key}: {s:?} is not a count"),
            })
        })
        .collect()
}

pub(crate) fn decode(bytes: &[u8]) -> Result<LabeledImageSet> {
    let mut r = ByteReader::new(bytes);
    let (off, magic) = r.line()?;
    if magic.as_bytes() != DATASET_MAGIC {
        return Err(Error::Format {
            offset: off,
            msg: format!("not an EGTD dataset (magic {magic:?})"),
        });
    }
    let (off, manifest) = r.line()?;
    let mut classes = None;
    let mut counts = None;
    let mut shape = None;
    let mut domain = None;
    for field in manifest.split_whitespace() {
        let (k, v) = field.split_once('=').ok_or_else(|| Error::Format {
            offset: off,
            msg: format!("manifest field {field:?} is not key=value"),
        })?;
        match k {
            "classes" => {
                classes = Some(v.parse::<usize>().map_err(|_| Error::Format {
                    offset: off,
                    msg: format!("classes: {v:?} is not a count"),
                })?)
            }
            "counts" => counts = Some(parse_list(off, k, v)?),
            "shape" => shape = Some(parse_list(off, k, v)?),
            "domain" => domain = Some(v.to_string()),
            _ => {
                return Err(Error::Format {
                    offset: off,
                    msg: format!("unknown manifest field {k:?}"),
                })
            }
        }
    }
    let missing = |name: &str| Error::Format {
        offset: off,
        msg: format!("manifest lacks {name}"),
    };
    let classes = classes.ok_or_else(|| missing("classes"))?;
    let counts = counts.ok_or_else(|| missing("counts"))?;
    let shape = shape.ok_or_else(|| missing("shape"))?;
    let domain = domain.ok_or_else(|| missing("domain"))?;
    if counts.len() != classes || classes == 0 {
        return Err(Error::Format {
            offset: off,
            msg: format!("{classes} classes declared, {} counts listed", counts.len()),
        });
    }
    if let Some(k) = counts.iter().position(|&n| n == 0) {
        return Err(Error::Format {
            offset: off,
            msg: format!("class block {k} is empty"),
        });
    }
    if shape.len() != 3 || shape.contains(&0) {
        return Err(Error::Format {
            offset: off,
            msg: format!("image shape must be three positive extents, got {shape:?}"),
        });
    }
    let n: usize = counts.iter().sum();
    let image_len: usize = shape.iter().product();
    let px_off = r.offset();
    let pixels = r.f32_tensor(vec![n * image_len])?.into_data();
    if let Some(i) = pixels.iter().position(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::Format {
            offset: px_off + 4 * i as u64,
            msg: "pixel value outside [0, 1]".into(),
        });
    }
    let label_off = r.offset();
    let labels = r.u32s(n)?;
    if !r.is_at_end() {
        return Err(Error::Format {
            offset: r.offset(),
            msg: "trailing bytes after label array".into(),
        });
    }
    let mut start = 0;
    let mut prev: Option<u32> = None;
    for &count in &counts {
        let block = &labels[start..start + count];
        let class = block[0];
        if let Some(i) = block.iter().position(|&l| l != class) {
            return Err(Error::Format {
                offset: label_off + 4 * (start + i) as u64,
                msg: "label differs from its class block".into(),
            });
        }
        if prev.is_some_and(|p| p >= class) {
            return Err(Error::Format {
                offset: label_off + 4 * start as u64,
                msg: "class blocks must appear in increasing label order".into(),
            });
        }
        prev = Some(class);
        start += count;
    }
    LabeledImageSet::from_raw(shape, pixels, labels, &domain)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn set() -> LabeledImageSet {
        let imgs = (0..6).map(|i| Tensor::full(&[2, 3, 3], i as f64 / 7.0)).collect();
        LabeledImageSet::new(imgs, vec![4, 1, 4, 1, 9, 4], "sketch").unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let s = set();
        let bytes = encode(&s);
        assert_eq!(decode(&bytes).unwrap(), s);
        assert!(String::from_utf8_lossy(&bytes[..60]).contains("classes=3 counts=2,3,1 shape=2,3,3 domain=sketch"));
    }

    #[test]
    fn foreign_magic() {
        let mut bytes = encode(&set());
        bytes[..4].copy_from_slice(b"EGT1");
        assert!(matches!(decode(&bytes), Err(Error::Format { offset: 0, .. })));
    }

    #[test]
    fn empty_class_rejected() {
        let bytes = b"EGTD\nclasses=2 counts=1,0 shape=1,1,1 domain=d\n\0\0\0\0\0\0\0\0".to_vec();
        let err = decode(&bytes).unwrap_err();
        assert!(err.to_string().contains("empty"), "{err}");
    }

    #[test]
    fn truncation_reports_offset() {
        let bytes = encode(&set());
        let err = decode(&bytes[..bytes.len() - 3]).unwrap_err();
        match err {
            Error::Format { offset, .. } => assert_eq!(offset, (bytes.len() - 3) as u64),
            e => panic!("{e}"),
        }
    }
}
