//! `EGT1` parameter checkpoints.
//!
//! Layout:
//!
//! ```text
//! EGT1\n
//! <meta line>\n
//! network name=<name> input=<d0,d1,..> layers=<n>\n
//! <one line per layer>\n
//! ...                        (further network blocks)
//! end\n
//! <payload>
//! ```
//!
//! Layer lines are `linear in=I out=O`, `conv2d in=C out=O kernel=HxW stride=S padding=P`,
//! `maxpool2d kernel=K stride=S padding=P`, `avgpool2d kernel=K stride=S padding=P`,
//! `relu` and `flatten`. The payload holds, for each network in header order and each
//! parameterized layer in layer order, the weight block then the bias block as
//! little-endian `f32`. Values are rounded to `f32` on save.

use std::collections::HashMap;
use std::path::Path;

use super::layer::{Layer, LayerKind};
use super::network::Network;
use crate::error::{Error, Result};
use crate::io_util::{write_atomic, ByteReader};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"EGT1";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Free-form `key=value` line describing what the networks belong to.
    pub meta: String,
    pub networks: Vec<(String, Network)>,
}

impl Checkpoint {
    pub fn network(&self, name: &str) -> Option<&Network> {
        self.networks.iter().find(|(n, _)| n == name).map(|(_, net)| net)
    }

    pub fn meta_fields(&self) -> HashMap<&str, &str> {
        kv_fields(&self.meta)
    }
}

fn kv_fields(line: &str) -> HashMap<&str, &str> {
    line.split_whitespace()
        .filter_map(|tok| tok.split_once('='))
        .collect()
}

fn layer_line(layer: &Layer) -> String {
    match layer {
        Layer::Linear { weight, .. } => {
            format!("linear in={} out={}", weight.shape()[1], weight.shape()[0])
        }
        Layer::Conv2d {
            weight,
            stride,
            padding,
            ..
        } => {
            let s = weight.shape();
            format!(
                "conv2d in={} out={} kernel={}x{} stride={stride} padding={padding}",
                s[1], s[0], s[2], s[3]
            )
        }
        Layer::MaxPool2d {
            kernel,
            stride,
            padding,
        } => format!("maxpool2d kernel={kernel} stride={stride} padding={padding}"),
        Layer::AvgPool2d {
            kernel,
            stride,
            padding,
        } => format!("avgpool2d kernel={kernel} stride={stride} padding={padding}"),
        Layer::Relu => "relu".into(),
        Layer::Flatten => "flatten".into(),
    }
}

fn join(dims: &[usize]) -> String {
    dims.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

pub fn encode(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    if ckpt.meta.contains('\n') {
        return Err(Error::InvalidData("checkpoint meta must be a single line".into()));
    }
    let mut header = String::new();
    header.push_str(&ckpt.meta);
    header.push('\n');
    for (name, net) in &ckpt.networks {
        if name.is_empty() || name.contains(char::is_whitespace) {
            return Err(Error::InvalidData(format!("invalid network name `{name}`")));
        }
        header.push_str(&format!(
            "network name={name} input={} layers={}\n",
            join(net.input_shape()),
            net.layers().len()
        ));
        for layer in net.layers() {
            header.push_str(&layer_line(layer));
            header.push('\n');
        }
    }
    header.push_str("end\n");
    let mut bytes = CHECKPOINT_MAGIC.to_vec();
    bytes.push(b'\n');
    bytes.extend_from_slice(header.as_bytes());
    for (_, net) in &ckpt.networks {
        for (w, b) in net.layers().iter().filter_map(Layer::params) {
            for v in w.data().iter().chain(b.data()) {
                bytes.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
    }
    Ok(bytes)
}

pub fn save(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    write_atomic(path, &encode(ckpt)?)
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

fn parse_usize(fields: &HashMap<&str, &str>, key: &str, offset: u64) -> Result<usize> {
    fields
        .get(key)
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::Format {
            offset,
            msg: format!("missing or invalid `{key}`"),
        })
}

/// A layer skeleton read from the header, waiting for its parameters.
struct PendingLayer {
    kind: LayerKind,
    fields: HashMap<String, usize>,
    kernel: (usize, usize),
}

fn parse_layer(line: &str, offset: u64) -> Result<PendingLayer> {
    let mut tokens = line.split_whitespace();
    let kind: LayerKind = tokens
        .next()
        .unwrap_or("")
        .parse()
        .map_err(|_| Error::Format {
            offset,
            msg: format!("unknown layer line `{line}`"),
        })?;
    let raw = kv_fields(line);
    let mut fields = HashMap::new();
    let mut kernel = (0, 0);
    let needed: &[&str] = match kind {
        LayerKind::Linear => &["in", "out"],
        LayerKind::Conv2d => &["in", "out", "stride", "padding"],
        LayerKind::MaxPool2d | LayerKind::AvgPool2d => &["kernel", "stride", "padding"],
        LayerKind::Relu | LayerKind::Flatten => &[],
    };
    for key in needed {
        fields.insert(key.to_string(), parse_usize(&raw, key, offset)?);
    }
    if kind == LayerKind::Conv2d {
        kernel = raw
            .get("kernel")
            .and_then(|k| k.split_once('x'))
            .and_then(|(h, w)| Some((h.parse().ok()?, w.parse().ok()?)))
            .ok_or_else(|| Error::Format {
                offset,
                msg: "missing or invalid conv kernel".into(),
            })?;
    }
    Ok(PendingLayer {
        kind,
        fields,
        kernel,
    })
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = ByteReader::new(bytes);
    let magic = r.take(4)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: format!("bad magic {magic:?}, expected EGT1"),
        });
    }
    let (off, line) = r.line()?;
    if !line.is_empty() {
        return Err(Error::Format {
            offset: off,
            msg: "expected newline after magic".into(),
        });
    }
    let (_, meta) = r.line()?;
    let meta = meta.to_string();

    let mut blocks: Vec<(String, Vec<usize>, Vec<PendingLayer>, u64)> = Vec::new();
    loop {
        let (off, line) = r.line()?;
        if line == "end" {
            break;
        }
        let fields = kv_fields(line);
        if !line.starts_with("network ") {
            return Err(Error::Format {
                offset: off,
                msg: format!("expected network block, got `{line}`"),
            });
        }
        let name = fields
            .get("name")
            .ok_or_else(|| Error::Format {
                offset: off,
                msg: "network block without name".into(),
            })?
            .to_string();
        let input: Vec<usize> = fields
            .get("input")
            .map(|s| s.split(',').map(str::parse).collect::<std::result::Result<_, _>>())
            .transpose()
            .ok()
            .flatten()
            .ok_or_else(|| Error::Format {
                offset: off,
                msg: "network block without valid input shape".into(),
            })?;
        let n_layers = parse_usize(&fields, "layers", off)?;
        let mut layers = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            let (loff, lline) = r.line()?;
            layers.push(parse_layer(lline, loff)?);
        }
        blocks.push((name, input, layers, off));
    }

    let mut networks = Vec::new();
    for (name, input, pending, off) in blocks {
        let mut layers = Vec::with_capacity(pending.len());
        for p in pending {
            let f = |k: &str| p.fields[k];
            let layer = match p.kind {
                LayerKind::Linear => {
                    let (o, i) = (f("out"), f("in"));
                    let weight = r.f32_tensor(vec![o, i])?;
                    let bias = r.f32_tensor(vec![o])?;
                    Layer::Linear { weight, bias }
                }
                LayerKind::Conv2d => {
                    let (o, i) = (f("out"), f("in"));
                    let weight = r.f32_tensor(vec![o, i, p.kernel.0, p.kernel.1])?;
                    let bias = r.f32_tensor(vec![o])?;
                    Layer::Conv2d {
                        weight,
                        bias,
                        stride: f("stride"),
                        padding: f("padding"),
                    }
                }
                LayerKind::MaxPool2d => Layer::MaxPool2d {
                    kernel: f("kernel"),
                    stride: f("stride"),
                    padding: f("padding"),
                },
                LayerKind::AvgPool2d => Layer::AvgPool2d {
                    kernel: f("kernel"),
                    stride: f("stride"),
                    padding: f("padding"),
                },
                LayerKind::Relu => Layer::Relu,
                LayerKind::Flatten => Layer::Flatten,
            };
            layers.push(layer);
        }
        let net = Network::new(&input, layers).map_err(|e| Error::Format {
            offset: off,
            msg: format!("network `{name}`: {e}"),
        })?;
        networks.push((name, net));
    }
    if !r.is_at_end() {
        return Err(Error::Format {
            offset: r.offset(),
            msg: "trailing bytes after parameter payload".into(),
        });
    }
    Ok(Checkpoint { meta, networks })
}
