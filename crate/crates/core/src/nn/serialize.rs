//! Binary weight files.
//!
//! Layout (little-endian):
//!
//! ```text
//! "C3AE"  u8 version  u32 desc_len  desc (UTF-8)  f32 payload…  u32 crc32(payload)
//! ```
//!
//! `desc` is [`ModelGraph::describe`]. The payload holds every stored array
//! in declaration order (trunk once per copy, then head); batch-norm layers
//! store gamma, beta, running mean and running variance.

use std::collections::HashMap;

use super::{ConcatMode, LayerKind, LayerSpec, ModelGraph};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"C3AE";
const VERSION: u8 = 1;
const STREAM: &str = "weight file";

pub fn serialize(model: &ModelGraph) -> Vec<u8> {
    let desc = model.describe();
    let mut payload = Vec::with_capacity(4 * model.stored_values());
    for (key, _, _) in model.slot_list() {
        for &v in slot_values(model, &key) {
            payload.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let mut out = Vec::with_capacity(payload.len() + desc.len() + 13);
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(desc.len() as u32).to_le_bytes());
    out.extend_from_slice(desc.as_bytes());
    out.extend_from_slice(&payload);
    out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
    out
}

fn slot_values<'a>(model: &'a ModelGraph, key: &str) -> &'a [f64] {
    if let Some(base) = key.strip_suffix(".running_mean") {
        &model.stats[base].mean
    } else if let Some(base) = key.strip_suffix(".running_var") {
        &model.stats[base].var
    } else {
        model.params[key].data()
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or(Error::Truncated(STREAM))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn deserialize(bytes: &[u8]) -> Result<ModelGraph> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4).map_err(|_| Error::BadMagic)? != MAGIC {
        return Err(Error::BadMagic);
    }
    let version = r.take(1)?[0];
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let desc_len = r.u32()? as usize;
    let desc = std::str::from_utf8(r.take(desc_len)?)
        .map_err(|_| Error::GraphDescription("description is not UTF-8".into()))?;
    let mut model = parse_description(desc)?;

    let slots: Vec<(String, usize)> = model
        .slot_list()
        .into_iter()
        .map(|(k, _, s)| (k, s.iter().product()))
        .collect();
    let total: usize = slots.iter().map(|(_, n)| n).sum();
    let payload = r.take(4 * total)?;
    let stored = r.u32()?;
    if r.pos != bytes.len() {
        return Err(Error::GraphDescription(format!(
            "{} trailing bytes after checksum",
            bytes.len() - r.pos
        )));
    }
    let computed = crc32fast::hash(payload);
    if stored != computed {
        return Err(Error::ChecksumMismatch { stored, computed });
    }

    let mut values = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64);
    for (key, n) in slots {
        let chunk: Vec<f64> = values.by_ref().take(n).collect();
        if let Some(base) = key.strip_suffix(".running_mean") {
            model.stats.get_mut(base).expect("slot").mean = chunk;
        } else if let Some(base) = key.strip_suffix(".running_var") {
            model.stats.get_mut(base).expect("slot").var = chunk;
        } else {
            model
                .params
                .get_mut(&key)
                .expect("slot")
                .data_mut()
                .copy_from_slice(&chunk);
        }
    }
    Ok(model)
}

fn bad(msg: impl Into<String>) -> Error {
    Error::GraphDescription(msg.into())
}

fn fields(tokens: &[&str]) -> Result<HashMap<String, String>> {
    tokens
        .iter()
        .map(|t| {
            t.split_once('=')
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .ok_or_else(|| bad(format!("expected key=value, got {t:?}")))
        })
        .collect()
}

fn get<T: std::str::FromStr>(f: &HashMap<String, String>, key: &str, line: &str) -> Result<T> {
    f.get(key)
        .ok_or_else(|| bad(format!("missing {key} in {line:?}")))?
        .parse()
        .map_err(|_| bad(format!("bad {key} in {line:?}")))
}

fn parse_description(desc: &str) -> Result<ModelGraph> {
    let mut lines = desc.lines().filter(|l| !l.trim().is_empty());
    let header = lines.next().ok_or_else(|| bad("empty description"))?;
    let tokens: Vec<&str> = header.split_whitespace().collect();
    if tokens.first() != Some(&"graph") {
        return Err(bad(format!("expected graph header, got {header:?}")));
    }
    let h = fields(&tokens[1..])?;
    let branches: usize = get(&h, "branches", header)?;
    let shared = match get::<u8>(&h, "shared", header)? {
        0 => false,
        1 => true,
        other => return Err(bad(format!("shared must be 0 or 1, got {other}"))),
    };
    let input: Vec<usize> = h
        .get("input")
        .ok_or_else(|| bad("missing input"))?
        .split('x')
        .map(|d| {
            d.parse()
                .map_err(|_| bad(format!("bad input dims in {header:?}")))
        })
        .collect::<Result<_>>()?;
    let input: [usize; 3] = input.try_into().map_err(|_| bad("input must be HxWxC"))?;
    let momentum: f64 = get(&h, "bn_momentum", header)?;
    let epsilon: f64 = get(&h, "bn_epsilon", header)?;

    let layers = lines.map(parse_layer).collect::<Result<Vec<_>>>()?;
    ModelGraph::from_layers(layers, branches, shared, input, momentum, epsilon).map_err(|e| match e {
        Error::InvalidArgument(m) | Error::Shape(m) => bad(m),
        other => other,
    })
}

fn parse_layer(line: &str) -> Result<LayerSpec> {
    let tokens: Vec<&str> = line.split_whitespace().collect();
    let [name, kind, rest @ ..] = tokens.as_slice() else {
        return Err(bad(format!("layer line {line:?} needs a name and a kind")));
    };
    let f = fields(rest)?;
    let kind = match *kind {
        "conv" => LayerKind::Conv {
            kernel: get(&f, "k", line)?,
            in_channels: get(&f, "in", line)?,
            out_channels: get(&f, "out", line)?,
            stride: get(&f, "stride", line)?,
        },
        "batchnorm" => LayerKind::BatchNorm {
            channels: get(&f, "c", line)?,
        },
        "relu" => LayerKind::Relu,
        "avgpool" => LayerKind::AvgPool {
            window: get(&f, "window", line)?,
            stride: get(&f, "stride", line)?,
        },
        "se" => LayerKind::Se {
            channels: get(&f, "c", line)?,
            squeeze: get(&f, "squeeze", line)?,
        },
        "residual" => LayerKind::Residual {
            from: get(&f, "from", line)?,
        },
        "flatten" => LayerKind::Flatten,
        "concat" => LayerKind::Concat {
            mode: get::<ConcatMode>(&f, "mode", line)?,
        },
        "dropout" => LayerKind::Dropout {
            rate: get(&f, "rate", line)?,
        },
        "dense" => LayerKind::Dense {
            inputs: get(&f, "in", line)?,
            outputs: get(&f, "out", line)?,
        },
        "softmax" => LayerKind::Softmax,
        other => return Err(bad(format!("unknown layer kind {other:?}"))),
    };
    Ok(LayerSpec::new(*name, kind))
}
