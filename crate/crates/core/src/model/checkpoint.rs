//! Model checkpoints.
//!
//! A sectioned container built from the same little-endian primitives as
//! the conv weight file:
//!
//! ```text
//! "VPDM" | u32 version (1) | u32 section count
//! per section: 4-byte tag | u64 payload length | payload
//! ```
//!
//! Sections:
//! - `JSON`: header with the [`ModelConfig`], frozen flag, epoch and seed.
//! - `CONV`: a complete conv weight file.
//! - `GRU_`: forward then backward direction, each `w_input`, `w_hidden`,
//!   `bias` as tensors.
//! - `HEAD`: u32 layer count, then `weight`, `bias` tensors per layer.
//!
//! A tensor is `u32 rank | u32 dims[rank] | f64 data`. Unknown sections are
//! skipped.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::{DenseLayer, GruDirection, GruParams, HeadParams, ModelConfig, ModelParams};
use crate::binfmt::{Reader, Writer};
use crate::error::{Error, Result};
use crate::features::{encode_weights, read_weights_from};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"VPDM";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ModelParams,
    /// Completed training epochs, if saved during training.
    pub epoch: Option<usize>,
    pub seed: Option<u64>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    producer: String,
    config: ModelConfig,
    conv_frozen: bool,
    epoch: Option<usize>,
    seed: Option<u64>,
}

fn tensor(w: &mut Writer, dims: &[usize], data: &[f64]) {
    w.u32(dims.len() as u32);
    for &d in dims {
        w.u32(d as u32);
    }
    w.f64s(data);
}

fn read_tensor(r: &mut Reader<'_>, expected: &[usize], what: &str) -> Result<Vec<f64>> {
    let rank = r.u32(what)? as usize;
    let dims = (0..rank)
        .map(|_| r.u32(what).map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    if dims != expected {
        return Err(Error::WeightFormat(format!(
            "{what}: stored shape {dims:?}, configuration expects {expected:?}"
        )));
    }
    r.f64s(dims.iter().product(), what)
}

fn section(w: &mut Writer, tag: &[u8; 4], payload: Vec<u8>) {
    w.bytes(tag);
    w.u64(payload.len() as u64);
    w.bytes(&payload);
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    ckpt.params.check_shapes(&ckpt.config)?;
    let header = Header {
        producer: crate::provenance::producer(),
        config: ckpt.config.clone(),
        conv_frozen: ckpt.params.conv.frozen,
        epoch: ckpt.epoch,
        seed: ckpt.seed,
    };

    let mut gru = Writer::new();
    for d in [&ckpt.params.gru.forward, &ckpt.params.gru.backward] {
        let (g3, din) = d.w_input.dim();
        let h = d.w_hidden.ncols();
        tensor(&mut gru, &[g3, din], d.w_input.as_slice().expect("standard layout"));
        tensor(&mut gru, &[g3, h], d.w_hidden.as_slice().expect("standard layout"));
        tensor(&mut gru, &[g3], d.bias.as_slice().expect("standard layout"));
    }

    let mut head = Writer::new();
    head.u32(ckpt.params.head.layers.len() as u32);
    for l in &ckpt.params.head.layers {
        let (o, i) = l.weight.dim();
        tensor(&mut head, &[o, i], l.weight.as_slice().expect("standard layout"));
        tensor(&mut head, &[o], l.bias.as_slice().expect("standard layout"));
    }

    let mut w = Writer::new();
    w.bytes(CHECKPOINT_MAGIC);
    w.u32(CHECKPOINT_VERSION);
    w.u32(4);
    section(&mut w, b"JSON", serde_json::to_vec(&header)?);
    section(&mut w, b"CONV", encode_weights(&ckpt.params.conv));
    section(&mut w, b"GRU_", gru.into_inner());
    section(&mut w, b"HEAD", head.into_inner());
    Ok(w.into_inner())
}

fn decode_gru(bytes: &[u8], config: &ModelConfig) -> Result<GruParams> {
    let mut r = Reader::new(bytes);
    let (h, d) = (config.gru_hidden, config.conv.feature_dim());
    let mut dir = |name: &str| -> Result<GruDirection> {
        Ok(GruDirection {
            w_input: Array2::from_shape_vec((3 * h, d), read_tensor(&mut r, &[3 * h, d], name)?)
                .expect("length checked"),
            w_hidden: Array2::from_shape_vec((3 * h, h), read_tensor(&mut r, &[3 * h, h], name)?)
                .expect("length checked"),
            bias: Array1::from(read_tensor(&mut r, &[3 * h], name)?),
        })
    };
    let forward = dir("forward GRU")?;
    let backward = dir("backward GRU")?;
    if !r.is_at_end() {
        return Err(Error::WeightFormat("trailing bytes in GRU section".into()));
    }
    Ok(GruParams { forward, backward })
}

fn decode_head(bytes: &[u8], config: &ModelConfig) -> Result<HeadParams> {
    let mut r = Reader::new(bytes);
    let widths = config.head_widths();
    let count = r.u32("head layer count")? as usize;
    if count != widths.len() - 1 {
        return Err(Error::WeightFormat(format!(
            "head has {count} layers, configuration expects {}",
            widths.len() - 1
        )));
    }
    let layers = widths
        .windows(2)
        .map(|w| {
            let (i, o) = (w[0], w[1]);
            Ok(DenseLayer {
                weight: Array2::from_shape_vec((o, i), read_tensor(&mut r, &[o, i], "head weight")?)
                    .expect("length checked"),
                bias: Array1::from(read_tensor(&mut r, &[o], "head bias")?),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    if !r.is_at_end() {
        return Err(Error::WeightFormat("trailing bytes in head section".into()));
    }
    Ok(HeadParams { layers })
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader::new(bytes);
    let magic = r.take(4, "magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::WeightFormat(format!(
            "magic {:?} is not a model checkpoint",
            String::from_utf8_lossy(magic)
        )));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::WeightFormat(format!("unsupported checkpoint version {version}")));
    }
    let count = r.u32("section count")?;
    let mut sections: Vec<(&[u8], &[u8])> = Vec::new();
    for _ in 0..count {
        let tag = r.take(4, "section tag")?;
        let len = usize::try_from(r.u64("section length")?)
            .map_err(|_| Error::WeightFormat("section length overflows".into()))?;
        sections.push((tag, r.take(len, "section payload")?));
    }
    if !r.is_at_end() {
        return Err(Error::WeightFormat("trailing bytes after the last section".into()));
    }
    let find = |tag: &[u8; 4]| {
        sections
            .iter()
            .find(|(t, _)| t == tag)
            .map(|(_, p)| *p)
            .ok_or_else(|| Error::WeightFormat(format!("missing {} section", String::from_utf8_lossy(tag))))
    };

    let header: Header =
        serde_json::from_slice(find(b"JSON")?).map_err(|e| Error::WeightFormat(format!("checkpoint header: {e}")))?;
    header.config.validate()?;
    let mut conv_reader = Reader::new(find(b"CONV")?);
    let mut conv = read_weights_from(&mut conv_reader, &header.config.conv)?;
    if !conv_reader.is_at_end() {
        return Err(Error::WeightFormat("trailing bytes in conv section".into()));
    }
    conv.frozen = header.conv_frozen;
    let params = ModelParams {
        conv,
        gru: decode_gru(find(b"GRU_")?, &header.config)?,
        head: decode_head(find(b"HEAD")?, &header.config)?,
    };
    params.check_shapes(&header.config)?;
    Ok(Checkpoint {
        config: header.config,
        params,
        epoch: header.epoch,
        seed: header.seed,
    })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_checkpoint(ckpt)?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
