//! Conv stack weight files.
//!
//! Layout (all little-endian):
//!
//! ```text
//! "W2VC" | u32 version (1) | u32 layer count
//! per layer:
//!   u32 out_channels | u32 in_channels | u32 kernel | u32 norm_channels
//!   f64 weight[out][in][kernel] | f64 bias[out] | f64 gamma[norm] | f64 beta[norm]
//! ```
//!
//! `norm_channels` is 0 for layers without group normalization. Strides are
//! not stored; they belong to the [`ConvStackConfig`] the file is loaded
//! against.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array3};

use super::conv::{ConvLayerParams, ConvStackConfig, ConvStackParams, GroupNormParams};
use crate::binfmt::{Reader, Writer};
use crate::error::{Error, Result};

pub const WEIGHTS_MAGIC: &[u8; 4] = b"W2VC";
pub const WEIGHTS_VERSION: u32 = 1;

pub fn encode_weights(params: &ConvStackParams) -> Vec<u8> {
    let mut w = Writer::new();
    w.bytes(WEIGHTS_MAGIC);
    w.u32(WEIGHTS_VERSION);
    w.u32(params.layers.len() as u32);
    for layer in &params.layers {
        let (out, inp, k) = layer.weight.dim();
        w.u32(out as u32);
        w.u32(inp as u32);
        w.u32(k as u32);
        w.u32(layer.norm.as_ref().map_or(0, |n| n.gamma.len() as u32));
        w.f64s(layer.weight.as_slice().expect("standard layout"));
        w.f64s(layer.bias.as_slice().expect("standard layout"));
        if let Some(n) = &layer.norm {
            w.f64s(n.gamma.as_slice().expect("standard layout"));
            w.f64s(n.beta.as_slice().expect("standard layout"));
        }
    }
    w.into_inner()
}

pub(crate) fn read_weights_from(r: &mut Reader<'_>, config: &ConvStackConfig) -> Result<ConvStackParams> {
    let magic = r.take(4, "magic")?;
    if magic != WEIGHTS_MAGIC {
        return Err(Error::WeightFormat(format!(
            "magic {:?} is not \"W2VC\"",
            String::from_utf8_lossy(magic)
        )));
    }
    let version = r.u32("version")?;
    if version != WEIGHTS_VERSION {
        return Err(Error::WeightFormat(format!("unsupported version {version}")));
    }
    let count = r.u32("layer count")? as usize;
    if count != config.layers.len() {
        return Err(Error::ShapeMismatch {
            layer: count.min(config.layers.len()),
            detail: format!("file has {count} layers, configuration has {}", config.layers.len()),
        });
    }
    let mut layers = Vec::with_capacity(count);
    for (i, spec) in config.layers.iter().enumerate() {
        let out = r.u32("out_channels")? as usize;
        let inp = r.u32("in_channels")? as usize;
        let k = r.u32("kernel")? as usize;
        let norm = r.u32("norm channels")? as usize;
        if (out, inp, k) != (spec.out_channels, spec.in_channels, spec.kernel) {
            return Err(Error::ShapeMismatch {
                layer: i,
                detail: format!(
                    "file has out={out} in={inp} kernel={k}, configuration expects out={} in={} kernel={}",
                    spec.out_channels, spec.in_channels, spec.kernel
                ),
            });
        }
        if norm != 0 && norm != out {
            return Err(Error::ShapeMismatch {
                layer: i,
                detail: format!("{norm} normalization channels for {out} outputs"),
            });
        }
        let weight =
            Array3::from_shape_vec((out, inp, k), r.f64s(out * inp * k, "weights")?).expect("length checked by reader");
        let bias = Array1::from(r.f64s(out, "bias")?);
        let norm = if norm > 0 {
            Some(GroupNormParams {
                gamma: Array1::from(r.f64s(norm, "gamma")?),
                beta: Array1::from(r.f64s(norm, "beta")?),
            })
        } else {
            None
        };
        layers.push(ConvLayerParams { weight, bias, norm });
    }
    let params = ConvStackParams { layers, frozen: false };
    params.check_shapes(config)?;
    Ok(params)
}

pub fn decode_weights(bytes: &[u8], config: &ConvStackConfig) -> Result<ConvStackParams> {
    let mut r = Reader::new(bytes);
    let params = read_weights_from(&mut r, config)?;
    if !r.is_at_end() {
        return Err(Error::WeightFormat("trailing bytes after the last layer".into()));
    }
    Ok(params)
}

pub fn save_weights(params: &ConvStackParams, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_weights(params)).map_err(|e| Error::io(path, e))
}

pub fn load_weights(path: impl AsRef<Path>, config: &ConvStackConfig) -> Result<ConvStackParams> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_weights(&bytes, config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::conv::{Activation, ConvLayerSpec, Normalization};
    use crate::seed;

    fn cfg(channels: usize) -> ConvStackConfig {
        ConvStackConfig {
            layers: vec![
                ConvLayerSpec {
                    in_channels: 1,
                    out_channels: channels,
                    kernel: 4,
                    stride: 2,
                },
                ConvLayerSpec {
                    in_channels: channels,
                    out_channels: channels,
                    kernel: 3,
                    stride: 2,
                },
            ],
            activation: Activation::Gelu,
            normalization: Normalization::GroupNormFirstLayer,
        }
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let c = cfg(8);
        let p = ConvStackParams::kaiming_uniform(&c, &mut seed::rng(4)).unwrap();
        let back = decode_weights(&encode_weights(&p), &c).unwrap();
        assert_eq!(p, back);
        let bits = |q: &ConvStackParams| -> Vec<u64> {
            q.tensors().iter().flat_map(|t| t.iter().map(|x| x.to_bits())).collect()
        };
        assert_eq!(bits(&p), bits(&back));
    }

    #[test]
    fn wrong_channel_count_names_layer_zero() {
        let p = ConvStackParams::kaiming_uniform(&cfg(4), &mut seed::rng(4)).unwrap();
        match decode_weights(&encode_weights(&p), &cfg(8)) {
            Err(Error::ShapeMismatch { layer, .. }) => assert_eq!(layer, 0),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn truncated_and_bad_magic() {
        let c = cfg(8);
        let bytes = encode_weights(&ConvStackParams::zeros(&c));
        assert!(matches!(
            decode_weights(&bytes[..bytes.len() - 3], &c),
            Err(Error::Truncated(_))
        ));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_weights(&bad, &c), Err(Error::WeightFormat(_))));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("conv.w2vc");
        let c = cfg(8);
        let p = ConvStackParams::kaiming_uniform(&c, &mut seed::rng(8)).unwrap();
        save_weights(&p, &path).unwrap();
        assert_eq!(load_weights(&path, &c).unwrap(), p);
    }
}
