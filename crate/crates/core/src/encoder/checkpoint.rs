//! Encoder parameter checkpoints.
//!
//! Binary layout (little endian):
//!
//! ```text
//! b"VACEENC1"
//! u32  header length, then a JSON header {"config": ..., "training": bool}
//! u32  tensor count
//! per tensor: u16 name length, name (UTF-8), u64 element count, f64 values
//! ```
//!
//! Tensor names are `conv{i}.*` for the depthwise stages and `head.*` for
//! the pointwise head, with suffixes `weight`, `bias`, `bn.gamma`,
//! `bn.beta`, `bn.running_mean`, `bn.running_var`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{BatchNorm, Block, ConvLayer, EncoderConfig, EncoderParams, EncoderVariant};
use crate::error::{Result, VaceError};

const MAGIC: &[u8; 8] = b"VACEENC1";

#[derive(Serialize, Deserialize)]
struct Header {
    config: EncoderConfig,
    training: bool,
}

#[derive(Serialize, Deserialize)]
struct NamedTensor {
    name: String,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct JsonCheckpoint {
    config: EncoderConfig,
    training: bool,
    tensors: Vec<NamedTensor>,
}

struct BlockShape {
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
    fan_in: usize,
    relu: bool,
}

fn overflow() -> VaceError {
    VaceError::Format("configuration dimensions overflow".into())
}

fn block_shapes(config: &EncoderConfig) -> Result<Vec<BlockShape>> {
    config.validate()?;
    let c = config.channels.checked_mul(config.c_e).ok_or_else(overflow)?;
    let mut shapes: Vec<BlockShape> = config
        .kernel_sizes
        .iter()
        .enumerate()
        .map(|(l, &k)| {
            let in_channels = if l == 0 { config.channels } else { c };
            let fan_in = match (l, config.variant) {
                (0, EncoderVariant::SharedKernel) => config.channels,
                _ => 1,
            };
            BlockShape {
                in_channels,
                out_channels: c,
                kernel: k,
                fan_in,
                relu: true,
            }
        })
        .collect();
    shapes.push(BlockShape {
        in_channels: c,
        out_channels: config.d_z,
        kernel: 1,
        fan_in: c,
        relu: false,
    });
    Ok(shapes)
}

impl EncoderParams {
    /// Every tensor, learnable or not, with its checkpoint name.
    pub fn named_tensors(&self) -> Vec<(String, &[f64])> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            let tag = self.block_tag(i);
            out.push((format!("{tag}.weight"), b.conv.weight.as_slice()));
            out.push((format!("{tag}.bias"), b.conv.bias.as_slice()));
            if let Some(bn) = &b.norm {
                out.push((format!("{tag}.bn.gamma"), bn.gamma.as_slice()));
                out.push((format!("{tag}.bn.beta"), bn.beta.as_slice()));
                out.push((format!("{tag}.bn.running_mean"), bn.running_mean.as_slice()));
                out.push((format!("{tag}.bn.running_var"), bn.running_var.as_slice()));
            }
        }
        out
    }

    fn from_named(config: EncoderConfig, training: bool, mut tensors: BTreeMap<String, Vec<f64>>) -> Result<Self> {
        let shapes = block_shapes(&config)?;
        let n_blocks = shapes.len();
        let mut take = |name: String, len: usize| -> Result<Vec<f64>> {
            let t = tensors
                .remove(&name)
                .ok_or_else(|| VaceError::Format(format!("missing tensor `{name}`")))?;
            if t.len() != len {
                return Err(VaceError::Dimension(format!(
                    "tensor `{name}` has {} values, expected {len}",
                    t.len()
                )));
            }
            Ok(t)
        };
        let mut blocks = Vec::with_capacity(n_blocks);
        for (i, s) in shapes.iter().enumerate() {
            let tag = if i + 1 == n_blocks {
                "head".to_string()
            } else {
                format!("conv{i}")
            };
            let w_len = s
                .out_channels
                .checked_mul(s.fan_in)
                .and_then(|v| v.checked_mul(s.kernel))
                .ok_or_else(overflow)?;
            let conv = ConvLayer {
                in_channels: s.in_channels,
                out_channels: s.out_channels,
                kernel: s.kernel,
                fan_in: s.fan_in,
                weight: take(format!("{tag}.weight"), w_len)?,
                bias: take(format!("{tag}.bias"), s.out_channels)?,
            };
            let norm = if config.batchnorm {
                let bn = BatchNorm {
                    gamma: take(format!("{tag}.bn.gamma"), s.out_channels)?,
                    beta: take(format!("{tag}.bn.beta"), s.out_channels)?,
                    running_mean: take(format!("{tag}.bn.running_mean"), s.out_channels)?,
                    running_var: take(format!("{tag}.bn.running_var"), s.out_channels)?,
                };
                if bn.running_var.iter().any(|&v| !(v > 0.0)) {
                    return Err(VaceError::Format(format!("`{tag}.bn.running_var` must be positive")));
                }
                Some(bn)
            } else {
                None
            };
            blocks.push(Block {
                conv,
                norm,
                relu: s.relu,
            });
        }
        if let Some(extra) = tensors.keys().next() {
            return Err(VaceError::Format(format!("unexpected tensor `{extra}`")));
        }
        Ok(EncoderParams {
            config,
            blocks,
            training,
        })
    }
}

pub fn encode_params(params: &EncoderParams) -> Vec<u8> {
    let header = serde_json::to_vec(&Header {
        config: params.config.clone(),
        training: params.training,
    })
    .expect("header serializes");
    let tensors = params.named_tensors();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, data) in tensors {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(data.len() as u64).to_le_bytes());
        for v in data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() < n {
            return Err(VaceError::Format("truncated checkpoint".into()));
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode_params(bytes: &[u8]) -> Result<EncoderParams> {
    let mut cur = Cursor { buf: bytes };
    if cur.take(MAGIC.len())? != MAGIC {
        return Err(VaceError::Format("not an encoder checkpoint".into()));
    }
    let header_len = cur.u32()? as usize;
    let header: Header = serde_json::from_slice(cur.take(header_len)?)
        .map_err(|e| VaceError::Format(format!("bad checkpoint header: {e}")))?;
    let count = cur.u32()? as usize;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let name_len = cur.u16()? as usize;
        let name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|_| VaceError::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let len = cur.u64()?;
        let n_bytes = usize::try_from(len)
            .ok()
            .and_then(|l| l.checked_mul(8))
            .ok_or_else(|| VaceError::Format("tensor length overflows".into()))?;
        let raw = cur.take(n_bytes)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        if tensors.insert(name.clone(), data).is_some() {
            return Err(VaceError::Format(format!("duplicate tensor `{name}`")));
        }
    }
    if !cur.buf.is_empty() {
        return Err(VaceError::Format("trailing bytes after checkpoint".into()));
    }
    EncoderParams::from_named(header.config, header.training, tensors)
}

pub fn params_to_json(params: &EncoderParams) -> String {
    let doc = JsonCheckpoint {
        config: params.config.clone(),
        training: params.training,
        tensors: params
            .named_tensors()
            .into_iter()
            .map(|(name, data)| NamedTensor {
                name,
                data: data.to_vec(),
            })
            .collect(),
    };
    serde_json::to_string(&doc).expect("checkpoint serializes")
}

pub fn params_from_json(text: &str) -> Result<EncoderParams> {
    let doc: JsonCheckpoint =
        serde_json::from_str(text).map_err(|e| VaceError::Format(format!("bad checkpoint: {e}")))?;
    let mut tensors = BTreeMap::new();
    for t in doc.tensors {
        if tensors.insert(t.name.clone(), t.data).is_some() {
            return Err(VaceError::Format(format!("duplicate tensor `{}`", t.name)));
        }
    }
    EncoderParams::from_named(doc.config, doc.training, tensors)
}
