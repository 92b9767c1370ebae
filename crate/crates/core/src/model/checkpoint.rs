//! Binary checkpoint container.
//!
//! All integers are little-endian `u32`, floats little-endian IEEE `f32`:
//!
//! ```text
//! magic            8 bytes  "TDKDCKPT"
//! version          u32
//! vocab_size, feature_dim                      u32 u32
//! causal (0/1), left_context, right_context    u32 u32 u32
//! subsample, hidden, pred_dim, joint_dim       u32 u32 u32 u32
//! tensor count     u32
//! per tensor:      name_len u32, name (UTF-8), ndim u32, dims u32*, data f32*
//! ```

use std::io::{Read, Write};
use std::path::Path;

use super::params::{ParamSet, Tensor};
use super::{EncoderConfig, ModelConfig, TransducerModel};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"TDKDCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

const FORMAT: &str = "checkpoint";

fn to_u32(v: usize) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::InvalidArgument(format!("{v} does not fit in u32")))
}

pub fn encode_checkpoint(model: &TransducerModel) -> Result<Vec<u8>> {
    let c = model.config();
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    let header = [
        CHECKPOINT_VERSION as usize,
        c.vocab_size,
        c.feature_dim,
        c.encoder.causal as usize,
        c.encoder.left_context,
        c.encoder.right_context,
        c.encoder.subsample,
        c.encoder.hidden,
        c.pred_dim,
        c.joint_dim,
        model.params().tensors().len(),
    ];
    for v in header {
        out.extend_from_slice(&to_u32(v)?.to_le_bytes());
    }
    for t in model.params().tensors() {
        out.extend_from_slice(&to_u32(t.name.len())?.to_le_bytes());
        out.extend_from_slice(t.name.as_bytes());
        out.extend_from_slice(&to_u32(t.shape.len())?.to_le_bytes());
        for &d in &t.shape {
            out.extend_from_slice(&to_u32(d)?.to_le_bytes());
        }
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(
                FORMAT,
                format!("byte {}", self.pos),
                "unexpected end of file",
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()) as usize)
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<TransducerModel> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(8)? != CHECKPOINT_MAGIC {
        return Err(Error::format(FORMAT, "byte 0", "bad magic"));
    }
    let version = cur.u32()?;
    if version != CHECKPOINT_VERSION as usize {
        return Err(Error::format(
            FORMAT,
            "byte 8",
            format!("unsupported version {version}"),
        ));
    }
    let vocab_size = cur.u32()?;
    let feature_dim = cur.u32()?;
    let causal = match cur.u32()? {
        0 => false,
        1 => true,
        other => {
            return Err(Error::format(
                FORMAT,
                "causal flag",
                format!("expected 0 or 1, got {other}"),
            ))
        }
    };
    let config = ModelConfig {
        vocab_size,
        feature_dim,
        encoder: EncoderConfig {
            causal,
            left_context: cur.u32()?,
            right_context: cur.u32()?,
            subsample: cur.u32()?,
            hidden: cur.u32()?,
        },
        pred_dim: cur.u32()?,
        joint_dim: cur.u32()?,
    };
    let count = cur.u32()?;
    let mut tensors = Vec::with_capacity(count.min(64));
    for _ in 0..count {
        let name_len = cur.u32()?;
        let name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|e| Error::format(FORMAT, format!("byte {}", cur.pos), e))?
            .to_string();
        let ndim = cur.u32()?;
        let shape = (0..ndim).map(|_| cur.u32()).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = cur.take(
            n.checked_mul(4)
                .ok_or_else(|| Error::format(FORMAT, &name, "tensor too large"))?,
        )?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        tensors.push(Tensor { name, shape, data });
    }
    if cur.pos != bytes.len() {
        return Err(Error::format(
            FORMAT,
            format!("byte {}", cur.pos),
            "trailing bytes",
        ));
    }
    TransducerModel::from_parts(config, ParamSet::new(tensors))
}

pub fn write_checkpoint(model: &TransducerModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_checkpoint(model)?;
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<TransducerModel> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config() -> ModelConfig {
        ModelConfig {
            vocab_size: 4,
            feature_dim: 3,
            encoder: EncoderConfig {
                causal: true,
                left_context: 2,
                right_context: 0,
                subsample: 2,
                hidden: 5,
            },
            pred_dim: 4,
            joint_dim: 6,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = TransducerModel::new(config(), 42).unwrap();
        let bytes = encode_checkpoint(&m).unwrap();
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(encode_checkpoint(&back).unwrap(), bytes);
    }

    #[test]
    fn rejects_corruption() {
        let m = TransducerModel::new(config(), 1).unwrap();
        let mut bytes = encode_checkpoint(&m).unwrap();
        assert!(decode_checkpoint(&bytes[..bytes.len() - 1]).is_err());
        bytes[0] = b'X';
        assert!(matches!(
            decode_checkpoint(&bytes),
            Err(Error::Format { .. })
        ));
    }
}
