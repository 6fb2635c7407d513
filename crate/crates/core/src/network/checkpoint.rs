//! Checkpoint container.
//!
//! Layout (little-endian): magic `DBEC`, u16 version, u32 length of a UTF-8
//! `key = value` config block, the block, u32 tensor count, then per tensor
//! u16 name length, name bytes, u8 rank, u32 dims, raw f32 data.

use std::io::{Read, Write};

use crate::binio::Reader;
use crate::config::KeyValues;
use crate::error::{format_err, Error, Result};

use super::{build_dbe_lenet, Model, ModelConfig, NamedTensor};

const MAGIC: &[u8; 4] = b"DBEC";
pub const CHECKPOINT_VERSION: u16 = 1;

/// Writes the model config merged with `meta`, then every parameter and buffer.
pub fn write_checkpoint<W: Write>(model: &Model<f32>, meta: &KeyValues, mut w: W) -> Result<()> {
    let mut block = meta.clone();
    block.merge(&model.config().to_key_values());
    let text = block.to_text();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    let all: Vec<&NamedTensor<f32>> = model.params().iter().chain(model.buffers()).collect();
    out.extend_from_slice(&(all.len() as u32).to_le_bytes());
    for t in all {
        out.extend_from_slice(&(t.name.len() as u16).to_le_bytes());
        out.extend_from_slice(t.name.as_bytes());
        let shape = t.tensor.shape();
        out.push(shape.len() as u8);
        for &d in shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    w.write_all(&out)?;
    Ok(())
}

/// Reads a checkpoint, returning the model and the full config block.
pub fn read_checkpoint<R: Read>(mut r: R) -> Result<(Model<f32>, KeyValues)> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    let mut rd = Reader::new(&buf);
    rd.expect_magic(MAGIC)?;
    let at = rd.offset();
    let version = rd.u16_le()?;
    if version != CHECKPOINT_VERSION {
        return format_err(at, format!("unsupported checkpoint version {version}"));
    }
    let len = rd.u32_le()? as usize;
    let at = rd.offset();
    let text = std::str::from_utf8(rd.bytes(len)?)
        .map_err(|e| Error::Format { offset: at, msg: format!("config block: {e}") })?;
    let kv = KeyValues::parse(text)?;
    let cfg = ModelConfig::from_key_values(&kv)?;
    let mut model = build_dbe_lenet::<f32>(&cfg)?;

    let count = rd.u32_le()? as usize;
    let expected = model.params().len() + model.buffers().len();
    if count != expected {
        return format_err(
            rd.offset(),
            format!("checkpoint holds {count} tensors, model has {expected}"),
        );
    }
    let mut seen = vec![false; expected];
    for _ in 0..count {
        let at = rd.offset();
        let nlen = rd.u16_le()? as usize;
        let name = std::str::from_utf8(rd.bytes(nlen)?)
            .map_err(|e| Error::Format { offset: at, msg: format!("tensor name: {e}") })?
            .to_string();
        let rank = rd.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(rd.u32_le()? as usize);
        }
        let np = model.params().len();
        let slot = model
            .params()
            .iter()
            .chain(model.buffers())
            .position(|t| t.name == name);
        let Some(slot) = slot else {
            return format_err(at, format!("unknown tensor {name:?}"));
        };
        if seen[slot] {
            return format_err(at, format!("duplicate tensor {name:?}"));
        }
        seen[slot] = true;
        let target = if slot < np {
            &mut model.params_mut()[slot].tensor
        } else {
            &mut model.buffers_mut()[slot - np].tensor
        };
        if target.shape() != shape.as_slice() {
            return format_err(
                at,
                format!("tensor {name:?} has shape {shape:?}, model expects {:?}", target.shape()),
            );
        }
        let n = target.len();
        let raw = rd.bytes(n * 4)?;
        for (dst, chunk) in target.data_mut().iter_mut().zip(raw.chunks_exact(4)) {
            *dst = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
        }
    }
    rd.expect_end()?;
    Ok((model, kv))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::ModelConfig;

    fn tiny() -> ModelConfig {
        ModelConfig {
            code_length: 16,
            conv_channels: [2, 3],
            dense_width: 8,
            input_shape: [1, 8, 8],
            classes: 3,
            seed: 1,
        }
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let mut m = build_dbe_lenet::<f32>(&tiny()).unwrap();
        m.buffers_mut()[0].tensor.data_mut()[0] = f32::from_bits(0x3f80_0001);
        let mut meta = KeyValues::new();
        meta.set("task", "multiclass");
        let mut bytes = Vec::new();
        write_checkpoint(&m, &meta, &mut bytes).unwrap();
        let (back, kv) = read_checkpoint(bytes.as_slice()).unwrap();
        assert_eq!(back, m);
        assert_eq!(kv.get("task"), Some("multiclass"));
        let mut again = Vec::new();
        write_checkpoint(&back, &meta, &mut again).unwrap();
        assert_eq!(bytes, again);
    }

    #[test]
    fn truncation_and_magic_errors() {
        let m = build_dbe_lenet::<f32>(&tiny()).unwrap();
        let mut bytes = Vec::new();
        write_checkpoint(&m, &KeyValues::new(), &mut bytes).unwrap();
        let cut = &bytes[..bytes.len() - 3];
        assert!(matches!(read_checkpoint(cut), Err(Error::Format { .. })));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(read_checkpoint(bad.as_slice()), Err(Error::Format { offset: 0, .. })));
    }
}
