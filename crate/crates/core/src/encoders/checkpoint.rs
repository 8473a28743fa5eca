//! Versioned binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic     8 bytes  "PRODCKPT"
//! version   u32      currently 1
//! kind      u8       0 = dual encoder, 1 = cross encoder
//! config    u32 num_layers, u32 hidden_dim, u32 vocab_size,
//!           u32 max_query_len, u32 max_passage_len, u64 seed, u8 share_towers
//! count     u32      number of parameter blocks
//! block     u32 name length, name bytes (UTF-8),
//!           u32 rank, u32 per dimension, f64 per value
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::cross::CrossEncoder;
use super::dual::DualEncoder;
use super::tower::{EncoderConfig, Parameterized, Tower};
use super::Encoder;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const MAGIC: &[u8; 8] = b"PRODCKPT";
pub const VERSION: u32 = 1;

const KIND_DUAL: u8 = 0;
const KIND_CROSS: u8 = 1;

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Input(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn to_bytes(model: &Encoder) -> Result<Vec<u8>> {
    let (kind, config) = match model {
        Encoder::Dual(m) => (KIND_DUAL, m.config()),
        Encoder::Cross(m) => (KIND_CROSS, m.config()),
    };
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(kind);
    put_u32(&mut out, config.num_layers)?;
    put_u32(&mut out, config.hidden_dim)?;
    out.extend_from_slice(&config.vocab_size.to_le_bytes());
    put_u32(&mut out, config.max_query_len)?;
    put_u32(&mut out, config.max_passage_len)?;
    out.extend_from_slice(&config.seed.to_le_bytes());
    out.push(u8::from(config.share_towers));
    let params = model.params();
    put_u32(&mut out, params.len())?;
    for (name, t) in params {
        put_u32(&mut out, name.len())?;
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, t.shape().len())?;
        for &d in t.shape() {
            put_u32(&mut out, d)?;
        }
        for v in t.values() {
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
        if self.pos + n > self.bytes.len() {
            return Err(Error::Input(format!(
                "checkpoint truncated at byte {} (needed {n} more)",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<Encoder> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(8)? != MAGIC {
        return Err(Error::Input("not a checkpoint: bad magic".into()));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(Error::Input(format!("unsupported checkpoint version {version}")));
    }
    let kind = c.u8()?;
    let config = EncoderConfig {
        num_layers: c.u32()? as usize,
        hidden_dim: c.u32()? as usize,
        vocab_size: c.u32()?,
        max_query_len: c.u32()? as usize,
        max_passage_len: c.u32()? as usize,
        seed: c.u64()?,
        share_towers: c.u8()? != 0,
    };
    config.validate()?;
    let mut model = match kind {
        KIND_DUAL => Encoder::Dual(DualEncoder::from_parts(
            config.clone(),
            Tower::zeros(&config),
            (!config.share_towers).then(|| Tower::zeros(&config)),
        )),
        KIND_CROSS => Encoder::Cross(CrossEncoder::from_parts(
            config.clone(),
            Tower::zeros(&config),
            Tensor::zeros(vec![config.hidden_dim]),
        )?),
        other => return Err(Error::Input(format!("unknown model kind {other}"))),
    };
    let count = c.u32()? as usize;
    let mut slots = model.params_mut();
    if count != slots.len() {
        return Err(Error::Input(format!(
            "checkpoint holds {count} parameter blocks, model expects {}",
            slots.len()
        )));
    }
    for (expected_name, tensor) in slots.iter_mut() {
        let name_len = c.u32()? as usize;
        let name =
            std::str::from_utf8(c.take(name_len)?).map_err(|_| Error::Input("parameter name is not UTF-8".into()))?;
        if name != expected_name {
            return Err(Error::Input(format!(
                "expected parameter block {expected_name}, found {name}"
            )));
        }
        let rank = c.u32()? as usize;
        let shape = (0..rank)
            .map(|_| c.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        if shape != tensor.shape() {
            return Err(Error::Shape(format!(
                "{name}: stored shape {shape:?}, expected {:?}",
                tensor.shape()
            )));
        }
        for v in tensor.values_mut() {
            let x = c.f64()?;
            if !x.is_finite() {
                return Err(Error::Input(format!("{name}: non-finite value")));
            }
            *v = x;
        }
    }
    drop(slots);
    if c.pos != bytes.len() {
        return Err(Error::Input(format!(
            "{} trailing bytes after checkpoint",
            bytes.len() - c.pos
        )));
    }
    Ok(model)
}

pub fn save(model: &Encoder, path: &Path) -> Result<()> {
    let bytes = to_bytes(model)?;
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Encoder> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(share: bool) -> EncoderConfig {
        EncoderConfig {
            num_layers: 2,
            hidden_dim: 4,
            vocab_size: 20,
            max_query_len: 3,
            max_passage_len: 5,
            seed: 99,
            share_towers: share,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        for model in [
            Encoder::Dual(DualEncoder::new(config(false)).unwrap()),
            Encoder::Dual(DualEncoder::new(config(true)).unwrap()),
            Encoder::Cross(CrossEncoder::new(config(false)).unwrap()),
        ] {
            let bytes = to_bytes(&model).unwrap();
            let back = from_bytes(&bytes).unwrap();
            assert_eq!(back, model);
            assert_eq!(to_bytes(&back).unwrap(), bytes);
        }
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nested/student.ckpt");
        let model = Encoder::Dual(DualEncoder::new(config(false)).unwrap());
        save(&model, &path).unwrap();
        assert_eq!(load(&path).unwrap(), model);
    }

    #[test]
    fn corrupt_input_is_rejected() {
        let model = Encoder::Cross(CrossEncoder::new(config(false)).unwrap());
        let bytes = to_bytes(&model).unwrap();
        assert!(from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(from_bytes(&bad).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(from_bytes(&extra).is_err());
    }
}
