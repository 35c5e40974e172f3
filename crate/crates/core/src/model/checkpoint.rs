//! Versioned binary checkpoints.
//!
//! Layout (little-endian): magic `VMAECKPT`, `u32` version, `u32` header
//! length, JSON header `{kind, config}`, `u32` array count, then per array a
//! `u32` name length, UTF-8 name, `u32` rank, `u64` dims and `f32` values.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::nn::{Params, Scalar};
use crate::error::{io_err, Error, Result};

const MAGIC: &[u8; 8] = b"VMAECKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub kind: String,
    pub config: ModelConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: Header,
    pub arrays: BTreeMap<String, (Vec<usize>, Vec<f32>)>,
    /// Names in file order.
    pub order: Vec<String>,
}

pub fn encode<F: Scalar>(kind: &str, config: &ModelConfig, model: &impl Params<F>) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(&Header {
        kind: kind.to_string(),
        config: config.clone(),
    })?;
    let mut entries = Vec::new();
    model.visit("", &mut |name, p| entries.push((name.to_string(), p.shape.clone(), p.value.clone())));
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, shape, values) in entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for s in shape {
            out.extend_from_slice(&(s as u64).to_le_bytes());
        }
        for v in values {
            out.extend_from_slice(&(v.f64() as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn save<F: Scalar>(path: &Path, kind: &str, config: &ModelConfig, model: &impl Params<F>) -> Result<()> {
    fs::write(path, encode(kind, config, model)?).map_err(io_err(path))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or("truncated file")?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode(buf: &[u8]) -> std::result::Result<Checkpoint, String> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err("not a checkpoint (bad magic)".into());
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(format!("unsupported version {version}, expected {VERSION}"));
    }
    let hlen = r.u32()? as usize;
    let header: Header = serde_json::from_slice(r.take(hlen)?).map_err(|e| format!("bad header: {e}"))?;
    let n = r.u32()? as usize;
    let mut arrays = BTreeMap::new();
    let mut order = Vec::with_capacity(n);
    for _ in 0..n {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| "array name is not UTF-8")?;
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u64().map(|v| v as usize)).collect::<std::result::Result<Vec<_>, _>>()?;
        let count: usize = shape.iter().product();
        let bytes = r.take(count.checked_mul(4).ok_or("array too large")?)?;
        let values = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        order.push(name.clone());
        if arrays.insert(name.clone(), (shape, values)).is_some() {
            return Err(format!("duplicate array {name}"));
        }
    }
    if r.pos != buf.len() {
        return Err("trailing bytes".into());
    }
    Ok(Checkpoint { header, arrays, order })
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let buf = fs::read(path).map_err(io_err(path))?;
    decode(&buf).map_err(|msg| Error::Checkpoint {
        path: path.to_path_buf(),
        msg,
    })
}

impl Checkpoint {
    /// Copies every parameter of `model` whose name starts with `prefix`
    /// from the checkpoint. Fails on a config mismatch or on a missing or
    /// misshapen array.
    pub fn restore<F: Scalar>(&self, config: &ModelConfig, model: &mut impl Params<F>, prefix: &str) -> std::result::Result<usize, String> {
        if &self.header.config != config {
            return Err(format!(
                "model config mismatch: checkpoint has {}, run expects {}",
                serde_json::to_string(&self.header.config).unwrap_or_default(),
                serde_json::to_string(config).unwrap_or_default()
            ));
        }
        let mut err = None;
        let mut restored = 0;
        model.visit_mut("", &mut |name, p| {
            if err.is_some() || !name.starts_with(prefix) {
                return;
            }
            match self.arrays.get(name) {
                None => err = Some(format!("missing array {name}")),
                Some((shape, _)) if shape != &p.shape => {
                    err = Some(format!("array {name} has shape {shape:?}, expected {:?}", p.shape))
                }
                Some((_, values)) => {
                    for (dst, &v) in p.value.iter_mut().zip(values) {
                        *dst = F::of(v as f64);
                    }
                    restored += 1;
                }
            }
        });
        match err {
            Some(e) => Err(e),
            None => Ok(restored),
        }
    }

    pub fn restore_from<F: Scalar>(&self, path: &Path, config: &ModelConfig, model: &mut impl Params<F>, prefix: &str) -> Result<usize> {
        self.restore(config, model, prefix).map_err(|msg| Error::Checkpoint {
            path: path.to_path_buf(),
            msg,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Detector, MaeModel};

    fn small() -> ModelConfig {
        ModelConfig {
            depth: 1,
            dim: 16,
            decoder_depth: 1,
            decoder_dim: 16,
            ..Default::default()
        }
    }

    #[test]
    fn round_trip_and_encoder_transfer() {
        let cfg = small();
        let mae = MaeModel::<f32>::new(&cfg, 3).unwrap();
        let bytes = encode("mae", &cfg, &mae).unwrap();
        let ck = decode(&bytes).unwrap();
        assert_eq!(ck.header.kind, "mae");
        let mut copy = MaeModel::<f32>::new(&cfg, 99).unwrap();
        ck.restore(&cfg, &mut copy, "").unwrap();
        assert_eq!(encode("mae", &cfg, &copy).unwrap(), bytes);

        let mut det = Detector::<f32>::new(&cfg, 5).unwrap();
        let n = ck.restore(&cfg, &mut det, "encoder.").unwrap();
        assert!(n > 0);
        assert_eq!(det.encoder.embed.w.value, mae.encoder.embed.w.value);
    }

    #[test]
    fn config_mismatch_and_corruption_fail() {
        let cfg = small();
        let mae = MaeModel::<f32>::new(&cfg, 3).unwrap();
        let bytes = encode("mae", &cfg, &mae).unwrap();
        let ck = decode(&bytes).unwrap();
        let other = ModelConfig { depth: 2, ..small() };
        let mut m = MaeModel::<f32>::new(&other, 3).unwrap();
        assert!(ck.restore(&other, &mut m, "").unwrap_err().contains("mismatch"));
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode(&bad).is_err());
    }
}
