//! Versioned binary checkpoints: model kind + config in the header, then
//! per-parameter records, the ADAM moments in the same layout, and the
//! optimizer step counter. Everything is little-endian; writes are
//! byte-reproducible so fixed-seed runs can be compared by hash.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::adam::ParamStore;
use crate::error::{Error, Result};
use crate::model::{Arch, Model, ModelConfig};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"SCKP";
const VERSION: u32 = 1;

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_record(buf: &mut Vec<u8>, name: &str, t: &Tensor) {
    put_u32(buf, name.len() as u32);
    buf.extend_from_slice(name.as_bytes());
    put_u32(buf, t.rank() as u32);
    for &e in t.shape() {
        put_u64(buf, e as u64);
    }
    for &v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format("checkpoint truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn record(&mut self) -> Result<(String, Tensor)> {
        let name_len = self.u32()? as usize;
        let name = std::str::from_utf8(self.take(name_len)?)
            .map_err(|_| Error::Format("parameter name is not utf-8".into()))?
            .to_string();
        let rank = self.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u64()? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(f64::from_le_bytes(self.take(8)?.try_into().unwrap()));
        }
        Ok((name, Tensor::from_vec(&shape, data)))
    }
}

/// Serialize a model (parameters + optimizer state) to bytes.
pub fn to_bytes(model: &Model) -> Vec<u8> {
    let cfg = &model.cfg;
    let store = &model.params;
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    put_u32(&mut buf, VERSION);
    buf.push(cfg.arch.tag());
    put_u32(&mut buf, cfg.vocab_size as u32);
    put_u32(&mut buf, cfg.hidden_dim as u32);
    put_u32(&mut buf, cfg.feat_dim as u32);
    put_u32(&mut buf, cfg.n_locations as u32);
    put_u32(&mut buf, cfg.max_len as u32);

    put_u32(&mut buf, store.num_params() as u32);
    for (name, t) in store.iter() {
        put_record(&mut buf, name, t);
    }
    for pick_v in [false, true] {
        put_u32(&mut buf, store.num_params() as u32);
        for name in store.names() {
            let (m, v) = store.moments_of(name);
            put_record(&mut buf, name, if pick_v { v } else { m });
        }
    }
    put_u64(&mut buf, store.step_count());
    buf
}

/// Parse a checkpoint back into a model.
pub fn from_bytes(bytes: &[u8]) -> Result<Model> {
    let mut cur = Cursor { buf: bytes, pos: 0 };
    if cur.take(4)? != MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let arch = Arch::from_tag(cur.take(1)?[0])?;
    let cfg = ModelConfig {
        arch,
        vocab_size: cur.u32()? as usize,
        hidden_dim: cur.u32()? as usize,
        feat_dim: cur.u32()? as usize,
        n_locations: cur.u32()? as usize,
        max_len: cur.u32()? as usize,
    };

    let n_params = cur.u32()? as usize;
    let mut store = ParamStore::new();
    for _ in 0..n_params {
        let (name, t) = cur.record()?;
        store.insert(&name, t);
    }
    let n_m = cur.u32()? as usize;
    let mut moments_m = Vec::with_capacity(n_m);
    for _ in 0..n_m {
        moments_m.push(cur.record()?);
    }
    let n_v = cur.u32()? as usize;
    if n_v != n_m || n_m != n_params {
        return Err(Error::Format("moment record count mismatch".into()));
    }
    for (name_m, m) in moments_m {
        let (name_v, v) = cur.record()?;
        if name_v != name_m {
            return Err(Error::Format("moment record order mismatch".into()));
        }
        if !store.contains(&name_m) {
            return Err(Error::Format(format!("moment for unknown parameter {name_m}")));
        }
        store.set_moments(&name_m, m, v);
    }
    let step = cur.u64()?;
    store.set_step_count(step);
    if cur.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after checkpoint".into()));
    }
    Model::from_parts(cfg, store)
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(model))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Model> {
    let bytes = std::fs::read(path)?;
    from_bytes(&bytes)
}

/// Hex SHA-256 of arbitrary bytes; used to compare runs for determinism.
pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_model(arch: Arch) -> Model {
        let cfg = ModelConfig {
            arch,
            vocab_size: 7,
            hidden_dim: 4,
            feat_dim: 3,
            n_locations: 2,
            max_len: 5,
        };
        Model::new(cfg, 42).unwrap()
    }

    #[test]
    fn round_trip_is_byte_identical() {
        for arch in [Arch::Fc, Arch::Att2in, Arch::Att2all] {
            let model = toy_model(arch);
            let bytes = to_bytes(&model);
            let loaded = from_bytes(&bytes).unwrap();
            assert_eq!(loaded.cfg, model.cfg);
            let again = to_bytes(&loaded);
            assert_eq!(bytes, again, "save->load->save changed bytes for {:?}", arch);
        }
    }

    #[test]
    fn kind_tag_selects_architecture() {
        let model = toy_model(Arch::Att2in);
        let loaded = from_bytes(&to_bytes(&model)).unwrap();
        assert_eq!(loaded.cfg.arch, Arch::Att2in);
    }

    #[test]
    fn optimizer_state_survives() {
        use crate::adam::AdamConfig;
        let mut model = toy_model(Arch::Fc);
        model.params.grad_mut("w_s").data_mut()[0] = 0.5;
        model.params.adam_step(&AdamConfig::default(), 1e-3).unwrap();
        let loaded = from_bytes(&to_bytes(&model)).unwrap();
        assert_eq!(loaded.params.step_count(), 1);
        let (m, _) = loaded.params.moments_of("w_s");
        assert!(m.data()[0] != 0.0);
    }

    #[test]
    fn rejects_garbage() {
        assert!(from_bytes(b"not a checkpoint").is_err());
    }
}
