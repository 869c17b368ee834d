//! Single-file binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    8 bytes  "WAVJEPA\0"
//! version  u32
//! hash     32 bytes SHA-256 of the config JSON
//! step     u64
//! seed     u64
//! config   u32 length + UTF-8 JSON
//! groups   u32 count, then per group:
//!            u32 length + name, u32 tensor count, then per tensor:
//!              u32 length + name, u8 decay flag, u32 rows, u32 cols,
//!              rows*cols f64 values
//! ```
//!
//! Random streams are derived from `(seed, step)`, so no generator state is
//! stored.

use std::io::{Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::param::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"WAVJEPA\0";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub seed: u64,
    pub config_json: String,
    pub groups: Vec<(String, ParamStore)>,
}

pub fn config_hash(config_json: &str) -> [u8; 32] {
    Sha256::digest(config_json.as_bytes()).into()
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

impl Checkpoint {
    pub fn hash(&self) -> [u8; 32] {
        config_hash(&self.config_json)
    }

    pub fn group(&self, name: &str) -> Option<&ParamStore> {
        self.groups.iter().find(|(n, _)| n == name).map(|(_, g)| g)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.hash());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        put_str(&mut out, &self.config_json);
        out.extend_from_slice(&(self.groups.len() as u32).to_le_bytes());
        for (name, store) in &self.groups {
            put_str(&mut out, name);
            out.extend_from_slice(&(store.len() as u32).to_le_bytes());
            for p in store.params() {
                put_str(&mut out, &p.name);
                out.push(u8::from(p.decay));
                out.extend_from_slice(&(p.value.rows() as u32).to_le_bytes());
                out.extend_from_slice(&(p.value.cols() as u32).to_le_bytes());
                for v in p.value.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = get_u32(&mut r)?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let mut hash = [0u8; 32];
        read_exact(&mut r, &mut hash)?;
        let step = get_u64(&mut r)?;
        let seed = get_u64(&mut r)?;
        let config_json = get_str(&mut r)?;
        if config_hash(&config_json) != hash {
            return Err(Error::Checkpoint("config hash does not match the stored config".into()));
        }
        let ngroups = get_u32(&mut r)?;
        let mut groups = Vec::new();
        for _ in 0..ngroups {
            let name = get_str(&mut r)?;
            let count = get_u32(&mut r)?;
            let mut store = ParamStore::new();
            for _ in 0..count {
                let pname = get_str(&mut r)?;
                let mut flag = [0u8; 1];
                read_exact(&mut r, &mut flag)?;
                let rows = get_u32(&mut r)? as usize;
                let cols = get_u32(&mut r)? as usize;
                let n = rows
                    .checked_mul(cols)
                    .filter(|n| n.saturating_mul(8) <= r.len())
                    .ok_or_else(|| Error::Checkpoint(format!("tensor {pname} truncated")))?;
                let data = (0..n).map(|_| get_u64(&mut r).map(f64::from_bits)).collect::<Result<Vec<_>>>()?;
                store.push(pname, Tensor::from_vec(rows, cols, data), flag[0] != 0);
            }
            groups.push((name, store));
        }
        if !r.is_empty() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", r.len())));
        }
        Ok(Self { step, seed, config_json, groups })
    }

    /// Writes through a temporary sibling file and renames it into place.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("bin.tmp");
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|_| Error::Checkpoint("unexpected end of file".into()))
}

fn get_u32(r: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn get_u64(r: &mut &[u8]) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn get_str(r: &mut &[u8]) -> Result<String> {
    let n = get_u32(r)? as usize;
    if n > r.len() {
        return Err(Error::Checkpoint("unexpected end of file".into()));
    }
    let (s, rest) = r.split_at(n);
    *r = rest;
    String::from_utf8(s.to_vec()).map_err(|_| Error::Checkpoint("invalid UTF-8 string".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut a = ParamStore::new();
        a.push("w", Tensor::from_vec(2, 3, vec![1.0, -0.0, f64::MIN_POSITIVE, 3.5, 1e300, -2.25]), true);
        a.push("g", Tensor::full(1, 3, 1.0), false);
        Checkpoint { step: 42, seed: 7, config_json: "{\"x\":1}".into(), groups: vec![("context".into(), a.clone()), ("empty".into(), ParamStore::new())] }
    }

    #[test]
    fn roundtrip_is_exact() {
        let c = sample();
        let b = c.to_bytes();
        let d = Checkpoint::from_bytes(&b).unwrap();
        assert_eq!(c, d);
        assert_eq!(d.to_bytes(), b);
        assert_eq!(&b[..8], MAGIC);
    }

    #[test]
    fn corruption_is_rejected() {
        let b = sample().to_bytes();
        assert!(Checkpoint::from_bytes(&b[..b.len() - 3]).is_err());
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let mut bad = b.clone();
        let pos = 8 + 4 + 32 + 16 + 4;
        bad[pos] = b'[';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Checkpoint(m)) if m.contains("hash")));
        let mut long = b;
        long.push(0);
        assert!(Checkpoint::from_bytes(&long).is_err());
    }

    #[test]
    fn save_and_load_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ckpt-1.bin");
        sample().save(&p).unwrap();
        assert_eq!(Checkpoint::load(&p).unwrap(), sample());
        assert!(!dir.path().join("ckpt-1.bin.tmp").exists());
    }
}
