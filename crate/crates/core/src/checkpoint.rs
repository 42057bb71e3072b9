//! Binary checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "FWCKPT1"  u8 stage
//! u32 n_meta   { str key, str value }*
//! u32 n_entry  { u8 kind(0 param, 1 buffer), str name, u32 ndim, u64 dim*, f64 value* }*
//! u8 has_opt   [ u32 n { str name, u64 t, f64 beta1, f64 beta2, f64 eps, u64 len, f64 m*, f64 v* }* ]
//! ```
//!
//! where `str` is a u32 byte length followed by UTF-8. Everything is written
//! in insertion order, so load followed by save reproduces the file exactly.

use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::{Optimizer, ParamSet};
use crate::tensor::{AdamState, Tensor};

const MAGIC: &[u8; 7] = b"FWCKPT1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Heads = 0,
    Bfn = 1,
    Toar = 2,
}

impl Stage {
    fn from_u8(v: u8) -> Result<Self> {
        match v {
            0 => Ok(Stage::Heads),
            1 => Ok(Stage::Bfn),
            2 => Ok(Stage::Toar),
            _ => Err(Error::Format(format!("unknown stage tag {v}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub stage: Stage,
    pub meta: IndexMap<String, String>,
    pub params: ParamSet,
    pub optimizer: Option<Optimizer>,
}

impl Checkpoint {
    pub fn new(stage: Stage, params: ParamSet) -> Self {
        Checkpoint {
            stage,
            meta: IndexMap::new(),
            params,
            optimizer: None,
        }
    }

    pub fn with_meta<K: Into<String>, V: Into<String>>(mut self, pairs: impl IntoIterator<Item = (K, V)>) -> Self {
        for (k, v) in pairs {
            self.meta.insert(k.into(), v.into());
        }
        self
    }

    pub fn meta(&self, key: &str) -> Option<String> {
        self.meta.get(key).cloned()
    }

    pub fn expect_stage(&self, stage: Stage) -> Result<()> {
        if self.stage != stage {
            return Err(Error::Input(format!(
                "expected a {stage:?} checkpoint, found {:?}",
                self.stage
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.0.push(self.stage as u8);
        w.u32(self.meta.len());
        for (k, v) in &self.meta {
            w.str(k);
            w.str(v);
        }
        let n = self.params.params().count() + self.params.buffers().count();
        w.u32(n);
        for (kind, iter) in [
            (0u8, Box::new(self.params.params()) as Box<dyn Iterator<Item = (&str, &Tensor)>>),
            (1u8, Box::new(self.params.buffers())),
        ] {
            for (name, t) in iter {
                w.0.push(kind);
                w.str(name);
                w.u32(t.shape().len());
                for &d in t.shape() {
                    w.u64(d as u64);
                }
                w.f64s(t.data());
            }
        }
        match &self.optimizer {
            None => w.0.push(0),
            Some(opt) => {
                w.0.push(1);
                w.u32(opt.states.len());
                for (name, s) in &opt.states {
                    w.str(name);
                    w.u64(s.t);
                    w.f64s(&[s.beta1, s.beta2, s.eps]);
                    w.u64(s.m.len() as u64);
                    w.f64s(&s.m);
                    w.f64s(&s.v);
                }
            }
        }
        w.0
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { b: bytes, pos: 0 };
        if r.take(7)? != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let stage = Stage::from_u8(r.take(1)?[0])?;
        let mut meta = IndexMap::new();
        for _ in 0..r.u32()? {
            let k = r.str()?;
            let v = r.str()?;
            if meta.insert(k.clone(), v).is_some() {
                return Err(Error::Format(format!("duplicate metadata key {k}")));
            }
        }
        let mut params = ParamSet::new();
        for _ in 0..r.u32()? {
            let kind = r.take(1)?[0];
            let name = r.str()?;
            let ndim = r.u32()?;
            if ndim > 8 {
                return Err(Error::Format(format!("{name}: {ndim} dimensions")));
            }
            let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let numel = numel.ok_or_else(|| Error::Format(format!("{name}: shape overflow")))?;
            let data = r.f64s(numel)?;
            let t = Tensor::new(&shape, data).map_err(|e| match e {
                Error::Numeric(m) => Error::Numeric(format!("{name}: {m}")),
                other => Error::Format(format!("{name}: {other}")),
            })?;
            let res = match kind {
                0 => params.insert_param(name, t),
                1 => params.insert_buffer(name, t),
                k => return Err(Error::Format(format!("unknown entry kind {k}"))),
            };
            res.map_err(|e| Error::Format(e.to_string()))?;
        }
        let optimizer = match r.take(1)?[0] {
            0 => None,
            1 => {
                let mut states = IndexMap::new();
                for _ in 0..r.u32()? {
                    let name = r.str()?;
                    let t = r.u64()?;
                    let c = r.f64s(3)?;
                    let len = r.u64()? as usize;
                    let m = r.f64s(len)?;
                    let v = r.f64s(len)?;
                    let state = AdamState {
                        m,
                        v,
                        t,
                        beta1: c[0],
                        beta2: c[1],
                        eps: c[2],
                    };
                    states.insert(name, state);
                }
                Some(Optimizer { states })
            }
            f => return Err(Error::Format(format!("bad optimizer flag {f}"))),
        };
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint {
            stage,
            meta,
            params,
            optimizer,
        })
    }

    /// Writes through a temporary file so a crash never leaves a torn checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
            _ => Error::io(path, e),
        })?;
        Self::from_bytes(&bytes)
    }
}

/// Hex SHA-256 of a file's bytes.
pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u32).to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len());
        self.0.extend_from_slice(s.as_bytes());
    }
    fn f64s(&mut self, v: &[f64]) {
        for x in v {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    b: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.b.len())
            .ok_or_else(|| Error::Format("checkpoint truncated".into()))?;
        let s = &self.b[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("invalid UTF-8 in checkpoint".into()))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::Format("length overflow".into()))?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Init;

    fn sample() -> Checkpoint {
        let mut set = ParamSet::new();
        let mut init = Init::new(1);
        init.conv(&mut set, "a", 2, 3, 3).unwrap();
        init.batch_norm(&mut set, "bn", 3).unwrap();
        let mut opt = Optimizer::new(&set);
        let grads: Vec<_> = set.params().map(|(n, t)| (n.to_string(), vec![0.25; t.numel()])).collect();
        opt.step(&mut set, &grads, 1e-3).unwrap();
        let mut c = Checkpoint::new(Stage::Bfn, set).with_meta([("epoch", "3"), ("seed", "7")]);
        c.optimizer = Some(opt);
        c
    }

    #[test]
    fn bytes_round_trip() {
        let c = sample();
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn file_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.fwc");
        let q = dir.path().join("y.fwc");
        sample().save(&p).unwrap();
        Checkpoint::load(&p).unwrap().save(&q).unwrap();
        assert_eq!(file_sha256(&p).unwrap(), file_sha256(&q).unwrap());
    }

    #[test]
    fn corrupt_files_are_format_errors() {
        let bytes = sample().to_bytes();
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Format(_))));
        let mut extra = bytes;
        extra.push(0);
        assert!(matches!(Checkpoint::from_bytes(&extra), Err(Error::Format(_))));
    }
}
