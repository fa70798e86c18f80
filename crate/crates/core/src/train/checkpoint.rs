use std::fs;
use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::Sgd;
use crate::detector::DetectorConfig;
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"FAENCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;
const MOMENTUM_PREFIX: &str = "momentum/";

/// Hex sha256 of the canonical JSON form of a detector configuration.
pub fn config_fingerprint(config: &DetectorConfig) -> String {
    let json = serde_json::to_vec(config).expect("config serializes");
    hex::encode(Sha256::digest(&json))
}

/// Model state, optimiser momentum and the epoch count reached.
///
/// Layout (little endian): magic, `u32` version, `u32` fingerprint length
/// and bytes, `u64` epoch, `u64` tensor count, then per tensor a `u32` name
/// length and bytes, `u32` rank, `u64` extents and `f64` payload.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub fingerprint: String,
    /// Number of completed epochs.
    pub epoch: usize,
    /// Parameters and buffers under their own names, momentum under
    /// `momentum/<name>`.
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn capture(config: &DetectorConfig, epoch: usize, store: &ParamStore, sgd: Option<&Sgd>) -> Self {
        let mut tensors: Vec<(String, Tensor)> =
            store.ids().map(|id| (store.name(id).to_string(), store.get(id).clone())).collect();
        if let Some(sgd) = sgd {
            tensors.extend(sgd.velocity.iter().map(|(k, v)| (format!("{MOMENTUM_PREFIX}{k}"), v.clone())));
        }
        Self { version: CHECKPOINT_VERSION, fingerprint: config_fingerprint(config), epoch, tensors }
    }

    /// Copies the saved state into `store` (and `sgd`), after checking that
    /// the checkpoint was produced for `config` and holds every parameter.
    pub fn restore(&self, config: &DetectorConfig, store: &mut ParamStore, sgd: Option<&mut Sgd>) -> Result<()> {
        let expected = config_fingerprint(config);
        if expected != self.fingerprint {
            return Err(Error::FingerprintMismatch { checkpoint: self.fingerprint.clone(), config: expected });
        }
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let name = store.name(id).to_string();
            let (_, t) = self
                .tensors
                .iter()
                .find(|(n, _)| *n == name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
            if t.shape() != store.get(id).shape() {
                return Err(Error::Checkpoint(format!("`{name}`: shape {:?} vs {:?}", t.shape(), store.get(id).shape())));
            }
            *store.get_mut(id) = t.clone();
        }
        if let Some(sgd) = sgd {
            sgd.velocity = self
                .tensors
                .iter()
                .filter_map(|(n, t)| n.strip_prefix(MOMENTUM_PREFIX).map(|k| (k.to_string(), t.clone())))
                .collect();
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(CHECKPOINT_MAGIC);
        b.extend_from_slice(&self.version.to_le_bytes());
        b.extend_from_slice(&(self.fingerprint.len() as u32).to_le_bytes());
        b.extend_from_slice(self.fingerprint.as_bytes());
        b.extend_from_slice(&(self.epoch as u64).to_le_bytes());
        b.extend_from_slice(&(self.tensors.len() as u64).to_le_bytes());
        for (name, t) in &self.tensors {
            b.extend_from_slice(&(name.len() as u32).to_le_bytes());
            b.extend_from_slice(name.as_bytes());
            b.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                b.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                b.extend_from_slice(&v.to_le_bytes());
            }
        }
        b
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let n = r.u32()? as usize;
        let fingerprint = r.string(n)?;
        let epoch = r.u64()? as usize;
        let count = r.u64()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let n = r.u32()? as usize;
            let name = r.string(n)?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let len = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let len = len.filter(|&l| l <= r.remaining() / 8).ok_or_else(|| {
                Error::Checkpoint(format!("`{name}`: shape {shape:?} exceeds the file"))
            })?;
            let data = r.take(len * 8)?.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            tensors.push((name, Tensor::new(shape, data)?));
        }
        if r.remaining() != 0 {
            return Err(Error::Checkpoint(format!("{} trailing bytes", r.remaining())));
        }
        Ok(Self { version, fingerprint, epoch, tensors })
    }

    /// Writes atomically: a temporary sibling file is renamed over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(Error::Checkpoint("truncated file".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self, n: usize) -> Result<String> {
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("name is not UTF-8".into()))
    }
}
