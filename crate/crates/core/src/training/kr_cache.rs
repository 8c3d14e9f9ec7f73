//! On-disk cache of key representations, keyed by a hash of the frozen
//! value-modeler weights and the sequence ids.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Serialize, Deserialize)]
struct CacheHeader {
    tvm_hash: String,
    ids: Vec<String>,
    /// Key representations per sequence.
    counts: Vec<usize>,
    d: usize,
}

pub struct KrCache {
    dir: PathBuf,
}

/// Outcome of a cache lookup, for logging.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CacheStatus {
    Hit,
    Miss,
    /// A file for this split existed but was built from other weights or sequences.
    Stale,
}

impl KrCache {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(KrCache { dir })
    }

    fn path(&self, split: &str) -> PathBuf {
        self.dir.join(format!("kr-{split}.bin"))
    }

    /// Cached representations when the stored hash and ids match exactly.
    pub fn load<T: Real>(
        &self,
        split: &str,
        tvm_hash: &str,
        ids: &[String],
    ) -> Result<(CacheStatus, Option<Vec<Vec<Tensor<T>>>>)> {
        let path = self.path(split);
        let Ok(bytes) = fs::read(&path) else {
            return Ok((CacheStatus::Miss, None));
        };
        if bytes.len() < 8 {
            return Ok((CacheStatus::Stale, None));
        }
        let hlen = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
        let Some(hbytes) = bytes.get(8..8 + hlen) else {
            return Ok((CacheStatus::Stale, None));
        };
        let header: CacheHeader = match serde_json::from_slice(hbytes) {
            Ok(h) => h,
            Err(_) => return Ok((CacheStatus::Stale, None)),
        };
        if header.tvm_hash != tvm_hash || header.ids != ids {
            return Ok((CacheStatus::Stale, None));
        }
        let body = &bytes[8 + hlen..];
        let total: usize = header.counts.iter().sum::<usize>() * header.d;
        if body.len() != total * 8 {
            return Ok((CacheStatus::Stale, None));
        }
        let mut vals = body.chunks_exact(8).map(|c| T::lit(f64::from_le_slice(c)));
        let mut out = Vec::with_capacity(header.counts.len());
        for &c in &header.counts {
            let mut reps = Vec::with_capacity(c);
            for _ in 0..c {
                let data: Vec<T> = vals.by_ref().take(header.d).collect();
                reps.push(Tensor::new(vec![1, header.d], data)?);
            }
            out.push(reps);
        }
        Ok((CacheStatus::Hit, Some(out)))
    }

    pub fn store<T: Real>(
        &self,
        split: &str,
        tvm_hash: &str,
        ids: &[String],
        reps: &[Vec<Tensor<T>>],
    ) -> Result<()> {
        let d = reps
            .iter()
            .flat_map(|r| r.first())
            .map(|t| t.numel())
            .next()
            .unwrap_or(0);
        let header = serde_json::to_vec(&CacheHeader {
            tvm_hash: tvm_hash.to_string(),
            ids: ids.to_vec(),
            counts: reps.iter().map(Vec::len).collect(),
            d,
        })?;
        let mut bytes = Vec::with_capacity(8 + header.len());
        bytes.extend_from_slice(&(header.len() as u64).to_le_bytes());
        bytes.extend_from_slice(&header);
        for r in reps.iter().flatten() {
            for v in r.data() {
                v.as_f64().extend_le_bytes(&mut bytes);
            }
        }
        let path = self.path(split);
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }
}
