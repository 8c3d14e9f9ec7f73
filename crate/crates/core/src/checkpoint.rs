//! Single-file checkpoints: magic, a little-endian `u64` header length, a
//! UTF-8 JSON header, then raw little-endian element bytes. Aliased
//! parameters point at the same byte range, so shared storage is written once.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::tensor::{DType, ParamStore, Real, StorageId, Tensor};

const MAGIC: &[u8; 8] = b"TVMKACK1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    /// Byte offset into the data section.
    pub offset: usize,
    pub shared_handle: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub config: Value,
    pub params: Vec<ParamEntry>,
}

pub fn save<T: Real>(path: impl AsRef<Path>, store: &ParamStore<T>, config: &Value) -> Result<()> {
    let path = path.as_ref();
    let mut offsets: HashMap<StorageId, usize> = HashMap::new();
    let mut data = Vec::new();
    let mut params = Vec::with_capacity(store.len());
    for (id, p) in store.params() {
        let offset = *offsets.entry(p.storage).or_insert_with(|| {
            let off = data.len();
            for v in store.value(id).data() {
                v.extend_le_bytes(&mut data);
            }
            off
        });
        params.push(ParamEntry {
            name: p.name.clone(),
            dtype: T::DTYPE,
            shape: store.value(id).shape().to_vec(),
            offset,
            shared_handle: p.shared_handle.clone(),
        });
    }
    let header = serde_json::to_vec(&Header {
        config: config.clone(),
        params,
    })?;
    let tmp = path.with_extension("tmp");
    let write = || -> std::io::Result<()> {
        let mut w = BufWriter::new(File::create(&tmp)?);
        w.write_all(MAGIC)?;
        w.write_all(&(header.len() as u64).to_le_bytes())?;
        w.write_all(&header)?;
        w.write_all(&data)?;
        w.flush()?;
        std::fs::rename(&tmp, path)
    };
    write().map_err(|e| Error::io(path, e))
}

fn read_raw(path: &Path) -> Result<(Header, Vec<u8>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
    if &magic != MAGIC {
        return Err(Error::format(None, format!("{} is not a checkpoint", path.display())));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len).map_err(|e| Error::io(path, e))?;
    let mut header = vec![0u8; u64::from_le_bytes(len) as usize];
    r.read_exact(&mut header).map_err(|e| Error::io(path, e))?;
    let header: Header = serde_json::from_slice(&header)?;
    let mut data = Vec::new();
    r.read_to_end(&mut data).map_err(|e| Error::io(path, e))?;
    Ok((header, data))
}

pub fn read_header(path: impl AsRef<Path>) -> Result<Header> {
    read_raw(path.as_ref()).map(|(h, _)| h)
}

/// Every parameter by name, decoded to 64-bit for comparison.
pub fn read_tensors(path: impl AsRef<Path>) -> Result<BTreeMap<String, Tensor<f64>>> {
    let (header, data) = read_raw(path.as_ref())?;
    header
        .params
        .iter()
        .map(|e| decode::<f64>(e, &data).map(|t| (e.name.clone(), t)))
        .collect()
}

fn decode<U: Real>(e: &ParamEntry, data: &[u8]) -> Result<Tensor<U>> {
    let n: usize = e.shape.iter().product();
    let size = e.dtype.size_of();
    let bytes = data.get(e.offset..e.offset + n * size).ok_or_else(|| {
        Error::format(None, format!("checkpoint data for `{}` is truncated", e.name))
    })?;
    let values: Vec<U> = bytes
        .chunks_exact(size)
        .map(|c| match e.dtype {
            DType::F32 => U::lit(f32::from_le_slice(c) as f64),
            DType::F64 => U::lit(f64::from_le_slice(c)),
        })
        .collect();
    Tensor::new(e.shape.clone(), values)
}

/// Loads values into a store built from the same config. Names, shapes and
/// the aliasing pattern must agree with the file.
pub fn load_into<T: Real>(path: impl AsRef<Path>, store: &mut ParamStore<T>) -> Result<Value> {
    let path = path.as_ref();
    let (header, data) = read_raw(path)?;
    if header.params.len() != store.len() {
        return Err(Error::format(
            None,
            format!(
                "checkpoint has {} parameters, model has {}",
                header.params.len(),
                store.len()
            ),
        ));
    }
    let mut by_offset: HashMap<usize, StorageId> = HashMap::new();
    for e in &header.params {
        let id = store
            .id(&e.name)
            .ok_or_else(|| Error::format(None, format!("unknown parameter `{}`", e.name)))?;
        if store.value(id).shape() != e.shape.as_slice() {
            return Err(Error::dim(
                "checkpoint",
                format!("`{}` {:?} vs {:?}", e.name, store.value(id).shape(), e.shape),
            ));
        }
        let storage = store.storage(id);
        if let Some(&s) = by_offset.get(&e.offset) {
            if s != storage {
                return Err(Error::format(
                    None,
                    format!("`{}` is aliased in the checkpoint but not in the model", e.name),
                ));
            }
            continue;
        }
        by_offset.insert(e.offset, storage);
        let t = decode::<T>(e, &data)?;
        store.value_mut(id).data_mut().copy_from_slice(t.data());
    }
    Ok(header.config)
}

/// Names whose values differ bitwise between two checkpoints.
pub fn diff(a: impl AsRef<Path>, b: impl AsRef<Path>) -> Result<Vec<String>> {
    let (ta, tb) = (read_tensors(a)?, read_tensors(b)?);
    Ok(ta
        .iter()
        .filter(|(n, v)| tb.get(*n).map_or(true, |w| !v.bit_eq(w)))
        .map(|(n, _)| n.clone())
        .collect())
}
