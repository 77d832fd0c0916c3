//! Binary tensor container shared by model checkpoints, training-state
//! sidecars and serialized compressed contexts.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "SOFTPOOL" | u32 version | u32 meta_len | meta_len bytes of
//! "key=value\n" lines | u32 tensor_count | tensor_count x
//! (u32 name_len, name, u32 rank, rank x u32 dim, f32 values)
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelWeights};
use crate::params::ParamSet;
use crate::tensor::{Scalar, Tensor};

pub const MAGIC: &[u8; 8] = b"SOFTPOOL";
pub const FORMAT_VERSION: u32 = 1;

/// Ordered key-value block stored in the header.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Metadata {
    entries: Vec<(String, String)>,
}

impl Metadata {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl ToString) {
        let key = key.into();
        let value = value.to_string();
        match self.entries.iter_mut().find(|(k, _)| *k == key) {
            Some(e) => e.1 = value,
            None => self.entries.push((key, value)),
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key).ok_or_else(|| Error::Format(format!("metadata key {key} missing")))
    }

    pub fn parse<V: FromStr>(&self, key: &str) -> Result<V> {
        let raw = self.require(key)?;
        raw.parse().map_err(|_| Error::Format(format!("metadata {key}={raw} is malformed")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    fn encode(&self) -> Result<Vec<u8>> {
        let mut out = String::new();
        for (k, v) in &self.entries {
            if k.contains(['=', '\n']) || v.contains('\n') {
                return Err(Error::Format(format!("metadata entry {k:?}={v:?} cannot be encoded")));
            }
            out.push_str(k);
            out.push('=');
            out.push_str(v);
            out.push('\n');
        }
        Ok(out.into_bytes())
    }

    fn decode(bytes: &[u8]) -> Result<Self> {
        let text = std::str::from_utf8(bytes).map_err(|e| Error::Format(format!("metadata is not UTF-8: {e}")))?;
        let mut meta = Metadata::new();
        for line in text.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("metadata line {line:?} lacks '='")))?;
            meta.entries.push((k.to_string(), v.to_string()));
        }
        Ok(meta)
    }
}

fn u32_of(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Format(format!("{what} {n} does not fit in 32 bits")))
}

pub fn write_tensors<T: Scalar, W: Write>(mut w: W, meta: &Metadata, tensors: &ParamSet<T>) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    let m = meta.encode()?;
    w.write_all(&u32_of(m.len(), "metadata length")?.to_le_bytes())?;
    w.write_all(&m)?;
    w.write_all(&u32_of(tensors.len(), "tensor count")?.to_le_bytes())?;
    for (name, t) in tensors.iter() {
        w.write_all(&u32_of(name.len(), "name length")?.to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&u32_of(t.rank(), "rank")?.to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&u32_of(d, "dimension")?.to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(t.numel() * 4);
        for v in t.data() {
            buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|e| Error::Format(format!("truncated file: {e}")))?;
    Ok(u32::from_le_bytes(b))
}

fn read_bytes<R: Read>(r: &mut R, n: usize) -> Result<Vec<u8>> {
    let mut b = vec![0u8; n];
    r.read_exact(&mut b).map_err(|e| Error::Format(format!("truncated file: {e}")))?;
    Ok(b)
}

pub fn read_tensors<T: Scalar, R: Read>(mut r: R) -> Result<(Metadata, ParamSet<T>)> {
    let magic = read_bytes(&mut r, MAGIC.len())?;
    if magic != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let version = read_u32(&mut r)?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported format version {version}")));
    }
    let meta_len = read_u32(&mut r)? as usize;
    let meta = Metadata::decode(&read_bytes(&mut r, meta_len)?)?;
    let count = read_u32(&mut r)?;
    let mut tensors = ParamSet::new();
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        let name = String::from_utf8(read_bytes(&mut r, name_len)?)
            .map_err(|e| Error::Format(format!("tensor name is not UTF-8: {e}")))?;
        let rank = read_u32(&mut r)? as usize;
        let shape: Vec<usize> = (0..rank).map(|_| read_u32(&mut r).map(|d| d as usize)).collect::<Result<_>>()?;
        let numel: usize = shape.iter().product();
        let raw = read_bytes(&mut r, numel * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| T::from_f64(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::Format(format!("tensor {name}: {e}")))?;
        tensors.insert(name, t);
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(Error::Format(format!("{} trailing bytes", rest.len())));
    }
    Ok((meta, tensors))
}

pub fn save<T: Scalar>(path: &Path, meta: &Metadata, tensors: &ParamSet<T>) -> Result<()> {
    write_tensors(BufWriter::new(File::create(path)?), meta, tensors)
}

pub fn load<T: Scalar>(path: &Path) -> Result<(Metadata, ParamSet<T>)> {
    read_tensors(BufReader::new(File::open(path)?))
}

/// Header block for a model checkpoint: `kind=model` plus the config.
pub fn model_metadata(config: &ModelConfig) -> Metadata {
    let mut meta = Metadata::new();
    meta.set("kind", "model");
    for (k, v) in config.to_kv() {
        meta.set(k, v);
    }
    meta
}

pub fn save_model<T: Scalar>(path: &Path, weights: &ModelWeights<T>) -> Result<()> {
    save(path, &model_metadata(&weights.config), &weights.params)
}

pub fn load_model<T: Scalar>(path: &Path) -> Result<ModelWeights<T>> {
    let (meta, params) = load(path)?;
    if meta.get("kind") != Some("model") {
        return Err(Error::Format(format!("{} is not a model checkpoint", path.display())));
    }
    ModelWeights::from_params(ModelConfig::from_kv(&meta)?, params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn model_round_trip_is_bit_exact() {
        let cfg = ModelConfig { vocab_size: 11, d_model: 8, n_layers: 1, n_heads: 2, d_ff: 16, max_positions: 9 };
        let w = ModelWeights::<f32>::init(cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let mut bytes = Vec::new();
        write_tensors(&mut bytes, &model_metadata(&cfg), &w.params).unwrap();
        let (meta, params) = read_tensors::<f32, _>(bytes.as_slice()).unwrap();
        let back = ModelWeights::from_params(ModelConfig::from_kv(&meta).unwrap(), params).unwrap();
        for ((_, a), (_, b)) in w.params.iter().zip(back.params.iter()) {
            let ab: Vec<u32> = a.data().iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u32> = b.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(ab, bb);
        }
        let mut again = Vec::new();
        write_tensors(&mut again, &meta, &back.params).unwrap();
        assert_eq!(bytes, again);
    }

    #[test]
    fn rejects_corruption() {
        let mut p = ParamSet::<f32>::new();
        p.insert("x", Tensor::from_vec(vec![1.0, 2.0]).unwrap());
        let mut bytes = Vec::new();
        write_tensors(&mut bytes, &Metadata::new(), &p).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(read_tensors::<f32, _>(bad.as_slice()).is_err());
        assert!(read_tensors::<f32, _>(&bytes[..bytes.len() - 1]).is_err());
        bytes.push(0);
        assert!(read_tensors::<f32, _>(bytes.as_slice()).is_err());
    }
}
