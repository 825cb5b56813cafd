//! Binary checkpoints and run manifests.
//!
//! Layout: `b"UMLB"`, `u32` version, `u64` metadata length, JSON metadata,
//! `u64` value count, then every parameter as a little-endian `f32` in
//! tensor order (selectable blocks in canonical order, then embeddings and
//! norms).

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParameters, Vocabulary};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"UMLB";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VocabSpec {
    pub kind: String,
    pub size: usize,
    pub bos: u32,
    pub pad: u32,
}

impl Default for VocabSpec {
    fn default() -> Self {
        Self {
            kind: "bytes".into(),
            size: Vocabulary::SIZE,
            bos: Vocabulary::BOS,
            pad: Vocabulary::PAD,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: ModelConfig,
    pub vocabulary: VocabSpec,
    /// Steps that produced this checkpoint, oldest first.
    pub lineage: Vec<String>,
    pub seeds: BTreeMap<String, u64>,
}

impl CheckpointMeta {
    pub fn new(config: &ModelConfig) -> Self {
        Self {
            config: config.clone(),
            vocabulary: VocabSpec::default(),
            lineage: Vec::new(),
            seeds: BTreeMap::new(),
        }
    }
}

pub fn write_checkpoint<W: Write>(out: &mut W, params: &ModelParameters, meta: &CheckpointMeta) -> Result<()> {
    if &meta.config != params.config() {
        return Err(Error::Checkpoint("metadata config differs from the parameters".into()));
    }
    let json = serde_json::to_vec(meta)?;
    let count = params.parameter_count() as u64;
    let mut buf = Vec::with_capacity(24 + json.len() + 4 * count as usize);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    buf.extend_from_slice(&count.to_le_bytes());
    for t in params.tensors() {
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.write_all(&buf).map_err(|e| Error::io("<checkpoint>", e))
}

fn take<'a>(bytes: &mut &'a [u8], n: usize, what: &str) -> Result<&'a [u8]> {
    if bytes.len() < n {
        return Err(Error::Checkpoint(format!("truncated {what}")));
    }
    let (head, tail) = bytes.split_at(n);
    *bytes = tail;
    Ok(head)
}

fn u64_at(bytes: &mut &[u8], what: &str) -> Result<u64> {
    Ok(u64::from_le_bytes(take(bytes, 8, what)?.try_into().expect("8 bytes")))
}

pub fn read_checkpoint<R: Read>(input: &mut R) -> Result<(ModelParameters, CheckpointMeta)> {
    let mut all = Vec::new();
    input.read_to_end(&mut all).map_err(|e| Error::io("<checkpoint>", e))?;
    let mut bytes = all.as_slice();
    if take(&mut bytes, 4, "magic")? != MAGIC {
        return Err(Error::Checkpoint("bad magic bytes".into()));
    }
    let version = u32::from_le_bytes(take(&mut bytes, 4, "version")?.try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let meta_len = u64_at(&mut bytes, "metadata length")? as usize;
    let meta: CheckpointMeta = serde_json::from_slice(take(&mut bytes, meta_len, "metadata")?)?;
    meta.config.validate()?;
    let count = u64_at(&mut bytes, "value count")? as usize;
    let expected = meta.config.parameter_count();
    if count != expected {
        return Err(Error::Checkpoint(format!("{count} values, config implies {expected}")));
    }
    let payload = take(&mut bytes, 4 * count, "payload")?;
    if !bytes.is_empty() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len())));
    }
    let mut values = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")));
    let layout = crate::model::Layout::new(&meta.config);
    let tensors = (0..layout.tensor_count())
        .map(|i| {
            let shape = layout.shape(i);
            let n: usize = shape.iter().product();
            Tensor::new(shape.to_vec(), values.by_ref().take(n).collect())
        })
        .collect::<Result<Vec<_>>>()?;
    let params = ModelParameters::from_tensors(&meta.config, tensors)?;
    Ok((params, meta))
}

pub fn save(path: &Path, params: &ModelParameters, meta: &CheckpointMeta) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, params, meta)?;
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<(ModelParameters, CheckpointMeta)> {
    let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&mut f).map_err(|e| match e {
        Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_sha256(path: &Path) -> Result<String> {
    Ok(sha256_hex(&std::fs::read(path).map_err(|e| Error::io(path, e))?))
}

/// Everything needed to rerun a command identically.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub config_hash: String,
    pub config: serde_json::Value,
    pub seeds: BTreeMap<String, u64>,
    /// Input path → content hash.
    pub inputs: BTreeMap<String, String>,
    /// Output path → content hash.
    pub outputs: BTreeMap<String, String>,
}

impl Manifest {
    pub fn new<C: Serialize>(command: &str, config: &C) -> Result<Self> {
        let value = serde_json::to_value(config)?;
        let canonical = serde_json::to_vec(&value)?;
        Ok(Self {
            command: command.into(),
            config_hash: sha256_hex(&canonical),
            config: value,
            seeds: BTreeMap::new(),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        })
    }

    pub fn add_input(&mut self, path: &Path) -> Result<()> {
        self.inputs.insert(path.display().to_string(), file_sha256(path)?);
        Ok(())
    }

    pub fn add_output(&mut self, path: &Path) -> Result<()> {
        self.outputs.insert(path.display().to_string(), file_sha256(path)?);
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelParameters {
        ModelParameters::init(&ModelConfig {
            n_layers: 1,
            n_heads: 2,
            d_model: 4,
            d_ff: 8,
            vocab_size: 258,
            context_len: 8,
            seed: 2,
        })
        .unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let p = small();
        let mut meta = CheckpointMeta::new(p.config());
        meta.lineage.push("init".into());
        meta.seeds.insert("init".into(), 2);
        let mut a = Vec::new();
        write_checkpoint(&mut a, &p, &meta).unwrap();
        let (q, m) = read_checkpoint(&mut a.as_slice()).unwrap();
        assert_eq!(m, meta);
        let bits = |p: &ModelParameters| p.flatten().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&p), bits(&q));
        let mut b = Vec::new();
        write_checkpoint(&mut b, &q, &m).unwrap();
        assert_eq!(sha256_hex(&a), sha256_hex(&b));
        assert_eq!(&a[..4], MAGIC);
    }

    #[test]
    fn payload_starts_with_the_first_canonical_block() {
        let p = small();
        let mut a = Vec::new();
        write_checkpoint(&mut a, &p, &CheckpointMeta::new(p.config())).unwrap();
        let meta_len = u64::from_le_bytes(a[8..16].try_into().unwrap()) as usize;
        let start = 16 + meta_len + 8;
        let first = p.block_values(p.layout().blocks()[0].id).unwrap()[0];
        assert_eq!(f32::from_le_bytes(a[start..start + 4].try_into().unwrap()), first);
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let p = small();
        let mut a = Vec::new();
        write_checkpoint(&mut a, &p, &CheckpointMeta::new(p.config())).unwrap();
        let mut bad = a.clone();
        bad[0] = b'X';
        assert!(read_checkpoint(&mut bad.as_slice()).is_err());
        assert!(read_checkpoint(&mut &a[..a.len() - 1]).is_err());
        let mut long = a.clone();
        long.push(0);
        assert!(read_checkpoint(&mut long.as_slice()).is_err());
        let mut other = CheckpointMeta::new(p.config());
        other.config.seed = 99;
        assert!(write_checkpoint(&mut Vec::new(), &p, &other).is_err());
    }

    #[test]
    fn manifest_hash_tracks_config() {
        let a = Manifest::new("erase", &ModelConfig::default()).unwrap();
        let b = Manifest::new("erase", &ModelConfig::default()).unwrap();
        let c = Manifest::new("erase", &ModelConfig { seed: 1, ..Default::default() }).unwrap();
        assert_eq!(a.config_hash, b.config_hash);
        assert_ne!(a.config_hash, c.config_hash);
        assert_eq!(sha256_hex(b"abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }
}
