//! Checkpoint (`CRCK`) and embedding store (`CRVE`) files. All integers and
//! floats are little-endian; strings are a `u32` byte length then UTF-8.

use std::path::Path;

use convdr_core::index::EmbeddingStore;
use convdr_core::model::{ModelConfig, ModelParams, Pooling};
use convdr_core::tensor::Tensor;

use crate::config::{parse_pooling, pooling_name};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CRCK";
pub const STORE_MAGIC: &[u8; 4] = b"CRVE";
pub const VERSION: u32 = 1;

/// Trained weights plus the pooling the model was trained with.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams<f32>,
    pub pooling: Pooling,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }

    fn f32s(&mut self, v: &[f32]) {
        self.0.reserve(v.len() * 4);
        for x in v {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            format!("truncated at byte {} (wanted {n} more of {})", self.pos, self.buf.len())
        })?;
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

    fn str(&mut self) -> std::result::Result<String, String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| format!("invalid UTF-8 before byte {}", self.pos))
    }

    fn f32s(&mut self, n: usize) -> std::result::Result<Vec<f32>, String> {
        let bytes = self.take(n.checked_mul(4).ok_or("length overflow")?)?;
        Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }

    fn header(&mut self, magic: &[u8; 4]) -> std::result::Result<(), String> {
        if self.take(4)? != magic {
            return Err(format!("not a {} file", String::from_utf8_lossy(magic)));
        }
        match self.u32()? {
            VERSION => Ok(()),
            v => Err(format!("unsupported version {v}")),
        }
    }

    fn finish(&self) -> std::result::Result<(), String> {
        match self.buf.len() - self.pos {
            0 => Ok(()),
            n => Err(format!("{n} trailing bytes")),
        }
    }
}

fn config_pairs(c: &ModelConfig, pooling: Pooling) -> [(&'static str, String); 9] {
    [
        ("vocab_size", c.vocab_size.to_string()),
        ("d_model", c.d_model.to_string()),
        ("n_layers", c.n_layers.to_string()),
        ("n_heads", c.n_heads.to_string()),
        ("context_len", c.context_len.to_string()),
        ("ff_mult", c.ff_mult.to_string()),
        ("dropout", c.dropout.to_string()),
        ("tie_embeddings", c.tie_embeddings.to_string()),
        ("pooling", pooling_name(pooling).to_string()),
    ]
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(CHECKPOINT_MAGIC);
    w.u32(VERSION);
    let pairs = config_pairs(&ck.params.config, ck.pooling);
    w.u32(pairs.len() as u32);
    for (k, v) in &pairs {
        w.str(k);
        w.str(v);
    }
    for t in &ck.params.tensors {
        w.u32(t.shape().len() as u32);
        for &d in t.shape() {
            w.u32(d as u32);
        }
        w.f32s(t.data());
    }
    w.0
}

pub fn decode_checkpoint(bytes: &[u8]) -> std::result::Result<Checkpoint, String> {
    let mut r = Reader { buf: bytes, pos: 0 };
    r.header(CHECKPOINT_MAGIC)?;
    let n = r.u32()? as usize;
    let mut values = std::collections::BTreeMap::new();
    for _ in 0..n {
        let k = r.str()?;
        let v = r.str()?;
        if values.insert(k.clone(), v).is_some() {
            return Err(format!("config field {k} repeated"));
        }
    }
    let mut get = |k: &str| values.remove(k).ok_or_else(|| format!("config field {k} missing"));
    fn num<T: std::str::FromStr>(k: &str, v: String) -> std::result::Result<T, String> {
        v.parse().map_err(|_| format!("config field {k} has invalid value {v:?}"))
    }
    let config = ModelConfig {
        vocab_size: num("vocab_size", get("vocab_size")?)?,
        d_model: num("d_model", get("d_model")?)?,
        n_layers: num("n_layers", get("n_layers")?)?,
        n_heads: num("n_heads", get("n_heads")?)?,
        context_len: num("context_len", get("context_len")?)?,
        ff_mult: num("ff_mult", get("ff_mult")?)?,
        dropout: num("dropout", get("dropout")?)?,
        tie_embeddings: num("tie_embeddings", get("tie_embeddings")?)?,
    };
    let p = get("pooling")?;
    let pooling = parse_pooling(&p).ok_or_else(|| format!("unknown pooling {p:?}"))?;
    if let Some(k) = values.keys().next() {
        return Err(format!("unknown config field {k}"));
    }
    config.validate().map_err(|e| e.to_string())?;
    let mut tensors = Vec::new();
    for (name, want) in config.param_specs() {
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<std::result::Result<Vec<_>, _>>()?;
        if shape != want {
            return Err(format!("tensor {name} has shape {shape:?}, config implies {want:?}"));
        }
        let data = r.f32s(shape.iter().product())?;
        tensors.push(Tensor::new(shape, data).map_err(|e| e.to_string())?);
    }
    r.finish()?;
    let params = ModelParams::from_tensors(config, tensors).map_err(|e| e.to_string())?;
    Ok(Checkpoint { params, pooling })
}

pub fn encode_store(store: &EmbeddingStore) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(STORE_MAGIC);
    w.u32(VERSION);
    w.u64(store.len() as u64);
    w.u32(store.dim() as u32);
    for id in store.ids() {
        w.str(id);
    }
    w.f32s(store.data());
    w.0
}

pub fn decode_store(bytes: &[u8]) -> std::result::Result<EmbeddingStore, String> {
    let mut r = Reader { buf: bytes, pos: 0 };
    r.header(STORE_MAGIC)?;
    let count = usize::try_from(r.u64()?).map_err(|_| "count too large")?;
    let dim = r.u32()? as usize;
    // every id needs at least its 4-byte length
    if count > bytes.len() / 4 {
        return Err(format!("count {count} exceeds file size"));
    }
    let ids = (0..count).map(|_| r.str()).collect::<std::result::Result<Vec<_>, _>>()?;
    let data = r.f32s(count.checked_mul(dim).ok_or("size overflow")?)?;
    r.finish()?;
    EmbeddingStore::from_raw(ids, dim, data).map_err(|e| e.to_string())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(Error::io(path))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(Error::io(path))
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    write_file(path, &encode_checkpoint(ck))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&read_file(path)?).map_err(|m| Error::file(path, m))
}

pub fn save_store(path: &Path, store: &EmbeddingStore) -> Result<()> {
    write_file(path, &encode_store(store))
}

pub fn load_store(path: &Path) -> Result<EmbeddingStore> {
    decode_store(&read_file(path)?).map_err(|m| Error::file(path, m))
}
