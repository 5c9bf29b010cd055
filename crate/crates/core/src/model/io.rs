//! Model file layout (all integers little-endian):
//!
//! ```text
//! magic     4 bytes  "NERB"
//! version   u16
//! meta_len  u32, then meta_len bytes of UTF-8 JSON
//!           {config, embedding: {name, dim}, seed}
//! count     u32
//! count × { name_len u32, name bytes, rank u32, rank × u32 dims, f32 data }
//! ```
//!
//! Tensors appear in the fixed order of `TaggerConfig::parameter_shapes`.

use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{TaggerConfig, TaggerModel};
use crate::embeddings::EmbeddingStore;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"NERB";
pub const FORMAT_VERSION: u16 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct EmbeddingMeta {
    name: String,
    dim: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Metadata {
    config: TaggerConfig,
    embedding: EmbeddingMeta,
    seed: u64,
}

impl TaggerModel<f32> {
    pub fn to_bytes(&self, embedding_name: &str) -> Result<Vec<u8>> {
        let meta = Metadata {
            config: self.config.clone(),
            embedding: EmbeddingMeta {
                name: embedding_name.to_string(),
                dim: self.config.word_dim,
            },
            seed: self.seed,
        };
        let json = serde_json::to_vec(&meta).map_err(|e| Error::Format(e.to_string()))?;
        let mut out = Vec::with_capacity(16 + json.len() + 4 * self.parameter_count());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&u32_of(json.len())?.to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&u32_of(self.params.len())?.to_le_bytes());
        let shapes = self.config.parameter_shapes();
        for ((param, (name, _)), dims) in self.params.iter().zip(&shapes).zip(self.config.file_dims()) {
            out.extend_from_slice(&u32_of(name.len())?.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&u32_of(dims.len())?.to_le_bytes());
            for d in dims {
                out.extend_from_slice(&u32_of(d)?.to_le_bytes());
            }
            for v in param.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    /// Parses a model file image and checks it against `store`'s dimension.
    pub fn from_bytes(bytes: &[u8], store: &EmbeddingStore) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("missing NERB magic".into()));
        }
        let version = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported format version {version} (expected {FORMAT_VERSION})"
            )));
        }
        let meta_len = r.u32()? as usize;
        let meta: Metadata =
            serde_json::from_slice(r.take(meta_len)?).map_err(|e| Error::Format(format!("metadata: {e}")))?;
        meta.config.validate()?;
        if meta.config.word_dim != meta.embedding.dim {
            return Err(Error::Format("metadata word_dim disagrees with embedding dim".into()));
        }
        if store.dim() != meta.embedding.dim {
            return Err(Error::Dimension(format!(
                "model was trained with {}-d embeddings (`{}`), store `{}` is {}-d",
                meta.embedding.dim,
                meta.embedding.name,
                store.name(),
                store.dim()
            )));
        }

        let shapes = meta.config.parameter_shapes();
        let file_dims = meta.config.file_dims();
        let count = r.u32()? as usize;
        if count != shapes.len() {
            return Err(Error::Format(format!("expected {} tensors, found {count}", shapes.len())));
        }
        let mut params = Vec::with_capacity(count);
        for ((expected_name, shape), expected_dims) in shapes.into_iter().zip(file_dims) {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?).map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
            if name != expected_name {
                return Err(Error::Format(format!("expected tensor `{expected_name}`, found `{name}`")));
            }
            let rank = r.u32()? as usize;
            let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            if dims != expected_dims {
                return Err(Error::Format(format!("tensor `{name}` has dims {dims:?}, expected {expected_dims:?}")));
            }
            let n = shape.0 * shape.1;
            let data: Vec<f32> = r
                .take(4 * n)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            params.push(Array2::from_shape_vec(shape, data).expect("length checked"));
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(TaggerModel::from_parts(meta.config, meta.seed, params))
    }
}

fn u32_of(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Format(format!("{n} does not fit in u32")))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::Format("unexpected end of file".into()));
        };
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn save_model(model: &TaggerModel<f32>, embedding_name: &str, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = model.to_bytes(embedding_name)?;
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>, store: &EmbeddingStore) -> Result<TaggerModel<f32>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    TaggerModel::from_bytes(&bytes, store)
}
