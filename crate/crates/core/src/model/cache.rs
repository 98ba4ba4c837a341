//! Content-addressed embedding cache.
//!
//! The encoder is frozen during training, so embeddings are computed once
//! per (encoder weights, config, image) and reused. Keys are SHA-256 over
//! the canonical config text, the encoder-group tensors, and the image
//! bytes, so a stale cache can never be served after weights change.
//! Reads are concurrent; writes take the exclusive lock only to insert.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::Path;
use std::sync::{Arc, RwLock};

use sha2::{Digest, Sha256};

use super::{encode_image, ImageEmbedding, ModelConfig, ParamGroup, Parameters};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

type Key = [u8; 32];

pub struct EmbeddingCache<S: Scalar> {
    entries: RwLock<BTreeMap<Key, Arc<Tensor<S>>>>,
}

impl<S: Scalar> Default for EmbeddingCache<S> {
    fn default() -> Self {
        Self::new()
    }
}

const CACHE_MAGIC: &[u8; 4] = b"SEGE";
const CACHE_VERSION: u8 = 0x01;

impl<S: Scalar> EmbeddingCache<S> {
    pub fn new() -> Self {
        EmbeddingCache {
            entries: RwLock::new(BTreeMap::new()),
        }
    }

    fn content_key(params: &Parameters<S>, config: &ModelConfig, image: &Tensor<S>) -> Key {
        let mut hasher = Sha256::new();
        hasher.update(config.to_text().as_bytes());
        for (name, tensor) in params.tensors() {
            if ParamGroup::of(name) != ParamGroup::Encoder {
                continue;
            }
            hasher.update(name.as_bytes());
            let mut bytes = Vec::with_capacity(tensor.numel() * S::BYTE_WIDTH);
            for &v in tensor.data() {
                v.write_le(&mut bytes);
            }
            hasher.update(&bytes);
        }
        let mut bytes = Vec::with_capacity(image.numel() * S::BYTE_WIDTH);
        for &v in image.data() {
            v.write_le(&mut bytes);
        }
        hasher.update(&bytes);
        hasher.finalize().into()
    }

    pub fn len(&self) -> usize {
        self.entries.read().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Cached embedding if present, otherwise compute, insert, and return.
    /// A hit returns the stored tensor bit-identically.
    pub fn get_or_compute(
        &self,
        params: &Parameters<S>,
        config: &ModelConfig,
        image: &Tensor<S>,
    ) -> Result<ImageEmbedding<S>> {
        let key = Self::content_key(params, config, image);
        if let Some(hit) = self.entries.read().unwrap().get(&key) {
            return Ok(ImageEmbedding {
                grid_size: config.grid_size(),
                dim: config.embed_dim,
                tensor: (**hit).clone(),
            });
        }
        let embedding = encode_image(params, config, image)?;
        self.entries
            .write()
            .unwrap()
            .entry(key)
            .or_insert_with(|| Arc::new(embedding.tensor.clone()));
        Ok(embedding)
    }

    /// Persist all entries sorted by key; the byte output is deterministic.
    pub fn save(&self, path: &Path) -> Result<()> {
        let entries = self.entries.read().unwrap();
        let mut out = Vec::new();
        out.extend_from_slice(CACHE_MAGIC);
        out.push(CACHE_VERSION);
        out.push(S::DTYPE_CODE);
        out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
        for (key, tensor) in entries.iter() {
            out.extend_from_slice(key);
            out.extend_from_slice(&(tensor.shape()[0] as u32).to_le_bytes());
            out.extend_from_slice(&(tensor.shape()[1] as u32).to_le_bytes());
            for &v in tensor.data() {
                v.write_le(&mut out);
            }
        }
        let mut f = std::fs::File::create(path)?;
        f.write_all(&out)?;
        Ok(())
    }

    /// Load a persisted cache; a missing file yields an empty cache.
    pub fn load(path: &Path) -> Result<Self> {
        let cache = Self::new();
        let bytes = match std::fs::read(path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(cache),
            Err(e) => return Err(e.into()),
        };
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize, field: &str| -> Result<&[u8]> {
            if *pos + n > bytes.len() {
                return Err(Error::parse(field, "embedding cache truncated".to_string()));
            }
            let s = &bytes[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };
        if take(&mut pos, 4, "magic")? != CACHE_MAGIC {
            return Err(Error::parse("magic", "not an embedding cache".to_string()));
        }
        if take(&mut pos, 1, "version")?[0] != CACHE_VERSION {
            return Err(Error::parse("version", "unsupported cache version".to_string()));
        }
        if take(&mut pos, 1, "dtype")?[0] != S::DTYPE_CODE {
            return Err(Error::parse("dtype", "cache dtype mismatch".to_string()));
        }
        let count = u32::from_le_bytes(take(&mut pos, 4, "count")?.try_into().unwrap());
        let mut map = BTreeMap::new();
        for i in 0..count {
            let key: Key = take(&mut pos, 32, &format!("entry[{i}].key"))?
                .try_into()
                .unwrap();
            let rows =
                u32::from_le_bytes(take(&mut pos, 4, &format!("entry[{i}].rows"))?.try_into().unwrap())
                    as usize;
            let cols =
                u32::from_le_bytes(take(&mut pos, 4, &format!("entry[{i}].cols"))?.try_into().unwrap())
                    as usize;
            let payload = take(&mut pos, rows * cols * S::BYTE_WIDTH, &format!("entry[{i}].payload"))?;
            let data: Vec<S> = payload.chunks_exact(S::BYTE_WIDTH).map(S::read_le).collect();
            map.insert(key, Arc::new(Tensor::new(vec![rows, cols], data)?));
        }
        *cache.entries.write().unwrap() = map;
        Ok(cache)
    }
}
