//! Persistent embedding cache.
//!
//! Entries are keyed by `(hash of model name, SHA-256 of text)`. The on-disk
//! file is append-only; each record is
//!
//! ```text
//! u32 record length (bytes after this field)
//! u64 model-name hash
//! [u8; 32] text hash
//! u64 created_at (unix seconds)
//! u32 dimension
//! f32 * dimension
//! ```
//!
//! all little-endian. A truncated trailing record (e.g. after a crash) is ignored.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Mutex, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::{Embedder, Result as BackendResult};

#[derive(Debug, Error)]
pub enum CacheError {
    #[error("cache file {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CacheStats {
    pub hits: u64,
    pub misses: u64,
    pub size: u64,
}

type Key = (u64, [u8; 32]);

#[derive(Debug)]
struct Entry {
    vector: Vec<f32>,
    #[allow(dead_code)]
    created_at: u64,
}

#[derive(Debug, Default)]
pub struct EmbeddingCache {
    entries: RwLock<HashMap<Key, Entry>>,
    file: Option<(PathBuf, Mutex<File>)>,
    hits: AtomicU64,
    misses: AtomicU64,
}

fn model_hash(model: &str) -> u64 {
    let d: [u8; 32] = Sha256::digest(model.as_bytes()).into();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

fn text_hash(text: &str) -> [u8; 32] {
    Sha256::digest(text.as_bytes()).into()
}

/// Decoded records and the length of the well-formed prefix.
fn parse_records(bytes: &[u8]) -> (Vec<(Key, Entry)>, usize) {
    let mut out = Vec::new();
    let mut pos = 0;
    let mut valid = 0;
    let take = |pos: &mut usize, n: usize| -> Option<&[u8]> {
        let s = bytes.get(*pos..*pos + n)?;
        *pos += n;
        Some(s)
    };
    loop {
        let start = pos;
        let Some(len) = take(&mut pos, 4) else { break };
        let len = u32::from_le_bytes(len.try_into().expect("4 bytes")) as usize;
        let Some(body) = take(&mut pos, len) else {
            log::warn!("ignoring truncated cache record at byte {start}");
            break;
        };
        if body.len() < 8 + 32 + 8 + 4 {
            break;
        }
        let model = u64::from_le_bytes(body[0..8].try_into().expect("8"));
        let text: [u8; 32] = body[8..40].try_into().expect("32");
        let created_at = u64::from_le_bytes(body[40..48].try_into().expect("8"));
        let dim = u32::from_le_bytes(body[48..52].try_into().expect("4")) as usize;
        let floats = &body[52..];
        if floats.len() != dim * 4 {
            break;
        }
        let vector = floats
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4")))
            .collect();
        out.push(((model, text), Entry { vector, created_at }));
        valid = pos;
    }
    (out, valid)
}

fn encode_record(key: &Key, entry: &Entry) -> Vec<u8> {
    let body_len = 8 + 32 + 8 + 4 + 4 * entry.vector.len();
    let mut buf = Vec::with_capacity(4 + body_len);
    buf.extend_from_slice(&(body_len as u32).to_le_bytes());
    buf.extend_from_slice(&key.0.to_le_bytes());
    buf.extend_from_slice(&key.1);
    buf.extend_from_slice(&entry.created_at.to_le_bytes());
    buf.extend_from_slice(&(entry.vector.len() as u32).to_le_bytes());
    for x in &entry.vector {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    buf
}

impl EmbeddingCache {
    /// Cache that lives only in memory.
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Opens (or creates) a cache file and loads its records.
    pub fn open(path: impl AsRef<Path>) -> std::result::Result<Self, CacheError> {
        let path = path.as_ref().to_path_buf();
        let io = |source| CacheError::Io {
            path: path.clone(),
            source,
        };
        let mut file = OpenOptions::new()
            .create(true)
            .read(true)
            .append(true)
            .open(&path)
            .map_err(io)?;
        let mut bytes = Vec::new();
        file.read_to_end(&mut bytes).map_err(io)?;
        let (records, valid) = parse_records(&bytes);
        if valid < bytes.len() {
            // Drop the damaged tail so new records append cleanly.
            file.set_len(valid as u64).map_err(io)?;
        }
        let entries = records.into_iter().collect();
        Ok(Self {
            entries: RwLock::new(entries),
            file: Some((path, Mutex::new(file))),
            ..Self::default()
        })
    }

    pub fn get(&self, model: &str, text: &str) -> Option<Vec<f64>> {
        let key = (model_hash(model), text_hash(text));
        let found = self
            .entries
            .read()
            .expect("cache lock poisoned")
            .get(&key)
            .map(|e| e.vector.iter().map(|&x| f64::from(x)).collect());
        match found {
            Some(_) => self.hits.fetch_add(1, Ordering::Relaxed),
            None => self.misses.fetch_add(1, Ordering::Relaxed),
        };
        found
    }

    pub fn insert(
        &self,
        model: &str,
        text: &str,
        vector: &[f64],
    ) -> std::result::Result<(), CacheError> {
        let key = (model_hash(model), text_hash(text));
        let created_at = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map_or(0, |d| d.as_secs());
        let entry = Entry {
            vector: vector.iter().map(|&x| x as f32).collect(),
            created_at,
        };
        let mut entries = self.entries.write().expect("cache lock poisoned");
        if entries.contains_key(&key) {
            return Ok(());
        }
        if let Some((path, file)) = &self.file {
            let mut f = file.lock().expect("cache file lock poisoned");
            f.write_all(&encode_record(&key, &entry))
                .and_then(|_| f.flush())
                .map_err(|source| CacheError::Io {
                    path: path.clone(),
                    source,
                })?;
        }
        entries.insert(key, entry);
        Ok(())
    }

    pub fn stats(&self) -> CacheStats {
        CacheStats {
            hits: self.hits.load(Ordering::Relaxed),
            misses: self.misses.load(Ordering::Relaxed),
            size: self.entries.read().expect("cache lock poisoned").len() as u64,
        }
    }
}

/// Embedder that consults a cache before the wrapped embedder.
pub struct CachedEmbedder<E> {
    inner: E,
    cache: EmbeddingCache,
}

impl<E: Embedder> CachedEmbedder<E> {
    pub fn new(inner: E, cache: EmbeddingCache) -> Self {
        Self { inner, cache }
    }

    pub fn cache_stats(&self) -> CacheStats {
        self.cache.stats()
    }

    pub fn inner(&self) -> &E {
        &self.inner
    }
}

impl<E: Embedder> Embedder for CachedEmbedder<E> {
    fn embed(&self, text: &str) -> BackendResult<Vec<f64>> {
        let model = self.inner.model_name();
        if let Some(v) = self.cache.get(model, text) {
            return Ok(v);
        }
        let v = self.inner.embed(text)?;
        if let Err(e) = self.cache.insert(model, text, &v) {
            log::warn!("embedding cache write failed: {e}");
        }
        Ok(v)
    }

    fn model_name(&self) -> &str {
        self.inner.model_name()
    }
}
