//! Content-addressed record/replay cache in front of any backend.
//!
//! Layout: `<root>/<first two hex digits>/<sha256 hex>.json`. Each file holds
//! the key, the canonical request and the verbatim response body. Files are
//! written to a temporary sibling and renamed into place.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use super::{Backend, BackendRequest, BackendResponse, GatewayError};

/// SHA-256 over the canonical request (model, payload, temperature, nonce).
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CacheKey(pub String);

impl CacheKey {
    pub fn for_request(request: &BackendRequest) -> Self {
        Self::from_canonical(&request.canonical())
    }

    fn from_canonical(canonical: &Value) -> Self {
        // serde_json maps are ordered, so this serialization is canonical
        let text = serde_json::to_string(canonical).expect("canonical request serializes");
        CacheKey(hex::encode(Sha256::digest(text.as_bytes())))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CachedResponse {
    pub body: String,
    pub latency_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub key: CacheKey,
    pub request: Value,
    pub response: CachedResponse,
}

#[derive(Debug)]
pub struct CachedBackend<B> {
    inner: B,
    root: PathBuf,
    hits: AtomicUsize,
    misses: AtomicUsize,
}

/// Wraps `backend` with a cache rooted at `store`, creating the directory.
pub fn with_cache<B: Backend>(backend: B, store: impl AsRef<Path>) -> Result<CachedBackend<B>, GatewayError> {
    let root = store.as_ref().to_path_buf();
    fs::create_dir_all(&root).map_err(|e| GatewayError::Cache(format!("{}: {e}", root.display())))?;
    Ok(CachedBackend {
        inner: backend,
        root,
        hits: AtomicUsize::new(0),
        misses: AtomicUsize::new(0),
    })
}

impl<B: Backend> CachedBackend<B> {
    pub fn inner(&self) -> &B {
        &self.inner
    }

    pub fn hits(&self) -> usize {
        self.hits.load(Ordering::SeqCst)
    }

    pub fn misses(&self) -> usize {
        self.misses.load(Ordering::SeqCst)
    }

    pub fn entry_path(&self, key: &CacheKey) -> PathBuf {
        self.root.join(&key.0[..2]).join(format!("{}.json", key.0))
    }

    /// Returns the stored entry, or `None` when absent or unreadable.
    pub fn load(&self, key: &CacheKey) -> Option<CacheEntry> {
        let path = self.entry_path(key);
        let text = match fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return None,
            Err(e) => {
                log::warn!("cache entry {} unreadable ({e}); treating as miss", path.display());
                return None;
            }
        };
        match serde_json::from_str::<CacheEntry>(&text) {
            Ok(entry) if &entry.key == key => Some(entry),
            Ok(_) => {
                log::warn!("cache entry {} has a mismatched key; replacing", path.display());
                None
            }
            Err(e) => {
                log::warn!("cache entry {} is corrupt ({e}); replacing", path.display());
                None
            }
        }
    }

    pub fn store(&self, entry: &CacheEntry) -> Result<(), GatewayError> {
        let path = self.entry_path(&entry.key);
        let dir = path.parent().expect("entry path has a parent");
        let err = |e: std::io::Error| GatewayError::Cache(format!("{}: {e}", path.display()));
        fs::create_dir_all(dir).map_err(err)?;
        let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(err)?;
        let text = serde_json::to_string_pretty(entry).expect("cache entry serializes");
        tmp.write_all(text.as_bytes()).map_err(err)?;
        tmp.as_file().sync_all().map_err(err)?;
        tmp.persist(&path).map_err(|e| err(e.error))?;
        Ok(())
    }
}

impl<B: Backend> Backend for CachedBackend<B> {
    fn complete(&self, request: &BackendRequest) -> Result<BackendResponse, GatewayError> {
        let canonical = request.canonical();
        let key = CacheKey::from_canonical(&canonical);
        if let Some(entry) = self.load(&key) {
            self.hits.fetch_add(1, Ordering::SeqCst);
            return Ok(BackendResponse {
                body: entry.response.body,
                latency_ms: entry.response.latency_ms,
            });
        }
        self.misses.fetch_add(1, Ordering::SeqCst);
        let response = self.inner.complete(request)?;
        self.store(&CacheEntry {
            key,
            request: canonical,
            response: CachedResponse {
                body: response.body.clone(),
                latency_ms: response.latency_ms,
            },
        })?;
        Ok(response)
    }

    fn fingerprint(&self) -> String {
        self.inner.fingerprint()
    }
}
