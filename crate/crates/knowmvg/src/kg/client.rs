//! Localization-knowledge clients: fixture directory, REST, and a caching
//! wrapper. The remote contract is deliberately tiny — `GET
//! {base}/localize?entity=...` returning a JSON array of description strings,
//! with the credential (if any) passed as an `x-api-key` header.

use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Duration;

use percent_encoding::{utf8_percent_encode, AsciiSet, NON_ALPHANUMERIC};

use super::LocalizationSet;
use crate::error::{Error, Result};

/// Characters kept verbatim in fixture/cache filenames and query strings.
const KEEP: &AsciiSet = &NON_ALPHANUMERIC.remove(b'-').remove(b'_').remove(b'.');

/// Url-safe form of an entity string, used for fixture filenames, cache keys
/// and query parameters alike.
pub fn urlsafe(entity: &str) -> String {
    utf8_percent_encode(entity, KEEP).to_string()
}

pub trait KnowledgeClient {
    /// Descriptions for an entity. Unknown entities yield an empty set (the
    /// caller warns); infrastructure problems are errors and retriable.
    fn lookup(&self, entity: &str) -> Result<LocalizationSet>;
}

/// Offline source: one `{urlsafe(entity)}.json` file per entity, each holding
/// a JSON array of description strings.
#[derive(Clone, Debug)]
pub struct FixtureClient {
    dir: PathBuf,
}

impl FixtureClient {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        FixtureClient { dir: dir.into() }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }
}

impl KnowledgeClient for FixtureClient {
    fn lookup(&self, entity: &str) -> Result<LocalizationSet> {
        let path = self.dir.join(format!("{}.json", urlsafe(entity)));
        if !path.exists() {
            return Ok(LocalizationSet::new(entity, Vec::new()));
        }
        let text = std::fs::read_to_string(&path)?;
        let descriptions: Vec<String> = serde_json::from_str(&text).map_err(|e| {
            Error::Lookup(format!("malformed fixture {}: {e}", path.display()))
        })?;
        Ok(LocalizationSet::new(entity, descriptions))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct RemoteOptions {
    pub timeout_ms: u64,
    pub retries: u32,
}

impl Default for RemoteOptions {
    fn default() -> Self {
        RemoteOptions {
            timeout_ms: 5_000,
            retries: 2,
        }
    }
}

/// Environment variable consulted for the remote credential.
pub const API_KEY_ENV: &str = "KNOWMVG_KG_API_KEY";

pub struct RemoteClient {
    base_url: String,
    api_key: Option<String>,
    opts: RemoteOptions,
    agent: ureq::Agent,
}

impl RemoteClient {
    /// `base_url` without a trailing slash, e.g. `http://host:port/api`.
    /// The credential is read from `KNOWMVG_KG_API_KEY` if present.
    pub fn new(base_url: impl Into<String>, opts: RemoteOptions) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(opts.timeout_ms)))
            .build()
            .into();
        RemoteClient {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            api_key: std::env::var(API_KEY_ENV).ok(),
            opts,
            agent,
        }
    }

    fn fetch_once(&self, url: &str) -> Result<Option<Vec<String>>> {
        let mut req = self.agent.get(url);
        if let Some(key) = &self.api_key {
            req = req.header("x-api-key", key);
        }
        match req.call() {
            Ok(mut res) => {
                let body = res.body_mut().read_to_string().map_err(|e| {
                    Error::Lookup(format!("reading response from {url}: {e}"))
                })?;
                let descriptions: Vec<String> = serde_json::from_str(&body).map_err(|e| {
                    Error::Lookup(format!("non-JSON-array response from {url}: {e}"))
                })?;
                Ok(Some(descriptions))
            }
            Err(ureq::Error::StatusCode(404)) => Ok(None),
            Err(e) => Err(Error::Lookup(format!("GET {url}: {e}"))),
        }
    }
}

impl KnowledgeClient for RemoteClient {
    fn lookup(&self, entity: &str) -> Result<LocalizationSet> {
        let url = format!("{}/localize?entity={}", self.base_url, urlsafe(entity));
        let mut last_err = None;
        for attempt in 0..=self.opts.retries {
            match self.fetch_once(&url) {
                Ok(Some(descriptions)) => return Ok(LocalizationSet::new(entity, descriptions)),
                Ok(None) => return Ok(LocalizationSet::new(entity, Vec::new())),
                Err(e) => {
                    if attempt < self.opts.retries {
                        log::warn!("lookup attempt {} failed, retrying: {e}", attempt + 1);
                    }
                    last_err = Some(e);
                }
            }
        }
        Err(last_err.expect("at least one attempt"))
    }
}

/// Write-through disk cache. A cache hit never touches the inner client, so
/// a warmed cache works with the network gone. Writes go through a temp file
/// plus rename and are serialized by a mutex.
pub struct CachedClient<C> {
    inner: C,
    dir: PathBuf,
    write_lock: Mutex<()>,
}

impl<C: KnowledgeClient> CachedClient<C> {
    pub fn new(inner: C, dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir)?;
        Ok(CachedClient {
            inner,
            dir,
            write_lock: Mutex::new(()),
        })
    }

    fn cache_path(&self, entity: &str) -> PathBuf {
        self.dir.join(format!("{}.json", urlsafe(entity)))
    }
}

impl<C: KnowledgeClient> KnowledgeClient for CachedClient<C> {
    fn lookup(&self, entity: &str) -> Result<LocalizationSet> {
        let path = self.cache_path(entity);
        if path.exists() {
            let text = std::fs::read_to_string(&path)?;
            let descriptions: Vec<String> = serde_json::from_str(&text).map_err(|e| {
                Error::Lookup(format!("corrupt cache entry {}: {e}", path.display()))
            })?;
            return Ok(LocalizationSet::new(entity, descriptions));
        }
        let found = self.inner.lookup(entity)?;
        {
            let _guard = self.write_lock.lock().expect("cache lock poisoned");
            let tmp = path.with_extension("json.tmp");
            std::fs::write(&tmp, serde_json::to_string(&found.descriptions)?)?;
            std::fs::rename(&tmp, &path)?;
        }
        Ok(found)
    }
}
