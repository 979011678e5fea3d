//! Patch retrieval with an on-disk cache keyed by CVE id.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use super::manifest::CveEntry;
use super::CorpusError;
use crate::par;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FetchResponse {
    pub status: u16,
    pub body: Vec<u8>,
}

/// Anything that can turn a patch URL into a response body.
pub trait PatchFetcher: Send + Sync {
    fn fetch(&self, url: &str) -> Result<FetchResponse, String>;
}

/// GitHub serves the raw patch of a commit at `<commit url>.patch`.
pub fn patch_download_url(url: &str) -> String {
    let is_commit = url.contains("/commit/") || url.contains("/commits/");
    if is_commit && !url.ends_with(".patch") {
        format!("{url}.patch")
    } else {
        url.to_string()
    }
}

pub struct HttpFetcher {
    client: reqwest::blocking::Client,
}

impl HttpFetcher {
    pub fn new(timeout: Duration) -> Result<Self, CorpusError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .user_agent(concat!("halu-forge/", env!("CARGO_PKG_VERSION")))
            .build()
            .map_err(|e| CorpusError::FetchFailed { url: String::new(), status: None, message: e.to_string() })?;
        Ok(Self { client })
    }
}

impl PatchFetcher for HttpFetcher {
    fn fetch(&self, url: &str) -> Result<FetchResponse, String> {
        let resp = self.client.get(patch_download_url(url)).send().map_err(|e| e.to_string())?;
        let status = resp.status().as_u16();
        let body = resp.bytes().map_err(|e| e.to_string())?.to_vec();
        Ok(FetchResponse { status, body })
    }
}

/// Serves fixed bodies keyed by URL; unknown URLs get a 404.
#[derive(Debug, Default, Clone)]
pub struct MapFetcher {
    bodies: BTreeMap<String, Vec<u8>>,
}

impl MapFetcher {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, url: impl Into<String>, body: impl Into<Vec<u8>>) -> Self {
        self.bodies.insert(url.into(), body.into());
        self
    }
}

impl PatchFetcher for MapFetcher {
    fn fetch(&self, url: &str) -> Result<FetchResponse, String> {
        Ok(match self.bodies.get(url) {
            Some(body) => FetchResponse { status: 200, body: body.clone() },
            None => FetchResponse { status: 404, body: Vec::new() },
        })
    }
}

/// `<corpus_dir>/patches/<cve_id>.patch`
#[derive(Debug, Clone)]
pub struct PatchCache {
    dir: PathBuf,
}

impl PatchCache {
    pub fn new(corpus_dir: impl AsRef<Path>) -> Self {
        Self { dir: corpus_dir.as_ref().join("patches") }
    }

    pub fn path(&self, cve_id: &str) -> PathBuf {
        self.dir.join(format!("{cve_id}.patch"))
    }

    pub fn get(&self, cve_id: &str) -> Option<Vec<u8>> {
        fs::read(self.path(cve_id)).ok().filter(|b| !b.is_empty())
    }

    pub fn put(&self, cve_id: &str, body: &[u8]) -> std::io::Result<()> {
        fs::create_dir_all(&self.dir)?;
        let tmp = self.dir.join(format!(".{cve_id}.patch.tmp"));
        fs::write(&tmp, body)?;
        fs::rename(tmp, self.path(cve_id))
    }
}

/// Returns the patch body for `entry`, from the cache when present.
pub fn fetch_patch(entry: &CveEntry, fetcher: &dyn PatchFetcher, cache: &PatchCache) -> Result<Vec<u8>, CorpusError> {
    if let Some(body) = cache.get(&entry.cve_id) {
        return Ok(body);
    }
    let url = entry.patch_url.clone();
    let resp = fetcher
        .fetch(&url)
        .map_err(|message| CorpusError::FetchFailed { url: url.clone(), status: None, message })?;
    if !(200..300).contains(&resp.status) {
        return Err(CorpusError::FetchFailed { url, status: Some(resp.status), message: String::new() });
    }
    if resp.body.iter().all(u8::is_ascii_whitespace) {
        return Err(CorpusError::EmptyPatch(url));
    }
    cache
        .put(&entry.cve_id, &resp.body)
        .map_err(|e| CorpusError::Io(format!("{}: {e}", cache.path(&entry.cve_id).display())))?;
    Ok(resp.body)
}

/// Fetches every entry with at most `max_in_flight` requests outstanding.
pub fn fetch_all(
    entries: &[CveEntry],
    fetcher: &dyn PatchFetcher,
    cache: &PatchCache,
    max_in_flight: usize,
) -> Vec<Result<Vec<u8>, CorpusError>> {
    par::bounded(entries, max_in_flight, |_, e| fetch_patch(e, fetcher, cache))
}
