//! Shared retrieval with a persistent query cache.
//!
//! [`RetrievalService`] wraps one loaded index. Repeated queries are answered
//! from the cache without touching the index; every computed entry is
//! appended to a JSONL journal that is replayed on start and compacted on
//! shutdown. [`http`] exposes the service over HTTP and [`client`] talks to it.

pub mod client;
pub mod http;

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, OnceLock, RwLock};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::corpus::Passage;
use crate::index::InvertedIndex;
use crate::retriever::{RetrievalError, Retrieved, Retriever};

const MAX_LATENCY_SAMPLES: usize = 1 << 16;

/// Trim, collapse internal whitespace, lowercase.
pub fn normalize_query(query: &str) -> String {
    query.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CacheKey {
    pub query: String,
    pub k: usize,
    pub corpus_fingerprint: String,
    pub config_digest: String,
}

impl CacheKey {
    pub fn new(query: &str, k: usize, corpus_fingerprint: &str, config_digest: &str) -> Self {
        Self {
            query: normalize_query(query),
            k,
            corpus_fingerprint: corpus_fingerprint.to_string(),
            config_digest: config_digest.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub key: CacheKey,
    pub passages: Vec<Passage>,
    /// Seconds since the Unix epoch.
    pub created_at: u64,
}

#[derive(Debug, Default, Clone)]
pub struct ServiceOptions {
    pub cache_path: Option<PathBuf>,
    /// LRU bound on the number of cached keys; unbounded when `None`.
    pub max_entries: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ServiceStats {
    pub total_queries: u64,
    pub cache_hits: u64,
    pub cache_misses: u64,
    pub search_invocations: u64,
    pub entries: usize,
    /// Most recent per-query latencies in microseconds.
    #[serde(skip)]
    pub latency_us: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsSummary {
    pub total_queries: u64,
    pub cache_hits: u64,
    pub cache_misses: u64,
    pub search_invocations: u64,
    pub entries: usize,
    pub latency_p50_ms: f64,
    pub latency_p99_ms: f64,
}

impl ServiceStats {
    pub fn summary(&self) -> StatsSummary {
        StatsSummary {
            total_queries: self.total_queries,
            cache_hits: self.cache_hits,
            cache_misses: self.cache_misses,
            search_invocations: self.search_invocations,
            entries: self.entries,
            latency_p50_ms: percentile(&self.latency_us, 0.50) / 1000.0,
            latency_p99_ms: percentile(&self.latency_us, 0.99) / 1000.0,
        }
    }
}

/// Nearest-rank percentile; 0 for an empty sample.
pub fn percentile(samples: &[f64], q: f64) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = (q * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

struct Slot {
    passages: OnceLock<Arc<Vec<Passage>>>,
    created_at: u64,
    seq: u64,
    last_used: AtomicU64,
}

#[derive(Default)]
struct Counters {
    total: u64,
    hits: u64,
    misses: u64,
    samples: Vec<f64>,
    next_sample: usize,
}

pub struct RetrievalService {
    index: Arc<InvertedIndex>,
    config_digest: String,
    slots: RwLock<HashMap<CacheKey, Arc<Slot>>>,
    max_entries: Option<usize>,
    clock: AtomicU64,
    counters: Mutex<Counters>,
    search_calls: AtomicU64,
    journal: Mutex<Option<BufWriter<File>>>,
    cache_path: Option<PathBuf>,
    warnings: Mutex<Vec<String>>,
}

impl std::fmt::Debug for RetrievalService {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RetrievalService")
            .field("corpus", &self.index.corpus_fingerprint())
            .field("cache_path", &self.cache_path)
            .finish_non_exhaustive()
    }
}

fn now_secs() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

impl RetrievalService {
    /// Wraps an index; replays the cache journal when `cache_path` exists.
    ///
    /// A corrupt journal is moved aside and the service starts with an empty
    /// cache, leaving a warning in [`RetrievalService::warnings`].
    pub fn open(index: Arc<InvertedIndex>, options: ServiceOptions) -> Self {
        let config_digest = crate::digest::sha256_hex(index.describe().as_bytes());
        let service = Self {
            index,
            config_digest,
            slots: RwLock::new(HashMap::new()),
            max_entries: options.max_entries.filter(|&m| m > 0),
            clock: AtomicU64::new(0),
            counters: Mutex::new(Counters::default()),
            search_calls: AtomicU64::new(0),
            journal: Mutex::new(None),
            cache_path: options.cache_path,
            warnings: Mutex::new(Vec::new()),
        };
        if let Some(path) = service.cache_path.clone() {
            service.replay(&path);
            service.open_journal(&path);
        }
        service
    }

    pub fn in_memory(index: Arc<InvertedIndex>) -> Self {
        Self::open(index, ServiceOptions::default())
    }

    pub fn index(&self) -> &InvertedIndex {
        &self.index
    }

    pub fn corpus_fingerprint(&self) -> &str {
        self.index.corpus_fingerprint()
    }

    pub fn config_digest(&self) -> &str {
        &self.config_digest
    }

    pub fn key_for(&self, query: &str, k: usize) -> CacheKey {
        CacheKey::new(query, k, self.index.corpus_fingerprint(), &self.config_digest)
    }

    pub fn warnings(&self) -> Vec<String> {
        self.warnings.lock().unwrap().clone()
    }

    fn warn(&self, message: String) {
        log::warn!("{message}");
        self.warnings.lock().unwrap().push(message);
    }

    /// Number of times the underlying index was actually searched.
    pub fn search_invocations(&self) -> u64 {
        self.search_calls.load(Ordering::SeqCst)
    }

    /// Returns cached passages on a key hit, otherwise searches and stores.
    ///
    /// Concurrent misses on the same key run exactly one search; the other
    /// callers block on it and are counted as hits.
    pub fn cached_search(&self, query: &str, k: usize) -> Result<(Vec<Passage>, bool), RetrievalError> {
        if k == 0 {
            return Err(RetrievalError::InvalidK);
        }
        let started = Instant::now();
        let key = self.key_for(query, k);
        let slot = self.slot_for(&key);
        let mut computed = false;
        let passages = slot
            .passages
            .get_or_init(|| {
                computed = true;
                self.search_calls.fetch_add(1, Ordering::SeqCst);
                Arc::new(self.index.search(&key.query, k))
            })
            .clone();
        slot.last_used.store(self.tick(), Ordering::Relaxed);
        if computed {
            self.append_journal(&CacheEntry {
                key: key.clone(),
                passages: passages.as_ref().clone(),
                created_at: slot.created_at,
            });
            self.evict_if_needed(&key);
        }
        self.record(!computed, started.elapsed().as_secs_f64() * 1e6);
        Ok((passages.as_ref().clone(), !computed))
    }

    fn tick(&self) -> u64 {
        self.clock.fetch_add(1, Ordering::Relaxed) + 1
    }

    fn slot_for(&self, key: &CacheKey) -> Arc<Slot> {
        if let Some(slot) = self.slots.read().unwrap().get(key) {
            return slot.clone();
        }
        let mut slots = self.slots.write().unwrap();
        slots
            .entry(key.clone())
            .or_insert_with(|| {
                let seq = self.tick();
                Arc::new(Slot {
                    passages: OnceLock::new(),
                    created_at: now_secs(),
                    seq,
                    last_used: AtomicU64::new(seq),
                })
            })
            .clone()
    }

    fn evict_if_needed(&self, keep: &CacheKey) {
        let Some(max) = self.max_entries else { return };
        let mut slots = self.slots.write().unwrap();
        while slots.len() > max {
            let victim = slots
                .iter()
                .filter(|(k, s)| *k != keep && s.passages.get().is_some())
                .min_by_key(|(_, s)| s.last_used.load(Ordering::Relaxed))
                .map(|(k, _)| k.clone());
            match victim {
                Some(k) => {
                    slots.remove(&k);
                }
                None => break,
            }
        }
    }

    fn record(&self, hit: bool, latency_us: f64) {
        let mut c = self.counters.lock().unwrap();
        c.total += 1;
        if hit {
            c.hits += 1;
        } else {
            c.misses += 1;
        }
        if c.samples.len() < MAX_LATENCY_SAMPLES {
            c.samples.push(latency_us);
        } else {
            let i = c.next_sample;
            c.samples[i] = latency_us;
            c.next_sample = (i + 1) % MAX_LATENCY_SAMPLES;
        }
    }

    pub fn stats(&self) -> ServiceStats {
        let c = self.counters.lock().unwrap();
        ServiceStats {
            total_queries: c.total,
            cache_hits: c.hits,
            cache_misses: c.misses,
            search_invocations: self.search_invocations(),
            entries: self.entry_count(),
            latency_us: c.samples.clone(),
        }
    }

    pub fn entry_count(&self) -> usize {
        self.slots
            .read()
            .unwrap()
            .values()
            .filter(|s| s.passages.get().is_some())
            .count()
    }

    /// Cached entries in insertion order.
    pub fn entries(&self) -> Vec<CacheEntry> {
        let slots = self.slots.read().unwrap();
        let mut entries: Vec<(u64, CacheEntry)> = slots
            .iter()
            .filter_map(|(key, slot)| {
                slot.passages.get().map(|p| {
                    (
                        slot.seq,
                        CacheEntry {
                            key: key.clone(),
                            passages: p.as_ref().clone(),
                            created_at: slot.created_at,
                        },
                    )
                })
            })
            .collect();
        entries.sort_by_key(|(seq, _)| *seq);
        entries.into_iter().map(|(_, e)| e).collect()
    }

    fn replay(&self, path: &Path) {
        let raw = match fs::read_to_string(path) {
            Ok(raw) => raw,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return,
            Err(e) => {
                self.warn(format!(
                    "cannot read cache {}: {e}; starting with empty cache",
                    path.display()
                ));
                self.quarantine(path);
                return;
            }
        };
        let mut loaded = Vec::new();
        let mut skipped = 0usize;
        let terminated = raw.ends_with('\n');
        let lines: Vec<&str> = raw.lines().collect();
        for (i, line) in lines.iter().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str::<CacheEntry>(line) {
                Ok(entry) => {
                    if entry.key.corpus_fingerprint == self.index.corpus_fingerprint()
                        && entry.key.config_digest == self.config_digest
                    {
                        loaded.push(entry);
                    } else {
                        skipped += 1;
                    }
                }
                // An unterminated tail is a write cut short by a crash.
                Err(_) if i + 1 == lines.len() && !terminated => {
                    self.warn(format!("ignoring truncated final cache record in {}", path.display()));
                }
                Err(e) => {
                    self.warn(format!(
                        "corrupt cache file {} (line {}): {e}; starting with empty cache",
                        path.display(),
                        i + 1
                    ));
                    self.quarantine(path);
                    return;
                }
            }
        }
        if skipped > 0 {
            self.warn(format!(
                "dropped {skipped} cache entries built for a different corpus or config"
            ));
        }
        let mut slots = self.slots.write().unwrap();
        for entry in loaded {
            let seq = self.tick();
            let fresh = OnceLock::new();
            let _ = fresh.set(Arc::new(entry.passages));
            slots.entry(entry.key).or_insert_with(|| {
                Arc::new(Slot {
                    passages: fresh,
                    created_at: entry.created_at,
                    seq,
                    last_used: AtomicU64::new(seq),
                })
            });
        }
        drop(slots);
        // Rewrite so stale or truncated records never reach the append stream.
        if let Err(e) = self.write_compacted(path) {
            self.warn(format!("cannot compact cache {}: {e}", path.display()));
        }
    }

    fn quarantine(&self, path: &Path) {
        let mut aside = path.as_os_str().to_owned();
        aside.push(".corrupt");
        if let Err(e) = fs::rename(path, &aside) {
            self.warn(format!("cannot move corrupt cache aside: {e}"));
        }
    }

    fn open_journal(&self, path: &Path) {
        match open_append(path) {
            Ok(w) => *self.journal.lock().unwrap() = Some(w),
            Err(e) => self.warn(format!("cache journal {} unavailable: {e}", path.display())),
        }
    }

    fn append_journal(&self, entry: &CacheEntry) {
        let mut guard = self.journal.lock().unwrap();
        let Some(journal) = guard.as_mut() else { return };
        let result = serde_json::to_writer(&mut *journal, entry)
            .map_err(std::io::Error::from)
            .and_then(|_| journal.write_all(b"\n"))
            .and_then(|_| journal.flush());
        if let Err(e) = result {
            drop(guard);
            self.warn(format!("cache write failed: {e}"));
        }
    }

    fn write_compacted(&self, path: &Path) -> std::io::Result<()> {
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".tmp");
        let tmp = PathBuf::from(tmp);
        {
            let mut w = BufWriter::new(File::create(&tmp)?);
            for entry in self.entries() {
                serde_json::to_writer(&mut w, &entry)?;
                w.write_all(b"\n")?;
            }
            w.into_inner().map_err(|e| e.into_error())?.sync_all()?;
        }
        fs::rename(&tmp, path)
    }

    /// Compacts the journal to one line per live entry.
    pub fn persist(&self) -> std::io::Result<()> {
        let Some(path) = self.cache_path.clone() else {
            return Ok(());
        };
        let mut journal = self.journal.lock().unwrap();
        if let Some(j) = journal.as_mut() {
            j.flush()?;
        }
        *journal = None;
        let result = self.write_compacted(&path);
        *journal = Some(open_append(&path)?);
        result
    }
}

fn open_append(path: &Path) -> std::io::Result<BufWriter<File>> {
    OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map(BufWriter::new)
}

impl Retriever for RetrievalService {
    fn retrieve(&self, query: &str, k: usize) -> Result<Retrieved, RetrievalError> {
        let (passages, cache_hit) = self.cached_search(query, k)?;
        Ok(Retrieved { passages, cache_hit })
    }

    fn describe(&self) -> Result<String, RetrievalError> {
        Ok(self.index.describe())
    }
}
