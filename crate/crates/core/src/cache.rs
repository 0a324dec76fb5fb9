//! Semantic result cache keyed by query embeddings, and the similarity loop
//! that consults it before running the pipeline.

use std::path::Path;
use std::sync::RwLock;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::intent::Intent;
use crate::linalg::{dot, norm, Matrix};
use crate::params::ParamFile;

pub const DEFAULT_THRESHOLD: f64 = 0.9;
pub const DEFAULT_CAPACITY: usize = 1024;

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::InvalidInput(format!("cosine of vectors with widths {} and {}", a.len(), b.len())));
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroNorm);
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub key: Vec<f64>,
    pub intent: Intent,
    pub result_ids: Vec<u32>,
    pub created_ms: f64,
    pub last_hit_ms: f64,
    pub hit_count: u64,
}

impl CacheEntry {
    pub fn new(key: Vec<f64>, intent: Intent, result_ids: Vec<u32>) -> Result<Self> {
        if !(norm(&key) > 0.0) {
            return Err(Error::ZeroNorm);
        }
        if result_ids.is_empty() {
            return Err(Error::InvalidInput("cache entry needs at least one result".into()));
        }
        Ok(Self { key, intent, result_ids, created_ms: 0.0, last_hit_ms: 0.0, hit_count: 0 })
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CacheStats {
    pub lookups: u64,
    pub hits: u64,
    pub misses: u64,
    /// Cumulative insertion time.
    pub cuo_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Lookup {
    Hit { entry: CacheEntry, similarity: f64 },
    Miss { best_similarity: Option<f64> },
}

impl Lookup {
    pub fn is_hit(&self) -> bool {
        matches!(self, Lookup::Hit { .. })
    }
}

#[derive(Debug, Clone)]
struct Slot {
    entry: CacheEntry,
    last_used: u64,
}

/// Best match for a key: slot index and similarity. Exact keys score 1.
fn best_match(slots: &[Slot], key: &[f64]) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, s) in slots.iter().enumerate() {
        let sim = if s.entry.key == key {
            1.0
        } else {
            match cosine_similarity(&s.entry.key, key) {
                Ok(v) => v,
                Err(_) => continue,
            }
        };
        if best.is_none_or(|(_, b)| sim > b) {
            best = Some((i, sim));
        }
    }
    best
}

fn check_threshold(theta: f64) -> Result<()> {
    if theta > 0.0 && theta <= 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("cache threshold must lie in (0, 1], got {theta}")))
    }
}

/// Bounded store with least-recently-hit eviction.
#[derive(Debug, Clone)]
pub struct CacheStore {
    capacity: usize,
    slots: Vec<Slot>,
    tick: u64,
    stats: CacheStats,
    clock: Instant,
}

impl CacheStore {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("cache capacity must be at least 1".into()));
        }
        Ok(Self { capacity, slots: Vec::new(), tick: 0, stats: CacheStats::default(), clock: Instant::now() })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn stats(&self) -> CacheStats {
        self.stats
    }

    pub fn entries(&self) -> impl Iterator<Item = &CacheEntry> {
        self.slots.iter().map(|s| &s.entry)
    }

    pub fn contains_key(&self, key: &[f64]) -> bool {
        self.slots.iter().any(|s| s.entry.key == key)
    }

    fn now_ms(&self) -> f64 {
        self.clock.elapsed().as_secs_f64() * 1e3
    }

    /// Similarity search without touching counters or recency.
    pub fn peek(&self, key: &[f64]) -> Option<(usize, f64)> {
        best_match(&self.slots, key)
    }

    fn record(&mut self, found: Option<(usize, f64)>, theta: f64) -> Lookup {
        self.stats.lookups += 1;
        match found {
            Some((i, sim)) if sim >= theta && i < self.slots.len() => {
                self.stats.hits += 1;
                self.tick += 1;
                let now = self.now_ms();
                let slot = &mut self.slots[i];
                slot.last_used = self.tick;
                slot.entry.last_hit_ms = now;
                slot.entry.hit_count += 1;
                Lookup::Hit { entry: slot.entry.clone(), similarity: sim }
            }
            other => {
                self.stats.misses += 1;
                Lookup::Miss { best_similarity: other.map(|(_, s)| s) }
            }
        }
    }

    pub fn lookup(&mut self, key: &[f64], theta: f64) -> Result<Lookup> {
        check_threshold(theta)?;
        let found = self.peek(key);
        Ok(self.record(found, theta))
    }

    /// Stores an entry, replacing one with the same key or evicting the
    /// least recently used entry when full.
    pub fn insert(&mut self, mut entry: CacheEntry) {
        let start = Instant::now();
        self.tick += 1;
        let now = self.now_ms();
        entry.created_ms = now;
        entry.last_hit_ms = now;
        let slot = Slot { entry, last_used: self.tick };
        if let Some(i) = self.slots.iter().position(|s| s.entry.key == slot.entry.key) {
            self.slots[i] = slot;
        } else {
            if self.slots.len() >= self.capacity {
                if let Some(victim) = (0..self.slots.len()).min_by_key(|&i| self.slots[i].last_used) {
                    self.slots.remove(victim);
                }
            }
            self.slots.push(slot);
        }
        self.stats.cuo_ms += start.elapsed().as_secs_f64() * 1e3;
    }

    pub fn to_params(&self) -> Result<ParamFile> {
        let mut p = ParamFile::new(self.capacity as u64);
        for (i, s) in self.slots.iter().enumerate() {
            let e = &s.entry;
            p.push(format!("key.{i}"), Matrix::from_vec(1, e.key.len(), e.key.clone())?);
            let ids: Vec<f64> = e.result_ids.iter().map(|&id| id as f64).collect();
            p.push(format!("results.{i}"), Matrix::from_vec(1, ids.len(), ids)?);
            p.push(format!("meta.{i}"), Matrix::from_vec(1, 2, vec![e.intent.index() as f64, e.hit_count as f64])?);
        }
        Ok(p)
    }

    /// Rebuilds a store from [`CacheStore::to_params`]; the capacity travels
    /// in the seed field. Entries keep their stored recency order.
    pub fn from_params(p: &ParamFile) -> Result<Self> {
        let mut store = Self::new(p.seed as usize)?;
        let n = p.sections.iter().filter(|(name, _)| name.starts_with("key.")).count();
        for i in 0..n {
            let key = p.get(&format!("key.{i}"))?.data().to_vec();
            let ids = p
                .get(&format!("results.{i}"))?
                .data()
                .iter()
                .map(|&x| {
                    if x >= 0.0 && x.fract() == 0.0 && x <= u32::MAX as f64 {
                        Ok(x as u32)
                    } else {
                        Err(Error::Validation(format!("cache entry {i} has a bad result id {x}")))
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            let meta = p.get(&format!("meta.{i}"))?.data().to_vec();
            let intent = meta
                .first()
                .and_then(|&k| Intent::ALL.get(k as usize).copied())
                .ok_or_else(|| Error::Validation(format!("cache entry {i} has a bad intent")))?;
            let mut e = CacheEntry::new(key, intent, ids)?;
            e.hit_count = meta.get(1).copied().unwrap_or(0.0) as u64;
            store.insert(e);
        }
        store.stats = CacheStats::default();
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_params()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_params(&ParamFile::load(path)?)
    }
}

/// Many readers, one writer. Lookups search under the read lock and only
/// take the write lock to update counters.
#[derive(Debug)]
pub struct SharedCache {
    inner: RwLock<CacheStore>,
}

impl SharedCache {
    pub fn new(store: CacheStore) -> Self {
        Self { inner: RwLock::new(store) }
    }

    fn read(&self) -> std::sync::RwLockReadGuard<'_, CacheStore> {
        self.inner.read().unwrap_or_else(|e| e.into_inner())
    }

    fn write(&self) -> std::sync::RwLockWriteGuard<'_, CacheStore> {
        self.inner.write().unwrap_or_else(|e| e.into_inner())
    }

    pub fn lookup(&self, key: &[f64], theta: f64) -> Result<Lookup> {
        check_threshold(theta)?;
        let seen = {
            let r = self.read();
            r.peek(key).map(|(i, sim)| (r.slots[i].entry.key.clone(), sim))
        };
        let mut w = self.write();
        // A writer may have run in between; relocate the match by key.
        let found = match seen {
            Some((k, sim)) => match w.slots.iter().position(|s| s.entry.key == k) {
                Some(i) => Some((i, sim)),
                None => w.peek(key),
            },
            None => w.peek(key),
        };
        Ok(w.record(found, theta))
    }

    /// Counts a miss without searching, for keys that cannot be compared.
    pub fn record_miss(&self) {
        self.write().record(None, 1.0);
    }

    pub fn insert(&self, entry: CacheEntry) {
        self.write().insert(entry);
    }

    pub fn stats(&self) -> CacheStats {
        self.read().stats()
    }

    pub fn len(&self) -> usize {
        self.read().len()
    }

    pub fn is_empty(&self) -> bool {
        self.read().is_empty()
    }

    pub fn snapshot(&self) -> CacheStore {
        self.read().clone()
    }

    pub fn into_inner(self) -> CacheStore {
        self.inner.into_inner().unwrap_or_else(|e| e.into_inner())
    }
}

/// One full pipeline pass as seen by the similarity loop.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineAnswer {
    pub intent: Intent,
    /// Ranked `(id, score)` list, best first.
    pub ranked: Vec<(u32, f64)>,
    pub query_embedding: Vec<f64>,
}

pub trait AnswerPipeline {
    fn cache_key(&self, query: &str) -> Result<Vec<f64>>;
    fn answer(&self, query: &str, expansion_threshold: f64) -> Result<PipelineAnswer>;
    /// Embedding representing a result record.
    fn representative(&self, id: u32) -> Result<Vec<f64>>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoopConfig {
    /// Gate on the final answer.
    pub threshold: f64,
    /// Gate on cache hits.
    pub cache_threshold: f64,
    pub max_rounds: usize,
    pub expansion_threshold: f64,
    pub relax_step: f64,
    pub min_expansion_threshold: f64,
}

impl Default for LoopConfig {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_THRESHOLD,
            cache_threshold: DEFAULT_THRESHOLD,
            max_rounds: 3,
            expansion_threshold: 0.3,
            relax_step: 0.1,
            min_expansion_threshold: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundTrace {
    pub round: usize,
    pub expansion_threshold: f64,
    pub candidate: u32,
    pub similarity: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AnswerSource {
    Cache,
    Pipeline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoopOutcome {
    pub source: AnswerSource,
    pub intent: Intent,
    /// Chosen answer first, then the remaining ranking.
    pub result_ids: Vec<u32>,
    pub similarity: f64,
    pub below_threshold: bool,
    /// Pipeline passes run; 0 for a cache hit.
    pub pipeline_runs: usize,
    pub trace: Vec<RoundTrace>,
}

/// Cache lookup, then up to `max_rounds` pipeline passes. Each further pass
/// relaxes the expansion threshold and moves to the next-ranked candidate.
/// The best answer seen is returned and cached whatever its similarity.
pub fn similarity_loop<P: AnswerPipeline + ?Sized>(
    pipeline: &P,
    cache: &SharedCache,
    query: &str,
    cfg: &LoopConfig,
) -> Result<LoopOutcome> {
    if cfg.max_rounds == 0 {
        return Err(Error::Config("max_rounds must be at least 1".into()));
    }
    if !(cfg.threshold > 0.0 && cfg.threshold <= 1.0) {
        return Err(Error::Config(format!("threshold must lie in (0, 1], got {}", cfg.threshold)));
    }
    let key = pipeline.cache_key(query)?;
    let comparable = norm(&key) > 0.0;
    if comparable {
        if let Lookup::Hit { entry, similarity } = cache.lookup(&key, cfg.cache_threshold)? {
            return Ok(LoopOutcome {
                source: AnswerSource::Cache,
                intent: entry.intent,
                result_ids: entry.result_ids,
                similarity,
                below_threshold: false,
                pipeline_runs: 0,
                trace: Vec::new(),
            });
        }
    } else {
        cache.record_miss();
    }

    let mut best: Option<(f64, u32, PipelineAnswer)> = None;
    let mut trace = Vec::new();
    for round in 0..cfg.max_rounds {
        let thr = (cfg.expansion_threshold - round as f64 * cfg.relax_step).max(cfg.min_expansion_threshold);
        let ans = pipeline.answer(query, thr)?;
        let Some(&(cand, _)) = ans.ranked.get(round.min(ans.ranked.len().saturating_sub(1))) else {
            return Err(Error::Validation("pipeline returned no candidates".into()));
        };
        let rep = pipeline.representative(cand)?;
        let sim = match cosine_similarity(&rep, &ans.query_embedding) {
            Ok(s) => s,
            Err(Error::ZeroNorm) => 0.0,
            Err(e) => return Err(e),
        };
        trace.push(RoundTrace { round: round + 1, expansion_threshold: thr, candidate: cand, similarity: sim });
        if best.as_ref().is_none_or(|(s, _, _)| sim > *s) {
            best = Some((sim, cand, ans));
        }
        if sim >= cfg.threshold {
            break;
        }
    }
    let (similarity, cand, ans) = best.expect("at least one round ran");
    let mut result_ids = vec![cand];
    result_ids.extend(ans.ranked.iter().map(|(id, _)| *id).filter(|&id| id != cand));
    if comparable {
        cache.insert(CacheEntry::new(key, ans.intent, result_ids.clone())?);
    }
    Ok(LoopOutcome {
        source: AnswerSource::Pipeline,
        intent: ans.intent,
        result_ids,
        similarity,
        below_threshold: similarity < cfg.threshold,
        pipeline_runs: trace.len(),
        trace,
    })
}
