//! Run configuration: a TOML file whose every key is optional. Unknown keys
//! are rejected by their full dotted name.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ranker::OutputGate;

/// Input files. An empty path selects the bundled resource.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Directory holding `CISI.ALL`, `CISI.QRY` and `CISI.REL`.
    pub corpus_dir: String,
    pub taxonomy: String,
    pub stopwords: String,
    pub contractions: String,
    pub abbreviations: String,
    pub pos_lexicon: String,
    pub intent_informational: String,
    pub intent_navigational: String,
    pub intent_transactional: String,
    pub intent_context: String,
    pub ner_training: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub expansion_threshold: f64,
    /// Gate on final answers.
    pub threshold: f64,
    /// Gate on cache hits.
    pub cache_threshold: f64,
    pub max_rounds: usize,
    pub relax_step: f64,
    pub min_expansion_threshold: f64,
    pub t_max: usize,
    /// Candidates handed to the ranker per query.
    pub candidates: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            expansion_threshold: 0.3,
            threshold: 0.9,
            cache_threshold: 0.9,
            max_rounds: 3,
            relax_step: 0.1,
            min_expansion_threshold: 0.05,
            t_max: 5,
            candidates: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusteringConfig {
    /// 0 selects the median pairwise distance.
    pub bandwidth: f64,
    pub alpha: f64,
    pub beta: f64,
    /// 0 cuts at the selected epsilon.
    pub cut: f64,
}

impl Default for ClusteringConfig {
    fn default() -> Self {
        Self { bandwidth: 0.0, alpha: 5.0, beta: 0.5, cut: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub embedding_dim: usize,
    pub key_dim: usize,
    pub literal_attention: bool,
    pub hidden: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub output_gate: OutputGate,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embedding_dim: 32,
            key_dim: 32,
            literal_attention: false,
            hidden: 32,
            heads: 4,
            head_dim: 8,
            output_gate: OutputGate::Printed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub train_fraction: f64,
    pub ner_epochs: usize,
    pub ner_lr: f64,
    pub ranker_epochs: usize,
    pub ranker_lr: f64,
    /// 0 disables gradient clipping.
    pub clip_norm: f64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self { train_fraction: 0.8, ner_epochs: 300, ner_lr: 0.5, ranker_epochs: 60, ranker_lr: 0.01, clip_norm: 5.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CacheConfig {
    pub capacity: usize,
    /// Persistence file loaded before and written after a run; empty for none.
    pub path: String,
}

impl Default for CacheConfig {
    fn default() -> Self {
        Self { capacity: crate::cache::DEFAULT_CAPACITY, path: String::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub workers: usize,
    pub window_s: f64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self { workers: 1, window_s: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: Paths,
    pub pipeline: PipelineConfig,
    pub clustering: ClusteringConfig,
    pub model: ModelConfig,
    pub training: TrainingConfig,
    pub cache: CacheConfig,
    pub bench: BenchConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            paths: Paths::default(),
            pipeline: PipelineConfig::default(),
            clustering: ClusteringConfig::default(),
            model: ModelConfig::default(),
            training: TrainingConfig::default(),
            cache: CacheConfig::default(),
            bench: BenchConfig::default(),
        }
    }
}

fn flatten(prefix: &str, t: &toml::Table, out: &mut BTreeSet<String>) {
    for (k, v) in t {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            toml::Value::Table(inner) => flatten(&key, inner, out),
            _ => {
                out.insert(key);
            }
        }
    }
}

fn known_keys() -> BTreeSet<String> {
    let t = toml::Table::try_from(RunConfig::default()).expect("defaults serialize");
    let mut out = BTreeSet::new();
    flatten("", &t, &mut out);
    out
}

impl RunConfig {
    pub fn parse(raw: &str) -> Result<Self> {
        let table: toml::Table = raw.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let mut given = BTreeSet::new();
        flatten("", &table, &mut given);
        let known = known_keys();
        if let Some(bad) = given.iter().find(|k| !known.contains(*k)) {
            return Err(Error::Config(format!("unknown key `{bad}`")));
        }
        let cfg: RunConfig = table.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&raw)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| -> Result<()> {
            if v > 0.0 && v <= 1.0 {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must lie in (0, 1], got {v}")))
            }
        };
        let positive = |name: &str, v: f64| -> Result<()> {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be positive, got {v}")))
            }
        };
        let at_least_one = |name: &str, v: usize| -> Result<()> {
            if v >= 1 {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be at least 1")))
            }
        };
        let p = &self.pipeline;
        unit("pipeline.expansion_threshold", p.expansion_threshold)?;
        unit("pipeline.threshold", p.threshold)?;
        unit("pipeline.cache_threshold", p.cache_threshold)?;
        unit("pipeline.min_expansion_threshold", p.min_expansion_threshold)?;
        if !(p.relax_step >= 0.0) {
            return Err(Error::Config("pipeline.relax_step must be non-negative".into()));
        }
        at_least_one("pipeline.max_rounds", p.max_rounds)?;
        at_least_one("pipeline.t_max", p.t_max)?;
        at_least_one("pipeline.candidates", p.candidates)?;
        let c = &self.clustering;
        if !(c.bandwidth >= 0.0 && c.cut >= 0.0) {
            return Err(Error::Config("clustering.bandwidth and clustering.cut must be non-negative".into()));
        }
        positive("clustering.alpha", c.alpha)?;
        if !(c.beta > 0.0 && c.beta < 1.0) {
            return Err(Error::Config(format!("clustering.beta must lie in (0, 1), got {}", c.beta)));
        }
        let m = &self.model;
        for (name, v) in [
            ("model.embedding_dim", m.embedding_dim),
            ("model.key_dim", m.key_dim),
            ("model.hidden", m.hidden),
            ("model.heads", m.heads),
            ("model.head_dim", m.head_dim),
        ] {
            at_least_one(name, v)?;
        }
        let t = &self.training;
        if !(t.train_fraction > 0.0 && t.train_fraction < 1.0) {
            return Err(Error::Config(format!("training.train_fraction must lie in (0, 1), got {}", t.train_fraction)));
        }
        positive("training.ner_lr", t.ner_lr)?;
        positive("training.ranker_lr", t.ranker_lr)?;
        if !(t.clip_norm >= 0.0) {
            return Err(Error::Config("training.clip_norm must be non-negative".into()));
        }
        at_least_one("cache.capacity", self.cache.capacity)?;
        at_least_one("bench.workers", self.bench.workers)?;
        positive("bench.window_s", self.bench.window_s)?;
        Ok(())
    }
}

/// Reads `path`, or returns `bundled` when the path is empty.
pub fn read_or(path: &str, bundled: &str) -> Result<String> {
    if path.is_empty() {
        Ok(bundled.to_string())
    } else {
        std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {path}: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_defaults() {
        let c = RunConfig::parse("").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.pipeline.threshold, 0.9);
    }

    #[test]
    fn passthrough_and_unknown_keys() {
        let c = RunConfig::parse("clustering.alpha = 4.5\n[model]\noutput_gate = \"Standard\"\n").unwrap();
        assert_eq!(c.clustering.alpha, 4.5);
        assert_eq!(c.model.output_gate, OutputGate::Standard);
        let err = RunConfig::parse("unknown.key = 1\n").unwrap_err();
        assert!(err.to_string().contains("unknown.key"), "{err}");
        let err = RunConfig::parse("[pipeline]\nthreshhold = 0.5\n").unwrap_err();
        assert!(err.to_string().contains("pipeline.threshhold"), "{err}");
        assert!(RunConfig::parse("seed = \"x\"\n").is_err());
        assert!(RunConfig::parse("pipeline.threshold = 1.5\n").is_err());
    }

    #[test]
    fn round_trip() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::parse(&c.to_toml()).unwrap(), c);
    }
}
