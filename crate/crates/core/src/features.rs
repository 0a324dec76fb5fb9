//! Record features: TF-IDF, counts, cluster and POS categories, years, and
//! entity relations, plus the dense layout consumed by the ranker.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::clustering::{read_store, StructuredRecord};
use crate::encoder::EmbeddingTable;
use crate::error::{Error, Result};
use crate::expansion::LexicalGraph;
use crate::parser::{ParsedQuery, PosTag, QueryParser};

/// `tf · ln(N / df)` for every term of `corpus[doc]`.
pub fn tf_idf(corpus: &[Vec<String>], doc: usize) -> Result<BTreeMap<String, f64>> {
    if corpus.is_empty() {
        return Err(Error::InvalidInput("tf-idf needs a non-empty corpus".into()));
    }
    let stats = CorpusStats::from_docs(corpus)?;
    let d = corpus
        .get(doc)
        .ok_or_else(|| Error::InvalidInput(format!("document index {doc} out of range")))?;
    Ok(stats.weights(d))
}

/// Document frequencies of a tokenized corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub n_docs: usize,
    pub df: BTreeMap<String, usize>,
}

impl CorpusStats {
    pub fn from_docs(docs: &[Vec<String>]) -> Result<Self> {
        if docs.is_empty() {
            return Err(Error::InvalidInput("corpus statistics need at least one document".into()));
        }
        let mut df = BTreeMap::new();
        for d in docs {
            for t in d.iter().collect::<BTreeSet<_>>() {
                *df.entry(t.clone()).or_insert(0) += 1;
            }
        }
        Ok(Self { n_docs: docs.len(), df })
    }

    /// `ln(N / df)`; terms never seen in the corpus are treated as if they
    /// occurred once.
    pub fn idf(&self, term: &str) -> f64 {
        let df = self.df.get(term).copied().unwrap_or(1).max(1);
        (self.n_docs as f64 / df as f64).ln()
    }

    pub fn weights(&self, tokens: &[String]) -> BTreeMap<String, f64> {
        let mut tf: BTreeMap<String, usize> = BTreeMap::new();
        for t in tokens {
            *tf.entry(t.clone()).or_insert(0) += 1;
        }
        tf.into_iter().map(|(t, c)| (t.clone(), c as f64 * self.idf(&t))).collect()
    }

    /// Term weights in first-occurrence order, ready for
    /// [`EmbeddingTable::weighted_mean`].
    pub fn weighted_terms(&self, tokens: &[String]) -> Vec<(String, f64)> {
        let w = self.weights(tokens);
        let mut seen = BTreeSet::new();
        tokens
            .iter()
            .filter(|t| seen.insert(t.as_str()))
            .map(|t| (t.clone(), w[t]))
            .collect()
    }
}

pub const YEAR_RANGE: (i32, i32) = (1400, 2100);

/// Four-digit tokens within [`YEAR_RANGE`].
pub fn extract_years(tokens: &[String]) -> Vec<i32> {
    tokens
        .iter()
        .filter(|t| t.len() == 4 && t.bytes().all(|b| b.is_ascii_digit()))
        .filter_map(|t| t.parse::<i32>().ok())
        .filter(|y| (YEAR_RANGE.0..=YEAR_RANGE.1).contains(y))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub tfidf: BTreeMap<String, f64>,
    /// Token count, distinct stem count, character count.
    pub numeric: Vec<f64>,
    /// One slot per cluster plus a trailing noise slot.
    pub cluster_one_hot: Vec<f64>,
    /// Tag fractions in [`PosTag::ALL`] order.
    pub pos_histogram: Vec<f64>,
    pub temporal: Vec<i32>,
    /// Each entity with its mean relation score to the other entities.
    pub entity_links: Vec<(String, f64)>,
}

/// Width of [`FeatureVector::dense`] for an embedding width and cluster count.
pub fn dense_width(embedding_dim: usize, n_clusters: usize) -> usize {
    embedding_dim + 3 + (n_clusters + 1) + PosTag::ALL.len() + 2 + 2
}

impl FeatureVector {
    /// Fixed-width layout: TF-IDF-weighted mean embedding, log counts,
    /// cluster one-hot, POS histogram, year summary, entity summary.
    pub fn dense(&self, table: &EmbeddingTable) -> Vec<f64> {
        let terms: Vec<(String, f64)> = self.tfidf.iter().map(|(t, w)| (t.clone(), *w)).collect();
        let mut out = table.weighted_mean(&terms).unwrap_or_else(|| vec![0.0; table.dim()]);
        out.extend(self.numeric.iter().map(|x| x.ln_1p()));
        out.extend(&self.cluster_one_hot);
        out.extend(&self.pos_histogram);
        let span = (YEAR_RANGE.1 - YEAR_RANGE.0) as f64;
        let mean_year = if self.temporal.is_empty() {
            0.0
        } else {
            self.temporal.iter().map(|&y| (y - YEAR_RANGE.0) as f64 / span).sum::<f64>() / self.temporal.len() as f64
        };
        out.push((self.temporal.len() as f64).ln_1p());
        out.push(mean_year);
        let mean_link = if self.entity_links.is_empty() {
            0.0
        } else {
            self.entity_links.iter().map(|(_, s)| s).sum::<f64>() / self.entity_links.len() as f64
        };
        out.push((self.entity_links.len() as f64).ln_1p());
        out.push(mean_link);
        out
    }
}

pub fn one_hot(label: Option<usize>, n_clusters: usize) -> Vec<f64> {
    let mut v = vec![0.0; n_clusters + 1];
    match label {
        Some(l) if l < n_clusters => v[l] = 1.0,
        _ => v[n_clusters] = 1.0,
    }
    v
}

/// Mean relation score of each synset to the others; 0 when alone. Pairs
/// whose score is undefined count as 0.
pub fn entity_links(g: &LexicalGraph, synsets: &BTreeSet<String>) -> Vec<(String, f64)> {
    synsets
        .iter()
        .map(|a| {
            let others: Vec<f64> =
                synsets.iter().filter(|b| *b != a).map(|b| g.relation_score(a, b).unwrap_or(0.0)).collect();
            let mean = if others.is_empty() { 0.0 } else { others.iter().sum::<f64>() / others.len() as f64 };
            (a.clone(), mean)
        })
        .collect()
}

pub struct FeatureExtractor<'a> {
    pub parser: &'a QueryParser,
    pub graph: &'a LexicalGraph,
    pub stats: &'a CorpusStats,
    pub n_clusters: usize,
}

impl FeatureExtractor<'_> {
    /// Features of parsed text. Entity synsets default to the first sense of
    /// each filtered token.
    pub fn from_parsed(&self, label: Option<usize>, p: &ParsedQuery, entities: Option<BTreeSet<String>>) -> FeatureVector {
        let n = p.tagged.len().max(1) as f64;
        let mut pos_histogram = vec![0.0; PosTag::ALL.len()];
        for t in &p.tagged {
            pos_histogram[t.tag.index()] += 1.0 / n;
        }
        let distinct: BTreeSet<&String> = p.stems.iter().collect();
        let entities = entities.unwrap_or_else(|| {
            p.filtered.iter().filter_map(|w| self.graph.first_sense(w)).map(str::to_string).collect()
        });
        FeatureVector {
            tfidf: self.stats.weights(&p.stems),
            numeric: vec![p.tokens.len() as f64, distinct.len() as f64, p.original.chars().count() as f64],
            cluster_one_hot: one_hot(label, self.n_clusters),
            pos_histogram,
            temporal: extract_years(&p.tokens),
            entity_links: entity_links(self.graph, &entities),
        }
    }

    pub fn extract(&self, record: &StructuredRecord, text: &str) -> FeatureVector {
        self.from_parsed(record.label, &self.parser.parse(text), None)
    }

    /// Features for every record of a serialized store, looking record text
    /// up by id.
    pub fn extract_store(&self, raw: &str, texts: &BTreeMap<u32, String>) -> Result<Vec<FeatureVector>> {
        read_store(raw)?
            .iter()
            .map(|r| {
                let text = texts
                    .get(&r.id)
                    .ok_or_else(|| Error::Validation(format!("store record {} has no source text", r.id)))?;
                Ok(self.extract(r, text))
            })
            .collect()
    }
}
