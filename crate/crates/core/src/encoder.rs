//! Entity encoder: embedding lookup, spectrally normalized self-attention,
//! a pooled BIO tagging head, and gloss-overlap disambiguation.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expansion::{ExpandedQuery, LexicalGraph};
use crate::linalg::{self, softmax, softmax_rows, spectral_norm, Matrix};
use crate::params::ParamFile;
use crate::parser::porter;

/// Relative tolerance of the power iteration used by [`unispec_init`].
pub const SPECTRAL_TOL: f64 = 1e-8;
const SPECTRAL_MAX_ITER: usize = 200_000;

/// Uniform draw on `(a, b)` scaled by its largest singular value.
pub fn unispec_init(rows: usize, cols: usize, a: f64, b: f64, seed: u64) -> Result<Matrix> {
    if !(a < b) {
        return Err(Error::InvalidInput(format!("uniform bounds need a < b, got ({a}, {b})")));
    }
    if rows == 0 || cols == 0 {
        return Err(Error::InvalidInput(format!("matrix shape {rows}x{cols} must be at least 1x1")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..rows * cols).map(|_| rng.gen_range(a..b)).collect();
    unispec_normalize(Matrix::from_vec(rows, cols, data)?)
}

/// Divides `w` by its spectral norm.
pub fn unispec_normalize(mut w: Matrix) -> Result<Matrix> {
    let sigma = spectral_norm(&w, SPECTRAL_TOL, SPECTRAL_MAX_ITER);
    if sigma == 0.0 {
        return Err(Error::ZeroSpectralNorm);
    }
    w.scale(1.0 / sigma);
    Ok(w)
}

/// Embedding rows keyed by stem; row 0 is reserved for unknown terms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingTable {
    vocab: BTreeMap<String, usize>,
    matrix: Matrix,
}

impl EmbeddingTable {
    pub const OOV: usize = 0;

    pub fn new<I, S>(terms: I, dim: usize, a: f64, b: f64, seed: u64) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut vocab = BTreeMap::new();
        for t in terms {
            let next = vocab.len() + 1;
            vocab.entry(t.into()).or_insert(next);
        }
        let matrix = unispec_init(vocab.len() + 1, dim, a, b, seed)?;
        Ok(Self { vocab, matrix })
    }

    pub fn from_parts(vocab: BTreeMap<String, usize>, matrix: Matrix) -> Result<Self> {
        let mut rows: Vec<usize> = vocab.values().copied().collect();
        rows.sort_unstable();
        rows.dedup();
        if rows.len() != vocab.len() || rows.iter().any(|&r| r == Self::OOV || r >= matrix.rows()) {
            return Err(Error::Validation("vocabulary rows must be distinct, non-zero and in range".into()));
        }
        if !matrix.is_finite() {
            return Err(Error::NonFinite("embedding matrix".into()));
        }
        Ok(Self { vocab, matrix })
    }

    pub fn dim(&self) -> usize {
        self.matrix.cols()
    }

    pub fn len(&self) -> usize {
        self.vocab.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vocab.is_empty()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.matrix
    }

    pub fn vocab(&self) -> &BTreeMap<String, usize> {
        &self.vocab
    }

    pub fn row_index(&self, term: &str) -> usize {
        self.vocab.get(term).copied().unwrap_or(Self::OOV)
    }

    pub fn row(&self, term: &str) -> &[f64] {
        self.matrix.row(self.row_index(term))
    }

    /// One row per term, in order.
    pub fn embed_terms(&self, terms: &[String]) -> Matrix {
        let mut out = Matrix::zeros(terms.len(), self.dim());
        for (i, t) in terms.iter().enumerate() {
            out.row_mut(i).copy_from_slice(self.row(t));
        }
        out
    }

    /// Rows for the base query's filtered tokens, looked up by stem.
    pub fn embed(&self, q: &ExpandedQuery) -> Matrix {
        self.embed_terms(&q.base.stems)
    }

    /// Weighted mean of term rows. Falls back to uniform weights when every
    /// weight is zero; returns `None` for an empty term list.
    pub fn weighted_mean(&self, terms: &[(String, f64)]) -> Option<Vec<f64>> {
        if terms.is_empty() {
            return None;
        }
        let total: f64 = terms.iter().map(|(_, w)| w).sum();
        let uniform = total <= 0.0;
        let mut out = vec![0.0; self.dim()];
        for (t, w) in terms {
            let w = if uniform { 1.0 } else { *w };
            for (o, x) in out.iter_mut().zip(self.row(t)) {
                *o += w * x;
            }
        }
        let denom = if uniform { terms.len() as f64 } else { total };
        out.iter_mut().for_each(|x| *x /= denom);
        Some(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionParams {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    /// Apply the softmax after multiplying by `V` instead of before.
    pub literal: bool,
}

impl AttentionParams {
    pub fn init(dim: usize, key_dim: usize, a: f64, b: f64, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self {
            w_q: unispec_init(dim, key_dim, a, b, rng.gen())?,
            w_k: unispec_init(dim, key_dim, a, b, rng.gen())?,
            w_v: unispec_init(dim, key_dim, a, b, rng.gen())?,
            literal: false,
        })
    }

    pub fn key_dim(&self) -> usize {
        self.w_k.cols()
    }
}

/// Attention weights `rowsoftmax(Q Kᵀ / √d_K)`.
pub fn attention_weights(q: &Matrix, k: &Matrix) -> Matrix {
    let mut s = q.matmul(&k.transpose());
    s.scale(1.0 / (k.cols() as f64).sqrt());
    softmax_rows(&s)
}

pub fn self_attention(params: &AttentionParams, x: &Matrix) -> Result<Matrix> {
    if x.rows() == 0 {
        return Err(Error::InvalidInput("self-attention needs at least one token".into()));
    }
    if !x.is_finite() {
        return Err(Error::NonFinite("attention input".into()));
    }
    let q = x.matmul(&params.w_q);
    let k = x.matmul(&params.w_k);
    let v = x.matmul(&params.w_v);
    let out = if params.literal {
        let mut s = q.matmul(&k.transpose()).matmul(&v);
        s.scale(1.0 / (params.key_dim() as f64).sqrt());
        softmax_rows(&s)
    } else {
        attention_weights(&q, &k).matmul(&v)
    };
    if !out.is_finite() {
        return Err(Error::NonFinite("attention output".into()));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum EntityTag {
    O,
    BEnt,
    IEnt,
}

impl EntityTag {
    /// Index order doubles as the argmax tie-break: O, then B-ENT, then I-ENT.
    pub const ALL: [EntityTag; 3] = [EntityTag::O, EntityTag::BEnt, EntityTag::IEnt];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            EntityTag::O => "O",
            EntityTag::BEnt => "B-ENT",
            EntityTag::IEnt => "I-ENT",
        }
    }
}

impl std::str::FromStr for EntityTag {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "O" => Ok(EntityTag::O),
            "B-ENT" => Ok(EntityTag::BEnt),
            "I-ENT" => Ok(EntityTag::IEnt),
            other => Err(Error::InvalidInput(format!("unknown entity tag `{other}`"))),
        }
    }
}

/// Rewrites any I-ENT that starts a sequence or follows O as B-ENT.
pub fn repair_bio(tags: &mut [EntityTag]) {
    let mut prev = EntityTag::O;
    for t in tags.iter_mut() {
        if *t == EntityTag::IEnt && prev == EntityTag::O {
            *t = EntityTag::BEnt;
        }
        prev = *t;
    }
}

pub fn is_valid_bio(tags: &[EntityTag]) -> bool {
    let mut prev = EntityTag::O;
    for &t in tags {
        if t == EntityTag::IEnt && prev == EntityTag::O {
            return false;
        }
        prev = t;
    }
    true
}

/// Entity spans `[start, end)` of a BIO sequence.
pub fn spans(tags: &[EntityTag]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, &t) in tags.iter().enumerate() {
        match t {
            EntityTag::BEnt => {
                if let Some(s) = start.take() {
                    out.push((s, i));
                }
                start = Some(i);
            }
            EntityTag::IEnt => {
                if start.is_none() {
                    start = Some(i);
                }
            }
            EntityTag::O => {
                if let Some(s) = start.take() {
                    out.push((s, i));
                }
            }
        }
    }
    if let Some(s) = start {
        out.push((s, tags.len()));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TagSequence {
    pub tokens: Vec<String>,
    pub tags: Vec<EntityTag>,
    pub scores: Vec<[f64; 3]>,
}

/// Linear head over `[token ; sequence mean]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TagHead {
    pub w: Matrix,
    pub b: Vec<f64>,
}

impl TagHead {
    pub fn zeros(key_dim: usize) -> Self {
        Self { w: Matrix::zeros(3, 2 * key_dim), b: vec![0.0; 3] }
    }

    pub fn input_dim(&self) -> usize {
        self.w.cols()
    }

    fn logits(&self, x: &[f64]) -> [f64; 3] {
        let mut out = [0.0; 3];
        for (c, o) in out.iter_mut().enumerate() {
            *o = linalg::dot(self.w.row(c), x) + self.b[c];
        }
        out
    }

    pub fn probabilities(&self, x: &[f64]) -> [f64; 3] {
        let p = softmax(&self.logits(x));
        [p[0], p[1], p[2]]
    }
}

/// Per-token concatenation of the token vector and the sequence mean.
pub fn pool(h: &Matrix) -> Matrix {
    let (n, k) = (h.rows(), h.cols());
    let mut mean = vec![0.0; k];
    for i in 0..n {
        for (m, x) in mean.iter_mut().zip(h.row(i)) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n.max(1) as f64);
    let mut out = Matrix::zeros(n, 2 * k);
    for i in 0..n {
        let row = out.row_mut(i);
        row[..k].copy_from_slice(h.row(i));
        row[k..].copy_from_slice(&mean);
    }
    out
}

fn argmax3(p: &[f64; 3]) -> EntityTag {
    let mut best = 0;
    for c in 1..3 {
        if p[c] > p[best] {
            best = c;
        }
    }
    EntityTag::ALL[best]
}

pub fn pool_and_tag(head: &TagHead, h: &Matrix, tokens: &[String]) -> Result<TagSequence> {
    if h.rows() == 0 {
        return Err(Error::InvalidInput("tagging needs at least one token".into()));
    }
    if tokens.len() != h.rows() {
        return Err(Error::InvalidInput(format!("{} tokens for {} hidden rows", tokens.len(), h.rows())));
    }
    if 2 * h.cols() != head.input_dim() {
        return Err(Error::InvalidInput("tagging head width does not match hidden width".into()));
    }
    let pooled = pool(h);
    let scores: Vec<[f64; 3]> = (0..pooled.rows()).map(|i| head.probabilities(pooled.row(i))).collect();
    let mut tags: Vec<EntityTag> = scores.iter().map(argmax3).collect();
    repair_bio(&mut tags);
    Ok(TagSequence { tokens: tokens.to_vec(), tags, scores })
}

/// Pooled token features with their gold tags.
#[derive(Debug, Clone)]
pub struct HeadExample {
    pub features: Matrix,
    pub tags: Vec<EntityTag>,
}

/// Mean token cross-entropy of one example, with gradients.
pub fn head_loss_and_grad(head: &TagHead, ex: &HeadExample) -> (f64, TagHead) {
    let n = ex.tags.len();
    let mut grad = TagHead::zeros(head.input_dim() / 2);
    let mut loss = 0.0;
    for (i, &gold) in ex.tags.iter().enumerate() {
        let x = ex.features.row(i);
        let p = head.probabilities(x);
        loss -= p[gold.index()].ln();
        for c in 0..3 {
            let d = (p[c] - if c == gold.index() { 1.0 } else { 0.0 }) / n as f64;
            grad.b[c] += d;
            for (g, xi) in grad.w.row_mut(c).iter_mut().zip(x) {
                *g += d * xi;
            }
        }
    }
    (loss / n as f64, grad)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub epochs: usize,
    pub final_loss: f64,
}

/// Per-sentence gradient descent on the head; attention stays frozen.
pub fn fine_tune(head: &TagHead, examples: &[HeadExample], epochs: usize, lr: f64) -> Result<(TagHead, FitReport)> {
    if examples.is_empty() {
        return Err(Error::InvalidInput("fine-tuning needs at least one sentence".into()));
    }
    if !(lr > 0.0) {
        return Err(Error::InvalidInput(format!("learning rate must be positive, got {lr}")));
    }
    let mut head = head.clone();
    let mut final_loss = f64::NAN;
    for epoch in 0..epochs {
        let mut total = 0.0;
        for (s, ex) in examples.iter().enumerate() {
            let (loss, grad) = head_loss_and_grad(&head, ex);
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("tagging loss at epoch {epoch}, sentence {s}: {loss}")));
            }
            total += loss;
            head.w.sub_scaled(&grad.w, lr);
            for (b, g) in head.b.iter_mut().zip(&grad.b) {
                *b -= lr * g;
            }
        }
        final_loss = total / examples.len() as f64;
    }
    Ok((head, FitReport { epochs, final_loss }))
}

/// One sentence of `word/TAG` tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSentence {
    pub words: Vec<String>,
    pub tags: Vec<EntityTag>,
}

/// Parses one sentence per line; blank lines and `#` comments are skipped.
pub fn parse_ner_fixture(raw: &str) -> Result<Vec<LabeledSentence>> {
    let mut out = Vec::new();
    for (i, line) in raw.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut s = LabeledSentence { words: Vec::new(), tags: Vec::new() };
        for tok in line.split_whitespace() {
            let (w, t) = tok
                .rsplit_once('/')
                .ok_or_else(|| Error::parse(i + 1, format!("token `{tok}` is not word/TAG")))?;
            let tag = t.parse::<EntityTag>().map_err(|e| Error::parse(i + 1, e.to_string()))?;
            s.words.push(w.to_lowercase());
            s.tags.push(tag);
        }
        if !is_valid_bio(&s.tags) {
            return Err(Error::parse(i + 1, "I-ENT without a preceding entity tag"));
        }
        out.push(s);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub dim: usize,
    pub key_dim: usize,
    pub init_low: f64,
    pub init_high: f64,
    pub literal_attention: bool,
    /// Add the embeddings back onto the attention output before tagging.
    pub residual: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { dim: 32, key_dim: 32, init_low: -0.5, init_high: 0.5, literal_attention: false, residual: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub seed: u64,
    pub embeddings: EmbeddingTable,
    pub attention: AttentionParams,
    pub head: TagHead,
}

impl Encoder {
    pub fn new<I, S>(vocab: I, config: EncoderConfig, seed: u64) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        if config.residual && config.dim != config.key_dim {
            return Err(Error::Config("residual encoder needs dim == key_dim".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let embeddings = EmbeddingTable::new(vocab, config.dim, config.init_low, config.init_high, rng.gen())?;
        let mut attention =
            AttentionParams::init(config.dim, config.key_dim, config.init_low, config.init_high, rng.gen())?;
        attention.literal = config.literal_attention;
        let head = TagHead::zeros(config.key_dim);
        Ok(Self { config, seed, embeddings, attention, head })
    }

    /// Attention states for a stem sequence.
    pub fn hidden(&self, stems: &[String]) -> Result<Matrix> {
        let x = self.embeddings.embed_terms(stems);
        let mut h = self_attention(&self.attention, &x)?;
        if self.config.residual {
            for (o, xi) in h.data_mut().iter_mut().zip(x.data()) {
                *o += xi;
            }
        }
        Ok(h)
    }

    /// Tags surface tokens, looking them up by stem. Empty input yields an
    /// empty sequence.
    pub fn tag(&self, tokens: &[String]) -> Result<TagSequence> {
        if tokens.is_empty() {
            return Ok(TagSequence { tokens: Vec::new(), tags: Vec::new(), scores: Vec::new() });
        }
        let stems: Vec<String> = tokens.iter().map(|t| porter::stem(t)).collect();
        pool_and_tag(&self.head, &self.hidden(&stems)?, tokens)
    }

    pub fn head_examples(&self, sentences: &[LabeledSentence]) -> Result<Vec<HeadExample>> {
        sentences
            .iter()
            .filter(|s| !s.words.is_empty())
            .map(|s| {
                let stems: Vec<String> = s.words.iter().map(|w| porter::stem(w)).collect();
                Ok(HeadExample { features: pool(&self.hidden(&stems)?), tags: s.tags.clone() })
            })
            .collect()
    }

    pub fn fine_tune(&mut self, sentences: &[LabeledSentence], epochs: usize, lr: f64) -> Result<FitReport> {
        let examples = self.head_examples(sentences)?;
        let (head, report) = fine_tune(&self.head, &examples, epochs, lr)?;
        self.head = head;
        Ok(report)
    }

    pub fn to_params(&self) -> ParamFile {
        let mut p = ParamFile::new(self.seed);
        p.push("embeddings", self.embeddings.matrix.clone());
        p.push("attention.w_q", self.attention.w_q.clone());
        p.push("attention.w_k", self.attention.w_k.clone());
        p.push("attention.w_v", self.attention.w_v.clone());
        p.push("head.w", self.head.w.clone());
        p.push("head.b", Matrix::from_vec(1, 3, self.head.b.clone()).expect("3 values"));
        p
    }

    /// Restores weights saved by [`Encoder::to_params`] into an encoder built
    /// over the same vocabulary.
    pub fn load_params(&mut self, p: &ParamFile) -> Result<()> {
        let check = |name: &str, like: &Matrix| -> Result<Matrix> {
            let m = p.get(name)?;
            if m.rows() != like.rows() || m.cols() != like.cols() {
                return Err(Error::Validation(format!("section `{name}` has the wrong shape")));
            }
            Ok(m.clone())
        };
        let emb = check("embeddings", &self.embeddings.matrix)?;
        self.embeddings = EmbeddingTable::from_parts(self.embeddings.vocab.clone(), emb)?;
        self.attention.w_q = check("attention.w_q", &self.attention.w_q)?;
        self.attention.w_k = check("attention.w_k", &self.attention.w_k)?;
        self.attention.w_v = check("attention.w_v", &self.attention.w_v)?;
        self.head.w = check("head.w", &self.head.w)?;
        self.head.b = check("head.b", &Matrix::zeros(1, 3))?.data().to_vec();
        self.seed = p.seed;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolvedEntity {
    /// Token range `[start, end)` in the base query's filtered tokens.
    pub span: (usize, usize),
    pub surface: String,
    pub synset: Option<String>,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntityResolvedQuery {
    pub expanded: ExpandedQuery,
    pub entities: Vec<ResolvedEntity>,
}

fn candidate_senses<'g>(g: &'g LexicalGraph, words: &[String]) -> &'g [String] {
    let joined = words.join("_");
    let senses = g.senses(&joined);
    if !senses.is_empty() || words.len() == 1 {
        return senses;
    }
    words.last().map_or(&[], |w| g.senses(w))
}

/// Picks, for every tagged span, the sense whose gloss shares the most stems
/// with the rest of the query. Ties go to the larger cumulative count, then
/// the smaller id.
pub fn disambiguate(g: &LexicalGraph, q: &ExpandedQuery, tags: &TagSequence) -> EntityResolvedQuery {
    let words = &q.base.filtered;
    let mut entities = Vec::new();
    for (start, end) in spans(&tags.tags) {
        let end = end.min(words.len());
        if start >= end {
            continue;
        }
        let span_words = &words[start..end];
        let context: BTreeSet<String> = words
            .iter()
            .enumerate()
            .filter(|(i, _)| *i < start || *i >= end)
            .map(|(_, w)| w.as_str())
            .chain(q.additions.iter().map(|a| a.term.as_str()))
            .map(porter::stem)
            .collect();
        let mut best: Option<(usize, u64, &str)> = None;
        for sid in candidate_senses(g, span_words) {
            let gloss: BTreeSet<String> = g.gloss_terms(sid).iter().map(|w| porter::stem(w)).collect();
            let overlap = context.intersection(&gloss).count();
            let cum = g.cumulative_count(sid).unwrap_or(0);
            let better = match best {
                None => true,
                Some((o, c, id)) => (overlap, cum) > (o, c) || ((overlap, cum) == (o, c) && sid.as_str() < id),
            };
            if better {
                best = Some((overlap, cum, sid));
            }
        }
        entities.push(ResolvedEntity {
            span: (start, end),
            surface: span_words.join(" "),
            synset: best.map(|(_, _, id)| id.to_string()),
            score: best.map_or(0.0, |(o, _, _)| o as f64),
        });
    }
    EntityResolvedQuery { expanded: q.clone(), entities }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::parser::QueryParser;

    #[test]
    fn unispec_small_cases() {
        let one = unispec_init(1, 1, 0.0, 1.0, 3).unwrap();
        assert!((one[(0, 0)] - 1.0).abs() < 1e-12);
        let d = unispec_normalize(Matrix::from_rows(&[vec![3.0, 0.0], vec![0.0, 4.0]]).unwrap()).unwrap();
        assert!((d[(0, 0)] - 0.75).abs() < 1e-9 && (d[(1, 1)] - 1.0).abs() < 1e-9);
        assert!(matches!(unispec_normalize(Matrix::zeros(2, 2)), Err(Error::ZeroSpectralNorm)));
        assert!(unispec_init(2, 2, 0.5, 0.5, 1).is_err());
    }

    #[test]
    fn embedding_lookup() {
        let t = EmbeddingTable::new(["a", "b", "c"], 4, -0.5, 0.5, 9).unwrap();
        let terms: Vec<String> = ["c", "a", "zzz"].iter().map(|s| s.to_string()).collect();
        let e = t.embed_terms(&terms);
        assert_eq!(e.row(0), t.matrix().row(3));
        assert_eq!(e.row(1), t.matrix().row(1));
        assert_eq!(e.row(2), t.matrix().row(EmbeddingTable::OOV));
        assert_eq!(t.embed_terms(&[]).rows(), 0);
    }

    #[test]
    fn attention_single_and_uniform() {
        let id = Matrix::identity(2);
        let p = AttentionParams { w_q: id.clone(), w_k: id.clone(), w_v: id, literal: false };
        let x = Matrix::from_rows(&[vec![0.3, -0.7]]).unwrap();
        assert_eq!(self_attention(&p, &x).unwrap(), x);

        let z = Matrix::zeros(2, 1);
        let p = AttentionParams {
            w_q: z.clone(),
            w_k: z,
            w_v: Matrix::from_rows(&[vec![1.0], vec![0.0]]).unwrap(),
            literal: false,
        };
        let x = Matrix::from_rows(&[vec![1.0, 5.0], vec![3.0, 5.0]]).unwrap();
        let out = self_attention(&p, &x).unwrap();
        assert!((out[(0, 0)] - 2.0).abs() < 1e-15 && (out[(1, 0)] - 2.0).abs() < 1e-15);
        assert!(self_attention(&p, &Matrix::zeros(0, 2)).is_err());
    }

    #[test]
    fn bio_repair_and_spans() {
        use EntityTag::*;
        let mut t = vec![IEnt, IEnt, O, IEnt, BEnt, BEnt, IEnt];
        repair_bio(&mut t);
        assert_eq!(t, vec![BEnt, IEnt, O, BEnt, BEnt, BEnt, IEnt]);
        assert!(is_valid_bio(&t));
        assert_eq!(spans(&t), vec![(0, 2), (3, 4), (4, 5), (5, 7)]);
    }

    #[test]
    fn zero_head_tags_outside() {
        let h = Matrix::from_rows(&[vec![0.1, 0.2], vec![0.1, 0.2]]).unwrap();
        let pooled = pool(&h);
        assert_eq!(&pooled.row(0)[2..], h.row(0));
        let toks = vec!["a".to_string(), "b".to_string()];
        let ts = pool_and_tag(&TagHead::zeros(2), &h, &toks).unwrap();
        assert_eq!(ts.tags, vec![EntityTag::O, EntityTag::O]);
        assert!((ts.scores[0][1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn zero_epochs_is_identity() {
        let head = TagHead { w: Matrix::from_rows(&[vec![1.0, 2.0], vec![0.0, 1.0], vec![3.0, 0.5]]).unwrap(), b: vec![0.1, 0.2, 0.3] };
        let ex = HeadExample { features: Matrix::from_rows(&[vec![1.0, 1.0]]).unwrap(), tags: vec![EntityTag::BEnt] };
        let (out, _) = fine_tune(&head, &[ex], 0, 0.1).unwrap();
        assert_eq!(out, head);
    }

    #[test]
    fn ner_fixture_format() {
        let s = parse_ner_fixture("# c\nbuy/O apple/B-ENT phones/O\n").unwrap();
        assert_eq!(s[0].words, vec!["buy", "apple", "phones"]);
        assert_eq!(s[0].tags[1], EntityTag::BEnt);
        assert!(matches!(parse_ner_fixture("\nx/O y/I-ENT z\n"), Err(Error::Parse { line: 2, .. })));
        assert!(matches!(parse_ner_fixture("x/O y/I-ENT\n"), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn apple_resolves_by_gloss() {
        let g = LexicalGraph::bundled();
        let p = QueryParser::bundled().parse("buy apple phone");
        let q = ExpandedQuery::unexpanded(p);
        let tags = TagSequence {
            tokens: q.base.filtered.clone(),
            tags: vec![EntityTag::O, EntityTag::BEnt, EntityTag::O],
            scores: vec![[0.0; 3]; 3],
        };
        let r = disambiguate(&g, &q, &tags);
        assert_eq!(r.entities.len(), 1);
        assert_eq!(r.entities[0].synset.as_deref(), Some("apple_company"));
        assert_eq!(r.entities[0].score, 1.0);

        let q = ExpandedQuery::unexpanded(QueryParser::bundled().parse("apple"));
        let tags = TagSequence { tokens: q.base.filtered.clone(), tags: vec![EntityTag::BEnt], scores: vec![[0.0; 3]] };
        let r = disambiguate(&g, &q, &tags);
        // Zero overlap and equal counts: smaller id wins.
        assert_eq!(r.entities[0].synset.as_deref(), Some("apple_company"));
        assert_eq!(r.entities[0].score, 0.0);
    }
}
