//! End-to-end pipeline: corpus ingestion, clustering, feature store, model
//! training, query answering and the replay benchmark.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::Mutex;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cache::{
    cosine_similarity, similarity_loop, AnswerPipeline, CacheStore, LoopConfig, LoopOutcome, PipelineAnswer,
    SharedCache,
};
use crate::clustering::{ek_optics, silhouette, EkClustering, EkParams, PointSet, StructuredRecord};
use crate::config::{read_or, Paths, RunConfig};
use crate::corpus::{split_queries, Corpus, QueryRecord};
use crate::encoder::{
    disambiguate, parse_ner_fixture, EncoderConfig, Encoder, EntityResolvedQuery, EntityTag, FitReport,
    LabeledSentence, TagSequence,
};
use crate::error::{Error, Result, StageExt};
use crate::expansion::{expand_query, LexicalGraph};
use crate::features::{dense_width, CorpusStats, FeatureExtractor};
use crate::fixtures;
use crate::intent::{
    detect_intent, extract_intent_keywords, generate_rules, identify_sentence_type, parse_context_table,
    FuzzyRulebook, IntentDecision, IntentTimings, KeywordTables, RuleConfig,
};
use crate::metrics::{self, ner_metrics, NerScores, RunLog, StageTimings, VariantLog};
use crate::params::ParamFile;
use crate::parser::{porter, ParsedQuery, QueryParser};
use crate::ranker::{Ranker, RankerConfig, TrainConfig, TrainReport, TrainingExample};

/// Parser tables, taxonomy, keyword tables and NER fixtures.
#[derive(Debug, Clone)]
pub struct Resources {
    pub parser: QueryParser,
    pub graph: LexicalGraph,
    pub tables: KeywordTables,
    pub rule_config: RuleConfig,
    pub ner_train: Vec<LabeledSentence>,
    pub ner_eval: Vec<LabeledSentence>,
}

impl Resources {
    pub fn load(p: &Paths) -> Result<Self> {
        let parser = QueryParser::new(
            &read_or(&p.stopwords, fixtures::STOPWORDS)?,
            &read_or(&p.contractions, fixtures::CONTRACTIONS)?,
            &read_or(&p.abbreviations, fixtures::ABBREVIATIONS)?,
            &read_or(&p.pos_lexicon, fixtures::POS_LEXICON)?,
        )?;
        let graph = LexicalGraph::parse(&read_or(&p.taxonomy, fixtures::TAXONOMY)?)?;
        let tables = KeywordTables::parse(
            &read_or(&p.intent_informational, fixtures::INTENT_INFORMATIONAL)?,
            &read_or(&p.intent_navigational, fixtures::INTENT_NAVIGATIONAL)?,
            &read_or(&p.intent_transactional, fixtures::INTENT_TRANSACTIONAL)?,
        )?;
        let rule_config = RuleConfig {
            context: parse_context_table(&read_or(&p.intent_context, fixtures::INTENT_CONTEXT)?)?,
            ..RuleConfig::default()
        };
        let ner_train = parse_ner_fixture(&read_or(&p.ner_training, fixtures::NER_TRAIN)?)?;
        let ner_eval = parse_ner_fixture(fixtures::NER_EVAL)?;
        Ok(Self { parser, graph, tables, rule_config, ner_train, ner_eval })
    }
}

/// The corpus named by `corpus_dir`, or the bundled sample.
pub fn load_corpus(p: &Paths) -> Result<Corpus> {
    if p.corpus_dir.is_empty() {
        return Corpus::from_sources(fixtures::MINI_CISI_ALL, fixtures::MINI_CISI_QRY, fixtures::MINI_CISI_REL);
    }
    let dir = Path::new(&p.corpus_dir);
    let read = |name: &str| {
        let path = dir.join(name);
        std::fs::read_to_string(&path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))
    };
    Corpus::from_sources(&read("CISI.ALL")?, &read("CISI.QRY")?, &read("CISI.REL")?)
}

/// Everything derived from one query at one expansion threshold.
#[derive(Debug, Clone)]
pub struct QueryAnalysis {
    pub parsed: ParsedQuery,
    pub tags: TagSequence,
    pub resolved: EntityResolvedQuery,
    pub intent: IntentDecision,
    /// Stems of the query and its expansion.
    pub stems: Vec<String>,
    pub embedding: Vec<f64>,
    pub features: Vec<f64>,
    /// Candidate document ids, most similar first.
    pub candidates: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub ner: FitReport,
    pub ranker: TrainReport,
    pub plain: TrainReport,
    pub train_queries: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Attention,
    PlainGru,
}

pub struct Engine {
    pub config: RunConfig,
    pub resources: Resources,
    pub corpus: Corpus,
    pub stats: CorpusStats,
    pub encoder: Encoder,
    pub clustering: EkClustering,
    pub silhouette: Option<f64>,
    pub ct_ms: f64,
    /// Structured store, one record per document in corpus order.
    pub records: Vec<StructuredRecord>,
    pub rulebook: FuzzyRulebook,
    pub ranker: Ranker,
    pub plain: Ranker,
    pub train_split: Vec<QueryRecord>,
    pub test_split: Vec<QueryRecord>,
    /// Per-dimension mean and scale of the store's features; ranker inputs
    /// are standardized with them.
    pub scaler: (Vec<f64>, Vec<f64>),
    doc_keys: Vec<Vec<f64>>,
    doc_pos: BTreeMap<u32, usize>,
    intent_timings: Mutex<IntentTimings>,
    seeds: Seeds,
}

#[derive(Debug, Clone, Copy)]
struct Seeds {
    encoder: u64,
    ranker: u64,
    ranker_train: u64,
    split: u64,
}

impl Seeds {
    fn derive(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self { encoder: rng.gen(), ranker: rng.gen(), ranker_train: rng.gen(), split: rng.gen() }
    }
}

/// Mean and standard deviation per feature; constant features get scale 1.
fn fit_scaler(records: &[StructuredRecord], width: usize) -> (Vec<f64>, Vec<f64>) {
    let n = records.len().max(1) as f64;
    let mut mean = vec![0.0; width];
    for r in records {
        for (m, x) in mean.iter_mut().zip(&r.features) {
            *m += x / n;
        }
    }
    let mut var = vec![0.0; width];
    for r in records {
        for ((v, x), m) in var.iter_mut().zip(&r.features).zip(&mean) {
            *v += (x - m) * (x - m) / n;
        }
    }
    let scale = var.into_iter().map(|v| if v > 1e-12 { v.sqrt() } else { 1.0 }).collect();
    (mean, scale)
}

fn doc_text(title: &str, body: &str) -> String {
    format!("{title}. {body}")
}

impl Engine {
    /// Ingests, clusters and builds the feature store. Models start
    /// untrained.
    pub fn build(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let resources = Resources::load(&config.paths).stage("ingest")?;
        let corpus = load_corpus(&config.paths).stage("ingest")?;
        if corpus.documents.is_empty() || corpus.queries.is_empty() {
            return Err(Error::Validation("corpus needs documents and queries".into()).in_stage("ingest"));
        }
        let seeds = Seeds::derive(config.seed);
        let parsed: Vec<ParsedQuery> =
            corpus.documents.iter().map(|d| resources.parser.parse(&doc_text(&d.title, &d.body))).collect();
        let stem_docs: Vec<Vec<String>> = parsed.iter().map(|p| p.stems.clone()).collect();
        let stats = CorpusStats::from_docs(&stem_docs).stage("features")?;

        let mut vocab: BTreeSet<String> = stem_docs.iter().flatten().cloned().collect();
        vocab.extend(resources.ner_train.iter().flat_map(|s| s.words.iter().map(|w| porter::stem(w))));
        let m = &config.model;
        let enc_cfg = EncoderConfig {
            dim: m.embedding_dim,
            key_dim: m.key_dim,
            literal_attention: m.literal_attention,
            residual: m.embedding_dim == m.key_dim,
            ..EncoderConfig::default()
        };
        let encoder = Encoder::new(vocab, enc_cfg, seeds.encoder).stage("ner")?;
        let dim = encoder.embeddings.dim();
        let doc_keys: Vec<Vec<f64>> = stem_docs
            .iter()
            .map(|s| encoder.embeddings.weighted_mean(&stats.weighted_terms(s)).unwrap_or_else(|| vec![0.0; dim]))
            .collect();

        let start = Instant::now();
        let ps = PointSet::new(doc_keys.clone()).stage("cluster")?;
        let c = &config.clustering;
        let params = EkParams {
            bandwidth: (c.bandwidth > 0.0).then_some(c.bandwidth),
            alpha: c.alpha,
            beta: c.beta,
            cut: (c.cut > 0.0).then_some(c.cut),
        };
        let clustering = ek_optics(&ps, &params).stage("cluster")?;
        let ct_ms = start.elapsed().as_secs_f64() * 1e3;
        let silhouette = silhouette(&ps, &clustering.assignment).ok();

        let n_clusters = clustering.assignment.n_clusters;
        let fx = FeatureExtractor { parser: &resources.parser, graph: &resources.graph, stats: &stats, n_clusters };
        let records: Vec<StructuredRecord> = corpus
            .documents
            .iter()
            .enumerate()
            .map(|(i, d)| {
                let label = clustering.assignment.labels[i];
                StructuredRecord {
                    id: d.id,
                    label,
                    reachability: clustering.ordering.reachability[i],
                    core_distance: clustering.ordering.core_distance[i],
                    features: fx.from_parsed(label, &parsed[i], None).dense(&encoder.embeddings),
                }
            })
            .collect();
        let width = dense_width(dim, n_clusters);
        debug_assert!(records.iter().all(|r| r.features.len() == width));
        let scaler = fit_scaler(&records, width);

        let (train_split, test_split) =
            split_queries(&corpus.queries, config.training.train_fraction, seeds.split).stage("ingest")?;

        let mut rulebook = generate_rules(&resources.rule_config);
        let activations: Vec<f64> = train_split
            .iter()
            .flat_map(|q| {
                let p = resources.parser.parse(&q.text);
                let hits = extract_intent_keywords(&p, &resources.tables);
                rulebook.activations(&hits, identify_sentence_type(&p, &resources.parser))
            })
            .collect();
        rulebook.calibrate(activations);

        let rc = RankerConfig {
            input_dim: width,
            hidden: m.hidden,
            heads: m.heads,
            head_dim: m.head_dim,
            output_gate: m.output_gate,
            attention: true,
        };
        let ranker = Ranker::new(rc.clone(), seeds.ranker).stage("rank")?;
        let plain = Ranker::new(RankerConfig { attention: false, ..rc }, seeds.ranker).stage("rank")?;
        let doc_pos = corpus.documents.iter().enumerate().map(|(i, d)| (d.id, i)).collect();
        Ok(Self {
            config,
            resources,
            corpus,
            stats,
            encoder,
            clustering,
            silhouette,
            ct_ms,
            records,
            rulebook,
            ranker,
            plain,
            train_split,
            test_split,
            scaler,
            doc_keys,
            doc_pos,
            intent_timings: Mutex::new(IntentTimings::default()),
            seeds,
        })
    }

    pub fn feature_width(&self) -> usize {
        self.ranker.config.input_dim
    }

    fn position(&self, id: u32) -> Result<usize> {
        self.doc_pos.get(&id).copied().ok_or_else(|| Error::InvalidInput(format!("unknown document id {id}")))
    }

    fn embed_stems(&self, stems: &[String]) -> Vec<f64> {
        self.encoder
            .embeddings
            .weighted_mean(&self.stats.weighted_terms(stems))
            .unwrap_or_else(|| vec![0.0; self.encoder.embeddings.dim()])
    }

    /// Document ids by cosine to `embedding`; ties keep smaller ids first.
    pub fn nearest_documents(&self, embedding: &[f64], k: usize) -> Vec<(u32, f64)> {
        let mut scored: Vec<(u32, f64)> = self
            .corpus
            .documents
            .iter()
            .zip(&self.doc_keys)
            .map(|(d, key)| (d.id, cosine_similarity(key, embedding).unwrap_or(-1.0)))
            .collect();
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        scored.truncate(k);
        scored
    }

    pub fn analyze(&self, text: &str, expansion_threshold: f64) -> Result<QueryAnalysis> {
        let res = &self.resources;
        let parsed = res.parser.parse(text);
        let expanded = expand_query(&res.graph, &parsed, expansion_threshold).stage("expand")?;
        let tags = self.encoder.tag(&parsed.filtered).stage("ner")?;
        let resolved = disambiguate(&res.graph, &expanded, &tags);
        let intent =
            detect_intent(&parsed, &res.parser, &res.tables, &self.rulebook, self.config.pipeline.t_max).stage("intent")?;
        {
            let mut t = self.intent_timings.lock().unwrap_or_else(|e| e.into_inner());
            t.ft_ms += intent.timings.ft_ms;
            t.dft_ms += intent.timings.dft_ms;
        }

        let mut stems = parsed.stems.clone();
        for a in &expanded.additions {
            stems.extend(a.term.split('_').filter(|w| !w.is_empty()).map(porter::stem));
        }
        let embedding = self.embed_stems(&stems);
        let nearest = self.nearest_documents(&embedding, self.config.pipeline.candidates);
        let label = nearest.first().and_then(|(id, _)| self.doc_pos.get(id)).and_then(|&i| self.records[i].label);
        let synsets: BTreeSet<String> = resolved.entities.iter().filter_map(|e| e.synset.clone()).collect();
        let fx = FeatureExtractor {
            parser: &res.parser,
            graph: &res.graph,
            stats: &self.stats,
            n_clusters: self.clustering.assignment.n_clusters,
        };
        let mut with_expansion = parsed.clone();
        with_expansion.stems = stems.clone();
        let features = fx
            .from_parsed(label, &with_expansion, (!synsets.is_empty()).then_some(synsets))
            .dense(&self.encoder.embeddings);
        Ok(QueryAnalysis {
            parsed,
            tags,
            resolved,
            intent,
            stems,
            embedding,
            features,
            candidates: nearest.into_iter().map(|(id, _)| id).collect(),
        })
    }

    fn model(&self, v: Variant) -> &Ranker {
        match v {
            Variant::Attention => &self.ranker,
            Variant::PlainGru => &self.plain,
        }
    }

    pub fn standardize(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.scaler.0).zip(&self.scaler.1).map(|((v, m), s)| (v - m) / s).collect()
    }

    fn candidate_features(&self, ids: &[u32]) -> Result<Vec<(u32, Vec<f64>)>> {
        ids.iter().map(|&id| Ok((id, self.standardize(&self.records[self.position(id)?].features)))).collect()
    }

    /// Ranking examples for queries with relevance judgements. With
    /// `force_relevant`, judged documents missing from the candidate list are
    /// appended so every example has a positive.
    pub fn ranking_examples(&self, queries: &[QueryRecord], force_relevant: bool) -> Result<Vec<TrainingExample>> {
        let thr = self.config.pipeline.expansion_threshold;
        let mut out = Vec::new();
        for q in queries {
            let Some(relevant) = self.corpus.relevance.relevant(q.id) else { continue };
            let a = self.analyze(&q.text, thr)?;
            let mut ids = a.candidates.clone();
            if force_relevant {
                for &d in relevant {
                    if !ids.contains(&d) {
                        ids.push(d);
                    }
                }
            }
            out.push(TrainingExample {
                query: self.standardize(&a.features),
                intent: a.intent.intent,
                candidates: self.candidate_features(&ids)?,
                relevant: relevant.clone(),
            });
        }
        Ok(out)
    }

    pub fn train(&mut self) -> Result<TrainSummary> {
        let t = self.config.training.clone();
        let ner = self.encoder.fine_tune(&self.resources.ner_train, t.ner_epochs, t.ner_lr).stage("train")?;
        let examples = self.ranking_examples(&self.train_split, true).stage("train")?;
        let cfg = TrainConfig {
            epochs: t.ranker_epochs,
            lr: t.ranker_lr,
            clip_norm: (t.clip_norm > 0.0).then_some(t.clip_norm),
            seed: self.seeds.ranker_train,
        };
        let (ranker, plain) = if examples.is_empty() {
            let none = TrainReport { epochs: 0, steps: 0, final_loss: 0.0 };
            (none.clone(), none)
        } else {
            (self.ranker.train(&examples, &cfg).stage("train")?, self.plain.train(&examples, &cfg).stage("train")?)
        };
        Ok(TrainSummary { ner, ranker, plain, train_queries: examples.len() })
    }

    pub fn save_models(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.encoder.to_params().save(&dir.join("encoder.params"))?;
        self.ranker.to_params(self.config.seed).save(&dir.join("ranker.params"))?;
        self.plain.to_params(self.config.seed).save(&dir.join("plain_gru.params"))?;
        Ok(())
    }

    /// Loads saved models if all files are present; `Ok(false)` otherwise.
    pub fn load_models(&mut self, dir: &Path) -> Result<bool> {
        let files = ["encoder.params", "ranker.params", "plain_gru.params"].map(|f| dir.join(f));
        if !files.iter().all(|f| f.exists()) {
            return Ok(false);
        }
        self.encoder.load_params(&ParamFile::load(&files[0])?)?;
        self.ranker.load_params(&ParamFile::load(&files[1])?)?;
        self.plain.load_params(&ParamFile::load(&files[2])?)?;
        Ok(true)
    }

    pub fn loop_config(&self) -> LoopConfig {
        let p = &self.config.pipeline;
        LoopConfig {
            threshold: p.threshold,
            cache_threshold: p.cache_threshold,
            max_rounds: p.max_rounds,
            expansion_threshold: p.expansion_threshold,
            relax_step: p.relax_step,
            min_expansion_threshold: p.min_expansion_threshold,
        }
    }

    pub fn new_cache(&self) -> Result<SharedCache> {
        let path = &self.config.cache.path;
        let store = if !path.is_empty() && Path::new(path).exists() {
            CacheStore::load(Path::new(path))?
        } else {
            CacheStore::new(self.config.cache.capacity)?
        };
        Ok(SharedCache::new(store))
    }

    pub fn query(&self, cache: &SharedCache, text: &str) -> Result<LoopOutcome> {
        similarity_loop(self, cache, text, &self.loop_config())
    }

    pub fn ner_scores(&self, sentences: &[LabeledSentence]) -> Result<NerScores> {
        let mut pred = Vec::new();
        let mut gold: Vec<Vec<EntityTag>> = Vec::new();
        for s in sentences {
            pred.push(self.encoder.tag(&s.words)?.tags);
            gold.push(s.tags.clone());
        }
        ner_metrics(&pred, &gold)
    }

    /// Test-split MRR and mean ranking latency for one ranker variant.
    pub fn evaluate_variant(&self, v: Variant, examples: &[TrainingExample]) -> Result<VariantLog> {
        let model = self.model(v);
        let mut rr = 0.0;
        let mut latency = 0.0;
        for ex in examples {
            let res = model.process_query(&ex.query, ex.intent, &ex.candidates)?;
            latency += res.latency_ms;
            if let Some(rank) = res.ranked.iter().position(|(id, _)| ex.relevant.contains(id)) {
                rr += 1.0 / (rank + 1) as f64;
            }
        }
        let n = examples.len().max(1) as f64;
        let name = match v {
            Variant::Attention => "mgr_lau",
            Variant::PlainGru => "plain_gru",
        };
        Ok(VariantLog { name: name.into(), mrr: rr / n, ql_mean_ms: latency / n })
    }

    fn payload_bytes(&self, ids: &[u32]) -> u64 {
        ids.iter()
            .take(10)
            .filter_map(|id| self.doc_pos.get(id))
            .map(|&i| {
                let d = &self.corpus.documents[i];
                (d.title.len() + d.body.len()) as u64
            })
            .sum()
    }

    /// Replays the test split with every query submitted twice in a row.
    pub fn bench(&self) -> Result<RunLog> {
        *self.intent_timings.lock().unwrap_or_else(|e| e.into_inner()) = IntentTimings::default();
        let cache = self.new_cache()?;
        let run_start = Instant::now();
        let workers = self.config.bench.workers.max(1);
        let queries = &self.test_split;
        let chunk = queries.len().div_ceil(workers).max(1);
        let run = |w: usize, part: &[QueryRecord]| -> Result<Vec<metrics::QueryRecord>> {
            let mut out = Vec::with_capacity(part.len() * 2);
            for q in part {
                for _ in 0..2 {
                    let start = Instant::now();
                    let o = self.query(&cache, &q.text).stage("query")?;
                    let latency_ms = start.elapsed().as_secs_f64() * 1e3;
                    let top = o.result_ids.first().copied();
                    out.push(metrics::QueryRecord {
                        query_id: q.id,
                        worker: w,
                        start_ms: (start - run_start).as_secs_f64() * 1e3,
                        latency_ms,
                        hit: o.pipeline_runs == 0,
                        pipeline_runs: o.pipeline_runs,
                        similarity: o.similarity,
                        below_threshold: o.below_threshold,
                        intent: o.intent,
                        bytes_returned: self.payload_bytes(&o.result_ids),
                        top_relevant: self
                            .corpus
                            .relevance
                            .relevant(q.id)
                            .map(|rel| top.is_some_and(|t| rel.contains(&t))),
                        result_ids: o.result_ids,
                    });
                }
            }
            Ok(out)
        };
        let records: Vec<metrics::QueryRecord> = if workers == 1 {
            run(0, queries)?
        } else {
            std::thread::scope(|s| {
                let handles: Vec<_> =
                    queries.chunks(chunk).enumerate().map(|(w, part)| s.spawn(move || run(w, part))).collect();
                let mut all = Vec::new();
                for h in handles {
                    all.extend(h.join().map_err(|_| Error::Validation("bench worker panicked".into()))??);
                }
                Ok::<_, Error>(all)
            })?
        };
        let stats = cache.stats();
        let it = self.intent_timings.lock().unwrap_or_else(|e| e.into_inner()).clone();
        let test_examples = self.ranking_examples(&self.test_split, false)?;
        let variants = vec![
            self.evaluate_variant(Variant::Attention, &test_examples)?,
            self.evaluate_variant(Variant::PlainGru, &test_examples)?,
        ];
        let path = &self.config.cache.path;
        if !path.is_empty() {
            cache.snapshot().save(Path::new(path))?;
        }
        Ok(RunLog {
            seed: self.config.seed,
            records,
            timings: StageTimings {
                ct_ms: self.ct_ms,
                rgt_ms: self.rulebook.rgt_ms,
                ft_ms: it.ft_ms,
                dft_ms: it.dft_ms,
                cuo_ms: stats.cuo_ms,
            },
            silhouette: self.silhouette,
            ner: Some(self.ner_scores(&self.resources.ner_eval)?),
            variants,
            peak_memory_mb: metrics::peak_memory_mb(),
        })
    }
}

impl AnswerPipeline for Engine {
    fn cache_key(&self, query: &str) -> Result<Vec<f64>> {
        Ok(self.embed_stems(&self.resources.parser.parse(query).stems))
    }

    fn answer(&self, query: &str, expansion_threshold: f64) -> Result<PipelineAnswer> {
        let a = self.analyze(query, expansion_threshold)?;
        let cands = self.candidate_features(&a.candidates)?;
        let res = self.ranker.process_query(&self.standardize(&a.features), a.intent.intent, &cands).stage("rank")?;
        Ok(PipelineAnswer { intent: a.intent.intent, ranked: res.ranked, query_embedding: a.embedding })
    }

    fn representative(&self, id: u32) -> Result<Vec<f64>> {
        Ok(self.doc_keys[self.position(id)?].clone())
    }
}
