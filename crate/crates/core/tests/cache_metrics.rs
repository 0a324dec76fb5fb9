use std::io::Write as _;

use proptest::prelude::*;

use semqp::cache::{
    cosine_similarity, similarity_loop, AnswerPipeline, AnswerSource, CacheEntry, CacheStore, LoopConfig,
    PipelineAnswer, SharedCache,
};
use semqp::config::RunConfig;
use semqp::error::Result;
use semqp::intent::Intent;
use semqp::metrics::{
    build_report, hit_rates, pearson, strip_environment, throughput, validate_report, NerScores, QueryRecord, RunLog,
};

fn nonzero(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-4.0f64..4.0, len).prop_filter("nonzero", |v| v.iter().any(|x| x.abs() > 1e-3))
}

fn basis(i: usize, dim: usize) -> Vec<f64> {
    let mut v = vec![0.0; dim];
    v[i] = 1.0;
    v
}

/// Pipeline whose answers come from fixed vectors per id.
struct Fixed {
    key: Vec<f64>,
    query_embedding: Vec<f64>,
    reps: Vec<Vec<f64>>,
}

impl AnswerPipeline for Fixed {
    fn cache_key(&self, _query: &str) -> Result<Vec<f64>> {
        Ok(self.key.clone())
    }

    fn answer(&self, _query: &str, _thr: f64) -> Result<PipelineAnswer> {
        let ranked = (0..self.reps.len() as u32).map(|i| (i, 1.0 / (1.0 + i as f64))).collect();
        Ok(PipelineAnswer { intent: Intent::Navigational, ranked, query_embedding: self.query_embedding.clone() })
    }

    fn representative(&self, id: u32) -> Result<Vec<f64>> {
        Ok(self.reps[id as usize].clone())
    }
}

fn record(id: u32, start_ms: f64, latency_ms: f64, hit: bool, bytes: u64) -> QueryRecord {
    QueryRecord {
        query_id: id,
        worker: 0,
        start_ms,
        latency_ms,
        hit,
        pipeline_runs: usize::from(!hit),
        similarity: 0.5,
        below_threshold: false,
        intent: Intent::Informational,
        result_ids: vec![id],
        bytes_returned: bytes,
        top_relevant: None,
    }
}

proptest! {
    #[test]
    fn cosine_is_symmetric_and_scale_free(a in nonzero(5), b in nonzero(5), s in 0.01f64..100.0) {
        let ab = cosine_similarity(&a, &b).unwrap();
        prop_assert!((ab - cosine_similarity(&b, &a).unwrap()).abs() <= 1e-12);
        let scaled: Vec<f64> = a.iter().map(|x| x * s).collect();
        prop_assert!((ab - cosine_similarity(&scaled, &b).unwrap()).abs() <= 1e-12);
        prop_assert!((-1.0..=1.0).contains(&ab));
    }

    #[test]
    fn hit_and_miss_rates_sum_to_100(lookups in 1u64..10_000, frac in 0.0f64..=1.0) {
        let hits = (lookups as f64 * frac).floor() as u64;
        let (chr, cmr) = hit_rates(hits, lookups).unwrap();
        prop_assert!((chr + cmr - 100.0).abs() <= 1e-9);
        prop_assert!((0.0..=100.0).contains(&chr));
    }

    #[test]
    fn hot_entry_survives_eviction(capacity in 2usize..6, others in 1usize..40) {
        let dim = others + 1;
        let mut store = CacheStore::new(capacity).unwrap();
        let hot = basis(0, dim);
        store.insert(CacheEntry::new(hot.clone(), Intent::Informational, vec![0]).unwrap());
        for i in 1..=others {
            store.insert(CacheEntry::new(basis(i, dim), Intent::Informational, vec![i as u32]).unwrap());
            prop_assert!(store.lookup(&hot, 0.99).unwrap().is_hit());
            prop_assert!(store.len() <= capacity);
        }
        prop_assert!(store.contains_key(&hot));
        let stats = store.stats();
        prop_assert_eq!((stats.lookups, stats.hits), (others as u64, others as u64));
    }

    #[test]
    fn loop_stops_within_max_rounds(max_rounds in 1usize..6, reps in prop::collection::vec(nonzero(3), 1..8), q in nonzero(3), theta in 0.05f64..1.0) {
        let p = Fixed { key: q.clone(), query_embedding: q, reps };
        let cache = SharedCache::new(CacheStore::new(4).unwrap());
        let cfg = LoopConfig { threshold: theta, cache_threshold: 1.0, max_rounds, ..LoopConfig::default() };
        let out = similarity_loop(&p, &cache, "q", &cfg).unwrap();
        prop_assert!(out.pipeline_runs >= 1 && out.pipeline_runs <= max_rounds);
        prop_assert_eq!(out.trace.len(), out.pipeline_runs);
        let best = out.trace.iter().map(|t| t.similarity).fold(f64::NEG_INFINITY, f64::max);
        prop_assert_eq!(out.similarity, best);
        prop_assert_eq!(out.below_threshold, best < theta);
        let mut ids = out.result_ids.clone();
        ids.sort_unstable();
        prop_assert_eq!(ids, (0..p.reps.len() as u32).collect::<Vec<_>>());
    }

    #[test]
    fn f1_lies_between_precision_and_recall(tp in 0usize..50, fp in 0usize..50, fn_ in 0usize..50) {
        let s = NerScores::from_counts(tp, fp, fn_);
        let (lo, hi) = (s.precision.min(s.recall), s.precision.max(s.recall));
        prop_assert!(s.f1 >= lo - 1e-12 && s.f1 <= hi + 1e-12);
        if tp == 0 {
            prop_assert_eq!(s.f1, 0.0);
        }
    }

    #[test]
    fn pearson_ignores_affine_maps(x in prop::collection::vec(-5.0f64..5.0, 3..20), a in 0.1f64..10.0, b in -5.0f64..5.0, flip in any::<bool>()) {
        let y: Vec<f64> = x.iter().enumerate().map(|(i, v)| v * v + i as f64).collect();
        let Ok(r) = pearson(&x, &y) else { return Ok(()) };
        let sign = if flip { -1.0 } else { 1.0 };
        let mapped: Vec<f64> = x.iter().map(|v| sign * a * v + b).collect();
        let r2 = pearson(&mapped, &y).unwrap();
        prop_assert!((r2 - sign * r).abs() <= 1e-9);
        prop_assert!((pearson(&x, &x).unwrap() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn throughput_adds_up(rows in prop::collection::vec((0.0f64..5000.0, 0.0f64..500.0, 0u64..100_000), 1..30), window in 0.25f64..3.0) {
        let log = RunLog {
            records: rows.iter().enumerate().map(|(i, &(s, l, b))| record(i as u32, s, l, false, b)).collect(),
            ..Default::default()
        };
        let buckets = throughput(&log, window).unwrap();
        let total_kbit: f64 = buckets.iter().map(|(_, kbps)| kbps * window).sum();
        let bytes: u64 = rows.iter().map(|r| r.2).sum();
        prop_assert!((total_kbit - bytes as f64 * 8.0 / 1e3).abs() <= 1e-6 * (1.0 + total_kbit));
        prop_assert!(buckets.windows(2).all(|w| w[1].0 > w[0].0));
    }
}

#[test]
fn orthogonal_vocabulary_is_flagged() {
    let p = Fixed { key: basis(0, 4), query_embedding: basis(0, 4), reps: vec![basis(1, 4), basis(2, 4), basis(3, 4)] };
    let cache = SharedCache::new(CacheStore::new(8).unwrap());
    let out = similarity_loop(&p, &cache, "q", &LoopConfig::default()).unwrap();
    assert!(out.below_threshold);
    assert_eq!(out.similarity, 0.0);
    assert_eq!(out.pipeline_runs, 3);
    assert_eq!(out.source, AnswerSource::Pipeline);
    // The best answer is still cached, so asking again hits.
    let again = similarity_loop(&p, &cache, "q", &LoopConfig::default()).unwrap();
    assert_eq!(again.source, AnswerSource::Cache);
    assert_eq!(again.result_ids, out.result_ids);
}

#[test]
fn zero_key_always_misses() {
    let p = Fixed { key: vec![0.0; 3], query_embedding: basis(0, 3), reps: vec![basis(0, 3)] };
    let cache = SharedCache::new(CacheStore::new(8).unwrap());
    for _ in 0..2 {
        assert_eq!(similarity_loop(&p, &cache, "q", &LoopConfig::default()).unwrap().source, AnswerSource::Pipeline);
    }
    assert!(cache.is_empty());
    assert_eq!((cache.stats().lookups, cache.stats().misses), (2, 2));
}

#[test]
fn report_without_lookups_is_an_error() {
    let err = build_report(&RunLog::default(), 1.0).unwrap_err();
    assert!(err.to_string().contains("zero lookups"), "{err}");
}

#[test]
fn report_renders_and_validates() {
    let log = RunLog {
        records: vec![record(1, 0.0, 3.0, false, 400), record(2, 10.0, 0.5, true, 400), record(3, 20.0, 0.4, true, 400)],
        ..Default::default()
    };
    let text = build_report(&log, 1.0).unwrap().render();
    let kv = validate_report(&text).unwrap();
    assert_eq!(kv["queries"], "3");
    assert_eq!(kv["cc"], "undefined");
    let stable = strip_environment(&text);
    assert!(!stable.lines().any(|l| l.starts_with("env.")));
    assert!(stable.contains("chr_percent: 66.666667"));
}

#[test]
fn config_loads_from_file() {
    let mut f = tempfile::NamedTempFile::new().unwrap();
    writeln!(f, "seed = 9\n[pipeline]\nthreshold = 0.7\n[cache]\ncapacity = 16").unwrap();
    let cfg = RunConfig::load(f.path()).unwrap();
    assert_eq!((cfg.seed, cfg.pipeline.threshold, cfg.cache.capacity), (9, 0.7, 16));
    assert_eq!(RunConfig::parse(&cfg.to_toml()).unwrap(), cfg);

    let err = RunConfig::parse("[pipeline]\nthreshhold = 0.7\n").unwrap_err();
    assert!(err.to_string().contains("pipeline.threshhold"), "{err}");
    assert!(RunConfig::parse("[pipeline]\nthreshold = 1.5\n").is_err());
}
