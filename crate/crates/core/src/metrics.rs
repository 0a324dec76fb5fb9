//! Run logs and the metrics report derived from them.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::{spans, EntityTag};
use crate::error::{Error, Result};
use crate::intent::Intent;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub query_id: u32,
    pub worker: usize,
    /// Start offset from the beginning of the run.
    pub start_ms: f64,
    pub latency_ms: f64,
    pub hit: bool,
    pub pipeline_runs: usize,
    pub similarity: f64,
    pub below_threshold: bool,
    pub intent: Intent,
    pub result_ids: Vec<u32>,
    pub bytes_returned: u64,
    /// Whether the top result is relevant, when judgements exist.
    pub top_relevant: Option<bool>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub ct_ms: f64,
    pub rgt_ms: f64,
    pub ft_ms: f64,
    pub dft_ms: f64,
    pub cuo_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantLog {
    pub name: String,
    pub mrr: f64,
    pub ql_mean_ms: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub seed: u64,
    pub records: Vec<QueryRecord>,
    pub timings: StageTimings,
    pub silhouette: Option<f64>,
    pub ner: Option<NerScores>,
    pub variants: Vec<VariantLog>,
    pub peak_memory_mb: Option<f64>,
}

impl RunLog {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(raw: &str) -> Result<Self> {
        Ok(serde_json::from_str(raw)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Per-query rows with a header.
    pub fn per_query_csv(&self) -> String {
        let mut out = String::from("query_id,worker,start_ms,latency_ms,hit,pipeline_runs,similarity,below_threshold,intent,top_result,bytes\n");
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{},{:.3},{:.3},{},{},{:.6},{},{},{},{}",
                r.query_id,
                r.worker,
                r.start_ms,
                r.latency_ms,
                r.hit,
                r.pipeline_runs,
                r.similarity,
                r.below_threshold,
                r.intent.code(),
                r.result_ids.first().map_or_else(String::new, |id| id.to_string()),
                r.bytes_returned
            );
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub mean: f64,
    pub p50: f64,
    pub p95: f64,
}

/// Nearest-rank percentile.
fn percentile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

pub fn latency_stats(latencies: &[f64]) -> LatencyStats {
    let mut s = latencies.to_vec();
    s.sort_by(f64::total_cmp);
    let mean = if s.is_empty() { 0.0 } else { s.iter().sum::<f64>() / s.len() as f64 };
    LatencyStats { mean, p50: percentile(&s, 50.0), p95: percentile(&s, 95.0) }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CacheMetrics {
    pub chr_percent: f64,
    pub cmr_percent: f64,
    pub ql_ms: LatencyStats,
    pub cuo_ms: f64,
}

/// Hit and miss rates from raw counters.
pub fn hit_rates(hits: u64, lookups: u64) -> Result<(f64, f64)> {
    if lookups == 0 {
        return Err(Error::InvalidInput("zero lookups".into()));
    }
    if hits > lookups {
        return Err(Error::InvalidInput(format!("{hits} hits exceed {lookups} lookups")));
    }
    let chr = 100.0 * hits as f64 / lookups as f64;
    Ok((chr, 100.0 - chr))
}

/// One lookup per logged query.
pub fn cache_metrics(log: &RunLog) -> Result<CacheMetrics> {
    let hits = log.records.iter().filter(|r| r.hit).count() as u64;
    let (chr_percent, cmr_percent) = hit_rates(hits, log.records.len() as u64)?;
    let lat: Vec<f64> = log.records.iter().map(|r| r.latency_ms).collect();
    Ok(CacheMetrics { chr_percent, cmr_percent, ql_ms: latency_stats(&lat), cuo_ms: log.timings.cuo_ms })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NerScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl NerScores {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
        Self { precision, recall, f1 }
    }
}

/// Exact span matching over aligned sentences.
pub fn ner_metrics(predicted: &[Vec<EntityTag>], gold: &[Vec<EntityTag>]) -> Result<NerScores> {
    if predicted.len() != gold.len() {
        return Err(Error::InvalidInput(format!("{} predicted sentences for {} gold", predicted.len(), gold.len())));
    }
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (i, (p, g)) in predicted.iter().zip(gold).enumerate() {
        if p.len() != g.len() {
            return Err(Error::InvalidInput(format!("sentence {i}: {} predicted tags for {} tokens", p.len(), g.len())));
        }
        let ps = spans(p);
        let gs = spans(g);
        let hit = ps.iter().filter(|s| gs.contains(s)).count();
        tp += hit;
        fp += ps.len() - hit;
        fn_ += gs.len() - hit;
    }
    Ok(NerScores::from_counts(tp, fp, fn_))
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::InvalidInput("correlation needs two aligned series of length at least 2".into()));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Undefined("correlation of a constant series".into()));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Mean final similarity over logged queries.
pub fn similarity_score(log: &RunLog) -> Result<f64> {
    if log.records.len() < 2 {
        return Err(Error::InvalidInput("similarity score needs at least two queries".into()));
    }
    Ok(log.records.iter().map(|r| r.similarity).sum::<f64>() / log.records.len() as f64)
}

/// Pearson correlation between top-result similarity and its relevance.
pub fn correlation(log: &RunLog) -> Result<f64> {
    let (x, y): (Vec<f64>, Vec<f64>) = log
        .records
        .iter()
        .filter_map(|r| r.top_relevant.map(|rel| (r.similarity, if rel { 1.0 } else { 0.0 })))
        .unzip();
    pearson(&x, &y)
}

/// `(window start s, kbps)` bucketed by completion time.
pub fn throughput(log: &RunLog, window_s: f64) -> Result<Vec<(f64, f64)>> {
    if !(window_s > 0.0) {
        return Err(Error::InvalidInput(format!("window must be positive, got {window_s}")));
    }
    let mut bits: BTreeMap<u64, u64> = BTreeMap::new();
    for r in &log.records {
        let end_s = (r.start_ms + r.latency_ms).max(0.0) / 1e3;
        *bits.entry((end_s / window_s).floor() as u64).or_insert(0) += r.bytes_returned * 8;
    }
    let last = bits.keys().next_back().copied().unwrap_or(0);
    Ok((0..=last)
        .map(|w| (w as f64 * window_s, bits.get(&w).copied().unwrap_or(0) as f64 / 1e3 / window_s))
        .collect())
}

/// Peak resident set size from `/proc`, where available.
pub fn peak_memory_mb() -> Option<f64> {
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    let line = status.lines().find(|l| l.starts_with("VmHWM:"))?;
    let kb: f64 = line.split_whitespace().nth(1)?.parse().ok()?;
    Some(kb / 1024.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub queries: usize,
    pub chr_percent: f64,
    pub cmr_percent: f64,
    pub ql_ms: LatencyStats,
    pub cuo_ms: f64,
    pub throughput_kbps: Vec<(f64, f64)>,
    pub silhouette: Option<f64>,
    pub ct_ms: f64,
    pub rgt_ms: f64,
    pub ft_ms: f64,
    pub dft_ms: f64,
    pub ner: Option<NerScores>,
    pub ss: f64,
    pub cc: Option<f64>,
    pub below_threshold: usize,
    pub variants: Vec<VariantLog>,
    pub memory_mb: Option<f64>,
}

pub const DEFAULT_WINDOW_S: f64 = 1.0;

pub fn build_report(log: &RunLog, window_s: f64) -> Result<MetricsReport> {
    let cm = cache_metrics(log)?;
    Ok(MetricsReport {
        queries: log.records.len(),
        chr_percent: cm.chr_percent,
        cmr_percent: cm.cmr_percent,
        ql_ms: cm.ql_ms,
        cuo_ms: cm.cuo_ms,
        throughput_kbps: throughput(log, window_s)?,
        silhouette: log.silhouette,
        ct_ms: log.timings.ct_ms,
        rgt_ms: log.timings.rgt_ms,
        ft_ms: log.timings.ft_ms,
        dft_ms: log.timings.dft_ms,
        ner: log.ner,
        ss: similarity_score(log).unwrap_or_else(|_| log.records.first().map_or(0.0, |r| r.similarity)),
        cc: correlation(log).ok(),
        below_threshold: log.records.iter().filter(|r| r.below_threshold).count(),
        variants: log.variants.clone(),
        memory_mb: log.peak_memory_mb,
    })
}

/// Prefix of fields whose values depend on the machine and the clock.
pub const ENV_PREFIX: &str = "env.";

pub const REPORT_KEYS: &[&str] = &[
    "queries",
    "chr_percent",
    "cmr_percent",
    "ss",
    "cc",
    "below_threshold",
    "silhouette",
    "ner.precision_percent",
    "ner.recall_percent",
    "ner.f1_percent",
    "env.ql_ms.mean",
    "env.ql_ms.p50",
    "env.ql_ms.p95",
    "env.cuo_ms",
    "env.ct_ms",
    "env.rgt_ms",
    "env.ft_ms",
    "env.dft_ms",
    "env.memory_mb",
    "env.throughput_kbps",
];

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".to_string(), |x| format!("{x:.6}"))
}

impl MetricsReport {
    /// `key: value` lines in a fixed order. Fields under `env.` vary between
    /// machines and runs; everything else is reproducible from the seed.
    pub fn render(&self) -> String {
        let mut o = String::new();
        o.push_str("# ss: mean final cosine similarity between answer and query\n");
        o.push_str("# cc: pearson correlation of top-result similarity with its relevance\n");
        o.push_str("# env.* fields depend on the machine and clock\n");
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(o, "{k}: {v}");
        };
        kv("queries", self.queries.to_string());
        kv("chr_percent", format!("{:.6}", self.chr_percent));
        kv("cmr_percent", format!("{:.6}", self.cmr_percent));
        kv("ss", format!("{:.6}", self.ss));
        kv("cc", opt(self.cc));
        kv("below_threshold", self.below_threshold.to_string());
        kv("silhouette", opt(self.silhouette));
        kv("ner.precision_percent", opt(self.ner.map(|n| 100.0 * n.precision)));
        kv("ner.recall_percent", opt(self.ner.map(|n| 100.0 * n.recall)));
        kv("ner.f1_percent", opt(self.ner.map(|n| 100.0 * n.f1)));
        for v in &self.variants {
            kv(&format!("variant.{}.mrr", v.name), format!("{:.6}", v.mrr));
            kv(&format!("env.variant.{}.ql_ms", v.name), format!("{:.3}", v.ql_mean_ms));
        }
        kv("env.ql_ms.mean", format!("{:.3}", self.ql_ms.mean));
        kv("env.ql_ms.p50", format!("{:.3}", self.ql_ms.p50));
        kv("env.ql_ms.p95", format!("{:.3}", self.ql_ms.p95));
        kv("env.cuo_ms", format!("{:.3}", self.cuo_ms));
        kv("env.ct_ms", format!("{:.3}", self.ct_ms));
        kv("env.rgt_ms", format!("{:.3}", self.rgt_ms));
        kv("env.ft_ms", format!("{:.3}", self.ft_ms));
        kv("env.dft_ms", format!("{:.3}", self.dft_ms));
        kv("env.memory_mb", opt(self.memory_mb));
        let tp: Vec<String> = self.throughput_kbps.iter().map(|(w, k)| format!("{w}s={k:.3}")).collect();
        kv("env.throughput_kbps", tp.join(" "));
        o
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.render())?;
        Ok(())
    }
}

/// Parses a rendered report and checks that every documented key is present
/// with a well-formed value.
pub fn validate_report(raw: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, line) in raw.lines().enumerate() {
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        let (k, v) = line.split_once(": ").ok_or_else(|| Error::parse(i + 1, "expected `key: value`"))?;
        if out.insert(k.to_string(), v.to_string()).is_some() {
            return Err(Error::parse(i + 1, format!("duplicate key `{k}`")));
        }
    }
    for key in REPORT_KEYS {
        let v = out.get(*key).ok_or_else(|| Error::Validation(format!("report lacks `{key}`")))?;
        let numeric = !matches!(*key, "env.throughput_kbps");
        if numeric && v != "undefined" && v.parse::<f64>().is_err() {
            return Err(Error::Validation(format!("`{key}` has non-numeric value `{v}`")));
        }
    }
    for pct in ["chr_percent", "cmr_percent"] {
        let v: f64 = out[pct].parse().unwrap_or(f64::NAN);
        if !(0.0..=100.0).contains(&v) {
            return Err(Error::Validation(format!("`{pct}` = {v} is outside [0, 100]")));
        }
    }
    Ok(out)
}

/// The report with every environment-dependent line removed.
pub fn strip_environment(report: &str) -> String {
    report.lines().filter(|l| !l.starts_with(ENV_PREFIX)).map(|l| format!("{l}\n")).collect()
}
