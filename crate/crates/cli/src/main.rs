use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use semqp::clustering::write_store;
use semqp::config::RunConfig;
use semqp::corpus::{write_documents, write_queries};
use semqp::engine::{load_corpus, Engine};
use semqp::error::{Error, Result};
use semqp::metrics::{build_report, RunLog};

#[derive(Parser)]
#[command(name = "semqp", version, about = "Semantic query processing with a similarity cache")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; every key is optional.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Similarity gate for both final answers and cache hits.
    #[arg(long, global = true)]
    threshold: Option<f64>,
    #[arg(long, global = true)]
    cache_capacity: Option<usize>,
    /// Where `bench` and `eval` write the metrics report.
    #[arg(long, global = true)]
    report: Option<PathBuf>,
    /// Directory for snapshots, models and run logs.
    #[arg(long, global = true, default_value = "semqp-work")]
    workdir: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Validate the corpus and write a snapshot of it.
    Ingest,
    /// Cluster the documents and write the structured store.
    Cluster,
    /// Fine-tune the tagger and both rankers on the training split.
    Train,
    /// Answer one query through the cache and similarity loop.
    Query {
        text: String,
        /// Print every round of the similarity loop.
        #[arg(long)]
        trace: bool,
    },
    /// Replay the held-out split twice and write the run log.
    Bench {
        /// Per-query CSV output.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Turn a run log into a metrics report.
    Eval {
        /// Run log to read; defaults to the one `bench` writes.
        #[arg(long)]
        log: Option<PathBuf>,
    },
}

const RUN_LOG: &str = "run_log.json";
const MODELS: &str = "models";

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Config(format!("cannot write {}: {e}", path.display()))
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| io_err(path, e))
}

fn load_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(t) = c.threshold {
        cfg.pipeline.threshold = t;
        cfg.pipeline.cache_threshold = t;
    }
    if let Some(n) = c.cache_capacity {
        cfg.cache.capacity = n;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Builds the engine and brings in trained models, training them when none
/// are saved yet.
fn trained_engine(cfg: RunConfig, workdir: &Path) -> Result<Engine> {
    let mut engine = Engine::build(cfg)?;
    let models = workdir.join(MODELS);
    if !engine.load_models(&models).map_err(|e| e.in_stage("load models"))? {
        eprintln!("no saved models in {}; training first", models.display());
        engine.train()?;
        engine.save_models(&models).map_err(|e| e.in_stage("train"))?;
    }
    Ok(engine)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".into(), |x| format!("{x:.4}"))
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli.common).map_err(|e| e.in_stage("config"))?;
    let workdir = cli.common.workdir.as_path();
    match cli.command {
        Command::Ingest => {
            let corpus = load_corpus(&cfg.paths).map_err(|e| e.in_stage("ingest"))?;
            let dir = workdir.join("corpus");
            write(&dir.join("documents.all"), &write_documents(&corpus.documents)).map_err(|e| e.in_stage("ingest"))?;
            write(&dir.join("queries.qry"), &write_queries(&corpus.queries)).map_err(|e| e.in_stage("ingest"))?;
            let judged = corpus.queries.iter().filter(|q| corpus.relevance.relevant(q.id).is_some()).count();
            println!("documents: {}", corpus.documents.len());
            println!("queries: {}", corpus.queries.len());
            println!("judged queries: {judged}");
            println!("snapshot: {}", dir.display());
        }
        Command::Cluster => {
            let engine = Engine::build(cfg)?;
            let path = workdir.join("store.tsv");
            write(&path, &write_store(&engine.records)).map_err(|e| e.in_stage("cluster"))?;
            let o = &engine.clustering.ordering;
            let noise = engine.clustering.assignment.labels.iter().filter(|l| l.is_none()).count();
            println!("min_pts: {}", o.min_pts);
            println!("epsilon: {:.6}", o.epsilon);
            println!("clusters: {}", engine.clustering.assignment.n_clusters);
            println!("noise: {noise}");
            println!("silhouette: {}", fmt_opt(engine.silhouette));
            println!("ct_ms: {:.3}", engine.ct_ms);
            println!("store: {}", path.display());
        }
        Command::Train => {
            let mut engine = Engine::build(cfg)?;
            let s = engine.train()?;
            let models = workdir.join(MODELS);
            engine.save_models(&models).map_err(|e| e.in_stage("train"))?;
            println!("training queries: {}", s.train_queries);
            println!("ner epochs: {} final loss: {:.6}", s.ner.epochs, s.ner.final_loss);
            println!("mgr_lau epochs: {} final loss: {:.6}", s.ranker.epochs, s.ranker.final_loss);
            println!("plain_gru epochs: {} final loss: {:.6}", s.plain.epochs, s.plain.final_loss);
            println!("models: {}", models.display());
        }
        Command::Query { text, trace } => {
            let engine = trained_engine(cfg, workdir)?;
            let cache = engine.new_cache().map_err(|e| e.in_stage("cache"))?;
            let o = engine.query(&cache, &text).map_err(|e| e.in_stage("query"))?;
            println!("intent: {}", o.intent.code());
            println!("source: {:?}", o.source);
            println!("similarity: {:.6}", o.similarity);
            if o.below_threshold {
                println!("warning: best answer is below the similarity threshold");
            }
            if trace {
                for r in &o.trace {
                    println!("round: {r:?}");
                }
            }
            for id in o.result_ids.iter().take(10) {
                let title = engine.corpus.document(*id).map_or("", |d| d.title.as_str());
                println!("{id}\t{title}");
            }
            if !engine.config.cache.path.is_empty() {
                cache.snapshot().save(Path::new(&engine.config.cache.path)).map_err(|e| e.in_stage("cache"))?;
            }
        }
        Command::Bench { csv } => {
            let window = cfg.bench.window_s;
            let engine = trained_engine(cfg, workdir)?;
            let log = engine.bench().map_err(|e| e.in_stage("bench"))?;
            let path = workdir.join(RUN_LOG);
            write(&path, &log.to_json()?).map_err(|e| e.in_stage("bench"))?;
            if let Some(csv) = csv {
                write(&csv, &log.per_query_csv()).map_err(|e| e.in_stage("bench"))?;
            }
            println!("queries: {}", log.records.len());
            println!("run log: {}", path.display());
            if let Some(report) = &cli.common.report {
                let r = build_report(&log, window).map_err(|e| e.in_stage("eval"))?;
                write(report, &r.render()).map_err(|e| e.in_stage("eval"))?;
                println!("report: {}", report.display());
            }
        }
        Command::Eval { log } => {
            let path = log.unwrap_or_else(|| workdir.join(RUN_LOG));
            let log = RunLog::load(&path).map_err(|e| e.in_stage("eval"))?;
            let text = build_report(&log, cfg.bench.window_s).map_err(|e| e.in_stage("eval"))?.render();
            match &cli.common.report {
                Some(report) => {
                    write(report, &text).map_err(|e| e.in_stage("eval"))?;
                    println!("report: {}", report.display());
                }
                None => print!("{text}"),
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
