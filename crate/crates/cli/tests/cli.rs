use std::path::Path;
use std::process::{Command, Output};

use semqp::fixtures;
use semqp::metrics::{strip_environment, RunLog};

fn semqp(workdir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_semqp"))
        .arg("--workdir")
        .arg(workdir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn query_reports_an_intent() {
    let dir = tempfile::tempdir().unwrap();
    let o = semqp(dir.path(), &["query", "what is information retrieval?"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.lines().any(|l| l == "intent: I"), "{out}");
    assert!(out.contains("source: Pipeline"));
    // Models were trained once and saved for the next call.
    assert!(dir.path().join("models").join("ranker.params").exists());
    let again = semqp(dir.path(), &["query", "what is information retrieval?"]);
    assert!(again.status.success());
    assert!(!stderr(&again).contains("training first"));
}

#[test]
fn eval_of_an_empty_log_fails() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("empty.json");
    std::fs::write(&log, RunLog::default().to_json().unwrap()).unwrap();
    let o = semqp(dir.path(), &["eval", "--log", log.to_str().unwrap()]);
    assert!(!o.status.success());
    let err = stderr(&o);
    assert!(err.contains("eval:") && err.contains("zero lookups"), "{err}");
}

#[test]
fn bad_config_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[pipeline]\nmax_rounds = 0\n").unwrap();
    let o = semqp(dir.path(), &["--config", cfg.to_str().unwrap(), "ingest"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("config:"), "{}", stderr(&o));
    let o = semqp(dir.path(), &["--config", dir.path().join("missing.toml").to_str().unwrap(), "ingest"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("config:"), "{}", stderr(&o));
}

#[test]
fn bench_is_reproducible() {
    let reports: Vec<String> = (0..2)
        .map(|_| {
            let dir = tempfile::tempdir().unwrap();
            let report = dir.path().join("report.txt");
            let o = semqp(dir.path(), &["--seed", "3", "--report", report.to_str().unwrap(), "bench"]);
            assert!(o.status.success(), "{}", stderr(&o));
            let text = std::fs::read_to_string(&report).unwrap();
            // Eval of the saved log agrees with the report bench wrote.
            let e = semqp(dir.path(), &["--seed", "3", "eval"]);
            assert!(e.status.success(), "{}", stderr(&e));
            assert_eq!(strip_environment(&stdout(&e)), strip_environment(&text));
            strip_environment(&text)
        })
        .collect();
    assert!(reports[0].contains("queries: "));
    assert_eq!(reports[0], reports[1]);
}

#[test]
fn ingest_leaves_the_corpus_alone() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("cisi");
    std::fs::create_dir(&corpus).unwrap();
    let files = [("CISI.ALL", fixtures::MINI_CISI_ALL), ("CISI.QRY", fixtures::MINI_CISI_QRY), ("CISI.REL", fixtures::MINI_CISI_REL)];
    for (name, body) in files {
        std::fs::write(corpus.join(name), body).unwrap();
    }
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, format!("[paths]\ncorpus_dir = {:?}\n", corpus.to_str().unwrap())).unwrap();
    let work = dir.path().join("work");
    let o = semqp(&work, &["--config", cfg.to_str().unwrap(), "ingest"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("documents: 60"));
    for (name, body) in files {
        assert_eq!(std::fs::read_to_string(corpus.join(name)).unwrap(), body);
    }
    assert!(work.join("corpus").join("documents.all").exists());
}
