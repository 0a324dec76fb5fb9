use std::collections::BTreeSet;

use proptest::prelude::*;

use semqp::config::Paths;
use semqp::corpus::{parse_documents, parse_queries, split_queries, write_documents, write_queries, Corpus, Document, QueryRecord};
use semqp::engine::load_corpus;
use semqp::fixtures;
use semqp::parser::{tokenize, QueryParser};

fn word() -> impl Strategy<Value = String> {
    "[a-z]{1,8}"
}

fn sentence(max: usize) -> impl Strategy<Value = String> {
    prop::collection::vec(word(), 1..max).prop_map(|w| w.join(" "))
}

fn document() -> impl Strategy<Value = (String, String, String, Vec<u32>)> {
    (sentence(6), prop::collection::vec("[A-Z][a-z]{1,6}, [A-Z]\\.", 0..3), sentence(30), prop::collection::vec(1u32..500, 0..4))
        .prop_map(|(t, a, b, x)| (t, a.join("; "), b, x))
}

proptest! {
    #[test]
    fn documents_round_trip(docs in prop::collection::vec(document(), 1..6)) {
        let docs: Vec<Document> = docs
            .into_iter()
            .enumerate()
            .map(|(i, (title, author, body, cross_refs))| Document { id: i as u32 + 1, title, author, body, cross_refs })
            .collect();
        prop_assert_eq!(parse_documents(&write_documents(&docs)).unwrap(), docs);
    }

    #[test]
    fn queries_round_trip(texts in prop::collection::vec(sentence(12), 1..8)) {
        let qs: Vec<QueryRecord> = texts.into_iter().enumerate().map(|(i, text)| QueryRecord { id: i as u32 + 1, text }).collect();
        prop_assert_eq!(parse_queries(&write_queries(&qs)).unwrap(), qs);
    }

    #[test]
    fn split_partitions(n in 1usize..120, ratio in 0.05f64..0.95, seed in any::<u64>()) {
        let qs: Vec<QueryRecord> = (0..n as u32).map(|i| QueryRecord { id: i, text: format!("q{i}") }).collect();
        let (train, test) = split_queries(&qs, ratio, seed).unwrap();
        prop_assert_eq!(train.len() + test.len(), n);
        let a: BTreeSet<u32> = train.iter().map(|q| q.id).collect();
        let b: BTreeSet<u32> = test.iter().map(|q| q.id).collect();
        prop_assert!(a.is_disjoint(&b));
        prop_assert_eq!(a.len() + b.len(), n);
        prop_assert_eq!(split_queries(&qs, ratio, seed).unwrap(), (train, test));
    }

    #[test]
    fn normalize_is_idempotent(text in "[A-Za-z' .,!?]{0,60}") {
        let p = QueryParser::bundled();
        let once = p.normalize(&tokenize(&text));
        prop_assert_eq!(p.normalize(&once), once);
    }

    #[test]
    fn stopword_removal_keeps_a_subsequence(text in "[a-z ]{0,80}") {
        let p = QueryParser::bundled();
        let toks = p.normalize(&tokenize(&text));
        let kept = p.remove_stopwords(&toks);
        let mut it = toks.iter();
        prop_assert!(kept.iter().all(|k| it.any(|t| t == k)));
    }

    #[test]
    fn parse_is_deterministic(text in "\\PC{0,60}") {
        let p = QueryParser::bundled();
        prop_assert_eq!(p.parse(&text), p.parse(&text));
    }
}

#[test]
fn relevance_must_match_loaded_ids() {
    let docs = ".I 1\n.T\nA\n.W\nbody\n";
    let qs = ".I 1\n.W\nquery\n";
    assert!(Corpus::from_sources(docs, qs, "1 1 0 0\n").is_ok());
    let err = Corpus::from_sources(docs, qs, "1 2 0 0\n").unwrap_err();
    assert!(err.to_string().contains("unknown document id 2"), "{err}");
    assert!(Corpus::from_sources(docs, qs, "3 1 0 0\n").is_err());
}

#[test]
fn bundled_sample_loads() {
    let c = load_corpus(&Paths::default()).unwrap();
    assert_eq!(c.documents.len(), 60);
    assert_eq!(c.queries.len(), 30);
    assert!(c.queries.iter().all(|q| c.relevance.relevant(q.id).is_some()));
    let again = Corpus::from_sources(fixtures::MINI_CISI_ALL, fixtures::MINI_CISI_QRY, fixtures::MINI_CISI_REL).unwrap();
    assert_eq!(again.documents, c.documents);
}

/// Loads the full corpus when `CISI_DIR` names a directory holding
/// `CISI.ALL`, `CISI.QRY` and `CISI.REL`.
#[test]
fn full_corpus_from_env() {
    let Ok(dir) = std::env::var("CISI_DIR") else {
        eprintln!("skipped: set CISI_DIR to run against the full corpus");
        return;
    };
    let c = load_corpus(&Paths { corpus_dir: dir, ..Paths::default() }).unwrap();
    assert_eq!(c.documents.len(), 1460);
    assert_eq!(c.queries.len(), 112);
}

#[test]
fn missing_corpus_dir_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let err = load_corpus(&Paths { corpus_dir: dir.path().display().to_string(), ..Paths::default() }).unwrap_err();
    assert!(err.to_string().contains("CISI.ALL"), "{err}");
}
