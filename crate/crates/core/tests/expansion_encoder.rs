use std::collections::BTreeSet;

use proptest::prelude::*;

use semqp::encoder::{
    attention_weights, is_valid_bio, parse_ner_fixture, pool_and_tag, self_attention, AttentionParams, Encoder,
    EncoderConfig, TagHead,
};
use semqp::expansion::{expand_query, LexicalGraph};
use semqp::fixtures;
use semqp::linalg::Matrix;
use semqp::parser::{porter, QueryParser};

fn matrix(rows: usize, cols: usize, scale: f64) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(-scale..scale, rows * cols).prop_map(move |d| Matrix::from_vec(rows, cols, d).unwrap())
}

/// Token count, input width, key width, then `X`, `W_Q`, `W_K`, `W_V`.
fn attention_case() -> impl Strategy<Value = (Matrix, AttentionParams)> {
    (1usize..7, 1usize..6, 1usize..5).prop_flat_map(|(n, d, dk)| {
        (matrix(n, d, 4.0), matrix(d, dk, 2.0), matrix(d, dk, 2.0), matrix(d, dk, 2.0))
            .prop_map(|(x, w_q, w_k, w_v)| (x, AttentionParams { w_q, w_k, w_v, literal: false }))
    })
}

fn graph_words(g: &LexicalGraph) -> Vec<String> {
    let set: BTreeSet<String> = g.ids().filter_map(|id| g.synset(id)).flat_map(|s| s.words.clone()).collect();
    set.into_iter().collect()
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions((x, p) in attention_case()) {
        let a = attention_weights(&x.matmul(&p.w_q), &x.matmul(&p.w_k));
        for i in 0..a.rows() {
            prop_assert!(a.row(i).iter().all(|&w| w > 0.0));
            prop_assert!((a.row(i).iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn attention_stays_in_value_envelope((x, p) in attention_case()) {
        let out = self_attention(&p, &x).unwrap();
        let v = x.matmul(&p.w_v);
        for j in 0..v.cols() {
            let lo = (0..v.rows()).map(|i| v[(i, j)]).fold(f64::INFINITY, f64::min);
            let hi = (0..v.rows()).map(|i| v[(i, j)]).fold(f64::NEG_INFINITY, f64::max);
            for i in 0..out.rows() {
                prop_assert!(out[(i, j)] >= lo - 1e-12 && out[(i, j)] <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn emitted_tags_are_valid_bio(h in (1usize..8).prop_flat_map(|n| matrix(n, 3, 2.0)), w in matrix(3, 6, 3.0), b in prop::collection::vec(-1.0f64..1.0, 3)) {
        let tokens: Vec<String> = (0..h.rows()).map(|i| format!("t{i}")).collect();
        let ts = pool_and_tag(&TagHead { w, b }, &h, &tokens).unwrap();
        prop_assert!(is_valid_bio(&ts.tags));
        prop_assert_eq!(ts.tags.len(), tokens.len());
    }

    #[test]
    fn relation_score_is_symmetric(i in 0usize..64, j in 0usize..64) {
        let g = LexicalGraph::bundled();
        let ids: Vec<&str> = g.ids().collect();
        let (a, b) = (ids[i % ids.len()], ids[j % ids.len()]);
        let ab = g.relation_score(a, b).unwrap();
        let ba = g.relation_score(b, a).unwrap();
        prop_assert!((ab - ba).abs() <= 1e-12);
        prop_assert!((0.0..=1.0).contains(&ab));
    }

    #[test]
    fn raising_the_threshold_never_adds_terms(picks in prop::collection::vec(0usize..200, 1..5), t1 in 0.05f64..1.0, dt in 0.0f64..0.5) {
        let g = LexicalGraph::bundled();
        let words = graph_words(&g);
        let text: Vec<&str> = picks.iter().map(|&i| words[i % words.len()].as_str()).collect();
        let p = QueryParser::bundled().parse(&text.join(" "));
        let t2 = (t1 + dt).min(1.0);
        let lo: BTreeSet<String> = expand_query(&g, &p, t1).unwrap().additions.into_iter().map(|a| a.term).collect();
        let hi = expand_query(&g, &p, t2).unwrap();
        prop_assert!(hi.additions.iter().all(|a| a.score >= t2 && lo.contains(&a.term)));
        let base: BTreeSet<&String> = p.stems.iter().chain(&p.filtered).collect();
        prop_assert!(hi.additions.iter().all(|a| !base.contains(&a.term)));
    }
}

#[test]
fn information_content_falls_toward_the_root() {
    let g = LexicalGraph::bundled();
    for id in g.ids() {
        let ic = g.information_content(id).unwrap();
        for parent in &g.synset(id).unwrap().parents {
            assert!(g.information_content(parent).unwrap() <= ic, "IC({parent}) > IC({id})");
        }
    }
}

#[test]
fn tagger_zero_epochs_leaves_the_head() {
    let sentences = parse_ner_fixture(fixtures::NER_TRAIN).unwrap();
    let vocab: Vec<String> = sentences.iter().flat_map(|s| s.words.iter().map(|w| porter::stem(w))).collect();
    let mut enc = Encoder::new(vocab, EncoderConfig { dim: 8, key_dim: 8, ..EncoderConfig::default() }, 3).unwrap();
    let before = enc.head.clone();
    enc.fine_tune(&sentences, 0, 0.5).unwrap();
    assert_eq!(enc.head, before);
}

#[test]
fn held_out_tags_are_valid_bio() {
    let train = parse_ner_fixture(fixtures::NER_TRAIN).unwrap();
    let eval = parse_ner_fixture(fixtures::NER_EVAL).unwrap();
    let vocab: Vec<String> = train.iter().flat_map(|s| s.words.iter().map(|w| porter::stem(w))).collect();
    let mut enc = Encoder::new(vocab, EncoderConfig::default(), 42).unwrap();
    enc.fine_tune(&train, 300, 0.5).unwrap();
    for s in &eval {
        let ts = enc.tag(&s.words).unwrap();
        assert!(is_valid_bio(&ts.tags));
    }
}

#[test]
fn params_round_trip_through_disk() {
    let sentences = parse_ner_fixture(fixtures::NER_TRAIN).unwrap();
    let vocab: Vec<String> = sentences.iter().flat_map(|s| s.words.iter().map(|w| porter::stem(w))).collect();
    let mut enc = Encoder::new(vocab.clone(), EncoderConfig { dim: 4, key_dim: 4, ..EncoderConfig::default() }, 8).unwrap();
    enc.fine_tune(&sentences, 5, 0.5).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("encoder.params");
    enc.to_params().save(&path).unwrap();
    let mut fresh = Encoder::new(vocab, EncoderConfig { dim: 4, key_dim: 4, ..EncoderConfig::default() }, 99).unwrap();
    fresh.load_params(&semqp::params::ParamFile::load(&path).unwrap()).unwrap();
    assert_eq!(fresh, enc);
}
