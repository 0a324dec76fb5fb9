use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;

use semqp::clustering::{
    core_distance, ek_optics, epanechnikov_density, read_store, silhouette, write_store, ClusterAssignment, EkParams,
    PointSet, StructuredRecord,
};
use semqp::encoder::EmbeddingTable;
use semqp::expansion::LexicalGraph;
use semqp::features::{dense_width, tf_idf, CorpusStats, FeatureExtractor};
use semqp::fixtures;
use semqp::parser::QueryParser;

fn points() -> impl Strategy<Value = Vec<Vec<f64>>> {
    (2usize..10, 1usize..4)
        .prop_flat_map(|(n, d)| prop::collection::vec(prop::collection::vec(-5.0f64..5.0, d), n))
}

proptest! {
    #[test]
    fn density_ignores_point_order(pts in points(), h in 0.5f64..6.0, rot in 0usize..10) {
        let n = pts.len();
        let perm: Vec<usize> = (0..n).map(|i| (i + rot) % n).collect();
        let shuffled: Vec<Vec<f64>> = perm.iter().map(|&i| pts[i].clone()).collect();
        let a = epanechnikov_density(&PointSet::new(pts).unwrap(), h).unwrap();
        let b = epanechnikov_density(&PointSet::new(shuffled).unwrap(), h).unwrap();
        for (k, &i) in perm.iter().enumerate() {
            prop_assert!((a.densities[i] - b.densities[k]).abs() <= 1e-12);
        }
    }

    #[test]
    fn larger_epsilon_keeps_core_points(pts in points(), min_pts in 2usize..5, e1 in 0.1f64..4.0, de in 0.0f64..4.0) {
        let ps = PointSet::new(pts).unwrap();
        for p in 0..ps.len() {
            let small = core_distance(&ps, p, min_pts, e1);
            let large = core_distance(&ps, p, min_pts, e1 + de);
            prop_assert!(small.is_infinite() || large == small);
        }
    }

    #[test]
    fn silhouette_is_bounded(pts in points(), labels in prop::collection::vec(prop::option::weighted(0.85, 0usize..3), 10)) {
        let labels: Vec<Option<usize>> = labels.into_iter().take(pts.len()).collect();
        let ps = PointSet::new(pts).unwrap();
        let n_clusters = labels.iter().flatten().max().map_or(0, |m| m + 1);
        if let Ok(s) = silhouette(&ps, &ClusterAssignment { labels, n_clusters, cut: 1.0 }) {
            prop_assert!((-1.0..=1.0).contains(&s));
        }
    }

    #[test]
    fn tf_idf_matches_a_recount(docs in prop::collection::vec(prop::collection::vec("[a-e]", 1..8), 1..=5)) {
        let n = docs.len() as f64;
        for d in 0..docs.len() {
            let got = tf_idf(&docs, d).unwrap();
            let terms: BTreeSet<&String> = docs[d].iter().collect();
            prop_assert_eq!(got.len(), terms.len());
            for t in terms {
                let tf = docs[d].iter().filter(|w| *w == t).count() as f64;
                let df = docs.iter().filter(|doc| doc.contains(t)).count() as f64;
                prop_assert_eq!(got[t], tf * (n / df).ln());
            }
        }
    }

    #[test]
    fn store_round_trips(rows in prop::collection::vec((1u32..1000, prop::option::of(0usize..5), 0.0f64..10.0, prop::collection::vec(-3.0f64..3.0, 4)), 1..8)) {
        let recs: Vec<StructuredRecord> = rows
            .into_iter()
            .enumerate()
            .map(|(i, (id, label, reach, features))| StructuredRecord {
                id: id * 10 + i as u32,
                label,
                reachability: if i == 0 { f64::INFINITY } else { reach },
                core_distance: reach / 2.0,
                features,
            })
            .collect();
        prop_assert_eq!(read_store(&write_store(&recs)).unwrap(), recs);
    }
}

#[test]
fn blobs_separate_from_each_other() {
    let ps = PointSet::parse(fixtures::THREE_BLOBS).unwrap();
    assert_eq!(ps.len(), 64);
    let ek = ek_optics(&ps, &EkParams::default()).unwrap();
    assert!(ek.assignment.n_clusters >= 2);
    // Two blobs sit close enough to merge; no blob is ever split.
    let mut clusters_of: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
    for (i, l) in ek.assignment.labels.iter().enumerate().take(60) {
        if let Some(c) = l {
            clusters_of.entry(i / 20).or_default().insert(*c);
        }
    }
    assert_eq!(clusters_of.len(), 3, "{clusters_of:?}");
    assert!(clusters_of.values().all(|c| c.len() == 1), "{clusters_of:?}");
}

#[test]
fn features_are_deterministic_and_order_free() {
    let parser = QueryParser::bundled();
    let graph = LexicalGraph::bundled();
    let texts = [
        "Library catalogs of 1965 and the dog",
        "Retrieval of information by computer",
        "A cat, a kitten and knowledge",
        "",
    ];
    let stems: Vec<Vec<String>> = texts.iter().map(|t| parser.parse(t).stems).collect();
    let stats = CorpusStats::from_docs(&stems).unwrap();
    let vocab: BTreeSet<String> = stems.iter().flatten().cloned().collect();
    let table = EmbeddingTable::new(vocab, 8, -0.5, 0.5, 4).unwrap();
    let fx = FeatureExtractor { parser: &parser, graph: &graph, stats: &stats, n_clusters: 3 };
    let record = |i: usize| StructuredRecord {
        id: i as u32 + 1,
        label: if i == 3 { None } else { Some(i % 3) },
        reachability: 1.0,
        core_distance: 1.0,
        features: Vec::new(),
    };
    let forward: Vec<_> = (0..texts.len()).map(|i| fx.extract(&record(i), texts[i])).collect();
    let backward: Vec<_> = (0..texts.len()).rev().map(|i| fx.extract(&record(i), texts[i])).collect();
    for (i, f) in forward.iter().enumerate() {
        assert_eq!(f, &backward[texts.len() - 1 - i]);
        assert_eq!(f.dense(&table).len(), dense_width(8, 3));
    }
    assert_eq!(forward[0].temporal, vec![1965]);
}
