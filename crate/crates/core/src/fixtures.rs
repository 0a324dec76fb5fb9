//! Desk-scale data files compiled into the library so every command works
//! without external paths.

pub const STOPWORDS: &str = include_str!("../fixtures/stopwords.txt");
pub const CONTRACTIONS: &str = include_str!("../fixtures/contractions.tsv");
pub const ABBREVIATIONS: &str = include_str!("../fixtures/abbreviations.tsv");
pub const POS_LEXICON: &str = include_str!("../fixtures/pos_lexicon.tsv");
pub const TAXONOMY: &str = include_str!("../fixtures/taxonomy.syn");
pub const INTENT_INFORMATIONAL: &str = include_str!("../fixtures/intent_informational.tsv");
pub const INTENT_NAVIGATIONAL: &str = include_str!("../fixtures/intent_navigational.tsv");
pub const INTENT_TRANSACTIONAL: &str = include_str!("../fixtures/intent_transactional.tsv");
pub const INTENT_CONTEXT: &str = include_str!("../fixtures/intent_context.tsv");
pub const INTENT_QUERIES: &str = include_str!("../fixtures/intent_queries.tsv");
pub const RANKER_QUERIES: &str = include_str!("../fixtures/ranker_queries.tsv");
pub const NER_TRAIN: &str = include_str!("../fixtures/ner_train.txt");
pub const NER_EVAL: &str = include_str!("../fixtures/ner_eval.txt");
pub const THREE_BLOBS: &str = include_str!("../fixtures/three_blobs.tsv");
pub const MINI_CISI_ALL: &str = include_str!("../fixtures/mini_cisi/CISI.ALL");
pub const MINI_CISI_QRY: &str = include_str!("../fixtures/mini_cisi/CISI.QRY");
pub const MINI_CISI_REL: &str = include_str!("../fixtures/mini_cisi/CISI.REL");
