//! CISI-style corpus files: documents (`.I/.T/.A/.W/.X` blocks), queries, and
//! whitespace-separated relevance rows.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: u32,
    pub title: String,
    pub author: String,
    pub body: String,
    pub cross_refs: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub id: u32,
    pub text: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecordKind {
    Document,
    Query,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Records {
    Documents(Vec<Document>),
    Queries(Vec<QueryRecord>),
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelevanceMap {
    pub entries: BTreeMap<u32, BTreeSet<u32>>,
}

impl RelevanceMap {
    pub fn relevant(&self, query: u32) -> Option<&BTreeSet<u32>> {
        self.entries.get(&query)
    }

    pub fn is_relevant(&self, query: u32, doc: u32) -> bool {
        self.entries.get(&query).is_some_and(|s| s.contains(&doc))
    }

    /// Checks every referenced query and document id against the loaded sets.
    pub fn validate(&self, docs: &[Document], queries: &[QueryRecord]) -> Result<()> {
        let doc_ids: HashSet<u32> = docs.iter().map(|d| d.id).collect();
        let query_ids: HashSet<u32> = queries.iter().map(|q| q.id).collect();
        for (q, ds) in &self.entries {
            if !query_ids.contains(q) {
                return Err(Error::Validation(format!("relevance references unknown query id {q}")));
            }
            if let Some(d) = ds.iter().find(|d| !doc_ids.contains(d)) {
                return Err(Error::Validation(format!(
                    "relevance for query {q} references unknown document id {d}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Field {
    Title,
    Author,
    Body,
    CrossRefs,
    Bibliography,
}

#[derive(Default)]
struct Block {
    id: u32,
    start_line: usize,
    title: Vec<String>,
    author: Vec<String>,
    body: Vec<String>,
    cross_refs: Vec<u32>,
    has_body: bool,
}

impl Block {
    fn push(&mut self, field: Field, line: &str, line_no: usize) -> Result<()> {
        let trimmed = line.trim();
        if trimmed.is_empty() {
            return Ok(());
        }
        match field {
            Field::Title => self.title.push(trimmed.to_string()),
            Field::Author => self.author.push(trimmed.to_string()),
            Field::Body => self.body.push(trimmed.to_string()),
            Field::CrossRefs => {
                let first = trimmed.split_whitespace().next().unwrap_or_default();
                let id = first
                    .parse::<u32>()
                    .map_err(|_| Error::parse(line_no, format!("invalid cross-reference id `{first}`")))?;
                self.cross_refs.push(id);
            }
            Field::Bibliography => {}
        }
        Ok(())
    }
}

/// Parses a marker-format file into documents or queries.
///
/// A record starts at `.I <id>`; `.T`, `.A`, `.W`, `.X` (and `.B`, which CISI
/// queries carry and which is skipped) open a field whose content runs until
/// the next marker. Content lines are joined with single spaces. Repeated
/// `.A` markers append further authors, separated by `; `.
pub fn parse_cisi_records(raw: &str, kind: RecordKind) -> Result<Records> {
    let mut blocks: Vec<Block> = Vec::new();
    let mut seen = HashSet::new();
    let mut field: Option<Field> = None;

    for (idx, line) in raw.lines().enumerate() {
        let line_no = idx + 1;
        if let Some(marker) = marker_of(line) {
            let (tag, rest) = marker;
            match tag {
                'I' => {
                    let id_text = rest.trim();
                    let id = id_text
                        .parse::<u32>()
                        .ok()
                        .filter(|&id| id > 0)
                        .ok_or_else(|| Error::parse(line_no, format!("malformed .I marker `{}`", line.trim())))?;
                    if !seen.insert(id) {
                        return Err(Error::parse(line_no, format!("duplicate id {id}")));
                    }
                    blocks.push(Block { id, start_line: line_no, ..Default::default() });
                    field = None;
                }
                'T' | 'A' | 'W' | 'X' | 'B' => {
                    let block = blocks
                        .last_mut()
                        .ok_or_else(|| Error::parse(line_no, format!("field marker .{tag} before any .I")))?;
                    let f = match tag {
                        'T' => Field::Title,
                        'A' => {
                            if !block.author.is_empty() {
                                block.author.push(";".into());
                            }
                            Field::Author
                        }
                        'W' => {
                            block.has_body = true;
                            Field::Body
                        }
                        'X' => Field::CrossRefs,
                        _ => Field::Bibliography,
                    };
                    // Content on the marker line itself is kept.
                    if !rest.trim().is_empty() {
                        block.push(f, rest, line_no)?;
                    }
                    field = Some(f);
                }
                other => return Err(Error::parse(line_no, format!("malformed marker `.{other}`"))),
            }
            continue;
        }
        match (blocks.last_mut(), field) {
            (Some(block), Some(f)) => block.push(f, line, line_no)?,
            (_, _) if line.trim().is_empty() => {}
            (None, _) => return Err(Error::parse(line_no, "content before first .I marker")),
            (Some(_), None) => return Err(Error::parse(line_no, "content outside of a field")),
        }
    }

    for b in &blocks {
        if !b.has_body || b.body.is_empty() {
            return Err(Error::parse(b.start_line, format!("record {} has no .W content", b.id)));
        }
    }

    Ok(match kind {
        RecordKind::Document => Records::Documents(
            blocks
                .into_iter()
                .map(|b| Document {
                    id: b.id,
                    title: b.title.join(" "),
                    author: join_authors(&b.author),
                    body: b.body.join(" "),
                    cross_refs: b.cross_refs,
                })
                .collect(),
        ),
        RecordKind::Query => Records::Queries(
            blocks.into_iter().map(|b| QueryRecord { id: b.id, text: b.body.join(" ") }).collect(),
        ),
    })
}

fn join_authors(parts: &[String]) -> String {
    let mut out = String::new();
    for p in parts {
        if p == ";" {
            out.push(';');
        } else {
            if !out.is_empty() {
                out.push(' ');
            }
            out.push_str(p);
        }
    }
    out
}

/// Returns the marker letter and the remainder of the line, if `line` is a
/// marker line (a `.` followed by one uppercase letter, then whitespace or
/// end of line).
fn marker_of(line: &str) -> Option<(char, &str)> {
    let rest = line.strip_prefix('.')?;
    let mut chars = rest.chars();
    let tag = chars.next()?;
    if !tag.is_ascii_uppercase() {
        return None;
    }
    let after = chars.as_str();
    if after.is_empty() || after.starts_with(char::is_whitespace) {
        Some((tag, after))
    } else {
        None
    }
}

pub fn parse_documents(raw: &str) -> Result<Vec<Document>> {
    match parse_cisi_records(raw, RecordKind::Document)? {
        Records::Documents(d) => Ok(d),
        Records::Queries(_) => unreachable!(),
    }
}

pub fn parse_queries(raw: &str) -> Result<Vec<QueryRecord>> {
    match parse_cisi_records(raw, RecordKind::Query)? {
        Records::Queries(q) => Ok(q),
        Records::Documents(_) => unreachable!(),
    }
}

/// Serializes documents back to the marker format (one line per field).
pub fn write_documents(docs: &[Document]) -> String {
    let mut out = String::new();
    for d in docs {
        out.push_str(&format!(".I {}\n", d.id));
        if !d.title.is_empty() {
            out.push_str(&format!(".T\n{}\n", d.title));
        }
        if !d.author.is_empty() {
            for (i, a) in d.author.split(';').enumerate() {
                let a = a.trim();
                if i == 0 || !a.is_empty() {
                    out.push_str(&format!(".A\n{a}\n"));
                }
            }
        }
        out.push_str(&format!(".W\n{}\n", d.body));
        if !d.cross_refs.is_empty() {
            out.push_str(".X\n");
            for x in &d.cross_refs {
                out.push_str(&format!("{x}\t5\t{}\n", d.id));
            }
        }
    }
    out
}

pub fn write_queries(queries: &[QueryRecord]) -> String {
    queries.iter().map(|q| format!(".I {}\n.W\n{}\n", q.id, q.text)).collect()
}

/// Parses relevance rows: first column query id, second document id, any
/// further columns ignored.
pub fn parse_relevance(raw: &str) -> Result<RelevanceMap> {
    let mut map = RelevanceMap::default();
    for (idx, line) in raw.lines().enumerate() {
        let mut cols = line.split_whitespace();
        let Some(q) = cols.next() else { continue };
        let d = cols
            .next()
            .ok_or_else(|| Error::parse(idx + 1, "relevance row needs a query id and a document id"))?;
        let q: u32 = q.parse().map_err(|_| Error::parse(idx + 1, format!("non-integer query id `{q}`")))?;
        let d: u32 = d.parse().map_err(|_| Error::parse(idx + 1, format!("non-integer document id `{d}`")))?;
        map.entries.entry(q).or_default().insert(d);
    }
    Ok(map)
}

/// Seeded shuffle followed by a `floor(ratio · n)` train prefix.
pub fn split_queries(
    queries: &[QueryRecord],
    ratio: f64,
    seed: u64,
) -> Result<(Vec<QueryRecord>, Vec<QueryRecord>)> {
    if queries.is_empty() {
        return Err(Error::InvalidInput("cannot split an empty query list".into()));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::InvalidInput(format!("split ratio {ratio} must lie in (0, 1)")));
    }
    let mut shuffled = queries.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    shuffled.shuffle(&mut rng);
    // The epsilon absorbs products like 0.29 · 100 = 28.999999999999996.
    let n_train = ((ratio * queries.len() as f64) + 1e-9).floor() as usize;
    let test = shuffled.split_off(n_train);
    Ok((shuffled, test))
}

/// Loaded and cross-validated corpus.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub documents: Vec<Document>,
    pub queries: Vec<QueryRecord>,
    pub relevance: RelevanceMap,
}

impl Corpus {
    pub fn from_sources(docs: &str, queries: &str, relevance: &str) -> Result<Self> {
        let documents = parse_documents(docs)?;
        let queries = parse_queries(queries)?;
        let relevance = parse_relevance(relevance)?;
        relevance.validate(&documents, &queries)?;
        Ok(Self { documents, queries, relevance })
    }

    pub fn document(&self, id: u32) -> Option<&Document> {
        self.documents.iter().find(|d| d.id == id)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const THREE: &str = include_str!("../fixtures/three_docs.all");

    #[test]
    fn three_record_fixture() {
        let docs = parse_documents(THREE).unwrap();
        assert_eq!(docs.len(), 3);
        assert_eq!(docs.iter().map(|d| d.id).collect::<Vec<_>>(), vec![1, 2, 3]);
        assert_eq!(docs[0].title, "18 Editions of the Dewey Decimal Classifications");
        assert_eq!(docs[1].title, "Use Made of Technical Libraries");
        assert_eq!(docs[2].title, "Two Kinds of Power An Essay on Bibliographic Control");
        assert_eq!(docs[0].author, "Comaromi, J.P.");
        assert_eq!(docs[0].cross_refs, vec![1, 92, 262]);
        assert!(docs[1].body.starts_with("This report is an analysis"));
    }

    #[test]
    fn empty_input() {
        assert!(parse_documents("").unwrap().is_empty());
        assert!(parse_relevance("").unwrap().entries.is_empty());
    }

    #[test]
    fn parse_errors_name_lines() {
        let err = parse_documents(".I 1\n.W\ntext\n.I 1\n.W\nmore\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 4, .. }), "{err}");
        let err = parse_documents(".I 1\n.Q\nx\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
        let err = parse_documents(".I 1\n.T\ntitle only\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }), "{err}");
        let err = parse_documents(".I x\n.W\nbody\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }), "{err}");
    }

    #[test]
    fn queries_need_only_body() {
        let q = parse_queries(".I 1\n.W\nWhat is indexing?\n.I 2\n.T\nt\n.A\na\n.W\nsecond\n.B\n(1970)\n").unwrap();
        assert_eq!(q.len(), 2);
        assert_eq!(q[0].text, "What is indexing?");
        assert_eq!(q[1].text, "second");
    }

    #[test]
    fn relevance_rows() {
        let m = parse_relevance("1 28\n1 35\n").unwrap();
        assert_eq!(m.entries.len(), 1);
        assert_eq!(m.entries[&1], BTreeSet::from([28, 35]));
        assert!(parse_relevance("1 x\n").is_err());
    }

    #[test]
    fn relevance_fixture_by_hand() {
        let m = parse_relevance(include_str!("../fixtures/ten_rows.rel")).unwrap();
        let expected: BTreeMap<u32, BTreeSet<u32>> = [
            (1, BTreeSet::from([28, 35, 38])),
            (2, BTreeSet::from([29, 68])),
            (3, BTreeSet::from([60, 85, 114])),
            (4, BTreeSet::from([7, 13])),
        ]
        .into_iter()
        .collect();
        assert_eq!(m.entries, expected);
    }

    #[test]
    fn relevance_validation() {
        let docs = parse_documents(THREE).unwrap();
        let queries = vec![QueryRecord { id: 1, text: "q".into() }];
        let ok = parse_relevance("1 2\n1 3\n").unwrap();
        ok.validate(&docs, &queries).unwrap();
        assert!(parse_relevance("1 9\n").unwrap().validate(&docs, &queries).is_err());
        assert!(parse_relevance("7 1\n").unwrap().validate(&docs, &queries).is_err());
    }

    fn queries(n: u32) -> Vec<QueryRecord> {
        (1..=n).map(|id| QueryRecord { id, text: format!("query {id}") }).collect()
    }

    #[test]
    fn split_sizes() {
        let (tr, te) = split_queries(&queries(112), 0.8, 7).unwrap();
        assert_eq!((tr.len(), te.len()), (89, 23));
        let (tr, te) = split_queries(&queries(4), 0.5, 1).unwrap();
        assert_eq!((tr.len(), te.len()), (2, 2));
        let a = split_queries(&queries(10), 0.8, 3).unwrap();
        let b = split_queries(&queries(10), 0.8, 3).unwrap();
        assert_eq!(a, b);
        assert!(split_queries(&[], 0.8, 1).is_err());
        assert!(split_queries(&queries(3), 1.0, 1).is_err());
    }
}
