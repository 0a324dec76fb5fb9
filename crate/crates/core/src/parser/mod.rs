//! Query parsing: tokenization, normalization, stop-word removal, stemming
//! and part-of-speech tagging.

pub mod porter;

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fixtures;

/// Compact tagset. `Wh` marks interrogative words.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PosTag {
    Noun,
    Verb,
    Adj,
    Adv,
    Pron,
    Det,
    Adp,
    Num,
    Wh,
    X,
}

impl PosTag {
    pub const ALL: [PosTag; 10] = [
        PosTag::Noun,
        PosTag::Verb,
        PosTag::Adj,
        PosTag::Adv,
        PosTag::Pron,
        PosTag::Det,
        PosTag::Adp,
        PosTag::Num,
        PosTag::Wh,
        PosTag::X,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PosTag::Noun => "NOUN",
            PosTag::Verb => "VERB",
            PosTag::Adj => "ADJ",
            PosTag::Adv => "ADV",
            PosTag::Pron => "PRON",
            PosTag::Det => "DET",
            PosTag::Adp => "ADP",
            PosTag::Num => "NUM",
            PosTag::Wh => "WH",
            PosTag::X => "X",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for PosTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PosTag {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        PosTag::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown POS tag `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaggedToken {
    pub stem: String,
    pub surface: String,
    pub tag: PosTag,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedQuery {
    pub original: String,
    pub tokens: Vec<String>,
    pub normalized: Vec<String>,
    pub filtered: Vec<String>,
    pub stems: Vec<String>,
    pub tagged: Vec<TaggedToken>,
}

/// Splits on whitespace; punctuation becomes standalone tokens except for
/// `-`, `'` and `.` between two alphanumerics (`e-mail`, `don't`, `5.2`) and
/// dotted abbreviations such as `u.s.`.
pub fn tokenize(query: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in query.split_whitespace() {
        if is_dotted_abbreviation(chunk) {
            out.push(chunk.to_string());
            continue;
        }
        let chars: Vec<char> = chunk.chars().collect();
        let mut word = String::new();
        for (i, &c) in chars.iter().enumerate() {
            if c.is_alphanumeric() {
                word.push(c);
                continue;
            }
            let joins = matches!(c, '-' | '\'' | '\u{2019}' | '.')
                && !word.is_empty()
                && chars.get(i + 1).is_some_and(|n| n.is_alphanumeric());
            if joins {
                word.push(c);
            } else {
                if !word.is_empty() {
                    out.push(std::mem::take(&mut word));
                }
                out.push(c.to_string());
            }
        }
        if !word.is_empty() {
            out.push(word);
        }
    }
    out
}

fn is_dotted_abbreviation(chunk: &str) -> bool {
    let chars: Vec<char> = chunk.chars().collect();
    chars.len() >= 4
        && chars.len().is_multiple_of(2)
        && chars.chunks(2).all(|p| p[0].is_alphabetic() && p[1] == '.')
}

fn has_alphanumeric(s: &str) -> bool {
    s.chars().any(char::is_alphanumeric)
}

/// Read-only lookup tables backing the parser.
#[derive(Debug, Clone)]
pub struct QueryParser {
    stopwords: HashSet<String>,
    contractions: HashMap<String, Vec<String>>,
    abbreviations: HashMap<String, Vec<String>>,
    lexicon: HashMap<String, PosTag>,
}

impl QueryParser {
    pub fn new(stopwords: &str, contractions: &str, abbreviations: &str, lexicon: &str) -> Result<Self> {
        let stopwords = parse_stopwords(stopwords)?;
        let contractions = parse_expansion_table(contractions)?;
        let abbreviations = parse_expansion_table(abbreviations)?;
        for table in [&contractions, &abbreviations] {
            for (key, words) in table {
                if let Some(w) = words.iter().find(|w| contractions.contains_key(*w) || abbreviations.contains_key(*w)) {
                    return Err(Error::Config(format!("expansion of `{key}` contains table key `{w}`")));
                }
            }
        }
        let mut lex = HashMap::new();
        for (idx, line) in lexicon.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (word, tag) = line
                .split_once('\t')
                .ok_or_else(|| Error::parse(idx + 1, "lexicon line must be `word<TAB>TAG`"))?;
            let tag: PosTag = tag.trim().parse().map_err(|_| Error::parse(idx + 1, format!("unknown tag `{tag}`")))?;
            lex.insert(word.trim().to_lowercase(), tag);
        }
        Ok(Self { stopwords, contractions, abbreviations, lexicon: lex })
    }

    /// Parser over the bundled tables.
    pub fn bundled() -> Self {
        Self::new(
            fixtures::STOPWORDS,
            fixtures::CONTRACTIONS,
            fixtures::ABBREVIATIONS,
            fixtures::POS_LEXICON,
        )
        .expect("bundled parser tables are valid")
    }

    pub fn from_files(stopwords: &str, contractions: &str, abbreviations: &str, lexicon: &str) -> Result<Self> {
        let read = |p: &str, what: &str| {
            std::fs::read_to_string(p).map_err(|e| Error::Config(format!("cannot read {what} file `{p}`: {e}")))
        };
        Self::new(
            &read(stopwords, "stop-word")?,
            &read(contractions, "contractions")?,
            &read(abbreviations, "abbreviations")?,
            &read(lexicon, "POS lexicon")?,
        )
    }

    pub fn is_stopword(&self, w: &str) -> bool {
        self.stopwords.contains(w)
    }

    /// Lowercases, expands contractions and abbreviations, and drops tokens
    /// without any alphanumeric character.
    pub fn normalize(&self, tokens: &[String]) -> Vec<String> {
        let mut out = Vec::with_capacity(tokens.len());
        for t in tokens {
            let lower = t.to_lowercase().replace('\u{2019}', "'");
            if let Some(exp) = self.contractions.get(&lower).or_else(|| self.abbreviations.get(&lower)) {
                out.extend(exp.iter().cloned());
            } else if has_alphanumeric(&lower) {
                out.push(lower);
            }
        }
        out
    }

    pub fn remove_stopwords(&self, tokens: &[String]) -> Vec<String> {
        tokens.iter().filter(|t| !self.stopwords.contains(*t)).cloned().collect()
    }

    pub fn stem(&self, tokens: &[String]) -> Vec<String> {
        tokens.iter().map(|t| porter::stem(t)).collect()
    }

    /// Lexicon (surface, then stem), then suffix rules, then `NOUN`.
    pub fn tag_word(&self, surface: &str, stem: &str) -> PosTag {
        let lower = surface.to_lowercase();
        if let Some(&t) = self.lexicon.get(&lower).or_else(|| self.lexicon.get(stem)) {
            return t;
        }
        if !has_alphanumeric(&lower) {
            return PosTag::X;
        }
        if lower.chars().all(|c| c.is_ascii_digit() || c == '.' || c == ',') {
            return PosTag::Num;
        }
        suffix_tag(&lower).unwrap_or(PosTag::Noun)
    }

    pub fn pos_tag(&self, stems: &[String], surfaces: &[String]) -> Result<Vec<TaggedToken>> {
        if stems.len() != surfaces.len() {
            return Err(Error::InvalidInput(format!(
                "pos_tag needs aligned inputs, got {} stems and {} surfaces",
                stems.len(),
                surfaces.len()
            )));
        }
        Ok(stems
            .iter()
            .zip(surfaces)
            .map(|(stem, surface)| TaggedToken {
                stem: stem.clone(),
                surface: surface.clone(),
                tag: self.tag_word(surface, stem),
            })
            .collect())
    }

    pub fn parse(&self, query: &str) -> ParsedQuery {
        let tokens = tokenize(query);
        let normalized = self.normalize(&tokens);
        let filtered = self.remove_stopwords(&normalized);
        let stems = self.stem(&filtered);
        let tagged = self.pos_tag(&stems, &filtered).expect("stems and filtered are aligned");
        ParsedQuery { original: query.to_string(), tokens, normalized, filtered, stems, tagged }
    }
}

const SUFFIX_RULES: &[(&str, PosTag)] = &[
    ("ness", PosTag::Noun),
    ("ment", PosTag::Noun),
    ("tion", PosTag::Noun),
    ("sion", PosTag::Noun),
    ("ship", PosTag::Noun),
    ("ity", PosTag::Noun),
    ("ism", PosTag::Noun),
    ("ous", PosTag::Adj),
    ("ful", PosTag::Adj),
    ("ive", PosTag::Adj),
    ("able", PosTag::Adj),
    ("ible", PosTag::Adj),
    ("less", PosTag::Adj),
    ("ical", PosTag::Adj),
    ("ize", PosTag::Verb),
    ("ise", PosTag::Verb),
    ("ify", PosTag::Verb),
    ("ly", PosTag::Adv),
];

/// Longest matching suffix wins; the stem left behind must keep at least
/// two characters.
fn suffix_tag(word: &str) -> Option<PosTag> {
    SUFFIX_RULES
        .iter()
        .filter(|(suf, _)| word.ends_with(suf) && word.chars().count() >= suf.chars().count() + 2)
        .max_by_key(|(suf, _)| suf.len())
        .map(|&(_, t)| t)
}

/// One word per line; `#` starts a comment.
fn parse_stopwords(raw: &str) -> Result<HashSet<String>> {
    Ok(raw
        .lines()
        .map(|l| l.split('#').next().unwrap_or_default().trim())
        .filter(|l| !l.is_empty())
        .map(str::to_lowercase)
        .collect())
}

/// `key<TAB>expansion words`; the expansion must be lowercase words.
fn parse_expansion_table(raw: &str) -> Result<HashMap<String, Vec<String>>> {
    let mut map = HashMap::new();
    for (idx, line) in raw.lines().enumerate() {
        let line = line.trim_end();
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, exp) = line
            .split_once('\t')
            .ok_or_else(|| Error::parse(idx + 1, "table line must be `key<TAB>expansion`"))?;
        let words: Vec<String> = exp.split_whitespace().map(str::to_string).collect();
        if words.is_empty() || words.iter().any(|w| *w != w.to_lowercase() || !has_alphanumeric(w)) {
            return Err(Error::parse(idx + 1, format!("expansion for `{key}` must be lowercase words")));
        }
        map.insert(key.trim().to_lowercase(), words);
    }
    Ok(map)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(v: &[&str]) -> Vec<String> {
        v.iter().map(|x| x.to_string()).collect()
    }

    #[test]
    fn tokenize_examples() {
        assert_eq!(tokenize("What is indexing?"), s(&["What", "is", "indexing", "?"]));
        assert!(tokenize("").is_empty());
        assert_eq!(tokenize("e-mail costs $5."), s(&["e-mail", "costs", "$", "5", "."]));
        assert_eq!(tokenize("don't stop the U.S. data"), s(&["don't", "stop", "the", "U.S.", "data"]));
        assert_eq!(tokenize("(version 5.2)"), s(&["(", "version", "5.2", ")"]));
    }

    #[test]
    fn normalize_examples() {
        let p = QueryParser::bundled();
        assert_eq!(p.normalize(&s(&["What", "is", "indexing", "?"])), s(&["what", "is", "indexing"]));
        assert_eq!(p.normalize(&s(&["don't"])), s(&["do", "not"]));
        assert_eq!(p.normalize(&s(&["IR", "systems"])), s(&["information", "retrieval", "systems"]));
        assert_eq!(p.normalize(&s(&["U.S."])), s(&["united", "states"]));
    }

    #[test]
    fn stopword_examples() {
        let p = QueryParser::bundled();
        assert_eq!(p.remove_stopwords(&s(&["what", "is", "indexing"])), s(&["indexing"]));
        assert!(p.remove_stopwords(&[]).is_empty());
        // Ten-token sentence filtered by hand against the bundled list.
        let sentence = s(&["the", "retrieval", "of", "documents", "is", "based", "on", "their", "subject", "headings"]);
        assert_eq!(p.remove_stopwords(&sentence), s(&["retrieval", "documents", "based", "subject", "headings"]));
    }

    #[test]
    fn missing_table_file_is_config_error() {
        let err = QueryParser::from_files("/nonexistent/stop.txt", "a", "b", "c").unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn tagging_examples() {
        let p = QueryParser::bundled();
        assert_eq!(p.tag_word("buy", "buy"), PosTag::Verb);
        assert_eq!(p.tag_word("quickly", "quickli"), PosTag::Adv);
        assert_eq!(p.tag_word("zzzz", "zzzz"), PosTag::Noun);
        assert_eq!(p.tag_word("what", "what"), PosTag::Wh);
        assert_eq!(p.tag_word("1971", "1971"), PosTag::Num);
        assert!(p.pos_tag(&s(&["a"]), &[]).is_err());
    }

    #[test]
    fn parse_examples() {
        let p = QueryParser::bundled();
        let q = p.parse("What is indexing?");
        assert_eq!(q.filtered, s(&["indexing"]));
        assert_eq!(
            q.tagged,
            vec![TaggedToken { stem: "index".into(), surface: "indexing".into(), tag: PosTag::Noun }]
        );
        assert_eq!(q.original, "What is indexing?");

        let q = p.parse("");
        assert!(q.tokens.is_empty() && q.normalized.is_empty() && q.filtered.is_empty());
        assert!(q.stems.is_empty() && q.tagged.is_empty());

        let q = p.parse("buy laptops");
        assert_eq!(q.filtered, s(&["buy", "laptops"]));
        assert_eq!(q.stems, s(&["buy", "laptop"]));
        assert_eq!(q.tagged[0].tag, PosTag::Verb);
    }

    #[test]
    fn bad_tables_rejected() {
        assert!(parse_expansion_table("don't\tDo Not\n").is_err());
        assert!(parse_expansion_table("no tab here\n").is_err());
        assert!(QueryParser::new("", "a\tb\n", "b\tc\n", "").is_err());
    }
}
