//! Synset taxonomy with corpus counts, information content, and the
//! Lin-style relation score used to expand parsed queries.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::parser::{porter, ParsedQuery};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Synset {
    pub id: String,
    pub words: Vec<String>,
    pub parents: Vec<String>,
    pub gloss: String,
    pub count: u64,
}

#[derive(Debug, Clone)]
pub struct LexicalGraph {
    synsets: BTreeMap<String, Synset>,
    /// Synset ids in file order.
    order: Vec<String>,
    children: HashMap<String, Vec<String>>,
    cumulative: HashMap<String, u64>,
    root: String,
    total: u64,
    /// lemma → synset ids in file order (first entry is the first sense).
    by_word: HashMap<String, Vec<String>>,
    by_stem: HashMap<String, Vec<String>>,
}

impl LexicalGraph {
    pub fn parse(raw: &str) -> Result<Self> {
        let mut synsets = BTreeMap::new();
        let mut order = Vec::new();
        for (idx, line) in raw.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let s = parse_synset_line(line).map_err(|msg| Error::parse(idx + 1, msg))?;
            if synsets.contains_key(&s.id) {
                return Err(Error::parse(idx + 1, format!("duplicate synset id `{}`", s.id)));
            }
            order.push(s.id.clone());
            synsets.insert(s.id.clone(), s);
        }
        Self::from_synsets(synsets, order)
    }

    pub fn bundled() -> Self {
        Self::parse(crate::fixtures::TAXONOMY).expect("bundled taxonomy is valid")
    }

    fn from_synsets(synsets: BTreeMap<String, Synset>, order: Vec<String>) -> Result<Self> {
        let mut children: HashMap<String, Vec<String>> = HashMap::new();
        for id in &order {
            for p in &synsets[id].parents {
                if !synsets.contains_key(p) {
                    return Err(Error::Validation(format!("synset `{id}` has unknown parent `{p}`")));
                }
                children.entry(p.clone()).or_default().push(id.clone());
            }
        }
        let roots: Vec<&String> = order.iter().filter(|id| synsets[*id].parents.is_empty()).collect();
        if roots.len() != 1 {
            return Err(Error::Validation(format!("taxonomy must have exactly one root, found {}", roots.len())));
        }
        let root = roots[0].clone();

        check_acyclic(&synsets, &order)?;

        let mut cumulative = HashMap::new();
        for id in &order {
            let mut seen = BTreeSet::new();
            let mut stack = vec![id.clone()];
            while let Some(cur) = stack.pop() {
                if seen.insert(cur.clone()) {
                    if let Some(cs) = children.get(&cur) {
                        stack.extend(cs.iter().cloned());
                    }
                }
            }
            let cum: u64 = seen.iter().map(|s| synsets[s].count).sum();
            cumulative.insert(id.clone(), cum);
        }
        let total = cumulative[&root];
        if total == 0 {
            return Err(Error::Validation("taxonomy root has zero cumulative count".into()));
        }

        let mut by_word: HashMap<String, Vec<String>> = HashMap::new();
        let mut by_stem: HashMap<String, Vec<String>> = HashMap::new();
        for id in &order {
            for w in &synsets[id].words {
                push_unique(by_word.entry(w.clone()).or_default(), id);
                push_unique(by_stem.entry(porter::stem(w)).or_default(), id);
            }
        }

        Ok(Self { synsets, order, children, cumulative, root, total, by_word, by_stem })
    }

    pub fn root(&self) -> &str {
        &self.root
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.order.iter().map(String::as_str)
    }

    pub fn synset(&self, id: &str) -> Option<&Synset> {
        self.synsets.get(id)
    }

    pub fn cumulative_count(&self, id: &str) -> Option<u64> {
        self.cumulative.get(id).copied()
    }

    pub fn children(&self, id: &str) -> &[String] {
        self.children.get(id).map_or(&[], Vec::as_slice)
    }

    /// All senses of a term: exact lemma match, otherwise stem match.
    pub fn senses(&self, term: &str) -> &[String] {
        let lower = term.to_lowercase();
        if let Some(ids) = self.by_word.get(&lower) {
            return ids;
        }
        self.by_stem.get(&porter::stem(&lower)).map_or(&[], Vec::as_slice)
    }

    pub fn first_sense(&self, term: &str) -> Option<&str> {
        self.senses(term).first().map(String::as_str)
    }

    fn require(&self, id: &str) -> Result<&Synset> {
        self.synsets.get(id).ok_or_else(|| Error::InvalidInput(format!("unknown synset `{id}`")))
    }

    /// `−ln(cumulative(s) / total)`.
    pub fn information_content(&self, id: &str) -> Result<f64> {
        self.require(id)?;
        let cum = self.cumulative[id];
        if cum == 0 {
            return Err(Error::UndefinedIc(id.to_string()));
        }
        Ok(-(cum as f64 / self.total as f64).ln())
    }

    /// The synset together with all of its ancestors.
    pub fn ancestors(&self, id: &str) -> BTreeSet<String> {
        let mut seen = BTreeSet::new();
        let mut stack = vec![id.to_string()];
        while let Some(cur) = stack.pop() {
            if let Some(s) = self.synsets.get(&cur) {
                if seen.insert(cur.clone()) {
                    stack.extend(s.parents.iter().cloned());
                }
            }
        }
        seen
    }

    /// Common ancestor with maximal IC (minimal cumulative count); ties go
    /// to the smallest id.
    pub fn least_common_subsumer(&self, a: &str, b: &str) -> Result<String> {
        self.require(a)?;
        self.require(b)?;
        let anc_a = self.ancestors(a);
        let anc_b = self.ancestors(b);
        anc_a
            .intersection(&anc_b)
            .min_by(|x, y| self.cumulative[*x].cmp(&self.cumulative[*y]).then_with(|| x.cmp(y)))
            .cloned()
            .ok_or_else(|| Error::Validation(format!("no common ancestor for `{a}` and `{b}`")))
    }

    /// `2 · IC(LCS) / (IC(a) + IC(b))`.
    pub fn relation_score(&self, a: &str, b: &str) -> Result<f64> {
        let ic_a = self.information_content(a)?;
        let ic_b = self.information_content(b)?;
        let denom = ic_a + ic_b;
        if denom == 0.0 {
            return if a == b {
                Ok(1.0)
            } else {
                Err(Error::Undefined(format!("relation score of `{a}` and `{b}` has a zero denominator")))
            };
        }
        let lcs = self.least_common_subsumer(a, b)?;
        Ok(2.0 * self.information_content(&lcs)? / denom)
    }

    /// Synsets sharing at least one parent with `id`, in file order.
    pub fn siblings(&self, id: &str) -> Vec<&str> {
        let Some(s) = self.synsets.get(id) else { return Vec::new() };
        let mut out: Vec<&str> = Vec::new();
        for p in &s.parents {
            for c in self.children(p) {
                if c != id && !out.contains(&c.as_str()) {
                    out.push(c);
                }
            }
        }
        out
    }

    /// Gloss words, lowercased and split on non-alphanumerics.
    pub fn gloss_terms(&self, id: &str) -> Vec<String> {
        self.synsets.get(id).map_or_else(Vec::new, |s| {
            s.gloss
                .split(|c: char| !c.is_alphanumeric())
                .filter(|w| !w.is_empty())
                .map(str::to_lowercase)
                .collect()
        })
    }
}

/// Three-colour DFS over parent links.
fn check_acyclic(synsets: &BTreeMap<String, Synset>, order: &[String]) -> Result<()> {
    #[derive(Clone, Copy, PartialEq)]
    enum Mark {
        Active,
        Done,
    }
    let mut marks: HashMap<&str, Mark> = HashMap::new();
    for start in order {
        if marks.contains_key(start.as_str()) {
            continue;
        }
        // (node, index of the next parent to visit)
        let mut stack: Vec<(&str, usize)> = vec![(start, 0)];
        marks.insert(start, Mark::Active);
        while let Some(top) = stack.last_mut() {
            let (node, next) = *top;
            let parents = &synsets[node].parents;
            if next < parents.len() {
                top.1 += 1;
                let p = parents[next].as_str();
                match marks.get(p) {
                    Some(Mark::Active) => {
                        return Err(Error::Validation(format!("cycle through synset `{p}`")));
                    }
                    Some(Mark::Done) => {}
                    None => {
                        marks.insert(p, Mark::Active);
                        stack.push((p, 0));
                    }
                }
            } else {
                marks.insert(node, Mark::Done);
                stack.pop();
            }
        }
    }
    Ok(())
}

fn push_unique(v: &mut Vec<String>, id: &str) {
    if !v.iter().any(|x| x == id) {
        v.push(id.to_string());
    }
}

fn parse_synset_line(line: &str) -> std::result::Result<Synset, String> {
    let rest = line.strip_prefix("SYNSET ").ok_or("line must start with `SYNSET `")?;
    let (id, mut rest) = rest.split_once(' ').ok_or("missing fields after synset id")?;
    let mut words = None;
    let mut parents = None;
    let mut count = None;
    let mut gloss = None;
    loop {
        rest = rest.trim_start();
        if rest.is_empty() {
            break;
        }
        let (key, after) = rest.split_once('=').ok_or_else(|| format!("expected key=value near `{rest}`"))?;
        let (value, remaining) = if let Some(quoted) = after.strip_prefix('"') {
            let end = quoted.find('"').ok_or("unterminated quoted value")?;
            (&quoted[..end], &quoted[end + 1..])
        } else {
            match after.find(' ') {
                Some(i) => (&after[..i], &after[i..]),
                None => (after, ""),
            }
        };
        let list = |v: &str| -> Vec<String> {
            v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(str::to_lowercase).collect()
        };
        match key {
            "words" => words = Some(list(value)),
            "parents" => parents = Some(value.split(',').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect()),
            "count" => count = Some(value.parse::<u64>().map_err(|_| format!("invalid count `{value}`"))?),
            "gloss" => gloss = Some(value.to_string()),
            other => return Err(format!("unknown synset field `{other}`")),
        }
        rest = remaining;
    }
    let words: Vec<String> = words.ok_or("missing words=")?;
    if words.is_empty() {
        return Err("synset needs at least one word".into());
    }
    Ok(Synset {
        id: id.to_string(),
        words,
        parents: parents.ok_or("missing parents=")?,
        gloss: gloss.unwrap_or_default(),
        count: count.ok_or("missing count=")?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Addition {
    pub term: String,
    pub source_term: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpandedQuery {
    pub base: ParsedQuery,
    pub additions: Vec<Addition>,
    /// Number of synset pairs compared while expanding.
    pub compared_pairs: usize,
}

impl ExpandedQuery {
    pub fn unexpanded(base: ParsedQuery) -> Self {
        Self { base, additions: Vec::new(), compared_pairs: 0 }
    }
}

/// Adds synonyms and sibling-synset lemmas whose relation score to the
/// term's first sense reaches `threshold`.
pub fn expand_query(g: &LexicalGraph, p: &ParsedQuery, threshold: f64) -> Result<ExpandedQuery> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::InvalidInput(format!("expansion threshold {threshold} must lie in (0, 1]")));
    }
    let base_terms: BTreeSet<&str> = p.filtered.iter().map(String::as_str).collect();
    let base_stems: BTreeSet<&str> = p.stems.iter().map(String::as_str).collect();
    let mut additions: Vec<Addition> = Vec::new();
    let mut compared = 0usize;

    let offer = |term: &str, source: &str, score: f64, additions: &mut Vec<Addition>| {
        if base_terms.contains(term) || base_stems.contains(porter::stem(term).as_str()) {
            return;
        }
        match additions.iter_mut().find(|a| a.term == term) {
            Some(a) if a.score < score => {
                a.score = score;
                a.source_term = source.to_string();
            }
            Some(_) => {}
            None => additions.push(Addition { term: term.to_string(), source_term: source.to_string(), score }),
        }
    };

    for term in &p.filtered {
        let Some(sid) = g.first_sense(term) else { continue };
        let sid = sid.to_string();
        let own = g.relation_score(&sid, &sid)?;
        compared += 1;
        if own >= threshold {
            for w in &g.synset(&sid).expect("sense exists").words {
                offer(w, term, own, &mut additions);
            }
        }
        for sib in g.siblings(&sid) {
            let score = g.relation_score(&sid, sib)?;
            compared += 1;
            if score >= threshold {
                for w in &g.synset(sib).expect("sibling exists").words {
                    offer(w, term, score, &mut additions);
                }
            }
        }
    }
    Ok(ExpandedQuery { base: p.clone(), additions, compared_pairs: compared })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::parser::QueryParser;

    #[test]
    fn ic_examples() {
        let g = LexicalGraph::bundled();
        assert_eq!(g.total(), 100);
        assert_eq!(g.information_content("entity").unwrap(), 0.0);
        assert!((g.information_content("animal").unwrap() - 0.5108256237659907).abs() < 1e-12);
        assert!((g.information_content("dog").unwrap() - 1.2039728043259361).abs() < 1e-12);
        assert_eq!(g.cumulative_count("cat"), Some(20));
    }

    #[test]
    fn lcs_examples() {
        let g = LexicalGraph::bundled();
        assert_eq!(g.least_common_subsumer("dog", "cat").unwrap(), "animal");
        assert_eq!(g.least_common_subsumer("dog", "dog").unwrap(), "dog");
        assert_eq!(g.least_common_subsumer("dog", "entity").unwrap(), "entity");
    }

    #[test]
    fn relation_examples() {
        let g = LexicalGraph::bundled();
        assert_eq!(g.relation_score("dog", "dog").unwrap(), 1.0);
        // 2·(−ln 0.6) / (−ln 0.3 − ln 0.2)
        let expected = 2.0 * -(0.6f64.ln()) / (-(0.3f64.ln()) - 0.2f64.ln());
        let got = g.relation_score("dog", "cat").unwrap();
        assert!((got - expected).abs() < 1e-12);
        assert!((got - 0.3632).abs() < 2e-4);
        assert_eq!(g.relation_score("dog", "laptop").unwrap(), 0.0);
        assert_eq!(g.relation_score("entity", "entity").unwrap(), 1.0);
    }

    #[test]
    fn zero_count_has_undefined_ic() {
        let g = LexicalGraph::parse(
            "SYNSET r words=r parents= count=1 gloss=\"root\"\nSYNSET z words=z parents=r count=0 gloss=\"zero\"\n",
        )
        .unwrap();
        assert!(matches!(g.information_content("z"), Err(Error::UndefinedIc(_))));
    }

    #[test]
    fn malformed_graphs_rejected() {
        assert!(LexicalGraph::parse("SYNSET a words=a parents=b count=1\n").is_err());
        assert!(LexicalGraph::parse("SYNSET a words=a parents= count=1\nSYNSET b words=b parents= count=1\n").is_err());
        assert!(LexicalGraph::parse("SYNSET a words=a parents= count=x\n").is_err());
        assert!(LexicalGraph::parse(
            "SYNSET r words=r parents= count=1\nSYNSET a words=a parents=r,b count=1\nSYNSET b words=b parents=a count=1\n"
        )
        .is_err());
    }

    #[test]
    fn expansion_examples() {
        let g = LexicalGraph::bundled();
        let parser = QueryParser::bundled();
        let p = parser.parse("dog");
        let ex = expand_query(&g, &p, 0.3).unwrap();
        let cat = ex.additions.iter().find(|a| a.term == "cat").expect("cat added");
        assert!((cat.score - 0.3632).abs() < 2e-4);
        assert_eq!(cat.source_term, "dog");
        assert!(ex.additions.iter().any(|a| a.term == "hound" && a.score == 1.0));
        assert!(!ex.additions.iter().any(|a| a.term == "bird"));

        let strict = expand_query(&g, &p, 1.0).unwrap();
        assert_eq!(strict.additions.iter().map(|a| a.term.as_str()).collect::<Vec<_>>(), vec!["hound"]);

        let none = expand_query(&g, &parser.parse("zzzz qqqq"), 0.3).unwrap();
        assert!(none.additions.is_empty());
        assert!(expand_query(&g, &p, 0.0).is_err());
    }
}
