//! Intent keywords, sentence types and the contextual fuzzy rule system.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fixtures;
use crate::parser::{porter, ParsedQuery, PosTag, QueryParser};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Intent {
    Informational,
    Navigational,
    Transactional,
}

impl Intent {
    /// Also the tie-break order.
    pub const ALL: [Intent; 3] = [Intent::Informational, Intent::Navigational, Intent::Transactional];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn code(self) -> &'static str {
        match self {
            Intent::Informational => "I",
            Intent::Navigational => "N",
            Intent::Transactional => "T",
        }
    }
}

impl fmt::Display for Intent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for Intent {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "I" => Ok(Intent::Informational),
            "N" => Ok(Intent::Navigational),
            "T" => Ok(Intent::Transactional),
            other => Err(Error::InvalidInput(format!("unknown intent `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SentenceType {
    Interrogative,
    Statement,
    Imperative,
    Other,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeywordPattern {
    pub tokens: Vec<String>,
    pub stems: Vec<String>,
    pub intent: Intent,
    pub strength: f64,
}

/// Keyword patterns of all three classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeywordTables {
    patterns: Vec<KeywordPattern>,
}

fn parse_table(raw: &str, intent: Intent, out: &mut Vec<KeywordPattern>) -> Result<()> {
    for (i, line) in raw.lines().enumerate() {
        let line = line.trim_end();
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let (pat, strength) = match line.split_once('\t') {
            Some((p, s)) => {
                let s: f64 = s.trim().parse().map_err(|_| Error::parse(i + 1, format!("bad strength `{s}`")))?;
                (p, s)
            }
            None => (line, 1.0),
        };
        if !(strength > 0.0 && strength <= 1.0) {
            return Err(Error::parse(i + 1, format!("strength {strength} outside (0, 1]")));
        }
        let tokens: Vec<String> = pat.split_whitespace().map(str::to_lowercase).collect();
        if tokens.is_empty() {
            return Err(Error::parse(i + 1, "empty pattern"));
        }
        let stems = tokens.iter().map(|t| porter::stem(t)).collect();
        out.push(KeywordPattern { tokens, stems, intent, strength });
    }
    Ok(())
}

impl KeywordTables {
    pub fn parse(informational: &str, navigational: &str, transactional: &str) -> Result<Self> {
        let mut patterns = Vec::new();
        parse_table(informational, Intent::Informational, &mut patterns)?;
        parse_table(navigational, Intent::Navigational, &mut patterns)?;
        parse_table(transactional, Intent::Transactional, &mut patterns)?;
        let mut seen: BTreeMap<&[String], Intent> = BTreeMap::new();
        for p in &patterns {
            if let Some(prev) = seen.insert(&p.tokens, p.intent) {
                return Err(Error::Config(format!(
                    "keyword `{}` listed for both {prev} and {}",
                    p.tokens.join(" "),
                    p.intent
                )));
            }
        }
        // Longest pattern first; file order among equals.
        patterns.sort_by_key(|p| std::cmp::Reverse(p.tokens.len()));
        Ok(Self { patterns })
    }

    pub fn bundled() -> Self {
        Self::parse(fixtures::INTENT_INFORMATIONAL, fixtures::INTENT_NAVIGATIONAL, fixtures::INTENT_TRANSACTIONAL)
            .expect("bundled keyword tables are valid")
    }

    pub fn empty() -> Self {
        Self { patterns: Vec::new() }
    }

    pub fn patterns(&self) -> &[KeywordPattern] {
        &self.patterns
    }

    /// Scales every strength by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        let mut t = self.clone();
        t.patterns.iter_mut().for_each(|p| p.strength *= factor);
        t
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeywordHit {
    pub pattern: String,
    pub intent: Intent,
    pub strength: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IntentKeywordHits {
    pub hits: Vec<KeywordHit>,
}

impl IntentKeywordHits {
    /// Summed strength of one class.
    pub fn strength(&self, intent: Intent) -> f64 {
        self.hits.iter().filter(|h| h.intent == intent).map(|h| h.strength).sum()
    }
}

/// Left-to-right scan of the normalized tokens taking the longest pattern
/// at each position; tokens match exactly or by stem.
pub fn extract_intent_keywords(p: &ParsedQuery, tables: &KeywordTables) -> IntentKeywordHits {
    let toks = &p.normalized;
    let stems: Vec<String> = toks.iter().map(|t| porter::stem(t)).collect();
    let mut hits = Vec::new();
    let mut i = 0;
    while i < toks.len() {
        let found = tables.patterns.iter().find(|pat| {
            let n = pat.tokens.len();
            i + n <= toks.len()
                && (0..n).all(|k| toks[i + k] == pat.tokens[k] || stems[i + k] == pat.stems[k])
        });
        match found {
            Some(pat) => {
                hits.push(KeywordHit { pattern: pat.tokens.join(" "), intent: pat.intent, strength: pat.strength });
                i += pat.tokens.len();
            }
            None => i += 1,
        }
    }
    IntentKeywordHits { hits }
}

/// A trailing `?` or a leading WH word makes a question, a leading verb an
/// imperative; anything else non-empty is a statement.
pub fn identify_sentence_type(p: &ParsedQuery, parser: &QueryParser) -> SentenceType {
    if p.original.trim_end().ends_with('?') {
        return SentenceType::Interrogative;
    }
    let Some(first) = p.normalized.first() else { return SentenceType::Other };
    match parser.tag_word(first, &porter::stem(first)) {
        PosTag::Wh => SentenceType::Interrogative,
        PosTag::Verb => SentenceType::Imperative,
        _ => SentenceType::Statement,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FuzzyRule {
    pub keywords: Intent,
    pub category: SentenceType,
    pub intent: Intent,
    pub weight: f64,
    /// Shadow rules fire when the sentence type does not match `category`.
    pub shadow: bool,
}

impl FuzzyRule {
    pub fn activation(&self, hits: &IntentKeywordHits, st: SentenceType) -> f64 {
        let compat = if self.shadow { st != self.category } else { st == self.category };
        if compat {
            hits.strength(self.keywords)
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleConfig {
    pub primary_weight: f64,
    pub shadow_weight: f64,
    /// `(intent, token) → multiplier`.
    pub context: BTreeMap<(Intent, String), f64>,
}

impl Default for RuleConfig {
    fn default() -> Self {
        Self { primary_weight: 1.0, shadow_weight: 0.5, context: BTreeMap::new() }
    }
}

/// Parses `intent<TAB>token<TAB>multiplier` lines.
pub fn parse_context_table(raw: &str) -> Result<BTreeMap<(Intent, String), f64>> {
    let mut out = BTreeMap::new();
    for (i, line) in raw.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 3 {
            return Err(Error::parse(i + 1, "context line needs intent, token and multiplier"));
        }
        let intent: Intent = cols[0].trim().parse().map_err(|e: Error| Error::parse(i + 1, e.to_string()))?;
        let m: f64 = cols[2].trim().parse().map_err(|_| Error::parse(i + 1, format!("bad multiplier `{}`", cols[2])))?;
        if !(m > 0.0) {
            return Err(Error::parse(i + 1, "multiplier must be positive"));
        }
        out.insert((intent, cols[1].trim().to_lowercase()), m);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FuzzyRulebook {
    pub rules: Vec<FuzzyRule>,
    pub context: BTreeMap<(Intent, String), f64>,
    pub mu: f64,
    pub sigma: f64,
    /// Rule generation time.
    pub rgt_ms: f64,
}

pub const SIGMA_FLOOR: f64 = 0.1;
pub const MEMBERSHIP_FLOOR: f64 = 1e-6;

/// Three primary rules pairing each keyword class with its sentence type,
/// plus one shadow rule each for mismatched types.
pub fn generate_rules(cfg: &RuleConfig) -> FuzzyRulebook {
    let start = Instant::now();
    let pairs = [
        (Intent::Informational, SentenceType::Interrogative),
        (Intent::Navigational, SentenceType::Statement),
        (Intent::Transactional, SentenceType::Imperative),
    ];
    let mut rules = Vec::with_capacity(6);
    for shadow in [false, true] {
        for (intent, category) in pairs {
            rules.push(FuzzyRule {
                keywords: intent,
                category,
                intent,
                weight: if shadow { cfg.shadow_weight } else { cfg.primary_weight },
                shadow,
            });
        }
    }
    FuzzyRulebook {
        rules,
        context: cfg.context.clone(),
        mu: 1.0,
        sigma: 1.0,
        rgt_ms: start.elapsed().as_secs_f64() * 1e3,
    }
}

impl FuzzyRulebook {
    /// Sets `mu` and `sigma` from the non-zero activations observed.
    pub fn calibrate(&mut self, activations: impl IntoIterator<Item = f64>) {
        let xs: Vec<f64> = activations.into_iter().filter(|a| *a != 0.0).collect();
        if xs.is_empty() {
            self.mu = 1.0;
            self.sigma = 1.0;
            return;
        }
        let n = xs.len() as f64;
        let mu = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / n;
        self.mu = mu;
        self.sigma = if xs.len() >= 2 { var.sqrt().max(SIGMA_FLOOR) } else { 1.0 };
    }

    pub fn activations(&self, hits: &IntentKeywordHits, st: SentenceType) -> Vec<f64> {
        self.rules.iter().map(|r| r.activation(hits, st)).collect()
    }

    /// Product of context multipliers for the tokens present.
    pub fn context_factor(&self, intent: Intent, context: &[String]) -> f64 {
        context.iter().filter_map(|t| self.context.get(&(intent, t.clone()))).product()
    }
}

/// Contextual Gaussian membership.
pub fn clmf(rb: &FuzzyRulebook, intent: Intent, activation: f64, context: &[String]) -> Result<f64> {
    if !(rb.sigma > 0.0) {
        return Err(Error::Uncalibrated);
    }
    let gauss = (-(activation - rb.mu).powi(2) / (2.0 * rb.sigma * rb.sigma)).exp()
        / (rb.sigma * (2.0 * std::f64::consts::PI).sqrt());
    Ok(rb.context_factor(intent, context) * gauss)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fuzzified {
    /// `D^B` per intent.
    pub decision: [f64; 3],
    /// Floored membership of each intent's dominant rule.
    pub membership: [f64; 3],
    /// Membership of every rule, unfloored.
    pub rule_memberships: Vec<f64>,
}

/// Per intent: weighted activation sum divided by the (floored) membership
/// of its dominant rule.
pub fn fuzzify(
    hits: &IntentKeywordHits,
    st: SentenceType,
    rb: &FuzzyRulebook,
    context: &[String],
) -> Result<Fuzzified> {
    let acts = rb.activations(hits, st);
    let rule_memberships = rb
        .rules
        .iter()
        .zip(&acts)
        .map(|(r, &a)| clmf(rb, r.intent, a, context))
        .collect::<Result<Vec<_>>>()?;
    let mut decision = [0.0; 3];
    let mut membership = [0.0; 3];
    for intent in Intent::ALL {
        let mut numerator = 0.0;
        let mut dominant: Option<(f64, usize)> = None;
        for (k, r) in rb.rules.iter().enumerate().filter(|(_, r)| r.intent == intent) {
            let contrib = acts[k] * r.weight;
            numerator += contrib;
            if dominant.is_none_or(|(best, _)| contrib > best) {
                dominant = Some((contrib, k));
            }
        }
        let lm = dominant.map_or_else(|| clmf(rb, intent, 0.0, context), |(_, k)| Ok(rule_memberships[k]))?;
        let lm = lm.max(MEMBERSHIP_FLOOR);
        decision[intent.index()] = numerator / lm;
        membership[intent.index()] = lm;
    }
    Ok(Fuzzified { decision, membership, rule_memberships })
}

/// Centroid-style crisp score and the intent with the largest `D^B · L^M`.
/// Near-equal products (relative 1e-12) resolve in I, N, T order.
pub fn defuzzify(db: &[f64; 3], lm: &[f64; 3]) -> Result<(f64, Intent)> {
    let total: f64 = lm.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Undecided);
    }
    let products: Vec<f64> = db.iter().zip(lm).map(|(d, l)| d * l).collect();
    let crisp = products.iter().sum::<f64>() / total;
    let mut best = 0;
    for k in 1..3 {
        let (a, b) = (products[k], products[best]);
        if a > b + 1e-12 * a.abs().max(b.abs()) {
            best = k;
        }
    }
    Ok((crisp, Intent::ALL[best]))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IntentTimings {
    pub rgt_ms: f64,
    pub ft_ms: f64,
    pub dft_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntentDecision {
    pub hits: IntentKeywordHits,
    pub sentence_type: SentenceType,
    pub activations: Vec<f64>,
    pub memberships: Vec<f64>,
    pub fuzzified: [f64; 3],
    pub intent_memberships: [f64; 3],
    pub crisp: f64,
    pub intent: Intent,
    pub iterations: usize,
    pub timings: IntentTimings,
}

/// Runs rules, membership, fuzzification and defuzzification until the
/// decided intent repeats or `t_max` iterations pass.
pub fn detect_intent(
    p: &ParsedQuery,
    parser: &QueryParser,
    tables: &KeywordTables,
    rb: &FuzzyRulebook,
    t_max: usize,
) -> Result<IntentDecision> {
    if t_max == 0 {
        return Err(Error::InvalidInput("t_max must be at least 1".into()));
    }
    let hits = extract_intent_keywords(p, tables);
    let st = identify_sentence_type(p, parser);
    let mut timings = IntentTimings { rgt_ms: rb.rgt_ms, ..Default::default() };
    let mut last: Option<IntentDecision> = None;
    for t in 1..=t_max {
        let start = Instant::now();
        let fz = fuzzify(&hits, st, rb, &p.normalized)?;
        timings.ft_ms += start.elapsed().as_secs_f64() * 1e3;
        let start = Instant::now();
        let (crisp, intent) = defuzzify(&fz.decision, &fz.membership)?;
        timings.dft_ms += start.elapsed().as_secs_f64() * 1e3;
        let stable = last.as_ref().is_some_and(|d| d.intent == intent);
        last = Some(IntentDecision {
            hits: hits.clone(),
            sentence_type: st,
            activations: rb.activations(&hits, st),
            memberships: fz.rule_memberships,
            fuzzified: fz.decision,
            intent_memberships: fz.membership,
            crisp,
            intent,
            iterations: t,
            timings: timings.clone(),
        });
        if stable {
            break;
        }
    }
    Ok(last.expect("at least one iteration"))
}

/// A labelled query line of the intent fixture.
pub fn parse_labelled_queries(raw: &str) -> Result<Vec<(Intent, String)>> {
    let mut out = Vec::new();
    for (i, line) in raw.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let (label, q) = line.split_once('\t').ok_or_else(|| Error::parse(i + 1, "expected label<TAB>query"))?;
        let intent: Intent = label.trim().parse().map_err(|e: Error| Error::parse(i + 1, e.to_string()))?;
        out.push((intent, q.trim().to_string()));
    }
    Ok(out)
}
