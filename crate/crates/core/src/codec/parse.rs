//! Generated text → annotations, with a hallucination status.
//!
//! Parsing tries the exact template grammar first. Output that only partly
//! follows it, or follows a recognizable alternate phrasing, is
//! `Interpretable` and keeps whatever clauses could be recovered. Output
//! with nothing recoverable is `Nonlogical` when it has no letters or when
//! more than half of its word trigrams are repeats, `Irrelevant` when it
//! reads as ordinary prose free of template keywords, and `Nonlogical`
//! otherwise.

use std::collections::{BTreeSet, HashMap};
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::{
    Annotations, Codec, ConceptAnnotation, Dimension, LabelAnnotation, Mention,
    NormalizationAnnotation, RelationAnnotation, Slot, Source, TaskKind, NO_CUI,
};
use crate::codec::lexicon::CuiLookup;
use crate::error::{Error, Result};

macro_rules! regex {
    ($pat:expr) => {{
        static RE: OnceLock<Regex> = OnceLock::new();
        RE.get_or_init(|| Regex::new($pat).expect("valid pattern"))
    }};
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Status {
    WellFormed,
    Interpretable,
    Irrelevant,
    Nonlogical,
}

impl Status {
    pub const ALL: [Status; 4] = [
        Status::WellFormed,
        Status::Interpretable,
        Status::Irrelevant,
        Status::Nonlogical,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Status::WellFormed => "WellFormed",
            Status::Interpretable => "Interpretable",
            Status::Irrelevant => "Irrelevant",
            Status::Nonlogical => "Nonlogical",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedOutput {
    pub status: Status,
    pub predictions: Annotations,
}

pub const TEMPLATE_KEYWORDS: [&str; 6] = [
    "extracted",
    "relation",
    "sense",
    "category",
    "normalized",
    "hypothesis",
];

fn words(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Fraction of word-trigram occurrences whose trigram occurs more than once.
pub fn repetition_share(text: &str) -> f64 {
    let w = words(text);
    if w.len() < 3 {
        return 0.0;
    }
    let mut counts: HashMap<&[String], usize> = HashMap::new();
    for t in w.windows(3) {
        *counts.entry(t).or_default() += 1;
    }
    let total = w.len() - 2;
    let repeated: usize = counts.values().filter(|&&c| c > 1).sum();
    repeated as f64 / total as f64
}

fn keyword_count(text: &str) -> usize {
    let lower = text.to_lowercase();
    TEMPLATE_KEYWORDS.iter().filter(|k| lower.contains(*k)).count()
}

/// At least four words, most of them purely alphabetic.
fn fluent(text: &str) -> bool {
    let w = words(text);
    let alpha = w.iter().filter(|t| t.chars().all(char::is_alphabetic)).count();
    w.len() >= 4 && alpha as f64 >= 0.6 * w.len() as f64
}

#[derive(Clone, Copy)]
enum Fold {
    Exact,
    Case,
    Loose,
}

fn same_char(a: char, b: char) -> bool {
    a == b || a.to_lowercase().eq(b.to_lowercase())
}

/// Source text prepared for re-anchoring generated strings.
struct Anchor {
    chars: Vec<char>,
}

impl Anchor {
    fn new(text: &str) -> Self {
        Anchor {
            chars: text.chars().collect(),
        }
    }

    fn mention(&self, start: usize, end: usize) -> Mention {
        Mention {
            start,
            end,
            text: self.chars[start..end].iter().collect(),
        }
    }

    /// End of a match of `pat` starting at `i`.
    fn match_at(&self, i: usize, pat: &[char], fold: Fold) -> Option<usize> {
        let src = &self.chars;
        match fold {
            Fold::Exact => (src.len() >= i + pat.len() && src[i..i + pat.len()] == *pat)
                .then_some(i + pat.len()),
            Fold::Case => (src.len() >= i + pat.len()
                && src[i..i + pat.len()].iter().zip(pat).all(|(&a, &b)| same_char(a, b)))
            .then_some(i + pat.len()),
            Fold::Loose => {
                let (mut s, mut p) = (i, 0);
                if src.get(s).is_none_or(|c| c.is_whitespace()) {
                    return None;
                }
                while p < pat.len() {
                    if pat[p].is_whitespace() {
                        while p < pat.len() && pat[p].is_whitespace() {
                            p += 1;
                        }
                        if !src.get(s)?.is_whitespace() {
                            return None;
                        }
                        while src.get(s).is_some_and(|c| c.is_whitespace()) {
                            s += 1;
                        }
                    } else {
                        if !same_char(*src.get(s)?, pat[p]) {
                            return None;
                        }
                        s += 1;
                        p += 1;
                    }
                }
                Some(s)
            }
        }
    }

    /// Leftmost occurrence accepted by the first filter that admits one,
    /// preferring exact over case-folded over whitespace-loose matches.
    fn find(&self, pat: &str, filters: &[&dyn Fn(usize, usize) -> bool]) -> Option<Mention> {
        let pat: Vec<char> = pat.trim().chars().collect();
        if pat.is_empty() {
            return None;
        }
        for fold in [Fold::Exact, Fold::Case, Fold::Loose] {
            for accept in filters {
                for i in 0..self.chars.len() {
                    if let Some(end) = self.match_at(i, &pat, fold) {
                        if accept(i, end) {
                            return Some(self.mention(i, end));
                        }
                    }
                }
            }
        }
        None
    }
}

fn loosely_equal(a: &str, b: &str) -> bool {
    let norm = |s: &str| s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase();
    norm(a) == norm(b)
}

/// True when everything outside `ranges` is punctuation, whitespace or one
/// of the allowed phrases.
fn gaps_clean(text: &str, ranges: &[(usize, usize)], phrases: &[&str]) -> bool {
    let mut bounds: Vec<(usize, usize)> = ranges.to_vec();
    bounds.sort();
    let mut prev = 0;
    let mut gaps = Vec::new();
    for &(s, e) in &bounds {
        gaps.push(&text[prev..s.max(prev)]);
        prev = e.max(prev);
    }
    gaps.push(&text[prev..]);
    gaps.into_iter().all(|g| {
        let mut g = g.to_lowercase();
        for p in phrases {
            g = g.replace(p, "");
        }
        g.chars().all(|c| c.is_whitespace() || c == '.' || c == ';')
    })
}

struct Extraction {
    predictions: Annotations,
    /// Text follows the template grammar with no leftovers.
    strict: bool,
    /// Some clause had an unknown label or an unanchorable string.
    dropped: bool,
}

/// Mentions claimed so far by list-valued predictions.
#[derive(Default)]
struct Cursor {
    consumed: BTreeSet<(usize, usize)>,
    prev_start: usize,
}

impl Cursor {
    fn claim(&mut self, src: &Anchor, surface: &str) -> Option<Mention> {
        let prev = self.prev_start;
        let consumed = &self.consumed;
        let after = |s: usize, e: usize| s >= prev && !consumed.contains(&(s, e));
        let anywhere = |s: usize, e: usize| !consumed.contains(&(s, e));
        let m = src.find(surface, &[&after, &anywhere])?;
        self.consumed.insert((m.start, m.end));
        self.prev_start = m.start;
        Some(m)
    }
}

fn text_source(kind: TaskKind, source: &Source) -> Result<&str> {
    source
        .text()
        .ok_or_else(|| Error::contract(format!("{kind}: parsing needs the source text")))
}

impl Codec {
    /// Generated text → predictions. Total over content: only a missing
    /// source text is an error. `expected_pairs` are the marked candidate
    /// arguments of a relation input, if any.
    pub fn parse_output(
        &self,
        kind: TaskKind,
        generated: &str,
        source: &Source,
        expected_pairs: &[(Mention, Mention)],
    ) -> Result<ParsedOutput> {
        let text = generated.split_whitespace().collect::<Vec<_>>().join(" ");
        let ex = match kind {
            TaskKind::Concept => self.parse_concepts(&text, &Anchor::new(text_source(kind, source)?)),
            TaskKind::Relation => {
                self.parse_relations(&text, &Anchor::new(text_source(kind, source)?), expected_pairs)
            }
            TaskKind::Normalization => {
                self.parse_normalizations(&text, &Anchor::new(text_source(kind, source)?))
            }
            TaskKind::Wsd => self.parse_wsd(&text, &Anchor::new(text_source(kind, source)?)),
            TaskKind::Nli => self.parse_nli(&text),
            TaskKind::Medication => {
                self.parse_medication(&text, &Anchor::new(text_source(kind, source)?))
            }
            TaskKind::ProgressNote => self.parse_progress(&text),
        };
        let status = if ex.strict {
            if ex.dropped {
                Status::Interpretable
            } else {
                Status::WellFormed
            }
        } else if !ex.predictions.is_empty() {
            Status::Interpretable
        } else if !text.chars().any(char::is_alphabetic) || repetition_share(&text) > 0.5 {
            Status::Nonlogical
        } else if fluent(&text) && keyword_count(&text) == 0 {
            Status::Irrelevant
        } else {
            Status::Nonlogical
        };
        let predictions = match status {
            Status::WellFormed | Status::Interpretable => ex.predictions.sorted(),
            _ => Annotations::empty_for(kind),
        };
        Ok(ParsedOutput { status, predictions })
    }

    fn parse_concepts(&self, text: &str, src: &Anchor) -> Extraction {
        let starts: Vec<usize> = regex!(r"(?i)the extracted\s")
            .find_iter(text)
            .map(|m| m.start())
            .collect();
        let mut strict = match starts.first() {
            Some(&s) => text[..s].trim().is_empty(),
            None => text.is_empty(),
        };
        let mut dropped = false;
        let mut out = Vec::new();
        let mut cursor = Cursor::default();
        for (k, &s) in starts.iter().enumerate() {
            let last = k + 1 == starts.len();
            let e = starts.get(k + 1).copied().unwrap_or(text.len());
            let mut seg = text[s..e].trim_end();
            match seg.strip_suffix(if last { '.' } else { ';' }) {
                Some(rest) => seg = rest.trim_end(),
                None if !last => strict = false,
                None => {}
            }
            let (label, surface) =
                if let Some(c) = regex!(r"(?i)^the extracted\s+(.+?)\s+entity\s+is\s+(.+)$").captures(seg) {
                    (self.canonical_concept_label(&c[1]), c[2].to_string())
                } else if let Some((label, c)) = regex!(r"(?i)^the extracted\s+(.+?)\s+is\s+(.+)$")
                    .captures(seg)
                    .and_then(|c| self.canonical_concept_label(&c[1]).map(|l| (l, c)))
                {
                    strict = false;
                    (Some(label), c[2].to_string())
                } else {
                    strict = false;
                    continue;
                };
            let Some(label) = label else {
                dropped = true;
                continue;
            };
            match cursor.claim(src, &surface) {
                Some(m) => out.push(ConceptAnnotation::new(m, label)),
                None => dropped = true,
            }
        }
        Extraction {
            predictions: Annotations::Concepts(out),
            strict,
            dropped,
        }
    }

    fn alternate_relation(&self, t1: &str, x1: &str, t2: &str, x2: &str, printed: &str) -> Option<(String, String, String)> {
        let (t1, t2) = (t1.trim(), t2.trim());
        if let Some(l) = self.canonical_relation_label(&format!("{t2}-{t1}")) {
            return Some((l, x2.to_string(), x1.to_string()));
        }
        if let Some(l) = self.canonical_relation_label(&format!("{t1}-{t2}")) {
            return Some((l, x1.to_string(), x2.to_string()));
        }
        self.canonical_relation_label(printed)
            .map(|l| (l, x1.to_string(), x2.to_string()))
    }

    fn parse_relations(&self, text: &str, src: &Anchor, pairs: &[(Mention, Mention)]) -> Extraction {
        let canonical = regex!(
            r#"(?i)the relation between\s*[“"]\s*(.*?)\s*[”"]\s*and\s*[“"]\s*(.*?)\s*[”"]\s*is\s*[“"]\s*(.*?)\s*[”"]"#
        );
        let alternate = regex!(
            r#"(?i)the relation(?:\s+type)?\s+between\s+(?:the\s+)?(.+?)\s+entity\s*[“"]\s*(.*?)\s*[”"]\s*and\s+(?:the\s+)?(.+?)\s+entity\s*[“"]\s*(.*?)\s*[”"]\s*is\s*[“"]\s*(.*?)\s*[”"]"#
        );
        let mut ranges = Vec::new();
        let mut clauses: Vec<(Option<String>, String, String)> = Vec::new();
        for c in canonical.captures_iter(text) {
            let m = c.get(0).expect("whole match");
            ranges.push((m.start(), m.end()));
            clauses.push((self.canonical_relation_label(&c[3]), c[1].to_string(), c[2].to_string()));
        }
        let mut strict = gaps_clean(text, &ranges, &[]);
        if clauses.is_empty() {
            for c in alternate.captures_iter(text) {
                strict = false;
                match self.alternate_relation(&c[1], &c[2], &c[3], &c[4], &c[5]) {
                    Some((l, a1, a2)) => clauses.push((Some(l), a1, a2)),
                    None => clauses.push((None, c[2].to_string(), c[4].to_string())),
                }
            }
        }

        let mut dropped = false;
        let mut out = Vec::new();
        let mut prev: Option<(Mention, Mention)> = None;
        for (label, a1, a2) in clauses {
            let Some(label) = label else {
                dropped = true;
                continue;
            };
            let marked = pairs
                .iter()
                .find(|(p1, p2)| loosely_equal(&a1, &p1.text) && loosely_equal(&a2, &p2.text))
                .cloned();
            let found = marked.or_else(|| {
                let floor = prev.as_ref().map_or(0, |p| p.0.start);
                let m1 = src.find(&a1, &[&|s, _| s >= floor, &|_, _| true])?;
                let m2 = match &prev {
                    Some((q1, q2)) if *q1 == m1 => {
                        let after = |s: usize, e: usize| s >= q2.start && (s, e) != (q2.start, q2.end);
                        src.find(&a2, &[&after, &|_, _| true])?
                    }
                    _ => src.find(&a2, &[&|_, _| true])?,
                };
                Some((m1, m2))
            });
            let Some((arg1, arg2)) = found else {
                dropped = true;
                continue;
            };
            prev = Some((arg1.clone(), arg2.clone()));
            out.push(RelationAnnotation { arg1, arg2, label });
        }
        Extraction {
            predictions: Annotations::Relations(out),
            strict,
            dropped,
        }
    }

    fn parse_normalizations(&self, text: &str, src: &Anchor) -> Extraction {
        let re = regex!(
            r#"(?i)the normalized string of the disorder concept\s*[“"]\s*(.*?)\s*[”"]\s*is\s*[“"]\s*(.*?)\s*[”"]"#
        );
        let mut ranges = Vec::new();
        let mut out = Vec::new();
        let mut dropped = false;
        let mut cursor = Cursor::default();
        for c in re.captures_iter(text) {
            let m = c.get(0).expect("whole match");
            ranges.push((m.start(), m.end()));
            let Some(mention) = cursor.claim(src, &c[1]) else {
                dropped = true;
                continue;
            };
            let name = c[2].trim();
            let (cui, preferred_name) = match self.lexicon.lookup(name) {
                CuiLookup::Found { cui, .. } => {
                    let spelled = self.lexicon.spelling(&cui, name).unwrap_or(name).to_string();
                    (cui, spelled)
                }
                CuiLookup::NoCui => (NO_CUI.to_string(), name.to_string()),
            };
            out.push(NormalizationAnnotation {
                mention,
                cui,
                preferred_name,
            });
        }
        Extraction {
            strict: gaps_clean(text, &ranges, &[]),
            predictions: Annotations::Normalizations(out),
            dropped,
        }
    }

    fn sense_of(&self, src: &Anchor, abbr: &str, sense: &str) -> Option<LabelAnnotation> {
        let key = self
            .senses
            .keys()
            .find(|k| k.eq_ignore_ascii_case(abbr.trim()))?;
        let label = self.canonical_label(Slot::Sense, Some(key), sense)?;
        let focus = src.find(abbr, &[&|_, _| true])?;
        Some(LabelAnnotation {
            slot: Slot::Sense,
            focus: Some(focus),
            label,
        })
    }

    fn parse_wsd(&self, text: &str, src: &Anchor) -> Extraction {
        let re = regex!(
            r#"(?i)the sense of (?:the\s+)?abbreviation\s*[“"]\s*(.*?)\s*[”"]\s*is\s*[“"]\s*(.*?)\s*[”"]"#
        );
        let alternate = regex!(
            r#"(?i)abbreviation\s*[“"]\s*(.*?)\s*[”"]\s*(?:means|stands for|refers to|is short for)\s*[“"]?\s*([^”".;]+)"#
        );
        let found: Vec<_> = re.captures_iter(text).collect();
        let ranges: Vec<(usize, usize)> = found
            .iter()
            .map(|c| c.get(0).map(|m| (m.start(), m.end())).expect("whole match"))
            .collect();
        let strict = found.len() == 1 && gaps_clean(text, &ranges, &[]);
        let clause = found
            .first()
            .map(|c| (c[1].to_string(), c[2].to_string()))
            .or_else(|| alternate.captures(text).map(|c| (c[1].to_string(), c[2].to_string())));
        let mut out = Vec::new();
        let mut dropped = false;
        if let Some((abbr, sense)) = clause {
            match self.sense_of(src, &abbr, &sense) {
                Some(l) => out.push(l),
                None => dropped = true,
            }
        }
        Extraction {
            predictions: Annotations::Labels(out),
            strict,
            dropped,
        }
    }

    fn parse_nli(&self, text: &str) -> Extraction {
        let re = regex!(
            r#"(?i)the hypothesis that\s*[“"](.*?)[”"]\s*is\s+(\w+)\s+to\s+the premise that\s*[“"](.*?)[”"]"#
        );
        let found: Vec<_> = re.captures_iter(text).collect();
        let ranges: Vec<(usize, usize)> = found
            .iter()
            .map(|c| c.get(0).map(|m| (m.start(), m.end())).expect("whole match"))
            .collect();
        let strict = found.len() == 1 && gaps_clean(text, &ranges, &[]);
        let mut out = Vec::new();
        let mut dropped = false;
        let label = match found.first() {
            Some(c) => {
                let l = self.canonical_label(Slot::Inference, None, &c[2]);
                dropped = l.is_none();
                l
            }
            None => {
                let lower = text.to_lowercase();
                let cues: BTreeSet<&str> = [("entail", "entailment"), ("contradict", "contradiction"), ("neutral", "neutral")]
                    .into_iter()
                    .filter(|(stem, _)| lower.contains(stem))
                    .map(|(_, l)| l)
                    .collect();
                let on_topic = lower.contains("hypothesis") || lower.contains("premise");
                match cues.into_iter().collect::<Vec<_>>().as_slice() {
                    [l] if on_topic => Some(l.to_string()),
                    _ => None,
                }
            }
        };
        if let Some(label) = label {
            out.push(LabelAnnotation {
                slot: Slot::Inference,
                focus: None,
                label,
            });
        }
        Extraction {
            predictions: Annotations::Labels(out),
            strict,
            dropped,
        }
    }

    fn parse_medication(&self, text: &str, src: &Anchor) -> Extraction {
        let event = regex!(
            r#"(?i)the category of medication event\s*[“"]\s*(.*?)\s*[”"]\s*is\s*[“"]\s*(.*?)\s*[”"]"#
        );
        let context = regex!(
            r#"(?i)the category of disposition event\s*[“"]\s*(.*?)\s*[”"]\s*from the dimension of\s+(\w+)\s+is\s*[“"]\s*(.*?)\s*[”"]"#
        );
        let mut ranges = Vec::new();
        let mut out: Vec<LabelAnnotation> = Vec::new();
        let mut dropped = false;
        let mut push = |slot: Slot, focus: &str, label: Option<String>, out: &mut Vec<LabelAnnotation>| {
            let focus = src.find(focus, &[&|_, _| true]);
            match (label, focus) {
                (Some(label), Some(focus)) if !out.iter().any(|l| l.slot == slot) => out.push(LabelAnnotation {
                    slot,
                    focus: Some(focus),
                    label,
                }),
                _ => dropped = true,
            }
        };
        let mut events = 0;
        for c in event.captures_iter(text) {
            let m = c.get(0).expect("whole match");
            ranges.push((m.start(), m.end()));
            events += 1;
            let label = self.canonical_label(Slot::MedicationEvent, None, &c[2]);
            push(Slot::MedicationEvent, &c[1], label, &mut out);
        }
        for c in context.captures_iter(text) {
            let m = c.get(0).expect("whole match");
            ranges.push((m.start(), m.end()));
            match Dimension::parse(&c[2]) {
                Some(d) => {
                    let slot = Slot::MedicationContext(d);
                    let label = self.canonical_label(slot, None, &c[3]);
                    push(slot, &c[1], label, &mut out);
                }
                None => push(Slot::MedicationEvent, &c[1], None, &mut out),
            }
        }
        let strict = events == 1
            && gaps_clean(text, &ranges, &["event classification:", "context classification:"]);
        Extraction {
            predictions: Annotations::Labels(out),
            strict,
            dropped,
        }
    }

    fn parse_progress(&self, text: &str) -> Extraction {
        let re = regex!(
            r"(?i)the relation between the given assessment and plan subsection is\s+([a-z]+)(?:\s+([a-z]+))?"
        );
        let found: Vec<_> = re.captures_iter(text).collect();
        let mut ranges = Vec::new();
        let mut label = None;
        if let Some(c) = found.first() {
            let whole = c.get(0).expect("whole match");
            let first = c.get(1).expect("label word");
            let two = c
                .get(2)
                .and_then(|w| self.canonical_label(Slot::ProgressNote, None, &format!("{} {}", &c[1], w.as_str())));
            let (l, end) = match two {
                Some(l) => (Some(l), whole.end()),
                None => (self.canonical_label(Slot::ProgressNote, None, &c[1]), first.end()),
            };
            ranges.push((whole.start(), end));
            label = l;
        }
        let strict = found.len() == 1 && gaps_clean(text, &ranges, &[]);
        let dropped = !found.is_empty() && label.is_none();
        if found.is_empty() {
            let lower = text.to_lowercase();
            if ["assessment", "plan", "relation"].iter().any(|k| lower.contains(k)) {
                label = regex!(r"(?i)\b(not relevant|indirect|direct|neither)\b")
                    .captures(text)
                    .and_then(|c| self.canonical_label(Slot::ProgressNote, None, &c[1]));
            }
        }
        let out = label
            .map(|label| LabelAnnotation {
                slot: Slot::ProgressNote,
                focus: None,
                label,
            })
            .into_iter()
            .collect();
        Extraction {
            predictions: Annotations::Labels(out),
            strict,
            dropped,
        }
    }
}
