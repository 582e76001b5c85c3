//! Text-to-text formulation of the seven clinical task families.
//!
//! Every family has three directions: [`build_input`] turns a raw instance
//! into the model input, [`Codec::serialize_target`] turns gold annotations
//! into the natural-language target, and [`Codec::parse_output`] turns any
//! generated text back into scoreable annotations plus a hallucination
//! status.
//!
//! Offsets in every annotation are character (not byte) offsets into the
//! source text, end exclusive.

mod lexicon;
mod parse;
mod serialize;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use lexicon::{normalize_lookup, CuiLookup, Lexicon, NO_CUI};
pub use parse::{repetition_share, ParsedOutput, Status, TEMPLATE_KEYWORDS};
pub use serialize::{build_input, canonical_whitespace, context_labels, strip_markers, MarkedInput};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    Concept,
    Relation,
    Normalization,
    Wsd,
    Nli,
    Medication,
    ProgressNote,
}

impl TaskKind {
    pub const ALL: [TaskKind; 7] = [
        TaskKind::Concept,
        TaskKind::Relation,
        TaskKind::Normalization,
        TaskKind::Wsd,
        TaskKind::Nli,
        TaskKind::Medication,
        TaskKind::ProgressNote,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Concept => "concept",
            TaskKind::Relation => "relation",
            TaskKind::Normalization => "normalization",
            TaskKind::Wsd => "wsd",
            TaskKind::Nli => "nli",
            TaskKind::Medication => "medication",
            TaskKind::ProgressNote => "progress-note",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TaskKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = TaskKind::ALL.iter().map(|k| k.as_str()).collect();
                Error::contract(format!("unknown task `{s}` (expected one of {})", names.join(", ")))
            })
    }
}

/// A located surface string.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Mention {
    pub start: usize,
    pub end: usize,
    pub text: String,
}

impl Mention {
    /// Mention covering `source[start..end]` (character offsets).
    pub fn at(source: &str, start: usize, end: usize) -> Result<Self> {
        let text = char_slice(source, start, end).ok_or_else(|| {
            Error::contract(format!("span {start}..{end} is outside the source text"))
        })?;
        if start >= end {
            return Err(Error::contract(format!("span {start}..{end} is empty")));
        }
        Ok(Mention {
            start,
            end,
            text: text.to_string(),
        })
    }

    /// Mention of the first occurrence of `text` in `source`.
    pub fn find(source: &str, text: &str) -> Result<Self> {
        let byte = source
            .find(text)
            .ok_or_else(|| Error::contract(format!("`{text}` does not occur in the source")))?;
        let start = source[..byte].chars().count();
        Mention::at(source, start, start + text.chars().count())
    }

    pub fn overlaps(&self, other: &Mention) -> bool {
        self.start < other.end && other.start < self.end
    }

    fn validate(&self, source: &str) -> Result<()> {
        match char_slice(source, self.start, self.end) {
            Some(s) if self.start < self.end && s == self.text => Ok(()),
            _ => Err(Error::contract(format!(
                "mention `{}` at {}..{} does not match the source",
                self.text, self.start, self.end
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ConceptAnnotation {
    pub start: usize,
    pub end: usize,
    pub label: String,
    pub text: String,
}

impl ConceptAnnotation {
    pub fn new(mention: Mention, label: impl Into<String>) -> Self {
        ConceptAnnotation {
            start: mention.start,
            end: mention.end,
            label: label.into(),
            text: mention.text,
        }
    }

    pub fn mention(&self) -> Mention {
        Mention {
            start: self.start,
            end: self.end,
            text: self.text.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RelationAnnotation {
    pub arg1: Mention,
    pub arg2: Mention,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NormalizationAnnotation {
    pub mention: Mention,
    pub cui: String,
    pub preferred_name: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Dimension {
    Action,
    Negation,
    Temporality,
    Certainty,
    Actor,
}

impl Dimension {
    pub const ALL: [Dimension; 5] = [
        Dimension::Action,
        Dimension::Negation,
        Dimension::Temporality,
        Dimension::Certainty,
        Dimension::Actor,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Dimension::Action => "Action",
            Dimension::Negation => "Negation",
            Dimension::Temporality => "Temporality",
            Dimension::Certainty => "Certainty",
            Dimension::Actor => "Actor",
        }
    }

    pub fn labels(self) -> &'static [&'static str] {
        match self {
            Dimension::Action => &[
                "Start",
                "Stop",
                "Increase",
                "Decrease",
                "OtherChange",
                "UniqueDose",
                "Unknown",
            ],
            Dimension::Negation => &["Negated", "NotNegated"],
            Dimension::Temporality => &["Past", "Present", "Future", "Unknown"],
            Dimension::Certainty => &["Certain", "Hypothetical", "Conditional", "Unknown"],
            Dimension::Actor => &["Physician", "Patient", "Unknown"],
        }
    }

    fn parse(s: &str) -> Option<Dimension> {
        Dimension::ALL
            .into_iter()
            .find(|d| d.as_str().eq_ignore_ascii_case(s))
    }
}

pub const NLI_LABELS: [&str; 3] = ["entailment", "contradiction", "neutral"];
pub const MEDICATION_EVENTS: [&str; 3] = ["Disposition", "NoDisposition", "Undetermined"];
pub const PROGRESS_LABELS: [&str; 4] = ["Direct", "Indirect", "Neither", "Not Relevant"];
pub const NO_RELATION: &str = "No-relation";

/// What a single-label decision is about.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Slot {
    Sense,
    Inference,
    MedicationEvent,
    MedicationContext(Dimension),
    ProgressNote,
}

impl Slot {
    /// Short name used as a category prefix in reports.
    pub fn name(self) -> &'static str {
        match self {
            Slot::Sense => "sense",
            Slot::Inference => "inference",
            Slot::MedicationEvent => "event",
            Slot::MedicationContext(d) => d.as_str(),
            Slot::ProgressNote => "relation",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct LabelAnnotation {
    pub slot: Slot,
    pub focus: Option<Mention>,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Annotations {
    Concepts(Vec<ConceptAnnotation>),
    Relations(Vec<RelationAnnotation>),
    Normalizations(Vec<NormalizationAnnotation>),
    Labels(Vec<LabelAnnotation>),
}

impl Annotations {
    pub fn empty_for(kind: TaskKind) -> Self {
        match kind {
            TaskKind::Concept => Annotations::Concepts(Vec::new()),
            TaskKind::Relation => Annotations::Relations(Vec::new()),
            TaskKind::Normalization => Annotations::Normalizations(Vec::new()),
            _ => Annotations::Labels(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Annotations::Concepts(v) => v.len(),
            Annotations::Relations(v) => v.len(),
            Annotations::Normalizations(v) => v.len(),
            Annotations::Labels(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Same annotations in canonical (offset, then label) order.
    pub fn sorted(&self) -> Annotations {
        let mut out = self.clone();
        match &mut out {
            Annotations::Concepts(v) => v.sort(),
            Annotations::Relations(v) => v.sort(),
            Annotations::Normalizations(v) => v.sort(),
            Annotations::Labels(v) => v.sort(),
        }
        out
    }

    fn fits(&self, kind: TaskKind) -> bool {
        matches!(
            (kind, self),
            (TaskKind::Concept, Annotations::Concepts(_))
                | (TaskKind::Relation, Annotations::Relations(_))
                | (TaskKind::Normalization, Annotations::Normalizations(_))
                | (
                    TaskKind::Wsd | TaskKind::Nli | TaskKind::Medication | TaskKind::ProgressNote,
                    Annotations::Labels(_)
                )
        )
    }
}

/// Raw material an instance is built from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Text(String),
    Pair { premise: String, hypothesis: String },
    Note { assessment: String, plan: String },
}

impl Source {
    /// The text that annotation offsets refer to, if any.
    pub fn text(&self) -> Option<&str> {
        match self {
            Source::Text(t) => Some(t),
            _ => None,
        }
    }
}

/// One `[input_text, target_text]` sample with its structured gold.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub id: String,
    pub task: TaskKind,
    pub source: Source,
    pub gold: Annotations,
    pub input_text: String,
    pub target_text: String,
}

impl TaskInstance {
    /// Builds input and target from `source` and `gold`.
    pub fn new(
        codec: &Codec,
        id: impl Into<String>,
        task: TaskKind,
        source: Source,
        gold: Annotations,
    ) -> Result<Self> {
        let input_text = build_input(task, &source, &gold)?;
        let target_text = codec.serialize_target(task, &gold, &source)?;
        Ok(TaskInstance {
            id: id.into(),
            task,
            source,
            gold,
            input_text,
            target_text,
        })
    }

    /// Checks that the cached input and target agree with source and gold.
    pub fn validate(&self, codec: &Codec) -> Result<()> {
        let input = build_input(self.task, &self.source, &self.gold)?;
        if input != self.input_text {
            return Err(Error::contract(format!(
                "instance `{}`: input_text differs from the one built from source and gold",
                self.id
            )));
        }
        let target = codec.serialize_target(self.task, &self.gold, &self.source)?;
        if target != self.target_text {
            return Err(Error::contract(format!(
                "instance `{}`: target_text differs from the serialized gold",
                self.id
            )));
        }
        Ok(())
    }

    /// Arguments of the marked candidate pair, when the input carries markers.
    pub fn expected_pairs(&self) -> Vec<(Mention, Mention)> {
        if self.task != TaskKind::Relation {
            return Vec::new();
        }
        strip_markers(&self.input_text)
            .map(|m| m.pairs)
            .unwrap_or_default()
    }
}

pub(crate) fn char_slice(s: &str, start: usize, end: usize) -> Option<&str> {
    if start > end {
        return None;
    }
    let mut indices = s.char_indices().map(|(b, _)| b).chain(std::iter::once(s.len()));
    let b0 = indices.by_ref().nth(start)?;
    let b1 = if end == start {
        b0
    } else {
        indices.nth(end - start - 1)?
    };
    Some(&s[b0..b1])
}

const DRUG_CONCEPTS: [&str; 9] = [
    "Drug", "Strength", "Form", "Dosage", "Frequency", "Route", "Duration", "Reason", "ADE",
];
const SDOH_CONCEPTS: [&str; 13] = [
    "Alcohol",
    "Tobacco",
    "Drug",
    "Employment",
    "Living status",
    "Status",
    "Amount",
    "Frequency",
    "Duration",
    "Type",
    "Method",
    "History",
    "StatusTime",
];
const SDOH_TRIGGERS: [&str; 5] = ["Alcohol", "Tobacco", "Drug", "Employment", "Living status"];
const SDOH_ARGUMENTS: [&str; 7] = ["Status", "Amount", "Frequency", "Duration", "Type", "Method", "History"];

fn default_senses() -> BTreeMap<String, Vec<String>> {
    let table: [(&str, &[&str]); 10] = [
        ("CEA", &["carcinoembryonic antigen", "carotid endarterectomy"]),
        ("RA", &["rheumatoid arthritis", "right atrium", "room air"]),
        ("PE", &["pulmonary embolism", "physical examination", "pleural effusion"]),
        ("MS", &["multiple sclerosis", "mental status", "morphine sulfate", "mitral stenosis"]),
        ("CVA", &["cerebrovascular accident", "costovertebral angle"]),
        ("PT", &["physical therapy", "prothrombin time", "patient"]),
        ("DM", &["diabetes mellitus", "dextromethorphan"]),
        ("BM", &["bowel movement", "bone marrow"]),
        ("OR", &["operating room", "odds ratio"]),
        ("SBP", &["systolic blood pressure", "spontaneous bacterial peritonitis"]),
    ];
    table
        .iter()
        .map(|(abbr, senses)| {
            (
                abbr.to_string(),
                senses.iter().map(|s| s.to_string()).collect(),
            )
        })
        .collect()
}

/// Label inventories and the CUI lexicon the templates are checked against.
#[derive(Debug, Clone, PartialEq)]
pub struct Codec {
    concept_labels: Vec<String>,
    relation_labels: Vec<String>,
    senses: BTreeMap<String, Vec<String>>,
    lexicon: Lexicon,
}

impl Default for Codec {
    fn default() -> Self {
        let mut concept_labels: Vec<String> = Vec::new();
        for l in DRUG_CONCEPTS.iter().chain(SDOH_CONCEPTS.iter()) {
            if !concept_labels.iter().any(|c| c == l) {
                concept_labels.push(l.to_string());
            }
        }
        let mut relation_labels: Vec<String> = DRUG_CONCEPTS[1..]
            .iter()
            .map(|a| format!("{a}-Drug"))
            .collect();
        for t in SDOH_TRIGGERS {
            for a in SDOH_ARGUMENTS {
                relation_labels.push(format!("{t}-{a}"));
            }
        }
        relation_labels.push(NO_RELATION.to_string());
        Codec {
            concept_labels,
            relation_labels,
            senses: default_senses(),
            lexicon: Lexicon::default(),
        }
    }
}

fn canonical_in<'a>(inventory: impl IntoIterator<Item = &'a str>, label: &str) -> Option<&'a str> {
    let label = label.trim();
    let mut fallback = None;
    for l in inventory {
        if l == label {
            return Some(l);
        }
        if fallback.is_none() && l.eq_ignore_ascii_case(label) {
            fallback = Some(l);
        }
    }
    fallback
}

impl Codec {
    pub fn new(
        concept_labels: Vec<String>,
        relation_labels: Vec<String>,
        senses: BTreeMap<String, Vec<String>>,
        lexicon: Lexicon,
    ) -> Self {
        Codec {
            concept_labels,
            relation_labels,
            senses,
            lexicon,
        }
    }

    pub fn with_lexicon(mut self, lexicon: Lexicon) -> Self {
        self.lexicon = lexicon;
        self
    }

    pub fn lexicon(&self) -> &Lexicon {
        &self.lexicon
    }

    pub fn concept_labels(&self) -> &[String] {
        &self.concept_labels
    }

    pub fn relation_labels(&self) -> &[String] {
        &self.relation_labels
    }

    pub fn senses(&self) -> &BTreeMap<String, Vec<String>> {
        &self.senses
    }

    /// Inventory spelling of `label` for `slot`, matched case-insensitively.
    pub fn canonical_label(&self, slot: Slot, focus: Option<&str>, label: &str) -> Option<String> {
        let found = match slot {
            Slot::Sense => {
                let senses = self.senses.get(focus?.trim())?;
                canonical_in(senses.iter().map(String::as_str), label)
            }
            Slot::Inference => canonical_in(NLI_LABELS, label),
            Slot::MedicationEvent => canonical_in(MEDICATION_EVENTS, label),
            Slot::MedicationContext(d) => canonical_in(d.labels().iter().copied(), label),
            Slot::ProgressNote => canonical_in(PROGRESS_LABELS, label),
        };
        found.map(str::to_string)
    }

    pub fn canonical_concept_label(&self, label: &str) -> Option<String> {
        canonical_in(self.concept_labels.iter().map(String::as_str), label).map(str::to_string)
    }

    pub fn canonical_relation_label(&self, label: &str) -> Option<String> {
        canonical_in(self.relation_labels.iter().map(String::as_str), label).map(str::to_string)
    }

    /// True when parsing the serialized gold reproduces the gold exactly.
    pub fn round_trip(&self, kind: TaskKind, gold: &Annotations, source: &Source) -> bool {
        let Ok(target) = self.serialize_target(kind, gold, source) else {
            return false;
        };
        let Ok(input) = build_input(kind, source, gold) else {
            return false;
        };
        let pairs = if kind == TaskKind::Relation {
            match strip_markers(&input) {
                Ok(m) => m.pairs,
                Err(_) => return false,
            }
        } else {
            Vec::new()
        };
        match self.parse_output(kind, &target, source, &pairs) {
            Ok(parsed) => parsed.status == Status::WellFormed && parsed.predictions == gold.sorted(),
            Err(_) => false,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn char_slice_respects_multibyte_text() {
        let s = "a “b” c";
        assert_eq!(char_slice(s, 2, 5), Some("“b”"));
        assert_eq!(char_slice(s, 7, 7), Some(""));
        assert_eq!(char_slice(s, 6, 8), None);
    }

    #[test]
    fn mention_find_uses_character_offsets() {
        let m = Mention::find("“x” aspirin", "aspirin").unwrap();
        assert_eq!((m.start, m.end), (4, 11));
    }

    #[test]
    fn task_names_round_trip() {
        for k in TaskKind::ALL {
            assert_eq!(k.as_str().parse::<TaskKind>().unwrap(), k);
        }
        assert!("ner".parse::<TaskKind>().is_err());
    }

    #[test]
    fn inventories_cover_published_labels() {
        let codec = Codec::default();
        for l in ["Living status-Type", "Tobacco-Amount", "Alcohol-Status", "Drug-Method",
            "Drug-Frequency", "Employment-Duration", "Dosage-Drug", "Form-Drug",
            "Frequency-Drug", "No-relation"]
        {
            assert!(codec.canonical_relation_label(l).is_some(), "{l}");
        }
        assert_eq!(
            codec.canonical_label(Slot::ProgressNote, None, "not relevant").as_deref(),
            Some("Not Relevant")
        );
        assert_eq!(
            codec.canonical_label(Slot::Sense, Some("CEA"), "carcinoembryonic antigen").as_deref(),
            Some("carcinoembryonic antigen")
        );
        assert!(codec.canonical_label(Slot::Inference, None, "maybe").is_none());
    }
}
