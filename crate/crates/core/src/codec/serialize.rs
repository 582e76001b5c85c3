use super::{
    char_slice, Annotations, Codec, ConceptAnnotation, Dimension, LabelAnnotation, Mention,
    NormalizationAnnotation, RelationAnnotation, Slot, Source, TaskKind,
};
use crate::error::{Error, Result};

const MARKERS: [&str; 4] = ["[s1]", "[e1]", "[s2]", "[e2]"];

/// Raw text recovered from a marked relation input, with the marked pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MarkedInput {
    pub text: String,
    pub pairs: Vec<(Mention, Mention)>,
}

/// Collapses whitespace runs, trims inside curly quotes and drops spaces
/// before `.` and `;`. Two targets are considered the same template text
/// when this maps them to the same string.
pub fn canonical_whitespace(text: &str) -> String {
    let collapsed = text.split_whitespace().collect::<Vec<_>>().join(" ");
    let mut out = String::with_capacity(collapsed.len());
    let mut chars = collapsed.chars().peekable();
    while let Some(c) = chars.next() {
        match c {
            ' ' if matches!(chars.peek(), Some('.' | ';' | '”')) => {}
            '“' => {
                out.push(c);
                if chars.peek() == Some(&' ') {
                    chars.next();
                }
            }
            _ => out.push(c),
        }
    }
    out
}

fn capitalize(s: &str) -> String {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) => c.to_uppercase().chain(chars).collect(),
        None => String::new(),
    }
}

fn require_text(kind: TaskKind, source: &Source) -> Result<&str> {
    match source {
        Source::Text(t) if !t.trim().is_empty() => Ok(t),
        Source::Text(_) => Err(Error::contract(format!("{kind}: source text is empty"))),
        _ => Err(Error::contract(format!("{kind}: expected a single source text"))),
    }
}

fn non_empty<'a>(what: &str, s: &'a str) -> Result<&'a str> {
    if s.trim().is_empty() {
        Err(Error::contract(format!("{what} is empty")))
    } else {
        Ok(s)
    }
}

fn strip_final_period(s: &str) -> &str {
    let s = s.trim();
    s.strip_suffix('.').unwrap_or(s).trim_end()
}

/// The single event label (with its focus) and the context labels.
fn medication_parts(labels: &[LabelAnnotation]) -> Result<(&LabelAnnotation, Mention, Vec<&LabelAnnotation>)> {
    let events: Vec<_> = labels.iter().filter(|l| l.slot == Slot::MedicationEvent).collect();
    let [event] = events.as_slice() else {
        return Err(Error::contract("medication gold needs exactly one event label"));
    };
    let focus = event
        .focus
        .clone()
        .ok_or_else(|| Error::contract("medication event label needs a focus mention"))?;
    let mut context: Vec<&LabelAnnotation> = labels
        .iter()
        .filter(|l| l.slot != Slot::MedicationEvent)
        .collect();
    for l in &context {
        if !matches!(l.slot, Slot::MedicationContext(_)) {
            return Err(Error::contract(format!("unexpected {:?} label in medication gold", l.slot)));
        }
        if l.focus.as_ref() != Some(&focus) {
            return Err(Error::contract("context labels must share the event's focus mention"));
        }
    }
    context.sort_by_key(|l| l.slot);
    if context.windows(2).any(|w| w[0].slot == w[1].slot) {
        return Err(Error::contract("a context dimension is labelled twice"));
    }
    if !context.is_empty() && event.label != "Disposition" {
        return Err(Error::contract("context dimensions are only serialized for Disposition events"));
    }
    Ok((event, focus, context))
}

fn single_label(labels: &[LabelAnnotation], slot: Slot) -> Result<&LabelAnnotation> {
    match labels {
        [l] if l.slot == slot => Ok(l),
        _ => Err(Error::contract(format!("expected exactly one {slot:?} label"))),
    }
}

fn insert_markers(text: &str, arg1: &Mention, arg2: &Mention) -> Result<String> {
    if arg1.overlaps(arg2) {
        return Err(Error::contract(format!(
            "marked arguments `{}` and `{}` overlap",
            arg1.text, arg2.text
        )));
    }
    if let Some(m) = MARKERS.iter().find(|m| text.contains(*m)) {
        return Err(Error::contract(format!("source already contains the marker {m}")));
    }
    let mut inserts = [
        (arg1.start, 1, "[s1] "),
        (arg1.end, 0, " [e1]"),
        (arg2.start, 1, "[s2] "),
        (arg2.end, 0, " [e2]"),
    ];
    // At a shared offset the closing marker goes first.
    inserts.sort_by_key(|&(pos, opens, _)| (pos, opens));
    let chars: Vec<char> = text.chars().collect();
    let mut out = String::with_capacity(text.len() + 20);
    let mut next = inserts.iter().peekable();
    for i in 0..=chars.len() {
        while let Some((_, _, m)) = next.next_if(|&&(pos, _, _)| pos == i) {
            out.push_str(m);
        }
        if let Some(&c) = chars.get(i) {
            out.push(c);
        }
    }
    Ok(out)
}

/// Removes `[s1] … [e1]` / `[s2] … [e2]` markers and reports the pair
/// they delimited, in raw-text offsets. Text without markers passes through.
pub fn strip_markers(input: &str) -> Result<MarkedInput> {
    let chars: Vec<char> = input.chars().collect();
    let mut text = String::with_capacity(input.len());
    let mut len = 0usize;
    let mut starts = [None, None];
    let mut ends = [None, None];
    let mut i = 0;
    while i < chars.len() {
        let tag = (i + 4 <= chars.len())
            .then(|| chars[i..i + 4].iter().collect::<String>())
            .filter(|t| MARKERS.contains(&t.as_str()));
        let Some(tag) = tag else {
            text.push(chars[i]);
            len += 1;
            i += 1;
            continue;
        };
        let slot = if tag.contains('1') { 0 } else { 1 };
        i += 4;
        if tag.starts_with("[s") {
            if starts[slot].is_some() {
                return Err(Error::contract(format!("marker {tag} appears twice")));
            }
            starts[slot] = Some(len);
            if chars.get(i) == Some(&' ') {
                i += 1;
            }
        } else {
            let Some(start) = starts[slot] else {
                return Err(Error::contract(format!("{tag} has no opening marker")));
            };
            if ends[slot].is_some() {
                return Err(Error::contract(format!("marker {tag} appears twice")));
            }
            if len > start && text.ends_with(' ') {
                text.pop();
                len -= 1;
            }
            ends[slot] = Some(len);
        }
    }
    let span = |slot: usize| -> Result<Option<Mention>> {
        match (starts[slot], ends[slot]) {
            (None, None) => Ok(None),
            (Some(s), Some(e)) if s < e => Ok(Some(Mention {
                start: s,
                end: e,
                text: char_slice(&text, s, e).unwrap_or_default().to_string(),
            })),
            _ => Err(Error::contract(format!("argument {} markers are incomplete or empty", slot + 1))),
        }
    };
    let pairs = match (span(0)?, span(1)?) {
        (Some(a), Some(b)) => vec![(a, b)],
        (None, None) => Vec::new(),
        _ => return Err(Error::contract("only one argument is marked")),
    };
    Ok(MarkedInput { text, pairs })
}

/// Model input for one instance.
pub fn build_input(kind: TaskKind, source: &Source, gold: &Annotations) -> Result<String> {
    match kind {
        TaskKind::Concept | TaskKind::Normalization | TaskKind::Wsd => {
            Ok(require_text(kind, source)?.to_string())
        }
        TaskKind::Relation => {
            let text = require_text(kind, source)?;
            match gold {
                Annotations::Relations(rels) if rels.len() == 1 => {
                    insert_markers(text, &rels[0].arg1, &rels[0].arg2)
                }
                Annotations::Relations(_) => Ok(text.to_string()),
                _ => Err(Error::contract("relation input needs relation gold")),
            }
        }
        TaskKind::Nli => match source {
            Source::Pair { premise, hypothesis } => Ok(format!(
                "Premise: {} Hypothesis: {}",
                non_empty("premise", premise)?,
                non_empty("hypothesis", hypothesis)?
            )),
            _ => Err(Error::contract("nli: expected a premise/hypothesis pair")),
        },
        TaskKind::Medication => {
            let text = require_text(kind, source)?;
            let Annotations::Labels(labels) = gold else {
                return Err(Error::contract("medication input needs label gold"));
            };
            let (_, focus, _) = medication_parts(labels)?;
            Ok(format!("Context: “{text}” Medication: “{}”", focus.text))
        }
        TaskKind::ProgressNote => match source {
            Source::Note { assessment, plan } => Ok(format!(
                "Assessment: “{}” Plan: “{}”",
                non_empty("assessment", assessment)?,
                non_empty("plan", plan)?
            )),
            _ => Err(Error::contract("progress-note: expected an assessment/plan note")),
        },
    }
}

impl Codec {
    fn check_concept(&self, c: &ConceptAnnotation, text: &str) -> Result<()> {
        c.mention().validate(text)?;
        if self.canonical_concept_label(&c.label).as_deref() != Some(c.label.as_str()) {
            return Err(Error::contract(format!("concept label `{}` is not in the inventory", c.label)));
        }
        Ok(())
    }

    fn check_label(&self, l: &LabelAnnotation) -> Result<()> {
        let focus = l.focus.as_ref().map(|m| m.text.as_str());
        if self.canonical_label(l.slot, focus, &l.label).as_deref() != Some(l.label.as_str()) {
            return Err(Error::contract(format!(
                "label `{}` is not in the {:?} inventory",
                l.label, l.slot
            )));
        }
        Ok(())
    }

    /// Gold annotations → target text.
    pub fn serialize_target(&self, kind: TaskKind, gold: &Annotations, source: &Source) -> Result<String> {
        if !gold.fits(kind) {
            return Err(Error::contract(format!("{kind}: gold has the wrong annotation shape")));
        }
        match gold {
            Annotations::Concepts(items) => {
                let text = require_text(kind, source)?;
                let mut items: Vec<&ConceptAnnotation> = items.iter().collect();
                for c in &items {
                    self.check_concept(c, text)?;
                }
                items.sort();
                if items.is_empty() {
                    return Ok(String::new());
                }
                let clauses: Vec<String> = items
                    .iter()
                    .map(|c| format!("the extracted {} entity is {}", c.label.to_lowercase(), c.text))
                    .collect();
                Ok(format!("{} .", capitalize(&clauses.join(" ; "))))
            }
            Annotations::Relations(items) => {
                let text = require_text(kind, source)?;
                let mut items: Vec<&RelationAnnotation> = items.iter().collect();
                for r in &items {
                    r.arg1.validate(text)?;
                    r.arg2.validate(text)?;
                    if self.canonical_relation_label(&r.label).as_deref() != Some(r.label.as_str()) {
                        return Err(Error::contract(format!(
                            "relation label `{}` is not in the inventory",
                            r.label
                        )));
                    }
                }
                items.sort_by_key(|r| (r.arg1.start, r.arg2.start, r.arg1.end, r.arg2.end, &r.label));
                if items.is_empty() {
                    return Ok(String::new());
                }
                let clauses: Vec<String> = items
                    .iter()
                    .map(|r| {
                        format!(
                            "the relation between “{}” and “{}” is “{}”",
                            r.arg1.text, r.arg2.text, r.label
                        )
                    })
                    .collect();
                Ok(format!("{}.", capitalize(&clauses.join("; "))))
            }
            Annotations::Normalizations(items) => {
                let text = require_text(kind, source)?;
                let mut items: Vec<&NormalizationAnnotation> = items.iter().collect();
                for n in &items {
                    n.mention.validate(text)?;
                    if !self.lexicon.contains(&n.cui, &n.preferred_name) {
                        return Err(Error::contract(format!(
                            "`{}` / {} is not a lexicon entry",
                            n.preferred_name, n.cui
                        )));
                    }
                }
                items.sort();
                if items.is_empty() {
                    return Ok(String::new());
                }
                let clauses: Vec<String> = items
                    .iter()
                    .map(|n| {
                        format!(
                            "the normalized string of the disorder concept “{}” is “{}”",
                            n.mention.text, n.preferred_name
                        )
                    })
                    .collect();
                Ok(format!("{}.", capitalize(&clauses.join("; "))))
            }
            Annotations::Labels(labels) => {
                for l in labels {
                    self.check_label(l)?;
                }
                self.serialize_labels(kind, labels, source)
            }
        }
    }

    fn serialize_labels(&self, kind: TaskKind, labels: &[LabelAnnotation], source: &Source) -> Result<String> {
        match kind {
            TaskKind::Wsd => {
                let text = require_text(kind, source)?;
                let l = single_label(labels, Slot::Sense)?;
                let focus = l
                    .focus
                    .as_ref()
                    .ok_or_else(|| Error::contract("sense label needs the abbreviation mention"))?;
                focus.validate(text)?;
                Ok(format!(
                    "The sense of the abbreviation “{}” is “{}”.",
                    focus.text, l.label
                ))
            }
            TaskKind::Nli => {
                let Source::Pair { premise, hypothesis } = source else {
                    return Err(Error::contract("nli: expected a premise/hypothesis pair"));
                };
                let l = single_label(labels, Slot::Inference)?;
                Ok(format!(
                    "The hypothesis that “{}” is {} to the premise that “{}”.",
                    strip_final_period(hypothesis),
                    l.label,
                    strip_final_period(premise)
                ))
            }
            TaskKind::Medication => {
                let text = require_text(kind, source)?;
                let (event, focus, context) = medication_parts(labels)?;
                focus.validate(text)?;
                let mut out = format!(
                    "Event Classification: The category of medication event “{}” is “{}”.",
                    focus.text, event.label
                );
                if !context.is_empty() {
                    out.push_str(" Context Classification:");
                }
                for l in context {
                    let Slot::MedicationContext(dim) = l.slot else { unreachable!() };
                    out.push_str(&format!(
                        " The category of disposition event “{}” from the dimension of {} is “{}”.",
                        focus.text,
                        dim.as_str(),
                        l.label
                    ));
                }
                Ok(out)
            }
            TaskKind::ProgressNote => {
                let l = single_label(labels, Slot::ProgressNote)?;
                Ok(format!(
                    "The relation between the given assessment and plan subsection is {}.",
                    l.label
                ))
            }
            _ => Err(Error::contract(format!("{kind}: gold has the wrong annotation shape"))),
        }
    }
}

/// Context labels for all five dimensions, in canonical order.
pub fn context_labels(focus: &Mention, values: [&str; 5]) -> Vec<LabelAnnotation> {
    Dimension::ALL
        .into_iter()
        .zip(values)
        .map(|(d, v)| LabelAnnotation {
            slot: Slot::MedicationContext(d),
            focus: Some(focus.clone()),
            label: v.to_string(),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn markers_round_trip_through_strip() {
        let text = "Acetaminophen 500 mg PO Q6H as needed";
        let a1 = Mention::find(text, "Q6H").unwrap();
        let a2 = Mention::find(text, "Acetaminophen").unwrap();
        let marked = insert_markers(text, &a1, &a2).unwrap();
        assert_eq!(marked, "[s2] Acetaminophen [e2] 500 mg PO [s1] Q6H [e1] as needed");
        let back = strip_markers(&marked).unwrap();
        assert_eq!(back.text, text);
        assert_eq!(back.pairs, vec![(a1, a2)]);
    }

    #[test]
    fn adjacent_arguments_keep_offsets() {
        let text = "ab";
        let a1 = Mention::at(text, 0, 1).unwrap();
        let a2 = Mention::at(text, 1, 2).unwrap();
        let marked = insert_markers(text, &a1, &a2).unwrap();
        assert_eq!(marked, "[s1] a [e1][s2] b [e2]");
        assert_eq!(strip_markers(&marked).unwrap().pairs, vec![(a1, a2)]);
    }

    #[test]
    fn overlapping_arguments_are_rejected() {
        let text = "former IVDU";
        let a1 = Mention::at(text, 0, 11).unwrap();
        let a2 = Mention::find(text, "IVDU").unwrap();
        assert!(insert_markers(text, &a1, &a2).is_err());
    }

    #[test]
    fn half_marked_input_is_an_error() {
        assert!(strip_markers("[s1] a [e1] b").is_err());
        assert!(strip_markers("a [e1]").is_err());
        assert_eq!(strip_markers("plain").unwrap().pairs, vec![]);
    }

    #[test]
    fn empty_context_is_rejected() {
        let gold = Annotations::Concepts(vec![]);
        assert!(build_input(TaskKind::Concept, &Source::Text("  ".into()), &gold).is_err());
    }

    #[test]
    fn canonical_whitespace_absorbs_template_spacing() {
        assert_eq!(
            canonical_whitespace("is “ Living status-Type ”; the"),
            canonical_whitespace("is “Living status-Type”;  the")
        );
        assert_eq!(canonical_whitespace("is Direct ."), "is Direct.");
    }

    #[test]
    fn empty_list_gold_serializes_to_empty_text() {
        let codec = Codec::default();
        let src = Source::Text("nothing here".into());
        for kind in [TaskKind::Concept, TaskKind::Relation, TaskKind::Normalization] {
            let t = codec.serialize_target(kind, &Annotations::empty_for(kind), &src).unwrap();
            assert_eq!(t, "");
        }
    }

    #[test]
    fn labels_outside_the_inventory_are_contract_errors() {
        let codec = Codec::default();
        let src = Source::Note {
            assessment: "a".into(),
            plan: "p".into(),
        };
        let gold = Annotations::Labels(vec![LabelAnnotation {
            slot: Slot::ProgressNote,
            focus: None,
            label: "Somewhat".into(),
        }]);
        assert!(codec.serialize_target(TaskKind::ProgressNote, &gold, &src).is_err());
    }
}
