//! Seeded synthetic instances for every task family.
//!
//! Pools are chosen so that no surface string occurs inside another one,
//! which keeps every generated gold exactly recoverable from its target.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::codec::{
    context_labels, Annotations, Codec, ConceptAnnotation, Dimension, LabelAnnotation, Mention,
    NormalizationAnnotation, RelationAnnotation, Slot, Source, TaskInstance, TaskKind,
    MEDICATION_EVENTS, NLI_LABELS, NO_RELATION, PROGRESS_LABELS,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SyntheticSpec {
    pub task: TaskKind,
    pub count: usize,
    pub seed: u64,
    /// Progress notes only: the plan text names the gold label, so the
    /// task reduces to copying it.
    pub label_cue: bool,
}

impl SyntheticSpec {
    pub fn new(task: TaskKind, count: usize, seed: u64) -> Self {
        SyntheticSpec {
            task,
            count,
            seed,
            label_cue: false,
        }
    }

    pub fn with_label_cue(mut self) -> Self {
        self.label_cue = true;
        self
    }
}

const DRUGS: &[&str] = &[
    "Colchicine", "Acetaminophen", "Lisinopril", "Metoprolol", "Atorvastatin", "Clopidogrel",
    "Docusate Sodium", "Senna", "Pantoprazole", "Furosemide", "Aspirin", "Warfarin",
    "Gabapentin", "Prednisone", "Amoxicillin", "Levothyroxine", "Omeprazole", "Tramadol",
];
const STRENGTHS: &[&str] = &["0.6 mg", "500 mg", "10 mg", "25 mg", "40 mg", "81 mg", "100 mg", "20 mg"];
const FORMS: &[&str] = &["Tablet", "Capsule", "Solution"];
const DOSAGES: &[&str] = &["One (1)", "Two (2)", "Half (0.5)"];
const ROUTES: &[&str] = &["PO", "IV", "SC"];
const FREQUENCIES: &[&str] = &["DAILY", "BID", "TID", "Q6H", "QHS"];
const REASONS: &[&str] = &["gout flare", "constipation", "fever", "hypertension", "reflux"];
const DURATIONS: &[&str] = &["x 7 days", "x 2 weeks", "x 10 days"];

struct Builder {
    text: String,
    chars: usize,
}

impl Builder {
    fn new() -> Self {
        Builder {
            text: String::new(),
            chars: 0,
        }
    }

    fn push(&mut self, s: &str) {
        self.text.push_str(s);
        self.chars += s.chars().count();
    }

    fn span(&mut self, s: &str) -> Mention {
        let start = self.chars;
        self.push(s);
        Mention {
            start,
            end: self.chars,
            text: s.to_string(),
        }
    }
}

fn pick<'a>(rng: &mut ChaCha8Rng, pool: &[&'a str]) -> &'a str {
    pool.choose(rng).copied().unwrap_or_default()
}

/// One medication line; returns `(label, mention)` in text order.
fn sig_line(rng: &mut ChaCha8Rng, b: &mut Builder, number: usize, drug: &str) -> Vec<(&'static str, Mention)> {
    let mut out = Vec::new();
    b.push(&format!("{number}. "));
    out.push(("Drug", b.span(drug)));
    b.push(" ");
    out.push(("Strength", b.span(pick(rng, STRENGTHS))));
    b.push(" ");
    let form = pick(rng, FORMS);
    out.push(("Form", b.span(form)));
    b.push(" Sig: ");
    if rng.random_bool(0.7) {
        out.push(("Dosage", b.span(pick(rng, DOSAGES))));
        b.push(" ");
        out.push(("Form", b.span(form)));
        b.push(" ");
    }
    out.push(("Route", b.span(pick(rng, ROUTES))));
    b.push(" ");
    out.push(("Frequency", b.span(pick(rng, FREQUENCIES))));
    if rng.random_bool(0.3) {
        b.push(" ");
        out.push(("Duration", b.span(pick(rng, DURATIONS))));
    }
    if rng.random_bool(0.4) {
        b.push(" for ");
        out.push(("Reason", b.span(pick(rng, REASONS))));
    }
    b.push(".");
    out
}

struct SdohTrigger {
    label: &'static str,
    surfaces: &'static [&'static str],
    arguments: &'static [(&'static str, &'static [&'static str])],
}

const SDOH: &[SdohTrigger] = &[
    SdohTrigger {
        label: "Tobacco",
        surfaces: &["smoking", "tobacco", "cigarettes"],
        arguments: &[
            ("Amount", &["1 ppd", "20 pack-year hx", "half a pack"]),
            ("Status", &["former", "quit 5 years ago", "current smoker"]),
            ("Duration", &["for 30 years", "since age 16"]),
        ],
    },
    SdohTrigger {
        label: "Alcohol",
        surfaces: &["etoh", "alcohol", "drinks"],
        arguments: &[
            ("Status", &["remote", "occasional", "none recently"]),
            ("Amount", &["2 beers nightly", "one glass of wine"]),
            ("Frequency", &["weekly", "on weekends"]),
        ],
    },
    SdohTrigger {
        label: "Drug",
        surfaces: &["IVDU", "marijuana", "cocaine"],
        arguments: &[
            ("Method", &["injection", "smoked"]),
            ("Status", &["in remission", "denies any"]),
            ("History", &["in his twenties", "as a teenager"]),
        ],
    },
    SdohTrigger {
        label: "Employment",
        surfaces: &["bus driver", "teacher", "retired nurse"],
        arguments: &[
            ("Duration", &["for 18 yrs", "for 10 years"]),
            ("Status", &["currently working", "on disability"]),
        ],
    },
    SdohTrigger {
        label: "Living status",
        surfaces: &["Lives", "resides"],
        arguments: &[
            ("Type", &["alone", "with wife", "at home with family"]),
        ],
    },
];

/// Social history sentence; returns trigger and argument mentions with relation labels.
fn social_history(rng: &mut ChaCha8Rng, b: &mut Builder) -> (Vec<(&'static str, Mention)>, Vec<RelationAnnotation>) {
    let mut concepts = Vec::new();
    let mut relations = Vec::new();
    let n = rng.random_range(1..=3);
    let chosen: Vec<&SdohTrigger> = SDOH.choose_multiple(rng, n).collect();
    b.push("Social History: ");
    for (i, t) in chosen.iter().enumerate() {
        if i > 0 {
            b.push(", ");
        }
        let trigger = b.span(pick(rng, t.surfaces));
        concepts.push((t.label, trigger.clone()));
        let k = rng.random_range(1..=t.arguments.len().min(2));
        for (label, pool) in t.arguments.choose_multiple(rng, k) {
            b.push(" ");
            let arg = b.span(pick(rng, pool));
            concepts.push((*label, arg.clone()));
            relations.push(RelationAnnotation {
                arg1: trigger.clone(),
                arg2: arg,
                label: format!("{}-{}", t.label, label),
            });
        }
    }
    b.push(".");
    (concepts, relations)
}

fn concept_source(rng: &mut ChaCha8Rng) -> (String, Vec<ConceptAnnotation>) {
    let mut b = Builder::new();
    let found = match rng.random_range(0..10) {
        0 => {
            b.push("Follow up with primary care in two weeks.");
            Vec::new()
        }
        1..=3 => social_history(rng, &mut b).0,
        _ => {
            let drugs: Vec<&str> = DRUGS.choose_multiple(rng, 2).copied().collect();
            let number = rng.random_range(1..9);
            let mut found = sig_line(rng, &mut b, number, drugs[0]);
            if rng.random_bool(0.3) {
                b.push(" ");
                found.extend(sig_line(rng, &mut b, 9, drugs[1]));
            }
            found
        }
    };
    let gold = found
        .into_iter()
        .map(|(label, m)| ConceptAnnotation::new(m, label))
        .collect();
    (b.text, gold)
}

fn relation_source(rng: &mut ChaCha8Rng) -> (String, Vec<RelationAnnotation>) {
    let mut b = Builder::new();
    if rng.random_bool(0.25) {
        let (_, rels) = social_history(rng, &mut b);
        return (b.text, rels);
    }
    let drugs: Vec<&str> = DRUGS.choose_multiple(rng, 2).copied().collect();
    let first = sig_line(rng, &mut b, 1, drugs[0]);
    b.push(" ");
    let second = sig_line(rng, &mut b, 2, drugs[1]);
    let lines = [first, second];
    let home = rng.random_range(0..2);
    let attrs: Vec<&(&str, Mention)> = lines[home].iter().filter(|(l, _)| *l != "Drug").collect();
    let (attr_label, attr) = attrs.choose(rng).copied().cloned().unwrap_or_else(|| lines[home][1].clone());
    let related = rng.random_bool(0.7);
    let target_line = if related { home } else { 1 - home };
    let drug = lines[target_line][0].1.clone();
    let label = if related {
        format!("{attr_label}-Drug")
    } else {
        NO_RELATION.to_string()
    };
    (
        b.text,
        vec![RelationAnnotation {
            arg1: attr,
            arg2: drug,
            label,
        }],
    )
}

const DISORDERS: &[(&str, &str)] = &[
    ("arthritis", "C0003864"),
    ("carpal tunnel", "C0007286"),
    ("shingles", "C0019360"),
    ("LGIB", "C0024050"),
    ("DM2", "C0011849"),
    ("HTN", "C0020538"),
    ("asthma", "C0004096"),
    ("CHF", "C0018802"),
    ("pneumonia", "C0032285"),
    ("depression", "C0011570"),
    ("afib", "C0004238"),
    ("COPD", "C0024117"),
    ("CKD", "C0022658"),
    ("GERD", "C0017168"),
    ("hypothyroidism", "C0020676"),
    ("anemia", "C0002871"),
    ("headaches", "C0018681"),
    ("gout", "C0018099"),
    ("sepsis", "C0036690"),
    ("DVT", "C0149871"),
    ("CAD", "C0010054"),
    ("hyperlipidemia", "C0020443"),
];
const HISTORY_FILLERS: &[&str] = &["s/p repair", "on meds", "well controlled", "since 2009", "stable"];

fn normalization_source(codec: &Codec, rng: &mut ChaCha8Rng) -> Result<(String, Vec<NormalizationAnnotation>)> {
    let mut b = Builder::new();
    b.push("Past Medical History: ");
    let n = rng.random_range(1..=4);
    let mut gold = Vec::new();
    for (i, (surface, cui)) in DISORDERS.choose_multiple(rng, n).enumerate() {
        if i > 0 {
            b.push(", ");
        }
        let mention = b.span(surface);
        if rng.random_bool(0.3) {
            b.push(" ");
            b.push(pick(rng, HISTORY_FILLERS));
        }
        let preferred_name = codec
            .lexicon()
            .preferred_name(cui)
            .ok_or_else(|| Error::contract(format!("{cui} is missing from the lexicon")))?
            .to_string();
        gold.push(NormalizationAnnotation {
            mention,
            cui: cui.to_string(),
            preferred_name,
        });
    }
    b.push(".");
    Ok((b.text, gold))
}

const WSD_FRAMES: &[(&str, &str)] = &[
    ("the patient was seen today and ", " was noted on review."),
    ("on admission, ", " was discussed with the family."),
    ("labs were drawn and the ", " result was reviewed."),
    ("history is significant for ", " per outside records."),
];

fn wsd_source(codec: &Codec, rng: &mut ChaCha8Rng) -> (String, Vec<LabelAnnotation>) {
    let abbrevs: Vec<(&String, &Vec<String>)> = codec.senses().iter().collect();
    let (abbr, senses) = abbrevs.choose(rng).copied().unwrap_or_else(|| abbrevs[0]);
    let sense = senses.choose(rng).cloned().unwrap_or_default();
    let (pre, post) = pick_pair(rng, WSD_FRAMES);
    let mut b = Builder::new();
    b.push(&capitalize_first(pre));
    let focus = b.span(abbr);
    b.push(post);
    (
        b.text,
        vec![LabelAnnotation {
            slot: Slot::Sense,
            focus: Some(focus),
            label: sense,
        }],
    )
}

fn pick_pair<'a>(rng: &mut ChaCha8Rng, pool: &[(&'a str, &'a str)]) -> (&'a str, &'a str) {
    pool.choose(rng).copied().unwrap_or(("", ""))
}

fn capitalize_first(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

const SYMPTOMS: &[&str] = &["chest pain", "shortness of breath", "a headache", "abdominal pain", "a rash", "dizziness"];
const SETTINGS: &[&str] = &["his primary care physician", "the emergency department", "cardiology clinic", "urgent care"];

fn nli_source(rng: &mut ChaCha8Rng) -> (Source, Vec<LabelAnnotation>) {
    let symptom = pick(rng, SYMPTOMS);
    let other = loop {
        let s = pick(rng, SYMPTOMS);
        if s != symptom {
            break s;
        }
    };
    let premise = format!(
        "The patient was seen at {} after he complained of {symptom}.",
        pick(rng, SETTINGS)
    );
    let label = pick(rng, &NLI_LABELS);
    let hypothesis = match label {
        "entailment" => format!("The patient reported {symptom}."),
        "contradiction" => format!("The patient denied any {symptom}."),
        _ => format!("The patient has a history of {other}."),
    };
    (
        Source::Pair { premise, hypothesis },
        vec![LabelAnnotation {
            slot: Slot::Inference,
            focus: None,
            label: label.to_string(),
        }],
    )
}

const MED_FRAMES: &[(&str, &str)] = &[
    ("After discussion, our plan will be to start ", " at a low dose."),
    ("She has been on ", " for several years without issue."),
    ("We will stop ", " given the recent bleeding."),
    ("He may need ", " if symptoms return."),
    ("Continue ", " as previously prescribed."),
];

fn medication_source(rng: &mut ChaCha8Rng) -> (String, Vec<LabelAnnotation>) {
    let drug = pick(rng, DRUGS).to_lowercase();
    let (pre, post) = pick_pair(rng, MED_FRAMES);
    let mut b = Builder::new();
    b.push(pre);
    let focus = b.span(&drug);
    b.push(post);
    let event = pick(rng, &MEDICATION_EVENTS);
    let mut labels = vec![LabelAnnotation {
        slot: Slot::MedicationEvent,
        focus: Some(focus.clone()),
        label: event.to_string(),
    }];
    if event == "Disposition" {
        let values: [&str; 5] = Dimension::ALL.map(|d| pick(rng, d.labels()));
        labels.extend(context_labels(&focus, values));
    }
    (b.text, labels)
}

const ASSESSMENTS: &[&str] = &[
    "72 yo man with CHF exacerbation, improving with diuresis",
    "58 yo woman admitted with community acquired pneumonia",
    "Elderly patient with acute kidney injury on chronic kidney disease",
    "Young man with diabetic ketoacidosis, anion gap closed",
    "Patient with sepsis from a urinary source, now afebrile",
];
const PLANS: &[&str] = &[
    "Continue furosemide, daily weights, strict ins and outs",
    "Ceftriaxone and azithromycin, wean oxygen as tolerated",
    "Renally dose medications, avoid nephrotoxins",
    "Transition to subcutaneous insulin, diabetes teaching",
    "Physical therapy consult, ambulate three times daily",
    "Nicotine patch, counsel on cessation",
];

fn progress_source(rng: &mut ChaCha8Rng, label_cue: bool) -> (Source, Vec<LabelAnnotation>) {
    let label = pick(rng, &PROGRESS_LABELS);
    let assessment = pick(rng, ASSESSMENTS).to_string();
    let mut plan = pick(rng, PLANS).to_string();
    if label_cue {
        plan = format!("{plan}; link {label}");
    }
    (
        Source::Note { assessment, plan },
        vec![LabelAnnotation {
            slot: Slot::ProgressNote,
            focus: None,
            label: label.to_string(),
        }],
    )
}

/// Generates `spec.count` instances, identical for identical specs.
pub fn generate_synthetic(codec: &Codec, spec: &SyntheticSpec) -> Result<Vec<TaskInstance>> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = Vec::with_capacity(spec.count);
    for i in 0..spec.count {
        let (source, gold) = match spec.task {
            TaskKind::Concept => {
                let (t, g) = concept_source(&mut rng);
                (Source::Text(t), Annotations::Concepts(g))
            }
            TaskKind::Relation => {
                let (t, g) = relation_source(&mut rng);
                (Source::Text(t), Annotations::Relations(g))
            }
            TaskKind::Normalization => {
                let (t, g) = normalization_source(codec, &mut rng)?;
                (Source::Text(t), Annotations::Normalizations(g))
            }
            TaskKind::Wsd => {
                let (t, g) = wsd_source(codec, &mut rng);
                (Source::Text(t), Annotations::Labels(g))
            }
            TaskKind::Nli => {
                let (s, g) = nli_source(&mut rng);
                (s, Annotations::Labels(g))
            }
            TaskKind::Medication => {
                let (t, g) = medication_source(&mut rng);
                (Source::Text(t), Annotations::Labels(g))
            }
            TaskKind::ProgressNote => {
                let (s, g) = progress_source(&mut rng, spec.label_cue);
                (s, Annotations::Labels(g))
            }
        };
        let id = format!("{}-{:05}", spec.task, i);
        out.push(TaskInstance::new(codec, id, spec.task, source, gold)?);
    }
    Ok(out)
}

/// Shuffled mix of all seven families, `per_task` instances each.
pub fn generate_mixture(codec: &Codec, per_task: usize, seed: u64) -> Result<Vec<TaskInstance>> {
    let mut all = Vec::new();
    for (k, task) in TaskKind::ALL.into_iter().enumerate() {
        all.extend(generate_synthetic(codec, &SyntheticSpec::new(task, per_task, seed.wrapping_add(k as u64)))?);
    }
    all.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(all)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic_and_round_trips() {
        let codec = Codec::default();
        for task in TaskKind::ALL {
            let spec = SyntheticSpec::new(task, 60, 7);
            let a = generate_synthetic(&codec, &spec).unwrap();
            assert_eq!(a, generate_synthetic(&codec, &spec).unwrap());
            for inst in &a {
                assert!(
                    codec.round_trip(task, &inst.gold, &inst.source),
                    "{task}: {}\n{}",
                    inst.input_text,
                    inst.target_text
                );
            }
        }
    }

    #[test]
    fn zero_count_is_empty() {
        let spec = SyntheticSpec::new(TaskKind::Nli, 0, 1);
        assert!(generate_synthetic(&Codec::default(), &spec).unwrap().is_empty());
    }

    #[test]
    fn relation_set_has_both_marked_and_negative_pairs() {
        let codec = Codec::default();
        let v = generate_synthetic(&codec, &SyntheticSpec::new(TaskKind::Relation, 80, 3)).unwrap();
        assert!(v.iter().any(|i| i.input_text.contains("[s1]")));
        assert!(v.iter().any(|i| i.target_text.contains(NO_RELATION)));
        assert!(v.iter().any(|i| i.gold.len() > 1));
    }

    #[test]
    fn label_cue_puts_the_label_in_the_plan() {
        let codec = Codec::default();
        let spec = SyntheticSpec::new(TaskKind::ProgressNote, 10, 5).with_label_cue();
        for inst in generate_synthetic(&codec, &spec).unwrap() {
            let Annotations::Labels(l) = &inst.gold else { panic!() };
            assert!(inst.input_text.contains(&format!("link {}", l[0].label)));
        }
    }
}
