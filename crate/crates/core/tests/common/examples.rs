//! Worked formulation examples and observed bad generations, shared by the
//! core fixture tests and the acceptance target.
//!
//! Printed texts are kept verbatim. Where a printed example cannot be
//! reproduced literally, the row lists the textual corrections applied
//! before comparison.

#![allow(dead_code)]

use std::collections::BTreeSet;

use softprompt::codec::{
    canonical_whitespace, context_labels, Annotations, Codec, ConceptAnnotation, LabelAnnotation,
    Mention, NormalizationAnnotation, RelationAnnotation, Slot, Source, Status, TaskKind,
};

pub struct FormulationExample {
    pub kind: TaskKind,
    pub source: Source,
    pub gold: Annotations,
    /// Model input as printed, when our input format reproduces it.
    pub printed_input: Option<&'static str>,
    pub printed_target: &'static str,
    /// `(printed, corrected)` substitutions applied to `printed_target`.
    pub corrections: &'static [(&'static str, &'static str)],
}

impl FormulationExample {
    pub fn corrected_target(&self) -> String {
        let mut t = self.printed_target.to_string();
        for (from, to) in self.corrections {
            t = t.replace(from, to);
        }
        t
    }
}

/// Template clauses after whitespace normalization, order and duplicates ignored.
pub fn clause_set(text: &str) -> BTreeSet<String> {
    canonical_whitespace(text)
        .split(';')
        .map(|c| {
            let c = c.trim().trim_end_matches('.').trim();
            let mut chars = c.chars();
            match chars.next() {
                Some(f) => f.to_lowercase().chain(chars).collect(),
                None => String::new(),
            }
        })
        .filter(|c| !c.is_empty())
        .collect()
}

fn text(source: &Source) -> &str {
    source.text().expect("text source")
}

fn nth(source: &str, surface: &str, n: usize) -> Mention {
    let mut from = 0;
    let mut byte = 0;
    for _ in 0..=n {
        byte = from + source[from..].find(surface).unwrap_or_else(|| panic!("`{surface}` not in source"));
        from = byte + surface.len();
    }
    let start = source[..byte].chars().count();
    Mention::at(source, start, start + surface.chars().count()).unwrap()
}

fn concept(source: &str, surface: &str, n: usize, label: &str) -> ConceptAnnotation {
    ConceptAnnotation::new(nth(source, surface, n), label)
}

const CONCEPT_TEXT: &str =
    "6. Colchicine 0.6 mg Tablet Sig: One (1) Tablet PO DAILY (Daily) as needed for Gout flare/pain.";

const RELATION_TEXT: &str = "Social History: Lives at [** Hospital6 3355 **], smoking 28 year pack hx, etoh remote, former IVDU (used once), [** Company 2318 **] bus driver for 18 yrs";

// The printed mention is lowercase "arthritis" while the printed input starts
// the list with "Arthritis"; the input here is lowercased to agree with the gold.
const NORMALIZATION_TEXT: &str = "Past Medical History: arthritis carpal tunnel shingles right arm 2000 needs right knee replacement left knee replacement in [**2010**] thyroidectomy 1978 cholecystectomy [**1981**] hysterectomy 2001 h/o LGIB 2000-2001 after taking baby ASA 81 QOD Social History: Her husband died recently.";

// The printed input opens with a "[CEA 173 175" record header, dropped here so
// that the first occurrence of the abbreviation is the annotated one.
const WSD_TEXT: &str = "LABORATORY DATA PAIN: Negative. ADL STATUS: Energy: Low. Eating: She is eating well. Sleeping: She is sleeping well. Maintaining weight: Yes. LABORATORY DATA: Normal except for an elevated CEA at 6.1 but as the patient has been cutting back her smoking it has gone from 6.9 to 6.1. CHEMOTHERAPY/RADIATION THERAPY HISTORY: The patient has had no chemotherapy or hormone therapy.";

const PREMISE: &str = "The patient was seen by his primary care physician after he had complained of a one-week history of dyspnea on exertion and jaw tightness.";
const HYPOTHESIS: &str = "The patient has symptoms of a CHF exacerbation.";

const MEDICATION_TEXT: &str = "least moderate risk, positive stress test. After discussion with Dr. Camacho, our plan will be continue her on aspirin, beta-blocker, and a low-dose ACE inhibitor through her regimen. She refuses to take a cholesterol-lowering agent due to previous concerns with myalgias. She will be referred for cardiac catheterization within the next several days with a goal to better define her coronary anatomy for the possibility of percutaneous coronary intervention versus cardiac bypass surgery.";

const ASSESSMENT: &str = "45 year old male with no known CAD and aspirin allergy who presented with chest pain and symptoms concerning for unstable angina, now with STE changes on ECG in the setting of chest pain. Now chest pain free.";
const PLAN: &str = "PUMP: Patient with some ECG changes mildly concerning for possible LVH, although does not meet diagnostic criteria on current ECG ' s. - Baseline TTE today to assess.";

pub fn formulation_examples(codec: &Codec) -> Vec<FormulationExample> {
    let mut out = Vec::new();

    let src = Source::Text(CONCEPT_TEXT.into());
    let t = text(&src);
    let gold = vec![
        concept(t, "Colchicine", 0, "Drug"),
        concept(t, "0.6 mg", 0, "Strength"),
        concept(t, "Tablet", 0, "Form"),
        concept(t, "Tablet", 1, "Form"),
        concept(t, "One (1)", 0, "Dosage"),
        concept(t, "DAILY (Daily) as needed", 0, "Frequency"),
        concept(t, "PO", 0, "Route"),
        concept(t, "Gout flare/pain", 0, "Reason"),
    ];
    out.push(FormulationExample {
        kind: TaskKind::Concept,
        gold: Annotations::Concepts(gold),
        source: src,
        printed_input: Some(CONCEPT_TEXT),
        printed_target: "The extracted drug entity is Colchicin e ; the extracted strength entity is 0.6 mg ; the extracted form entity is Tablet ; the extracted dosage entity is One (1) ; the extracted frequency is DAILY (Daily) as needed ; the extracted route entity is PO ; the extracted reason entity is Gout flare/pain .",
        corrections: &[
            ("Colchicin e", "Colchicine"),
            ("the extracted frequency is", "the extracted frequency entity is"),
        ],
    });

    let src = Source::Text(RELATION_TEXT.into());
    let t = text(&src);
    let rel = |a1: (&str, usize), a2: (&str, usize), label: &str| RelationAnnotation {
        arg1: nth(t, a1.0, a1.1),
        arg2: nth(t, a2.0, a2.1),
        label: label.into(),
    };
    let gold = vec![
        rel(("Lives", 0), ("at [** Hospital6 3355 **]", 0), "Living status-Type"),
        rel(("smoking", 0), ("28 year pack hx", 0), "Tobacco-Amount"),
        rel(("etoh", 0), ("remote", 0), "Alcohol-Status"),
        rel(("former IVDU", 0), ("IVDU", 0), "Drug-Method"),
        rel(("former IVDU", 0), ("used once", 0), "Drug-Frequency"),
        rel(("bus driver", 0), ("for 18 yrs", 0), "Employment-Duration"),
    ];
    out.push(FormulationExample {
        kind: TaskKind::Relation,
        gold: Annotations::Relations(gold),
        source: src,
        printed_input: Some(RELATION_TEXT),
        printed_target: "The relation between “Lives” and “at [** Hospital6 3355 **]” is “ Living status-Type ”; the relation between “smoking” and “28 year pack hx” is “ Tobacco-Amount ”; the relation between “etoh” and “remote” is “ Alcohol-Status ”; the relation between “former IVDU” and “IVDU” is “ Drug-Method ”; the relation between “former IVDU” and “used once” is “ Drug-Frequency ”; the relation between “bus driver” and “for 18 yrs” is “ Employment-Duration ”.",
        corrections: &[],
    });

    let src = Source::Text(NORMALIZATION_TEXT.into());
    let t = text(&src);
    let norm = |surface: &str, cui: &str| NormalizationAnnotation {
        mention: nth(t, surface, 0),
        cui: cui.into(),
        preferred_name: codec.lexicon().preferred_name(cui).unwrap().to_string(),
    };
    let gold = vec![
        norm("arthritis", "C0003864"),
        norm("carpal tunnel", "C0007286"),
        norm("shingles", "C0019360"),
        norm("LGIB", "C0024050"),
    ];
    out.push(FormulationExample {
        kind: TaskKind::Normalization,
        gold: Annotations::Normalizations(gold),
        source: src,
        printed_input: None,
        printed_target: "The normalized string of the disorder concept “ arthritis ” is “ Arthritis ”; the normalized string of the disorder concept “ carpal tunnel ” is “ Carpal Tunnel Syndrome ”; the normalized string of the disorder concept “ shingles ” is “ Herpes zoster disease ”; the normalized string of the disorder concept “ LGIB ” is “ Lower gastrointestinal hemorrhage ”.",
        corrections: &[],
    });

    let src = Source::Text(WSD_TEXT.into());
    let gold = vec![LabelAnnotation {
        slot: Slot::Sense,
        focus: Some(nth(text(&src), "CEA", 0)),
        label: "carcinoembryonic antigen".into(),
    }];
    out.push(FormulationExample {
        kind: TaskKind::Wsd,
        gold: Annotations::Labels(gold),
        source: src,
        printed_input: None,
        printed_target: "The sense of the abbreviation “CEA” is “ carcinoembryonic antigen ”.",
        corrections: &[],
    });

    out.push(FormulationExample {
        kind: TaskKind::Nli,
        source: Source::Pair {
            premise: PREMISE.into(),
            hypothesis: HYPOTHESIS.into(),
        },
        gold: Annotations::Labels(vec![LabelAnnotation {
            slot: Slot::Inference,
            focus: None,
            label: "entailment".into(),
        }]),
        printed_input: Some("Premise: The patient was seen by his primary care physician after he had complained of a one-week history of dyspnea on exertion and jaw tightness. Hypothesis: The patient has symptoms of a CHF exacerbation."),
        printed_target: "The hypothesis that “The patient has symptoms of a CHF exacerbation” is entailment to the premise that “The patient was seen by his primary care physician after he had complained of a one-week history of dyspnea on exertion and jaw tightness”.",
        corrections: &[],
    });

    let src = Source::Text(MEDICATION_TEXT.into());
    let focus = nth(text(&src), "cholesterol-lowering agent", 0);
    let mut labels = vec![LabelAnnotation {
        slot: Slot::MedicationEvent,
        focus: Some(focus.clone()),
        label: "Disposition".into(),
    }];
    labels.extend(context_labels(&focus, ["Start", "Negated", "Present", "Certain", "Patient"]));
    out.push(FormulationExample {
        kind: TaskKind::Medication,
        gold: Annotations::Labels(labels),
        source: src,
        printed_input: None,
        printed_target: "Event Classification: The category of medication event “cholesterol-lowering agent” is “ Disposition ”. Context Classification: The category of disposition event “cholesterol-lowering agent” from the dimension of Action is “ Start ”. The category of disposition event “cholesterol-lowering agent” from the dimension of Negation is “ Negated ”. The category of disposition event “cholesterol-lowering agent” from the dimension of Temporality is “ Present ”. The category of disposition event “cholesterol-lowering agent” from the dimension of Certainty is “ Certain ”. The category of disposition event “cholesterol-lowering agent” from the dimension of Actor is “ Patient ”.",
        corrections: &[],
    });

    out.push(FormulationExample {
        kind: TaskKind::ProgressNote,
        source: Source::Note {
            assessment: ASSESSMENT.into(),
            plan: PLAN.into(),
        },
        gold: Annotations::Labels(vec![LabelAnnotation {
            slot: Slot::ProgressNote,
            focus: None,
            label: "Direct".into(),
        }]),
        printed_input: None,
        printed_target: "The relation between the given assessment and plan subsection is Direct .",
        corrections: &[],
    });
    out
}

pub struct HallucinationExample {
    /// Relation input with `[s1] [e1] [s2] [e2]` markers.
    pub input: &'static str,
    pub ground_truth: &'static str,
    pub ground_truth_label: &'static str,
    pub generated: &'static str,
    pub expected: Status,
    /// Label recoverable from `generated`, if any.
    pub recovered_label: Option<&'static str>,
}

pub fn hallucination_examples() -> Vec<HallucinationExample> {
    vec![
        HallucinationExample {
            input: "Disp: * 60 80 mg syringe * Refills: * 1 * 8. [s2] Acetaminophen [e2] 500 mg Tablet Sig: 1 - 2 Tablets PO [s1] Q6H (every 6 hours) as needed [e1] for pain.",
            ground_truth: "The relation between “Q6H (every 6 hours) as needed” and “Acetaminophen” is “ Frequency-Drug ”.",
            ground_truth_label: "Frequency-Drug",
            generated: "- Non-responder - Non- responder - Non-responder",
            expected: Status::Nonlogical,
            recovered_label: None,
        },
        HallucinationExample {
            // Printed across two lines; joined with a single space.
            input: "8. docusate sodium 100 mg [s1] Capsule [e1] Sig: One (1) Capsule PO BID (2 times a day). 7. [s2] senna [e2] 8.6 mg Tablet Sig: One (1) Tablet PO BID (2 times a day) as needed for constipation.",
            ground_truth: "The relation between “Capsule” and “senna” is “ No-relation ”.",
            ground_truth_label: "No-relation",
            generated: "1: 2: 3: 4: 5: 6: 7: 8: 9: 10: 11: 12: 13: 14:",
            expected: Status::Nonlogical,
            recovered_label: None,
        },
        HallucinationExample {
            input: "Disp: * 30 Tablet (s) * Refills: * 0 * 24. [s2] clopidogrel [e2] 75 mg Tablet Sig: [s1] One (1) [e1] Tablet PO DAILY (Daily)",
            ground_truth: "The relation between “One (1)” and “clopidogrel” is “ Dosage-Drug ”.",
            ground_truth_label: "Dosage-Drug",
            generated: "1. The drug clopidogrel is a non-steroidal anti-platelet drug that is used to prevent platelet aggregation and reduce the risk of thrombosis in patients with acute coronary syndromes. It is also used to prevent thrombosis in patients with non-cardiac surgery. 2. Clopidogrel is a prodrug that is converted to its active form by the enzyme CYP2C19.",
            expected: Status::Irrelevant,
            recovered_label: None,
        },
        HallucinationExample {
            input: "Medications on Admission: atenolol 25 mg daily aspirin 81 mg daily lipitor 10 mg QOD (every other am) prednisone 10 mg daily tamsulosin SR 0.4 mg evening multivitamin 1 tab daily fish oil capsule 1000 mg twice a day [s2] systane lubricant eye [e2] drops 1 gtt [s1] TID [e1].",
            ground_truth: "The relation between “TID” and “systane lubricant eye” is “ Frequency-Drug ”.",
            ground_truth_label: "Frequency-Drug",
            generated: "I have been using nonpreserved systane eye drops for a few years.",
            expected: Status::Irrelevant,
            recovered_label: None,
        },
        HallucinationExample {
            input: "OXYCODONE - 20 mg Tablet Sustained Release 12 hr - 3 (Three) Tablet (s) by mouth every morning (60 mg), 1 tablet every 2 pm (20 mg) and 3 tablets every evening (60 mg) [s2] PANTOPRAZOLE [e2] [PROTONIX] - 40 mg Tablet , Delayed Release (E.C.) - [s1] 1 [e1] Tablet (s) by mouth once day",
            ground_truth: "The relation between “1” and “PANTOPRAZOLE” is “ Dosage-Drug ”.",
            ground_truth_label: "Dosage-Drug",
            generated: "The relation type between the Drug entity “PANTOPRAZOLE” and Dosage entity “1” is “has_dosage”.",
            expected: Status::Interpretable,
            recovered_label: Some("Dosage-Drug"),
        },
        HallucinationExample {
            input: "Disp: * 30 Tablet (s) * Refills: * 2 * 3. [s2] Fluticasone - Salmeterol [e2] 250 - 50 mcg / Dose Disk with Device Sig: One (1) [s1] Disk with Device [e1] Inhalation Hospital 1 (2 times a day).",
            // Printed without a final period.
            ground_truth: "The relation between “Disk with Device” and “Fluticasone - Salmeterol” is “ Form-Drug ”",
            ground_truth_label: "Form-Drug",
            generated: "The relation type between the Drug entity “Fluticasone - Salmeterol” and Form entity “Disk with Device” is “is_a”.",
            expected: Status::Interpretable,
            recovered_label: Some("Form-Drug"),
        },
    ]
}

/// Checks one formulation example; returns a description of the first mismatch.
pub fn check_formulation(codec: &Codec, ex: &FormulationExample) -> Result<(), String> {
    let kind = ex.kind;
    let target = codec
        .serialize_target(kind, &ex.gold, &ex.source)
        .map_err(|e| format!("{kind}: serialize failed: {e}"))?;
    let printed = ex.corrected_target();
    if ex.corrections.is_empty() {
        if canonical_whitespace(&target) != canonical_whitespace(&printed) {
            return Err(format!("{kind}: target differs\n ours:    {target}\n printed: {printed}"));
        }
    } else if clause_set(&target) != clause_set(&printed) {
        return Err(format!(
            "{kind}: clauses differ\n ours:    {:?}\n printed: {:?}",
            clause_set(&target),
            clause_set(&printed)
        ));
    }
    if let Some(input) = ex.printed_input {
        let ours = softprompt::codec::build_input(kind, &ex.source, &ex.gold).map_err(|e| e.to_string())?;
        if ours != input {
            return Err(format!("{kind}: input differs\n ours:    {ours}\n printed: {input}"));
        }
    }
    let back = codec
        .parse_output(kind, &target, &ex.source, &[])
        .map_err(|e| e.to_string())?;
    if back.status != Status::WellFormed || back.predictions != ex.gold.sorted() {
        return Err(format!("{kind}: own target parsed to {back:?}"));
    }
    let printed_back = codec
        .parse_output(kind, &printed, &ex.source, &[])
        .map_err(|e| e.to_string())?;
    if ex.corrections.is_empty() {
        if printed_back.status != Status::WellFormed || printed_back.predictions != ex.gold.sorted() {
            return Err(format!("{kind}: printed target parsed to {printed_back:?}"));
        }
    } else if !subset_covering(&printed_back.predictions, &ex.gold) {
        return Err(format!("{kind}: corrected printed target parsed to {printed_back:?}"));
    }
    Ok(())
}

/// Every prediction is gold, and every distinct gold (label, surface) is predicted.
fn subset_covering(pred: &Annotations, gold: &Annotations) -> bool {
    let (Annotations::Concepts(p), Annotations::Concepts(g)) = (pred, gold) else {
        return false;
    };
    let key = |c: &ConceptAnnotation| (c.label.clone(), c.text.clone());
    p.iter().all(|c| g.contains(c))
        && g.iter().map(key).collect::<BTreeSet<_>>() == p.iter().map(key).collect::<BTreeSet<_>>()
}

pub fn check_hallucination(codec: &Codec, ex: &HallucinationExample) -> Result<(), String> {
    let marked = softprompt::codec::strip_markers(ex.input).map_err(|e| e.to_string())?;
    let source = Source::Text(marked.text.clone());
    let (a1, a2) = marked.pairs.first().cloned().ok_or("input carries no marked pair")?;
    let expected = |label: &str| {
        Annotations::Relations(vec![RelationAnnotation {
            arg1: a1.clone(),
            arg2: a2.clone(),
            label: label.into(),
        }])
    };
    let gt = codec
        .parse_output(TaskKind::Relation, ex.ground_truth, &source, &marked.pairs)
        .map_err(|e| e.to_string())?;
    if gt.status != Status::WellFormed || gt.predictions != expected(ex.ground_truth_label) {
        return Err(format!("ground truth parsed to {gt:?}"));
    }
    let got = codec
        .parse_output(TaskKind::Relation, ex.generated, &source, &marked.pairs)
        .map_err(|e| e.to_string())?;
    if got.status != ex.expected {
        return Err(format!("`{}` classified {:?}, expected {:?}", ex.generated, got.status, ex.expected));
    }
    let want = match ex.recovered_label {
        Some(label) => expected(label),
        None => Annotations::Relations(Vec::new()),
    };
    if got.predictions != want {
        return Err(format!("`{}` recovered {:?}", ex.generated, got.predictions));
    }
    Ok(())
}
