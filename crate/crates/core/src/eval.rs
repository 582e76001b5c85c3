//! Micro-averaged scoring of parsed predictions against gold.
//!
//! Matching is greedy and one-to-one: gold items are visited in start-offset
//! order and each takes the leftmost unmatched prediction that satisfies the
//! match criterion. Outputs classified as Nonlogical or Irrelevant carry no
//! predictions, so all of their gold becomes false negatives.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::codec::{
    Annotations, Codec, ConceptAnnotation, LabelAnnotation, NormalizationAnnotation,
    RelationAnnotation, Slot, Status, TaskInstance, TaskKind, NO_RELATION,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MatchMode {
    #[default]
    Strict,
    Relaxed,
}

impl MatchMode {
    pub fn as_str(self) -> &'static str {
        match self {
            MatchMode::Strict => "strict",
            MatchMode::Relaxed => "relaxed",
        }
    }
}

impl std::str::FromStr for MatchMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "strict" => Ok(MatchMode::Strict),
            "relaxed" | "relax" => Ok(MatchMode::Relaxed),
            _ => Err(Error::contract(format!("unknown match mode `{s}` (strict|relaxed)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl Counts {
    pub fn new(tp: usize, fp: usize, fn_: usize) -> Self {
        Counts { tp, fp, fn_ }
    }

    pub fn add(&mut self, other: Counts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }

    pub fn prf(&self) -> Prf {
        let ratio = |n: usize, d: usize| if d == 0 { 0.0 } else { n as f64 / d as f64 };
        let precision = ratio(self.tp, self.tp + self.fp);
        let recall = ratio(self.tp, self.tp + self.fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Prf {
            precision,
            recall,
            f1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

pub type CategoryCounts = BTreeMap<String, Counts>;

fn bump(counts: &mut CategoryCounts, category: &str, f: impl FnOnce(&mut Counts)) {
    f(counts.entry(category.to_string()).or_default());
}

/// Greedy one-to-one matching; `order` sorts items by position.
fn greedy<G, P, K: Ord>(
    gold: &[G],
    pred: &[P],
    gold_order: impl Fn(&G) -> K,
    pred_order: impl Fn(&P) -> K,
    matches: impl Fn(&G, &P) -> bool,
    gold_cat: impl Fn(&G) -> String,
    pred_cat: impl Fn(&P) -> String,
) -> CategoryCounts {
    let mut gi: Vec<usize> = (0..gold.len()).collect();
    gi.sort_by_key(|&i| (gold_order(&gold[i]), i));
    let mut pi: Vec<usize> = (0..pred.len()).collect();
    pi.sort_by_key(|&i| (pred_order(&pred[i]), i));
    let mut used = vec![false; pred.len()];
    let mut counts = CategoryCounts::new();
    for g in gi {
        let hit = pi
            .iter()
            .copied()
            .find(|&p| !used[p] && matches(&gold[g], &pred[p]));
        match hit {
            Some(p) => {
                used[p] = true;
                bump(&mut counts, &gold_cat(&gold[g]), |c| c.tp += 1);
            }
            None => bump(&mut counts, &gold_cat(&gold[g]), |c| c.fn_ += 1),
        }
    }
    for p in pi {
        if !used[p] {
            bump(&mut counts, &pred_cat(&pred[p]), |c| c.fp += 1);
        }
    }
    counts
}

fn spans_match(mode: MatchMode, a: (usize, usize), b: (usize, usize)) -> bool {
    match mode {
        MatchMode::Strict => a == b,
        MatchMode::Relaxed => a.0 < b.1 && b.0 < a.1,
    }
}

pub fn match_concepts(gold: &[ConceptAnnotation], pred: &[ConceptAnnotation], mode: MatchMode) -> CategoryCounts {
    greedy(
        gold,
        pred,
        |c| (c.start, c.end),
        |c| (c.start, c.end),
        |g, p| g.label == p.label && spans_match(mode, (g.start, g.end), (p.start, p.end)),
        |c| c.label.clone(),
        |c| c.label.clone(),
    )
}

/// Strict argument spans plus label; `No-relation` pairs are not scored.
pub fn match_relations(gold: &[RelationAnnotation], pred: &[RelationAnnotation]) -> CategoryCounts {
    let keep = |r: &&RelationAnnotation| r.label != NO_RELATION;
    let gold: Vec<&RelationAnnotation> = gold.iter().filter(keep).collect();
    let pred: Vec<&RelationAnnotation> = pred.iter().filter(keep).collect();
    let key = |r: &&RelationAnnotation| (r.arg1.start, r.arg2.start, r.arg1.end, r.arg2.end);
    greedy(
        &gold,
        &pred,
        key,
        key,
        |g, p| {
            g.label == p.label
                && (g.arg1.start, g.arg1.end) == (p.arg1.start, p.arg1.end)
                && (g.arg2.start, g.arg2.end) == (p.arg2.start, p.arg2.end)
        },
        |r| r.label.clone(),
        |r| r.label.clone(),
    )
}

/// CUI equality plus span match under `mode`.
pub fn score_normalization(
    gold: &[NormalizationAnnotation],
    pred: &[NormalizationAnnotation],
    mode: MatchMode,
) -> CategoryCounts {
    let key = |n: &NormalizationAnnotation| (n.mention.start, n.mention.end);
    greedy(
        gold,
        pred,
        key,
        key,
        |g, p| g.cui == p.cui && spans_match(mode, key(g), key(p)),
        |_| "disorder".to_string(),
        |_| "disorder".to_string(),
    )
}

fn label_category(l: &LabelAnnotation) -> String {
    format!("{}:{}", l.slot.name(), l.label)
}

/// Per-label counts for single-label decisions: each gold decision pairs
/// with the prediction for the same slot, if any.
pub fn score_labels(gold: &[LabelAnnotation], pred: &[LabelAnnotation]) -> CategoryCounts {
    let mut counts = CategoryCounts::new();
    let mut used = vec![false; pred.len()];
    for g in gold {
        let hit = (0..pred.len()).find(|&i| !used[i] && pred[i].slot == g.slot);
        match hit {
            Some(i) => {
                used[i] = true;
                if pred[i].label == g.label {
                    bump(&mut counts, &label_category(g), |c| c.tp += 1);
                } else {
                    bump(&mut counts, &label_category(g), |c| c.fn_ += 1);
                    bump(&mut counts, &label_category(&pred[i]), |c| c.fp += 1);
                }
            }
            None => bump(&mut counts, &label_category(g), |c| c.fn_ += 1),
        }
    }
    for (i, p) in pred.iter().enumerate() {
        if !used[i] {
            bump(&mut counts, &label_category(p), |c| c.fp += 1);
        }
    }
    counts
}

/// Fraction of positions where the prediction equals the gold label; a
/// missing prediction is wrong. 0 for empty input.
pub fn accuracy(gold: &[String], pred: &[Option<String>]) -> Result<f64> {
    if gold.len() != pred.len() {
        return Err(Error::contract(format!(
            "accuracy needs equal lengths, got {} gold and {} predictions",
            gold.len(),
            pred.len()
        )));
    }
    if gold.is_empty() {
        return Ok(0.0);
    }
    let right = gold
        .iter()
        .zip(pred)
        .filter(|(g, p)| p.as_deref() == Some(g.as_str()))
        .count();
    Ok(right as f64 / gold.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub categories: CategoryCounts,
    pub micro: Counts,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub accuracy: Option<f64>,
    pub statuses: BTreeMap<Status, usize>,
    pub instances: usize,
    pub mode: MatchMode,
}

/// Sums per-category counts and applies the P/R/F1 formulas.
pub fn micro_prf(categories: &CategoryCounts) -> EvalReport {
    let mut micro = Counts::default();
    for c in categories.values() {
        micro.add(*c);
    }
    let Prf {
        precision,
        recall,
        f1,
    } = micro.prf();
    EvalReport {
        categories: categories.clone(),
        micro,
        precision,
        recall,
        f1,
        accuracy: None,
        statuses: BTreeMap::new(),
        instances: 0,
        mode: MatchMode::Strict,
    }
}

fn merge(into: &mut CategoryCounts, from: CategoryCounts) {
    for (k, v) in from {
        into.entry(k).or_default().add(v);
    }
}

/// Counts for one instance's predictions.
pub fn score_instance(gold: &Annotations, pred: &Annotations, mode: MatchMode) -> Result<CategoryCounts> {
    Ok(match (gold, pred) {
        (Annotations::Concepts(g), Annotations::Concepts(p)) => match_concepts(g, p, mode),
        (Annotations::Relations(g), Annotations::Relations(p)) => match_relations(g, p),
        (Annotations::Normalizations(g), Annotations::Normalizations(p)) => score_normalization(g, p, mode),
        (Annotations::Labels(g), Annotations::Labels(p)) => score_labels(g, p),
        _ => return Err(Error::contract("gold and predictions have different shapes")),
    })
}

/// Parses each generation against its instance and scores the corpus.
/// `None` stands for an instance with no generation at all.
pub fn evaluate(
    codec: &Codec,
    instances: &[TaskInstance],
    generations: &[Option<&str>],
    mode: MatchMode,
) -> Result<EvalReport> {
    if instances.len() != generations.len() {
        return Err(Error::contract(format!(
            "{} instances but {} generations",
            instances.len(),
            generations.len()
        )));
    }
    let mut categories = CategoryCounts::new();
    let mut statuses: BTreeMap<Status, usize> = Status::ALL.iter().map(|&s| (s, 0)).collect();
    let mut nli_gold = Vec::new();
    let mut nli_pred = Vec::new();
    for (inst, generated) in instances.iter().zip(generations) {
        let (status, pred) = match generated {
            Some(text) => {
                let parsed = codec.parse_output(inst.task, text, &inst.source, &inst.expected_pairs())?;
                (parsed.status, parsed.predictions)
            }
            None => (Status::Nonlogical, Annotations::empty_for(inst.task)),
        };
        *statuses.entry(status).or_default() += 1;
        merge(&mut categories, score_instance(&inst.gold, &pred, mode)?);
        if inst.task == TaskKind::Nli {
            let label_of = |a: &Annotations| match a {
                Annotations::Labels(ls) => ls
                    .iter()
                    .find(|l| l.slot == Slot::Inference)
                    .map(|l| l.label.clone()),
                _ => None,
            };
            nli_gold.push(label_of(&inst.gold).unwrap_or_default());
            nli_pred.push(label_of(&pred));
        }
    }
    let mut report = micro_prf(&categories);
    report.statuses = statuses;
    report.instances = instances.len();
    report.mode = mode;
    if !nli_gold.is_empty() {
        report.accuracy = Some(accuracy(&nli_gold, &nli_pred)?);
    }
    Ok(report)
}

impl EvalReport {
    /// `key=value` lines.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "instances={}", self.instances);
        let _ = writeln!(s, "mode={}", self.mode.as_str());
        let _ = writeln!(s, "tp={}", self.micro.tp);
        let _ = writeln!(s, "fp={}", self.micro.fp);
        let _ = writeln!(s, "fn={}", self.micro.fn_);
        let _ = writeln!(s, "precision={:.6}", self.precision);
        let _ = writeln!(s, "recall={:.6}", self.recall);
        let _ = writeln!(s, "f1={:.6}", self.f1);
        if let Some(a) = self.accuracy {
            let _ = writeln!(s, "accuracy={a:.6}");
        }
        for (status, n) in &self.statuses {
            let _ = writeln!(s, "status.{}={n}", status.as_str());
        }
        s
    }

    /// One row per category plus a final `MICRO` row.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("category\tTP\tFP\tFN\tP\tR\tF1\n");
        let mut row = |name: &str, c: &Counts| {
            let p = c.prf();
            let _ = writeln!(
                s,
                "{name}\t{}\t{}\t{}\t{:.6}\t{:.6}\t{:.6}",
                c.tp, c.fp, c.fn_, p.precision, p.recall, p.f1
            );
        };
        for (name, c) in &self.categories {
            row(name, c);
        }
        row("MICRO", &self.micro);
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn concept(start: usize, end: usize, label: &str) -> ConceptAnnotation {
        ConceptAnnotation {
            start,
            end,
            label: label.into(),
            text: String::new(),
        }
    }

    fn total(c: &CategoryCounts) -> Counts {
        micro_prf(c).micro
    }

    #[test]
    fn identity_is_all_true_positives() {
        let g = vec![concept(0, 3, "Drug"), concept(4, 7, "Form"), concept(8, 9, "Route")];
        assert_eq!(total(&match_concepts(&g, &g, MatchMode::Strict)), Counts::new(3, 0, 0));
    }

    #[test]
    fn shifted_span_counts_only_when_relaxed() {
        let g = vec![concept(10, 20, "Drug")];
        let p = vec![concept(12, 20, "Drug")];
        assert_eq!(total(&match_concepts(&g, &p, MatchMode::Strict)), Counts::new(0, 1, 1));
        assert_eq!(total(&match_concepts(&g, &p, MatchMode::Relaxed)), Counts::new(1, 0, 0));
    }

    #[test]
    fn worked_example_gives_half_third_and_point_four() {
        let g = vec![concept(0, 1, "A"), concept(2, 3, "B"), concept(4, 5, "C")];
        let p = vec![concept(0, 1, "A"), concept(6, 7, "D")];
        let r = micro_prf(&match_concepts(&g, &p, MatchMode::Strict));
        assert_eq!(r.micro, Counts::new(1, 1, 2));
        assert_eq!(r.precision, 0.5);
        assert!((r.recall - 1.0 / 3.0).abs() < 1e-15);
        assert!((r.f1 - 0.4).abs() < 1e-15);
    }

    #[test]
    fn zero_counts_give_zero_scores() {
        let r = micro_prf(&CategoryCounts::new());
        assert_eq!((r.precision, r.recall, r.f1), (0.0, 0.0, 0.0));
    }

    #[test]
    fn two_categories_sum_before_dividing() {
        let mut c = CategoryCounts::new();
        c.insert("x".into(), Counts::new(1, 0, 0));
        c.insert("y".into(), Counts::new(0, 1, 1));
        let r = micro_prf(&c);
        assert_eq!((r.precision, r.recall, r.f1), (0.5, 0.5, 0.5));
    }

    #[test]
    fn accuracy_counts_missing_as_wrong() {
        let g: Vec<String> = ["a", "b", "c", "d"].iter().map(|s| s.to_string()).collect();
        let p = vec![Some("a".into()), Some("b".into()), Some("c".into()), None];
        assert_eq!(accuracy(&g, &p).unwrap(), 0.75);
        assert!(accuracy(&g, &p[..2]).is_err());
    }

    #[test]
    fn tsv_ends_with_micro_row() {
        let mut c = CategoryCounts::new();
        c.insert("Drug".into(), Counts::new(1, 1, 2));
        let tsv = micro_prf(&c).to_tsv();
        let last = tsv.lines().last().unwrap();
        assert_eq!(last, "MICRO\t1\t1\t2\t0.500000\t0.333333\t0.400000");
    }
}
