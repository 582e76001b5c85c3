use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use crate::error::{Error, Result};

/// Marker predicted when a preferred name is not in the lexicon.
pub const NO_CUI: &str = "NoCUI";

const BUILTIN: [(&str, &str); 34] = [
    ("C0003864", "Arthritis"),
    ("C0007286", "Carpal Tunnel Syndrome"),
    ("C0019360", "Herpes zoster disease"),
    ("C0024050", "Lower gastrointestinal hemorrhage"),
    ("C0011849", "Diabetes Mellitus"),
    ("C0020538", "Hypertensive disease"),
    ("C0004096", "Asthma"),
    ("C0018802", "Congestive heart failure"),
    ("C0027051", "Myocardial Infarction"),
    ("C0032285", "Pneumonia"),
    ("C0011570", "Mental Depression"),
    ("C0003467", "Anxiety"),
    ("C0038454", "Cerebrovascular accident"),
    ("C0004238", "Atrial Fibrillation"),
    ("C0024117", "Chronic Obstructive Airway Disease"),
    ("C0022658", "Kidney Diseases"),
    ("C0017168", "Gastroesophageal reflux disease"),
    ("C0020676", "Hypothyroidism"),
    ("C0002871", "Anemia"),
    ("C0018681", "Headache"),
    ("C0008031", "Chest Pain"),
    ("C0013404", "Dyspnea"),
    ("C0015967", "Fever"),
    ("C0027497", "Nausea"),
    ("C0042963", "Vomiting"),
    ("C0011991", "Diarrhea"),
    ("C0009806", "Constipation"),
    ("C0029456", "Osteoporosis"),
    ("C0018099", "Gout"),
    ("C0036690", "Septicemia"),
    ("C0034065", "Pulmonary Embolism"),
    ("C0149871", "Deep Vein Thrombosis"),
    ("C0010054", "Coronary Arteriosclerosis"),
    ("C0020443", "Hypercholesterolemia"),
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CuiLookup {
    Found { cui: String, ambiguous: bool },
    NoCui,
}

impl CuiLookup {
    pub fn cui(&self) -> &str {
        match self {
            CuiLookup::Found { cui, .. } => cui,
            CuiLookup::NoCui => NO_CUI,
        }
    }
}

/// Preferred name ↔ CUI table.
#[derive(Debug, Clone, PartialEq)]
pub struct Lexicon {
    entries: Vec<(String, String)>,
    by_name: HashMap<String, Vec<(String, String)>>,
    by_cui: BTreeMap<String, String>,
}

fn valid_cui(cui: &str) -> bool {
    cui.len() == 8 && cui.starts_with('C') && cui[1..].bytes().all(|b| b.is_ascii_digit())
}

impl Default for Lexicon {
    fn default() -> Self {
        Lexicon::from_entries(
            BUILTIN
                .iter()
                .map(|(c, n)| (c.to_string(), n.to_string()))
                .collect(),
        )
        .expect("built-in lexicon is valid")
    }
}

impl Lexicon {
    pub fn from_entries(entries: Vec<(String, String)>) -> Result<Self> {
        let mut by_name: HashMap<String, Vec<(String, String)>> = HashMap::new();
        let mut by_cui = BTreeMap::new();
        for (cui, name) in &entries {
            if !valid_cui(cui) {
                return Err(Error::contract(format!("`{cui}` is not a CUI (C + 7 digits)")));
            }
            let list = by_name.entry(name.to_lowercase()).or_default();
            if !list.iter().any(|(c, _)| c == cui) {
                list.push((cui.clone(), name.clone()));
                list.sort();
            }
            by_cui.entry(cui.clone()).or_insert_with(|| name.clone());
        }
        Ok(Lexicon {
            entries,
            by_name,
            by_cui,
        })
    }

    /// Lines of `CUI<TAB>preferred name`; blank lines are skipped.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (cui, name) = line.split_once('\t').ok_or(Error::Parse {
                line: i + 1,
                msg: "expected `CUI<TAB>preferred name`".into(),
            })?;
            if !valid_cui(cui) || name.trim().is_empty() {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: format!("bad lexicon entry `{line}`"),
                });
            }
            entries.push((cui.to_string(), name.trim().to_string()));
        }
        Lexicon::from_entries(entries)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Lexicon::from_text(&std::fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        self.entries
            .iter()
            .map(|(c, n)| format!("{c}\t{n}\n"))
            .collect()
    }

    pub fn entries(&self) -> &[(String, String)] {
        &self.entries
    }

    pub fn preferred_name(&self, cui: &str) -> Option<&str> {
        self.by_cui.get(cui).map(String::as_str)
    }

    pub fn lookup(&self, name: &str) -> CuiLookup {
        match self.by_name.get(&name.trim().to_lowercase()) {
            Some(cuis) => CuiLookup::Found {
                cui: cuis[0].0.clone(),
                ambiguous: cuis.len() > 1,
            },
            None => CuiLookup::NoCui,
        }
    }

    /// Stored spelling of `name` under `cui`, matched case-insensitively.
    pub fn spelling(&self, cui: &str, name: &str) -> Option<&str> {
        self.by_name
            .get(&name.trim().to_lowercase())?
            .iter()
            .find(|(c, _)| c == cui)
            .map(|(_, n)| n.as_str())
    }

    /// True when `name` is listed, with this exact spelling, for `cui`.
    pub fn contains(&self, cui: &str, name: &str) -> bool {
        self.spelling(cui, name) == Some(name)
    }
}

pub fn normalize_lookup(preferred_name: &str, lexicon: &Lexicon) -> CuiLookup {
    lexicon.lookup(preferred_name)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn published_names_resolve() {
        let lex = Lexicon::default();
        assert_eq!(normalize_lookup("Carpal Tunnel Syndrome", &lex).cui(), "C0007286");
        assert_eq!(normalize_lookup("herpes ZOSTER disease", &lex).cui(), "C0019360");
        assert_eq!(normalize_lookup("no-such-disease", &lex), CuiLookup::NoCui);
    }

    #[test]
    fn ambiguous_names_take_the_lowest_cui() {
        let lex = Lexicon::from_text("C0000009\tCold\nC0000002\tcold\n").unwrap();
        assert_eq!(
            lex.lookup("Cold"),
            CuiLookup::Found {
                cui: "C0000002".into(),
                ambiguous: true
            }
        );
    }

    #[test]
    fn bad_lines_report_their_number() {
        let err = Lexicon::from_text("C0000001\tA\nX12\tB\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
    }
}
