//! Entity (`T`) and relation (`R`) records in standoff form:
//!
//! ```text
//! T1<TAB>Drug 3 13<TAB>Colchicine
//! R1<TAB>Strength-Drug Arg1:T2 Arg2:T1
//! ```
//!
//! Offsets count characters of the accompanying text file.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::codec::{char_slice, ConceptAnnotation, Mention, RelationAnnotation};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Entity {
    pub id: String,
    pub label: String,
    pub start: usize,
    pub end: usize,
    pub surface: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Relation {
    pub id: String,
    pub label: String,
    pub arg1: String,
    pub arg2: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StandoffDocument {
    pub id: String,
    pub text: String,
    pub entities: Vec<Entity>,
    pub relations: Vec<Relation>,
}

fn numbered_id(id: &str, prefix: char) -> bool {
    id.strip_prefix(prefix)
        .is_some_and(|n| !n.is_empty() && n.bytes().all(|b| b.is_ascii_digit()))
}

fn parse_entity(line: usize, id: &str, fields: &str, surface: &str, text: &str) -> Result<Entity> {
    let bad = |msg: String| Error::Parse { line, msg };
    let mut parts = fields.rsplitn(3, ' ');
    let (Some(end), Some(start), Some(label)) = (parts.next(), parts.next(), parts.next()) else {
        return Err(bad(format!("expected `Label start end`, found `{fields}`")));
    };
    let start: usize = start.parse().map_err(|_| bad(format!("bad start offset `{start}`")))?;
    let end: usize = end.parse().map_err(|_| bad(format!("bad end offset `{end}`")))?;
    if label.is_empty() || start >= end {
        return Err(bad(format!("bad entity fields `{fields}`")));
    }
    match char_slice(text, start, end) {
        Some(s) if s == surface => {}
        Some(s) => {
            return Err(bad(format!(
                "surface `{surface}` does not match text `{s}` at {start}..{end}"
            )))
        }
        None => return Err(bad(format!("span {start}..{end} is outside the text"))),
    }
    Ok(Entity {
        id: id.to_string(),
        label: label.to_string(),
        start,
        end,
        surface: surface.to_string(),
    })
}

fn parse_relation(line: usize, id: &str, fields: &str) -> Result<Relation> {
    let bad = || Error::Parse {
        line,
        msg: format!("expected `Label Arg1:T# Arg2:T#`, found `{fields}`"),
    };
    let mut parts = fields.rsplitn(3, ' ');
    let (Some(a2), Some(a1), Some(label)) = (parts.next(), parts.next(), parts.next()) else {
        return Err(bad());
    };
    let arg1 = a1.strip_prefix("Arg1:").ok_or_else(bad)?;
    let arg2 = a2.strip_prefix("Arg2:").ok_or_else(bad)?;
    if label.is_empty() {
        return Err(bad());
    }
    Ok(Relation {
        id: id.to_string(),
        label: label.to_string(),
        arg1: arg1.to_string(),
        arg2: arg2.to_string(),
    })
}

/// Parses annotation lines against `text`.
pub fn parse_standoff(id: &str, text: &str, annotations: &str) -> Result<StandoffDocument> {
    let mut entities = Vec::new();
    let mut relations = Vec::new();
    let mut relation_lines = Vec::new();
    let mut seen: HashMap<String, usize> = HashMap::new();
    for (i, raw) in annotations.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = raw.split('\t').collect();
        let rid = fields[0];
        if let Some(first) = seen.insert(rid.to_string(), line) {
            return Err(Error::Parse {
                line,
                msg: format!("id {rid} already defined on line {first}"),
            });
        }
        match fields.as_slice() {
            [rid, f, surface] if numbered_id(rid, 'T') => {
                entities.push(parse_entity(line, rid, f, surface, text)?)
            }
            [rid, f] if numbered_id(rid, 'R') => {
                relations.push(parse_relation(line, rid, f)?);
                relation_lines.push(line);
            }
            _ => {
                return Err(Error::Parse {
                    line,
                    msg: format!("unrecognized record `{raw}`"),
                })
            }
        }
    }
    for (r, &line) in relations.iter().zip(&relation_lines) {
        for arg in [&r.arg1, &r.arg2] {
            if !entities.iter().any(|e| &e.id == arg) {
                return Err(Error::Dangling {
                    line,
                    reference: arg.clone(),
                });
            }
        }
    }
    Ok(StandoffDocument {
        id: id.to_string(),
        text: text.to_string(),
        entities,
        relations,
    })
}

/// Reads `<text_path>` and `<ann_path>`; the document id is the text file stem.
pub fn load_standoff(text_path: &Path, ann_path: &Path) -> Result<StandoffDocument> {
    let text = std::fs::read_to_string(text_path)?;
    let ann = std::fs::read_to_string(ann_path)?;
    let id = text_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    parse_standoff(&id, &text, &ann)
}

impl StandoffDocument {
    pub fn annotation_text(&self) -> Result<String> {
        let mut s = String::new();
        for e in &self.entities {
            if e.surface.contains(['\t', '\n']) {
                return Err(Error::contract(format!("entity {} spans a tab or newline", e.id)));
            }
            let _ = writeln!(s, "{}\t{} {} {}\t{}", e.id, e.label, e.start, e.end, e.surface);
        }
        for r in &self.relations {
            let _ = writeln!(s, "{}\t{} Arg1:{} Arg2:{}", r.id, r.label, r.arg1, r.arg2);
        }
        Ok(s)
    }

    pub fn entity(&self, id: &str) -> Option<&Entity> {
        self.entities.iter().find(|e| e.id == id)
    }

    pub fn concepts(&self) -> Vec<ConceptAnnotation> {
        self.entities
            .iter()
            .map(|e| ConceptAnnotation {
                start: e.start,
                end: e.end,
                label: e.label.clone(),
                text: e.surface.clone(),
            })
            .collect()
    }

    /// Relations with their arguments resolved to mentions.
    pub fn relation_annotations(&self) -> Vec<RelationAnnotation> {
        let mention = |id: &str| {
            self.entity(id).map(|e| Mention {
                start: e.start,
                end: e.end,
                text: e.surface.clone(),
            })
        };
        self.relations
            .iter()
            .filter_map(|r| {
                Some(RelationAnnotation {
                    arg1: mention(&r.arg1)?,
                    arg2: mention(&r.arg2)?,
                    label: r.label.clone(),
                })
            })
            .collect()
    }
}

pub fn save_standoff(doc: &StandoffDocument, text_path: &Path, ann_path: &Path) -> Result<()> {
    let ann = doc.annotation_text()?;
    std::fs::write(text_path, &doc.text)?;
    std::fs::write(ann_path, ann)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const TEXT: &str = "6. Colchicine 0.6 mg Tablet";

    #[test]
    fn entity_and_relation_lines_parse() {
        let ann = "T1\tDrug 3 13\tColchicine\nT2\tStrength 14 20\t0.6 mg\nR1\tStrength-Drug Arg1:T2 Arg2:T1\n";
        let doc = parse_standoff("d", TEXT, ann).unwrap();
        assert_eq!(doc.concepts()[0].label, "Drug");
        let rels = doc.relation_annotations();
        assert_eq!(rels.len(), 1);
        assert_eq!(rels[0].arg1.text, "0.6 mg");
        assert_eq!(doc.annotation_text().unwrap(), ann);
    }

    #[test]
    fn multi_word_labels_are_kept_whole() {
        let doc = parse_standoff("d", "Lives alone", "T1\tLiving status 0 5\tLives\n").unwrap();
        assert_eq!(doc.entities[0].label, "Living status");
    }

    #[test]
    fn dangling_reference_names_the_line() {
        let ann = "T1\tDrug 3 13\tColchicine\nR1\tStrength-Drug Arg1:T9 Arg2:T1\n";
        let err = parse_standoff("d", TEXT, ann).unwrap_err();
        assert!(matches!(err, Error::Dangling { line: 2, ref reference } if reference == "T9"));
    }

    #[test]
    fn surface_mismatch_and_garbage_are_rejected() {
        let err = parse_standoff("d", TEXT, "T1\tDrug 2 12\tColchicine\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
        let err = parse_standoff("d", TEXT, "\nX1 what\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
    }
}
