mod common;

use common::examples::{check_formulation, check_hallucination, formulation_examples, hallucination_examples};
use softprompt::codec::{Codec, TaskKind};

#[test]
fn formulation_examples_serialize_and_parse() {
    let codec = Codec::default();
    let examples = formulation_examples(&codec);
    assert_eq!(examples.len(), TaskKind::ALL.len());
    for ex in &examples {
        if let Err(msg) = check_formulation(&codec, ex) {
            panic!("{msg}");
        }
    }
}

#[test]
fn observed_generations_classify_as_labelled() {
    let codec = Codec::default();
    for (i, ex) in hallucination_examples().iter().enumerate() {
        if let Err(msg) = check_hallucination(&codec, ex) {
            panic!("row {}: {msg}", i + 1);
        }
    }
}
