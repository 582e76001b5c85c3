//! Fixtures shared by the benchmarks under `benches/`.

use softprompt::codec::{Codec, TaskInstance, TaskKind};
use softprompt::corpus::{generate_synthetic, SyntheticSpec};
use softprompt::model::{ModelConfig, ModelWeights};
use softprompt::prompt::TokenizedSample;
use softprompt::tokenizer::{Tokenizer, TokenizerMode, EOS};

/// The model size the end-to-end check runs at.
pub fn desk_model() -> ModelWeights {
    let cfg = ModelConfig {
        vocab_size: 512,
        d_model: 64,
        n_layers: 2,
        n_heads: 2,
        d_ff: 256,
        max_seq_len: 128,
        tied_head: true,
    };
    ModelWeights::init(&cfg, 1).expect("valid config")
}

pub fn instances(task: TaskKind, count: usize) -> Vec<TaskInstance> {
    generate_synthetic(&Codec::default(), &SyntheticSpec::new(task, count, 3)).expect("synthetic data")
}

pub fn corpus_text(items: &[TaskInstance]) -> String {
    items
        .iter()
        .map(|i| format!("{}\n{}", i.input_text, i.target_text))
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn tokenizer(items: &[TaskInstance]) -> Tokenizer {
    Tokenizer::train(&corpus_text(items), 512, TokenizerMode::ByteLevelBpe).expect("tokenizer")
}

pub fn samples(tok: &Tokenizer, items: &[TaskInstance]) -> Vec<TokenizedSample> {
    items
        .iter()
        .map(|i| {
            let mut target = tok.encode(&i.target_text);
            target.push(EOS);
            TokenizedSample {
                id: i.id.clone(),
                input: tok.encode(&i.input_text),
                target,
            }
        })
        .collect()
}
