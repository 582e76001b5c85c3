//! Soft-prompt tuning of a small frozen GPT on clinical text-to-text tasks.
//!
//! The crate holds the numeric core (a reverse-mode tape over `f64`
//! tensors, the decoder-only model and the prompt tuner) together with the
//! tokenizer, the task codec, the scorer and corpus I/O.
//!
//! ```
//! use softprompt::{Codec, TaskKind, SyntheticSpec, generate_synthetic};
//!
//! let codec = Codec::default();
//! let data = generate_synthetic(&codec, &SyntheticSpec::new(TaskKind::Nli, 3, 1)).unwrap();
//! let parsed = codec
//!     .parse_output(TaskKind::Nli, &data[0].target_text, &data[0].source, &[])
//!     .unwrap();
//! assert_eq!(parsed.predictions, data[0].gold);
//! ```

pub mod autograd;
pub mod codec;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod lstm;
pub mod model;
pub mod optim;
pub mod prompt;
pub mod tensor;
pub mod tokenizer;

pub use autograd::{Gradients, Tape, Var};
pub use codec::{
    build_input, strip_markers, Annotations, Codec, ConceptAnnotation, Dimension, LabelAnnotation,
    Lexicon, Mention, NormalizationAnnotation, ParsedOutput, RelationAnnotation, Slot, Source,
    Status, TaskInstance, TaskKind,
};
pub use corpus::{
    generate_mixture, generate_synthetic, read_instances, write_instances, Checkpoint,
    StandoffDocument, SyntheticSpec,
};
pub use error::{Error, Result};
pub use eval::{evaluate, Counts, EvalReport, MatchMode};
pub use model::{ModelConfig, ModelWeights, PretrainConfig};
pub use optim::{Adam, AdamConfig};
pub use prompt::{InitMode, SoftPrompt, TuningConfig};
pub use tensor::Tensor;
pub use tokenizer::{Tokenizer, TokenizerMode};
