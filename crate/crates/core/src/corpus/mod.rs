//! Reading and writing corpora: standoff annotations, instance files,
//! synthetic generation and checkpoints.

pub mod checkpoint;
pub mod instances;
pub mod standoff;
pub mod synth;

pub use checkpoint::*;
pub use instances::{instances_from_jsonl, instances_to_jsonl, read_instances, write_instances};
pub use standoff::{load_standoff, parse_standoff, save_standoff, Entity, Relation, StandoffDocument};
pub use synth::{generate_mixture, generate_synthetic, SyntheticSpec};
