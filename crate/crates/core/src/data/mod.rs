//! Synthetic referring-expression scenes and their on-disk format.

mod export;
mod synth;
mod vocab;

pub use export::{load_dataset, read_pnm, save_dataset, write_pgm, write_ppm, ExpressionRecord};
pub use synth::{
    describe, gen_dataset, gen_sample, referents, sample_seed, validate_spec, Color, Expression,
    PlacedObject, Relation, SampleRecord, Shape,
};
pub use vocab::{TokenSeq, Word, GLOBAL_TOKEN, PAD_TOKEN, VOCAB_SIZE};
