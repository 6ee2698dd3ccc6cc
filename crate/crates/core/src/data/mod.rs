//! Tokenization, schemas, dataset files, and the synthetic corpus generator.

pub mod dataset;
pub mod schema;
pub mod synthetic;
pub mod text;
pub mod vocab;

pub use dataset::{load_dataset, save_dataset, DialogueRecord, DialogueTurn};
pub use schema::{Schema, SlotKey};
pub use synthetic::generate_synthetic_corpus;
pub use vocab::{Vocab, SPECIAL};
