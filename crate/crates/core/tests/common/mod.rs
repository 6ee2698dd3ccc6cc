#![allow(dead_code)]

use tdst::data::{generate_synthetic_corpus, DialogueRecord, Schema, Vocab};
use tdst::model::{DstModel, ReuseSpec, TrainingExample};
use tdst::{ModelConfig, Scalar};

pub struct Fixture {
    pub schema: Schema,
    pub vocab: Vocab,
    pub records: Vec<DialogueRecord>,
}

/// Small synthetic corpus over the first `slots` pairs of the default schema.
pub fn fixture(slots: usize, dialogues: usize, seed: u64) -> Fixture {
    let schema = Schema::default_synthetic().truncated(slots);
    let records = generate_synthetic_corpus(&schema, dialogues, 4, seed).unwrap();
    let vocab = Vocab::build(&schema, &records);
    Fixture { schema, vocab, records }
}

pub fn toy_model<F: Scalar>(fx: &Fixture, reuse: ReuseSpec, init_std: f64, seed: u64) -> DstModel<F> {
    let mut c = ModelConfig::toy(fx.vocab.len());
    c.init_std = init_std;
    DstModel::new(c, fx.vocab.clone(), fx.schema.clone(), reuse, 6, seed).unwrap()
}

/// First example with at least one gold UPDATE.
pub fn update_example<F: Scalar>(model: &DstModel<F>, fx: &Fixture) -> TrainingExample {
    model
        .build_examples(&fx.records)
        .unwrap()
        .into_iter()
        .find(|e| e.num_updates() > 0)
        .expect("corpus has an UPDATE turn")
}
