//! Trains the toy model on a small synthetic corpus and prints per-epoch metrics.
//!
//! cargo run --release -p tdst --example overfit -- [dialogues] [epochs]

use tdst::data::{generate_synthetic_corpus, Schema, Vocab};
use tdst::eval::{evaluate, PrevStateMode};
use tdst::train::{train, EpochMetrics, TrainConfig, TrainObserver};

struct Print;

impl TrainObserver for Print {
    fn epoch_end(&mut self, m: &EpochMetrics, secs: f64) {
        println!(
            "epoch {:>3}  loss {:.4}  train {:.3}  dev {:.3}  {:.1}s",
            m.epoch, m.train_loss, m.train_jga, m.dev_jga, secs
        );
    }
}

fn main() -> tdst::Result<()> {
    let args: Vec<usize> = std::env::args().skip(1).map(|a| a.parse().expect("integer")).collect();
    let n = args.first().copied().unwrap_or(50);
    let epochs = args.get(1).copied().unwrap_or(200);
    let schema = Schema::default_synthetic();
    let train_set = generate_synthetic_corpus(&schema, n, 8, 42)?;
    let test_set = generate_synthetic_corpus(&schema, 20, 8, 7)?;
    let vocab = Vocab::build(&schema, &[train_set.clone(), test_set.clone()].concat());
    let mut config = TrainConfig::desk(vocab.len());
    config.epochs = epochs;
    config.target_train_jga = Some(0.95);
    let turns: usize = train_set.iter().map(|d| d.turns.len()).sum();
    println!("{n} dialogues, {turns} turns, vocab {}", vocab.len());
    let out = train::<f32>(&config, vocab, schema, &train_set, &test_set, &mut Print)?;
    let report = evaluate(&out.best, &test_set, PrevStateMode::Predicted, 1)?;
    println!("{report}");
    Ok(())
}
