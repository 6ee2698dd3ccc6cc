use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde_json::json;
use tdst::checkpoint::save_checkpoint;
use tdst::train::{train, EpochMetrics, TrainObserver};

use crate::cli::TrainArgs;
use crate::config::RunConfig;
use crate::data_dir::{prepare_out_dir, split_file, DataDir, SCHEMA_FILE, VOCAB_FILE};
use crate::error::{CliError, CliResult};
use crate::manifest::RunManifest;

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const TIMINGS_FILE: &str = "timings.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Writes one metric line and one timing line per epoch, and a short
/// summary to the terminal.
struct EpochLog<'a> {
    metrics: BufWriter<File>,
    timings: BufWriter<File>,
    out: &'a mut dyn Write,
    error: Option<std::io::Error>,
}

impl EpochLog<'_> {
    fn record(&mut self, m: &EpochMetrics, seconds: f64) -> std::io::Result<()> {
        serde_json::to_writer(&mut self.metrics, m)?;
        self.metrics.write_all(b"\n")?;
        self.metrics.flush()?;
        serde_json::to_writer(&mut self.timings, &json!({"epoch": m.epoch, "wall_time": seconds}))?;
        self.timings.write_all(b"\n")?;
        self.timings.flush()?;
        writeln!(
            self.out,
            "epoch {:>4}  loss {:.4}  train jga {:.4}  dev jga {:.4}  {:.1}s",
            m.epoch, m.train_loss, m.train_jga, m.dev_jga, seconds
        )
    }
}

impl TrainObserver for EpochLog<'_> {
    fn epoch_end(&mut self, m: &EpochMetrics, seconds: f64) {
        if self.error.is_none() {
            if let Err(e) = self.record(m, seconds) {
                self.error = Some(e);
            }
        }
    }
}

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::data(format!("cannot create {}: {e}", path.display())))
}

pub fn run(args: &TrainArgs, out: &mut dyn Write) -> CliResult<()> {
    let config = RunConfig::load(&args.config)?;
    let data = DataDir::open(&args.data)?;
    let train_set = data.split("train")?;
    let dev_set = data.split("dev")?;
    if train_set.is_empty() {
        return Err(CliError::data(format!("{} has no dialogues", data.path(&split_file("train")).display())));
    }
    prepare_out_dir(&args.out, args.force)?;

    let mut manifest = RunManifest::new("train");
    manifest.seed = Some(config.train.seed);
    manifest.config = config.entries.clone();
    for name in [SCHEMA_FILE, VOCAB_FILE] {
        manifest.input(name, &data.path(name))?;
    }
    for split in ["train", "dev"] {
        let name = split_file(split);
        manifest.input(&name, &data.path(&name))?;
    }
    manifest.outputs = vec![CHECKPOINT_FILE.into(), METRICS_FILE.into(), TIMINGS_FILE.into()];

    let mut log = EpochLog {
        metrics: create(&args.out.join(METRICS_FILE))?,
        timings: create(&args.out.join(TIMINGS_FILE))?,
        out: &mut *out,
        error: None,
    };
    let outcome = train::<f32>(
        &config.train,
        data.vocab.clone(),
        data.schema.clone(),
        &train_set,
        &dev_set,
        &mut log,
    )?;
    if let Some(e) = log.error {
        return Err(CliError::data(format!("cannot write metric log: {e}")));
    }
    save_checkpoint(&args.out.join(CHECKPOINT_FILE), &outcome.best, &manifest.to_json())?;
    manifest.write(&args.out.join(MANIFEST_FILE))?;

    let best = &outcome.metrics[outcome.best_epoch - 1];
    writeln!(
        out,
        "best epoch {} (dev jga {:.4}, train jga {:.4}) after {} steps; checkpoint {}",
        outcome.best_epoch,
        best.dev_jga,
        best.train_jga,
        outcome.steps,
        args.out.join(CHECKPOINT_FILE).display()
    )?;
    Ok(())
}
