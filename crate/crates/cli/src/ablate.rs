use std::io::Write;

use tdst::ablation::ablate_reuse;
use tdst::model::ReuseSpec;
use tdst::train::TrainObserver;

use crate::cli::AblateArgs;
use crate::config::RunConfig;
use crate::data_dir::{prepare_out_dir, split_file, write_file, DataDir, SCHEMA_FILE, VOCAB_FILE};
use crate::error::{CliError, CliResult};
use crate::manifest::RunManifest;

pub const TABLE_FILE: &str = "ablation.json";

/// `all`, or a comma-separated list of `+`-joined selector keys.
pub fn parse_specs(text: &str) -> CliResult<Vec<ReuseSpec>> {
    if text.trim() == "all" {
        return Ok(ReuseSpec::presets());
    }
    let presets = ReuseSpec::presets();
    let mut specs = Vec::new();
    for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let spec: ReuseSpec = part
            .parse()
            .map_err(|e| CliError::usage(format!("--specs: {e}")))?;
        if !presets.contains(&spec) {
            let names: Vec<String> = presets.iter().map(|p| p.to_string()).collect();
            return Err(CliError::usage(format!(
                "--specs: {part:?} is not one of the presets: {}",
                names.join(", ")
            )));
        }
        specs.push(spec);
    }
    if specs.is_empty() {
        return Err(CliError::usage("--specs is empty"));
    }
    Ok(specs)
}

struct Quiet;

impl TrainObserver for Quiet {}

pub fn run(args: &AblateArgs, out: &mut dyn Write) -> CliResult<()> {
    let specs = parse_specs(&args.specs)?;
    let config = RunConfig::load(&args.config)?;
    let data = DataDir::open(&args.data)?;
    let (train_set, dev_set, test_set) = (data.split("train")?, data.split("dev")?, data.split("test")?);
    if train_set.is_empty() || test_set.is_empty() {
        return Err(CliError::data("ablation needs non-empty train and test splits"));
    }
    if let Some(dir) = &args.out {
        prepare_out_dir(dir, args.force)?;
    }

    let mut progress = |spec: &ReuseSpec| -> Box<dyn TrainObserver> {
        let _ = writeln!(out, "training with reuse {spec} ({})", spec.label());
        Box::new(Quiet)
    };
    let table = ablate_reuse(
        &config.train,
        &specs,
        &data.vocab,
        &data.schema,
        &train_set,
        &dev_set,
        &test_set,
        &mut progress,
    )?;
    writeln!(out, "{table}")?;

    let full = table.row(&"full".parse().expect("preset"));
    let best = table.row(&ReuseSpec::best());
    if let (Some(f), Some(b)) = (full, best) {
        let seen = if f.joint_goal_accuracy < b.joint_goal_accuracy { "observed" } else { "not observed" };
        writeln!(
            out,
            "expected trend {} < {}: {seen} ({:.4} vs {:.4})",
            f.label, b.label, f.joint_goal_accuracy, b.joint_goal_accuracy
        )?;
    }

    if let Some(dir) = &args.out {
        let mut manifest = RunManifest::new("ablate");
        manifest.seed = Some(config.train.seed);
        manifest.config = config.entries.clone();
        manifest.setting("specs", specs.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(","));
        for name in [SCHEMA_FILE.to_string(), VOCAB_FILE.to_string(), split_file("train"), split_file("dev"), split_file("test")] {
            manifest.input(&name, &data.path(&name))?;
        }
        manifest.outputs.push(TABLE_FILE.into());
        let doc = serde_json::json!({"manifest": manifest, "table": table});
        write_file(&dir.join(TABLE_FILE), serde_json::to_string_pretty(&doc).expect("serializes") + "\n")?;
        manifest.write(&dir.join("manifest.json"))?;
    }
    Ok(())
}
