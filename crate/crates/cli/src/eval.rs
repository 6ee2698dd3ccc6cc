use std::io::Write;

use serde_json::json;
use tdst::checkpoint::load_checkpoint;
use tdst::data::load_dataset;
use tdst::eval::{evaluate, PrevStateMode};

use crate::cli::EvalArgs;
use crate::data_dir::write_file;
use crate::error::{CliError, CliResult};
use crate::manifest::sha256_file;

pub fn run(args: &EvalArgs, out: &mut dyn Write) -> CliResult<()> {
    let mode: PrevStateMode = args
        .mode
        .parse()
        .map_err(|_| CliError::usage(format!("--mode must be gold or predicted, got {:?}", args.mode)))?;
    if args.workers == 0 {
        return Err(CliError::usage("--workers must be at least 1"));
    }
    let ck = load_checkpoint::<f32>(&args.ckpt)?;
    let records = load_dataset(&args.data, ck.model.schema())?;
    if records.is_empty() {
        return Err(CliError::data(format!("{} has no dialogues", args.data.display())));
    }
    let report = evaluate(&ck.model, &records, mode, args.workers)?;

    let report_path = match &args.report {
        Some(p) => p.clone(),
        None => args
            .ckpt
            .parent()
            .unwrap_or_else(|| std::path::Path::new("."))
            .join(format!("eval-{mode}.json")),
    };
    let file_name = |p: &std::path::Path| {
        p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
    };
    let doc = json!({
        "command": "eval",
        "version": env!("CARGO_PKG_VERSION"),
        "checkpoint": {
            "file": file_name(&args.ckpt),
            "sha256": sha256_file(&args.ckpt)?,
            "manifest": ck.manifest,
        },
        "data": {"file": file_name(&args.data), "sha256": sha256_file(&args.data)?},
        "workers": args.workers,
        "report": report,
    });
    let mut text = serde_json::to_string_pretty(&doc).expect("report serializes");
    text.push('\n');
    write_file(&report_path, text)?;
    writeln!(out, "{report}")?;
    writeln!(out, "report written to {}", report_path.display())?;
    Ok(())
}
