use std::io::Write;

use tdst::data::dataset::format_dataset;
use tdst::data::{generate_synthetic_corpus, DialogueRecord, Schema, Vocab};

use crate::cli::GenArgs;
use crate::data_dir::{prepare_out_dir, split_file, write_file, SCHEMA_FILE, SPLITS, VOCAB_FILE};
use crate::error::{CliError, CliResult};
use crate::manifest::{sha256_hex, RunManifest};

/// Sizes of the 8:1:1 train/dev/test split of `n` dialogues.
pub fn split_sizes(n: usize) -> [usize; 3] {
    let held = n / 10;
    [n - 2 * held, held, held]
}

pub fn run(args: &GenArgs, out: &mut dyn Write) -> CliResult<()> {
    if args.n == 0 {
        return Err(CliError::usage("empty corpus: --n must be at least 1"));
    }
    if args.max_turns == 0 {
        return Err(CliError::usage("--max-turns must be at least 1"));
    }
    let schema = match &args.schema {
        Some(p) => Schema::load(p)?,
        None => Schema::default_synthetic(),
    };
    let corpus = generate_synthetic_corpus(&schema, args.n, args.max_turns, args.seed)?;
    prepare_out_dir(&args.out, args.force)?;

    let mut manifest = RunManifest::new("gen");
    manifest.seed = Some(args.seed);
    manifest
        .setting("n", args.n)
        .setting("max_turns", args.max_turns)
        .setting("schema", if args.schema.is_some() { "file" } else { "builtin" });
    if let Some(p) = &args.schema {
        manifest.input("schema", p)?;
    }

    let vocab = Vocab::build(&schema, &corpus);
    let mut files: Vec<(String, String)> = vec![
        (SCHEMA_FILE.to_string(), schema.to_json()),
        (VOCAB_FILE.to_string(), vocab.tokens().join("\n") + "\n"),
    ];
    let sizes = split_sizes(args.n);
    let mut rest: &[DialogueRecord] = &corpus;
    for (split, size) in SPLITS.iter().zip(sizes) {
        let (part, tail) = rest.split_at(size);
        rest = tail;
        files.push((split_file(split), format_dataset(part, &schema)));
    }
    for (name, text) in &files {
        write_file(&args.out.join(name), text)?;
        manifest.outputs.push(name.clone());
        manifest.settings.insert(format!("sha256:{name}"), sha256_hex(text.as_bytes()));
    }
    manifest.write(&args.out.join("manifest.json"))?;
    writeln!(
        out,
        "wrote {} dialogues ({} train / {} dev / {} test), {} slots, vocabulary {} to {}",
        args.n,
        sizes[0],
        sizes[1],
        sizes[2],
        schema.len(),
        vocab.len(),
        args.out.display()
    )?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eight_one_one() {
        assert_eq!(split_sizes(10), [8, 1, 1]);
        assert_eq!(split_sizes(50), [40, 5, 5]);
        assert_eq!(split_sizes(3), [3, 0, 0]);
        for n in 1..200 {
            assert_eq!(split_sizes(n).iter().sum::<usize>(), n);
        }
    }
}
