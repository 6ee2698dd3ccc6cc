//! Layout of a data directory as written by `gen`.

use std::fs;
use std::path::{Path, PathBuf};

use tdst::data::{load_dataset, DialogueRecord, Schema, Vocab};

use crate::error::{CliError, CliResult};

pub const SCHEMA_FILE: &str = "schema.json";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const SPLITS: [&str; 3] = ["train", "dev", "test"];

pub fn split_file(split: &str) -> String {
    format!("{split}.jsonl")
}

pub struct DataDir {
    pub root: PathBuf,
    pub schema: Schema,
    pub vocab: Vocab,
}

impl DataDir {
    pub fn open(root: &Path) -> CliResult<Self> {
        if !root.is_dir() {
            return Err(CliError::data(format!("data directory {} does not exist", root.display())));
        }
        let schema = Schema::load(&root.join(SCHEMA_FILE))?;
        let vocab = Vocab::load(&root.join(VOCAB_FILE))?;
        Ok(DataDir {
            root: root.to_path_buf(),
            schema,
            vocab,
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn split(&self, split: &str) -> CliResult<Vec<DialogueRecord>> {
        Ok(load_dataset(&self.path(&split_file(split)), &self.schema)?)
    }
}

/// Creates `dir`, refusing to reuse a non-empty one unless `force` is set.
pub fn prepare_out_dir(dir: &Path, force: bool) -> CliResult<()> {
    if dir.exists() {
        if !dir.is_dir() {
            return Err(CliError::usage(format!("{} exists and is not a directory", dir.display())));
        }
        let non_empty = fs::read_dir(dir)?.next().is_some();
        if non_empty && !force {
            return Err(CliError::usage(format!(
                "output directory {} is not empty; pass --force to overwrite",
                dir.display()
            )));
        }
    }
    fs::create_dir_all(dir).map_err(|e| CliError::data(format!("cannot create {}: {e}", dir.display())))
}

pub fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> CliResult<()> {
    fs::write(path, contents).map_err(|e| CliError::data(format!("cannot write {}: {e}", path.display())))
}
