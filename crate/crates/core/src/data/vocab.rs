use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use crate::data::dataset::DialogueRecord;
use crate::data::schema::Schema;
use crate::data::text::words;
use crate::error::{Error, Result};
use crate::state::SlotValue;

pub const PAD: &str = "[PAD]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const SLOT: &str = "[SLOT]";
pub const BOS: &str = "[BOS]";
pub const EOS: &str = "[EOS]";
pub const UNK: &str = "[UNK]";
pub const DASH: &str = "-";
pub const NULL: &str = "null";
pub const DONTCARE: &str = "dontcare";
/// Separates the system and user halves of a serialized turn.
pub const TURN_SEP: &str = ";";

/// Reserved tokens, in id order starting at 0.
pub const RESERVED: [&str; 10] = [PAD, CLS, SEP, SLOT, BOS, EOS, UNK, DASH, NULL, DONTCARE];

/// Ids of the reserved tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Special {
    pub pad: usize,
    pub cls: usize,
    pub sep: usize,
    pub slot: usize,
    pub bos: usize,
    pub eos: usize,
    pub unk: usize,
    pub dash: usize,
    pub null: usize,
    pub dontcare: usize,
}

pub const SPECIAL: Special = Special {
    pad: 0,
    cls: 1,
    sep: 2,
    slot: 3,
    bos: 4,
    eos: 5,
    unk: 6,
    dash: 7,
    null: 8,
    dontcare: 9,
};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Vocab {
    /// Reserved tokens first, then `extra` in the given order (duplicates skipped).
    pub fn new<I, S>(extra: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut v = Vocab {
            tokens: Vec::new(),
            ids: HashMap::new(),
        };
        for t in RESERVED {
            v.push(t.to_string());
        }
        for t in extra {
            v.push(t.into());
        }
        v
    }

    fn push(&mut self, t: String) {
        if !self.ids.contains_key(&t) {
            self.ids.insert(t.clone(), self.tokens.len());
            self.tokens.push(t);
        }
    }

    /// Vocabulary covering every word of the schema and the corpus, sorted.
    pub fn build(schema: &Schema, records: &[DialogueRecord]) -> Self {
        let mut all = BTreeSet::new();
        all.insert(TURN_SEP.to_string());
        for key in schema.pairs() {
            all.extend(words(&key.domain));
            all.extend(words(&key.slot));
        }
        for r in records {
            for (turn, state) in &r.turns {
                all.extend(words(&turn.system_utterance));
                all.extend(words(&turn.user_utterance));
                for (_, v) in state.iter() {
                    if let SlotValue::Value(s) = v {
                        all.extend(words(s));
                    }
                }
            }
        }
        Vocab::new(all)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.ids.get(token).copied()
    }

    pub fn id_or_unk(&self, token: &str) -> usize {
        self.id(token).unwrap_or(SPECIAL.unk)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Lowercase, split on whitespace and punctuation, map OOV to `[UNK]`.
    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        words(text).iter().map(|w| self.id_or_unk(w)).collect()
    }

    /// Tokens joined by single spaces.
    pub fn detokenize(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&i| self.token(i).unwrap_or(UNK))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// One token per line; line number is the id.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.tokens.join("\n");
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Vocab::from_lines(text.lines())
    }

    /// Rebuilds a vocabulary from its token list, checking reserved ids.
    pub fn from_lines<'a>(lines: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        let tokens: Vec<String> = lines.into_iter().map(str::to_string).collect();
        for (id, &r) in RESERVED.iter().enumerate() {
            if tokens.get(id).map(String::as_str) != Some(r) {
                return Err(Error::Contract(format!(
                    "vocabulary line {} must be {r}",
                    id + 1
                )));
            }
        }
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if ids.insert(t.clone(), i).is_some() {
                return Err(Error::Contract(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Vocab { tokens, ids })
    }
}
