use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::text::normalize;
use crate::error::{Error, Result};

/// A trackable (domain, slot) pair.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SlotKey {
    pub domain: String,
    pub slot: String,
}

impl SlotKey {
    pub fn new(domain: &str, slot: &str) -> Self {
        SlotKey {
            domain: normalize(domain),
            slot: normalize(slot),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
struct SchemaEntry {
    domain: String,
    slot: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    values: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
struct SchemaFile {
    slots: Vec<SchemaEntry>,
}

/// Ordered (domain, slot) pairs plus per-slot candidate values. The values
/// feed only the synthetic generator; the model never sees them.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Schema {
    pairs: Vec<SlotKey>,
    lexicon: Vec<Vec<String>>,
}

impl Schema {
    pub fn new(pairs: Vec<SlotKey>, lexicon: Vec<Vec<String>>) -> Result<Self> {
        if pairs.len() != lexicon.len() {
            return Err(Error::Contract("one lexicon per slot required".into()));
        }
        let mut seen = HashSet::new();
        for p in &pairs {
            if p.domain.is_empty() || p.slot.is_empty() {
                return Err(Error::Contract("empty domain or slot name".into()));
            }
            if p.domain.contains('|') || p.slot.contains('|') {
                return Err(Error::Contract(format!("'|' in slot name {p:?}")));
            }
            if !seen.insert(p) {
                return Err(Error::Contract(format!(
                    "duplicate pair {}-{}",
                    p.domain, p.slot
                )));
            }
        }
        let lexicon = lexicon
            .into_iter()
            .map(|vs| vs.iter().map(|v| normalize(v)).collect())
            .collect();
        Ok(Schema { pairs, lexicon })
    }

    pub fn from_pairs(pairs: Vec<SlotKey>) -> Result<Self> {
        let n = pairs.len();
        Schema::new(pairs, vec![Vec::new(); n])
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn pairs(&self) -> &[SlotKey] {
        &self.pairs
    }

    pub fn pair(&self, j: usize) -> &SlotKey {
        &self.pairs[j]
    }

    pub fn lexicon(&self, j: usize) -> &[String] {
        &self.lexicon[j]
    }

    pub fn index_of(&self, domain: &str, slot: &str) -> Option<usize> {
        let key = SlotKey::new(domain, slot);
        self.pairs.iter().position(|p| *p == key)
    }

    /// Domains in first-appearance order.
    pub fn domains(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for p in &self.pairs {
            if !out.contains(&p.domain) {
                out.push(p.domain.clone());
            }
        }
        out
    }

    pub fn slots_of(&self, domain: &str) -> Vec<usize> {
        (0..self.pairs.len())
            .filter(|&j| self.pairs[j].domain == domain)
            .collect()
    }

    /// The first `n` pairs, keeping their lexicons.
    pub fn truncated(&self, n: usize) -> Schema {
        let n = n.min(self.len());
        Schema {
            pairs: self.pairs[..n].to_vec(),
            lexicon: self.lexicon[..n].to_vec(),
        }
    }

    pub fn to_json(&self) -> String {
        let file = SchemaFile {
            slots: self
                .pairs
                .iter()
                .zip(&self.lexicon)
                .map(|(p, vs)| SchemaEntry {
                    domain: p.domain.clone(),
                    slot: p.slot.clone(),
                    values: vs.clone(),
                })
                .collect(),
        };
        serde_json::to_string_pretty(&file).expect("schema serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: SchemaFile =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("schema: {e}")))?;
        let (pairs, lexicon) = file
            .slots
            .into_iter()
            .map(|e| (SlotKey::new(&e.domain, &e.slot), e.values))
            .unzip();
        Schema::new(pairs, lexicon)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json() + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Schema::from_json(&text)
    }

    /// 3 domains × 3 slots with a few dozen candidate values per slot.
    pub fn default_synthetic() -> Self {
        crate::data::synthetic::default_schema()
    }
}
