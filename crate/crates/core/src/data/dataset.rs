//! Line-delimited dataset files: one JSON object per dialogue.
//!
//! ```text
//! {"dialogue_id":"syn-00001","turns":[{"system":"","user":"...","state":["hotel|area|north"]}]}
//! ```
//!
//! `state` lists the non-NULL pairs of the gold state after the turn as
//! `domain|slot|value`; `dontcare` is written literally.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::schema::Schema;
use crate::error::{Error, Result};
use crate::state::{DialogueState, SlotValue};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DialogueTurn {
    /// Empty on the first turn.
    pub system_utterance: String,
    pub user_utterance: String,
    /// 1-based.
    pub turn_index: usize,
}

impl DialogueTurn {
    pub fn new(system: &str, user: &str, turn_index: usize) -> Self {
        DialogueTurn {
            system_utterance: system.to_string(),
            user_utterance: user.to_string(),
            turn_index,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DialogueRecord {
    pub dialogue_id: String,
    pub turns: Vec<(DialogueTurn, DialogueState)>,
}

#[derive(Serialize, Deserialize)]
struct TurnLine {
    system: String,
    user: String,
    #[serde(default)]
    state: Option<Vec<String>>,
}

#[derive(Serialize, Deserialize)]
struct DialogueLine {
    dialogue_id: String,
    turns: Vec<TurnLine>,
}

pub fn format_record(record: &DialogueRecord, schema: &Schema) -> String {
    let line = DialogueLine {
        dialogue_id: record.dialogue_id.clone(),
        turns: record
            .turns
            .iter()
            .map(|(turn, state)| TurnLine {
                system: turn.system_utterance.clone(),
                user: turn.user_utterance.clone(),
                state: Some(
                    state
                        .iter()
                        .filter(|(_, v)| !v.is_null())
                        .map(|(j, v)| {
                            let k = schema.pair(j);
                            format!("{}|{}|{}", k.domain, k.slot, v)
                        })
                        .collect(),
                ),
            })
            .collect(),
    };
    serde_json::to_string(&line).expect("dataset line serializes")
}

/// Parses one dataset line. `line_no` is 1-based and only used in errors.
pub fn parse_record(text: &str, line_no: usize, schema: &Schema) -> Result<DialogueRecord> {
    let err = |id: &str, message: String| Error::Parse {
        line: line_no,
        dialogue_id: id.to_string(),
        message,
    };
    let value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| err("?", e.to_string()))?;
    let id = value
        .get("dialogue_id")
        .and_then(|v| v.as_str())
        .unwrap_or("?")
        .to_string();
    let line: DialogueLine = serde_json::from_value(value).map_err(|e| err(&id, e.to_string()))?;

    let mut turns = Vec::with_capacity(line.turns.len());
    for (t, tl) in line.turns.into_iter().enumerate() {
        let turn_index = t + 1;
        let entries = tl
            .state
            .ok_or_else(|| err(&id, format!("turn {turn_index} has no gold state")))?;
        if tl.user.trim().is_empty() {
            return Err(err(&id, format!("turn {turn_index} has an empty user utterance")));
        }
        let mut state = DialogueState::empty(schema.len());
        let mut seen = vec![false; schema.len()];
        for entry in entries {
            let parts: Vec<&str> = entry.splitn(3, '|').collect();
            let [domain, slot, value] = parts[..] else {
                return Err(err(
                    &id,
                    format!("turn {turn_index}: entry {entry:?} is not domain|slot|value"),
                ));
            };
            let j = schema.index_of(domain, slot).ok_or_else(|| {
                err(&id, format!("turn {turn_index}: unknown pair {domain}|{slot}"))
            })?;
            if std::mem::replace(&mut seen[j], true) {
                return Err(err(&id, format!("turn {turn_index}: duplicate pair {domain}|{slot}")));
            }
            state.set(j, SlotValue::parse(value));
        }
        turns.push((DialogueTurn::new(&tl.system, &tl.user, turn_index), state));
    }
    Ok(DialogueRecord {
        dialogue_id: id,
        turns,
    })
}

pub fn load_dataset(path: &Path, schema: &Schema) -> Result<Vec<DialogueRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(&text, schema)
}

pub fn parse_dataset(text: &str, schema: &Schema) -> Result<Vec<DialogueRecord>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| parse_record(l, i + 1, schema))
        .collect()
}

pub fn format_dataset(records: &[DialogueRecord], schema: &Schema) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&format_record(r, schema));
        out.push('\n');
    }
    out
}

pub fn save_dataset(records: &[DialogueRecord], schema: &Schema, path: &Path) -> Result<()> {
    fs::write(path, format_dataset(records, schema)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::schema::SlotKey;

    fn schema() -> Schema {
        Schema::from_pairs(vec![
            SlotKey::new("hotel", "area"),
            SlotKey::new("taxi", "leave at"),
        ])
        .unwrap()
    }

    #[test]
    fn empty_text_is_empty_dataset() {
        assert!(parse_dataset("", &schema()).unwrap().is_empty());
        assert!(parse_dataset("\n\n", &schema()).unwrap().is_empty());
    }

    #[test]
    fn missing_state_names_turn() {
        let text = r#"{"dialogue_id":"d1","turns":[{"system":"","user":"hi","state":[]},{"system":"ok","user":"bye"}]}"#;
        let err = parse_dataset(text, &schema()).unwrap_err();
        match err {
            Error::Parse { line, dialogue_id, message } => {
                assert_eq!(line, 1);
                assert_eq!(dialogue_id, "d1");
                assert!(message.contains("turn 2"), "{message}");
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let good = r#"{"dialogue_id":"d1","turns":[{"system":"","user":"hi","state":[]}]}"#;
        let text = format!("{good}\n{{\"dialogue_id\":\"d2\",\"turns\":[{{\"system\":1}}]}}\n");
        match parse_dataset(&text, &schema()).unwrap_err() {
            Error::Parse { line, dialogue_id, .. } => {
                assert_eq!(line, 2);
                assert_eq!(dialogue_id, "d2");
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn unknown_pair_rejected() {
        let text = r#"{"dialogue_id":"d1","turns":[{"system":"","user":"hi","state":["hotel|stars|4"]}]}"#;
        assert!(parse_dataset(text, &schema()).is_err());
    }

    #[test]
    fn round_trip_fills_nulls() {
        let text = r#"{"dialogue_id":"d1","turns":[{"system":"","user":"a cab at 7 pm","state":["taxi|leave at|7 pm"]},{"system":"sure","user":"any area","state":["hotel|area|dontcare","taxi|leave at|7 pm"]}]}"#;
        let records = parse_dataset(text, &schema()).unwrap();
        let (t1, s1) = &records[0].turns[0];
        assert_eq!(t1.turn_index, 1);
        assert_eq!(s1.get(0), &SlotValue::Null);
        assert_eq!(s1.get(1), &SlotValue::Value("7 pm".into()));
        assert_eq!(records[0].turns[1].1.get(0), &SlotValue::DontCare);
        assert_eq!(format_dataset(&records, &schema()).trim_end(), text);
    }
}
