//! Dialogue states, state operations, and the bookkeeping between them.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::data::text::normalize;
use crate::error::{Error, Result};

pub const NULL_TOKEN: &str = "null";
pub const DONTCARE_TOKEN: &str = "dontcare";

/// Value of one (domain, slot) pair.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
pub enum SlotValue {
    #[default]
    Null,
    DontCare,
    Value(String),
}

impl SlotValue {
    /// Parses a value as written in dataset files: `null`/`none`/empty map to
    /// NULL, `dontcare` to DONTCARE, anything else is normalized text.
    pub fn parse(text: &str) -> SlotValue {
        let norm = normalize(text);
        match norm.as_str() {
            "" | NULL_TOKEN | "none" => SlotValue::Null,
            DONTCARE_TOKEN => SlotValue::DontCare,
            _ => SlotValue::Value(norm),
        }
    }

    pub fn value(text: &str) -> SlotValue {
        SlotValue::Value(normalize(text))
    }

    pub fn is_null(&self) -> bool {
        matches!(self, SlotValue::Null)
    }
}

impl fmt::Display for SlotValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SlotValue::Null => f.write_str(NULL_TOKEN),
            SlotValue::DontCare => f.write_str(DONTCARE_TOKEN),
            SlotValue::Value(v) => f.write_str(v),
        }
    }
}

/// The four state operations, in classifier index order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum StateOperation {
    Carryover = 0,
    Delete = 1,
    DontCare = 2,
    Update = 3,
}

impl StateOperation {
    pub const ALL: [StateOperation; 4] = [
        StateOperation::Carryover,
        StateOperation::Delete,
        StateOperation::DontCare,
        StateOperation::Update,
    ];
    pub const COUNT: usize = 4;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<StateOperation> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            StateOperation::Carryover => "CARRYOVER",
            StateOperation::Delete => "DELETE",
            StateOperation::DontCare => "DONTCARE",
            StateOperation::Update => "UPDATE",
        }
    }
}

impl fmt::Display for StateOperation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Values of all J (domain, slot) pairs, indexed in schema order.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DialogueState {
    values: Vec<SlotValue>,
}

impl DialogueState {
    /// All-NULL state over `num_slots` pairs.
    pub fn empty(num_slots: usize) -> Self {
        DialogueState {
            values: vec![SlotValue::Null; num_slots],
        }
    }

    pub fn from_values(values: Vec<SlotValue>) -> Self {
        DialogueState { values }
    }

    pub fn num_slots(&self) -> usize {
        self.values.len()
    }

    pub fn get(&self, j: usize) -> &SlotValue {
        &self.values[j]
    }

    pub fn set(&mut self, j: usize, v: SlotValue) {
        self.values[j] = v;
    }

    pub fn values(&self) -> &[SlotValue] {
        &self.values
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &SlotValue)> {
        self.values.iter().enumerate()
    }
}

/// Applies one operation per slot to `prev`, returning the new state.
/// `values` must hold a value for every UPDATE slot and nothing else.
pub fn apply_operations(
    prev: &DialogueState,
    ops: &[StateOperation],
    values: &BTreeMap<usize, String>,
) -> Result<DialogueState> {
    if ops.len() != prev.num_slots() {
        return Err(Error::Contract(format!(
            "{} operations for {} slots",
            ops.len(),
            prev.num_slots()
        )));
    }
    if let Some(&j) = values
        .keys()
        .find(|&&j| ops.get(j) != Some(&StateOperation::Update))
    {
        return Err(Error::Contract(format!("value given for non-UPDATE slot {j}")));
    }
    let mut next = prev.clone();
    for (j, op) in ops.iter().enumerate() {
        match op {
            StateOperation::Carryover => {}
            StateOperation::Delete => next.set(j, SlotValue::Null),
            StateOperation::DontCare => next.set(j, SlotValue::DontCare),
            StateOperation::Update => {
                let v = values
                    .get(&j)
                    .ok_or_else(|| Error::Contract(format!("missing value for UPDATE slot {j}")))?;
                next.set(j, SlotValue::value(v));
            }
        }
    }
    Ok(next)
}

/// Training labels that turn `prev` into `gold`.
///
/// Equal values give CARRYOVER (including NULL→NULL and DONTCARE→DONTCARE);
/// a NULL target gives DELETE, a DONTCARE target gives DONTCARE, and anything
/// else is an UPDATE whose target is the gold value.
pub fn derive_gold_operations(
    prev: &DialogueState,
    gold: &DialogueState,
) -> Result<(Vec<StateOperation>, BTreeMap<usize, String>)> {
    if prev.num_slots() != gold.num_slots() {
        return Err(Error::Contract(format!(
            "state sizes differ: {} vs {}",
            prev.num_slots(),
            gold.num_slots()
        )));
    }
    let mut ops = Vec::with_capacity(gold.num_slots());
    let mut targets = BTreeMap::new();
    for (j, (p, g)) in prev.values.iter().zip(&gold.values).enumerate() {
        let op = match g {
            _ if p == g => StateOperation::Carryover,
            SlotValue::Null => StateOperation::Delete,
            SlotValue::DontCare => StateOperation::DontCare,
            SlotValue::Value(v) => {
                targets.insert(j, v.clone());
                StateOperation::Update
            }
        };
        ops.push(op);
    }
    Ok((ops, targets))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use StateOperation::*;

    fn st(vals: &[&str]) -> DialogueState {
        DialogueState::from_values(vals.iter().map(|v| SlotValue::parse(v)).collect())
    }

    #[test]
    fn all_carryover_is_identity() {
        let prev = st(&["cheap", "dontcare", "null"]);
        let next = apply_operations(&prev, &[Carryover; 3], &BTreeMap::new()).unwrap();
        assert_eq!(next, prev);
    }

    #[test]
    fn delete_on_null_stays_null() {
        let prev = st(&["null"]);
        let next = apply_operations(&prev, &[Delete], &BTreeMap::new()).unwrap();
        assert_eq!(next.get(0), &SlotValue::Null);
    }

    #[test]
    fn mixed_operations() {
        let prev = st(&["expensive", "north", "7 pm"]);
        let values = BTreeMap::from([(0, "cheap".to_string())]);
        let next = apply_operations(&prev, &[Update, DontCare, Carryover], &values).unwrap();
        assert_eq!(next, st(&["cheap", "dontcare", "7 pm"]));
        assert_eq!(prev, st(&["expensive", "north", "7 pm"]));
    }

    #[test]
    fn missing_and_extraneous_values_rejected() {
        let prev = st(&["null", "null"]);
        assert!(apply_operations(&prev, &[Update, Carryover], &BTreeMap::new()).is_err());
        let extra = BTreeMap::from([(1, "x".to_string())]);
        assert!(apply_operations(&prev, &[Carryover, Carryover], &extra).is_err());
    }

    #[test]
    fn derive_identity_is_all_carryover() {
        let s = st(&["a", "null", "dontcare"]);
        let (ops, targets) = derive_gold_operations(&s, &s).unwrap();
        assert_eq!(ops, vec![Carryover; 3]);
        assert!(targets.is_empty());
    }

    #[test]
    fn derive_definition_cases() {
        let prev = st(&["null", "north", "cheap", "dontcare"]);
        let gold = st(&["7 pm", "null", "dontcare", "dontcare"]);
        let (ops, targets) = derive_gold_operations(&prev, &gold).unwrap();
        assert_eq!(ops, vec![Update, Delete, DontCare, Carryover]);
        assert_eq!(targets, BTreeMap::from([(0, "7 pm".to_string())]));
    }

    #[test]
    fn parse_recognizes_reserved_values() {
        assert_eq!(SlotValue::parse("None"), SlotValue::Null);
        assert_eq!(SlotValue::parse(" DontCare "), SlotValue::DontCare);
        assert_eq!(SlotValue::parse("7  PM"), SlotValue::Value("7 pm".into()));
    }

    fn slot_value() -> impl Strategy<Value = SlotValue> {
        prop_oneof![
            Just(SlotValue::Null),
            Just(SlotValue::DontCare),
            "[a-c]{1,2}( [a-c]{1,2})?".prop_map(|s| SlotValue::value(&s)),
        ]
    }

    proptest! {
        #[test]
        fn derived_operations_round_trip(
            pairs in proptest::collection::vec((slot_value(), slot_value()), 1..12)
        ) {
            let (p, g): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
            let prev = DialogueState::from_values(p);
            let gold = DialogueState::from_values(g);
            let (ops, targets) = derive_gold_operations(&prev, &gold).unwrap();
            prop_assert_eq!(apply_operations(&prev, &ops, &targets).unwrap(), gold);
        }
    }
}
