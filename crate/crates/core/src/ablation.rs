//! Reuse ablation: one model per reuse spec under an otherwise identical
//! configuration and seed.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::data::dataset::DialogueRecord;
use crate::data::schema::Schema;
use crate::data::vocab::Vocab;
use crate::error::{Error, Result};
use crate::eval::{evaluate, PrevStateMode};
use crate::model::ReuseSpec;
use crate::train::{train, TrainConfig, TrainObserver};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    /// Selector form, e.g. `curr+slot`.
    pub spec: String,
    /// Display form, e.g. `D_t+[SLOT]`.
    pub label: String,
    pub joint_goal_accuracy: f64,
    pub best_epoch: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, spec: &ReuseSpec) -> Option<&AblationRow> {
        let key = spec.to_string();
        self.rows.iter().find(|r| r.spec == key)
    }
}

impl fmt::Display for AblationTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<24} {:>10}", "re-used states", "joint acc")?;
        for r in &self.rows {
            writeln!(f, "{:<24} {:>10.4}", r.label, r.joint_goal_accuracy)?;
        }
        Ok(())
    }
}

/// Trains one model per spec and scores it on `test_set` with predicted
/// previous states.
pub fn ablate_reuse(
    base: &TrainConfig,
    specs: &[ReuseSpec],
    vocab: &Vocab,
    schema: &Schema,
    train_set: &[DialogueRecord],
    dev_set: &[DialogueRecord],
    test_set: &[DialogueRecord],
    observer: &mut dyn FnMut(&ReuseSpec) -> Box<dyn TrainObserver>,
) -> Result<AblationTable> {
    if specs.is_empty() {
        return Err(Error::Config("no reuse specs given".into()));
    }
    let mut rows = Vec::with_capacity(specs.len());
    for spec in specs {
        let mut config = base.clone();
        config.reuse = spec.clone();
        let mut obs = observer(spec);
        let out = train::<f32>(&config, vocab.clone(), schema.clone(), train_set, dev_set, obs.as_mut())?;
        let report = evaluate(&out.best, test_set, PrevStateMode::Predicted, 1)?;
        rows.push(AblationRow {
            spec: spec.to_string(),
            label: spec.label(),
            joint_goal_accuracy: report.joint_goal_accuracy,
            best_epoch: out.best_epoch,
        });
    }
    Ok(AblationTable { rows })
}
