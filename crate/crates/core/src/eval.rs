//! Turn-level evaluation: joint goal accuracy, per-domain and per-slot
//! accuracy, operation accuracy, latency and decoder-call accounting.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::data::dataset::{DialogueRecord, DialogueTurn};
use crate::data::schema::Schema;
use crate::error::{Error, Result};
use crate::model::DstModel;
use crate::state::{derive_gold_operations, DialogueState, StateOperation};
use crate::tensor::Scalar;

/// Which previous state is fed to the model at each turn.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrevStateMode {
    /// The gold `S_{t-1}`.
    Gold,
    /// The model's own previous prediction; errors propagate.
    Predicted,
}

impl FromStr for PrevStateMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gold" => Ok(PrevStateMode::Gold),
            "predicted" => Ok(PrevStateMode::Predicted),
            other => Err(Error::Config(format!("mode must be gold or predicted, got {other:?}"))),
        }
    }
}

impl fmt::Display for PrevStateMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PrevStateMode::Gold => "gold",
            PrevStateMode::Predicted => "predicted",
        })
    }
}

/// Everything recorded about one evaluated turn.
#[derive(Clone, Debug, PartialEq)]
pub struct TurnOutcome {
    pub predicted: DialogueState,
    pub gold: DialogueState,
    pub predicted_ops: Vec<StateOperation>,
    /// Gold operations relative to the previous state that was fed in.
    pub gold_ops: Vec<StateOperation>,
    pub decoder_invocations: usize,
    pub truncated_values: usize,
    pub latency: Duration,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: PrevStateMode,
    pub dialogues: usize,
    pub turns: usize,
    pub joint_goal_accuracy: f64,
    pub per_domain_joint_accuracy: BTreeMap<String, f64>,
    pub slot_accuracy: f64,
    pub op_accuracy: f64,
    pub mean_latency_per_turn_ms: f64,
    /// Latency was measured while several workers ran concurrently.
    pub latency_sharded: bool,
    /// Turns by number of decoder calls.
    pub decoder_invocations_histogram: BTreeMap<usize, usize>,
    pub truncated_values: usize,
}

/// Fraction of turns whose full state equals gold.
pub fn joint_goal_accuracy(predicted: &[DialogueState], gold: &[DialogueState]) -> f64 {
    assert_eq!(predicted.len(), gold.len(), "prediction/gold count mismatch");
    if gold.is_empty() {
        return 0.0;
    }
    let hits = predicted.iter().zip(gold).filter(|(p, g)| p == g).count();
    hits as f64 / gold.len() as f64
}

/// Runs the model over one dialogue in turn order.
pub fn track_dialogue<F: Scalar>(
    model: &DstModel<F>,
    record: &DialogueRecord,
    mode: PrevStateMode,
) -> Result<Vec<TurnOutcome>> {
    let j = model.schema().len();
    let mut prev_state = DialogueState::empty(j);
    let mut prev_turn: Option<&DialogueTurn> = None;
    let mut out = Vec::with_capacity(record.turns.len());
    for (turn, gold) in &record.turns {
        if gold.num_slots() != j {
            return Err(Error::Contract(format!(
                "dialogue {} has {} slots, model schema has {j}",
                record.dialogue_id,
                gold.num_slots()
            )));
        }
        let start = Instant::now();
        let p = model.predict_turn(prev_turn, turn, &prev_state)?;
        let latency = start.elapsed();
        let (gold_ops, _) = derive_gold_operations(&prev_state, gold)?;
        prev_state = match mode {
            PrevStateMode::Gold => gold.clone(),
            PrevStateMode::Predicted => p.state.clone(),
        };
        prev_turn = Some(turn);
        out.push(TurnOutcome {
            predicted: p.state,
            gold: gold.clone(),
            predicted_ops: p.operations,
            gold_ops,
            decoder_invocations: p.decoder_invocations,
            truncated_values: p.truncated_values,
            latency,
        });
    }
    Ok(out)
}

/// Evaluates every dialogue, optionally sharded over `workers` threads.
pub fn evaluate<F: Scalar>(
    model: &DstModel<F>,
    records: &[DialogueRecord],
    mode: PrevStateMode,
    workers: usize,
) -> Result<EvalReport> {
    if records.is_empty() {
        return Err(Error::Contract("empty evaluation set".into()));
    }
    let workers = workers.clamp(1, records.len());
    let outcomes: Vec<Vec<TurnOutcome>> = if workers == 1 {
        records
            .iter()
            .map(|r| track_dialogue(model, r, mode))
            .collect::<Result<_>>()?
    } else {
        let chunk = records.len().div_ceil(workers);
        thread::scope(|s| {
            let handles: Vec<_> = records
                .chunks(chunk)
                .map(|part| {
                    s.spawn(move || {
                        part.iter()
                            .map(|r| track_dialogue(model, r, mode))
                            .collect::<Result<Vec<_>>>()
                    })
                })
                .collect();
            let mut all = Vec::with_capacity(records.len());
            for h in handles {
                all.extend(h.join().expect("evaluation worker panicked")?);
            }
            Ok::<_, Error>(all)
        })?
    };
    let turns: Vec<&TurnOutcome> = outcomes.iter().flatten().collect();
    let mut report = summarize(&turns, model.schema(), mode)?;
    report.dialogues = records.len();
    report.latency_sharded = workers > 1;
    Ok(report)
}

/// Aggregates turn outcomes into a report.
pub fn summarize(turns: &[&TurnOutcome], schema: &Schema, mode: PrevStateMode) -> Result<EvalReport> {
    if turns.is_empty() {
        return Err(Error::Contract("no turns to evaluate".into()));
    }
    let n = turns.len() as f64;
    let preds: Vec<DialogueState> = turns.iter().map(|t| t.predicted.clone()).collect();
    let golds: Vec<DialogueState> = turns.iter().map(|t| t.gold.clone()).collect();

    let mut per_domain = BTreeMap::new();
    for domain in schema.domains() {
        let slots = schema.slots_of(&domain);
        let hits = turns
            .iter()
            .filter(|t| slots.iter().all(|&j| t.predicted.get(j) == t.gold.get(j)))
            .count();
        per_domain.insert(domain, hits as f64 / n);
    }

    let j = schema.len();
    let slot_hits: usize = turns
        .iter()
        .map(|t| (0..j).filter(|&s| t.predicted.get(s) == t.gold.get(s)).count())
        .sum();
    let op_hits: usize = turns
        .iter()
        .map(|t| t.predicted_ops.iter().zip(&t.gold_ops).filter(|(a, b)| a == b).count())
        .sum();

    let mut histogram = BTreeMap::new();
    for t in turns {
        *histogram.entry(t.decoder_invocations).or_insert(0) += 1;
    }
    let latency: Duration = turns.iter().map(|t| t.latency).sum();

    Ok(EvalReport {
        mode,
        dialogues: 0,
        turns: turns.len(),
        joint_goal_accuracy: joint_goal_accuracy(&preds, &golds),
        per_domain_joint_accuracy: per_domain,
        slot_accuracy: slot_hits as f64 / (n * j as f64),
        op_accuracy: op_hits as f64 / (n * j as f64),
        mean_latency_per_turn_ms: latency.as_secs_f64() * 1e3 / n,
        latency_sharded: false,
        decoder_invocations_histogram: histogram,
        truncated_values: turns.iter().map(|t| t.truncated_values).sum(),
    })
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "mode                 {}", self.mode)?;
        writeln!(f, "dialogues / turns    {} / {}", self.dialogues, self.turns)?;
        writeln!(f, "joint goal accuracy  {:.4}", self.joint_goal_accuracy)?;
        for (d, acc) in &self.per_domain_joint_accuracy {
            writeln!(f, "  {d:<18} {acc:.4}")?;
        }
        writeln!(f, "slot accuracy        {:.4}", self.slot_accuracy)?;
        writeln!(f, "operation accuracy   {:.4}", self.op_accuracy)?;
        let note = if self.latency_sharded { " (sharded)" } else { "" };
        writeln!(f, "latency per turn     {:.3} ms{note}", self.mean_latency_per_turn_ms)?;
        let hist: Vec<String> = self
            .decoder_invocations_histogram
            .iter()
            .map(|(k, c)| format!("{k}:{c}"))
            .collect();
        write!(f, "decoder calls/turn   {}", hist.join(" "))
    }
}
