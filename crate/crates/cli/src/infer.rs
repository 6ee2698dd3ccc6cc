use std::io::{BufRead, Write};

use tdst::checkpoint::load_checkpoint;
use tdst::data::DialogueTurn;
use tdst::model::TurnPrediction;
use tdst::{DialogueState, DstModel, StateOperation};

use crate::cli::InferArgs;
use crate::error::CliResult;

/// One parsed input line.
#[derive(Debug, PartialEq, Eq)]
pub enum Line {
    Reset,
    Turn { system: String, user: String },
}

/// `system<TAB>user`, `system ||| user`, a bare user utterance, or `reset`.
pub fn parse_line(line: &str) -> Option<Line> {
    let trimmed = line.trim();
    if trimmed.is_empty() {
        return None;
    }
    if trimmed.eq_ignore_ascii_case("reset") {
        return Some(Line::Reset);
    }
    let (system, user) = if let Some((s, u)) = line.split_once('\t') {
        (s, u)
    } else if let Some((s, u)) = line.split_once("|||") {
        (s, u)
    } else {
        ("", line)
    };
    Some(Line::Turn {
        system: system.trim().to_string(),
        user: user.trim().to_string(),
    })
}

/// Tracks state across turns until reset.
pub struct Session<'m> {
    model: &'m DstModel<f32>,
    prev_turn: Option<DialogueTurn>,
    state: DialogueState,
    turn_index: usize,
}

impl<'m> Session<'m> {
    pub fn new(model: &'m DstModel<f32>) -> Self {
        Session {
            model,
            prev_turn: None,
            state: DialogueState::empty(model.schema().len()),
            turn_index: 0,
        }
    }

    pub fn reset(&mut self) {
        *self = Session::new(self.model);
    }

    pub fn state(&self) -> &DialogueState {
        &self.state
    }

    pub fn step(&mut self, system: &str, user: &str) -> tdst::Result<TurnPrediction> {
        self.turn_index += 1;
        let turn = DialogueTurn::new(system, user, self.turn_index);
        let p = self.model.predict_turn(self.prev_turn.as_ref(), &turn, &self.state)?;
        self.state = p.state.clone();
        self.prev_turn = Some(turn);
        Ok(p)
    }

    pub fn render(&self, p: &TurnPrediction) -> String {
        let schema = self.model.schema();
        let name = |j: usize| {
            let k = schema.pair(j);
            format!("{}-{}", k.domain, k.slot)
        };
        let ops: Vec<String> = p
            .operations
            .iter()
            .enumerate()
            .filter(|(_, &o)| o != StateOperation::Carryover)
            .map(|(j, o)| match p.values.get(&j) {
                Some(v) => format!("{} {} {v}", name(j), o.name()),
                None => format!("{} {}", name(j), o.name()),
            })
            .collect();
        let state: Vec<String> = self
            .state
            .iter()
            .filter(|(_, v)| !v.is_null())
            .map(|(j, v)| format!("{}={v}", name(j)))
            .collect();
        format!(
            "turn {}\n  operations: {}\n  state: {}\n",
            self.turn_index,
            if ops.is_empty() { "all CARRYOVER".to_string() } else { ops.join("; ") },
            if state.is_empty() { "(empty)".to_string() } else { state.join("; ") },
        )
    }
}

pub fn run(args: &InferArgs, input: &mut dyn BufRead, out: &mut dyn Write) -> CliResult<()> {
    let ck = load_checkpoint::<f32>(&args.ckpt)?;
    let mut session = Session::new(&ck.model);
    for line in input.lines() {
        match parse_line(&line?) {
            None => {}
            Some(Line::Reset) => {
                session.reset();
                writeln!(out, "reset")?;
            }
            Some(Line::Turn { system, user }) => {
                let p = session.step(&system, &user)?;
                write!(out, "{}", session.render(&p))?;
            }
        }
        out.flush()?;
    }
    Ok(())
}
