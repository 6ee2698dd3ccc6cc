//! The dialogue state tracker: input serialization, the encoder pass with
//! per-`[SLOT]` operation classification, reuse-state selection, greedy value
//! generation, and the joint training loss.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::data::dataset::{DialogueRecord, DialogueTurn};
use crate::data::schema::Schema;
use crate::data::text::words;
use crate::data::vocab::{Vocab, SPECIAL, TURN_SEP};
use crate::error::{Error, Result};
use crate::mask::{build_decoder_mask, build_encoder_mask};
use crate::param::{ParamId, ParamSet};
use crate::state::{apply_operations, derive_gold_operations, DialogueState, SlotValue, StateOperation};
use crate::tensor::{Scalar, Tensor};
use crate::transformer::{
    init_params, lookup, Init, ModelConfig, ParamSpec, Transformer, DECODER_TYPE, ENCODER_TYPE,
};

/// Serialized encoder input with the spans the model and reuse selection need.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedInput {
    pub token_ids: Vec<usize>,
    pub position_ids: Vec<usize>,
    pub type_ids: Vec<usize>,
    pub cls: usize,
    pub prev_turn: Range<usize>,
    pub curr_turn: Range<usize>,
    /// Position of each `[SLOT]`, in schema order.
    pub slot_markers: Vec<usize>,
    /// `d - s - v` tokens after each `[SLOT]`.
    pub tuple_regions: Vec<Range<usize>>,
    /// The `d - s` prefix of each tuple region.
    pub tuple_ds: Vec<Range<usize>>,
    /// Dialogue tokens dropped from the left to fit the length limit.
    pub truncated_tokens: usize,
}

impl EncodedInput {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    pub fn num_slots(&self) -> usize {
        self.slot_markers.len()
    }
}

/// `system ; user` token ids of one turn.
pub fn turn_tokens(turn: &DialogueTurn, vocab: &Vocab) -> Vec<usize> {
    let mut out = vocab.tokenize(&turn.system_utterance);
    out.push(vocab.id_or_unk(TURN_SEP));
    out.extend(vocab.tokenize(&turn.user_utterance));
    out
}

/// Token ids of a slot value as written in a state tuple.
pub fn value_tokens(value: &SlotValue, vocab: &Vocab) -> Vec<usize> {
    match value {
        SlotValue::Null => vec![SPECIAL.null],
        SlotValue::DontCare => vec![SPECIAL.dontcare],
        SlotValue::Value(v) => vocab.tokenize(v),
    }
}

/// Lays out `[CLS] D_{t-1} [SEP] D_t [SEP]` then `[SLOT] d - s - v` per slot.
///
/// When the result would exceed `max_len`, dialogue tokens are dropped from
/// the left (previous turn first); slot tuples are never truncated.
pub fn assemble_encoder_input(
    prev_turn: Option<&DialogueTurn>,
    curr_turn: &DialogueTurn,
    prev_state: &DialogueState,
    schema: &Schema,
    vocab: &Vocab,
    max_len: usize,
) -> Result<EncodedInput> {
    if prev_state.num_slots() != schema.len() {
        return Err(Error::Contract(format!(
            "previous state has {} slots, schema has {}",
            prev_state.num_slots(),
            schema.len()
        )));
    }
    let tuples: Vec<(Vec<usize>, usize)> = schema
        .pairs()
        .iter()
        .zip(prev_state.values())
        .map(|(key, value)| {
            let mut t: Vec<usize> = words(&key.domain).iter().map(|w| vocab.id_or_unk(w)).collect();
            t.push(SPECIAL.dash);
            t.extend(words(&key.slot).iter().map(|w| vocab.id_or_unk(w)));
            let ds_len = t.len();
            t.push(SPECIAL.dash);
            t.extend(value_tokens(value, vocab));
            (t, ds_len)
        })
        .collect();
    let slot_total: usize = tuples.iter().map(|(t, _)| t.len() + 1).sum();

    let mut prev = prev_turn.map(|t| turn_tokens(t, vocab)).unwrap_or_default();
    let mut curr = turn_tokens(curr_turn, vocab);
    let budget = max_len.checked_sub(3 + slot_total).ok_or_else(|| {
        Error::Contract(format!(
            "slot tuples need {} positions, max input length is {max_len}",
            slot_total + 3
        ))
    })?;
    let excess = (prev.len() + curr.len()).saturating_sub(budget);
    let from_prev = excess.min(prev.len());
    prev.drain(..from_prev);
    curr.drain(..excess - from_prev);

    let mut ids = Vec::with_capacity(budget + slot_total + 3);
    ids.push(SPECIAL.cls);
    let prev_span = ids.len()..ids.len() + prev.len();
    ids.extend(&prev);
    ids.push(SPECIAL.sep);
    let curr_span = ids.len()..ids.len() + curr.len();
    ids.extend(&curr);
    ids.push(SPECIAL.sep);

    let mut slot_markers = Vec::with_capacity(tuples.len());
    let mut tuple_regions = Vec::with_capacity(tuples.len());
    let mut tuple_ds = Vec::with_capacity(tuples.len());
    for (t, ds_len) in tuples {
        slot_markers.push(ids.len());
        ids.push(SPECIAL.slot);
        let start = ids.len();
        tuple_regions.push(start..start + t.len());
        tuple_ds.push(start..start + ds_len);
        ids.extend(t);
    }
    let n = ids.len();
    Ok(EncodedInput {
        token_ids: ids,
        position_ids: (0..n).collect(),
        type_ids: vec![ENCODER_TYPE; n],
        cls: 0,
        prev_turn: prev_span,
        curr_turn: curr_span,
        slot_markers,
        tuple_regions,
        tuple_ds,
        truncated_tokens: excess,
    })
}

/// Encoder positions a reuse spec can select.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Selector {
    Full,
    PrevTurn,
    CurrTurn,
    Cls,
    SlotMarker,
    TupleDs,
    TupleDsv,
}

impl Selector {
    const ALL: [Selector; 7] = [
        Selector::Full,
        Selector::PrevTurn,
        Selector::CurrTurn,
        Selector::Cls,
        Selector::SlotMarker,
        Selector::TupleDs,
        Selector::TupleDsv,
    ];

    fn key(self) -> &'static str {
        match self {
            Selector::Full => "full",
            Selector::PrevTurn => "prev",
            Selector::CurrTurn => "curr",
            Selector::Cls => "cls",
            Selector::SlotMarker => "slot",
            Selector::TupleDs => "ds",
            Selector::TupleDsv => "dsv",
        }
    }

    fn label(self) -> &'static str {
        match self {
            Selector::Full => "Full re-use",
            Selector::PrevTurn => "D_{t-1}",
            Selector::CurrTurn => "D_t",
            Selector::Cls => "[CLS]",
            Selector::SlotMarker => "[SLOT]",
            Selector::TupleDs => "(d,s)",
            Selector::TupleDsv => "(d,s,v)",
        }
    }
}

/// Which encoder positions the decoder of slot `j` attends to.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ReuseSpec {
    selectors: BTreeSet<Selector>,
}

impl ReuseSpec {
    pub fn new(selectors: impl IntoIterator<Item = Selector>) -> Result<Self> {
        let mut selectors: BTreeSet<Selector> = selectors.into_iter().collect();
        if selectors.is_empty() {
            return Err(Error::InvalidReuse("no selectors".into()));
        }
        if selectors.contains(&Selector::Full) {
            selectors = BTreeSet::from([Selector::Full]);
        }
        Ok(ReuseSpec { selectors })
    }

    /// Current turn plus the slot's own `[SLOT]`.
    pub fn best() -> Self {
        ReuseSpec::new([Selector::CurrTurn, Selector::SlotMarker]).expect("non-empty")
    }

    /// The eight configurations of the reuse ablation, in report order.
    pub fn presets() -> Vec<ReuseSpec> {
        use Selector::*;
        [
            vec![Full],
            vec![PrevTurn, CurrTurn, SlotMarker],
            vec![CurrTurn, SlotMarker],
            vec![Cls, SlotMarker],
            vec![SlotMarker, TupleDs],
            vec![SlotMarker],
            vec![CurrTurn, SlotMarker, TupleDsv],
            vec![CurrTurn, SlotMarker, TupleDs],
        ]
        .into_iter()
        .map(|s| ReuseSpec::new(s).expect("non-empty"))
        .collect()
    }

    pub fn selectors(&self) -> impl Iterator<Item = Selector> + '_ {
        self.selectors.iter().copied()
    }

    /// Human-readable label such as `D_t+[SLOT]`.
    pub fn label(&self) -> String {
        self.selectors.iter().map(|s| s.label()).collect::<Vec<_>>().join("+")
    }

    /// Sorted, de-duplicated positions for slot `j` (0-based).
    pub fn resolve(&self, input: &EncodedInput, j: usize) -> Result<Vec<usize>> {
        if j >= input.num_slots() {
            return Err(Error::InvalidReuse(format!(
                "slot index {j} outside [0, {})",
                input.num_slots()
            )));
        }
        let mut pos = BTreeSet::new();
        for s in &self.selectors {
            match s {
                Selector::Full => pos.extend(0..input.len()),
                Selector::PrevTurn => pos.extend(input.prev_turn.clone()),
                Selector::CurrTurn => pos.extend(input.curr_turn.clone()),
                Selector::Cls => {
                    pos.insert(input.cls);
                }
                Selector::SlotMarker => {
                    pos.insert(input.slot_markers[j]);
                }
                Selector::TupleDs => pos.extend(input.tuple_ds[j].clone()),
                Selector::TupleDsv => pos.extend(input.tuple_regions[j].clone()),
            }
        }
        if pos.is_empty() {
            return Err(Error::InvalidReuse(format!("{self} selects no positions for slot {j}")));
        }
        Ok(pos.into_iter().collect())
    }
}

impl fmt::Display for ReuseSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let keys: Vec<&str> = self.selectors.iter().map(|s| s.key()).collect();
        f.write_str(&keys.join("+"))
    }
}

impl FromStr for ReuseSpec {
    type Err = Error;

    /// Parses `+`-joined selector keys, e.g. `curr+slot` or `full`.
    fn from_str(s: &str) -> Result<Self> {
        let selectors = s
            .split('+')
            .map(|part| {
                let part = part.trim().to_ascii_lowercase();
                Selector::ALL
                    .into_iter()
                    .find(|sel| sel.key() == part)
                    .ok_or_else(|| Error::InvalidReuse(format!("unknown selector {part:?} in {s:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        ReuseSpec::new(selectors)
    }
}

/// Graph handles produced by one encoder pass.
#[derive(Clone, Debug)]
pub struct EncoderOutput {
    /// `X^0..X^L`.
    pub layer_states: Vec<Var>,
    /// `J × 4` operation logits.
    pub slot_logits: Var,
}

/// Argmax per row; ties go to the lowest operation index.
pub fn predict_operations<F: Scalar>(slot_logits: &Tensor<F>) -> Vec<StateOperation> {
    (0..slot_logits.rows())
        .map(|j| {
            let row = slot_logits.row(j);
            let mut best = 0;
            for (k, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = k;
                }
            }
            StateOperation::from_index(best).expect("4 classes")
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GeneratedValue {
    pub tokens: Vec<usize>,
    /// Hit the length limit without emitting `[EOS]`.
    pub truncated: bool,
}

/// One turn's encoder input with its gold labels (teacher-forced previous state).
#[derive(Clone, Debug)]
pub struct TrainingExample {
    pub dialogue_id: String,
    pub input: EncodedInput,
    pub gold_ops: Vec<StateOperation>,
    /// Gold value tokens of every UPDATE slot.
    pub targets: BTreeMap<usize, Vec<usize>>,
}

impl TrainingExample {
    pub fn num_updates(&self) -> usize {
        self.targets.len()
    }
}

/// Which part of the training objective to compute.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossTerm {
    Sop,
    Vg,
    Joint,
}

/// Loss terms of one example.
#[derive(Clone, Debug)]
pub struct ExampleLoss {
    pub sop: Var,
    /// One teacher-forced value loss per gold-UPDATE slot.
    pub vg: Vec<Var>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TurnPrediction {
    pub operations: Vec<StateOperation>,
    pub values: BTreeMap<usize, String>,
    pub state: DialogueState,
    /// Number of `generate_value` calls (equals the UPDATE count).
    pub decoder_invocations: usize,
    pub truncated_values: usize,
    pub truncated_input_tokens: usize,
}

#[derive(Clone, Debug)]
struct HeadIds {
    sop_w1: ParamId,
    sop_b1: ParamId,
    sop_w2: ParamId,
    sop_b2: ParamId,
    out_bias: ParamId,
}

/// The full tracker: one parameter set for encoding and decoding.
#[derive(Clone, Debug)]
pub struct DstModel<F> {
    config: ModelConfig,
    reuse: ReuseSpec,
    max_value_len: usize,
    vocab: Vocab,
    schema: Schema,
    params: ParamSet<F>,
    transformer: Transformer,
    head: HeadIds,
}

impl<F: Scalar> DstModel<F> {
    /// Parameters of the model: the shared Transformer, the operation head
    /// (`d→d` tanh layer and `d→4` output), and the output-vocabulary bias.
    /// The vocabulary projection reuses the token embedding table.
    pub fn param_specs(config: &ModelConfig) -> Vec<ParamSpec> {
        let d = config.hidden_dim;
        let mut specs = Transformer::param_specs(config);
        specs.extend([
            ParamSpec::new("sop.w1", &[d, d], Init::Normal),
            ParamSpec::new("sop.b1", &[d], Init::Zeros),
            ParamSpec::new("sop.w2", &[d, StateOperation::COUNT], Init::Normal),
            ParamSpec::new("sop.b2", &[StateOperation::COUNT], Init::Zeros),
            ParamSpec::new("vg.out_bias", &[config.vocab_size], Init::Zeros),
        ]);
        specs
    }

    /// Randomly initialised model; all randomness comes from `seed`.
    pub fn new(
        config: ModelConfig,
        vocab: Vocab,
        schema: Schema,
        reuse: ReuseSpec,
        max_value_len: usize,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        init_params(&mut params, &Self::param_specs(&config), config.init_std, &mut rng)?;
        Self::from_params(config, vocab, schema, reuse, max_value_len, params)
    }

    /// Binds an existing parameter set, checking every name and shape.
    pub fn from_params(
        config: ModelConfig,
        vocab: Vocab,
        schema: Schema,
        reuse: ReuseSpec,
        max_value_len: usize,
        params: ParamSet<F>,
    ) -> Result<Self> {
        if config.vocab_size != vocab.len() {
            return Err(Error::Config(format!(
                "vocab_size {} but vocabulary has {} tokens",
                config.vocab_size,
                vocab.len()
            )));
        }
        if max_value_len == 0 {
            return Err(Error::Config("max_value_len must be >= 1".into()));
        }
        if max_value_len + 1 > config.max_positions {
            return Err(Error::Config("max_positions too small for max_value_len".into()));
        }
        let specs = Self::param_specs(&config);
        if params.len() != specs.len() {
            let known: BTreeSet<&str> = specs.iter().map(|s| s.name.as_str()).collect();
            let extra: Vec<&str> = params
                .iter()
                .map(|(_, p)| p.name.as_str())
                .filter(|n| !known.contains(n))
                .collect();
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, found {} (unexpected: {extra:?})",
                specs.len(),
                params.len()
            )));
        }
        let transformer = Transformer::bind(&config, &params)?;
        let ids = lookup(&params, &specs[specs.len() - 5..])?;
        let head = HeadIds {
            sop_w1: ids[0],
            sop_b1: ids[1],
            sop_w2: ids[2],
            sop_b2: ids[3],
            out_bias: ids[4],
        };
        Ok(DstModel {
            config,
            reuse,
            max_value_len,
            vocab,
            schema,
            params,
            transformer,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn schema(&self) -> &Schema {
        &self.schema
    }

    pub fn reuse(&self) -> &ReuseSpec {
        &self.reuse
    }

    pub fn max_value_len(&self) -> usize {
        self.max_value_len
    }

    pub fn params(&self) -> &ParamSet<F> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<F> {
        &mut self.params
    }

    pub fn transformer(&self) -> &Transformer {
        &self.transformer
    }

    /// Ids of the operation-classification head (encoder-only parameters).
    pub fn sop_head_params(&self) -> [ParamId; 4] {
        [self.head.sop_w1, self.head.sop_b1, self.head.sop_w2, self.head.sop_b2]
    }

    /// Same model in another precision.
    pub fn cast<G: Scalar>(&self) -> DstModel<G> {
        DstModel::from_params(
            self.config.clone(),
            self.vocab.clone(),
            self.schema.clone(),
            self.reuse.clone(),
            self.max_value_len,
            self.params.cast(),
        )
        .expect("same layout")
    }

    pub fn assemble(
        &self,
        prev_turn: Option<&DialogueTurn>,
        curr_turn: &DialogueTurn,
        prev_state: &DialogueState,
    ) -> Result<EncodedInput> {
        assemble_encoder_input(
            prev_turn,
            curr_turn,
            prev_state,
            &self.schema,
            &self.vocab,
            self.config.max_positions,
        )
    }

    /// Bidirectional pass over the whole input, keeping every layer's states,
    /// then the operation head at each `[SLOT]` of `X^L`.
    pub fn encode(&self, g: &mut Graph<'_, F>, input: &EncodedInput) -> Result<EncoderOutput> {
        let t = &self.transformer;
        let x0 = t.embed_input(g, &input.token_ids, &input.position_ids, &input.type_ids)?;
        let mask = build_encoder_mask(input.len())?;
        let layer_states = t.run_layers(g, x0, &mask)?;
        let top = *layer_states.last().expect("L >= 1");
        let at_slots = g.select_rows(top, &input.slot_markers)?;
        let (w1, b1, w2, b2) = (
            g.param(self.head.sop_w1),
            g.param(self.head.sop_b1),
            g.param(self.head.sop_w2),
            g.param(self.head.sop_b2),
        );
        let h = g.matmul(at_slots, w1)?;
        let h = g.add_row(h, b1)?;
        let h = g.tanh(h);
        let logits = g.matmul(h, w2)?;
        let slot_logits = g.add_row(logits, b2)?;
        Ok(EncoderOutput {
            layer_states,
            slot_logits,
        })
    }

    /// Rows of `X^0..X^{L-1}` at the positions `spec` resolves to for slot `j`.
    pub fn select_reuse_states(
        &self,
        g: &mut Graph<'_, F>,
        output: &EncoderOutput,
        input: &EncodedInput,
        spec: &ReuseSpec,
        j: usize,
    ) -> Result<Vec<Var>> {
        let positions = spec.resolve(input, j)?;
        output.layer_states[..self.config.num_layers]
            .iter()
            .map(|&level| g.select_rows(level, &positions))
            .collect()
    }

    /// Left-to-right pass over decoder tokens; decoder layer `l` attends to
    /// `reused[l-1]` and the decoder prefix. Returns the top hidden states.
    pub fn decode(&self, g: &mut Graph<'_, F>, reused: &[Var], tokens: &[usize]) -> Result<Var> {
        if reused.len() != self.config.num_layers {
            return Err(Error::Contract(format!(
                "{} reused levels for {} layers",
                reused.len(),
                self.config.num_layers
            )));
        }
        let n = tokens.len();
        let t = &self.transformer;
        let positions: Vec<usize> = (0..n).collect();
        let mut h = t.embed_input(g, tokens, &positions, &vec![DECODER_TYPE; n])?;
        for (l, &r) in (1..=self.config.num_layers).zip(reused) {
            let mask = build_decoder_mask(g.value(r).rows(), n)?;
            h = t.transformer_block(g, l, h, Some(r), &mask)?;
        }
        Ok(h)
    }

    /// `hidden · Eᵀ + b` with `E` the token embedding table.
    pub fn vocab_logits(&self, g: &mut Graph<'_, F>, hidden: Var) -> Result<Var> {
        let emb = g.param(self.transformer.token_embedding());
        let bias = g.param(self.head.out_bias);
        let logits = g.matmul_nt(hidden, emb)?;
        g.add_row(logits, bias)
    }

    /// Greedy decoding from `[BOS]` until `[EOS]` or `max_len` tokens.
    pub fn generate_value(
        &self,
        g: &mut Graph<'_, F>,
        reused: &[Var],
        max_len: usize,
    ) -> Result<GeneratedValue> {
        if max_len == 0 {
            return Err(Error::Contract("max_len must be >= 1".into()));
        }
        let mut seq = vec![SPECIAL.bos];
        loop {
            let h = self.decode(g, reused, &seq)?;
            let last = g.select_rows(h, &[seq.len() - 1])?;
            let logits = self.vocab_logits(g, last)?;
            let next = argmax(g.value(logits).data());
            if next == SPECIAL.eos {
                return Ok(GeneratedValue {
                    tokens: seq[1..].to_vec(),
                    truncated: false,
                });
            }
            if seq.len() > max_len {
                return Ok(GeneratedValue {
                    tokens: seq[1..].to_vec(),
                    truncated: true,
                });
            }
            seq.push(next);
        }
    }

    /// Mean cross-entropy of the operation logits over all slots.
    pub fn sop_loss(
        &self,
        g: &mut Graph<'_, F>,
        slot_logits: Var,
        gold_ops: &[StateOperation],
    ) -> Result<Var> {
        let targets: Vec<usize> = gold_ops.iter().map(|o| o.index()).collect();
        g.cross_entropy(slot_logits, &targets)
    }

    /// Teacher-forced next-token cross-entropy over `[BOS] gold` → `gold [EOS]`.
    pub fn vg_loss(&self, g: &mut Graph<'_, F>, reused: &[Var], gold: &[usize]) -> Result<Var> {
        if gold.is_empty() {
            return Err(Error::Contract("empty gold value".into()));
        }
        let mut input = Vec::with_capacity(gold.len() + 1);
        input.push(SPECIAL.bos);
        input.extend_from_slice(gold);
        let mut targets = gold.to_vec();
        targets.push(SPECIAL.eos);
        let h = self.decode(g, reused, &input)?;
        let logits = self.vocab_logits(g, h)?;
        g.cross_entropy(logits, &targets)
    }

    /// Operation loss plus one value loss per gold-UPDATE slot.
    pub fn example_losses(
        &self,
        g: &mut Graph<'_, F>,
        example: &TrainingExample,
        spec: &ReuseSpec,
    ) -> Result<ExampleLoss> {
        let out = self.encode(g, &example.input)?;
        let sop = self.sop_loss(g, out.slot_logits, &example.gold_ops)?;
        let mut vg = Vec::with_capacity(example.targets.len());
        for (&j, gold) in &example.targets {
            let reused = self.select_reuse_states(g, &out, &example.input, spec, j)?;
            vg.push(self.vg_loss(g, &reused, gold)?);
        }
        Ok(ExampleLoss { sop, vg })
    }

    /// `sop + mean(vg)` for one example; equals `sop` when nothing is updated.
    pub fn joint_loss(&self, g: &mut Graph<'_, F>, example: &TrainingExample, spec: &ReuseSpec) -> Result<Var> {
        let l = self.example_losses(g, example, spec)?;
        weighted_sum(g, &l, F::one(), vg_weight(l.vg.len()))
    }

    /// Joint loss of a batch: mean operation loss over examples plus the mean
    /// value loss over every gold-UPDATE slot in the batch.
    pub fn batch_loss(
        &self,
        g: &mut Graph<'_, F>,
        batch: &[TrainingExample],
        spec: &ReuseSpec,
    ) -> Result<Var> {
        self.batch_term_loss(g, batch, spec, LossTerm::Joint)
    }

    /// One term of the batch loss, weighted exactly as in [`Self::batch_loss`].
    pub fn batch_term_loss(
        &self,
        g: &mut Graph<'_, F>,
        batch: &[TrainingExample],
        spec: &ReuseSpec,
        term: LossTerm,
    ) -> Result<Var> {
        if batch.is_empty() {
            return Err(Error::Contract("empty batch".into()));
        }
        let updates: usize = batch.iter().map(|e| e.num_updates()).sum();
        if term == LossTerm::Vg && updates == 0 {
            return Err(Error::Contract("value loss needs a gold UPDATE slot".into()));
        }
        let (ws, wv) = batch_weights::<F>(batch.len(), updates);
        let mut parts = Vec::new();
        for ex in batch {
            let l = self.example_losses(g, ex, spec)?;
            if term != LossTerm::Vg {
                parts.push(g.scale(l.sop, ws));
            }
            if term != LossTerm::Sop {
                parts.extend(l.vg.iter().map(|&v| g.scale(v, wv)));
            }
        }
        let mut total = parts[0];
        for &p in &parts[1..] {
            total = g.add(total, p)?;
        }
        Ok(total)
    }

    /// Predicts `S_t` from `D_{t-1}`, `D_t` and `S_{t-1}`. The decoder runs
    /// once per slot predicted UPDATE and never otherwise.
    pub fn predict_turn(
        &self,
        prev_turn: Option<&DialogueTurn>,
        curr_turn: &DialogueTurn,
        prev_state: &DialogueState,
    ) -> Result<TurnPrediction> {
        let input = self.assemble(prev_turn, curr_turn, prev_state)?;
        let mut g = Graph::new(&self.params);
        let out = self.encode(&mut g, &input)?;
        let operations = predict_operations(g.value(out.slot_logits));
        let mut values = BTreeMap::new();
        let mut truncated_values = 0;
        for (j, op) in operations.iter().enumerate() {
            if *op != StateOperation::Update {
                continue;
            }
            let reused = self.select_reuse_states(&mut g, &out, &input, &self.reuse, j)?;
            let v = self.generate_value(&mut g, &reused, self.max_value_len)?;
            truncated_values += usize::from(v.truncated);
            values.insert(j, self.vocab.detokenize(&v.tokens));
        }
        let decoder_invocations = values.len();
        let state = apply_operations(prev_state, &operations, &values)?;
        Ok(TurnPrediction {
            operations,
            values,
            state,
            decoder_invocations,
            truncated_values,
            truncated_input_tokens: input.truncated_tokens,
        })
    }

    /// Teacher-forced training examples: every turn paired with the previous
    /// gold state and the gold operations that lead to its state.
    pub fn build_examples(&self, records: &[DialogueRecord]) -> Result<Vec<TrainingExample>> {
        let mut out = Vec::new();
        for r in records {
            let mut prev_state = DialogueState::empty(self.schema.len());
            let mut prev_turn: Option<&DialogueTurn> = None;
            for (turn, gold) in &r.turns {
                if gold.num_slots() != self.schema.len() {
                    return Err(Error::Contract(format!(
                        "dialogue {} has {} slots, schema has {}",
                        r.dialogue_id,
                        gold.num_slots(),
                        self.schema.len()
                    )));
                }
                let input = self.assemble(prev_turn, turn, &prev_state)?;
                let (gold_ops, targets) = derive_gold_operations(&prev_state, gold)?;
                let targets = targets
                    .into_iter()
                    .map(|(j, v)| (j, self.vocab.tokenize(&v)))
                    .collect();
                out.push(TrainingExample {
                    dialogue_id: r.dialogue_id.clone(),
                    input,
                    gold_ops,
                    targets,
                });
                prev_state = gold.clone();
                prev_turn = Some(turn);
            }
        }
        Ok(out)
    }
}

fn argmax<F: Scalar>(xs: &[F]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

fn vg_weight<F: Scalar>(updates: usize) -> F {
    if updates == 0 {
        F::zero()
    } else {
        F::one() / F::lit(updates as f64)
    }
}

/// Per-example weights of the operation and value terms in a batch loss.
pub fn batch_weights<F: Scalar>(examples: usize, updates: usize) -> (F, F) {
    (F::one() / F::lit(examples as f64), vg_weight(updates))
}

/// `ws·sop + wv·Σ vg`.
pub fn weighted_sum<F: Scalar>(g: &mut Graph<'_, F>, l: &ExampleLoss, ws: F, wv: F) -> Result<Var> {
    let mut total = if ws == F::one() { l.sop } else { g.scale(l.sop, ws) };
    for &v in &l.vg {
        let v = g.scale(v, wv);
        total = g.add(total, v)?;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::schema::SlotKey;

    fn schema() -> Schema {
        Schema::from_pairs(vec![
            SlotKey::new("hotel", "price range"),
            SlotKey::new("taxi", "leave at"),
        ])
        .unwrap()
    }

    fn vocab() -> Vocab {
        Vocab::new([
            "hotel", "price", "range", "taxi", "leave", "at", "cheap", "7", "pm", "i", "want",
            "a", "hello", ";", "what", "time", "?",
        ])
    }

    fn model() -> DstModel<f64> {
        let v = vocab();
        let mut c = ModelConfig::toy(v.len());
        c.hidden_dim = 16;
        c.ffn_dim = 32;
        c.max_positions = 64;
        DstModel::new(c, v, schema(), ReuseSpec::best(), 4, 3).unwrap()
    }

    #[test]
    fn first_turn_layout() {
        let m = model();
        let turn = DialogueTurn::new("", "i want a cheap hotel", 1);
        let inp = m.assemble(None, &turn, &DialogueState::empty(2)).unwrap();
        assert_eq!(inp.token_ids[0], SPECIAL.cls);
        assert!(inp.prev_turn.is_empty());
        assert_eq!(inp.token_ids[inp.prev_turn.end], SPECIAL.sep);
        assert_eq!(inp.slot_markers.len(), 2);
        assert!(inp.slot_markers[0] < inp.slot_markers[1]);
        for (j, r) in inp.tuple_regions.iter().enumerate() {
            assert_eq!(r.start, inp.slot_markers[j] + 1);
            assert_eq!(inp.token_ids[r.end - 1], SPECIAL.null);
        }
        assert_eq!(inp.position_ids, (0..inp.len()).collect::<Vec<_>>());
        assert!(inp.type_ids.iter().all(|&t| t == ENCODER_TYPE));
    }

    #[test]
    fn tuple_region_detokenizes_to_triple() {
        let m = model();
        let mut st = DialogueState::empty(2);
        st.set(1, SlotValue::value("7 pm"));
        let turn = DialogueTurn::new("what time ?", "7 pm", 2);
        let inp = m.assemble(None, &turn, &st).unwrap();
        let text = m.vocab.detokenize(&inp.token_ids[inp.tuple_regions[1].clone()]);
        assert_eq!(text, "taxi - leave at - 7 pm");
        let ds = m.vocab.detokenize(&inp.token_ids[inp.tuple_ds[0].clone()]);
        assert_eq!(ds, "hotel - price range");
    }

    #[test]
    fn truncation_drops_dialogue_from_left() {
        let v = vocab();
        let long = "hello ".repeat(40);
        let prev = DialogueTurn::new("", &long, 1);
        let curr = DialogueTurn::new("what time ?", "7 pm", 2);
        let st = DialogueState::empty(2);
        let full = assemble_encoder_input(Some(&prev), &curr, &st, &schema(), &v, 1000).unwrap();
        let cut = assemble_encoder_input(Some(&prev), &curr, &st, &schema(), &v, 40).unwrap();
        assert_eq!(full.truncated_tokens, 0);
        assert_eq!(cut.len(), 40);
        assert_eq!(cut.truncated_tokens, full.len() - 40);
        // current turn and tuples intact
        assert_eq!(cut.curr_turn.len(), full.curr_turn.len());
        assert_eq!(
            &cut.token_ids[cut.slot_markers[0]..],
            &full.token_ids[full.slot_markers[0]..]
        );
        assert!(assemble_encoder_input(Some(&prev), &curr, &st, &schema(), &v, 10).is_err());
    }

    #[test]
    fn reuse_spec_parsing_and_labels() {
        let presets = ReuseSpec::presets();
        assert_eq!(presets.len(), 8);
        let names: Vec<String> = presets.iter().map(|p| p.to_string()).collect();
        assert_eq!(
            names,
            [
                "full",
                "prev+curr+slot",
                "curr+slot",
                "cls+slot",
                "slot+ds",
                "slot",
                "curr+slot+dsv",
                "curr+slot+ds"
            ]
        );
        for p in &presets {
            assert_eq!(&p.to_string().parse::<ReuseSpec>().unwrap(), p);
        }
        assert_eq!(presets[2].label(), "D_t+[SLOT]");
        assert_eq!(presets[0].label(), "Full re-use");
        assert_eq!("slot+full".parse::<ReuseSpec>().unwrap(), presets[0]);
        assert!("slot+bogus".parse::<ReuseSpec>().is_err());
        assert!(ReuseSpec::new([]).is_err());
    }

    #[test]
    fn reuse_resolution_counts() {
        let m = model();
        let turn = DialogueTurn::new("what time ?", "i want a cheap hotel", 2);
        let inp = m.assemble(None, &turn, &DialogueState::empty(2)).unwrap();
        let slot = ReuseSpec::new([Selector::SlotMarker]).unwrap();
        assert_eq!(slot.resolve(&inp, 1).unwrap(), vec![inp.slot_markers[1]]);
        let full = ReuseSpec::new([Selector::Full]).unwrap();
        assert_eq!(full.resolve(&inp, 0).unwrap().len(), inp.len());
        // |D_t| = 3 + 1 + 5 = 9 tokens
        assert_eq!(inp.curr_turn.len(), 9);
        assert_eq!(ReuseSpec::best().resolve(&inp, 0).unwrap().len(), 10);
        let prev = ReuseSpec::new([Selector::PrevTurn]).unwrap();
        assert!(matches!(prev.resolve(&inp, 0), Err(Error::InvalidReuse(_))));
        assert!(slot.resolve(&inp, 2).is_err());
    }

    #[test]
    fn predict_operations_tie_break() {
        let t = Tensor::<f64>::from_rows(&[&[0.0, 0.0, 0.0, 9.0], &[1.0, 1.0, 1.0, 1.0], &[0.0, 2.0, 2.0, 1.0]]);
        assert_eq!(
            predict_operations(&t),
            vec![StateOperation::Update, StateOperation::Carryover, StateOperation::Delete]
        );
        let big = Tensor::<f32>::zeros(&[30, 4]);
        assert_eq!(predict_operations(&big).len(), 30);
    }

    #[test]
    fn encode_shapes_and_level_zero() {
        let m = model();
        let turn = DialogueTurn::new("", "i want a cheap hotel", 1);
        let inp = m.assemble(None, &turn, &DialogueState::empty(2)).unwrap();
        let mut g = Graph::new(m.params());
        let out = m.encode(&mut g, &inp).unwrap();
        assert_eq!(g.value(out.slot_logits).shape(), &[2, 4]);
        assert_eq!(out.layer_states.len(), 3);
        let x0 = m
            .transformer()
            .embed_input(&mut g, &inp.token_ids, &inp.position_ids, &inp.type_ids)
            .unwrap();
        assert_eq!(g.value(x0), g.value(out.layer_states[0]));
    }

    #[test]
    fn reused_rows_are_stored_states() {
        let m = model();
        let turn = DialogueTurn::new("what time ?", "7 pm", 2);
        let inp = m.assemble(None, &turn, &DialogueState::empty(2)).unwrap();
        let mut g = Graph::new(m.params());
        let out = m.encode(&mut g, &inp).unwrap();
        let spec = ReuseSpec::best();
        let reused = m.select_reuse_states(&mut g, &out, &inp, &spec, 1).unwrap();
        let pos = spec.resolve(&inp, 1).unwrap();
        assert_eq!(reused.len(), m.config().num_layers);
        for (level, &r) in reused.iter().enumerate() {
            let stored = g.value(out.layer_states[level]);
            for (row, &p) in pos.iter().enumerate() {
                assert_eq!(g.value(r).row(row), stored.row(p));
            }
        }
    }

    #[test]
    fn eos_biased_model_generates_empty_value() {
        let mut m = model();
        let id = m.head.out_bias;
        m.params_mut().get_mut(id).value_mut().data_mut()[SPECIAL.eos] = 1e3;
        let turn = DialogueTurn::new("", "7 pm", 1);
        let inp = m.assemble(None, &turn, &DialogueState::empty(2)).unwrap();
        let mut g = Graph::new(m.params());
        let out = m.encode(&mut g, &inp).unwrap();
        let reused = m.select_reuse_states(&mut g, &out, &inp, &ReuseSpec::best(), 0).unwrap();
        let v = m.generate_value(&mut g, &reused, 3).unwrap();
        assert_eq!(v, GeneratedValue { tokens: vec![], truncated: false });
    }

    #[test]
    fn never_eos_model_truncates() {
        let mut m = model();
        let id = m.head.out_bias;
        let seven = m.vocab.id("7").unwrap();
        m.params_mut().get_mut(id).value_mut().data_mut()[seven] = 1e3;
        let turn = DialogueTurn::new("", "7 pm", 1);
        let inp = m.assemble(None, &turn, &DialogueState::empty(2)).unwrap();
        let mut g = Graph::new(m.params());
        let out = m.encode(&mut g, &inp).unwrap();
        let reused = m.select_reuse_states(&mut g, &out, &inp, &ReuseSpec::best(), 0).unwrap();
        let v = m.generate_value(&mut g, &reused, 3).unwrap();
        assert_eq!(v.tokens, vec![seven; 3]);
        assert!(v.truncated);
    }

    #[test]
    fn uniform_logits_sop_loss_is_ln4() {
        let m = model();
        let mut g = Graph::new(m.params());
        let logits = g.input(Tensor::zeros(&[2, 4]));
        let l = m.sop_loss(&mut g, logits, &[StateOperation::Update, StateOperation::Delete]).unwrap();
        assert!((g.value(l).item() - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn sop_loss_matches_hand_computation() {
        let m = model();
        let mut g = Graph::new(m.params());
        let logits = g.input(Tensor::from_rows(&[&[1.0, 0.0, -1.0, 2.0], &[0.5, 0.5, 0.0, 0.0]]));
        let l = m.sop_loss(&mut g, logits, &[StateOperation::Update, StateOperation::Carryover]).unwrap();
        let ce = |row: [f64; 4], t: usize| {
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            z.ln() - row[t]
        };
        let expect = (ce([1.0, 0.0, -1.0, 2.0], 3) + ce([0.5, 0.5, 0.0, 0.0], 0)) / 2.0;
        assert!((g.value(l).item() - expect).abs() < 1e-12);
    }

    #[test]
    fn sop_loss_vanishes_with_margin() {
        let m = model();
        let mut prev = f64::INFINITY;
        for margin in [1.0, 5.0, 20.0, 50.0] {
            let mut g = Graph::new(m.params());
            let logits = g.input(Tensor::from_rows(&[&[margin, 0.0, 0.0, 0.0]]));
            let l = m.sop_loss(&mut g, logits, &[StateOperation::Carryover]).unwrap();
            let l = g.value(l).item();
            assert!(l < prev);
            prev = l;
        }
        assert!(prev < 1e-20);
    }

    #[test]
    fn vg_loss_is_order_sensitive() {
        let m = model();
        let turn = DialogueTurn::new("", "7 pm", 1);
        let inp = m.assemble(None, &turn, &DialogueState::empty(2)).unwrap();
        let mut g = Graph::new(m.params());
        let out = m.encode(&mut g, &inp).unwrap();
        let reused = m.select_reuse_states(&mut g, &out, &inp, &ReuseSpec::best(), 1).unwrap();
        let (seven, pm) = (m.vocab.id("7").unwrap(), m.vocab.id("pm").unwrap());
        let a = m.vg_loss(&mut g, &reused, &[seven, pm]).unwrap();
        let b = m.vg_loss(&mut g, &reused, &[pm, seven]).unwrap();
        assert_ne!(g.value(a).item(), g.value(b).item());
        assert!(m.vg_loss(&mut g, &reused, &[]).is_err());
    }

    #[test]
    fn joint_without_updates_is_sop() {
        let m = model();
        let records = vec![DialogueRecord {
            dialogue_id: "d".into(),
            turns: vec![(DialogueTurn::new("", "hello", 1), DialogueState::empty(2))],
        }];
        let ex = m.build_examples(&records).unwrap();
        assert_eq!(ex[0].num_updates(), 0);
        let mut g = Graph::new(m.params());
        let joint = m.joint_loss(&mut g, &ex[0], &ReuseSpec::best()).unwrap();
        let mut g2 = Graph::new(m.params());
        let out = m.encode(&mut g2, &ex[0].input).unwrap();
        let sop = m.sop_loss(&mut g2, out.slot_logits, &ex[0].gold_ops).unwrap();
        assert_eq!(g.value(joint).item(), g2.value(sop).item());
    }

    #[test]
    fn predict_turn_counts_decoder_calls() {
        let mut m = model();
        // force UPDATE on every slot through the operation bias
        let b2 = m.head.sop_b2;
        m.params_mut().get_mut(b2).value_mut().data_mut()[3] = 100.0;
        let turn = DialogueTurn::new("", "7 pm", 1);
        let p = m.predict_turn(None, &turn, &DialogueState::empty(2)).unwrap();
        assert_eq!(p.decoder_invocations, 2);
        // and CARRYOVER on every slot
        let data = m.params_mut().get_mut(b2).value_mut().data_mut();
        data[3] = 0.0;
        data[0] = 100.0;
        let p = m.predict_turn(None, &turn, &DialogueState::empty(2)).unwrap();
        assert_eq!(p.decoder_invocations, 0);
        assert_eq!(p.state, DialogueState::empty(2));
    }

    #[test]
    fn from_params_rejects_extra_and_missing() {
        let m = model();
        let mut ps = m.params().clone();
        ps.add_constant("stray", &[1], 0.0).unwrap();
        let err = DstModel::from_params(m.config.clone(), vocab(), schema(), ReuseSpec::best(), 4, ps).unwrap_err();
        assert!(err.to_string().contains("stray"), "{err}");
    }
}
