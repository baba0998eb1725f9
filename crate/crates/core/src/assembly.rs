//! Encoder inputs for one (frame, slot) pair and their supervision labels.
//!
//! Layout, with the default lengths:
//!
//! ```text
//! 0      [CLS] question [SEP] history [SEP] [PAD]...   | max_hist_len (250)
//! 250    [int] none [int] intent 1 ... [PAD]...        | max_intent_len (50)
//! 300    [pv] none [pv] value 1 ... [PAD]...           | up to max_seq_len
//! ```
//!
//! The intent region is present only with `use_intents`; the value region
//! only for categorical slots with the PV categorical head. Candidate 0 of
//! both intent and value lists is always NONE.

use std::io::Write;
use std::ops::Range;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, ResultExt};
use crate::schema::{
    compute_state_update, Dialogue, DialogueState, Frame, IntentSchema, SchemaIndex, ServiceSchema, SlotSchema,
    Speaker, Turn, DONTCARE, NONE_INTENT,
};
use crate::tokenizer::{Token, Tokenizer, CLS, INT, NONE_TOKEN, PAD, PV, SEP};

pub const SEGMENT_QUESTION: u8 = 0;
pub const SEGMENT_HISTORY: u8 = 1;
pub const SEGMENT_INTENTS: u8 = 2;
pub const SEGMENT_VALUES: u8 = 3;
pub const SEGMENT_PAD: u8 = 0;
pub const NUM_SEGMENTS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CategoricalHead {
    /// Score each `[pv]` token embedding.
    Pv,
    /// Fixed-width classifier over the `[CLS]` embedding.
    Cls,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AssemblyConfig {
    pub max_hist_len: usize,
    pub max_intent_len: usize,
    pub max_seq_len: usize,
    pub use_nld: bool,
    pub use_intents: bool,
    pub categorical_head: CategoricalHead,
    pub cat_neg_sampling_prob: f64,
    pub noncat_neg_sampling_prob: f64,
    /// Largest number of possible values of a categorical slot.
    pub max_categorical_values: usize,
    /// Largest number of intents of a service.
    pub max_intents: usize,
}

impl Default for AssemblyConfig {
    fn default() -> Self {
        AssemblyConfig {
            max_hist_len: 250,
            max_intent_len: 50,
            max_seq_len: 512,
            use_nld: true,
            use_intents: true,
            categorical_head: CategoricalHead::Pv,
            cat_neg_sampling_prob: 0.1,
            noncat_neg_sampling_prob: 0.2,
            max_categorical_values: 16,
            max_intents: 8,
        }
    }
}

impl AssemblyConfig {
    pub fn validate(&self) -> Result<()> {
        let fixed = self.max_hist_len + if self.use_intents { self.max_intent_len } else { 0 };
        if fixed > self.max_seq_len {
            return Err(Error::Config(format!(
                "max_hist_len + max_intent_len = {fixed} exceeds max_seq_len {}",
                self.max_seq_len
            )));
        }
        if self.max_hist_len < 4 {
            return Err(Error::Config("max_hist_len must be at least 4".into()));
        }
        for (name, p) in [
            ("cat_neg_sampling_prob", self.cat_neg_sampling_prob),
            ("noncat_neg_sampling_prob", self.noncat_neg_sampling_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} = {p} is outside [0, 1]")));
            }
        }
        if self.max_categorical_values == 0 || self.max_intents == 0 {
            return Err(Error::Config("max_categorical_values and max_intents must be positive".into()));
        }
        Ok(())
    }

    fn intent_region_len(&self) -> usize {
        if self.use_intents {
            self.max_intent_len
        } else {
            0
        }
    }

    /// First position of the possible-values region.
    pub fn values_start(&self) -> usize {
        self.max_hist_len + self.intent_region_len()
    }
}

/// Where a history token came from: index into the history utterance list
/// and the character interval inside that utterance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistoryAlignment {
    pub token_index: usize,
    pub utterance: usize,
    pub char_start: usize,
    pub char_end: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderInput {
    pub token_ids: Vec<u32>,
    pub attention_mask: Vec<u8>,
    pub segment_ids: Vec<u8>,
    pub cls_index: usize,
    pub question_range: Range<usize>,
    pub history_range: Range<usize>,
    /// `[int]` positions, NONE first; empty without intents.
    pub int_positions: Vec<usize>,
    /// `[pv]` positions, NONE first; empty unless categorical with PV head.
    pub pv_positions: Vec<usize>,
    /// One entry per history token, in sequence order.
    pub alignment: Vec<HistoryAlignment>,
}

impl EncoderInput {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    pub fn alignment_of(&self, token_index: usize) -> Option<&HistoryAlignment> {
        token_index.checked_sub(self.history_range.start).and_then(|i| self.alignment.get(i))
    }
}

/// A history utterance as seen by the assembler.
#[derive(Debug, Clone, Copy)]
pub struct HistoryUtterance<'a> {
    pub speaker: Speaker,
    pub text: &'a str,
}

/// The question text for a slot. `fell_back` is set when descriptions were
/// requested but missing, so names were used instead.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Question {
    pub text: String,
    pub fell_back: bool,
}

pub fn build_question(slot: &SlotSchema, service: &ServiceSchema, use_nld: bool) -> Question {
    let names = || format!("{} {}", slot.name, service.service_name);
    if !use_nld {
        return Question { text: names(), fell_back: false };
    }
    if slot.description.trim().is_empty() || service.description.trim().is_empty() {
        log::warn!("{}.{}: empty description, using names in the question", service.service_name, slot.name);
        return Question { text: names(), fell_back: true };
    }
    Question { text: format!("{} {}", slot.description, service.description), fell_back: false }
}

struct Builder {
    ids: Vec<u32>,
    mask: Vec<u8>,
    segments: Vec<u8>,
}

impl Builder {
    fn push(&mut self, id: u32, segment: u8) {
        self.ids.push(id);
        self.mask.push(1);
        self.segments.push(segment);
    }

    fn pad_to(&mut self, len: usize) {
        while self.ids.len() < len {
            self.ids.push(PAD);
            self.mask.push(0);
            self.segments.push(SEGMENT_PAD);
        }
    }
}

fn intent_text(intent: &IntentSchema) -> &str {
    if intent.description.trim().is_empty() {
        &intent.name
    } else {
        &intent.description
    }
}

pub fn assemble_input(
    question: &str,
    history: &[HistoryUtterance<'_>],
    intents: &[IntentSchema],
    slot: &SlotSchema,
    cfg: &AssemblyConfig,
    tokenizer: &dyn Tokenizer,
) -> Result<EncoderInput> {
    let q_tokens = tokenizer.tokenize(question);
    let needed = q_tokens.len() + 3;
    if needed > cfg.max_hist_len {
        return Err(Error::QuestionTooLong { needed, max_hist_len: cfg.max_hist_len });
    }
    if cfg.categorical_head == CategoricalHead::Cls
        && slot.is_categorical
        && slot.possible_values.len() > cfg.max_categorical_values
    {
        return Err(Error::TooManyValues { values: slot.possible_values.len(), max: cfg.max_categorical_values });
    }

    let mut b = Builder {
        ids: Vec::with_capacity(cfg.max_seq_len),
        mask: Vec::with_capacity(cfg.max_seq_len),
        segments: Vec::with_capacity(cfg.max_seq_len),
    };
    b.push(CLS, SEGMENT_QUESTION);
    for t in &q_tokens {
        b.push(t.id, SEGMENT_QUESTION);
    }
    let question_range = 1..b.ids.len();
    b.push(SEP, SEGMENT_QUESTION);

    // history, oldest tokens dropped first
    let mut h_tokens: Vec<(usize, Token)> = history
        .iter()
        .enumerate()
        .flat_map(|(u, h)| tokenizer.tokenize(h.text).into_iter().map(move |t| (u, t)))
        .collect();
    let capacity = cfg.max_hist_len - needed;
    if h_tokens.len() > capacity {
        h_tokens.drain(..h_tokens.len() - capacity);
    }
    let h_start = b.ids.len();
    let mut alignment = Vec::with_capacity(h_tokens.len());
    for (u, t) in &h_tokens {
        alignment.push(HistoryAlignment {
            token_index: b.ids.len(),
            utterance: *u,
            char_start: t.char_start,
            char_end: t.char_end,
        });
        b.push(t.id, SEGMENT_HISTORY);
    }
    let history_range = h_start..b.ids.len();
    b.push(SEP, SEGMENT_HISTORY);
    b.pad_to(cfg.max_hist_len);

    let mut int_positions = Vec::new();
    if cfg.use_intents {
        let region_end = cfg.max_hist_len + cfg.max_intent_len;
        let none = tokenizer.tokenize(NONE_TOKEN);
        let candidates = std::iter::once(none).chain(intents.iter().map(|i| tokenizer.tokenize(intent_text(i))));
        for tokens in candidates {
            int_positions.push(b.ids.len());
            b.push(INT, SEGMENT_INTENTS);
            for t in tokens {
                b.push(t.id, SEGMENT_INTENTS);
            }
        }
        if b.ids.len() > region_end {
            return Err(Error::IntentRegionOverflow {
                needed: b.ids.len() - cfg.max_hist_len,
                max_intent_len: cfg.max_intent_len,
            });
        }
        b.pad_to(region_end);
    }

    let mut pv_positions = Vec::new();
    if slot.is_categorical && cfg.categorical_head == CategoricalHead::Pv {
        let none = tokenizer.tokenize(NONE_TOKEN);
        let candidates = std::iter::once(none).chain(slot.possible_values.iter().map(|v| tokenizer.tokenize(v)));
        for tokens in candidates {
            pv_positions.push(b.ids.len());
            b.push(PV, SEGMENT_VALUES);
            for t in tokens {
                b.push(t.id, SEGMENT_VALUES);
            }
        }
    }
    if b.ids.len() > cfg.max_seq_len {
        return Err(Error::SequenceOverflow { needed: b.ids.len(), max_seq_len: cfg.max_seq_len });
    }
    b.pad_to(cfg.max_seq_len);

    Ok(EncoderInput {
        token_ids: b.ids,
        attention_mask: b.mask,
        segment_ids: b.segments,
        cls_index: 0,
        question_range,
        history_range,
        int_positions,
        pv_positions,
        alignment,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Gate {
    None = 0,
    Dontcare = 1,
    Ptr = 2,
}

impl Gate {
    pub const ALL: [Gate; 3] = [Gate::None, Gate::Dontcare, Gate::Ptr];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Gate {
        Gate::ALL[i]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSet {
    pub gate: Gate,
    /// Index into the value candidates (0 = NONE) when gate is ptr on a
    /// categorical slot.
    pub categorical_index: Option<usize>,
    /// Inclusive token positions inside the history.
    pub span: Option<(usize, usize)>,
    pub span_supervised: bool,
    pub requested: bool,
    /// Index into the intent candidates (0 = NONE).
    pub intent_index: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExampleMeta {
    pub dialogue_id: String,
    pub turn_index: usize,
    pub service: String,
    pub slot: String,
    pub is_categorical: bool,
    pub num_values: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingExample {
    pub input: EncoderInput,
    pub labels: LabelSet,
    pub meta: ExampleMeta,
}

/// A user turn with its preceding system turn: the history window.
#[derive(Debug, Clone, Copy)]
pub struct Exchange<'a> {
    pub system: Option<&'a Turn>,
    pub user: &'a Turn,
}

impl<'a> Exchange<'a> {
    pub fn of(dialogue: &'a Dialogue, user_turn: usize) -> Self {
        Exchange { system: dialogue.preceding_system_turn(user_turn), user: &dialogue.turns[user_turn] }
    }

    /// History utterances in order; the user utterance is last.
    pub fn utterances(&self) -> Vec<HistoryUtterance<'a>> {
        let mut h = Vec::with_capacity(2);
        if let Some(s) = self.system {
            h.push(HistoryUtterance { speaker: Speaker::System, text: &s.utterance });
        }
        h.push(HistoryUtterance { speaker: Speaker::User, text: &self.user.utterance });
        h
    }

    fn utterance_index(&self, speaker: Speaker) -> usize {
        match (speaker, self.system.is_some()) {
            (Speaker::User, true) => 1,
            _ => 0,
        }
    }
}

/// Index of `intent` among the candidates NONE, schema intents...
pub fn intent_candidate_index(service: &ServiceSchema, intent: &str) -> Option<usize> {
    if intent == NONE_INTENT {
        return Some(0);
    }
    service.intents.iter().position(|i| i.name == intent).map(|i| i + 1)
}

/// Token interval `(first, last)` exactly covering characters
/// `[start, end)` of history utterance `utterance`.
fn aligned_tokens(input: &EncoderInput, utterance: usize, start: usize, end: usize) -> Option<(usize, usize)> {
    let first = input.alignment.iter().find(|a| a.utterance == utterance && a.char_start == start)?;
    let last = input.alignment.iter().find(|a| a.utterance == utterance && a.char_end == end)?;
    (first.token_index <= last.token_index).then_some((first.token_index, last.token_index))
}

/// Locates a gold value in the history: annotated spans first (user turn,
/// then system turn), then a verbatim search, latest occurrence first.
fn find_value_span(
    exchange: &Exchange<'_>,
    service: &str,
    slot: &str,
    values: &[String],
    input: &EncoderInput,
) -> Option<(usize, usize)> {
    let mut turns = vec![(Speaker::User, exchange.user)];
    if let Some(s) = exchange.system {
        turns.push((Speaker::System, s));
    }
    for (speaker, turn) in &turns {
        let u = exchange.utterance_index(*speaker);
        let Some(frame) = turn.frame(service) else { continue };
        for span in frame.spans.iter().filter(|s| s.slot == slot) {
            let surface = crate::tokenizer::char_slice(&turn.utterance, span.start, span.exclusive_end);
            if !values.iter().any(|v| v == surface) {
                continue;
            }
            if let Some(found) = aligned_tokens(input, u, span.start, span.exclusive_end) {
                return Some(found);
            }
        }
    }
    for (speaker, turn) in &turns {
        let u = exchange.utterance_index(*speaker);
        for v in values.iter().filter(|v| !v.is_empty()) {
            for (byte, _) in turn.utterance.rmatch_indices(v.as_str()) {
                let start = turn.utterance[..byte].chars().count();
                let end = start + v.chars().count();
                if let Some(found) = aligned_tokens(input, u, start, end) {
                    return Some(found);
                }
            }
        }
    }
    None
}

/// Supervision for one slot at one user turn.
#[allow(clippy::too_many_arguments)]
pub fn derive_labels(
    exchange: &Exchange<'_>,
    frame: &Frame,
    prev_state: &DialogueState,
    slot: &SlotSchema,
    service: &ServiceSchema,
    input: &EncoderInput,
) -> Result<LabelSet> {
    let state = frame
        .state
        .as_ref()
        .ok_or_else(|| Error::Labels(format!("frame `{}` of a user turn has no state", frame.service)))?;
    let update = compute_state_update(&prev_state.slot_values, &state.slot_values);
    let intent_index = intent_candidate_index(service, &state.active_intent).ok_or_else(|| {
        Error::Labels(format!("active intent `{}` is not an intent of `{}`", state.active_intent, service.service_name))
    })?;
    let mut labels = LabelSet {
        gate: Gate::None,
        categorical_index: None,
        span: None,
        span_supervised: false,
        requested: state.requested_slots.contains(&slot.name),
        intent_index,
    };
    let Some(values) = update.changed.get(&slot.name) else {
        return Ok(labels);
    };
    if values.iter().any(|v| v == DONTCARE) {
        labels.gate = Gate::Dontcare;
        return Ok(labels);
    }
    labels.gate = Gate::Ptr;
    if slot.is_categorical {
        let idx = values.iter().find_map(|v| slot.possible_values.iter().position(|p| p == v)).ok_or_else(|| {
            Error::Labels(format!("value {:?} of categorical slot `{}` is not a possible value", values, slot.name))
        })?;
        labels.categorical_index = Some(idx + 1);
    } else {
        labels.span = find_value_span(exchange, &service.service_name, &slot.name, values, input);
        labels.span_supervised = labels.span.is_some();
    }
    Ok(labels)
}

/// Builds the input for `slot` at the user turn of `exchange`.
pub fn assemble_for_slot(
    exchange: &Exchange<'_>,
    service: &ServiceSchema,
    slot: &SlotSchema,
    cfg: &AssemblyConfig,
    tokenizer: &dyn Tokenizer,
) -> Result<EncoderInput> {
    let question = build_question(slot, service, cfg.use_nld);
    assemble_input(&question.text, &exchange.utterances(), &service.intents, slot, cfg, tokenizer)
}

/// Stable 64-bit FNV-1a, used to derive per-dialogue seeds.
pub fn stable_hash(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

pub fn dialogue_seed(rng_seed: u64, dialogue_id: &str) -> u64 {
    rng_seed.wrapping_add(stable_hash(dialogue_id))
}

/// One example per (user turn, frame, slot); negatives are kept with the
/// configured probability. A uniform draw is consumed for every candidate
/// so kept sets are nested across probabilities.
pub fn make_examples(
    dialogue: &Dialogue,
    schemas: &SchemaIndex,
    cfg: &AssemblyConfig,
    tokenizer: &dyn Tokenizer,
    rng_seed: u64,
) -> Result<Vec<TrainingExample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(dialogue_seed(rng_seed, &dialogue.dialogue_id));
    let mut prev: std::collections::HashMap<&str, DialogueState> = Default::default();
    let mut out = Vec::new();
    for t in dialogue.user_turns() {
        let exchange = Exchange::of(dialogue, t);
        let ctx = || format!("dialogue `{}` turn {t}", dialogue.dialogue_id);
        for frame in &exchange.user.frames {
            let service = schemas
                .get(&frame.service)
                .ok_or_else(|| Error::Labels(format!("no schema for service `{}`", frame.service)).context(ctx()))?;
            let prev_state = prev.get(frame.service.as_str()).cloned().unwrap_or_default();
            for slot in &service.slots {
                let draw: f64 = rng.gen();
                let input = assemble_for_slot(&exchange, service, slot, cfg, tokenizer).context_with(ctx)?;
                let labels = derive_labels(&exchange, frame, &prev_state, slot, service, &input)
                    .context_with(|| format!("{} slot `{}`", ctx(), slot.name))?;
                if labels.gate == Gate::None {
                    let p = if slot.is_categorical { cfg.cat_neg_sampling_prob } else { cfg.noncat_neg_sampling_prob };
                    if draw >= p {
                        continue;
                    }
                }
                out.push(TrainingExample {
                    input,
                    labels,
                    meta: ExampleMeta {
                        dialogue_id: dialogue.dialogue_id.clone(),
                        turn_index: t,
                        service: service.service_name.clone(),
                        slot: slot.name.clone(),
                        is_categorical: slot.is_categorical,
                        num_values: slot.possible_values.len(),
                    },
                });
            }
            if let Some(state) = &frame.state {
                prev.insert(frame.service.as_str(), state.clone());
            }
        }
    }
    Ok(out)
}

/// Examples for many dialogues, in dialogue order; parallel across
/// dialogues with per-dialogue seeds.
pub fn make_examples_all(
    dialogues: &[Dialogue],
    schemas: &SchemaIndex,
    cfg: &AssemblyConfig,
    tokenizer: &dyn Tokenizer,
    rng_seed: u64,
) -> Result<Vec<TrainingExample>> {
    use rayon::prelude::*;
    let per: Vec<Vec<TrainingExample>> =
        dialogues.par_iter().map(|d| make_examples(d, schemas, cfg, tokenizer, rng_seed)).collect::<Result<_>>()?;
    Ok(per.into_iter().flatten().collect())
}

#[derive(Serialize)]
struct DumpLine<'a> {
    meta: &'a ExampleMeta,
    token_ids: &'a [u32],
    labels: &'a LabelSet,
}

/// Writes one JSON object per example: `meta`, `token_ids`, `labels`.
pub fn write_examples_dump(path: impl AsRef<Path>, examples: &[TrainingExample]) -> Result<()> {
    let path = path.as_ref();
    let io = |e| Error::io(path, e);
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    for ex in examples {
        let line = DumpLine { meta: &ex.meta, token_ids: &ex.input.token_ids, labels: &ex.labels };
        serde_json::to_writer(&mut f, &line).expect("serializable");
        f.write_all(b"\n").map_err(io)?;
    }
    f.flush().map_err(io)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::{SlotValueMap, SpanAnnotation};
    use crate::tokenizer::{BasicTokenizer, Vocabulary};

    fn tok() -> BasicTokenizer {
        BasicTokenizer::new(Vocabulary::from_tokens(["none", "san", "francisco"]))
    }

    fn slot(name: &str, values: &[&str]) -> SlotSchema {
        SlotSchema {
            name: name.into(),
            description: format!("{name} description"),
            is_categorical: !values.is_empty(),
            possible_values: values.iter().map(|s| s.to_string()).collect(),
        }
    }

    fn service(slots: Vec<SlotSchema>) -> ServiceSchema {
        ServiceSchema {
            service_name: "Flights_1".into(),
            description: "flight booking service".into(),
            slots,
            intents: vec![
                IntentSchema {
                    name: "Search".into(),
                    description: "search flights".into(),
                    required_slots: vec![],
                    optional_slots: vec![],
                },
                IntentSchema {
                    name: "Book".into(),
                    description: "book a flight".into(),
                    required_slots: vec![],
                    optional_slots: vec![],
                },
            ],
        }
    }

    fn words(n: usize) -> String {
        (0..n).map(|i| format!("w{i}")).collect::<Vec<_>>().join(" ")
    }

    #[test]
    fn question_variants() {
        let s = SlotSchema {
            name: "origin".into(),
            description: "city of departure".into(),
            is_categorical: false,
            possible_values: vec![],
        };
        let mut svc = service(vec![]);
        svc.service_name = "Flights".into();
        assert_eq!(build_question(&s, &svc, true).text, "city of departure flight booking service");
        assert_eq!(build_question(&s, &svc, false).text, "origin Flights");
        let bare = SlotSchema { description: String::new(), ..s };
        let q = build_question(&bare, &svc, true);
        assert_eq!(q.text, "origin Flights");
        assert!(q.fell_back);
    }

    #[test]
    fn default_layout_positions() {
        let cfg = AssemblyConfig::default();
        let s = slot("dest", &[]);
        let history = [HistoryUtterance { speaker: Speaker::User, text: &words(20) }];
        let input = assemble_input(&words(6), &history, &service(vec![]).intents, &s, &cfg, &tok()).unwrap();
        assert_eq!(input.len(), 512);
        assert_eq!(input.token_ids[0], CLS);
        assert_eq!(input.question_range, 1..7);
        assert_eq!(input.token_ids[7], SEP);
        assert_eq!(input.history_range, 8..28);
        assert_eq!(input.token_ids[28], SEP);
        assert!(input.token_ids[29..250].iter().all(|&t| t == PAD));
        assert!(input.attention_mask[29..250].iter().all(|&m| m == 0));
        assert_eq!(input.int_positions[0], 250);
        assert_eq!(input.int_positions.len(), 3);
        assert!(input.pv_positions.is_empty());
    }

    #[test]
    fn long_history_is_truncated_from_the_front() {
        let cfg = AssemblyConfig::default();
        let text = words(400);
        let history = [HistoryUtterance { speaker: Speaker::User, text: &text }];
        let input = assemble_input(&words(6), &history, &[], &slot("d", &[]), &cfg, &tok()).unwrap();
        assert_eq!(input.question_range, 1..7);
        assert_eq!(input.history_range, 8..249);
        assert_eq!(input.token_ids[249], SEP);
        let last = input.alignment.last().unwrap();
        let first = input.alignment.first().unwrap();
        // the newest token survives, the oldest are gone
        assert_eq!(crate::tokenizer::char_slice(&text, last.char_start, last.char_end), "w399");
        assert_eq!(crate::tokenizer::char_slice(&text, first.char_start, first.char_end), "w159");
    }

    #[test]
    fn categorical_slot_has_none_plus_values() {
        let cfg = AssemblyConfig::default();
        let s = slot("class", &["economy", "business"]);
        let history = [HistoryUtterance { speaker: Speaker::User, text: "business please" }];
        let input = assemble_input("q", &history, &[], &s, &cfg, &tok()).unwrap();
        assert_eq!(input.pv_positions.len(), 3);
        assert_eq!(input.pv_positions[0], 300);
        assert!(input.pv_positions.iter().all(|&p| input.token_ids[p] == PV));

        let cls = AssemblyConfig { categorical_head: CategoricalHead::Cls, ..cfg };
        let input = assemble_input("q", &history, &[], &s, &cls, &tok()).unwrap();
        assert!(input.pv_positions.is_empty());
    }

    #[test]
    fn overflow_errors() {
        let cfg = AssemblyConfig { max_hist_len: 10, max_intent_len: 4, max_seq_len: 20, ..Default::default() };
        let s = slot("d", &[]);
        let h = [HistoryUtterance { speaker: Speaker::User, text: "hi" }];
        assert!(matches!(assemble_input(&words(8), &h, &[], &s, &cfg, &tok()), Err(Error::QuestionTooLong { .. })));
        assert!(matches!(
            assemble_input("q", &h, &service(vec![]).intents, &s, &cfg, &tok()),
            Err(Error::IntentRegionOverflow { .. })
        ));
        let many = slot("c", &["a b c", "d e f", "g h i"]);
        assert!(matches!(assemble_input("q", &h, &[], &many, &cfg, &tok()), Err(Error::SequenceOverflow { .. })));
    }

    fn user_turn(utterance: &str, spans: Vec<SpanAnnotation>, values: SlotValueMap, requested: &[&str]) -> Turn {
        Turn {
            speaker: Speaker::User,
            utterance: utterance.into(),
            frames: vec![Frame {
                service: "Flights_1".into(),
                spans,
                state: Some(DialogueState {
                    active_intent: "Book".into(),
                    requested_slots: requested.iter().map(|s| s.to_string()).collect(),
                    slot_values: values,
                }),
            }],
        }
    }

    #[test]
    fn labels_for_gate_statuses() {
        let cfg = AssemblyConfig::default();
        let price = slot("price", &["cheap", "expensive"]);
        let svc = service(vec![price.clone()]);
        let t = user_turn("anything", vec![], SlotValueMap::new(), &[]);
        let ex = Exchange { system: None, user: &t };
        let input = assemble_for_slot(&ex, &svc, &price, &cfg, &tok()).unwrap();
        let l = derive_labels(&ex, &t.frames[0], &DialogueState::default(), &price, &svc, &input).unwrap();
        assert_eq!(l.gate, Gate::None);
        assert!(!l.requested);
        assert_eq!(l.intent_index, 2);

        let t = user_turn("anything", vec![], SlotValueMap::from([("price", vec!["dontcare"])]), &["price"]);
        let ex = Exchange { system: None, user: &t };
        let l = derive_labels(&ex, &t.frames[0], &DialogueState::default(), &price, &svc, &input).unwrap();
        assert_eq!(l.gate, Gate::Dontcare);
        assert!(l.requested);
        assert_eq!(l.categorical_index, None);

        let t = user_turn("expensive", vec![], SlotValueMap::from([("price", vec!["expensive"])]), &[]);
        let ex = Exchange { system: None, user: &t };
        let l = derive_labels(&ex, &t.frames[0], &DialogueState::default(), &price, &svc, &input).unwrap();
        assert_eq!((l.gate, l.categorical_index), (Gate::Ptr, Some(2)));

        let t = user_turn("x", vec![], SlotValueMap::from([("price", vec!["free"])]), &[]);
        let ex = Exchange { system: None, user: &t };
        assert!(derive_labels(&ex, &t.frames[0], &DialogueState::default(), &price, &svc, &input).is_err());
    }

    #[test]
    fn span_label_aligns_with_annotation() {
        let cfg = AssemblyConfig::default();
        let dest = slot("dest", &[]);
        let svc = service(vec![dest.clone()]);
        let system = Turn { speaker: Speaker::System, utterance: "Where to?".into(), frames: vec![] };
        let user = user_turn(
            "I'm going to San Francisco today",
            vec![SpanAnnotation { slot: "dest".into(), start: 13, exclusive_end: 26 }],
            SlotValueMap::from([("dest", vec!["San Francisco"])]),
            &[],
        );
        let ex = Exchange { system: Some(&system), user: &user };
        let input = assemble_for_slot(&ex, &svc, &dest, &cfg, &tok()).unwrap();
        let l = derive_labels(&ex, &user.frames[0], &DialogueState::default(), &dest, &svc, &input).unwrap();
        assert_eq!(l.gate, Gate::Ptr);
        assert!(l.span_supervised);

        // oracle: re-scan the annotation offsets through the tokenizer
        let sys_tokens = tok().tokenize(&system.utterance).len();
        let user_tokens = tok().tokenize(&user.utterance);
        let first = user_tokens.iter().position(|t| t.char_start == 13).unwrap();
        let last = user_tokens.iter().position(|t| t.char_end == 26).unwrap();
        let base = input.history_range.start + sys_tokens;
        assert_eq!(l.span, Some((base + first, base + last)));
    }

    #[test]
    fn unfindable_span_is_unsupervised() {
        let cfg = AssemblyConfig::default();
        let dest = slot("dest", &[]);
        let svc = service(vec![dest.clone()]);
        let user = user_turn("take me there", vec![], SlotValueMap::from([("dest", vec!["Oakland"])]), &[]);
        let ex = Exchange { system: None, user: &user };
        let input = assemble_for_slot(&ex, &svc, &dest, &cfg, &tok()).unwrap();
        let l = derive_labels(&ex, &user.frames[0], &DialogueState::default(), &dest, &svc, &input).unwrap();
        assert_eq!(l.gate, Gate::Ptr);
        assert!(!l.span_supervised);
        assert_eq!(l.span, None);
    }

    fn negative_dialogue(n_slots: usize) -> (Dialogue, ServiceSchema) {
        let slots: Vec<SlotSchema> = (0..n_slots).map(|i| slot(&format!("s{i}"), &["a", "b"])).collect();
        let svc = service(slots);
        let d = Dialogue {
            dialogue_id: "neg".into(),
            services: vec!["Flights_1".into()],
            turns: vec![user_turn("hello", vec![], SlotValueMap::new(), &[])],
        };
        (d, svc)
    }

    #[test]
    fn positives_are_always_kept() {
        let s: Vec<SlotSchema> = (0..3).map(|i| slot(&format!("s{i}"), &["a", "b"])).collect();
        let svc = service(s);
        let d = Dialogue {
            dialogue_id: "pos".into(),
            services: vec!["Flights_1".into()],
            turns: vec![user_turn(
                "a b a",
                vec![],
                SlotValueMap::from([("s0", vec!["a"]), ("s1", vec!["b"]), ("s2", vec!["a"])]),
                &[],
            )],
        };
        let cfg = AssemblyConfig { cat_neg_sampling_prob: 0.0, ..Default::default() };
        let ex = make_examples(&d, &SchemaIndex::new(&[svc]), &cfg, &tok(), 1).unwrap();
        assert_eq!(ex.len(), 3);
    }

    #[test]
    fn negative_sampling_is_seeded_and_nested() {
        let (d, svc) = negative_dialogue(100);
        let idx = SchemaIndex::new(&[svc]);
        let run = |p: f64| {
            let cfg = AssemblyConfig { cat_neg_sampling_prob: p, ..Default::default() };
            make_examples(&d, &idx, &cfg, &tok(), 42).unwrap().into_iter().map(|e| e.meta.slot).collect::<Vec<_>>()
        };
        let kept = run(0.1);
        // pinned from the seeded ChaCha8 sampler
        assert_eq!(kept.len(), 9);
        assert_eq!(run(0.1), kept);
        assert!(run(0.0).is_empty());
        assert_eq!(run(1.0).len(), 100);
        let wider = run(0.3);
        assert!(kept.iter().all(|s| wider.contains(s)));
    }
}
