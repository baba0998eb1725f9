//! Turn-level decoding of head outputs into dialogue states.

use std::collections::HashMap;

use ndarray::Array1;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::assembly::{assemble_for_slot, derive_labels, AssemblyConfig, EncoderInput, Exchange, Gate};
use crate::error::{Error, Result, ResultExt};
use crate::heads::{argmax, is_requested, HeadOutputs, SlotKind};
use crate::model::GolombModel;
use crate::schema::{
    apply_state_update, Dialogue, DialogueState, Frame, SchemaIndex, ServiceSchema, SlotSchema, SlotValueMap,
    StateUpdate, DONTCARE, NONE_INTENT,
};
use crate::tokenizer::{char_slice, Tokenizer};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodingConfig {
    /// Longest span, in tokens.
    pub max_span_len: usize,
}

impl Default for DecodingConfig {
    fn default() -> Self {
        DecodingConfig { max_span_len: 12 }
    }
}

impl DecodingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_span_len == 0 {
            return Err(Error::Config("max_span_len must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SlotAction {
    Skip,
    SetDontcare,
    SetValue(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SlotDecision {
    pub slot: String,
    pub action: SlotAction,
}

fn log_prob(p: f64) -> f64 {
    p.max(f64::MIN_POSITIVE).ln()
}

/// The token pair `(i, j)` maximising `log start[i] + log stop[j]` with
/// `i ≤ j < i + max_span_len`, both inside the history and in the same
/// utterance. Ties go to the smaller `i`, then the smaller `j`.
pub fn best_span(
    start: &Array1<f64>,
    stop: &Array1<f64>,
    input: &EncoderInput,
    cfg: &DecodingConfig,
) -> Result<(usize, usize)> {
    let h = input.history_range.clone();
    let mut best: Option<((usize, usize), f64)> = None;
    for i in h.clone() {
        let ui = input.alignment_of(i).map(|a| a.utterance);
        let ls = log_prob(start[i]);
        for j in i..h.end.min(i + cfg.max_span_len) {
            if input.alignment_of(j).map(|a| a.utterance) != ui {
                break;
            }
            let score = ls + log_prob(stop[j]);
            if best.is_none_or(|(_, b)| score > b) {
                best = Some(((i, j), score));
            }
        }
    }
    best.map(|(p, _)| p).ok_or_else(|| Error::Span("no feasible span in an empty history".into()))
}

/// Surface text of the best span, cut from the raw utterance.
pub fn extract_span_value(
    start: &Array1<f64>,
    stop: &Array1<f64>,
    input: &EncoderInput,
    cfg: &DecodingConfig,
    utterances: &[&str],
) -> Result<String> {
    let (i, j) = best_span(start, stop, input, cfg)?;
    let (a, b) = match (input.alignment_of(i), input.alignment_of(j)) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(Error::Span(format!("span ({i}, {j}) has no character alignment"))),
    };
    let text = utterances
        .get(a.utterance)
        .ok_or_else(|| Error::Span(format!("alignment refers to missing utterance {}", a.utterance)))?;
    Ok(char_slice(text, a.char_start, b.char_end).to_string())
}

pub fn decode_slot(
    outputs: &HeadOutputs,
    slot: &SlotSchema,
    input: &EncoderInput,
    cfg: &DecodingConfig,
    utterances: &[&str],
) -> Result<SlotDecision> {
    let action = match Gate::from_index(argmax(&outputs.gate)) {
        Gate::None => SlotAction::Skip,
        Gate::Dontcare => SlotAction::SetDontcare,
        Gate::Ptr if slot.is_categorical => {
            let dist = outputs
                .cat
                .as_ref()
                .ok_or_else(|| Error::Head(format!("no categorical output for `{}`", slot.name)))?;
            match argmax(dist) {
                0 => SlotAction::Skip,
                c => SlotAction::SetValue(
                    slot.possible_values
                        .get(c - 1)
                        .ok_or_else(|| Error::Head(format!("value index {c} out of range for `{}`", slot.name)))?
                        .clone(),
                ),
            }
        }
        Gate::Ptr => match (&outputs.start, &outputs.stop) {
            (Some(s), Some(e)) => SlotAction::SetValue(extract_span_value(s, e, input, cfg, utterances)?),
            _ => return Err(Error::Head(format!("no span output for `{}`", slot.name))),
        },
    };
    Ok(SlotDecision { slot: slot.name.clone(), action })
}

/// Folds a turn's decisions into the previous state. `intent` is the
/// chosen intent candidate name.
pub fn decode_turn(
    decisions: &[SlotDecision],
    intent: &str,
    requested: impl IntoIterator<Item = String>,
    prev: &DialogueState,
) -> DialogueState {
    let mut changed = SlotValueMap::new();
    for d in decisions {
        match &d.action {
            SlotAction::Skip => {}
            SlotAction::SetDontcare => changed.insert(d.slot.clone(), vec![DONTCARE.to_string()]),
            SlotAction::SetValue(v) => changed.insert(d.slot.clone(), vec![v.clone()]),
        }
    }
    DialogueState {
        active_intent: intent.to_string(),
        requested_slots: requested.into_iter().collect(),
        slot_values: apply_state_update(&prev.slot_values, &StateUpdate { changed }),
    }
}

/// Name of the intent candidate chosen from the average of the per-slot
/// intent distributions of one frame.
pub fn choose_intent<'a>(service: &'a ServiceSchema, dists: &[Array1<f64>]) -> &'a str {
    let Some(first) = dists.first() else {
        return NONE_INTENT;
    };
    let mut mean = Array1::<f64>::zeros(first.len());
    for d in dists {
        mean += d;
    }
    match argmax(&mean) {
        0 => NONE_INTENT,
        i => service.intents.get(i - 1).map_or(NONE_INTENT, |x| x.name.as_str()),
    }
}

/// What a scorer is asked about: one slot at one user turn.
pub struct SlotQuery<'a> {
    pub dialogue: &'a Dialogue,
    pub turn_index: usize,
    pub service: &'a ServiceSchema,
    pub slot: &'a SlotSchema,
    pub input: &'a EncoderInput,
}

/// Anything that produces head outputs for an assembled slot input.
pub trait SlotScorer: Sync {
    fn score(&self, query: &SlotQuery<'_>) -> Result<HeadOutputs>;
}

impl SlotScorer for GolombModel {
    fn score(&self, q: &SlotQuery<'_>) -> Result<HeadOutputs> {
        self.predict(
            q.input,
            SlotKind { is_categorical: q.slot.is_categorical, num_values: q.slot.possible_values.len() },
        )
    }
}

fn one_hot(len: usize, i: usize) -> Array1<f64> {
    let mut a = Array1::zeros(len);
    a[i] = 1.0;
    a
}

/// Emits one-hot distributions of the gold labels, derived from the gold
/// annotation of the queried dialogue.
#[derive(Debug, Default, Clone, Copy)]
pub struct OracleScorer;

/// Gold state of `service` at the last user turn before `turn`.
fn gold_previous_state(d: &Dialogue, turn: usize, service: &str) -> DialogueState {
    d.turns[..turn]
        .iter()
        .rev()
        .filter_map(|t| t.frame(service).and_then(|f| f.state.clone()))
        .next()
        .unwrap_or_default()
}

impl SlotScorer for OracleScorer {
    fn score(&self, q: &SlotQuery<'_>) -> Result<HeadOutputs> {
        let exchange = Exchange::of(q.dialogue, q.turn_index);
        let frame: &Frame = exchange
            .user
            .frame(&q.service.service_name)
            .ok_or_else(|| Error::Labels(format!("no gold frame for `{}`", q.service.service_name)))?;
        let prev = gold_previous_state(q.dialogue, q.turn_index, &q.service.service_name);
        let labels = derive_labels(&exchange, frame, &prev, q.slot, q.service, q.input)?;
        let n = q.input.len();
        let (mut cat, mut start, mut stop) = (None, None, None);
        if q.slot.is_categorical {
            cat = Some(one_hot(q.slot.possible_values.len() + 1, labels.categorical_index.unwrap_or(0)));
        } else {
            let (s, e) = labels.span.unwrap_or((q.input.history_range.start, q.input.history_range.start));
            start = Some(one_hot(n, s));
            stop = Some(one_hot(n, e));
        }
        Ok(HeadOutputs {
            gate: one_hot(3, labels.gate.index()),
            cat,
            cls_raw: None,
            start,
            stop,
            requested: one_hot(2, if labels.requested { 0 } else { 1 }),
            intent: (!q.input.int_positions.is_empty())
                .then(|| one_hot(q.input.int_positions.len(), labels.intent_index)),
        })
    }
}

/// Everything needed to turn raw dialogues into predicted states.
pub struct Tracker<'a> {
    pub schemas: &'a SchemaIndex,
    pub assembly: &'a AssemblyConfig,
    pub decoding: &'a DecodingConfig,
    pub tokenizer: &'a dyn Tokenizer,
}

impl Tracker<'_> {
    /// Predicted state of one frame, given the predicted previous state.
    pub fn predict_frame(
        &self,
        scorer: &dyn SlotScorer,
        dialogue: &Dialogue,
        turn_index: usize,
        service: &ServiceSchema,
        prev: &DialogueState,
    ) -> Result<DialogueState> {
        let exchange = Exchange::of(dialogue, turn_index);
        let utterances: Vec<&str> = exchange.utterances().iter().map(|u| u.text).collect();
        let mut decisions = Vec::with_capacity(service.slots.len());
        let mut intents = Vec::new();
        let mut requested = Vec::new();
        for slot in &service.slots {
            let input = assemble_for_slot(&exchange, service, slot, self.assembly, self.tokenizer)?;
            let outputs = scorer
                .score(&SlotQuery { dialogue, turn_index, service, slot, input: &input })
                .context_with(|| format!("slot `{}`", slot.name))?;
            decisions.push(decode_slot(&outputs, slot, &input, self.decoding, &utterances)?);
            if is_requested(&outputs.requested) {
                requested.push(slot.name.clone());
            }
            if let Some(d) = outputs.intent {
                intents.push(d);
            }
        }
        let intent = choose_intent(service, &intents);
        Ok(decode_turn(&decisions, intent, requested, prev))
    }

    /// A copy of `dialogue` whose user-frame states are the predictions.
    /// Each service accumulates against its own previously predicted state.
    pub fn track_dialogue(&self, scorer: &dyn SlotScorer, dialogue: &Dialogue) -> Result<Dialogue> {
        let mut out = dialogue.clone();
        let mut prev: HashMap<String, DialogueState> = HashMap::new();
        for t in dialogue.user_turns() {
            for (f, frame) in dialogue.turns[t].frames.iter().enumerate() {
                let ctx = || format!("dialogue `{}` turn {t} service `{}`", dialogue.dialogue_id, frame.service);
                let service = self
                    .schemas
                    .get(&frame.service)
                    .ok_or_else(|| Error::Schema {
                        service: frame.service.clone(),
                        message: "no schema for this service".into(),
                    })
                    .context_with(ctx)?;
                let p = prev.get(&frame.service).cloned().unwrap_or_default();
                let state = self.predict_frame(scorer, dialogue, t, service, &p).context_with(ctx)?;
                out.turns[t].frames[f].state = Some(state.clone());
                prev.insert(frame.service.clone(), state);
            }
        }
        Ok(out)
    }

    /// Tracks many dialogues in parallel, keeping input order.
    pub fn track_all(&self, scorer: &dyn SlotScorer, dialogues: &[Dialogue]) -> Result<Vec<Dialogue>> {
        dialogues.par_iter().map(|d| self.track_dialogue(scorer, d)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assembly::HistoryAlignment;
    use ndarray::arr1;

    /// History of tokens 2..9: utterance 0 covers tokens 2..5, utterance 1
    /// tokens 5..9; each token is one 2-char word plus a space.
    fn input() -> EncoderInput {
        let n = 10;
        let alignment = (2..9)
            .map(|t| {
                let (u, k) = if t < 5 { (0, t - 2) } else { (1, t - 5) };
                HistoryAlignment { token_index: t, utterance: u, char_start: 3 * k, char_end: 3 * k + 2 }
            })
            .collect();
        EncoderInput {
            token_ids: vec![4; n],
            attention_mask: vec![1; n],
            segment_ids: vec![0; n],
            cls_index: 0,
            question_range: 1..2,
            history_range: 2..9,
            int_positions: vec![],
            pv_positions: vec![],
            alignment,
        }
    }

    const UTTS: [&str; 2] = ["aa bb cc", "dd ee ff gg"];

    fn one_hot_full(i: usize) -> Array1<f64> {
        one_hot(10, i)
    }

    /// Brute force over every feasible pair with the documented tie-break.
    fn brute(start: &Array1<f64>, stop: &Array1<f64>, inp: &EncoderInput, max: usize) -> (usize, usize) {
        let mut pairs = vec![];
        for i in inp.history_range.clone() {
            for j in inp.history_range.clone() {
                let same = inp.alignment_of(i).unwrap().utterance == inp.alignment_of(j).unwrap().utterance;
                if i <= j && j - i < max && same {
                    pairs.push(((i, j), log_prob(start[i]) + log_prob(stop[j])));
                }
            }
        }
        let best = pairs.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
        pairs.iter().find(|p| p.1 == best).unwrap().0
    }

    #[test]
    fn one_hot_span_reads_surface_text() {
        let cfg = DecodingConfig::default();
        let v = extract_span_value(&one_hot_full(5), &one_hot_full(6), &input(), &cfg, &UTTS).unwrap();
        assert_eq!(v, "dd ee");
    }

    #[test]
    fn inverted_one_hots_pick_best_feasible_pair() {
        let cfg = DecodingConfig::default();
        let (s, e) = (one_hot_full(6), one_hot_full(5));
        assert_eq!(best_span(&s, &e, &input(), &cfg).unwrap(), brute(&s, &e, &input(), 12));
    }

    #[test]
    fn uniform_distributions_pick_first_token() {
        let mut u = Array1::zeros(10);
        u.slice_mut(ndarray::s![2..9]).fill(1.0 / 7.0);
        let cfg = DecodingConfig::default();
        assert_eq!(best_span(&u, &u, &input(), &cfg).unwrap(), (2, 2));
        assert_eq!(extract_span_value(&u, &u, &input(), &cfg, &UTTS).unwrap(), "aa");
    }

    #[test]
    fn span_length_limit_and_random_cases_match_brute_force() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let inp = input();
        for max in [1, 2, 12] {
            let cfg = DecodingConfig { max_span_len: max };
            for _ in 0..200 {
                let mut s = Array1::zeros(10);
                let mut e = Array1::zeros(10);
                for i in 2..9 {
                    s[i] = rng.gen::<f64>();
                    e[i] = rng.gen::<f64>();
                }
                s /= s.sum();
                e /= e.sum();
                let (i, j) = best_span(&s, &e, &inp, &cfg).unwrap();
                assert!(i <= j && j - i < max);
                assert_eq!((i, j), brute(&s, &e, &inp, max));
            }
        }
    }

    fn outputs(gate: usize, cat: Option<Array1<f64>>) -> HeadOutputs {
        HeadOutputs {
            gate: one_hot(3, gate),
            cat,
            cls_raw: None,
            start: Some(one_hot_full(2)),
            stop: Some(one_hot_full(3)),
            requested: arr1(&[0.5, 0.5]),
            intent: None,
        }
    }

    fn cat_slot() -> SlotSchema {
        SlotSchema {
            name: "class".into(),
            description: String::new(),
            is_categorical: true,
            possible_values: vec!["economy".into(), "business".into()],
        }
    }

    #[test]
    fn decode_slot_rules() {
        let cfg = DecodingConfig::default();
        let slot = cat_slot();
        let d = |o: HeadOutputs| decode_slot(&o, &slot, &input(), &cfg, &UTTS).unwrap().action;
        assert_eq!(d(outputs(0, Some(one_hot(3, 2)))), SlotAction::Skip);
        assert_eq!(d(outputs(1, Some(one_hot(3, 2)))), SlotAction::SetDontcare);
        assert_eq!(d(outputs(2, Some(one_hot(3, 2)))), SlotAction::SetValue("business".into()));
        assert_eq!(d(outputs(2, Some(one_hot(3, 0)))), SlotAction::Skip);
        let free = SlotSchema { is_categorical: false, possible_values: vec![], ..cat_slot() };
        let a = decode_slot(&outputs(2, None), &free, &input(), &cfg, &UTTS).unwrap().action;
        assert_eq!(a, SlotAction::SetValue("aa bb".into()));
    }

    #[test]
    fn decode_turn_folds_into_previous_state() {
        let mut prev = DialogueState::default();
        prev.slot_values.insert("city", vec!["paris".into()]);
        let skip = |s: &str| SlotDecision { slot: s.into(), action: SlotAction::Skip };
        let s = decode_turn(&[skip("city"), skip("date")], NONE_INTENT, vec![], &prev);
        assert_eq!(s.slot_values, prev.slot_values);
        assert!(s.requested_slots.is_empty());
        assert_eq!(s.active_intent, "NONE");

        let s = decode_turn(
            &[
                SlotDecision { slot: "city".into(), action: SlotAction::SetValue("rome".into()) },
                SlotDecision { slot: "date".into(), action: SlotAction::SetDontcare },
            ],
            "Book",
            vec!["price".to_string()],
            &prev,
        );
        assert_eq!(s.slot_values.get("city").unwrap(), ["rome"]);
        assert_eq!(s.slot_values.get("date").unwrap(), ["dontcare"]);
        assert!(s.requested_slots.contains("price"));
        assert_eq!(s.active_intent, "Book");
    }
}
