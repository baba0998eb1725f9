//! End-to-end helpers shared by the command line and the experiments:
//! vocabulary construction, tracking plus scoring, and reference baselines.

use std::collections::{BTreeSet, HashMap};

use crate::error::Result;
use crate::evaluation::{build_report, pair_predictions, JointMode, MetricReport};
use crate::schema::{Dialogue, DialogueState, SchemaIndex, ServiceSchema, SlotValueMap, Speaker};
use crate::tokenizer::{build_vocab, BasicTokenizer, NONE_TOKEN};
use crate::tracker::{SlotScorer, Tracker};

/// Every text the model reads: utterances, names, descriptions and the
/// literal NONE candidate.
pub fn corpus(schemas: &[ServiceSchema], dialogues: &[Dialogue]) -> Vec<String> {
    let mut out = vec![NONE_TOKEN.to_string()];
    for s in schemas {
        out.push(s.service_name.clone());
        out.push(s.description.clone());
        for slot in &s.slots {
            out.push(slot.name.clone());
            out.push(slot.description.clone());
            out.extend(slot.possible_values.iter().cloned());
        }
        for i in &s.intents {
            out.push(i.name.clone());
            out.push(i.description.clone());
        }
    }
    for d in dialogues {
        out.extend(d.turns.iter().map(|t| t.utterance.clone()));
    }
    out
}

pub fn build_tokenizer(schemas: &[ServiceSchema], dialogues: &[Dialogue], max_vocab: usize) -> Result<BasicTokenizer> {
    Ok(BasicTokenizer::new(build_vocab(&corpus(schemas, dialogues), max_vocab)?))
}

/// Tracks `gold` with `scorer` and scores the predictions.
pub fn evaluate(
    tracker: &Tracker<'_>,
    scorer: &dyn SlotScorer,
    gold: &[Dialogue],
    seen_services: &BTreeSet<String>,
    mode: JointMode,
) -> Result<(MetricReport, Vec<Dialogue>)> {
    let predicted = tracker.track_all(scorer, gold)?;
    let report = score_predictions(gold, &predicted, tracker.schemas, seen_services, mode)?;
    Ok((report, predicted))
}

pub fn score_predictions(
    gold: &[Dialogue],
    predicted: &[Dialogue],
    schemas: &SchemaIndex,
    seen_services: &BTreeSet<String>,
    mode: JointMode,
) -> Result<MetricReport> {
    build_report(&pair_predictions(gold, predicted)?, schemas, seen_services, mode)
}

/// Keeps only the frames of `services`, dropping dialogues left without any.
pub fn restrict_to_services(dialogues: &[Dialogue], services: &BTreeSet<String>) -> Vec<Dialogue> {
    dialogues
        .iter()
        .filter_map(|d| {
            let mut d = d.clone();
            for t in &mut d.turns {
                t.frames.retain(|f| services.contains(&f.service));
            }
            d.services.retain(|s| services.contains(s));
            let any = d.turns.iter().any(|t| t.speaker == Speaker::User && !t.frames.is_empty());
            any.then_some(d)
        })
        .collect()
}

fn with_states(gold: &[Dialogue], mut state_of: impl FnMut(&str) -> DialogueState) -> Vec<Dialogue> {
    gold.iter()
        .map(|d| {
            let mut d = d.clone();
            for t in d.turns.iter_mut().filter(|t| t.speaker == Speaker::User) {
                for f in &mut t.frames {
                    f.state = Some(state_of(&f.service));
                }
            }
            d
        })
        .collect()
}

/// Predicts no slot values, no requests and the NONE intent everywhere.
pub fn always_none_predictions(gold: &[Dialogue]) -> Vec<Dialogue> {
    with_states(gold, |_| DialogueState::default())
}

/// Predicts, in every frame, each slot's most frequent gold value over
/// `gold` itself (ties to the lexicographically smallest value).
pub fn majority_predictions(gold: &[Dialogue]) -> Vec<Dialogue> {
    let mut counts: HashMap<(String, String), HashMap<String, usize>> = HashMap::new();
    for d in gold {
        for t in d.turns.iter().filter(|t| t.speaker == Speaker::User) {
            for f in &t.frames {
                let Some(state) = &f.state else { continue };
                for (slot, values) in state.slot_values.iter() {
                    if let Some(v) = values.first() {
                        *counts.entry((f.service.clone(), slot.clone())).or_default().entry(v.clone()).or_default() +=
                            1;
                    }
                }
            }
        }
    }
    let mut per_service: HashMap<String, SlotValueMap> = HashMap::new();
    for ((service, slot), values) in counts {
        let best = values
            .into_iter()
            .max_by(|a, b| a.1.cmp(&b.1).then_with(|| b.0.cmp(&a.0)))
            .map(|(v, _)| v)
            .expect("non-empty counts");
        per_service.entry(service).or_default().insert(slot, vec![best]);
    }
    with_states(gold, |service| DialogueState {
        slot_values: per_service.get(service).cloned().unwrap_or_default(),
        ..Default::default()
    })
}
