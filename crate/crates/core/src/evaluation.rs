//! Dialogue state tracking metrics and breakdown reports.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schema::{Dialogue, DialogueState, SchemaIndex, Speaker};

/// One user-turn frame with its predicted and gold states.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnPrediction {
    pub dialogue_id: String,
    pub turn_index: usize,
    pub service: String,
    pub predicted: DialogueState,
    pub gold: DialogueState,
}

fn normalize(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

/// `1 - levenshtein(a, b) / max(|a|, |b|)` over lowercased,
/// whitespace-normalized strings, lengths in characters.
pub fn fuzzy_score(predicted: &str, gold: &str) -> f64 {
    let (a, b) = (normalize(predicted), normalize(gold));
    let longest = a.chars().count().max(b.chars().count());
    if longest == 0 {
        return 1.0;
    }
    1.0 - strsim::levenshtein(&a, &b) as f64 / longest as f64
}

fn require_nonempty(preds: &[TurnPrediction]) -> Result<()> {
    if preds.is_empty() {
        return Err(Error::Evaluation("no predictions to score".into()));
    }
    Ok(())
}

pub fn active_intent_accuracy(preds: &[TurnPrediction]) -> Result<f64> {
    require_nonempty(preds)?;
    let correct = preds.iter().filter(|p| p.predicted.active_intent == p.gold.active_intent).count();
    Ok(correct as f64 / preds.len() as f64)
}

/// F1 of two sets; both empty scores 1.
pub fn set_f1(predicted: &BTreeSet<String>, gold: &BTreeSet<String>) -> f64 {
    if predicted.is_empty() && gold.is_empty() {
        return 1.0;
    }
    let tp = predicted.intersection(gold).count() as f64;
    if tp == 0.0 {
        return 0.0;
    }
    let p = tp / predicted.len() as f64;
    let r = tp / gold.len() as f64;
    2.0 * p * r / (p + r)
}

pub fn requested_slots_f1(preds: &[TurnPrediction]) -> Result<f64> {
    require_nonempty(preds)?;
    let sum: f64 = preds.iter().map(|p| set_f1(&p.predicted.requested_slots, &p.gold.requested_slots)).sum();
    Ok(sum / preds.len() as f64)
}

/// Score of one gold slot: exact match for categorical slots, best fuzzy
/// score over gold and predicted alternatives otherwise; 0 when missing.
pub fn slot_score(predicted: Option<&[String]>, gold: &[String], is_categorical: bool) -> f64 {
    let Some(predicted) = predicted else { return 0.0 };
    let mut best = 0.0f64;
    for p in predicted {
        for g in gold {
            let s = if is_categorical {
                if p == g {
                    1.0
                } else {
                    0.0
                }
            } else {
                fuzzy_score(p, g)
            };
            best = best.max(s);
        }
    }
    best
}

/// Per gold slot of a frame: (slot name, score).
fn frame_slot_scores(p: &TurnPrediction, schemas: &SchemaIndex) -> Vec<(String, f64)> {
    p.gold
        .slot_values
        .iter()
        .map(|(slot, gold)| {
            let cat = schemas.is_categorical(&p.service, slot);
            (slot.clone(), slot_score(p.predicted.slot_values.get(slot), gold, cat))
        })
        .collect()
}

/// Mean slot score over all (frame, gold slot) pairs; 1 when no frame has a
/// gold slot.
pub fn average_goal_accuracy(preds: &[TurnPrediction], schemas: &SchemaIndex) -> Result<f64> {
    require_nonempty(preds)?;
    let (sum, n) =
        preds.iter().flat_map(|p| frame_slot_scores(p, schemas)).fold((0.0, 0usize), |(s, n), (_, v)| (s + v, n + 1));
    Ok(if n == 0 { 1.0 } else { sum / n as f64 })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JointMode {
    /// Product of per-slot scores, giving fuzzy partial credit.
    Fuzzy,
    /// Every slot must score exactly 1.
    Strict,
}

/// Joint score of one frame: 0 if the slot-name sets differ, else the
/// product (fuzzy) or conjunction (strict) of slot scores.
pub fn frame_joint_score(p: &TurnPrediction, schemas: &SchemaIndex, mode: JointMode) -> f64 {
    let gold: BTreeSet<&String> = p.gold.slot_values.keys().collect();
    let pred: BTreeSet<&String> = p.predicted.slot_values.keys().collect();
    if gold != pred {
        return 0.0;
    }
    let scores = frame_slot_scores(p, schemas);
    match mode {
        JointMode::Fuzzy => scores.iter().map(|(_, s)| s).product(),
        JointMode::Strict => {
            if scores.iter().all(|(_, s)| *s == 1.0) {
                1.0
            } else {
                0.0
            }
        }
    }
}

pub fn joint_goal_accuracy(preds: &[TurnPrediction], schemas: &SchemaIndex, mode: JointMode) -> Result<f64> {
    require_nonempty(preds)?;
    let sum: f64 = preds.iter().map(|p| frame_joint_score(p, schemas, mode)).sum();
    Ok(sum / preds.len() as f64)
}

/// Domain of a service: its name up to the first underscore.
pub fn domain_of(service: &str) -> &str {
    service.split('_').next().unwrap_or(service)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupReport {
    pub name: String,
    /// `""` all seen, `"*"` all unseen, `"**"` both seen and unseen services.
    pub marker: String,
    pub frames: usize,
    pub joint_goal_accuracy: f64,
    pub average_goal_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotErrorRate {
    pub slot: String,
    pub occurrences: usize,
    pub errors: usize,
    pub error_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub active_intent_accuracy: f64,
    pub requested_slots_f1: f64,
    pub average_goal_accuracy: f64,
    /// Under `joint_mode`.
    pub joint_goal_accuracy: f64,
    pub joint_mode: JointMode,
    pub joint_goal_accuracy_fuzzy: f64,
    pub joint_goal_accuracy_strict: f64,
    pub frames: usize,
    pub domains: Vec<GroupReport>,
    pub services: Vec<GroupReport>,
    /// Sorted by descending error rate, then slot name.
    pub slot_errors: Vec<SlotErrorRate>,
}

fn marker(seen: usize, unseen: usize) -> &'static str {
    match (seen, unseen) {
        (_, 0) => "",
        (0, _) => "*",
        _ => "**",
    }
}

fn group_report(
    name: &str,
    marker: &str,
    preds: &[&TurnPrediction],
    schemas: &SchemaIndex,
    mode: JointMode,
) -> Result<GroupReport> {
    let owned: Vec<TurnPrediction> = preds.iter().map(|p| (*p).clone()).collect();
    Ok(GroupReport {
        name: name.to_string(),
        marker: marker.to_string(),
        frames: owned.len(),
        joint_goal_accuracy: joint_goal_accuracy(&owned, schemas, mode)?,
        average_goal_accuracy: average_goal_accuracy(&owned, schemas)?,
    })
}

/// All four metrics plus per-domain, per-service and per-slot breakdowns.
/// Services not in `seen_services` are marked unseen.
pub fn build_report(
    preds: &[TurnPrediction],
    schemas: &SchemaIndex,
    seen_services: &BTreeSet<String>,
    mode: JointMode,
) -> Result<MetricReport> {
    let fuzzy = joint_goal_accuracy(preds, schemas, JointMode::Fuzzy)?;
    let strict = joint_goal_accuracy(preds, schemas, JointMode::Strict)?;

    let mut by_service: BTreeMap<&str, Vec<&TurnPrediction>> = BTreeMap::new();
    for p in preds {
        by_service.entry(p.service.as_str()).or_default().push(p);
    }
    let mut by_domain: BTreeMap<&str, (Vec<&TurnPrediction>, BTreeSet<&str>)> = BTreeMap::new();
    for p in preds {
        let e = by_domain.entry(domain_of(&p.service)).or_default();
        e.0.push(p);
        e.1.insert(p.service.as_str());
    }
    let services = by_service
        .iter()
        .map(|(s, ps)| {
            let unseen = usize::from(!seen_services.contains(*s));
            group_report(s, marker(1 - unseen, unseen), ps, schemas, mode)
        })
        .collect::<Result<Vec<_>>>()?;
    let domains = by_domain
        .iter()
        .map(|(d, (ps, names))| {
            let seen = names.iter().filter(|n| seen_services.contains(**n)).count();
            group_report(d, marker(seen, names.len() - seen), ps, schemas, mode)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut counts: HashMap<String, (usize, usize)> = HashMap::new();
    for p in preds {
        for (slot, score) in frame_slot_scores(p, schemas) {
            let c = counts.entry(slot).or_default();
            c.0 += 1;
            if score < 1.0 {
                c.1 += 1;
            }
        }
    }
    let mut slot_errors: Vec<SlotErrorRate> = counts
        .into_iter()
        .map(|(slot, (occurrences, errors))| SlotErrorRate {
            slot,
            occurrences,
            errors,
            error_rate: errors as f64 / occurrences as f64,
        })
        .collect();
    slot_errors.sort_by(|a, b| b.error_rate.total_cmp(&a.error_rate).then_with(|| a.slot.cmp(&b.slot)));

    Ok(MetricReport {
        active_intent_accuracy: active_intent_accuracy(preds)?,
        requested_slots_f1: requested_slots_f1(preds)?,
        average_goal_accuracy: average_goal_accuracy(preds, schemas)?,
        joint_goal_accuracy: match mode {
            JointMode::Fuzzy => fuzzy,
            JointMode::Strict => strict,
        },
        joint_mode: mode,
        joint_goal_accuracy_fuzzy: fuzzy,
        joint_goal_accuracy_strict: strict,
        frames: preds.len(),
        domains,
        services,
        slot_errors,
    })
}

impl MetricReport {
    /// Human-readable rendering; at most `max_slots` slot error lines.
    pub fn to_text(&self, max_slots: usize) -> String {
        let mut s = String::new();
        let mode = match self.joint_mode {
            JointMode::Fuzzy => "fuzzy",
            JointMode::Strict => "strict",
        };
        let _ = writeln!(s, "frames                   {}", self.frames);
        let _ = writeln!(s, "active intent accuracy   {:.4}", self.active_intent_accuracy);
        let _ = writeln!(s, "requested slots F1       {:.4}", self.requested_slots_f1);
        let _ = writeln!(s, "average goal accuracy    {:.4}", self.average_goal_accuracy);
        let _ = writeln!(s, "joint goal accuracy      {:.4} ({mode})", self.joint_goal_accuracy);
        let _ = writeln!(
            s,
            "  fuzzy {:.4} / strict {:.4}",
            self.joint_goal_accuracy_fuzzy, self.joint_goal_accuracy_strict
        );
        let _ = writeln!(s, "\nper domain (* unseen, ** mixed)        joint    average");
        for d in &self.domains {
            let _ = writeln!(
                s,
                "  {:<36} {:.4}   {:.4}",
                format!("{}{}", d.name, d.marker),
                d.joint_goal_accuracy,
                d.average_goal_accuracy
            );
        }
        let _ = writeln!(s, "\nper service                             joint    average");
        for d in &self.services {
            let _ = writeln!(
                s,
                "  {:<36} {:.4}   {:.4}",
                format!("{}{}", d.name, d.marker),
                d.joint_goal_accuracy,
                d.average_goal_accuracy
            );
        }
        let _ = writeln!(s, "\nslots by error rate");
        for e in self.slot_errors.iter().take(max_slots) {
            let _ = writeln!(s, "  {:<36} {:>5.1}%  ({}/{})", e.slot, 100.0 * e.error_rate, e.errors, e.occurrences);
        }
        s
    }
}

/// Pairs every gold user-turn frame with the predicted frame at the same
/// dialogue, turn and service.
pub fn pair_predictions(gold: &[Dialogue], predicted: &[Dialogue]) -> Result<Vec<TurnPrediction>> {
    let by_id: HashMap<&str, &Dialogue> = predicted.iter().map(|d| (d.dialogue_id.as_str(), d)).collect();
    let mut out = Vec::new();
    for g in gold {
        let p = by_id
            .get(g.dialogue_id.as_str())
            .ok_or_else(|| Error::Evaluation(format!("no prediction for dialogue `{}`", g.dialogue_id)))?;
        for (t, turn) in g.turns.iter().enumerate() {
            if turn.speaker != Speaker::User {
                continue;
            }
            for frame in &turn.frames {
                let missing = || {
                    Error::Evaluation(format!(
                        "dialogue `{}` turn {t}: no predicted state for `{}`",
                        g.dialogue_id, frame.service
                    ))
                };
                let gold_state = frame.state.clone().ok_or_else(|| {
                    Error::Evaluation(format!(
                        "dialogue `{}` turn {t}: gold frame `{}` has no state",
                        g.dialogue_id, frame.service
                    ))
                })?;
                let predicted = p
                    .turns
                    .get(t)
                    .and_then(|pt| pt.frame(&frame.service))
                    .and_then(|f| f.state.clone())
                    .ok_or_else(missing)?;
                out.push(TurnPrediction {
                    dialogue_id: g.dialogue_id.clone(),
                    turn_index: t,
                    service: frame.service.clone(),
                    predicted,
                    gold: gold_state,
                });
            }
        }
    }
    Ok(out)
}
