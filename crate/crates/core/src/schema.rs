//! Schemas, dialogues, dialogue states and state updates in the SGD JSON
//! format.
//!
//! Real SGD files load unchanged: fields this crate does not model (system
//! actions, service calls, result slots) are accepted and dropped.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize};

use crate::error::{Error, Result};

/// The literal value assigned to a slot the user is indifferent about.
pub const DONTCARE: &str = "dontcare";
/// Intent name used when no intent is active.
pub const NONE_INTENT: &str = "NONE";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotSchema {
    pub name: String,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub is_categorical: bool,
    #[serde(default)]
    pub possible_values: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntentSchema {
    pub name: String,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub required_slots: Vec<String>,
    /// SGD stores optional slots as a map from slot name to default value;
    /// only the names are kept.
    #[serde(default, deserialize_with = "names_from_list_or_map")]
    pub optional_slots: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServiceSchema {
    pub service_name: String,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub slots: Vec<SlotSchema>,
    #[serde(default)]
    pub intents: Vec<IntentSchema>,
}

fn names_from_list_or_map<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<String>, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum ListOrMap {
        List(Vec<String>),
        Map(BTreeMap<String, serde_json::Value>),
    }
    Ok(match ListOrMap::deserialize(d)? {
        ListOrMap::List(v) => v,
        ListOrMap::Map(m) => m.into_keys().collect(),
    })
}

impl ServiceSchema {
    pub fn slot(&self, name: &str) -> Option<&SlotSchema> {
        self.slots.iter().find(|s| s.name == name)
    }

    pub fn intent(&self, name: &str) -> Option<&IntentSchema> {
        self.intents.iter().find(|i| i.name == name)
    }

    /// Checks every structural invariant of the schema.
    pub fn validate(&self) -> Result<()> {
        let err = |message: String| Error::Schema { service: self.service_name.clone(), message };
        if self.service_name.is_empty() {
            return Err(err("empty service_name".into()));
        }
        let mut slot_names = HashSet::new();
        for slot in &self.slots {
            if !slot_names.insert(slot.name.as_str()) {
                return Err(err(format!("duplicate slot `{}`", slot.name)));
            }
            if slot.is_categorical && slot.possible_values.is_empty() {
                return Err(err(format!("categorical slot `{}` has no possible_values", slot.name)));
            }
            if !slot.is_categorical && !slot.possible_values.is_empty() {
                return Err(err(format!("non-categorical slot `{}` lists possible_values", slot.name)));
            }
        }
        let mut intent_names = HashSet::new();
        for intent in &self.intents {
            if !intent_names.insert(intent.name.as_str()) {
                return Err(err(format!("duplicate intent `{}`", intent.name)));
            }
            for s in intent.required_slots.iter().chain(&intent.optional_slots) {
                if !slot_names.contains(s.as_str()) {
                    return Err(err(format!("intent `{}` references unknown slot `{s}`", intent.name)));
                }
            }
        }
        Ok(())
    }
}

/// Looks services up by name.
#[derive(Debug, Clone, Default)]
pub struct SchemaIndex {
    services: HashMap<String, ServiceSchema>,
}

impl SchemaIndex {
    pub fn new(schemas: &[ServiceSchema]) -> Self {
        SchemaIndex { services: schemas.iter().map(|s| (s.service_name.clone(), s.clone())).collect() }
    }

    pub fn get(&self, service: &str) -> Option<&ServiceSchema> {
        self.services.get(service)
    }

    pub fn slot(&self, service: &str, slot: &str) -> Option<&SlotSchema> {
        self.get(service).and_then(|s| s.slot(slot))
    }

    pub fn is_categorical(&self, service: &str, slot: &str) -> bool {
        self.slot(service, slot).is_some_and(|s| s.is_categorical)
    }
}

/// Slot name to the list of acceptable surface forms; the first form is
/// canonical.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SlotValueMap(pub BTreeMap<String, Vec<String>>);

impl SlotValueMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, slot: impl Into<String>, values: Vec<String>) {
        assert!(!values.is_empty(), "slot value lists are never empty");
        self.0.insert(slot.into(), values);
    }

    pub fn get(&self, slot: &str) -> Option<&[String]> {
        self.0.get(slot).map(Vec::as_slice)
    }

    pub fn contains(&self, slot: &str) -> bool {
        self.0.contains_key(slot)
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Vec<String>)> {
        self.0.iter()
    }

    pub fn keys(&self) -> impl Iterator<Item = &String> {
        self.0.keys()
    }
}

impl<K: Into<String>, V: Into<String>, const N: usize> From<[(K, Vec<V>); N]> for SlotValueMap {
    fn from(entries: [(K, Vec<V>); N]) -> Self {
        let mut m = SlotValueMap::new();
        for (k, vs) in entries {
            m.insert(k, vs.into_iter().map(Into::into).collect());
        }
        m
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogueState {
    #[serde(default = "none_intent")]
    pub active_intent: String,
    #[serde(default)]
    pub requested_slots: BTreeSet<String>,
    #[serde(default)]
    pub slot_values: SlotValueMap,
}

fn none_intent() -> String {
    NONE_INTENT.to_string()
}

impl Default for DialogueState {
    fn default() -> Self {
        DialogueState {
            active_intent: none_intent(),
            requested_slots: BTreeSet::new(),
            slot_values: SlotValueMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpanAnnotation {
    pub slot: String,
    /// Character offset, inclusive.
    pub start: usize,
    /// Character offset, exclusive.
    pub exclusive_end: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Frame {
    pub service: String,
    #[serde(rename = "slots", default)]
    pub spans: Vec<SpanAnnotation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub state: Option<DialogueState>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Speaker {
    User,
    System,
}

impl fmt::Display for Speaker {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Speaker::User => "USER",
            Speaker::System => "SYSTEM",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub speaker: Speaker,
    pub utterance: String,
    #[serde(default)]
    pub frames: Vec<Frame>,
}

impl Turn {
    pub fn frame(&self, service: &str) -> Option<&Frame> {
        self.frames.iter().find(|f| f.service == service)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dialogue {
    pub dialogue_id: String,
    #[serde(default)]
    pub services: Vec<String>,
    pub turns: Vec<Turn>,
}

impl Dialogue {
    /// The system turn immediately preceding turn `index`, if any.
    pub fn preceding_system_turn(&self, index: usize) -> Option<&Turn> {
        index.checked_sub(1).map(|i| &self.turns[i]).filter(|t| t.speaker == Speaker::System)
    }

    /// Indices of user turns, in order.
    pub fn user_turns(&self) -> impl Iterator<Item = usize> + '_ {
        self.turns.iter().enumerate().filter(|(_, t)| t.speaker == Speaker::User).map(|(i, _)| i)
    }
}

/// Slots whose value list changed relative to the previous user-turn state
/// of the same service.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StateUpdate {
    pub changed: SlotValueMap,
}

impl StateUpdate {
    pub fn is_empty(&self) -> bool {
        self.changed.is_empty()
    }
}

/// Entries of `cur` that are new or differ from `prev`. Keys dropped from
/// `cur` are not reported: updates never delete.
pub fn compute_state_update(prev: &SlotValueMap, cur: &SlotValueMap) -> StateUpdate {
    let mut changed = SlotValueMap::new();
    for (slot, values) in cur.iter() {
        if prev.get(slot) != Some(values.as_slice()) {
            changed.insert(slot.clone(), values.clone());
        }
    }
    StateUpdate { changed }
}

pub fn apply_state_update(state: &SlotValueMap, update: &StateUpdate) -> SlotValueMap {
    let mut out = state.clone();
    for (slot, values) in update.changed.iter() {
        out.insert(slot.clone(), values.clone());
    }
    out
}

fn read_to_string(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn parse_schemas(text: &str, path: &Path) -> Result<Vec<ServiceSchema>> {
    let schemas: Vec<ServiceSchema> = serde_json::from_str(text).map_err(|e| Error::json(path, text, &e))?;
    let mut names = HashSet::new();
    for s in &schemas {
        s.validate()?;
        if !names.insert(s.service_name.as_str()) {
            return Err(Error::Schema { service: s.service_name.clone(), message: "service defined twice".into() });
        }
    }
    Ok(schemas)
}

pub fn load_schemas(path: impl AsRef<Path>) -> Result<Vec<ServiceSchema>> {
    let path = path.as_ref();
    parse_schemas(&read_to_string(path)?, path)
}

pub fn parse_dialogues(text: &str, path: &Path) -> Result<Vec<Dialogue>> {
    let dialogues: Vec<Dialogue> = serde_json::from_str(text).map_err(|e| Error::json(path, text, &e))?;
    for d in &dialogues {
        check_dialogue_structure(d)?;
    }
    Ok(dialogues)
}

pub fn load_dialogues(path: impl AsRef<Path>) -> Result<Vec<Dialogue>> {
    let path = path.as_ref();
    parse_dialogues(&read_to_string(path)?, path)
}

/// Dialogue files of an SGD-style split directory (`dialogues_*.json`),
/// in file-name order.
pub fn dialogue_files(dir: impl AsRef<Path>) -> Result<Vec<std::path::PathBuf>> {
    let dir = dir.as_ref();
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("dialogues_") && n.ends_with(".json"))
        })
        .collect();
    files.sort();
    Ok(files)
}

/// Loads `schema.json` and every dialogue file of a split directory.
pub fn load_split_dir(dir: impl AsRef<Path>) -> Result<(Vec<ServiceSchema>, Vec<Dialogue>)> {
    let dir = dir.as_ref();
    let schemas = load_schemas(dir.join("schema.json"))?;
    let mut dialogues = Vec::new();
    for f in dialogue_files(dir)? {
        dialogues.extend(load_dialogues(f)?);
    }
    Ok((schemas, dialogues))
}

pub fn write_json<T: Serialize + ?Sized>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(value).expect("serializable");
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Structural checks that need no schema: speaker alternation, frame
/// services, span bounds and which turns carry states.
pub fn check_dialogue_structure(d: &Dialogue) -> Result<()> {
    let err =
        |turn: Option<usize>, message: String| Error::Dialogue { dialogue_id: d.dialogue_id.clone(), turn, message };
    let services: HashSet<&str> = d.services.iter().map(String::as_str).collect();
    for (i, turn) in d.turns.iter().enumerate() {
        if i > 0 && d.turns[i - 1].speaker == turn.speaker {
            return Err(err(Some(i), format!("two consecutive {} turns", turn.speaker)));
        }
        let len = turn.utterance.chars().count();
        for frame in &turn.frames {
            if !services.contains(frame.service.as_str()) {
                return Err(err(Some(i), format!("frame service `{}` is not listed in services", frame.service)));
            }
            match (turn.speaker, &frame.state) {
                (Speaker::User, None) => {
                    return Err(err(Some(i), format!("user frame `{}` has no state", frame.service)))
                }
                (Speaker::System, Some(_)) => {
                    return Err(err(Some(i), format!("system frame `{}` carries a state", frame.service)))
                }
                _ => {}
            }
            if let Some(state) = &frame.state {
                if let Some((slot, _)) = state.slot_values.iter().find(|(_, v)| v.is_empty()) {
                    return Err(err(Some(i), format!("slot `{slot}` has an empty value list")));
                }
            }
            for span in &frame.spans {
                if span.start >= span.exclusive_end || span.exclusive_end > len {
                    return Err(err(
                        Some(i),
                        format!(
                            "span for `{}` [{}, {}) is outside the utterance (length {len})",
                            span.slot, span.start, span.exclusive_end
                        ),
                    ));
                }
            }
        }
    }
    Ok(())
}

/// A consistency problem found by [`validate_dialogue`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Issue {
    pub dialogue_id: String,
    pub turn: usize,
    pub service: String,
    pub message: String,
}

impl fmt::Display for Issue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} turn {} [{}]: {}", self.dialogue_id, self.turn, self.service, self.message)
    }
}

/// Checks states and spans against the schemas. Problems are collected, not
/// raised.
pub fn validate_dialogue(d: &Dialogue, schemas: &[ServiceSchema]) -> Vec<Issue> {
    let index = SchemaIndex::new(schemas);
    let mut issues = Vec::new();
    let mut prev: HashMap<&str, &SlotValueMap> = HashMap::new();
    for (t, turn) in d.turns.iter().enumerate() {
        for frame in &turn.frames {
            let mut issue = |message: String| {
                issues.push(Issue {
                    dialogue_id: d.dialogue_id.clone(),
                    turn: t,
                    service: frame.service.clone(),
                    message,
                })
            };
            let Some(schema) = index.get(&frame.service) else {
                issue("no schema for service".into());
                continue;
            };
            for span in &frame.spans {
                match schema.slot(&span.slot) {
                    None => issue(format!("span for unknown slot `{}`", span.slot)),
                    Some(s) if s.is_categorical => issue(format!("span for categorical slot `{}`", span.slot)),
                    _ => {}
                }
            }
            let Some(state) = &frame.state else { continue };
            if state.active_intent != NONE_INTENT && schema.intent(&state.active_intent).is_none() {
                issue(format!("unknown intent `{}`", state.active_intent));
            }
            for r in &state.requested_slots {
                if schema.slot(r).is_none() {
                    issue(format!("requested unknown slot `{r}`"));
                }
            }
            for (name, values) in state.slot_values.iter() {
                match schema.slot(name) {
                    None => issue(format!("unknown slot `{name}`")),
                    Some(slot) if slot.is_categorical => {
                        for v in values {
                            if v != DONTCARE && !slot.possible_values.contains(v) {
                                issue(format!("value `{v}` is not a possible value of `{name}`"));
                            }
                        }
                    }
                    _ => {}
                }
            }
            if let Some(p) = prev.get(frame.service.as_str()) {
                for k in p.keys() {
                    if !state.slot_values.contains(k) {
                        issue(format!("slot `{k}` was removed from the state"));
                    }
                }
            }
            prev.insert(frame.service.as_str(), &state.slot_values);
        }
    }
    issues
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schema_json() -> &'static str {
        r#"[{"service_name": "Flights_1", "description": "flight booking service",
            "slots": [
              {"name": "seating_class", "description": "cabin class", "is_categorical": true,
               "possible_values": ["economy", "business", "first"]},
              {"name": "origin", "description": "city of departure", "is_categorical": false,
               "possible_values": []}],
            "intents": [{"name": "SearchFlight", "description": "find flights",
               "required_slots": ["origin"], "optional_slots": {"seating_class": "economy"}}]}]"#
    }

    #[test]
    fn parses_schema_fields() {
        let s = parse_schemas(schema_json(), Path::new("s.json")).unwrap();
        assert_eq!(s.len(), 1);
        let svc = &s[0];
        assert_eq!(svc.slots.len(), 2);
        assert!(svc.slots[0].is_categorical);
        assert_eq!(svc.slots[0].possible_values, ["economy", "business", "first"]);
        assert_eq!(svc.intents[0].optional_slots, ["seating_class"]);
    }

    #[test]
    fn categorical_without_values_is_rejected() {
        let text =
            r#"[{"service_name": "A", "slots": [{"name": "x", "is_categorical": true, "possible_values": []}]}]"#;
        let err = parse_schemas(text, Path::new("s.json")).unwrap_err();
        assert!(err.to_string().contains("`x`"), "{err}");
    }

    #[test]
    fn duplicate_slot_is_rejected() {
        let text = r#"[{"service_name": "A", "slots": [{"name": "x"}, {"name": "x"}]}]"#;
        let err = parse_schemas(text, Path::new("s.json")).unwrap_err();
        assert!(err.to_string().contains("duplicate slot"), "{err}");
    }

    #[test]
    fn parse_error_reports_line() {
        let text = "[\n{\"service_name\": \"A\",\n \"slots\": [}]";
        match parse_schemas(text, Path::new("s.json")).unwrap_err() {
            Error::Parse { line, snippet, .. } => {
                assert_eq!(line, 3);
                assert!(snippet.contains("slots"));
            }
            e => panic!("unexpected {e}"),
        }
    }

    fn dialogue_json(end: usize, service: &str) -> String {
        format!(
            r#"[{{"dialogue_id": "d1", "services": ["Flights_1"], "turns": [
            {{"speaker": "USER", "utterance": "fly from Boston", "frames": [{{"service": "{service}",
              "slots": [{{"slot": "origin", "start": 9, "exclusive_end": {end}}}],
              "state": {{"active_intent": "SearchFlight", "requested_slots": [],
                        "slot_values": {{"origin": ["Boston"]}}}}}}]}},
            {{"speaker": "SYSTEM", "utterance": "Which class?", "frames": []}},
            {{"speaker": "USER", "utterance": "business", "frames": [{{"service": "Flights_1",
              "state": {{"active_intent": "SearchFlight", "requested_slots": [],
                        "slot_values": {{"origin": ["Boston"], "seating_class": ["business"]}}}}}}]}},
            {{"speaker": "SYSTEM", "utterance": "Done.", "frames": []}}]}}]"#
        )
    }

    #[test]
    fn loads_four_turn_dialogue() {
        let d = parse_dialogues(&dialogue_json(15, "Flights_1"), Path::new("d.json")).unwrap();
        assert_eq!(d[0].turns.len(), 4);
        let schemas = parse_schemas(schema_json(), Path::new("s.json")).unwrap();
        assert_eq!(validate_dialogue(&d[0], &schemas), vec![]);
    }

    #[test]
    fn span_beyond_utterance_is_rejected() {
        let err = parse_dialogues(&dialogue_json(16, "Flights_1"), Path::new("d.json")).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("d1") && msg.contains("turn 0"), "{msg}");
    }

    #[test]
    fn undeclared_frame_service_is_rejected() {
        let err = parse_dialogues(&dialogue_json(15, "Hotels_1"), Path::new("d.json")).unwrap_err();
        assert!(err.to_string().contains("Hotels_1"));
    }

    fn single_user_turn(slot_values: SlotValueMap) -> Dialogue {
        Dialogue {
            dialogue_id: "d".into(),
            services: vec!["Flights_1".into()],
            turns: vec![Turn {
                speaker: Speaker::User,
                utterance: "hi".into(),
                frames: vec![Frame {
                    service: "Flights_1".into(),
                    spans: vec![],
                    state: Some(DialogueState { slot_values, ..Default::default() }),
                }],
            }],
        }
    }

    #[test]
    fn unknown_slot_yields_one_issue() {
        let schemas = parse_schemas(schema_json(), Path::new("s.json")).unwrap();
        let d = single_user_turn(SlotValueMap::from([("altitude", vec!["high"])]));
        assert_eq!(validate_dialogue(&d, &schemas).len(), 1);
    }

    #[test]
    fn categorical_value_outside_schema_yields_one_issue() {
        let schemas = parse_schemas(schema_json(), Path::new("s.json")).unwrap();
        let d = single_user_turn(SlotValueMap::from([("seating_class", vec!["premium"])]));
        assert_eq!(validate_dialogue(&d, &schemas).len(), 1);
        let ok = single_user_turn(SlotValueMap::from([("seating_class", vec!["dontcare"])]));
        assert!(validate_dialogue(&ok, &schemas).is_empty());
    }

    #[test]
    fn state_update_examples() {
        let empty = SlotValueMap::new();
        let sf = SlotValueMap::from([("city", vec!["SF"])]);
        assert_eq!(compute_state_update(&empty, &sf).changed, sf);

        let both = SlotValueMap::from([("city", vec!["SF"]), ("time", vec!["7pm"])]);
        assert_eq!(compute_state_update(&sf, &both).changed, SlotValueMap::from([("time", vec!["7pm"])]));

        let la = SlotValueMap::from([("city", vec!["LA"])]);
        assert_eq!(compute_state_update(&sf, &la).changed, la);
        // no deletion semantics
        assert!(compute_state_update(&both, &sf).is_empty());
    }

    #[test]
    fn apply_update_examples() {
        let a1 = SlotValueMap::from([("a", vec!["1"])]);
        let a2 = SlotValueMap::from([("a", vec!["2"])]);
        let up = |m: &SlotValueMap| StateUpdate { changed: m.clone() };
        assert_eq!(apply_state_update(&SlotValueMap::new(), &up(&a1)), a1);
        assert_eq!(apply_state_update(&a1, &up(&a2)), a2);
        assert_eq!(apply_state_update(&a1, &StateUpdate::default()), a1);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn value_map() -> impl Strategy<Value = SlotValueMap> {
            prop::collection::btree_map("[a-e]", prop::collection::vec("[a-z]{1,3}", 1..3), 0..5).prop_map(SlotValueMap)
        }

        proptest! {
            #[test]
            fn update_of_self_is_empty(s in value_map()) {
                prop_assert!(compute_state_update(&s, &s).is_empty());
            }

            #[test]
            fn apply_inverts_compute(prev in value_map(), cur in value_map()) {
                let next = apply_state_update(&prev, &compute_state_update(&prev, &cur));
                for (k, v) in cur.iter() {
                    prop_assert_eq!(next.get(k), Some(v.as_slice()));
                }
                // growth-only states round-trip exactly
                let grown = apply_state_update(&prev, &StateUpdate { changed: cur.clone() });
                prop_assert_eq!(apply_state_update(&prev, &compute_state_update(&prev, &grown)), grown);
            }
        }
    }
}
