//! Interactive inspection: the user types the system and user sides of a
//! dialogue in turn; after each user utterance the decoded state and the
//! head probabilities behind it are printed.

use std::io::{BufRead, Write};
use std::path::Path;
use std::sync::Mutex;

use golomb::heads::HeadOutputs;
use golomb::schema::{load_schemas, Dialogue, DialogueState, Frame, SchemaIndex, ServiceSchema, Speaker, Turn};
use golomb::tracker::{DecodingConfig, SlotQuery, SlotScorer, Tracker};

use crate::commands::load_model;
use crate::{Failure, Outcome};

/// Forwards to the model and keeps every slot's head outputs.
struct Recording<'a> {
    inner: &'a dyn SlotScorer,
    seen: Mutex<Vec<(String, HeadOutputs)>>,
}

impl SlotScorer for Recording<'_> {
    fn score(&self, q: &SlotQuery<'_>) -> golomb::Result<HeadOutputs> {
        let out = self.inner.score(q)?;
        self.seen.lock().expect("not poisoned").push((q.slot.name.clone(), out.clone()));
        Ok(out)
    }
}

fn load_service(schemas: &Path, service: &str) -> Outcome<Vec<ServiceSchema>> {
    let file = if schemas.is_dir() { schemas.join("schema.json") } else { schemas.to_path_buf() };
    if !file.is_file() {
        return Err(Failure::Data(format!("schema file {} does not exist", file.display())));
    }
    let all = load_schemas(&file)?;
    if !all.iter().any(|s| s.service_name == service) {
        let names: Vec<_> = all.iter().map(|s| s.service_name.as_str()).collect();
        return Err(Failure::Usage(format!("unknown service `{service}`; available: {}", names.join(", "))));
    }
    Ok(all)
}

fn fmt_dist(d: &ndarray::Array1<f64>) -> String {
    d.iter().map(|p| format!("{p:.3}")).collect::<Vec<_>>().join(" ")
}

fn print_heads(
    schema: &ServiceSchema,
    recorded: &[(String, HeadOutputs)],
    out: &mut impl Write,
) -> std::io::Result<()> {
    writeln!(out, "  {:<24} {:>21}  {:>6}  categorical", "slot", "gate none/dc/ptr", "req")?;
    for (slot, h) in recorded {
        let cat = h.cat.as_ref().map(fmt_dist).unwrap_or_default();
        writeln!(out, "  {:<24} {:>21}  {:>6.3}  {}", slot, fmt_dist(&h.gate), h.requested[0], cat)?;
    }
    if let Some(first) = recorded.iter().find_map(|(_, h)| h.intent.as_ref()) {
        let n = recorded.iter().filter(|(_, h)| h.intent.is_some()).count() as f64;
        let mut mean = ndarray::Array1::<f64>::zeros(first.len());
        for d in recorded.iter().filter_map(|(_, h)| h.intent.as_ref()) {
            mean += d;
        }
        mean /= n;
        let names: Vec<&str> = std::iter::once("NONE").chain(schema.intents.iter().map(|i| i.name.as_str())).collect();
        let parts: Vec<String> = names.iter().zip(mean.iter()).map(|(n, p)| format!("{n}={p:.3}")).collect();
        writeln!(out, "  intents: {}", parts.join(" "))?;
    }
    Ok(())
}

fn print_state(state: &DialogueState, out: &mut impl Write) -> std::io::Result<()> {
    writeln!(out, "  active intent: {}", state.active_intent)?;
    let slots: Vec<String> = state.slot_values.iter().map(|(k, v)| format!("{k}={}", v.join("|"))).collect();
    writeln!(out, "  slot values: {}", if slots.is_empty() { "-".into() } else { slots.join(", ") })?;
    let req: Vec<&str> = state.requested_slots.iter().map(String::as_str).collect();
    writeln!(out, "  requested: {}", if req.is_empty() { "-".into() } else { req.join(", ") })
}

pub fn run(model_dir: &Path, checkpoint: &str, schemas: &Path, service: &str) -> Outcome {
    let loaded = load_model(model_dir, checkpoint)?;
    let all = load_service(schemas, service)?;
    let index = SchemaIndex::new(&all);
    let schema = index.get(service).expect("checked above").clone();
    let decoding = DecodingConfig::default();
    let tracker = Tracker {
        schemas: &index,
        assembly: &loaded.model.config.assembly,
        decoding: &decoding,
        tokenizer: &loaded.tokenizer,
    };
    let io_err = |e: std::io::Error| Failure::Data(format!("terminal: {e}"));
    let stdin = std::io::stdin();
    let mut out = std::io::stdout();
    writeln!(
        out,
        "tracking {service}; type the system utterance, then the user's (empty line for none). \
         :reset starts over, :quit exits."
    )
    .map_err(io_err)?;
    let mut dialogue = Dialogue { dialogue_id: "repl".into(), services: vec![service.to_string()], turns: Vec::new() };
    let mut prev = DialogueState::default();
    let mut lines = stdin.lock().lines();
    loop {
        let speaker = if dialogue.turns.len().is_multiple_of(2) { Speaker::System } else { Speaker::User };
        write!(out, "{}> ", speaker.to_string().to_lowercase()).map_err(io_err)?;
        out.flush().map_err(io_err)?;
        let Some(line) = lines.next() else { break };
        let line = line.map_err(io_err)?;
        match line.trim() {
            ":quit" | ":q" => break,
            ":reset" => {
                dialogue.turns.clear();
                prev = DialogueState::default();
                continue;
            }
            _ => {}
        }
        dialogue.turns.push(Turn {
            speaker,
            utterance: line.trim().to_string(),
            frames: vec![Frame { service: service.to_string(), spans: Vec::new(), state: None }],
        });
        if speaker == Speaker::System {
            continue;
        }
        let recorder = Recording { inner: &loaded.model, seen: Mutex::new(Vec::new()) };
        let turn = dialogue.turns.len() - 1;
        let state = tracker.predict_frame(&recorder, &dialogue, turn, &schema, &prev)?;
        print_heads(&schema, &recorder.seen.into_inner().expect("not poisoned"), &mut out).map_err(io_err)?;
        print_state(&state, &mut out).map_err(io_err)?;
        dialogue.turns[turn].frames[0].state = Some(state.clone());
        prev = state;
    }
    Ok(())
}
