use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use golomb::assembly::make_examples_all;
use golomb::config::RunConfig;
use golomb::evaluation::JointMode;
use golomb::model::GolombModel;
use golomb::pipeline::{build_tokenizer, evaluate, score_predictions};
use golomb::schema::{
    load_dialogues, load_split_dir, validate_dialogue, write_json, Dialogue, SchemaIndex, ServiceSchema,
};
use golomb::synth::synth_dataset;
use golomb::tokenizer::{BasicTokenizer, Tokenizer, Vocabulary};
use golomb::tracker::Tracker;
use golomb::training::{train as run_training, TrainOptions};
use serde_json::json;

use crate::{Failure, Outcome};

pub const RUN_CONFIG: &str = "run_config.json";
pub const VOCAB: &str = "vocab.txt";
pub const META: &str = "meta.json";
pub const TRAIN_LOG: &str = "train_log.jsonl";

fn required<'a>(p: &'a Option<PathBuf>, what: &str, flag: &str) -> Outcome<&'a Path> {
    p.as_deref().ok_or_else(|| Failure::Usage(format!("no {what} given; pass {flag} or set paths in the config")))
}

fn create_dir(dir: &Path) -> Outcome {
    std::fs::create_dir_all(dir).map_err(|e| Failure::Data(format!("cannot create {}: {e}", dir.display())))
}

fn echo_config(dir: &Path, cfg: &RunConfig) -> Outcome {
    create_dir(dir)?;
    write_json(dir.join(RUN_CONFIG), cfg)?;
    Ok(())
}

/// Loads a split directory and rejects dialogues that disagree with the schemas.
pub fn load_split(dir: &Path) -> Outcome<(Vec<ServiceSchema>, Vec<Dialogue>)> {
    if !dir.is_dir() {
        return Err(Failure::Data(format!("split directory {} does not exist", dir.display())));
    }
    let (schemas, dialogues) = load_split_dir(dir)?;
    if dialogues.is_empty() {
        return Err(Failure::Data(format!("{} holds no dialogues_*.json files", dir.display())));
    }
    check_dialogues(&dialogues, &schemas)?;
    Ok((schemas, dialogues))
}

fn check_dialogues(dialogues: &[Dialogue], schemas: &[ServiceSchema]) -> Outcome {
    let issues: Vec<_> = dialogues.iter().flat_map(|d| validate_dialogue(d, schemas)).collect();
    if let Some(first) = issues.first() {
        return Err(Failure::Data(format!("{} invalid annotation(s); first: {first}", issues.len())));
    }
    Ok(())
}

pub fn synth(cfg: &RunConfig) -> Outcome {
    let out = required(&cfg.paths.output_dir, "output directory", "--out")?;
    let ds = synth_dataset(&cfg.synth)?;
    for w in &ds.warnings {
        log::warn!("{w}");
    }
    ds.write(out, &cfg.synth)?;
    echo_config(out, cfg)?;
    println!(
        "wrote {} train and {} dev dialogues ({} unseen services) to {}",
        ds.train.dialogues.len(),
        ds.dev.dialogues.len(),
        ds.unseen_services.len(),
        out.display()
    );
    Ok(())
}

pub fn train(cfg: &RunConfig) -> Outcome {
    let train_dir = required(&cfg.paths.train_dir, "training split", "--train-dir")?;
    let model_dir = required(&cfg.paths.model_dir, "model directory", "--model-dir")?;
    let (schemas, dialogues) = load_split(train_dir)?;
    let dev = cfg.paths.dev_dir.as_deref().map(load_split).transpose()?;

    // Dev schemas join the vocabulary so unseen services' descriptions are
    // not reduced to unknown tokens; dev utterances stay out of it.
    let mut vocab_schemas = schemas.clone();
    if let Some((dev_schemas, _)) = &dev {
        vocab_schemas.extend(dev_schemas.iter().cloned());
    }
    let tokenizer = build_tokenizer(&vocab_schemas, &dialogues, cfg.encoder.vocab_size)?;
    let mut cfg = cfg.clone();
    cfg.encoder.vocab_size = tokenizer.vocab().len();

    let index = SchemaIndex::new(&schemas);
    let examples = make_examples_all(&dialogues, &index, &cfg.assembly, &tokenizer, cfg.train.seed)?;
    log::info!(
        "{} dialogues, {} services, {} training examples, vocabulary {}",
        dialogues.len(),
        schemas.len(),
        examples.len(),
        cfg.encoder.vocab_size
    );
    let mut model = GolombModel::init(cfg.model_config(), cfg.train.seed)?;

    echo_config(model_dir, &cfg)?;
    tokenizer.vocab().save(model_dir.join(VOCAB))?;
    let seen: BTreeSet<String> = schemas.iter().map(|s| s.service_name.clone()).collect();

    let dev_index = dev.as_ref().map(|(s, _)| SchemaIndex::new(s));
    let scorer = |m: &GolombModel| -> golomb::Result<f64> {
        let (dev_schemas_index, (_, dev_dialogues)) =
            (dev_index.as_ref().expect("dev present"), dev.as_ref().expect("dev present"));
        let tracker = Tracker {
            schemas: dev_schemas_index,
            assembly: &m.config.assembly,
            decoding: &cfg.decoding,
            tokenizer: &tokenizer,
        };
        Ok(evaluate(&tracker, m, dev_dialogues, &seen, JointMode::Fuzzy)?.0.joint_goal_accuracy)
    };
    let opts = TrainOptions {
        log_path: Some(model_dir.join(TRAIN_LOG)),
        checkpoint_dir: Some(model_dir.to_path_buf()),
        dev: dev.as_ref().map(|_| &scorer as &golomb::training::DevScorer<'_>),
    };
    let report = run_training(&mut model, &examples, &cfg.train, &opts)?;
    write_json(
        model_dir.join(META),
        &json!({
            "seen_services": seen,
            "examples": examples.len(),
            "best_epoch": report.best_epoch,
            "epochs": report.epochs,
        }),
    )?;
    let last = report.epochs.last().expect("at least one epoch");
    println!(
        "trained {} epochs ({} steps); final mean loss {:.4}; model in {}",
        report.epochs.len(),
        report.steps.len(),
        last.mean_loss.total,
        model_dir.display()
    );
    Ok(())
}

/// A trained model with the tokenizer and seen-service list it was built with.
pub struct LoadedModel {
    pub model: GolombModel,
    pub tokenizer: BasicTokenizer,
    pub seen: BTreeSet<String>,
}

pub fn load_model(model_dir: &Path, checkpoint: &str) -> Outcome<LoadedModel> {
    let ckpt = model_dir.join(checkpoint);
    if !ckpt.join("manifest.json").is_file() {
        return Err(Failure::Data(format!(
            "no checkpoint at {}; train first or choose --checkpoint final|best",
            ckpt.display()
        )));
    }
    let model = GolombModel::load(&ckpt)?;
    let tokenizer = BasicTokenizer::new(Vocabulary::load(model_dir.join(VOCAB))?);
    if tokenizer.vocab().len() != model.config.encoder.vocab_size {
        return Err(Failure::Data(format!(
            "{} has {} tokens but the model expects {}",
            model_dir.join(VOCAB).display(),
            tokenizer.vocab().len(),
            model.config.encoder.vocab_size
        )));
    }
    Ok(LoadedModel { model, tokenizer, seen: read_seen(model_dir)? })
}

fn read_seen(model_dir: &Path) -> Outcome<BTreeSet<String>> {
    let path = model_dir.join(META);
    let Ok(text) = std::fs::read_to_string(&path) else {
        return Ok(BTreeSet::new());
    };
    let meta: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))?;
    Ok(meta["seen_services"]
        .as_array()
        .map(|a| a.iter().filter_map(|v| v.as_str().map(String::from)).collect())
        .unwrap_or_default())
}

pub struct EvalArgs {
    pub checkpoint: String,
    pub predictions: Option<PathBuf>,
    pub strict: bool,
    pub report: Option<PathBuf>,
    pub top_slots: usize,
}

/// Prediction dump: a dialogue JSON file, or a split directory of them.
fn load_predictions(path: &Path) -> Outcome<Vec<Dialogue>> {
    if path.is_dir() {
        let mut out = Vec::new();
        for f in golomb::schema::dialogue_files(path)? {
            out.extend(load_dialogues(f)?);
        }
        Ok(out)
    } else if path.is_file() {
        Ok(load_dialogues(path)?)
    } else {
        Err(Failure::Data(format!("prediction file {} does not exist", path.display())))
    }
}

pub fn eval(cfg: &RunConfig, args: &EvalArgs) -> Outcome {
    let data_dir = required(&cfg.paths.dev_dir, "evaluation split", "--data-dir")?;
    let (schemas, gold) = load_split(data_dir)?;
    let index = SchemaIndex::new(&schemas);
    let mode = if args.strict { JointMode::Strict } else { JointMode::Fuzzy };
    let report = match &args.predictions {
        Some(p) => {
            let predicted = load_predictions(p)?;
            let seen = match &cfg.paths.model_dir {
                Some(m) => read_seen(m)?,
                None => BTreeSet::new(),
            };
            score_predictions(&gold, &predicted, &index, &seen, mode)?
        }
        None => {
            let model_dir = required(&cfg.paths.model_dir, "model directory", "--model-dir")?;
            let loaded = load_model(model_dir, &args.checkpoint)?;
            let tracker = Tracker {
                schemas: &index,
                assembly: &loaded.model.config.assembly,
                decoding: &cfg.decoding,
                tokenizer: &loaded.tokenizer,
            };
            evaluate(&tracker, &loaded.model, &gold, &loaded.seen, mode)?.0
        }
    };
    print!("{}", report.to_text(args.top_slots));
    let report_path = args.report.clone().or_else(|| cfg.paths.output_dir.as_ref().map(|d| d.join("report.json")));
    if let Some(path) = report_path {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            echo_config(parent, cfg)?;
        }
        write_json(&path, &report)?;
    }
    Ok(())
}

pub fn track(cfg: &RunConfig, checkpoint: &str, out: &Path) -> Outcome {
    let data_dir = required(&cfg.paths.dev_dir, "input split", "--data-dir")?;
    let model_dir = required(&cfg.paths.model_dir, "model directory", "--model-dir")?;
    let (schemas, dialogues) = load_split(data_dir)?;
    let index = SchemaIndex::new(&schemas);
    let loaded = load_model(model_dir, checkpoint)?;
    let tracker = Tracker {
        schemas: &index,
        assembly: &loaded.model.config.assembly,
        decoding: &cfg.decoding,
        tokenizer: &loaded.tokenizer,
    };
    let predicted = tracker.track_all(&loaded.model, &dialogues)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        echo_config(parent, cfg)?;
    }
    write_json(out, &predicted)?;
    println!("wrote predictions for {} dialogues to {}", predicted.len(), out.display());
    Ok(())
}
