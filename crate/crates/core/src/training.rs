//! Multi-task loss, type-pure batching, AdamW with gradient accumulation,
//! the training loop, and numerical gradient checking.

use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::Array1;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::assembly::{Gate, TrainingExample};
use crate::encoder::{backward_into, Mode};
use crate::error::{Error, Result};
use crate::heads::{cls_index_of_candidate, heads_backward, HeadOutputs, LogitGradients, SlotKind};
use crate::model::{GolombModel, ModelParams};
use crate::params::Parameters;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub grad_accum_steps: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    pub lr_schedule: LrSchedule,
    /// Leading fraction of the run over which the rate ramps up linearly
    /// from zero; 0 disables warmup.
    pub warmup_fraction: f64,
}

/// Learning rate over the optimizer steps of a run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    /// `learning_rate` at every step.
    #[default]
    Constant,
    /// Decays linearly from `learning_rate` towards zero over the run.
    Linear,
}

impl LrSchedule {
    /// Rate for step `step` (0-based) of `total`, after `warmup` ramp-up steps.
    pub fn rate(self, base: f64, step: usize, total: usize, warmup: usize) -> f64 {
        if step < warmup {
            return base * (step + 1) as f64 / warmup as f64;
        }
        match self {
            LrSchedule::Constant => base,
            LrSchedule::Linear => {
                let span = total.saturating_sub(warmup).max(1);
                base * (1.0 - (step - warmup) as f64 / span as f64)
            }
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 3.5e-5,
            weight_decay: 0.01,
            epochs: 5,
            batch_size: 8,
            grad_accum_steps: 12,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            adam_epsilon: 1e-8,
            lr_schedule: LrSchedule::Constant,
            warmup_fraction: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.grad_accum_steps == 0 {
            return Err(Error::Config("epochs, batch_size and grad_accum_steps must be positive".into()));
        }
        if self.learning_rate < 0.0 || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!("learning_rate {} must be non-negative", self.learning_rate)));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(Error::Config(format!("warmup_fraction {} must be in [0, 1)", self.warmup_fraction)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.adam_epsilon <= 0.0 {
            return Err(Error::Config("invalid Adam coefficients".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub gate: f64,
    pub categorical: f64,
    pub span_start: f64,
    pub span_stop: f64,
    pub requested: f64,
    pub intent: f64,
}

impl LossBreakdown {
    fn add(&mut self, o: &LossBreakdown) {
        self.total += o.total;
        self.gate += o.gate;
        self.categorical += o.categorical;
        self.span_start += o.span_start;
        self.span_stop += o.span_stop;
        self.requested += o.requested;
        self.intent += o.intent;
    }

    fn scaled(mut self, f: f64) -> Self {
        for v in [
            &mut self.total,
            &mut self.gate,
            &mut self.categorical,
            &mut self.span_start,
            &mut self.span_stop,
            &mut self.requested,
            &mut self.intent,
        ] {
            *v *= f;
        }
        self
    }
}

/// Negative log of a probability; zero probability gives a large finite value.
fn nll(p: f64) -> f64 {
    -p.max(f64::MIN_POSITIVE).ln()
}

fn prob_at(dist: &Array1<f64>, i: usize, what: &str) -> Result<f64> {
    dist.get(i)
        .copied()
        .ok_or_else(|| Error::Training(format!("{what} label {i} is outside a distribution of {}", dist.len())))
}

/// Gold indices for each applicable head.
struct Targets {
    gate: usize,
    cat: Option<usize>,
    span: Option<(usize, usize)>,
    requested: usize,
    intent: Option<usize>,
}

fn targets(example: &TrainingExample, outputs: &HeadOutputs) -> Result<Targets> {
    let l = &example.labels;
    let ptr = l.gate == Gate::Ptr;
    let cat = if example.meta.is_categorical && ptr {
        let c = l
            .categorical_index
            .ok_or_else(|| Error::Training("categorical ptr example without a value label".into()))?;
        if outputs.cat.is_none() {
            return Err(Error::Training("categorical example without a categorical output".into()));
        }
        Some(c)
    } else {
        None
    };
    let span = if !example.meta.is_categorical && ptr && l.span_supervised {
        let s = l.span.ok_or_else(|| Error::Training("supervised span example without a span".into()))?;
        if outputs.start.is_none() {
            return Err(Error::Training("span example without span outputs".into()));
        }
        Some(s)
    } else {
        None
    };
    Ok(Targets {
        gate: l.gate.index(),
        cat,
        span,
        requested: if l.requested { 0 } else { 1 },
        intent: outputs.intent.as_ref().map(|_| l.intent_index),
    })
}

/// Sum of cross-entropy terms of the heads that apply to this example.
pub fn compute_loss(example: &TrainingExample, outputs: &HeadOutputs) -> Result<LossBreakdown> {
    let t = targets(example, outputs)?;
    let mut b = LossBreakdown {
        gate: nll(prob_at(&outputs.gate, t.gate, "gate")?),
        requested: nll(prob_at(&outputs.requested, t.requested, "requested")?),
        ..Default::default()
    };
    if let (Some(c), Some(d)) = (t.cat, &outputs.cat) {
        b.categorical = nll(prob_at(d, c, "categorical")?);
    }
    if let (Some((s, e)), Some(sd), Some(ed)) = (t.span, &outputs.start, &outputs.stop) {
        b.span_start = nll(prob_at(sd, s, "span start")?);
        b.span_stop = nll(prob_at(ed, e, "span stop")?);
    }
    if let (Some(i), Some(d)) = (t.intent, &outputs.intent) {
        b.intent = nll(prob_at(d, i, "intent")?);
    }
    b.total = b.gate + b.categorical + b.span_start + b.span_stop + b.requested + b.intent;
    Ok(b)
}

fn minus_onehot(dist: &Array1<f64>, i: usize) -> Array1<f64> {
    let mut g = dist.clone();
    g[i] -= 1.0;
    g
}

/// Gradients of [`compute_loss`] with respect to every head's logits.
pub fn logit_gradients(example: &TrainingExample, outputs: &HeadOutputs) -> Result<LogitGradients> {
    let t = targets(example, outputs)?;
    let cat = match (t.cat, &outputs.cls_raw, &outputs.cat) {
        (Some(c), Some(raw), _) => Some(minus_onehot(raw, cls_index_of_candidate(c, raw.len() - 1))),
        (Some(c), None, Some(d)) => Some(minus_onehot(d, c)),
        _ => None,
    };
    let (start, stop) = match (t.span, &outputs.start, &outputs.stop) {
        (Some((s, e)), Some(sd), Some(ed)) => (Some(minus_onehot(sd, s)), Some(minus_onehot(ed, e))),
        _ => (None, None),
    };
    Ok(LogitGradients {
        gate: minus_onehot(&outputs.gate, t.gate),
        cat,
        start,
        stop,
        requested: minus_onehot(&outputs.requested, t.requested),
        intent: match (t.intent, &outputs.intent) {
            (Some(i), Some(d)) => Some(minus_onehot(d, i)),
            _ => None,
        },
    })
}

pub fn slot_kind(example: &TrainingExample) -> SlotKind {
    SlotKind { is_categorical: example.meta.is_categorical, num_values: example.meta.num_values }
}

/// Loss of one example under a given dropout seed.
pub fn example_loss(model: &GolombModel, example: &TrainingExample, dropout_seed: u64) -> Result<LossBreakdown> {
    let (outputs, _) = model.forward(&example.input, slot_kind(example), Mode::Train { seed: dropout_seed })?;
    compute_loss(example, &outputs)
}

/// Loss and its gradient with respect to every parameter, added into `grads`.
pub fn accumulate_example_gradients(
    model: &GolombModel,
    example: &TrainingExample,
    dropout_seed: u64,
    grads: &mut ModelParams,
) -> Result<LossBreakdown> {
    let (outputs, enc) = model.forward(&example.input, slot_kind(example), Mode::Train { seed: dropout_seed })?;
    let loss = compute_loss(example, &outputs)?;
    let dl = logit_gradients(example, &outputs)?;
    let dstates = heads_backward(&enc.token_states, &example.input, &model.params.heads, &dl, &mut grads.heads);
    backward_into(&example.input, &enc, &model.params.encoder, &model.config.encoder, &dstates, &mut grads.encoder)?;
    Ok(loss)
}

fn mix(a: u64, b: u64) -> u64 {
    // splitmix64 finaliser over the combined words
    let mut z = a ^ b.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Dropout seed for an example, fixed by run seed, epoch and example index.
pub fn dropout_seed(seed: u64, epoch: usize, example: usize) -> u64 {
    mix(mix(seed, epoch as u64), example as u64)
}

/// Summed (not averaged) losses and gradients over `items`, computed in
/// parallel and reduced in order.
pub fn sum_gradients(
    model: &GolombModel,
    examples: &[TrainingExample],
    items: &[(usize, u64)],
) -> Result<(LossBreakdown, ModelParams)> {
    let parts: Vec<(LossBreakdown, ModelParams)> = items
        .par_iter()
        .map(|&(i, seed)| {
            let mut g = model.params.zeros_like();
            let loss = accumulate_example_gradients(model, &examples[i], seed, &mut g)?;
            Ok((loss, g))
        })
        .collect::<Result<_>>()?;
    let mut total = LossBreakdown::default();
    let mut grads = model.params.zeros_like();
    for (l, g) in &parts {
        total.add(l);
        grads.add_scaled(g, 1.0);
    }
    Ok((total, grads))
}

/// Batches of example indices, each holding only categorical or only
/// non-categorical examples. Order within each type is shuffled by `seed`;
/// the two batch streams are interleaved in proportion to their sizes.
pub fn build_batches(examples: &[TrainingExample], batch_size: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cat: Vec<usize> = (0..examples.len()).filter(|&i| examples[i].meta.is_categorical).collect();
    let mut noncat: Vec<usize> = (0..examples.len()).filter(|&i| !examples[i].meta.is_categorical).collect();
    cat.shuffle(&mut rng);
    noncat.shuffle(&mut rng);
    let chunk = |v: Vec<usize>| -> Vec<Vec<usize>> { v.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect() };
    let (cb, nb) = (chunk(cat), chunk(noncat));
    // position of batch i of n is (i + 0.5) / n; merge by position
    let mut keyed: Vec<(f64, u8, Vec<usize>)> = Vec::with_capacity(cb.len() + nb.len());
    for (ty, batches) in [(0u8, cb), (1u8, nb)] {
        let n = batches.len() as f64;
        for (i, b) in batches.into_iter().enumerate() {
            keyed.push(((i as f64 + 0.5) / n, ty, b));
        }
    }
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    keyed.into_iter().map(|(_, _, b)| b).collect()
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub cfg: TrainConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    pub steps: u64,
}

impl AdamW {
    pub fn new(params: &impl Parameters, cfg: &TrainConfig) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.data.len()]).collect();
        AdamW { cfg: cfg.clone(), m: zeros.clone(), v: zeros, steps: 0 }
    }

    pub fn step<P: Parameters>(&mut self, params: &mut P, grads: &P) {
        self.step_with_rate(params, grads, self.cfg.learning_rate);
    }

    /// One update at learning rate `lr` instead of the configured one.
    pub fn step_with_rate<P: Parameters>(&mut self, params: &mut P, grads: &P, lr: f64) {
        self.steps += 1;
        let c = &self.cfg;
        let (b1, b2) = (c.beta1, c.beta2);
        let bc1 = 1.0 - b1.powi(self.steps as i32);
        let bc2 = 1.0 - b2.powi(self.steps as i32);
        let gts = grads.tensors();
        for (((p, g), m), v) in params.tensors_mut().into_iter().zip(gts).zip(&mut self.m).zip(&mut self.v) {
            let decay = if p.decay { c.weight_decay } else { 0.0 };
            for (i, w) in p.data.iter_mut().enumerate() {
                let gi = g.data[i];
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                let update = (m[i] / bc1) / ((v[i] / bc2).sqrt() + c.adam_epsilon);
                *w -= lr * (update + decay * *w);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub epoch: usize,
    pub examples: usize,
    pub learning_rate: f64,
    pub loss: LossBreakdown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: LossBreakdown,
    pub dev_score: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: Vec<StepLog>,
    pub epochs: Vec<EpochLog>,
    pub best_epoch: Option<usize>,
}

/// Scores the model on held-out data; higher is better.
pub type DevScorer<'a> = dyn Fn(&GolombModel) -> Result<f64> + Sync + 'a;

#[derive(Default)]
pub struct TrainOptions<'a> {
    /// JSON-lines log of steps and epochs.
    pub log_path: Option<PathBuf>,
    /// Receives `final/` and, with a dev scorer, `best/` checkpoints.
    pub checkpoint_dir: Option<PathBuf>,
    pub dev: Option<&'a DevScorer<'a>>,
}

fn batch_description(examples: &[TrainingExample], batch: &[usize]) -> String {
    batch
        .iter()
        .map(|&i| {
            let m = &examples[i].meta;
            format!("{}#{}:{}/{}", m.dialogue_id, m.turn_index, m.service, m.slot)
        })
        .collect::<Vec<_>>()
        .join(", ")
}

fn write_log_line(
    f: &mut Option<std::io::BufWriter<std::fs::File>>,
    path: &Path,
    value: &impl Serialize,
) -> Result<()> {
    if let Some(f) = f {
        serde_json::to_writer(&mut *f, value).expect("serializable");
        f.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        f.flush().map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Runs `cfg.epochs` passes; every `grad_accum_steps` batches (and at the
/// end of each epoch) one optimizer step is taken on the mean gradient of
/// all examples in the group.
pub fn train(
    model: &mut GolombModel,
    examples: &[TrainingExample],
    cfg: &TrainConfig,
    opts: &TrainOptions<'_>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if examples.is_empty() {
        return Err(Error::Training("no training examples".into()));
    }
    let mut log = match &opts.log_path {
        Some(p) => Some(std::io::BufWriter::new(std::fs::File::create(p).map_err(|e| Error::io(p, e))?)),
        None => None,
    };
    let log_path = opts.log_path.clone().unwrap_or_default();
    let mut opt = AdamW::new(&model.params, cfg);
    let mut report = TrainReport::default();
    let mut best = f64::NEG_INFINITY;
    // the batch count depends only on the example mix, so it is the same every epoch
    let steps_per_epoch = build_batches(examples, cfg.batch_size, 0).len().div_ceil(cfg.grad_accum_steps);
    let total_steps = steps_per_epoch * cfg.epochs;
    let warmup_steps = (cfg.warmup_fraction * total_steps as f64).round() as usize;
    for epoch in 0..cfg.epochs {
        let batches = build_batches(examples, cfg.batch_size, mix(cfg.seed, epoch as u64));
        let mut epoch_loss = LossBreakdown::default();
        for group in batches.chunks(cfg.grad_accum_steps) {
            let mut group_loss = LossBreakdown::default();
            let mut grads = model.params.zeros_like();
            let mut count = 0usize;
            for batch in group {
                let items: Vec<(usize, u64)> = batch.iter().map(|&i| (i, dropout_seed(cfg.seed, epoch, i))).collect();
                let (loss, g) = sum_gradients(model, examples, &items)?;
                if !loss.total.is_finite() || !g.all_finite() {
                    return Err(Error::Training(format!(
                        "non-finite loss in epoch {epoch}, batch [{}]",
                        batch_description(examples, batch)
                    )));
                }
                group_loss.add(&loss);
                grads.add_scaled(&g, 1.0);
                count += batch.len();
            }
            grads.scale(1.0 / count as f64);
            let lr = cfg.lr_schedule.rate(cfg.learning_rate, opt.steps as usize, total_steps, warmup_steps);
            opt.step_with_rate(&mut model.params, &grads, lr);
            epoch_loss.add(&group_loss);
            let entry = StepLog {
                step: opt.steps,
                epoch,
                examples: count,
                learning_rate: lr,
                loss: group_loss.scaled(1.0 / count as f64),
            };
            log::debug!("step {} epoch {epoch} loss {:.4}", entry.step, entry.loss.total);
            write_log_line(&mut log, &log_path, &entry)?;
            report.steps.push(entry);
        }
        let dev_score = opts.dev.map(|f| f(model)).transpose()?;
        let e = EpochLog { epoch, mean_loss: epoch_loss.scaled(1.0 / examples.len() as f64), dev_score };
        log::info!(
            "epoch {epoch}: mean loss {:.4}{}",
            e.mean_loss.total,
            dev_score.map(|s| format!(", dev {s:.4}")).unwrap_or_default()
        );
        write_log_line(&mut log, &log_path, &e)?;
        report.epochs.push(e);
        if let Some(s) = dev_score {
            if s > best {
                best = s;
                report.best_epoch = Some(epoch);
                if let Some(dir) = &opts.checkpoint_dir {
                    model.save(dir.join("best"))?;
                }
            }
        }
    }
    if let Some(dir) = &opts.checkpoint_dir {
        model.save(dir.join("final"))?;
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradScope {
    All,
    /// Only head parameters are perturbed; the encoder is held fixed.
    HeadsOnly,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub worst_parameter: String,
    pub checked: usize,
}

/// Compares analytic gradients of the example loss with central finite
/// differences on `samples` randomly chosen parameters. Relative error is
/// `|a - n| / max(|a|, |n|, floor)`.
pub fn grad_check(
    model: &GolombModel,
    example: &TrainingExample,
    epsilon: f64,
    samples: usize,
    scope: GradScope,
    seed: u64,
) -> Result<GradCheckReport> {
    const FLOOR: f64 = 1e-6;
    let dropout = mix(seed, 0x6772_6164);
    let mut grads = model.params.zeros_like();
    accumulate_example_gradients(model, example, dropout, &mut grads)?;
    let total = model.params.num_scalars();
    let first = match scope {
        GradScope::All => 0,
        GradScope::HeadsOnly => model.params.encoder.num_scalars(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probe = model.clone();
    let mut report = GradCheckReport { max_relative_error: 0.0, worst_parameter: String::new(), checked: 0 };
    for _ in 0..samples {
        let i = rng.gen_range(first..total);
        let orig = probe.params.scalar(i).expect("in range");
        *probe.params.scalar_mut(i).expect("in range") = orig + epsilon;
        let up = example_loss(&probe, example, dropout)?.total;
        *probe.params.scalar_mut(i).expect("in range") = orig - epsilon;
        let down = example_loss(&probe, example, dropout)?.total;
        *probe.params.scalar_mut(i).expect("in range") = orig;
        let numeric = (up - down) / (2.0 * epsilon);
        let analytic = grads.scalar(i).expect("in range");
        let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR);
        if err > report.max_relative_error {
            report.max_relative_error = err;
            report.worst_parameter = format!("{}[{}]", model.params.scalar_owner(i).unwrap_or_default(), i);
        }
        report.checked += 1;
    }
    Ok(report)
}
