//! A small BERT-style transformer encoder with a hand-written backward pass.
//!
//! Embeddings are the sum of token, learned position and segment tables,
//! followed by layer norm. Each layer is post-norm:
//!
//! ```text
//! x1 = LN(x + Dropout(MultiHeadAttention(x)))
//! y  = LN(x1 + Dropout(W2 · gelu(W1 · x1)))
//! ```
//!
//! Only positions with `attention_mask = 1` take part in the computation, so
//! masked positions neither attend nor are attended to. Their output rows are
//! zero and must not be read.

use ndarray::{s, Array1, Array2, ArrayView1, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::assembly::{EncoderInput, NUM_SEGMENTS};
use crate::error::{Error, Result};
use crate::params::{Parameters, TensorMut, TensorRef};

const LN_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub hidden_size: usize,
    pub num_heads: usize,
    pub ffn_size: usize,
    pub max_seq_len: usize,
    pub dropout: f64,
    pub vocab_size: usize,
    /// Standard deviation of the attention and feed-forward weights at init.
    pub init_std: f64,
    /// Standard deviation of the token, position and segment tables at init.
    pub embedding_init_std: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            num_layers: 2,
            hidden_size: 64,
            num_heads: 4,
            ffn_size: 256,
            max_seq_len: 512,
            dropout: 0.1,
            vocab_size: 4000,
            init_std: 0.02,
            embedding_init_std: 0.02,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 || self.hidden_size == 0 || self.num_heads == 0 || self.ffn_size == 0 {
            return Err(Error::Config("encoder dimensions must be positive".into()));
        }
        if !self.hidden_size.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "hidden_size {} is not divisible by num_heads {}",
                self.hidden_size, self.num_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} is outside [0, 1)", self.dropout)));
        }
        if !(self.init_std > 0.0 && self.init_std.is_finite())
            || !(self.embedding_init_std > 0.0 && self.embedding_init_std.is_finite())
        {
            return Err(Error::Config("init_std and embedding_init_std must be positive".into()));
        }
        if self.vocab_size == 0 || self.max_seq_len == 0 {
            return Err(Error::Config("vocab_size and max_seq_len must be positive".into()));
        }
        Ok(())
    }

    fn head_dim(&self) -> usize {
        self.hidden_size / self.num_heads
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub query_w: Array2<f64>,
    pub query_b: Array1<f64>,
    pub key_w: Array2<f64>,
    pub key_b: Array1<f64>,
    pub value_w: Array2<f64>,
    pub value_b: Array1<f64>,
    pub output_w: Array2<f64>,
    pub output_b: Array1<f64>,
    pub attn_norm_gain: Array1<f64>,
    pub attn_norm_bias: Array1<f64>,
    pub ffn_in_w: Array2<f64>,
    pub ffn_in_b: Array1<f64>,
    pub ffn_out_w: Array2<f64>,
    pub ffn_out_b: Array1<f64>,
    pub ffn_norm_gain: Array1<f64>,
    pub ffn_norm_bias: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub token_embeddings: Array2<f64>,
    pub position_embeddings: Array2<f64>,
    pub segment_embeddings: Array2<f64>,
    pub norm_gain: Array1<f64>,
    pub norm_bias: Array1<f64>,
    pub layers: Vec<LayerParams>,
}

fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    let dist = Normal::new(0.0, std).expect("valid std");
    Array2::from_shape_fn((rows, cols), |_| dist.sample(rng))
}

impl EncoderParams {
    /// Weights from zero-mean normals with the configured deviations (0.02
    /// by default); biases and norm offsets zero, norm gains one.
    pub fn init(cfg: &EncoderConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = cfg.hidden_size;
        let f = cfg.ffn_size;
        let token_embeddings = normal_matrix(&mut rng, cfg.vocab_size, h, cfg.embedding_init_std);
        let position_embeddings = normal_matrix(&mut rng, cfg.max_seq_len, h, cfg.embedding_init_std);
        let segment_embeddings = normal_matrix(&mut rng, NUM_SEGMENTS, h, cfg.embedding_init_std);
        let layers = (0..cfg.num_layers)
            .map(|_| LayerParams {
                query_w: normal_matrix(&mut rng, h, h, cfg.init_std),
                query_b: Array1::zeros(h),
                key_w: normal_matrix(&mut rng, h, h, cfg.init_std),
                key_b: Array1::zeros(h),
                value_w: normal_matrix(&mut rng, h, h, cfg.init_std),
                value_b: Array1::zeros(h),
                output_w: normal_matrix(&mut rng, h, h, cfg.init_std),
                output_b: Array1::zeros(h),
                attn_norm_gain: Array1::ones(h),
                attn_norm_bias: Array1::zeros(h),
                ffn_in_w: normal_matrix(&mut rng, h, f, cfg.init_std),
                ffn_in_b: Array1::zeros(f),
                ffn_out_w: normal_matrix(&mut rng, f, h, cfg.init_std),
                ffn_out_b: Array1::zeros(h),
                ffn_norm_gain: Array1::ones(h),
                ffn_norm_bias: Array1::zeros(h),
            })
            .collect();
        Ok(EncoderParams {
            token_embeddings,
            position_embeddings,
            segment_embeddings,
            norm_gain: Array1::ones(h),
            norm_bias: Array1::zeros(h),
            layers,
        })
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.fill(0.0);
        z
    }
}

fn tensor_2<'a>(name: String, a: &'a Array2<f64>, decay: bool) -> TensorRef<'a> {
    TensorRef { name, shape: a.shape().to_vec(), data: a.as_slice().expect("standard layout"), decay }
}

fn tensor_1<'a>(name: String, a: &'a Array1<f64>, decay: bool) -> TensorRef<'a> {
    TensorRef { name, shape: a.shape().to_vec(), data: a.as_slice().expect("standard layout"), decay }
}

fn tensor_2_mut<'a>(name: String, a: &'a mut Array2<f64>, decay: bool) -> TensorMut<'a> {
    let shape = a.shape().to_vec();
    TensorMut { name, shape, data: a.as_slice_mut().expect("standard layout"), decay }
}

fn tensor_1_mut<'a>(name: String, a: &'a mut Array1<f64>, decay: bool) -> TensorMut<'a> {
    let shape = a.shape().to_vec();
    TensorMut { name, shape, data: a.as_slice_mut().expect("standard layout"), decay }
}

macro_rules! layer_tensors {
    ($layer:expr, $prefix:expr, $t2:ident, $t1:ident) => {
        vec![
            $t2(format!("{}.attention.query.weight", $prefix), &$layer.query_w, true),
            $t1(format!("{}.attention.query.bias", $prefix), &$layer.query_b, false),
            $t2(format!("{}.attention.key.weight", $prefix), &$layer.key_w, true),
            $t1(format!("{}.attention.key.bias", $prefix), &$layer.key_b, false),
            $t2(format!("{}.attention.value.weight", $prefix), &$layer.value_w, true),
            $t1(format!("{}.attention.value.bias", $prefix), &$layer.value_b, false),
            $t2(format!("{}.attention.output.weight", $prefix), &$layer.output_w, true),
            $t1(format!("{}.attention.output.bias", $prefix), &$layer.output_b, false),
            $t1(format!("{}.attention.norm.gain", $prefix), &$layer.attn_norm_gain, false),
            $t1(format!("{}.attention.norm.bias", $prefix), &$layer.attn_norm_bias, false),
            $t2(format!("{}.ffn.in.weight", $prefix), &$layer.ffn_in_w, true),
            $t1(format!("{}.ffn.in.bias", $prefix), &$layer.ffn_in_b, false),
            $t2(format!("{}.ffn.out.weight", $prefix), &$layer.ffn_out_w, true),
            $t1(format!("{}.ffn.out.bias", $prefix), &$layer.ffn_out_b, false),
            $t1(format!("{}.ffn.norm.gain", $prefix), &$layer.ffn_norm_gain, false),
            $t1(format!("{}.ffn.norm.bias", $prefix), &$layer.ffn_norm_bias, false),
        ]
    };
}

macro_rules! layer_tensors_mut {
    ($layer:expr, $prefix:expr, $t2:ident, $t1:ident) => {
        vec![
            $t2(format!("{}.attention.query.weight", $prefix), &mut $layer.query_w, true),
            $t1(format!("{}.attention.query.bias", $prefix), &mut $layer.query_b, false),
            $t2(format!("{}.attention.key.weight", $prefix), &mut $layer.key_w, true),
            $t1(format!("{}.attention.key.bias", $prefix), &mut $layer.key_b, false),
            $t2(format!("{}.attention.value.weight", $prefix), &mut $layer.value_w, true),
            $t1(format!("{}.attention.value.bias", $prefix), &mut $layer.value_b, false),
            $t2(format!("{}.attention.output.weight", $prefix), &mut $layer.output_w, true),
            $t1(format!("{}.attention.output.bias", $prefix), &mut $layer.output_b, false),
            $t1(format!("{}.attention.norm.gain", $prefix), &mut $layer.attn_norm_gain, false),
            $t1(format!("{}.attention.norm.bias", $prefix), &mut $layer.attn_norm_bias, false),
            $t2(format!("{}.ffn.in.weight", $prefix), &mut $layer.ffn_in_w, true),
            $t1(format!("{}.ffn.in.bias", $prefix), &mut $layer.ffn_in_b, false),
            $t2(format!("{}.ffn.out.weight", $prefix), &mut $layer.ffn_out_w, true),
            $t1(format!("{}.ffn.out.bias", $prefix), &mut $layer.ffn_out_b, false),
            $t1(format!("{}.ffn.norm.gain", $prefix), &mut $layer.ffn_norm_gain, false),
            $t1(format!("{}.ffn.norm.bias", $prefix), &mut $layer.ffn_norm_bias, false),
        ]
    };
}

impl Parameters for EncoderParams {
    fn tensors(&self) -> Vec<TensorRef<'_>> {
        let mut out = vec![
            tensor_2("encoder.embeddings.token".into(), &self.token_embeddings, true),
            tensor_2("encoder.embeddings.position".into(), &self.position_embeddings, true),
            tensor_2("encoder.embeddings.segment".into(), &self.segment_embeddings, true),
            tensor_1("encoder.embeddings.norm.gain".into(), &self.norm_gain, false),
            tensor_1("encoder.embeddings.norm.bias".into(), &self.norm_bias, false),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            out.extend(layer_tensors!(l, format!("encoder.layers.{i}"), tensor_2, tensor_1));
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<TensorMut<'_>> {
        let mut out = vec![
            tensor_2_mut("encoder.embeddings.token".into(), &mut self.token_embeddings, true),
            tensor_2_mut("encoder.embeddings.position".into(), &mut self.position_embeddings, true),
            tensor_2_mut("encoder.embeddings.segment".into(), &mut self.segment_embeddings, true),
            tensor_1_mut("encoder.embeddings.norm.gain".into(), &mut self.norm_gain, false),
            tensor_1_mut("encoder.embeddings.norm.bias".into(), &mut self.norm_bias, false),
        ];
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.extend(layer_tensors_mut!(l, format!("encoder.layers.{i}"), tensor_2_mut, tensor_1_mut));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// No dropout, nothing recorded.
    Eval,
    /// Dropout masks drawn from `seed`; the forward pass is recorded for
    /// [`backward`].
    Train { seed: u64 },
}

struct NormTrace {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

struct LayerTrace {
    x: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<Array2<f64>>,
    ctx: Array2<f64>,
    attn_drop: Option<Array2<f64>>,
    attn_norm: NormTrace,
    x1: Array2<f64>,
    h_pre: Array2<f64>,
    h_act: Array2<f64>,
    ffn_drop: Option<Array2<f64>>,
    ffn_norm: NormTrace,
}

struct Trace {
    active: Vec<usize>,
    emb_norm: NormTrace,
    emb_drop: Option<Array2<f64>>,
    layers: Vec<LayerTrace>,
}

pub struct EncoderOutput {
    /// One row per input position; rows at masked positions are zero.
    pub token_states: Array2<f64>,
    trace: Option<Trace>,
}

impl EncoderOutput {
    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.token_states.row(i)
    }

    pub fn is_recorded(&self) -> bool {
        self.trace.is_some()
    }
}

fn layer_norm(x: &Array2<f64>, gain: &Array1<f64>, bias: &Array1<f64>) -> (Array2<f64>, NormTrace) {
    let n = x.ncols() as f64;
    let mean = x.sum_axis(Axis(1)) / n;
    let centered = x - &mean.view().insert_axis(Axis(1));
    let var = centered.mapv(|v| v * v).sum_axis(Axis(1)) / n;
    let inv_std = var.mapv(|v| 1.0 / (v + LN_EPS).sqrt());
    let xhat = centered * inv_std.view().insert_axis(Axis(1));
    let y = &xhat * gain + bias;
    (y, NormTrace { xhat, inv_std })
}

/// Returns dx, accumulating dgain and dbias.
fn layer_norm_backward(
    dy: &Array2<f64>,
    trace: &NormTrace,
    gain: &Array1<f64>,
    dgain: &mut Array1<f64>,
    dbias: &mut Array1<f64>,
) -> Array2<f64> {
    *dgain += &(dy * &trace.xhat).sum_axis(Axis(0));
    *dbias += &dy.sum_axis(Axis(0));
    let n = dy.ncols() as f64;
    let dxhat = dy * gain;
    let mean_d = dxhat.sum_axis(Axis(1)) / n;
    let mean_dx = (&dxhat * &trace.xhat).sum_axis(Axis(1)) / n;
    let mut dx = dxhat - mean_d.view().insert_axis(Axis(1)) - &trace.xhat * &mean_dx.view().insert_axis(Axis(1));
    dx *= &trace.inv_std.view().insert_axis(Axis(1));
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn dropout_mask(rng: &mut ChaCha8Rng, rows: usize, cols: usize, p: f64) -> Array2<f64> {
    let keep = 1.0 / (1.0 - p);
    Array2::from_shape_fn((rows, cols), |_| if rng.gen::<f64>() < p { 0.0 } else { keep })
}

fn row_softmax_in_place(a: &mut Array2<f64>) {
    for mut row in a.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
}

pub fn encode(input: &EncoderInput, params: &EncoderParams, cfg: &EncoderConfig, mode: Mode) -> Result<EncoderOutput> {
    let n = input.len();
    if n > cfg.max_seq_len {
        return Err(Error::SequenceOverflow { needed: n, max_seq_len: cfg.max_seq_len });
    }
    let h = cfg.hidden_size;
    let active: Vec<usize> = (0..n).filter(|&i| input.attention_mask[i] != 0).collect();
    let l = active.len();
    let mut x0 = Array2::<f64>::zeros((l, h));
    for (r, &p) in active.iter().enumerate() {
        let id = input.token_ids[p] as usize;
        if id >= params.token_embeddings.nrows() {
            return Err(Error::Shape(format!("token id {id} is outside the vocabulary")));
        }
        let seg = input.segment_ids[p] as usize;
        let mut row = x0.row_mut(r);
        row += &params.token_embeddings.row(id);
        row += &params.position_embeddings.row(p);
        row += &params.segment_embeddings.row(seg);
    }

    let (mut rng, record) = match mode {
        Mode::Eval => (None, false),
        Mode::Train { seed } => ((cfg.dropout > 0.0).then(|| ChaCha8Rng::seed_from_u64(seed)), true),
    };
    let mut drop = |rows: usize, cols: usize| rng.as_mut().map(|r| dropout_mask(r, rows, cols, cfg.dropout));

    let (mut x, emb_norm) = layer_norm(&x0, &params.norm_gain, &params.norm_bias);
    let emb_drop = drop(l, h);
    if let Some(m) = &emb_drop {
        x *= m;
    }

    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut layer_traces = Vec::with_capacity(params.layers.len());
    for lp in &params.layers {
        let q = x.dot(&lp.query_w) + &lp.query_b;
        let k = x.dot(&lp.key_w) + &lp.key_b;
        let v = x.dot(&lp.value_w) + &lp.value_b;
        let mut ctx = Array2::<f64>::zeros((l, h));
        let mut probs = Vec::with_capacity(cfg.num_heads);
        for head in 0..cfg.num_heads {
            let cols = s![.., head * dh..(head + 1) * dh];
            let mut p = q.slice(cols).dot(&k.slice(cols).t()) * scale;
            row_softmax_in_place(&mut p);
            ctx.slice_mut(cols).assign(&p.dot(&v.slice(cols)));
            probs.push(p);
        }
        let mut a = ctx.dot(&lp.output_w) + &lp.output_b;
        let attn_drop = drop(l, h);
        if let Some(m) = &attn_drop {
            a *= m;
        }
        let (x1, attn_norm) = layer_norm(&(&x + &a), &lp.attn_norm_gain, &lp.attn_norm_bias);
        let h_pre = x1.dot(&lp.ffn_in_w) + &lp.ffn_in_b;
        let h_act = h_pre.mapv(gelu);
        let mut f = h_act.dot(&lp.ffn_out_w) + &lp.ffn_out_b;
        let ffn_drop = drop(l, h);
        if let Some(m) = &ffn_drop {
            f *= m;
        }
        let (y, ffn_norm) = layer_norm(&(&x1 + &f), &lp.ffn_norm_gain, &lp.ffn_norm_bias);
        if record {
            layer_traces.push(LayerTrace {
                x: std::mem::replace(&mut x, y),
                q,
                k,
                v,
                probs,
                ctx,
                attn_drop,
                attn_norm,
                x1,
                h_pre,
                h_act,
                ffn_drop,
                ffn_norm,
            });
        } else {
            x = y;
        }
    }

    let mut token_states = Array2::<f64>::zeros((n, h));
    for (r, &p) in active.iter().enumerate() {
        token_states.row_mut(p).assign(&x.row(r));
    }
    let trace = record.then(|| Trace { active, emb_norm, emb_drop, layers: layer_traces });
    Ok(EncoderOutput { token_states, trace })
}

/// Parameter gradients for `output_gradient` (one row per position) given a
/// recorded forward pass.
pub fn backward(
    input: &EncoderInput,
    output: &EncoderOutput,
    params: &EncoderParams,
    cfg: &EncoderConfig,
    output_gradient: &Array2<f64>,
) -> Result<EncoderParams> {
    let mut grads = params.zeros_like();
    backward_into(input, output, params, cfg, output_gradient, &mut grads)?;
    Ok(grads)
}

/// Like [`backward`] but accumulates into `grads`.
pub fn backward_into(
    input: &EncoderInput,
    output: &EncoderOutput,
    params: &EncoderParams,
    cfg: &EncoderConfig,
    output_gradient: &Array2<f64>,
    grads: &mut EncoderParams,
) -> Result<()> {
    let trace = output.trace.as_ref().ok_or(Error::NoForwardRecord)?;
    if output_gradient.dim() != output.token_states.dim() {
        return Err(Error::Shape(format!(
            "output gradient {:?} does not match encoder output {:?}",
            output_gradient.dim(),
            output.token_states.dim()
        )));
    }
    let h = cfg.hidden_size;
    let l = trace.active.len();
    let mut dx = Array2::<f64>::zeros((l, h));
    for (r, &p) in trace.active.iter().enumerate() {
        dx.row_mut(r).assign(&output_gradient.row(p));
    }

    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    for ((lp, lt), lg) in params.layers.iter().zip(&trace.layers).zip(grads.layers.iter_mut()).rev() {
        // feed-forward block
        let dz2 =
            layer_norm_backward(&dx, &lt.ffn_norm, &lp.ffn_norm_gain, &mut lg.ffn_norm_gain, &mut lg.ffn_norm_bias);
        let mut dx1 = dz2.clone();
        let mut df = dz2;
        if let Some(m) = &lt.ffn_drop {
            df *= m;
        }
        lg.ffn_out_w += &lt.h_act.t().dot(&df);
        lg.ffn_out_b += &df.sum_axis(Axis(0));
        let mut dh_pre = df.dot(&lp.ffn_out_w.t());
        dh_pre.zip_mut_with(&lt.h_pre, |d, &x| *d *= gelu_grad(x));
        lg.ffn_in_w += &lt.x1.t().dot(&dh_pre);
        lg.ffn_in_b += &dh_pre.sum_axis(Axis(0));
        dx1 += &dh_pre.dot(&lp.ffn_in_w.t());

        // attention block
        let dz1 = layer_norm_backward(
            &dx1,
            &lt.attn_norm,
            &lp.attn_norm_gain,
            &mut lg.attn_norm_gain,
            &mut lg.attn_norm_bias,
        );
        let mut dx_in = dz1.clone();
        let mut da = dz1;
        if let Some(m) = &lt.attn_drop {
            da *= m;
        }
        lg.output_w += &lt.ctx.t().dot(&da);
        lg.output_b += &da.sum_axis(Axis(0));
        let dctx = da.dot(&lp.output_w.t());
        let mut dq = Array2::<f64>::zeros((l, h));
        let mut dk = Array2::<f64>::zeros((l, h));
        let mut dv = Array2::<f64>::zeros((l, h));
        for (head, p) in lt.probs.iter().enumerate() {
            let cols = s![.., head * dh..(head + 1) * dh];
            let dctx_h = dctx.slice(cols);
            let dp = dctx_h.dot(&lt.v.slice(cols).t());
            dv.slice_mut(cols).assign(&p.t().dot(&dctx_h));
            // softmax backward, row-wise
            let row_dot = (&dp * p).sum_axis(Axis(1));
            let ds = (dp - row_dot.view().insert_axis(Axis(1))) * p * scale;
            dq.slice_mut(cols).assign(&ds.dot(&lt.k.slice(cols)));
            dk.slice_mut(cols).assign(&ds.t().dot(&lt.q.slice(cols)));
        }
        for (d, w, wg, bg) in [
            (&dq, &lp.query_w, &mut lg.query_w, &mut lg.query_b),
            (&dk, &lp.key_w, &mut lg.key_w, &mut lg.key_b),
            (&dv, &lp.value_w, &mut lg.value_w, &mut lg.value_b),
        ] {
            *wg += &lt.x.t().dot(d);
            *bg += &d.sum_axis(Axis(0));
            dx_in += &d.dot(&w.t());
        }
        dx = dx_in;
    }

    if let Some(m) = &trace.emb_drop {
        dx *= m;
    }
    let dx0 = layer_norm_backward(&dx, &trace.emb_norm, &params.norm_gain, &mut grads.norm_gain, &mut grads.norm_bias);
    for (r, &p) in trace.active.iter().enumerate() {
        let row = dx0.row(r);
        let id = input.token_ids[p] as usize;
        let seg = input.segment_ids[p] as usize;
        let mut t = grads.token_embeddings.row_mut(id);
        t += &row;
        let mut pos = grads.position_embeddings.row_mut(p);
        pos += &row;
        let mut sg = grads.segment_embeddings.row_mut(seg);
        sg += &row;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assembly::{SEGMENT_HISTORY, SEGMENT_QUESTION};

    pub(crate) fn tiny_cfg() -> EncoderConfig {
        EncoderConfig {
            num_layers: 1,
            hidden_size: 4,
            num_heads: 2,
            ffn_size: 8,
            max_seq_len: 8,
            dropout: 0.0,
            vocab_size: 10,
            ..Default::default()
        }
    }

    fn input(ids: &[u32], mask: &[u8]) -> EncoderInput {
        let n = ids.len();
        EncoderInput {
            token_ids: ids.to_vec(),
            attention_mask: mask.to_vec(),
            segment_ids: (0..n).map(|i| if i < 2 { SEGMENT_QUESTION } else { SEGMENT_HISTORY }).collect(),
            cls_index: 0,
            question_range: 1..2,
            history_range: 2..n,
            int_positions: vec![],
            pv_positions: vec![],
            alignment: vec![],
        }
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let cfg = EncoderConfig::default();
        let a = EncoderParams::init(&cfg, 7).unwrap();
        assert_eq!(a, EncoderParams::init(&cfg, 7).unwrap());
        assert_ne!(a, EncoderParams::init(&cfg, 8).unwrap());
        assert!(a.layers[0].query_b.iter().all(|&v| v == 0.0));
        assert!(a.layers[0].ffn_norm_gain.iter().all(|&v| v == 1.0));
        let std = (a.token_embeddings.mapv(|v| v * v).mean().unwrap()).sqrt();
        assert!((std - 0.02).abs() < 0.001, "{std}");
    }

    #[test]
    fn indivisible_heads_rejected() {
        let cfg = EncoderConfig { hidden_size: 64, num_heads: 3, ..Default::default() };
        assert!(matches!(EncoderParams::init(&cfg, 0), Err(Error::Config(_))));
    }

    #[test]
    fn eval_is_deterministic_and_shaped() {
        let cfg = EncoderConfig { hidden_size: 8, num_heads: 2, ffn_size: 16, ..tiny_cfg() };
        let p = EncoderParams::init(&cfg, 1).unwrap();
        let inp = input(&[2, 6, 7, 8, 3], &[1; 5]);
        let a = encode(&inp, &p, &cfg, Mode::Eval).unwrap();
        let b = encode(&inp, &p, &cfg, Mode::Eval).unwrap();
        assert_eq!(a.token_states.dim(), (5, 8));
        assert_eq!(a.token_states, b.token_states);
        assert!(a.token_states.iter().all(|v| v.is_finite()));
        assert!(!a.is_recorded());
    }

    #[test]
    fn pad_ids_do_not_leak() {
        let cfg = tiny_cfg();
        let p = EncoderParams::init(&cfg, 3).unwrap();
        let mask = [1, 1, 1, 1, 0, 0];
        let a = encode(&input(&[2, 6, 7, 3, 0, 0], &mask), &p, &cfg, Mode::Eval).unwrap();
        let b = encode(&input(&[2, 6, 7, 3, 9, 5], &mask), &p, &cfg, Mode::Eval).unwrap();
        assert_eq!(a.token_states.slice(s![..4, ..]), b.token_states.slice(s![..4, ..]));
        assert!(a.token_states.row(4).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn too_long_input_is_rejected() {
        let cfg = tiny_cfg();
        let p = EncoderParams::init(&cfg, 3).unwrap();
        let inp = input(&[1; 9], &[1; 9]);
        assert!(encode(&inp, &p, &cfg, Mode::Eval).is_err());
    }

    #[test]
    fn backward_requires_recorded_forward() {
        let cfg = tiny_cfg();
        let p = EncoderParams::init(&cfg, 3).unwrap();
        let inp = input(&[2, 6, 7, 3], &[1; 4]);
        let out = encode(&inp, &p, &cfg, Mode::Eval).unwrap();
        let g = Array2::zeros((4, 4));
        assert!(matches!(backward(&inp, &out, &p, &cfg, &g), Err(Error::NoForwardRecord)));
    }

    #[test]
    fn zero_gradient_in_zero_gradient_out() {
        let cfg = tiny_cfg();
        let p = EncoderParams::init(&cfg, 3).unwrap();
        let inp = input(&[2, 6, 7, 3], &[1; 4]);
        let out = encode(&inp, &p, &cfg, Mode::Train { seed: 0 }).unwrap();
        let g = backward(&inp, &out, &p, &cfg, &Array2::zeros((4, 4))).unwrap();
        assert!(g.tensors().iter().all(|t| t.data.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn train_mode_reproducible_under_seed() {
        let cfg = EncoderConfig { dropout: 0.3, ..tiny_cfg() };
        let p = EncoderParams::init(&cfg, 3).unwrap();
        let inp = input(&[2, 6, 7, 3, 8, 9], &[1; 6]);
        let a = encode(&inp, &p, &cfg, Mode::Train { seed: 5 }).unwrap();
        let b = encode(&inp, &p, &cfg, Mode::Train { seed: 5 }).unwrap();
        let c = encode(&inp, &p, &cfg, Mode::Train { seed: 6 }).unwrap();
        assert_eq!(a.token_states, b.token_states);
        assert_ne!(a.token_states, c.token_states);
    }

    /// Loss = <R, states> for a fixed random R; checks every parameter
    /// against central differences.
    fn fd_check(cfg: &EncoderConfig, inp: &EncoderInput, readout: &Array2<f64>, seed: u64) -> f64 {
        let mut p = EncoderParams::init(cfg, seed).unwrap();
        // perturb norms and biases away from their trivial init
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
        for t in p.tensors_mut() {
            for v in t.data.iter_mut() {
                *v += rng.gen_range(-0.5..0.5);
            }
        }
        let mode = Mode::Train { seed: 11 };
        let loss = |p: &EncoderParams| (&encode(inp, p, cfg, mode).unwrap().token_states * readout).sum();
        let out = encode(inp, &p, cfg, mode).unwrap();
        let g = backward(inp, &out, &p, cfg, readout).unwrap();
        let eps = 1e-3;
        let mut worst = 0.0f64;
        for i in 0..p.num_scalars() {
            let orig = p.scalar(i).unwrap();
            *p.scalar_mut(i).unwrap() = orig + eps;
            let up = loss(&p);
            *p.scalar_mut(i).unwrap() = orig - eps;
            let down = loss(&p);
            *p.scalar_mut(i).unwrap() = orig;
            let numeric = (up - down) / (2.0 * eps);
            let analytic = g.scalar(i).unwrap();
            let denom = analytic.abs().max(numeric.abs());
            if denom > 1e-6 {
                worst = worst.max((analytic - numeric).abs() / denom);
            } else {
                assert!((analytic - numeric).abs() < 1e-8, "{i}: {analytic} vs {numeric}");
            }
        }
        worst
    }

    #[test]
    fn gradients_match_finite_differences() {
        let cfg = EncoderConfig { dropout: 0.2, ..tiny_cfg() };
        let inp = input(&[2, 6, 7, 3, 8, 0], &[1, 1, 1, 1, 1, 0]);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let readout = Array2::from_shape_fn((6, 4), |_| rng.gen_range(-1.0..1.0));
        let worst = fd_check(&cfg, &inp, &readout, 4);
        assert!(worst < 1e-3, "max relative error {worst}");
    }

    #[test]
    fn cls_only_loss_reaches_attention_weights() {
        let cfg = tiny_cfg();
        let inp = input(&[2, 6, 7, 3, 8, 0], &[1, 1, 1, 1, 1, 0]);
        let mut readout = Array2::zeros((6, 4));
        readout.row_mut(0).assign(&ndarray::arr1(&[1.0, -0.5, 0.25, 2.0]));
        let p = EncoderParams::init(&cfg, 4).unwrap();
        let out = encode(&inp, &p, &cfg, Mode::Train { seed: 0 }).unwrap();
        let g = backward(&inp, &out, &p, &cfg, &readout).unwrap();
        assert!(g.layers[0].key_w.iter().any(|&v| v != 0.0));
        assert!(g.layers[0].value_w.iter().any(|&v| v != 0.0));
        // the masked position's embedding row receives nothing
        assert!(g.position_embeddings.row(5).iter().all(|&v| v == 0.0));
        let worst = fd_check(&cfg, &inp, &readout, 4);
        assert!(worst < 1e-3, "max relative error {worst}");
    }
}
