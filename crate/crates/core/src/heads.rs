//! The task heads: single affine maps `W x + b` over encoder states, each
//! followed by a softmax over its candidates.

use std::ops::Range;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::assembly::{CategoricalHead, EncoderInput};
use crate::error::{Error, Result};
use crate::params::{Parameters, TensorMut, TensorRef};

/// One affine head: `weight` is `m × H`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    fn init(rng: &mut ChaCha8Rng, outputs: usize, hidden: usize) -> Self {
        let dist = Normal::new(0.0, 0.02).expect("valid std");
        Linear { weight: Array2::from_shape_fn((outputs, hidden), |_| dist.sample(rng)), bias: Array1::zeros(outputs) }
    }

    pub fn apply(&self, x: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
        linear(x, &self.weight, &self.bias)
    }

    /// Accumulates `dlogits ⊗ x` into this (gradient) head and returns the
    /// gradient with respect to `x` under the weights of `params`.
    fn backward(&mut self, params: &Linear, x: ArrayView1<'_, f64>, dlogits: &Array1<f64>) -> Array1<f64> {
        for (mut row, &d) in self.weight.rows_mut().into_iter().zip(dlogits) {
            if d != 0.0 {
                row.scaled_add(d, &x);
            }
        }
        self.bias += dlogits;
        params.weight.t().dot(dlogits)
    }
}

pub fn linear(x: ArrayView1<'_, f64>, weight: &Array2<f64>, bias: &Array1<f64>) -> Result<Array1<f64>> {
    if weight.ncols() != x.len() || weight.nrows() != bias.len() {
        return Err(Error::Shape(format!("linear: weight {:?}, bias {}, input {}", weight.dim(), bias.len(), x.len())));
    }
    Ok(weight.dot(&x) + bias)
}

/// Softmax; `-inf` logits get probability exactly 0.
pub fn softmax(logits: &Array1<f64>) -> Array1<f64> {
    let max = logits.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let mut e = logits.mapv(|v| if v == f64::NEG_INFINITY { 0.0 } else { (v - max).exp() });
    let sum = e.sum();
    e /= sum;
    e
}

/// Index of the largest entry; the first one on ties.
pub fn argmax(dist: &Array1<f64>) -> usize {
    let mut best = 0;
    for (i, &v) in dist.iter().enumerate() {
        if v > dist[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    /// Over {none, dontcare, ptr}.
    pub status: Linear,
    pub cat_slot: Linear,
    pub start: Linear,
    pub stop: Linear,
    /// Over {requested, not_requested}.
    pub req_slot: Linear,
    pub intent: Linear,
    /// `m_max + 1` outputs: values first, NONE last. Only with the CLS
    /// categorical head.
    pub cls_cat: Option<Linear>,
}

impl HeadParams {
    pub fn init(hidden: usize, categorical_head: CategoricalHead, max_values: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        HeadParams {
            status: Linear::init(&mut rng, 3, hidden),
            cat_slot: Linear::init(&mut rng, 1, hidden),
            start: Linear::init(&mut rng, 1, hidden),
            stop: Linear::init(&mut rng, 1, hidden),
            req_slot: Linear::init(&mut rng, 2, hidden),
            intent: Linear::init(&mut rng, 1, hidden),
            cls_cat: (categorical_head == CategoricalHead::Cls).then(|| Linear::init(&mut rng, max_values + 1, hidden)),
        }
    }

    pub fn hidden_size(&self) -> usize {
        self.status.weight.ncols()
    }

    fn named(&self) -> Vec<(&'static str, &Linear)> {
        let mut v = vec![
            ("status", &self.status),
            ("cat_slot", &self.cat_slot),
            ("start", &self.start),
            ("stop", &self.stop),
            ("req_slot", &self.req_slot),
            ("intent", &self.intent),
        ];
        if let Some(c) = &self.cls_cat {
            v.push(("cls_cat", c));
        }
        v
    }

    fn named_mut(&mut self) -> Vec<(&'static str, &mut Linear)> {
        let mut v = vec![
            ("status", &mut self.status),
            ("cat_slot", &mut self.cat_slot),
            ("start", &mut self.start),
            ("stop", &mut self.stop),
            ("req_slot", &mut self.req_slot),
            ("intent", &mut self.intent),
        ];
        if let Some(c) = &mut self.cls_cat {
            v.push(("cls_cat", c));
        }
        v
    }
}

impl Parameters for HeadParams {
    fn tensors(&self) -> Vec<TensorRef<'_>> {
        self.named()
            .into_iter()
            .flat_map(|(name, l)| {
                [
                    TensorRef {
                        name: format!("heads.{name}.weight"),
                        shape: l.weight.shape().to_vec(),
                        data: l.weight.as_slice().expect("standard layout"),
                        decay: true,
                    },
                    TensorRef {
                        name: format!("heads.{name}.bias"),
                        shape: l.bias.shape().to_vec(),
                        data: l.bias.as_slice().expect("standard layout"),
                        decay: false,
                    },
                ]
            })
            .collect()
    }

    fn tensors_mut(&mut self) -> Vec<TensorMut<'_>> {
        self.named_mut()
            .into_iter()
            .flat_map(|(name, l)| {
                let wshape = l.weight.shape().to_vec();
                let bshape = l.bias.shape().to_vec();
                [
                    TensorMut {
                        name: format!("heads.{name}.weight"),
                        shape: wshape,
                        data: l.weight.as_slice_mut().expect("standard layout"),
                        decay: true,
                    },
                    TensorMut {
                        name: format!("heads.{name}.bias"),
                        shape: bshape,
                        data: l.bias.as_slice_mut().expect("standard layout"),
                        decay: false,
                    },
                ]
            })
            .collect()
    }
}

pub fn slot_gate(u_cls: ArrayView1<'_, f64>, p: &HeadParams) -> Result<Array1<f64>> {
    Ok(softmax(&p.status.apply(u_cls)?))
}

/// One logit per candidate row of `candidates` (NONE first).
pub fn categorical_filler(candidates: &Array2<f64>, p: &HeadParams) -> Result<Array1<f64>> {
    scalar_per_row(candidates, &p.cat_slot).map(|l| softmax(&l))
}

pub fn intent_classifier(candidates: &Array2<f64>, p: &HeadParams) -> Result<Array1<f64>> {
    scalar_per_row(candidates, &p.intent).map(|l| softmax(&l))
}

fn scalar_per_row(rows: &Array2<f64>, head: &Linear) -> Result<Array1<f64>> {
    if rows.nrows() == 0 {
        return Err(Error::Head("empty candidate list".into()));
    }
    if rows.ncols() != head.weight.ncols() {
        return Err(Error::Shape(format!(
            "candidate width {} does not match head width {}",
            rows.ncols(),
            head.weight.ncols()
        )));
    }
    Ok(rows.dot(&head.weight.row(0)) + head.bias[0])
}

/// Distribution over `m_max + 1` outputs (values, then NONE last) with the
/// `m_max - k` unused value outputs at exactly zero.
pub fn cls_categorical_filler(u_cls: ArrayView1<'_, f64>, k: usize, p: &HeadParams) -> Result<Array1<f64>> {
    let head = p.cls_cat.as_ref().ok_or_else(|| Error::Head("no CLS categorical head in these parameters".into()))?;
    let m_max = head.bias.len() - 1;
    if k > m_max {
        return Err(Error::TooManyValues { values: k, max: m_max });
    }
    let mut logits = head.apply(u_cls)?;
    for v in logits.iter_mut().take(m_max).skip(k) {
        *v = f64::NEG_INFINITY;
    }
    Ok(softmax(&logits))
}

/// Start and stop distributions over all positions, zero outside `history`.
pub fn free_form_filler(
    states: &Array2<f64>,
    history: Range<usize>,
    p: &HeadParams,
) -> Result<(Array1<f64>, Array1<f64>)> {
    if history.is_empty() || history.end > states.nrows() {
        return Err(Error::Head(format!("invalid history range {history:?}")));
    }
    let window = states.slice(ndarray::s![history.clone(), ..]).to_owned();
    let masked = |head: &Linear| -> Result<Array1<f64>> {
        let inner = softmax(&scalar_per_row(&window, head)?);
        let mut full = Array1::zeros(states.nrows());
        full.slice_mut(ndarray::s![history.clone()]).assign(&inner);
        Ok(full)
    };
    Ok((masked(&p.start)?, masked(&p.stop)?))
}

/// Distribution over {requested, not_requested}.
pub fn requested_gate(u_cls: ArrayView1<'_, f64>, p: &HeadParams) -> Result<Array1<f64>> {
    Ok(softmax(&p.req_slot.apply(u_cls)?))
}

/// Requested iff the requested probability is strictly above one half.
pub fn is_requested(req: &Array1<f64>) -> bool {
    req[0] > 0.5
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutputs {
    pub gate: Array1<f64>,
    /// Over the value candidates, NONE first (length k + 1). For the CLS
    /// head this is a reordering of [`HeadOutputs::cls_raw`].
    pub cat: Option<Array1<f64>>,
    /// The CLS head's raw `m_max + 1` distribution.
    pub cls_raw: Option<Array1<f64>>,
    /// Over every sequence position; zero outside the history.
    pub start: Option<Array1<f64>>,
    pub stop: Option<Array1<f64>>,
    pub requested: Array1<f64>,
    /// Over the intent candidates, NONE first; absent without intents.
    pub intent: Option<Array1<f64>>,
}

/// What the heads need to know about the slot besides the encoded input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SlotKind {
    pub is_categorical: bool,
    pub num_values: usize,
}

fn gather_rows(states: &Array2<f64>, positions: &[usize]) -> Array2<f64> {
    states.select(Axis(0), positions)
}

/// Runs every applicable head over encoder states for one slot input.
pub fn apply_heads(states: &Array2<f64>, input: &EncoderInput, kind: SlotKind, p: &HeadParams) -> Result<HeadOutputs> {
    let u_cls = states.row(input.cls_index);
    let gate = slot_gate(u_cls, p)?;
    let requested = requested_gate(u_cls, p)?;
    let (mut cat, mut cls_raw, mut start, mut stop) = (None, None, None, None);
    if kind.is_categorical {
        if p.cls_cat.is_some() {
            let raw = cls_categorical_filler(u_cls, kind.num_values, p)?;
            cat = Some(cls_to_candidates(&raw, kind.num_values));
            cls_raw = Some(raw);
        } else {
            if input.pv_positions.len() != kind.num_values + 1 {
                return Err(Error::Head(format!(
                    "expected {} value candidates, input has {}",
                    kind.num_values + 1,
                    input.pv_positions.len()
                )));
            }
            cat = Some(categorical_filler(&gather_rows(states, &input.pv_positions), p)?);
        }
    } else {
        let (s, e) = free_form_filler(states, input.history_range.clone(), p)?;
        start = Some(s);
        stop = Some(e);
    }
    let intent = if input.int_positions.is_empty() {
        None
    } else {
        Some(intent_classifier(&gather_rows(states, &input.int_positions), p)?)
    };
    Ok(HeadOutputs { gate, cat, cls_raw, start, stop, requested, intent })
}

/// Candidate order (NONE, v1..vk) from the CLS layout (v1..vk, masked.., NONE).
fn cls_to_candidates(raw: &Array1<f64>, k: usize) -> Array1<f64> {
    let none = raw[raw.len() - 1];
    std::iter::once(none).chain(raw.iter().take(k).copied()).collect()
}

/// Position in the CLS layout of candidate `c` (0 = NONE).
pub fn cls_index_of_candidate(c: usize, m_max: usize) -> usize {
    if c == 0 {
        m_max
    } else {
        c - 1
    }
}

/// Loss gradients with respect to each head's logits, in the same layouts
/// as the corresponding [`HeadOutputs`] fields (`cat` uses the CLS raw
/// layout when the CLS head is in use).
#[derive(Debug, Clone, PartialEq)]
pub struct LogitGradients {
    pub gate: Array1<f64>,
    pub cat: Option<Array1<f64>>,
    pub start: Option<Array1<f64>>,
    pub stop: Option<Array1<f64>>,
    pub requested: Array1<f64>,
    pub intent: Option<Array1<f64>>,
}

/// Accumulates head parameter gradients into `grads` and returns the
/// gradient with respect to the encoder states.
pub fn heads_backward(
    states: &Array2<f64>,
    input: &EncoderInput,
    p: &HeadParams,
    dl: &LogitGradients,
    grads: &mut HeadParams,
) -> Array2<f64> {
    let mut dstates = Array2::<f64>::zeros(states.dim());
    let cls = input.cls_index;
    let u_cls = states.row(cls);
    let mut d_cls = grads.status.backward(&p.status, u_cls, &dl.gate);
    d_cls += &grads.req_slot.backward(&p.req_slot, u_cls, &dl.requested);
    if let Some(dcat) = &dl.cat {
        match (&p.cls_cat, &mut grads.cls_cat) {
            (Some(head), Some(ghead)) => d_cls += &ghead.backward(head, u_cls, dcat),
            _ => {
                scalar_rows_backward(states, &input.pv_positions, &p.cat_slot, &mut grads.cat_slot, dcat, &mut dstates)
            }
        }
    }
    {
        let mut row = dstates.row_mut(cls);
        row += &d_cls;
    }
    let history: Vec<usize> = input.history_range.clone().collect();
    for (d, head, ghead) in [(&dl.start, &p.start, &mut grads.start), (&dl.stop, &p.stop, &mut grads.stop)] {
        if let Some(d) = d {
            let inner = d.slice(ndarray::s![input.history_range.clone()]).to_owned();
            scalar_rows_backward(states, &history, head, ghead, &inner, &mut dstates);
        }
    }
    if let Some(d) = &dl.intent {
        scalar_rows_backward(states, &input.int_positions, &p.intent, &mut grads.intent, d, &mut dstates);
    }
    dstates
}

fn scalar_rows_backward(
    states: &Array2<f64>,
    positions: &[usize],
    head: &Linear,
    ghead: &mut Linear,
    dlogits: &Array1<f64>,
    dstates: &mut Array2<f64>,
) {
    let w = head.weight.row(0);
    for (&pos, &d) in positions.iter().zip(dlogits) {
        if d == 0.0 {
            continue;
        }
        let mut gw = ghead.weight.row_mut(0);
        gw.scaled_add(d, &states.row(pos));
        ghead.bias[0] += d;
        let mut ds = dstates.row_mut(pos);
        ds.scaled_add(d, &w);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, arr2};

    fn naive_softmax(x: &[f64]) -> Vec<f64> {
        let z: f64 = x.iter().map(|v| v.exp()).sum();
        x.iter().map(|v| v.exp() / z).collect()
    }

    fn close(a: &Array1<f64>, b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() < tol, "{a} vs {b:?}");
        }
    }

    #[test]
    fn linear_trivial_cases() {
        let y = linear(arr1(&[1.0, -1.0]).view(), &Array2::eye(2), &arr1(&[0.5, 0.5])).unwrap();
        assert_eq!(y, arr1(&[1.5, -0.5]));
        let y = linear(arr1(&[3.0, 7.0]).view(), &Array2::zeros((2, 2)), &arr1(&[0.1, 0.2])).unwrap();
        assert_eq!(y, arr1(&[0.1, 0.2]));
        assert!(linear(arr1(&[1.0]).view(), &Array2::eye(2), &arr1(&[0.0, 0.0])).is_err());
    }

    #[test]
    fn linear_matches_loop_oracle() {
        let w = arr2(&[[0.3, -1.2, 2.0, 0.5], [1.1, 0.0, -0.7, 0.25], [-2.0, 0.4, 0.9, 1.5]]);
        let b = arr1(&[0.1, -0.2, 0.3]);
        let x = arr1(&[1.5, -0.5, 2.0, -1.0]);
        let y = linear(x.view(), &w, &b).unwrap();
        for i in 0..3 {
            let mut acc = b[i];
            for j in 0..4 {
                acc += w[[i, j]] * x[j];
            }
            assert!((y[i] - acc).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_oracles() {
        close(&softmax(&arr1(&[0.0, 0.0, 0.0])), &[1.0 / 3.0; 3], 1e-15);
        close(&softmax(&arr1(&[1.0, 2.0, 3.0])), &naive_softmax(&[1.0, 2.0, 3.0]), 1e-9);
        assert_eq!(argmax(&softmax(&arr1(&[10.0, 0.0, 0.0]))), 0);
        // pinned: softmax of [2, 0, 0]
        close(
            &softmax(&arr1(&[2.0, 0.0, 0.0])),
            &[0.786_986_042_161_598_5, 0.106_506_978_919_200_75, 0.106_506_978_919_200_75],
            1e-12,
        );
        let shifted = softmax(&arr1(&[1001.0, 1002.0, 1003.0]));
        close(&shifted, &naive_softmax(&[1.0, 2.0, 3.0]), 1e-9);
    }

    #[test]
    fn requested_tie_is_not_requested() {
        let d = softmax(&arr1(&[0.0, 0.0]));
        assert_eq!(d, arr1(&[0.5, 0.5]));
        assert!(!is_requested(&d));
        assert!(is_requested(&softmax(&arr1(&[3.0, 0.0]))));
    }

    fn params(hidden: usize, head: CategoricalHead) -> HeadParams {
        HeadParams::init(hidden, head, 5, 3)
    }

    #[test]
    fn identical_candidates_give_uniform() {
        let p = params(4, CategoricalHead::Pv);
        let rows = Array2::from_shape_fn((3, 4), |(_, j)| j as f64 * 0.3);
        close(&categorical_filler(&rows, &p).unwrap(), &[1.0 / 3.0; 3], 1e-12);
        close(&intent_classifier(&rows, &p).unwrap(), &[1.0 / 3.0; 3], 1e-12);
        assert!(categorical_filler(&Array2::zeros((0, 4)), &p).is_err());
    }

    #[test]
    fn cls_head_masks_unused_values() {
        let mut p = params(4, CategoricalHead::Cls);
        let u = arr1(&[0.2, -0.4, 1.0, 0.3]);
        let d = cls_categorical_filler(u.view(), 2, &p).unwrap();
        assert_eq!(d.len(), 6);
        assert_eq!(&d.as_slice().unwrap()[2..5], &[0.0, 0.0, 0.0]);
        assert!((d.sum() - 1.0).abs() < 1e-12);
        assert!(cls_categorical_filler(u.view(), 6, &p).is_err());
        let full = cls_categorical_filler(u.view(), 5, &p).unwrap();
        assert!(full.iter().all(|&v| v > 0.0));
        // equal retained logits: uniform over k + 1
        p.cls_cat.as_mut().unwrap().weight.fill(0.0);
        close(
            &cls_categorical_filler(u.view(), 2, &p).unwrap(),
            &[1.0 / 3.0, 1.0 / 3.0, 0.0, 0.0, 0.0, 1.0 / 3.0],
            1e-12,
        );
        let reordered = cls_to_candidates(&arr1(&[0.1, 0.2, 0.0, 0.0, 0.0, 0.7]), 2);
        assert_eq!(reordered, arr1(&[0.7, 0.1, 0.2]));
        assert_eq!(cls_index_of_candidate(0, 5), 5);
        assert_eq!(cls_index_of_candidate(2, 5), 1);
    }

    #[test]
    fn free_form_masks_outside_history() {
        let p = params(3, CategoricalHead::Pv);
        let states = Array2::from_shape_fn((8, 3), |(i, j)| ((i * 3 + j) as f64).sin());
        let (s, e) = free_form_filler(&states, 2..6, &p).unwrap();
        for d in [&s, &e] {
            assert!((d.sum() - 1.0).abs() < 1e-12);
            for i in [0, 1, 6, 7] {
                assert_eq!(d[i], 0.0);
            }
        }
        // oracle: mask, then softmax of the per-position logits
        let logits: Vec<f64> = (2..6)
            .map(|i| (0..3).map(|j| p.start.weight[[0, j]] * states[[i, j]]).sum::<f64>() + p.start.bias[0])
            .collect();
        close(&s.slice(ndarray::s![2..6]).to_owned(), &naive_softmax(&logits), 1e-12);
        assert!(free_form_filler(&states, 3..3, &p).is_err());

        let uniform = Array2::from_elem((8, 3), 0.5);
        let (s, _) = free_form_filler(&uniform, 2..6, &p).unwrap();
        close(&s, &[0.0, 0.0, 0.25, 0.25, 0.25, 0.25, 0.0, 0.0], 1e-12);
    }

    #[test]
    fn shift_invariance() {
        let base = arr1(&[0.3, -1.0, 2.5, 0.0]);
        let a = softmax(&base);
        let b = softmax(&(&base + 17.0));
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-9);
        }
        assert_eq!(argmax(&a), argmax(&b));
    }
}
