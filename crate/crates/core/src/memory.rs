//! Slot memory with two-channel attention addressing and running-mean writes.
//!
//! Each slot holds a prototype embedding `m_h`, an aggregated label `m_y`,
//! and a write counter `m_c`. A sample is routed by softmax over per-slot
//! scores
//!
//! ```text
//! score_i = (1 − λ)·att_h(h, m_h,i) + λ·att_y(y, m_y,i),   λ = sgn(‖y‖)
//! ```
//!
//! so a labelled sample is addressed purely by its label and an unlabelled
//! one purely by its content. Empty slots take part with their zero vectors.

use std::fmt::Write as _;

use rand::Rng;

use crate::array::Array;
use crate::attention::att_y_scores;
use crate::error::{Error, Result};
use crate::label::LabelVector;
use crate::params::{Bindings, ParamSet, SeededRng};
use crate::tape::{softmax, Node, Tape};

#[derive(Clone, Debug, PartialEq)]
pub struct Slot {
    pub m_h: Array,
    pub m_y: Array,
    pub count: usize,
}

impl Slot {
    fn empty(hidden: usize, label_len: usize) -> Self {
        Slot {
            m_h: Array::zeros(&[hidden]),
            m_y: Array::zeros(&[label_len]),
            count: 0,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Memory {
    slots: Vec<Slot>,
    hidden: usize,
    label_len: usize,
}

impl Memory {
    pub fn new(slots: usize, hidden: usize, label_len: usize) -> Result<Self> {
        if slots == 0 || hidden == 0 || label_len == 0 {
            return Err(Error::Config(format!(
                "memory needs positive sizes, got L={slots}, l_hidden={hidden}, l_label={label_len}"
            )));
        }
        Ok(Memory {
            slots: vec![Slot::empty(hidden, label_len); slots],
            hidden,
            label_len,
        })
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn label_len(&self) -> usize {
        self.label_len
    }

    pub fn slots(&self) -> &[Slot] {
        &self.slots
    }

    pub fn slot(&self, i: usize) -> Option<&Slot> {
        self.slots.get(i)
    }

    pub fn reset(&mut self) {
        for s in &mut self.slots {
            *s = Slot::empty(self.hidden, self.label_len);
        }
    }

    pub fn any_occupied(&self) -> bool {
        self.slots.iter().any(|s| !s.is_empty())
    }

    pub fn total_count(&self) -> usize {
        self.slots.iter().map(|s| s.count).sum()
    }

    /// Running-mean write into slot `i`:
    /// `m ← (m·c + x)/(c + 1)` for both channels, then `c ← c + 1`.
    pub fn write(&mut self, i: usize, h: &Array, y: &LabelVector) -> Result<()> {
        let len = self.slots.len();
        let slot = self
            .slots
            .get_mut(i)
            .ok_or_else(|| Error::Contract(format!("slot index {i} out of range for L={len}")))?;
        if h.len() != slot.m_h.len() {
            return Err(Error::shapes("write", slot.m_h.shape(), h.shape()));
        }
        if y.len() != slot.m_y.len() {
            return Err(Error::shapes("write", slot.m_y.shape(), y.values().shape()));
        }
        let c = slot.count as f64;
        for (m, x) in slot.m_h.data_mut().iter_mut().zip(h.data()) {
            *m = (*m * c + x) / (c + 1.0);
        }
        for (m, x) in slot.m_y.data_mut().iter_mut().zip(y.values().data()) {
            *m = (*m * c + x) / (c + 1.0);
        }
        slot.count += 1;
        Ok(())
    }

    /// `[L × l_hidden]` matrix of prototypes.
    pub fn prototypes(&self) -> Array {
        let data = self.slots.iter().flat_map(|s| s.m_h.data().iter().copied()).collect();
        Array::from_parts(vec![self.slots.len(), self.hidden], data)
    }

    /// `[L × l_label]` matrix of `y − m_y,i`.
    pub fn label_differences(&self, y: &LabelVector) -> Result<Array> {
        if y.len() != self.label_len {
            return Err(Error::dim(
                "attend",
                format!("label length {} does not match memory label length {}", y.len(), self.label_len),
            ));
        }
        let yv = y.values().data();
        let data = self
            .slots
            .iter()
            .flat_map(|s| yv.iter().zip(s.m_y.data()).map(|(a, b)| a - b))
            .collect();
        Ok(Array::from_parts(vec![self.slots.len(), self.label_len], data))
    }

    /// Tabular dump: slot, m_c, m_y entries, first 8 entries of m_h.
    pub fn dump_table(&self) -> String {
        let mut out = String::from("slot\tm_c\tm_y\tm_h[..8]\n");
        for (i, s) in self.slots.iter().enumerate() {
            let fmt = |xs: &[f64]| xs.iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>().join(",");
            let head = &s.m_h.data()[..s.m_h.len().min(8)];
            let _ = writeln!(out, "{i}\t{}\t[{}]\t[{}]", s.count, fmt(s.m_y.data()), fmt(head));
        }
        out
    }
}

/// `λ = sgn(‖y‖)`: 0 for the all-zero (unknown) label, 1 otherwise.
pub fn lambda_switch(y: &LabelVector) -> u8 {
    u8::from(!y.is_zero())
}

/// Content-channel score: the negated Euclidean distance, so nearer
/// prototypes score higher.
pub fn att_h(h: &Array, m_h: &Array) -> Result<f64> {
    Ok(-h.distance(m_h)?)
}

/// Per-slot scores `[L]` on a tape. `prototypes` is the `[L × l_hidden]`
/// prototype matrix node (differentiable during training).
///
/// λ is exactly 0 or 1, so the inactive channel contributes exactly zero to
/// both the value and the gradient and is not evaluated.
pub fn attention_scores(
    tape: &mut Tape<'_>,
    bindings: &Bindings,
    memory: &Memory,
    h: Node,
    y: &LabelVector,
    prototypes: Node,
) -> Result<Node> {
    if lambda_switch(y) == 1 {
        let diffs = memory.label_differences(y)?;
        att_y_scores(tape, bindings, &diffs)
    } else {
        tape.neg_row_dist(h, prototypes)
    }
}

/// Probability over slots for storing `(h, y)`.
pub fn attend(memory: &Memory, h: &Array, y: &LabelVector, params: &ParamSet) -> Result<Vec<f64>> {
    Ok(softmax(&plain_scores(memory, h, y, params)?))
}

fn plain_scores(memory: &Memory, h: &Array, y: &LabelVector, params: &ParamSet) -> Result<Vec<f64>> {
    if h.len() != memory.hidden() {
        return Err(Error::dim(
            "attend",
            format!("embedding length {} does not match memory width {}", h.len(), memory.hidden()),
        ));
    }
    let mut tape = Tape::new();
    let bindings = params.bind(&mut tape);
    let hn = tape.constant(h.reshaped(&[h.len()])?);
    let protos = tape.constant(memory.prototypes());
    let s = attention_scores(&mut tape, &bindings, memory, hn, y, protos)?;
    Ok(tape.value(s).data().to_vec())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Selection {
    /// Draw from the distribution (training, exploration).
    Sample,
    /// Highest probability, lowest index on ties (evaluation).
    Greedy,
}

pub fn choose_slot(probabilities: &[f64], mode: Selection, rng: &mut SeededRng) -> Result<usize> {
    let total: f64 = probabilities.iter().sum();
    if probabilities.is_empty() || (total - 1.0).abs() > 1e-9 || probabilities.iter().any(|p| *p < 0.0 || !p.is_finite()) {
        return Err(Error::Contract(format!(
            "choose_slot needs a probability vector, got sum {total}"
        )));
    }
    Ok(match mode {
        Selection::Greedy => argmax(probabilities),
        Selection::Sample => {
            let u: f64 = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen = None;
            for (i, p) in probabilities.iter().enumerate() {
                acc += p;
                if u < acc {
                    chosen = Some(i);
                    break;
                }
            }
            // Rounding can leave u just above the final cumulative sum.
            chosen.unwrap_or_else(|| probabilities.iter().rposition(|p| *p > 0.0).unwrap_or(0))
        }
    })
}

/// Index of the maximum, lowest index on ties.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in xs.iter().enumerate() {
        if *v > xs[best] {
            best = i;
        }
    }
    best
}

/// Routes an unlabelled query to the most similar occupied slot and reads
/// off its label. Returns `(slot, predicted label id)`.
pub fn classify(memory: &Memory, h: &Array, params: &ParamSet) -> Result<(usize, usize)> {
    if !memory.any_occupied() {
        return Err(Error::NoPrototype);
    }
    let zero = LabelVector::zero(memory.label_len());
    // Argmax over raw scores rather than probabilities: identical ordering,
    // but immune to softmax underflow when every occupied slot is far away.
    let scores = plain_scores(memory, h, &zero, params)?;
    let slot = (0..memory.len())
        .filter(|&i| !memory.slots[i].is_empty())
        .fold(None, |best: Option<usize>, i| match best {
            Some(b) if scores[b] >= scores[i] => Some(b),
            _ => Some(i),
        })
        .ok_or(Error::NoPrototype)?;
    Ok((slot, argmax(memory.slots[slot].m_y.data())))
}
