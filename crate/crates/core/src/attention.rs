//! Learned label-channel attention.
//!
//! The score for a (label, slot label) pair is computed from their difference
//! `d = y − m_y`, fed one element at a time through a GRU (input size 1) from
//! a zero state, followed by a linear readout of the final hidden state. Since
//! the GRU consumes `d` as a sequence, the same parameters accept label
//! vectors of any length.

use crate::array::Array;
use crate::error::{Error, Result};
use crate::gru::{gru_cell, init_gru, GruNodes};
use crate::label::LabelVector;
use crate::params::{glorot_uniform, seeded_rng, Bindings, ParamSet};
use crate::tape::{Node, Tape};

pub const PREFIX: &str = "att_y";
pub const DEFAULT_HIDDEN: usize = 32;

const GRU: &str = "att_y.gru";
const FC_W: &str = "att_y.fc.w";
const FC_B: &str = "att_y.fc.b";

/// Fresh label-attention parameters under the `att_y.` namespace.
pub fn build_att_y(hidden: usize, seed: u64) -> Result<ParamSet> {
    if hidden == 0 {
        return Err(Error::Config("att_y hidden size must be positive".into()));
    }
    let mut rng = seeded_rng(seed);
    let mut params = ParamSet::new(seed);
    init_gru(&mut params, GRU, 1, hidden, &mut rng)?;
    params.insert(FC_W, glorot_uniform(&[hidden, 1], hidden, 1, &mut rng), true)?;
    params.insert(FC_B, Array::zeros(&[1]), true)?;
    Ok(params)
}

/// Scores every row of `diffs` (`[L×l_label]`, one difference vector per
/// slot) and returns an `[L]` node. Identical rows are evaluated once.
pub fn att_y_scores(tape: &mut Tape<'_>, bindings: &Bindings, diffs: &Array) -> Result<Node> {
    let shape = diffs.shape();
    if shape.len() != 2 {
        return Err(Error::dim("att_y", format!("difference matrix must be 2-D, got {shape:?}")));
    }
    let (rows, len) = (shape[0], shape[1]);

    let mut unique: Vec<&[f64]> = Vec::new();
    let mut which = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = diffs.row(r);
        match unique.iter().position(|u| *u == row) {
            Some(k) => which.push(k),
            None => {
                which.push(unique.len());
                unique.push(row);
            }
        }
    }

    let gru = GruNodes::bind(tape, bindings, GRU)?;
    let n = unique.len();
    let mut h = tape.constant(Array::zeros(&[n, gru.hidden()]));
    for k in 0..len {
        let column = unique.iter().map(|row| row[k]).collect();
        let x = tape.constant(Array::from_parts(vec![n, 1], column));
        h = gru_cell(tape, x, h, &gru)?;
    }
    let w = bindings.get(FC_W)?;
    let b = bindings.get(FC_B)?;
    let hw = tape.matmul(h, w)?;
    let out = tape.add_row(hw, b)?;
    let scores = tape.reshape(out, &[n])?;
    if n == rows {
        return Ok(scores);
    }
    let picks = which
        .iter()
        .map(|&k| tape.pick(scores, k))
        .collect::<Result<Vec<_>>>()?;
    let stacked = tape.stack_rows(&picks)?;
    tape.reshape(stacked, &[rows])
}

/// Consistency score between a label vector and a slot's aggregated label.
pub fn att_y(params: &ParamSet, y: &LabelVector, m_y: &Array) -> Result<f64> {
    if y.len() != m_y.len() {
        return Err(Error::shapes("att_y", y.values().shape(), m_y.shape()));
    }
    let diff: Vec<f64> = y.values().data().iter().zip(m_y.data()).map(|(a, b)| a - b).collect();
    let diffs = Array::new(vec![1, diff.len()], diff)?;
    let mut tape = Tape::new();
    let bindings = params.bind(&mut tape);
    let s = att_y_scores(&mut tape, &bindings, &diffs)?;
    Ok(tape.value(s).data()[0])
}
