//! Gated recurrent unit built from tape primitives.
//!
//! ```text
//! z  = σ(x·W_z + h·U_z + b_z)
//! r  = σ(x·W_r + h·U_r + b_r)
//! ñ  = tanh(x·W_n + (r ⊙ h)·U_n + b_n)
//! h' = z ⊙ h + (1 − z) ⊙ ñ
//! ```

use crate::array::Array;
use crate::error::{Error, Result};
use crate::params::{glorot_uniform, Bindings, ParamSet, SeededRng};
use crate::tape::{Node, Tape};

const GATES: [&str; 3] = ["z", "r", "n"];

/// Parameter nodes of one GRU layer on a tape.
#[derive(Clone, Copy, Debug)]
pub struct GruNodes {
    w: [Node; 3],
    u: [Node; 3],
    b: [Node; 3],
    input: usize,
    hidden: usize,
}

/// Inserts GRU parameters named `{prefix}.w_z`, `{prefix}.u_z`, `{prefix}.b_z`, ...
pub fn init_gru(params: &mut ParamSet, prefix: &str, input: usize, hidden: usize, rng: &mut SeededRng) -> Result<()> {
    for g in GATES {
        params.insert(format!("{prefix}.w_{g}"), glorot_uniform(&[input, hidden], input, hidden, rng), true)?;
        params.insert(format!("{prefix}.u_{g}"), glorot_uniform(&[hidden, hidden], hidden, hidden, rng), true)?;
        params.insert(format!("{prefix}.b_{g}"), Array::zeros(&[hidden]), true)?;
    }
    Ok(())
}

impl GruNodes {
    pub fn bind(tape: &Tape<'_>, bindings: &Bindings, prefix: &str) -> Result<Self> {
        let get = |kind: &str, g: &str| bindings.get(&format!("{prefix}.{kind}_{g}"));
        let w = [get("w", "z")?, get("w", "r")?, get("w", "n")?];
        let u = [get("u", "z")?, get("u", "r")?, get("u", "n")?];
        let b = [get("b", "z")?, get("b", "r")?, get("b", "n")?];
        let ws = tape.shape(w[0]);
        let (input, hidden) = (ws[0], ws[1]);
        Ok(GruNodes { w, u, b, input, hidden })
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn input(&self) -> usize {
        self.input
    }
}

/// One GRU step. `x` is `[B×d_in]` and `h_prev` is `[B×d_h]`; rank-1 inputs
/// are treated as a batch of one and produce a rank-1 result.
pub fn gru_cell(tape: &mut Tape<'_>, x: Node, h_prev: Node, p: &GruNodes) -> Result<Node> {
    let single = tape.shape(x).len() == 1 && tape.shape(h_prev).len() == 1;
    let (x, h_prev) = if single {
        let (dx, dh) = (tape.shape(x)[0], tape.shape(h_prev)[0]);
        (tape.reshape(x, &[1, dx])?, tape.reshape(h_prev, &[1, dh])?)
    } else {
        (x, h_prev)
    };
    let (sx, sh) = (tape.shape(x).to_vec(), tape.shape(h_prev).to_vec());
    if sx.len() != 2 || sh.len() != 2 || sx[0] != sh[0] || sx[1] != p.input || sh[1] != p.hidden {
        return Err(Error::dim(
            "gru_cell",
            format!("x {sx:?} and h {sh:?} do not fit a GRU with input {} and hidden {}", p.input, p.hidden),
        ));
    }

    let gate = |tape: &mut Tape<'_>, k: usize, h_term: Node| -> Result<Node> {
        let xw = tape.matmul(x, p.w[k])?;
        let hu = tape.matmul(h_term, p.u[k])?;
        let s = tape.add(xw, hu)?;
        tape.add_row(s, p.b[k])
    };
    let z_pre = gate(tape, 0, h_prev)?;
    let z = tape.sigmoid(z_pre);
    let r_pre = gate(tape, 1, h_prev)?;
    let r = tape.sigmoid(r_pre);
    let rh = tape.mul(r, h_prev)?;
    let n_pre = gate(tape, 2, rh)?;
    let n = tape.tanh(n_pre);
    // h' = ñ + z ⊙ (h − ñ)
    let diff = tape.sub(h_prev, n)?;
    let zd = tape.mul(z, diff)?;
    let h_new = tape.add(n, zd)?;
    if single {
        let d = p.hidden;
        tape.reshape(h_new, &[d])
    } else {
        Ok(h_new)
    }
}
