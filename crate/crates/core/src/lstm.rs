//! Bidirectional LSTM on the tape, used to reparametrize soft prompts.

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One direction of an LSTM. Gate blocks are laid out `[input, forget, cell, output]`
/// along the last dimension of every matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmCell {
    pub w_ih: Tensor,
    pub w_hh: Tensor,
    pub bias: Tensor,
}

impl LstmCell {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        LstmCell {
            w_ih: Tensor::zeros(&[input, 4 * hidden]),
            w_hh: Tensor::zeros(&[hidden, 4 * hidden]),
            bias: Tensor::zeros(&[4 * hidden]),
        }
    }

    /// Uniform on `±1/sqrt(hidden)`, the usual LSTM initialization.
    pub fn random<R: Rng + ?Sized>(input: usize, hidden: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        LstmCell {
            w_ih: Tensor::uniform(&[input, 4 * hidden], bound, rng),
            w_hh: Tensor::uniform(&[hidden, 4 * hidden], bound, rng),
            bias: Tensor::uniform(&[4 * hidden], bound, rng),
        }
    }

    pub fn hidden(&self) -> usize {
        self.w_hh.rows()
    }

    pub fn input(&self) -> usize {
        self.w_ih.rows()
    }

    pub fn tensors(&self) -> [&Tensor; 3] {
        [&self.w_ih, &self.w_hh, &self.bias]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 3] {
        [&mut self.w_ih, &mut self.w_hh, &mut self.bias]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BiLstm {
    pub forward: LstmCell,
    pub backward: LstmCell,
}

/// Tape handles for one direction.
#[derive(Debug, Clone, Copy)]
pub struct BoundCell {
    pub w_ih: Var,
    pub w_hh: Var,
    pub bias: Var,
    hidden: usize,
}

impl BoundCell {
    pub fn new(w_ih: Var, w_hh: Var, bias: Var, hidden: usize) -> Self {
        BoundCell {
            w_ih,
            w_hh,
            bias,
            hidden,
        }
    }

    pub fn bind(tape: &mut Tape, cell: &LstmCell) -> Result<Self> {
        Ok(BoundCell {
            w_ih: tape.leaf(&cell.w_ih)?,
            w_hh: tape.leaf(&cell.w_hh)?,
            bias: tape.leaf(&cell.bias)?,
            hidden: cell.hidden(),
        })
    }

    pub fn vars(&self) -> [Var; 3] {
        [self.w_ih, self.w_hh, self.bias]
    }
}

impl BiLstm {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        BiLstm {
            forward: LstmCell::zeros(input, hidden),
            backward: LstmCell::zeros(input, hidden),
        }
    }

    pub fn random<R: Rng + ?Sized>(input: usize, hidden: usize, rng: &mut R) -> Self {
        BiLstm {
            forward: LstmCell::random(input, hidden, rng),
            backward: LstmCell::random(input, hidden, rng),
        }
    }

    pub fn hidden(&self) -> usize {
        self.forward.hidden()
    }
}

/// Runs one direction over `seq` (rows are time steps) and returns the
/// hidden states in sequence order.
fn run_direction(tape: &mut Tape, seq: Var, cell: &BoundCell, reverse: bool) -> Result<Var> {
    let len = tape.shape(seq)[0];
    let h = cell.hidden;
    let zeros = Tensor::zeros(&[1, h]);
    let mut hidden = tape.constant(&zeros)?;
    let mut state = tape.constant(&zeros)?;
    let mut outputs = vec![hidden; len];
    let order: Vec<usize> = if reverse {
        (0..len).rev().collect()
    } else {
        (0..len).collect()
    };
    for t in order {
        let x = tape.slice_rows(seq, t, 1)?;
        let xi = tape.matmul(x, cell.w_ih)?;
        let hh = tape.matmul(hidden, cell.w_hh)?;
        let pre = tape.add(xi, hh)?;
        let gates = tape.add_row_bias(pre, cell.bias)?;
        let i = tape.slice_cols(gates, 0, h)?;
        let f = tape.slice_cols(gates, h, h)?;
        let g = tape.slice_cols(gates, 2 * h, h)?;
        let o = tape.slice_cols(gates, 3 * h, h)?;
        let i = tape.sigmoid(i);
        let f = tape.sigmoid(f);
        let g = tape.tanh(g);
        let o = tape.sigmoid(o);
        let keep = tape.mul(f, state)?;
        let write = tape.mul(i, g)?;
        state = tape.add(keep, write)?;
        let squashed = tape.tanh(state);
        hidden = tape.mul(o, squashed)?;
        outputs[t] = hidden;
    }
    tape.concat_rows(&outputs)
}

/// `seq[L×d_in] → [L×2h]`: forward states then backward states per position.
pub fn lstm_bidirectional(
    tape: &mut Tape,
    seq: Var,
    forward: &BoundCell,
    backward: &BoundCell,
) -> Result<Var> {
    let shape = tape.shape(seq).to_vec();
    if shape.len() != 2 || shape[0] == 0 {
        return Err(Error::contract("lstm_bidirectional needs a non-empty L×d sequence"));
    }
    let fw = run_direction(tape, seq, forward, false)?;
    let bw = run_direction(tape, seq, backward, true)?;
    tape.concat_cols(&[fw, bw])
}
