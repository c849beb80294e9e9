//! Layer building blocks, each with a tape form and a plain-value form.

use crate::tape::{Tape, Var};
use crate::tensor::{self, Tensor};

/// `x · Wᵀ + b`.
pub fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Var {
    let y = tape.matmul_nt(x, w);
    tape.add_row(y, b)
}

/// One LSTM step with packed gates `[input, forget, cell, output]`.
pub fn lstm_step(tape: &mut Tape, x: Var, h: Var, c: Var, w_ih: Var, w_hh: Var, b: Var) -> (Var, Var) {
    let hidden = tape.value(h).cols;
    let gx = tape.matmul_nt(x, w_ih);
    let gh = tape.matmul_nt(h, w_hh);
    let gates = tape.add(gx, gh);
    let gates = tape.add_row(gates, b);
    let i = tape.slice_cols(gates, 0, hidden);
    let i = tape.sigmoid(i);
    let f = tape.slice_cols(gates, hidden, hidden);
    let f = tape.sigmoid(f);
    let g = tape.slice_cols(gates, 2 * hidden, hidden);
    let g = tape.tanh(g);
    let o = tape.slice_cols(gates, 3 * hidden, hidden);
    let o = tape.sigmoid(o);
    let fc = tape.mul(f, c);
    let ig = tape.mul(i, g);
    let c_next = tape.add(fc, ig);
    let tc = tape.tanh(c_next);
    let h_next = tape.mul(o, tc);
    (h_next, c_next)
}

pub fn linear_values(x: &[f64], w: &Tensor, b: &Tensor) -> Vec<f64> {
    debug_assert_eq!(w.cols, x.len());
    (0..w.rows).map(|r| tensor::dot(w.row(r), x) + b.data[r]).collect()
}

/// Plain-value LSTM step; same packing as [`lstm_step`].
pub fn lstm_step_values(
    x: &[f64],
    h: &[f64],
    c: &[f64],
    w_ih: &Tensor,
    w_hh: &Tensor,
    b: &Tensor,
) -> (Vec<f64>, Vec<f64>) {
    let hidden = h.len();
    let gates: Vec<f64> = (0..4 * hidden)
        .map(|r| tensor::dot(w_ih.row(r), x) + tensor::dot(w_hh.row(r), h) + b.data[r])
        .collect();
    let sig = crate::tape::sigmoid;
    let mut h_next = vec![0.0; hidden];
    let mut c_next = vec![0.0; hidden];
    for j in 0..hidden {
        let i = sig(gates[j]);
        let f = sig(gates[hidden + j]);
        let g = gates[2 * hidden + j].tanh();
        let o = sig(gates[3 * hidden + j]);
        c_next[j] = f * c[j] + i * g;
        h_next[j] = o * c_next[j].tanh();
    }
    (h_next, c_next)
}

/// Uniform init bound `1/sqrt(fan_in)`.
pub fn init_bound(fan_in: usize) -> f64 {
    1.0 / (fan_in.max(1) as f64).sqrt()
}
