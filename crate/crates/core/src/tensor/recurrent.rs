use super::tape::{Tape, Tensor};
use crate::error::{config_err, shape_err, Result};

/// Parameters of one LSTM direction, gate order (input, forget, cell, output).
#[derive(Clone, Copy, Debug)]
pub struct LstmWeights {
    /// `[4H, D]`
    pub w_ih: Tensor,
    /// `[4H, H]`
    pub w_hh: Tensor,
    /// `[4H]`
    pub bias: Tensor,
}

impl LstmWeights {
    pub fn hidden(&self, tape: &Tape) -> usize {
        tape.shape(self.w_hh)[1]
    }
}

/// Runs one LSTM direction over `x: [N, T, D]`, returning `[N, T, H]`
/// with outputs stored at their original frame positions.
pub fn lstm(tape: &mut Tape, x: Tensor, w: &LstmWeights, reverse: bool) -> Result<Tensor> {
    let xs = tape.shape(x).to_vec();
    if xs.len() != 3 {
        return Err(shape_err!("lstm expects [N, T, D], got {:?}", xs));
    }
    let (n, t_len) = (xs[0], xs[1]);
    let hidden = w.hidden(tape);
    if hidden == 0 {
        return Err(config_err!("lstm hidden size must be positive"));
    }
    if tape.shape(w.w_ih)[0] != 4 * hidden || tape.shape(w.w_hh)[0] != 4 * hidden {
        return Err(shape_err!("lstm gate weights do not match hidden size {hidden}"));
    }
    let projected = tape.linear(x, w.w_ih, Some(w.bias))?;
    let mut h: Option<Tensor> = None;
    let mut c: Option<Tensor> = None;
    let mut outputs = vec![None; t_len];
    let order: Vec<usize> = if reverse {
        (0..t_len).rev().collect()
    } else {
        (0..t_len).collect()
    };
    for t in order {
        let xt = tape.slice(projected, 1, t, 1)?;
        let mut gates = tape.reshape(xt, &[n, 4 * hidden])?;
        if let Some(h) = h {
            let rec = tape.linear(h, w.w_hh, None)?;
            gates = tape.add(gates, rec)?;
        }
        let i_pre = tape.slice(gates, 1, 0, hidden)?;
        let f_pre = tape.slice(gates, 1, hidden, hidden)?;
        let g_pre = tape.slice(gates, 1, 2 * hidden, hidden)?;
        let o_pre = tape.slice(gates, 1, 3 * hidden, hidden)?;
        let i = tape.sigmoid(i_pre);
        let g = tape.tanh(g_pre);
        let o = tape.sigmoid(o_pre);
        let ig = tape.mul(i, g)?;
        let c_new = match c {
            Some(c_prev) => {
                let f = tape.sigmoid(f_pre);
                let fc = tape.mul(f, c_prev)?;
                tape.add(fc, ig)?
            }
            None => ig,
        };
        let tc = tape.tanh(c_new);
        let h_new = tape.mul(o, tc)?;
        outputs[t] = Some(tape.reshape(h_new, &[n, 1, hidden])?);
        h = Some(h_new);
        c = Some(c_new);
    }
    let outputs: Vec<Tensor> = outputs.into_iter().map(Option::unwrap).collect();
    tape.concat(&outputs, 1)
}

/// Bidirectional LSTM: `[N, T, D] -> [N, T, 2H]`, forward half first.
pub fn bilstm(tape: &mut Tape, x: Tensor, fwd: &LstmWeights, bwd: &LstmWeights) -> Result<Tensor> {
    let f = lstm(tape, x, fwd, false)?;
    let b = lstm(tape, x, bwd, true)?;
    tape.concat(&[f, b], 2)
}
