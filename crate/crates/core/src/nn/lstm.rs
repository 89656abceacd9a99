//! Bidirectional LSTM layers for the classification branch.
//!
//! Gates are packed `i, f, g, o` along the first axis of the `[4H, ·]`
//! weights and the `[4H]` bias. One step computes
//!
//! ```text
//! i = sigmoid(Wi x + Ui h + bi)      f = sigmoid(Wf x + Uf h + bf)
//! g = tanh   (Wg x + Ug h + bg)      o = sigmoid(Wo x + Uo h + bo)
//! c' = f * c + i * g                 h' = o * tanh(c')
//! ```
//!
//! and a bidirectional layer runs one LSTM left-to-right and an
//! independently parameterized one right-to-left over the sequence,
//! concatenating their hidden states per step.

use crate::tensor::{TensorError, TensorId};

use super::params::{Forward, Init, ParamId, ParamStore};

/// One direction's parameters.
#[derive(Debug, Clone)]
struct LstmDir {
    w_ih: ParamId,
    w_hh: ParamId,
    bias: ParamId,
    hidden: usize,
}

impl LstmDir {
    fn build(init: &mut Init, store: &mut ParamStore, name: &str, input: usize, hidden: usize) -> LstmDir {
        let half = 1.0 / (hidden as f64).sqrt();
        let w_ih = init.uniform(store, format!("{name}.w_ih"), vec![4 * hidden, input], half);
        let w_hh = init.uniform(store, format!("{name}.w_hh"), vec![4 * hidden, hidden], half);
        let bias = init.uniform(store, format!("{name}.bias"), vec![4 * hidden], half);
        // Open the forget gates at the start so early training can carry
        // state across steps.
        for v in &mut store.get_mut(bias).data[hidden..2 * hidden] {
            *v = 1.0;
        }
        LstmDir { w_ih, w_hh, bias, hidden }
    }

    /// One step; returns the new `(h, c)`.
    fn step(
        &self,
        fwd: &mut Forward,
        x: TensorId,
        h: TensorId,
        c: TensorId,
    ) -> Result<(TensorId, TensorId), TensorError> {
        let w_ih = fwd.param(self.w_ih)?;
        let w_hh = fwd.param(self.w_hh)?;
        let b = fwd.param(self.bias)?;
        let gx = fwd.tape.linear(x, w_ih, Some(b))?;
        let gh = fwd.tape.linear(h, w_hh, None)?;
        let gates = fwd.tape.add(gx, gh)?;
        let gates = fwd.tape.reshape(gates, vec![4, self.hidden])?;
        let i = fwd.tape.row(gates, 0)?;
        let i = fwd.tape.sigmoid(i);
        let f = fwd.tape.row(gates, 1)?;
        let f = fwd.tape.sigmoid(f);
        let g = fwd.tape.row(gates, 2)?;
        let g = fwd.tape.tanh(g);
        let o = fwd.tape.row(gates, 3)?;
        let o = fwd.tape.sigmoid(o);
        let fc = fwd.tape.mul(f, c)?;
        let ig = fwd.tape.mul(i, g)?;
        let c2 = fwd.tape.add(fc, ig)?;
        let tc = fwd.tape.tanh(c2);
        let h2 = fwd.tape.mul(o, tc)?;
        Ok((h2, c2))
    }

    /// Hidden states over the whole sequence, in sequence order. `reverse`
    /// walks the steps right-to-left (states still reported per position).
    fn sweep(
        &self,
        fwd: &mut Forward,
        seq: TensorId,
        reverse: bool,
    ) -> Result<Vec<TensorId>, TensorError> {
        let steps = fwd.tape.shape(seq)[0];
        let mut h = fwd.tape.constant(vec![0.0; self.hidden], vec![self.hidden])?;
        let mut c = fwd.tape.constant(vec![0.0; self.hidden], vec![self.hidden])?;
        let mut out = vec![None; steps];
        let order: Vec<usize> =
            if reverse { (0..steps).rev().collect() } else { (0..steps).collect() };
        for t in order {
            let x = fwd.tape.row(seq, t)?;
            let (h2, c2) = self.step(fwd, x, h, c)?;
            h = h2;
            c = c2;
            out[t] = Some(h);
        }
        Ok(out.into_iter().map(|t| t.expect("every step visited")).collect())
    }
}

/// One bidirectional layer: `[T, input] -> [T, 2 * hidden]`.
#[derive(Debug, Clone)]
pub struct BiLstm {
    forward_dir: LstmDir,
    backward_dir: LstmDir,
}

impl BiLstm {
    pub fn build(
        init: &mut Init,
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
    ) -> BiLstm {
        BiLstm {
            forward_dir: LstmDir::build(init, store, &format!("{name}.fwd"), input, hidden),
            backward_dir: LstmDir::build(init, store, &format!("{name}.bwd"), input, hidden),
        }
    }

    pub fn forward(&self, fwd: &mut Forward, seq: TensorId) -> Result<TensorId, TensorError> {
        let shape = fwd.tape.shape(seq);
        if shape.len() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "bilstm",
                detail: format!("expected a [steps, features] sequence, got {shape:?}"),
            });
        }
        let hf = self.forward_dir.sweep(fwd, seq, false)?;
        let hb = self.backward_dir.sweep(fwd, seq, true)?;
        let rows: Vec<TensorId> = hf
            .into_iter()
            .zip(hb)
            .map(|(f, b)| fwd.tape.concat(f, b))
            .collect::<Result<_, _>>()?;
        fwd.tape.stack(&rows)
    }
}
