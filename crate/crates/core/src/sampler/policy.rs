//! Recurrent dataset-selection policy: LSTM cell over the previous rewards
//! and probabilities, a tanh feedforward layer, then scaled dot-product
//! attention against one learned key per source dataset.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{GradRecord, GroupId, ParamSet, Tape, Tensor2, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyLayout {
    pub input_w: GroupId,
    pub hidden_w: GroupId,
    pub gate_b: GroupId,
    pub ff_w: GroupId,
    pub ff_b: GroupId,
    pub query_w: GroupId,
    pub keys: GroupId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyNet {
    pub k: usize,
    pub hidden: usize,
    pub layout: PolicyLayout,
    pub params: ParamSet,
}

/// Recurrent state carried across meta-steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyState {
    pub h: Vec<f64>,
    pub c: Vec<f64>,
}

impl PolicyState {
    pub fn zeros(hidden: usize) -> Self {
        PolicyState {
            h: vec![0.0; hidden],
            c: vec![0.0; hidden],
        }
    }
}

fn gaussian(rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> Tensor2 {
    let normal = Normal::new(0.0, std).expect("finite std");
    let data = (0..rows * cols).map(|_| normal.sample(rng)).collect();
    Tensor2::from_vec(rows, cols, data).expect("shape matches data")
}

impl PolicyNet {
    pub fn init(k: usize, hidden: usize, rng: &mut impl Rng) -> Result<Self> {
        if k == 0 || hidden == 0 {
            return Err(Error::InvalidArgument(
                "policy needs k >= 1 and hidden >= 1".into(),
            ));
        }
        let inp = 2 * k;
        let mut params = ParamSet::new();
        let input_w = params.push("policy.lstm.wx", gaussian(4 * hidden, inp, (1.0 / inp as f64).sqrt(), rng));
        let hidden_w = params.push(
            "policy.lstm.wh",
            gaussian(4 * hidden, hidden, (1.0 / hidden as f64).sqrt(), rng),
        );
        let mut b = Tensor2::zeros(1, 4 * hidden);
        for j in hidden..2 * hidden {
            b.set(0, j, 1.0);
        }
        let gate_b = params.push("policy.lstm.b", b);
        let ff_w = params.push("policy.ff.w", gaussian(hidden, hidden, (1.0 / hidden as f64).sqrt(), rng));
        let ff_b = params.push("policy.ff.b", Tensor2::zeros(1, hidden));
        let query_w = params.push(
            "policy.attn.query",
            gaussian(hidden, hidden, (1.0 / hidden as f64).sqrt(), rng),
        );
        let keys = params.push("policy.attn.keys", gaussian(k, hidden, (1.0 / hidden as f64).sqrt(), rng));
        Ok(PolicyNet {
            k,
            hidden,
            layout: PolicyLayout {
                input_w,
                hidden_w,
                gate_b,
                ff_w,
                ff_b,
                query_w,
                keys,
            },
            params,
        })
    }

    fn check_inputs(&self, state: &PolicyState, rewards: &[f64], probs: &[f64]) -> Result<()> {
        if rewards.len() != self.k || probs.len() != self.k {
            return Err(Error::shape(
                "policy input",
                format!("{} rewards and probabilities", self.k),
                format!("{} and {}", rewards.len(), probs.len()),
            ));
        }
        if state.h.len() != self.hidden || state.c.len() != self.hidden {
            return Err(Error::shape(
                "policy state",
                self.hidden.to_string(),
                format!("{} / {}", state.h.len(), state.c.len()),
            ));
        }
        Ok(())
    }

    /// Records one policy step against the parameters held by `tape`
    /// (normally `self.params`). The incoming state is treated as a constant
    /// (truncated backpropagation through time). Returns `(probs 1 x k, h, c)`.
    pub fn forward_tape(
        &self,
        tape: &mut Tape<'_>,
        state: &PolicyState,
        rewards: &[f64],
        probs: &[f64],
    ) -> Result<(Var, Var, Var)> {
        self.check_inputs(state, rewards, probs)?;
        let l = &self.layout;
        let hd = self.hidden;
        let mut input = rewards.to_vec();
        input.extend_from_slice(probs);
        let x = tape.input(Tensor2::row_vector(&input));
        let h_prev = tape.input(Tensor2::row_vector(&state.h));
        let c_prev = tape.input(Tensor2::row_vector(&state.c));

        let gx = tape.linear(x, l.input_w, Some(l.gate_b))?;
        let gh = tape.linear(h_prev, l.hidden_w, None)?;
        let gates = tape.add(gx, gh)?;
        let i_pre = tape.slice_cols(gates, 0, hd)?;
        let f_pre = tape.slice_cols(gates, hd, hd)?;
        let g_pre = tape.slice_cols(gates, 2 * hd, hd)?;
        let o_pre = tape.slice_cols(gates, 3 * hd, hd)?;
        let i = tape.sigmoid(i_pre);
        let f = tape.sigmoid(f_pre);
        let g = tape.tanh(g_pre);
        let o = tape.sigmoid(o_pre);
        let keep = tape.mul(f, c_prev)?;
        let write = tape.mul(i, g)?;
        let c = tape.add(keep, write)?;
        let c_act = tape.tanh(c);
        let h = tape.mul(o, c_act)?;

        let ff_pre = tape.linear(h, l.ff_w, Some(l.ff_b))?;
        let e = tape.tanh(ff_pre);
        let q = tape.linear(e, l.query_w, None)?;
        let scores = tape.linear(q, l.keys, None)?;
        let scaled = tape.scale(scores, 1.0 / (hd as f64).sqrt());
        let p = tape.softmax_rows(scaled);
        Ok((p, h, c))
    }

    /// Distribution over datasets and the next recurrent state.
    pub fn forward(
        &self,
        state: &PolicyState,
        rewards: &[f64],
        probs: &[f64],
    ) -> Result<(Vec<f64>, PolicyState)> {
        let mut tape = Tape::new(&self.params);
        let (p, h, c) = self.forward_tape(&mut tape, state, rewards, probs)?;
        Ok((
            tape.value(p).as_slice().to_vec(),
            PolicyState {
                h: tape.value(h).as_slice().to_vec(),
                c: tape.value(c).as_slice().to_vec(),
            },
        ))
    }

    /// Value and gradient of `sum_j weights[j] * P_j`; used to check the
    /// policy's derivatives in isolation.
    pub fn weighted_output(
        &self,
        params: &ParamSet,
        state: &PolicyState,
        rewards: &[f64],
        probs: &[f64],
        weights: &[f64],
    ) -> Result<(f64, GradRecord)> {
        let mut tape = Tape::new(params);
        let (p, _, _) = self.forward_tape(&mut tape, state, rewards, probs)?;
        let w = tape.input(Tensor2::row_vector(weights));
        let prod = tape.mul(p, w)?;
        let out = tape.sum(prod);
        let grads = tape.backward(out)?;
        Ok((tape.value(out).get(0, 0), grads))
    }
}
