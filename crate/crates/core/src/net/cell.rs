//! The attentional ConvLSTM cell.
//!
//! ```text
//! a = sigmoid(att([x, h_prev]))          three 3x3 convs, relu between
//! z = [a ∘ x, h_prev]
//! i = sigmoid(W_i * z + b_i)   f = sigmoid(W_f * z + b_f)
//! o = sigmoid(W_o * z + b_o)   c = tanh(W_c * z + b_c)
//! s = f ⊙ s_prev + i ⊙ c       h = o ⊙ tanh(s)
//! ```
//!
//! With attention disabled the gate input is `[x, h_prev]` and `a ≡ 1`.

use rand::{Rng, RngCore};

use super::{Model, Params, StateVars, Unit};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

const GATES: [&str; 4] = ["i", "f", "o", "c"];

/// Weights of one temporal unit.
#[derive(Clone, Debug, PartialEq)]
pub struct AcLstmWeights {
    /// `(weight, bias)` of the three attention convolutions.
    pub attention: [(Tensor, Tensor); 3],
    /// `(weight, bias)` for the i, f, o, c gates.
    pub gates: [(Tensor, Tensor); 4],
}

impl AcLstmWeights {
    pub fn from_params(params: &Params, unit: Unit) -> Result<Self> {
        let p = format!("lstm.{}", unit.name());
        let pair = |n: String| -> Result<(Tensor, Tensor)> {
            Ok((
                params.get(&format!("{}.weight", n))?.clone(),
                params.get(&format!("{}.bias", n))?.clone(),
            ))
        };
        Ok(AcLstmWeights {
            attention: [
                pair(format!("{}.att1", p))?,
                pair(format!("{}.att2", p))?,
                pair(format!("{}.att3", p))?,
            ],
            gates: [
                pair(format!("{}.gate_i", p))?,
                pair(format!("{}.gate_f", p))?,
                pair(format!("{}.gate_o", p))?,
                pair(format!("{}.gate_c", p))?,
            ],
        })
    }

    /// All-zero weights and biases for a unit of `channels` width.
    pub fn zeros(channels: usize) -> Self {
        let conv = |co: usize, ci: usize| (Tensor::zeros(&[co, ci, 3, 3]), Tensor::zeros(&[co]));
        let c = channels;
        AcLstmWeights {
            attention: [conv(c / 2, 2 * c), conv(c / 4, c / 2), conv(1, c / 4)],
            gates: [conv(c, 2 * c), conv(c, 2 * c), conv(c, 2 * c), conv(c, 2 * c)],
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct CellVars {
    attention: [(Var, Var); 3],
    gates: [(Var, Var); 4],
}

impl CellVars {
    pub(super) fn from_model(model: &Model, unit: Unit) -> Result<Self> {
        let p = format!("lstm.{}", unit.name());
        let pair = |n: &str| -> Result<(Var, Var)> {
            Ok((
                model.var(&format!("{}.{}.weight", p, n))?,
                model.var(&format!("{}.{}.bias", p, n))?,
            ))
        };
        Ok(CellVars {
            attention: [pair("att1")?, pair("att2")?, pair("att3")?],
            gates: [
                pair("gate_i")?,
                pair("gate_f")?,
                pair("gate_o")?,
                pair("gate_c")?,
            ],
        })
    }

    fn bind(tape: &mut Tape, w: &AcLstmWeights) -> Self {
        let mut pair = |(a, b): &(Tensor, Tensor), name: String| {
            (
                tape.param(format!("{}.weight", name), a.clone()),
                tape.param(format!("{}.bias", name), b.clone()),
            )
        };
        let attention = [
            pair(&w.attention[0], "att1".into()),
            pair(&w.attention[1], "att2".into()),
            pair(&w.attention[2], "att3".into()),
        ];
        let gates = [
            pair(&w.gates[0], format!("gate_{}", GATES[0])),
            pair(&w.gates[1], format!("gate_{}", GATES[1])),
            pair(&w.gates[2], format!("gate_{}", GATES[2])),
            pair(&w.gates[3], format!("gate_{}", GATES[3])),
        ];
        CellVars { attention, gates }
    }
}

pub(crate) fn step_on_tape(
    tape: &mut Tape,
    w: &CellVars,
    x: Var,
    prev: StateVars,
    dropout: f64,
    rng: &mut dyn RngCore,
    attention: bool,
) -> Result<(Var, Var, Var)> {
    if !(0.0..1.0).contains(&dropout) {
        return Err(Error::Config(format!("dropout rate {} not in [0,1)", dropout)));
    }
    let xd = tape.value(x).dims().to_vec();
    for (what, v) in [("h_prev", prev.h), ("s_prev", prev.s)] {
        if tape.value(v).dims() != xd.as_slice() {
            return Err(Error::shape(
                "ac_lstm_step",
                format!("x {:?} vs {} {:?}", xd, what, tape.value(v).dims()),
            ));
        }
    }
    let (a, gated) = if attention {
        let xh = tape.concat(x, prev.h)?;
        let (w1, b1) = w.attention[0];
        let (w2, b2) = w.attention[1];
        let (w3, b3) = w.attention[2];
        let c1 = tape.conv2d(xh, w1, b1, 1, 1)?;
        let r1 = tape.relu(c1);
        let c2 = tape.conv2d(r1, w2, b2, 1, 1)?;
        let r2 = tape.relu(c2);
        let c3 = tape.conv2d(r2, w3, b3, 1, 1)?;
        let a = tape.sigmoid(c3);
        (a, tape.chanwise_mul(a, x)?)
    } else {
        let ones = tape.constant(Tensor::full(&[1, xd[1], xd[2]], 1.0));
        (ones, x)
    };
    let gated = if dropout > 0.0 {
        let keep = 1.0 - dropout;
        let mut mask = Tensor::zeros(&xd);
        for m in mask.data_mut() {
            *m = if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 };
        }
        let mv = tape.constant(mask);
        tape.mul(gated, mv)?
    } else {
        gated
    };
    let z = tape.concat(gated, prev.h)?;
    let mut pre = [z; 4];
    for (g, &(wg, bg)) in w.gates.iter().enumerate() {
        pre[g] = tape.conv2d(z, wg, bg, 1, 1)?;
    }
    let i = tape.sigmoid(pre[0]);
    let f = tape.sigmoid(pre[1]);
    let o = tape.sigmoid(pre[2]);
    let c = tape.tanh(pre[3]);
    let fs = tape.mul(f, prev.s)?;
    let ic = tape.mul(i, c)?;
    let s = tape.add(fs, ic)?;
    let ts = tape.tanh(s);
    let h = tape.mul(o, ts)?;
    Ok((h, s, a))
}

#[derive(Clone, Debug, PartialEq)]
pub struct CellOutput {
    pub h: Tensor,
    pub s: Tensor,
    pub a: Tensor,
}

/// One cell step on plain tensors.
pub fn ac_lstm_step(
    x: &Tensor,
    h_prev: &Tensor,
    s_prev: &Tensor,
    weights: &AcLstmWeights,
    dropout: f64,
    rng: &mut dyn RngCore,
    attention_enabled: bool,
) -> Result<CellOutput> {
    let mut tape = Tape::new();
    let w = CellVars::bind(&mut tape, weights);
    let xv = tape.constant(x.clone());
    let prev = StateVars {
        h: tape.constant(h_prev.clone()),
        s: tape.constant(s_prev.clone()),
    };
    let (h, s, a) = step_on_tape(&mut tape, &w, xv, prev, dropout, rng, attention_enabled)?;
    Ok(CellOutput {
        h: tape.value(h).clone(),
        s: tape.value(s).clone(),
        a: tape.value(a).clone(),
    })
}
