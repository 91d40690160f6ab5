//! Joint temporal grounding over a single interleaved audio-visual sequence,
//! plus the synchrony loss between the per-modality temporal weights.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{LstmVars, MlpVars};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum InterleaveOrder {
    /// `[v1, a1, v2, a2, ...]`
    #[default]
    #[serde(rename = "va")]
    Va,
    /// `[a1, v1, a2, v2, ...]`
    #[serde(rename = "av")]
    Av,
    /// `[v1..vT, a1..aT]`
    #[serde(rename = "cat-va")]
    CatVa,
    /// `[a1..aT, v1..vT]`
    #[serde(rename = "cat-av")]
    CatAv,
}

impl InterleaveOrder {
    pub const ALL: [InterleaveOrder; 4] =
        [InterleaveOrder::Va, InterleaveOrder::Av, InterleaveOrder::CatVa, InterleaveOrder::CatAv];

    pub fn as_str(self) -> &'static str {
        match self {
            InterleaveOrder::Va => "va",
            InterleaveOrder::Av => "av",
            InterleaveOrder::CatVa => "cat-va",
            InterleaveOrder::CatAv => "cat-av",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|o| o.as_str() == s)
    }

    /// Position of `v_t` in the combined sequence.
    pub fn visual_position(self, t: usize, len: usize) -> usize {
        match self {
            InterleaveOrder::Va => 2 * t,
            InterleaveOrder::Av => 2 * t + 1,
            InterleaveOrder::CatVa => t,
            InterleaveOrder::CatAv => len + t,
        }
    }

    /// Position of `a_t` in the combined sequence.
    pub fn audio_position(self, t: usize, len: usize) -> usize {
        match self {
            InterleaveOrder::Va => 2 * t + 1,
            InterleaveOrder::Av => 2 * t,
            InterleaveOrder::CatVa => len + t,
            InterleaveOrder::CatAv => t,
        }
    }

    pub fn visual_positions(self, len: usize) -> Vec<usize> {
        (0..len).map(|t| self.visual_position(t, len)).collect()
    }

    pub fn audio_positions(self, len: usize) -> Vec<usize> {
        (0..len).map(|t| self.audio_position(t, len)).collect()
    }

    /// Row indices into `[V; A]` (visual rows first) that produce the
    /// combined sequence.
    pub fn gather_indices(self, len: usize) -> Vec<usize> {
        let mut idx = vec![0; 2 * len];
        for t in 0..len {
            idx[self.visual_position(t, len)] = t;
            idx[self.audio_position(t, len)] = len + t;
        }
        idx
    }
}

impl std::fmt::Display for InterleaveOrder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A `2T x d` sequence holding both modalities in a known order.
#[derive(Clone, Debug, PartialEq)]
pub struct InterleavedSequence {
    pub f_av: Tensor,
    pub order: InterleaveOrder,
}

impl InterleavedSequence {
    pub fn new(f_v: &Tensor, f_a: &Tensor, order: InterleaveOrder) -> Result<Self> {
        if f_v.shape() != f_a.shape() || f_v.rank() != 2 {
            return Err(Error::shape("interleave", f_v.shape(), f_a.shape()));
        }
        let (len, d) = f_v.dims2()?;
        let mut data = vec![0.0; 2 * len * d];
        for t in 0..len {
            let v = order.visual_position(t, len);
            let a = order.audio_position(t, len);
            data[v * d..(v + 1) * d].copy_from_slice(f_v.row(t));
            data[a * d..(a + 1) * d].copy_from_slice(f_a.row(t));
        }
        Ok(InterleavedSequence { f_av: Tensor::new(vec![2 * len, d], data)?, order })
    }

    pub fn segments(&self) -> usize {
        self.f_av.shape()[0] / 2
    }

    /// Splits back into `(V, A)`.
    pub fn deinterleave(&self) -> Result<(Tensor, Tensor)> {
        let (rows, d) = self.f_av.dims2()?;
        let len = rows / 2;
        let pick = |pos: Vec<usize>| {
            let data = pos.iter().flat_map(|&p| self.f_av.row(p).iter().copied()).collect();
            Tensor::new(vec![len, d], data)
        };
        Ok((pick(self.order.visual_positions(len))?, pick(self.order.audio_positions(len))?))
    }
}

/// Value-level temporal weights of one example.
#[derive(Clone, Debug, PartialEq)]
pub struct TemporalWeights {
    pub w_av: Tensor,
    /// Raw audio slice of `w_av`.
    pub w_a_raw: Tensor,
    /// Raw visual slice of `w_av`.
    pub w_v_raw: Tensor,
    /// Renormalized to a simplex.
    pub w_a: Tensor,
    pub w_v: Tensor,
}

/// Single-layer LSTM. Returns the hidden states (`L x hidden`) and `[h_L; c_L]`.
pub fn encode_sequence(tape: &mut Tape, x: Var, lstm: &LstmVars) -> Result<(Var, Var)> {
    let (steps, _) = tape.value(x).dims2()?;
    let hidden = tape.value(lstm.w_hh).shape()[0];
    let xw = tape.matmul(x, lstm.w_ih)?;
    let xw = tape.add_row(xw, lstm.b)?;
    let mut h: Option<Var> = None;
    let mut c: Option<Var> = None;
    let mut outs = Vec::with_capacity(steps);
    for t in 0..steps {
        let mut gates = tape.slice_rows(xw, t, 1)?;
        if let Some(h) = h {
            let hw = tape.matmul(h, lstm.w_hh)?;
            gates = tape.add(gates, hw)?;
        }
        let i = tape.slice_cols(gates, 0, hidden)?;
        let i = tape.sigmoid(i)?;
        let f = tape.slice_cols(gates, hidden, hidden)?;
        let f = tape.sigmoid(f)?;
        let g = tape.slice_cols(gates, 2 * hidden, hidden)?;
        let g = tape.tanh(g)?;
        let o = tape.slice_cols(gates, 3 * hidden, hidden)?;
        let o = tape.sigmoid(o)?;
        let ig = tape.mul(i, g)?;
        let c_new = match c {
            Some(c) => {
                let fc = tape.mul(f, c)?;
                tape.add(fc, ig)?
            }
            None => ig,
        };
        let tc = tape.tanh(c_new)?;
        let h_new = tape.mul(o, tc)?;
        outs.push(h_new);
        h = Some(h_new);
        c = Some(c_new);
    }
    let outputs = tape.concat_rows(&outs)?;
    let (h, c) = match (h, c) {
        (Some(h), Some(c)) => (h, c),
        _ => return Err(Error::contract("cannot encode an empty sequence")),
    };
    let last = tape.concat_rows(&[h, c])?;
    Ok((outputs, last))
}

pub fn interleave(tape: &mut Tape, f_v: Var, f_a: Var, order: InterleaveOrder) -> Result<Var> {
    if tape.value(f_v).shape() != tape.value(f_a).shape() {
        return Err(Error::shape("interleave", tape.value(f_v).shape(), tape.value(f_a).shape()));
    }
    let len = tape.value(f_v).shape()[0];
    let both = tape.concat_rows(&[f_v, f_a])?;
    tape.gather_rows(both, &order.gather_indices(len))
}

/// Query/key projections of the temporal attention.
#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub w_q: Var,
    pub w_k: Var,
}

impl AttentionVars {
    pub fn bind(vars: &crate::nn::Bound, prefix: &str) -> Result<Self> {
        Ok(AttentionVars {
            w_q: crate::nn::lookup(vars, &format!("{prefix}.w_q"))?,
            w_k: crate::nn::lookup(vars, &format!("{prefix}.w_k"))?,
        })
    }
}

/// `w_av = softmax((h_q W_q)(f_av W_k)ᵀ)`, `f_att = w_av f_av`,
/// `f_avq = f_att + MLP(mean(f_av))`.
///
/// With `heads > 1` the projected query and keys are split into equal column
/// blocks, each block gives its own softmax, and `w_av` is their mean.
pub fn temporal_attention(
    tape: &mut Tape,
    h_q: Var,
    f_av: Var,
    attn: &AttentionVars,
    mlp: &MlpVars,
    heads: usize,
) -> Result<(Var, Var)> {
    let q = tape.matmul(h_q, attn.w_q)?;
    let k = tape.matmul(f_av, attn.w_k)?;
    let w_av = if heads <= 1 {
        let kt = tape.transpose(k)?;
        let logits = tape.matmul(q, kt)?;
        tape.softmax(logits)?
    } else {
        let d = tape.value(q).last_dim();
        if d % heads != 0 {
            return Err(Error::contract(format!("dimension {d} is not divisible by {heads} heads")));
        }
        let w = d / heads;
        let mut acc: Option<Var> = None;
        for hd in 0..heads {
            let qh = tape.slice_cols(q, hd * w, w)?;
            let kh = tape.slice_cols(k, hd * w, w)?;
            let kt = tape.transpose(kh)?;
            let logits = tape.matmul(qh, kt)?;
            let p = tape.softmax(logits)?;
            acc = Some(match acc {
                Some(a) => tape.add(a, p)?,
                None => p,
            });
        }
        let sum = acc.expect("at least one head");
        tape.scale(sum, 1.0 / heads as f64)?
    };
    let f_att = tape.matmul(w_av, f_av)?;
    let pooled = tape.mean_rows(f_av)?;
    let res = mlp.apply(tape, pooled)?;
    let f_avq = tape.add(f_att, res)?;
    Ok((f_avq, w_av))
}

/// Per-modality weights on the tape.
#[derive(Clone, Copy, Debug)]
pub struct ModalWeights {
    pub w_a_raw: Var,
    pub w_v_raw: Var,
    pub w_a: Var,
    pub w_v: Var,
}

/// Pulls the audio and visual entries out of `w_av` following `order`, then
/// rescales each to sum to one.
pub fn extract_modal_weights(tape: &mut Tape, w_av: Var, order: InterleaveOrder) -> Result<ModalWeights> {
    let n = tape.value(w_av).len();
    if n % 2 != 0 {
        return Err(Error::contract(format!("interleaved weights must have even length, got {n}")));
    }
    let len = n / 2;
    let w_a_raw = tape.gather_cols(w_av, &order.audio_positions(len))?;
    let w_v_raw = tape.gather_cols(w_av, &order.visual_positions(len))?;
    let w_a = tape.unit_sum(w_a_raw)?;
    let w_v = tape.unit_sum(w_v_raw)?;
    Ok(ModalWeights { w_a_raw, w_v_raw, w_a, w_v })
}

pub fn csl_loss(tape: &mut Tape, w_a: Var, w_v: Var) -> Result<Var> {
    tape.js(w_a, w_v)
}

/// `A_q = softmax(h_q f_aᵀ/√d)`, `V_q = softmax(h_q f_vᵀ/√d)`.
pub fn question_aware_weights(tape: &mut Tape, h_q: Var, f_a: Var, f_v: Var) -> Result<(Var, Var)> {
    let a = crate::tsg::question_contribution_scores(tape, h_q, f_a)?;
    let v = crate::tsg::question_contribution_scores(tape, h_q, f_v)?;
    Ok((a, v))
}
