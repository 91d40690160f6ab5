//! Answer prediction, the audio-visual matching head, and loss composition.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{LinearVars, MlpVars};
use crate::tensor::{Tape, Var};

pub const DEFAULT_LAMBDA: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda: f64,
    pub csl_enabled: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda: DEFAULT_LAMBDA, csl_enabled: true }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::contract(format!("lambda must be a finite value >= 0, got {}", self.lambda)));
        }
        Ok(())
    }

    pub fn combine(&self, l_qa: f64, l_csl: f64, l_s: f64) -> f64 {
        let csl = if self.csl_enabled { l_csl } else { 0.0 };
        l_qa + csl + self.lambda * l_s
    }
}

/// `e = f_avq ⊙ h_q`.
pub fn fuse_answer(tape: &mut Tape, f_avq: Var, h_q: Var) -> Result<Var> {
    tape.mul(f_avq, h_q)
}

/// Answer distribution `softmax(e W + b)`.
pub fn predict(tape: &mut Tape, e: Var, answer: &LinearVars) -> Result<Var> {
    let logits = answer.apply(tape, e)?;
    tape.softmax(logits)
}

pub fn qa_loss(tape: &mut Tape, p: Var, y: usize) -> Result<Var> {
    tape.nll(p, y)
}

/// Per-segment matching logits `MLP([f_v; f_a])`, shape `T x 1`.
pub fn matching_logits(tape: &mut Tape, f_v: Var, f_a: Var, mlp: &MlpVars) -> Result<Var> {
    let cat = tape.concat_cols(&[f_v, f_a])?;
    mlp.apply(tape, cat)
}

/// Binary cross-entropy of `sigmoid(MLP([f_v; f_a]))` against `label`,
/// averaged over segments.
pub fn matching_loss(tape: &mut Tape, f_v: Var, f_a: Var, label: u8, mlp: &MlpVars) -> Result<(Var, Var)> {
    if label > 1 {
        return Err(Error::contract(format!("match label must be 0 or 1, got {label}")));
    }
    let z = matching_logits(tape, f_v, f_a, mlp)?;
    let n = tape.value(z).len();
    let loss = tape.bce_with_logits(z, &vec![label as f64; n])?;
    Ok((loss, z))
}

/// `L = L_qa + L_csl + λ L_s`, dropping `L_csl` when disabled.
pub fn total_loss(tape: &mut Tape, l_qa: Var, l_csl: Var, l_s: Var, w: &LossWeights) -> Result<Var> {
    let mut total = l_qa;
    if w.csl_enabled {
        total = tape.add(total, l_csl)?;
    }
    if w.lambda != 0.0 {
        let s = tape.scale(l_s, w.lambda)?;
        total = tape.add(total, s)?;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Bound;
    use crate::tensor::grad_check;
    use crate::tensor::{Params, Tensor};

    fn rand(seed: u64, r: usize, c: usize) -> Tensor {
        let mut x = seed.wrapping_add(17);
        let data = (0..r * c)
            .map(|_| {
                x = x.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((x >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect();
        Tensor::new(vec![r, c], data).unwrap()
    }

    #[test]
    fn fuse_answer_examples() {
        let mut t = Tape::new();
        let f = rand(1, 1, 5);
        let fv = t.constant(f.clone());
        let ones = t.constant(Tensor::ones(&[1, 5]));
        let e = fuse_answer(&mut t, fv, ones).unwrap();
        assert_eq!(t.value(e), &f);
        let zero = t.constant(Tensor::zeros(&[1, 5]));
        let e = fuse_answer(&mut t, fv, zero).unwrap();
        assert!(t.value(e).data().iter().all(|&x| x == 0.0));
        let h = rand(2, 1, 5);
        let hv = t.constant(h.clone());
        let e = fuse_answer(&mut t, fv, hv).unwrap();
        for i in 0..5 {
            assert_eq!(t.value(e).data()[i], f.data()[i] * h.data()[i]);
        }
    }

    #[test]
    fn predict_examples() {
        let mut t = Tape::new();
        let e = t.constant(rand(3, 1, 4));
        let zero = LinearVars { w: t.constant(Tensor::zeros(&[4, 4])), b: t.constant(Tensor::zeros(&[1, 4])) };
        let p = predict(&mut t, e, &zero).unwrap();
        assert!(t.value(p).data().iter().all(|&x| (x - 0.25).abs() < 1e-15));
        let l = qa_loss(&mut t, p, 2).unwrap();
        assert!((t.value(l).item() - 4f64.ln()).abs() < 1e-12);

        let mut b = Tensor::zeros(&[1, 3]);
        b.data_mut()[1] = 30.0;
        let peak = LinearVars { w: t.constant(Tensor::zeros(&[4, 3])), b: t.constant(b) };
        let p = predict(&mut t, e, &peak).unwrap();
        assert_eq!(t.value(p).argmax(), 1);
        assert!(qa_loss(&mut t, p, 3).is_err());
    }

    #[test]
    fn qa_loss_is_minus_log_p() {
        let mut t = Tape::new();
        let p = t.constant(Tensor::row_vector(&[0.1, 0.6, 0.3]));
        for y in 0..3 {
            let l = qa_loss(&mut t, p, y).unwrap();
            assert!((t.value(l).item() + t.value(p).data()[y].ln()).abs() < 1e-15);
        }
        let one_hot = t.constant(Tensor::row_vector(&[0.0, 1.0]));
        let l = qa_loss(&mut t, one_hot, 1).unwrap();
        assert_eq!(t.value(l).item(), 0.0);
    }

    #[test]
    fn zero_matching_mlp_gives_ln2() {
        let mut t = Tape::new();
        let fv = t.constant(rand(4, 3, 2));
        let fa = t.constant(rand(5, 3, 2));
        let z4 = t.constant(Tensor::zeros(&[4, 2]));
        let z2 = t.constant(Tensor::zeros(&[1, 2]));
        let zo = t.constant(Tensor::zeros(&[2, 1]));
        let zb = t.constant(Tensor::zeros(&[1, 1]));
        let mlp = MlpVars { hidden: LinearVars { w: z4, b: z2 }, out: LinearVars { w: zo, b: zb } };
        for label in [0, 1] {
            let (l, _) = matching_loss(&mut t, fv, fa, label, &mlp).unwrap();
            assert!((t.value(l).item() - std::f64::consts::LN_2).abs() < 1e-15);
        }
        assert!(matching_loss(&mut t, fv, fa, 2, &mlp).is_err());
    }

    #[test]
    fn total_loss_examples() {
        let mut t = Tape::new();
        let q = t.constant(Tensor::scalar(1.0));
        let c = t.constant(Tensor::scalar(0.2));
        let s = t.constant(Tensor::scalar(0.4));
        let w = LossWeights::default();
        assert_eq!(w.lambda, 0.5);
        let l = total_loss(&mut t, q, c, s, &w).unwrap();
        assert!((t.value(l).item() - 1.4).abs() < 1e-15);
        assert!((w.combine(1.0, 0.2, 0.4) - 1.4).abs() < 1e-15);
        let off = LossWeights { csl_enabled: false, ..w };
        let l = total_loss(&mut t, q, c, s, &off).unwrap();
        assert!((t.value(l).item() - 1.2).abs() < 1e-15);
        assert!(LossWeights { lambda: -1.0, ..w }.validate().is_err());
    }

    #[test]
    fn head_gradients() {
        let mut p = Params::new();
        p.insert("f", rand(10, 1, 4));
        p.insert("h", rand(11, 1, 4));
        p.insert("ans.w", rand(12, 4, 3));
        p.insert("ans.b", rand(13, 1, 3));
        p.insert("fv", rand(14, 3, 4));
        p.insert("fa", rand(15, 3, 4));
        p.insert("m.hidden.w", rand(16, 8, 4));
        p.insert("m.hidden.b", rand(17, 1, 4));
        p.insert("m.out.w", rand(18, 4, 1));
        p.insert("m.out.b", rand(19, 1, 1));
        let f = |t: &mut Tape, v: &Bound| {
            let e = fuse_answer(t, v["f"], v["h"])?;
            let pr = predict(t, e, &LinearVars::bind(v, "ans")?)?;
            let lq = qa_loss(t, pr, 2)?;
            let (ls, _) = matching_loss(t, v["fv"], v["fa"], 0, &MlpVars::bind(v, "m")?)?;
            let zero = t.constant(Tensor::scalar(0.0));
            total_loss(t, lq, zero, ls, &LossWeights::default())
        };
        let r = grad_check(f, &p, 1e-5).unwrap();
        assert!(r.passes(1e-4), "{:?}", r.groups);
    }
}
