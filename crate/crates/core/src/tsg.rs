//! Target-aware spatial grounding: pick the question word that names the
//! subject, then attend to the sounding regions of each segment's visual map
//! while gating with the subject's text-visual attention.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::LinearVars;
use crate::tensor::{Tape, Var};

pub const DEFAULT_TAU: f64 = 0.005;

/// How the outer softmax treats regions removed by the threshold.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GroundingMode {
    /// Masked regions keep logit 0 and so still receive weight `e^0`.
    #[default]
    Literal,
    /// Masked regions are excluded from the softmax.
    Renormalize,
}

impl GroundingMode {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "literal" => Some(GroundingMode::Literal),
            "renormalize" => Some(GroundingMode::Renormalize),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpatialConfig {
    pub tau: f64,
    pub target_aware: bool,
    pub mode: GroundingMode,
}

impl Default for SpatialConfig {
    fn default() -> Self {
        SpatialConfig { tau: DEFAULT_TAU, target_aware: true, mode: GroundingMode::Literal }
    }
}

impl SpatialConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau >= 0.0) || !self.tau.is_finite() {
            return Err(Error::contract(format!("tau must be a finite value >= 0, got {}", self.tau)));
        }
        Ok(())
    }
}

/// Question-side quantities on the tape.
#[derive(Clone, Debug)]
pub struct QuestionEncoding {
    pub f_q: Var,
    pub h_q: Var,
    pub s: Var,
    pub idx: usize,
    pub f_tgt: Var,
}

/// `s = softmax(h_q f_qᵀ / √d)`.
pub fn question_contribution_scores(tape: &mut Tape, h_q: Var, f_q: Var) -> Result<Var> {
    let d = tape.value(h_q).last_dim();
    let f_qt = tape.transpose(f_q)?;
    let logits = tape.matmul(h_q, f_qt)?;
    let logits = tape.scale(logits, 1.0 / (d as f64).sqrt())?;
    tape.softmax(logits)
}

/// Row of `f_q` with the largest score; ties go to the lowest index. The
/// choice itself carries no gradient.
pub fn select_target(tape: &mut Tape, s: Var, f_q: Var) -> Result<(usize, Var)> {
    let idx = tape.value(s).argmax();
    let f_tgt = tape.slice_rows(f_q, idx, 1)?;
    Ok((idx, f_tgt))
}

/// `softmax(probe · f_vmᵀ)` over the `hw` regions, unscaled.
pub fn spatial_attention(tape: &mut Tape, probe: Var, f_vm: Var) -> Result<Var> {
    let t = tape.transpose(f_vm)?;
    let logits = tape.matmul(probe, t)?;
    tape.softmax(logits)
}

/// Zeroes entries of `s_q` below `tau`; returns the gated map and which
/// entries survived.
pub fn threshold_mask(tape: &mut Tape, s_q: Var, tau: f64) -> Result<(Var, Vec<bool>)> {
    tape.threshold(s_q, tau)
}

/// Combined region weights `softmax(s_a ⊙ ŝ_q)`. With `gate = None` the
/// target gate is all ones.
pub fn combined_weights(
    tape: &mut Tape,
    s_a: Var,
    gate: Option<(Var, &[bool])>,
    mode: GroundingMode,
) -> Result<Var> {
    match gate {
        None => tape.softmax(s_a),
        Some((s_hat, keep)) => {
            let logits = tape.mul(s_a, s_hat)?;
            match mode {
                GroundingMode::Literal => tape.softmax(logits),
                GroundingMode::Renormalize => tape.softmax_masked(logits, keep),
            }
        }
    }
}

/// `f_v,i = softmax(s_a ⊙ ŝ_q) · f_vm`; returns the feature and the weights.
pub fn interesting_visual_feature(
    tape: &mut Tape,
    f_vm: Var,
    s_a: Var,
    gate: Option<(Var, &[bool])>,
    mode: GroundingMode,
) -> Result<(Var, Var)> {
    let att = combined_weights(tape, s_a, gate, mode)?;
    let f_vi = tape.matmul(att, f_vm)?;
    Ok((f_vi, att))
}

/// `FC(tanh([f_v,g ; f_v,i]))`.
pub fn fuse_visual(tape: &mut Tape, f_vg: Var, f_vi: Var, fc: &LinearVars) -> Result<Var> {
    let cat = tape.concat_cols(&[f_vg, f_vi])?;
    let act = tape.tanh(cat)?;
    fc.apply(tape, act)
}

/// Output of grounding one segment.
#[derive(Clone, Debug)]
pub struct SegmentGrounding {
    pub f_v: Var,
    pub s_a: Var,
    pub s_q: Option<Var>,
    pub weights: Var,
}

/// Full grounding of one segment: `f_vm` is `hw x d`, `audio` the projected
/// `1 x d` audio probe, `f_tgt` the target word feature.
pub fn ground_segment(
    tape: &mut Tape,
    f_vm: Var,
    audio: Var,
    f_tgt: Var,
    cfg: &SpatialConfig,
    fc: &LinearVars,
) -> Result<SegmentGrounding> {
    let f_vmt = tape.transpose(f_vm)?;
    let la = tape.matmul(audio, f_vmt)?;
    let s_a = tape.softmax(la)?;
    let (s_q, gate) = if cfg.target_aware {
        let lq = tape.matmul(f_tgt, f_vmt)?;
        let s_q = tape.softmax(lq)?;
        let (s_hat, keep) = tape.threshold(s_q, cfg.tau)?;
        (Some(s_q), Some((s_hat, keep)))
    } else {
        (None, None)
    };
    let gate_ref = gate.as_ref().map(|(v, k)| (*v, k.as_slice()));
    let (f_vi, weights) = interesting_visual_feature(tape, f_vm, s_a, gate_ref, cfg.mode)?;
    let f_vg = tape.mean_rows(f_vm)?;
    let f_v = fuse_visual(tape, f_vg, f_vi, fc)?;
    Ok(SegmentGrounding { f_v, s_a, s_q, weights })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Params, Tensor};
    use crate::tensor::grad_check;

    fn lcg(seed: u64, n: usize) -> Vec<f64> {
        let mut x = seed;
        (0..n)
            .map(|_| {
                x = x.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((x >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect()
    }

    fn rand(seed: u64, r: usize, c: usize) -> Tensor {
        Tensor::new(vec![r, c], lcg(seed, r * c)).unwrap()
    }

    fn softmax_ref(x: &[f64]) -> Vec<f64> {
        let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        e.iter().map(|v| v / s).collect()
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn identical_words_give_uniform_scores() {
        let mut t = Tape::new();
        let h = t.constant(rand(1, 1, 4));
        let row = lcg(2, 4);
        let f = t.constant(Tensor::from_rows(&vec![row; 5]).unwrap());
        let s = question_contribution_scores(&mut t, h, f).unwrap();
        for &v in t.value(s).data() {
            assert!((v - 0.2).abs() < 1e-12);
        }
    }

    #[test]
    fn scores_match_direct_formula() {
        let (hq, fq) = (rand(3, 1, 8), rand(4, 8, 8));
        let mut t = Tape::new();
        let h = t.constant(hq.clone());
        let f = t.constant(fq.clone());
        let s = question_contribution_scores(&mut t, h, f).unwrap();
        let logits: Vec<f64> =
            (0..8).map(|i| dot(hq.row(0), fq.row(i)) / 8f64.sqrt()).collect();
        let want = softmax_ref(&logits);
        for (a, b) in t.value(s).data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn orthogonal_probe_peaks_at_aligned_word() {
        let mut t = Tape::new();
        let h = t.constant(Tensor::row_vector(&[0.0, 0.0, 3.0, 0.0]));
        let f = t.constant(Tensor::identity(4));
        let s = question_contribution_scores(&mut t, h, f).unwrap();
        let (idx, _) = select_target(&mut t, s, f).unwrap();
        assert_eq!(idx, 2);
    }

    #[test]
    fn select_target_picks_row_and_breaks_ties_low() {
        let mut t = Tape::new();
        let f = t.constant(rand(5, 3, 2));
        let s = t.constant(Tensor::row_vector(&[0.1, 0.7, 0.2]));
        let (idx, tgt) = select_target(&mut t, s, f).unwrap();
        assert_eq!(idx, 1);
        assert_eq!(t.value(tgt).data(), t.value(f).row(1));
        let tie = t.constant(Tensor::row_vector(&[0.5, 0.5]));
        let f2 = t.constant(rand(6, 2, 2));
        assert_eq!(select_target(&mut t, tie, f2).unwrap().0, 0);
    }

    #[test]
    fn spatial_attention_examples() {
        let mut t = Tape::new();
        let probe = t.constant(Tensor::row_vector(&[0.0, 0.0, 1.0]));
        let map = t.constant(Tensor::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]]).unwrap());
        let s = spatial_attention(&mut t, probe, map).unwrap();
        assert_eq!(t.value(s).data(), &[0.5, 0.5]);

        let probe = t.constant(Tensor::row_vector(&[40.0, 0.0]));
        let map = t.constant(Tensor::from_rows(&[vec![40.0, 0.0], vec![0.0, 1.0], vec![0.0, -1.0]]).unwrap());
        let s = spatial_attention(&mut t, probe, map).unwrap();
        assert!(t.value(s).data()[0] > 1.0 - 1e-12);
    }

    #[test]
    fn spatial_attention_matches_direct_formula() {
        let (p, m) = (rand(7, 1, 6), rand(8, 9, 6));
        let mut t = Tape::new();
        let pv = t.constant(p.clone());
        let mv = t.constant(m.clone());
        let s = spatial_attention(&mut t, pv, mv).unwrap();
        let want = softmax_ref(&(0..9).map(|i| dot(p.row(0), m.row(i))).collect::<Vec<_>>());
        for (a, b) in t.value(s).data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn threshold_examples() {
        let mut t = Tape::new();
        let s = t.constant(Tensor::row_vector(&[0.6, 0.4]));
        let (z, keep) = threshold_mask(&mut t, s, 0.5).unwrap();
        assert_eq!(t.value(z).data(), &[0.6, 0.0]);
        assert_eq!(keep, vec![true, false]);
        let (z, _) = threshold_mask(&mut t, s, 0.0).unwrap();
        assert_eq!(t.value(z).data(), &[0.6, 0.4]);
    }

    #[test]
    fn interesting_feature_matches_direct_formula() {
        let (m, sa, sq) = (rand(9, 4, 3), rand(10, 1, 4), rand(11, 1, 4));
        let mut t = Tape::new();
        let mv = t.constant(m.clone());
        let sav = t.constant(sa.clone());
        let sqv = t.constant(sq.clone());
        let keep = vec![true; 4];
        let (fvi, _) =
            interesting_visual_feature(&mut t, mv, sav, Some((sqv, &keep)), GroundingMode::Literal).unwrap();
        let w = softmax_ref(&sa.data().iter().zip(sq.data()).map(|(a, b)| a * b).collect::<Vec<_>>());
        for j in 0..3 {
            let want: f64 = (0..4).map(|i| w[i] * m.get(i, j)).sum();
            assert!((t.value(fvi).data()[j] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn renormalize_excludes_masked_regions() {
        let mut t = Tape::new();
        let sa = t.constant(Tensor::row_vector(&[0.5, 0.3, 0.2]));
        let sq = t.constant(Tensor::row_vector(&[0.9, 0.1, 0.0]));
        let (gate, keep) = threshold_mask(&mut t, sq, 0.05).unwrap();
        let lit = combined_weights(&mut t, sa, Some((gate, &keep)), GroundingMode::Literal).unwrap();
        let ren = combined_weights(&mut t, sa, Some((gate, &keep)), GroundingMode::Renormalize).unwrap();
        assert!(t.value(lit).data()[2] > 0.2);
        assert_eq!(t.value(ren).data()[2], 0.0);
    }

    #[test]
    fn target_aware_off_depends_only_on_audio_probe() {
        let mut p = Params::new();
        p.insert("fc.w", rand(12, 6, 3));
        p.insert("fc.b", rand(13, 1, 3));
        let run = |tgt: Tensor| {
            let mut t = Tape::new();
            let v = p.bind(&mut t);
            let fc = LinearVars::bind(&v, "fc").unwrap();
            let m = t.constant(rand(14, 4, 3));
            let a = t.constant(rand(15, 1, 3));
            let g = t.constant(tgt);
            let cfg = SpatialConfig { target_aware: false, ..SpatialConfig::default() };
            let out = ground_segment(&mut t, m, a, g, &cfg, &fc).unwrap();
            t.value(out.f_v).clone()
        };
        assert_eq!(run(rand(16, 1, 3)), run(rand(17, 1, 3)));
    }

    #[test]
    fn fuse_visual_examples() {
        let mut t = Tape::new();
        let g = t.constant(Tensor::row_vector(&[0.3, -0.7]));
        let i = t.constant(Tensor::row_vector(&[0.9, 0.1]));
        let zero = LinearVars { w: t.constant(Tensor::zeros(&[4, 2])), b: t.constant(Tensor::zeros(&[1, 2])) };
        let out = fuse_visual(&mut t, g, i, &zero).unwrap();
        assert_eq!(t.value(out).data(), &[0.0, 0.0]);
        let mut w = Tensor::zeros(&[4, 2]);
        w.data_mut()[0] = 1.0;
        w.data_mut()[3] = 1.0;
        let id = LinearVars { w: t.constant(w), b: t.constant(Tensor::zeros(&[1, 2])) };
        let out = fuse_visual(&mut t, g, i, &id).unwrap();
        assert_eq!(t.value(out).data(), &[0.3f64.tanh(), (-0.7f64).tanh()]);
    }

    #[test]
    fn gradient_through_grounding_path() {
        for mode in [GroundingMode::Literal, GroundingMode::Renormalize] {
            let mut p = Params::new();
            p.insert("map", rand(20, 4, 3));
            p.insert("audio", rand(21, 1, 3));
            p.insert("words", rand(22, 3, 3));
            p.insert("hq", rand(23, 1, 3));
            p.insert("fc.w", rand(24, 6, 3));
            p.insert("fc.b", rand(25, 1, 3));
            let f = |t: &mut Tape, v: &crate::nn::Bound| {
                let s = question_contribution_scores(t, v["hq"], v["words"])?;
                let (_, tgt) = select_target(t, s, v["words"])?;
                let fc = LinearVars::bind(v, "fc")?;
                let cfg = SpatialConfig { tau: 0.2, target_aware: true, mode };
                let g = ground_segment(t, v["map"], v["audio"], tgt, &cfg, &fc)?;
                let sq = t.mul(g.f_v, g.f_v)?;
                let sm = t.sum(sq)?;
                let s2 = t.mul(s, s)?;
                let s2 = t.sum(s2)?;
                t.add(sm, s2)
            };
            let r = grad_check(f, &p, 1e-5).unwrap();
            assert!(r.passes(1e-4), "{mode:?}: {:?}", r.groups);
        }
    }
}
