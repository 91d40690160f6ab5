//! The full network: parameter layout, initialization, and the per-scene
//! forward pass wiring question encoding, spatial grounding, temporal
//! grounding and the heads together.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::head::{self, LossWeights};
use crate::jtg::{self, AttentionVars, InterleaveOrder, ModalWeights, TemporalWeights};
use crate::nn::{Bound, LinearVars, LstmVars, MlpVars};
use crate::synth::Scene;
use crate::tensor::{Params, Tape, Tensor, Var};
use crate::tsg::{self, QuestionEncoding, SegmentGrounding, SpatialConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub dim: usize,
    pub answers: usize,
    #[serde(default = "one")]
    pub heads: usize,
    #[serde(default)]
    pub spatial: SpatialConfig,
    #[serde(default)]
    pub order: InterleaveOrder,
}

fn one() -> usize {
    1
}

impl ModelConfig {
    pub fn new(dim: usize, answers: usize) -> Self {
        ModelConfig { dim, answers, heads: 1, spatial: SpatialConfig::default(), order: InterleaveOrder::Va }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::contract("dim must be >= 1"));
        }
        if self.answers == 0 {
            return Err(Error::contract("answers must be >= 1"));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::contract(format!(
                "heads must divide dim ({} does not divide {})",
                self.heads, self.dim
            )));
        }
        self.spatial.validate()
    }

    /// Every parameter as `(name, shape, fan_in)`, sorted by name.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>, usize)> {
        let d = self.dim;
        let mut out = Vec::new();
        let mut linear = |p: &str, i: usize, o: usize| {
            out.push((format!("{p}.w"), vec![i, o], i));
            out.push((format!("{p}.b"), vec![1, o], i));
        };
        linear("audio_proj", d, d);
        linear("tsg_fc", 2 * d, d);
        linear("q_mlp.hidden", 2 * d, d);
        linear("q_mlp.out", d, d);
        linear("av_mlp.hidden", d, d);
        linear("av_mlp.out", d, d);
        linear("answer", d, self.answers);
        linear("match_mlp.hidden", 2 * d, d);
        linear("match_mlp.out", d, 1);
        for p in ["q_lstm", "v_lstm", "a_lstm"] {
            out.push((format!("{p}.w_ih"), vec![d, 4 * d], d));
            out.push((format!("{p}.w_hh"), vec![d, 4 * d], d));
            out.push((format!("{p}.b"), vec![1, 4 * d], d));
        }
        out.push(("attn.w_q".into(), vec![d, d], d));
        out.push(("attn.w_k".into(), vec![d, d], d));
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.parameter_shapes().iter().map(|(_, s, _)| s.iter().product::<usize>()).sum()
    }

    /// Parameter groups, i.e. name prefixes before the last component.
    pub fn parameter_groups(&self) -> Vec<String> {
        let mut g: Vec<String> = self
            .parameter_shapes()
            .into_iter()
            .map(|(n, _, _)| group_of(&n).to_string())
            .collect();
        g.dedup();
        g
    }
}

/// Group of a parameter name: everything before the last `.`.
pub fn group_of(name: &str) -> &str {
    name.rsplit_once('.').map_or(name, |(g, _)| g)
}

/// Draws every parameter from `uniform(-1/sqrt(fan_in), 1/sqrt(fan_in))`,
/// visiting parameters in name order with one ChaCha20 stream.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Params {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut params = Params::new();
    for (name, shape, fan_in) in cfg.parameter_shapes() {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
        params.insert(name, Tensor::new(shape, data).expect("valid shape"));
    }
    params
}

/// Checks that `params` has exactly the layout `cfg` expects.
pub fn check_params(cfg: &ModelConfig, params: &Params) -> Result<()> {
    let want = cfg.parameter_shapes();
    if want.len() != params.len() {
        return Err(Error::contract(format!(
            "expected {} parameter tensors, found {}",
            want.len(),
            params.len()
        )));
    }
    for (name, shape, _) in want {
        match params.get(&name) {
            None => return Err(Error::contract(format!("missing parameter `{name}`"))),
            Some(t) if t.shape() != shape.as_slice() => {
                return Err(Error::contract(format!(
                    "parameter `{name}` has shape {:?}, expected {:?}",
                    t.shape(),
                    shape
                )))
            }
            _ => {}
        }
    }
    Ok(())
}

/// All parameter handles of one tape.
#[derive(Clone, Copy, Debug)]
pub struct ModelVars {
    pub q_lstm: LstmVars,
    pub q_mlp: MlpVars,
    pub audio_proj: LinearVars,
    pub tsg_fc: LinearVars,
    pub v_lstm: LstmVars,
    pub a_lstm: LstmVars,
    pub attn: AttentionVars,
    pub av_mlp: MlpVars,
    pub answer: LinearVars,
    pub match_mlp: MlpVars,
}

impl ModelVars {
    pub fn bind(vars: &Bound) -> Result<Self> {
        Ok(ModelVars {
            q_lstm: LstmVars::bind(vars, "q_lstm")?,
            q_mlp: MlpVars::bind(vars, "q_mlp")?,
            audio_proj: LinearVars::bind(vars, "audio_proj")?,
            tsg_fc: LinearVars::bind(vars, "tsg_fc")?,
            v_lstm: LstmVars::bind(vars, "v_lstm")?,
            a_lstm: LstmVars::bind(vars, "a_lstm")?,
            attn: AttentionVars::bind(vars, "attn")?,
            av_mlp: MlpVars::bind(vars, "av_mlp")?,
            answer: LinearVars::bind(vars, "answer")?,
            match_mlp: MlpVars::bind(vars, "match_mlp")?,
        })
    }
}

/// Word features through the question LSTM; `h_q = MLP([h_N, c_N])`.
pub fn encode_question(tape: &mut Tape, m: &ModelVars, words: &Tensor) -> Result<QuestionEncoding> {
    let x = tape.constant(words.clone());
    let (f_q, last) = jtg::encode_sequence(tape, x, &m.q_lstm)?;
    let d = tape.value(f_q).last_dim();
    let flat = tape.reshape(last, &[1, 2 * d])?;
    let h_q = m.q_mlp.apply(tape, flat)?;
    let s = tsg::question_contribution_scores(tape, h_q, f_q)?;
    let (idx, f_tgt) = tsg::select_target(tape, s, f_q)?;
    Ok(QuestionEncoding { f_q, h_q, s, idx, f_tgt })
}

/// Grounded per-segment features of one audio/visual pairing.
#[derive(Clone, Debug)]
pub struct Grounded {
    /// `T x d` fused visual features.
    pub f_v: Var,
    /// `T x d` projected audio.
    pub f_a: Var,
    pub segments: Vec<SegmentGrounding>,
}

pub fn ground_video(
    tape: &mut Tape,
    m: &ModelVars,
    cfg: &ModelConfig,
    scene: &Scene,
    audio: &Tensor,
    f_tgt: Var,
) -> Result<Grounded> {
    let (t_len, d) = audio.dims2()?;
    if t_len != scene.gt_temporal.len() || d != cfg.dim {
        return Err(Error::shape("ground_video", audio.shape(), scene.visual_map.shape()));
    }
    let a = tape.constant(audio.clone());
    let f_a = m.audio_proj.apply(tape, a)?;
    let mut segments = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let f_vm = tape.constant(scene.visual_segment(t));
        let probe = tape.slice_rows(f_a, t, 1)?;
        segments.push(tsg::ground_segment(tape, f_vm, probe, f_tgt, &cfg.spatial, &m.tsg_fc)?);
    }
    let rows: Vec<Var> = segments.iter().map(|s| s.f_v).collect();
    let f_v = tape.concat_rows(&rows)?;
    Ok(Grounded { f_v, f_a, segments })
}

/// Everything the forward pass of one scene records.
#[derive(Clone, Debug)]
pub struct SceneForward {
    pub question: QuestionEncoding,
    pub grounded: Grounded,
    pub w_av: Var,
    pub modal: ModalWeights,
    pub probs: Var,
}

/// Answer path only.
pub fn forward(tape: &mut Tape, m: &ModelVars, cfg: &ModelConfig, scene: &Scene) -> Result<SceneForward> {
    let question = encode_question(tape, m, &scene.question_words)?;
    let grounded = ground_video(tape, m, cfg, scene, &scene.audio, question.f_tgt)?;
    let (v_enc, _) = jtg::encode_sequence(tape, grounded.f_v, &m.v_lstm)?;
    let (a_enc, _) = jtg::encode_sequence(tape, grounded.f_a, &m.a_lstm)?;
    let f_av = jtg::interleave(tape, v_enc, a_enc, cfg.order)?;
    let (f_avq, w_av) = jtg::temporal_attention(tape, question.h_q, f_av, &m.attn, &m.av_mlp, cfg.heads)?;
    let modal = jtg::extract_modal_weights(tape, w_av, cfg.order)?;
    let e = head::fuse_answer(tape, f_avq, question.h_q)?;
    let probs = head::predict(tape, e, &m.answer)?;
    Ok(SceneForward { question, grounded, w_av, modal, probs })
}

/// Losses of one scene in joint training.
#[derive(Clone, Debug)]
pub struct SceneLosses {
    pub forward: SceneForward,
    pub l_qa: Var,
    pub l_csl: Var,
    pub l_s: Var,
    pub total: Var,
}

/// Matching loss of the scene's visuals against `match_audio`, reusing an
/// existing grounding when the pair is aligned.
fn pair_loss(
    tape: &mut Tape,
    m: &ModelVars,
    cfg: &ModelConfig,
    scene: &Scene,
    match_audio: &Tensor,
    f_tgt: Var,
    aligned: Option<&Grounded>,
) -> Result<(Var, Var)> {
    let owned;
    let g = match aligned {
        Some(g) if scene.match_label == 1 => g,
        _ => {
            owned = ground_video(tape, m, cfg, scene, match_audio, f_tgt)?;
            &owned
        }
    };
    head::matching_loss(tape, g.f_v, g.f_a, scene.match_label, &m.match_mlp)
}

/// `L = L_qa + L_csl + λ L_s` for one scene. `match_audio` is the audio
/// paired with the scene's visuals for the matching task.
pub fn scene_losses(
    tape: &mut Tape,
    m: &ModelVars,
    cfg: &ModelConfig,
    scene: &Scene,
    match_audio: &Tensor,
    weights: &LossWeights,
) -> Result<SceneLosses> {
    let forward = forward(tape, m, cfg, scene)?;
    let l_qa = head::qa_loss(tape, forward.probs, scene.answer)?;
    let l_csl = jtg::csl_loss(tape, forward.modal.w_a, forward.modal.w_v)?;
    let (l_s, _) = pair_loss(tape, m, cfg, scene, match_audio, forward.question.f_tgt, Some(&forward.grounded))?;
    let total = head::total_loss(tape, l_qa, l_csl, l_s, weights)?;
    Ok(SceneLosses { forward, l_qa, l_csl, l_s, total })
}

/// Matching-only pass used in the first training stage. Returns `L_s` and
/// the `T x 1` logits.
pub fn matching_pass(
    tape: &mut Tape,
    m: &ModelVars,
    cfg: &ModelConfig,
    scene: &Scene,
    match_audio: &Tensor,
) -> Result<(Var, Var)> {
    let q = encode_question(tape, m, &scene.question_words)?;
    pair_loss(tape, m, cfg, scene, match_audio, q.f_tgt, None)
}

/// Value-level view of one scene's forward pass.
#[derive(Clone, Debug)]
pub struct Inspection {
    pub target_index: usize,
    pub scores: Tensor,
    /// Per segment, the combined region weights (`1 x hw`).
    pub spatial: Vec<Tensor>,
    pub temporal: TemporalWeights,
    pub probs: Tensor,
    pub predicted: usize,
}

/// A trained or freshly initialized network.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: Params,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = init_params(&config, seed);
        Ok(Model { config, params })
    }

    pub fn from_params(config: ModelConfig, params: Params) -> Result<Self> {
        config.validate()?;
        check_params(&config, &params)?;
        Ok(Model { config, params })
    }

    pub fn inspect(&self, scene: &Scene) -> Result<Inspection> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let m = ModelVars::bind(&bound)?;
        let f = forward(&mut tape, &m, &self.config, scene)?;
        let val = |v: Var| tape.value(v).clone();
        let probs = val(f.probs);
        Ok(Inspection {
            target_index: f.question.idx,
            scores: val(f.question.s),
            spatial: f.grounded.segments.iter().map(|s| val(s.weights)).collect(),
            temporal: TemporalWeights {
                w_av: val(f.w_av),
                w_a_raw: val(f.modal.w_a_raw),
                w_v_raw: val(f.modal.w_v_raw),
                w_a: val(f.modal.w_a),
                w_v: val(f.modal.w_v),
            },
            predicted: probs.argmax(),
            probs,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{gen_scene, TaskConfig, World};
    use crate::tensor::grad_check;

    fn tiny_task() -> TaskConfig {
        TaskConfig {
            segments: 3,
            words: 4,
            grid_h: 2,
            grid_w: 2,
            dim: 8,
            answers: 3,
            concepts: 3,
            noise_sigma: 0.1,
            seed: 5,
            ..TaskConfig::default()
        }
    }

    #[test]
    fn parameter_layout() {
        let cfg = ModelConfig::new(16, 4);
        let shapes = cfg.parameter_shapes();
        let names: Vec<&str> = shapes.iter().map(|s| s.0.as_str()).collect();
        let mut sorted = names.clone();
        sorted.sort();
        assert_eq!(names, sorted);
        let d = 16;
        let lstm = 3 * (2 * d * 4 * d + 4 * d);
        let lin = |i: usize, o: usize| i * o + o;
        let want = lstm
            + lin(d, d)
            + lin(2 * d, d)
            + lin(2 * d, d)
            + lin(d, d)
            + 2 * lin(d, d)
            + lin(d, 4)
            + lin(2 * d, d)
            + lin(d, 1)
            + 2 * d * d;
        assert_eq!(cfg.parameter_count(), want);
        let model = Model::new(cfg.clone(), 1).unwrap();
        assert_eq!(model.params.num_scalars(), want);
        assert_eq!(cfg.parameter_groups().len(), 13);
    }

    #[test]
    fn init_respects_bounds_and_seed() {
        let cfg = ModelConfig::new(8, 3);
        let a = init_params(&cfg, 3);
        assert_eq!(a, init_params(&cfg, 3));
        assert_ne!(a, init_params(&cfg, 4));
        for (name, shape, fan) in cfg.parameter_shapes() {
            let t = a.get(&name).unwrap();
            assert_eq!(t.shape(), shape.as_slice());
            let b = 1.0 / (fan as f64).sqrt();
            assert!(t.data().iter().all(|x| x.abs() < b));
        }
    }

    #[test]
    fn config_validation() {
        let mut cfg = ModelConfig::new(8, 3);
        cfg.heads = 3;
        assert!(cfg.validate().is_err());
        cfg.heads = 2;
        cfg.validate().unwrap();
        cfg.spatial.tau = -0.1;
        assert!(cfg.validate().is_err());
        let good = ModelConfig::new(8, 3);
        let mut params = init_params(&good, 0);
        params.insert("answer.b", Tensor::zeros(&[1, 4]));
        assert!(Model::from_params(good, params).is_err());
    }

    #[test]
    fn inspection_is_well_formed() {
        let task = tiny_task();
        let world = World::new(&task);
        let scene = gen_scene(&task, &world, 0).unwrap();
        let model = Model::new(ModelConfig::new(8, 3), 2).unwrap();
        let ins = model.inspect(&scene).unwrap();
        assert_eq!(ins.spatial.len(), 3);
        for s in &ins.spatial {
            assert_eq!(s.len(), 4);
            assert!((s.sum() - 1.0).abs() < 1e-9);
        }
        let tw = &ins.temporal;
        assert!((tw.w_av.sum() - 1.0).abs() < 1e-9);
        assert!((tw.w_a_raw.sum() + tw.w_v_raw.sum() - 1.0).abs() < 1e-9);
        assert!((tw.w_a.sum() - 1.0).abs() < 1e-9);
        assert!((ins.probs.sum() - 1.0).abs() < 1e-9);
        assert_eq!(ins.scores.argmax(), ins.target_index);
    }

    #[test]
    fn full_loss_gradient_on_negative_pair() {
        let task = tiny_task();
        let world = World::new(&task);
        let scene = gen_scene(&task, &world, 0).unwrap();
        let other = gen_scene(&task, &world, 1).unwrap();
        let mut neg = scene.clone();
        neg.match_audio_from = 1;
        neg.match_label = 0;
        let cfg = ModelConfig::new(8, 3);
        let params = init_params(&cfg, 9);
        let f = |t: &mut Tape, v: &Bound| {
            let m = ModelVars::bind(v)?;
            Ok(scene_losses(t, &m, &cfg, &neg, &other.audio, &LossWeights::default())?.total)
        };
        let r = grad_check(f, &params, 1e-5).unwrap();
        assert!(r.passes(1e-4), "{:?}", r.groups);
        assert_eq!(r.groups.len(), params.len());
    }
}
