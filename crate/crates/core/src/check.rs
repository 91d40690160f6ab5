//! Finite-difference check of the whole network on a tiny configuration.

use crate::error::Result;
use crate::head::LossWeights;
use crate::jtg;
use crate::model::{self, ModelConfig, ModelVars};
use crate::nn::Bound;
use crate::synth::{gen_scene, QuestionKind, TaskConfig, World};
use crate::tensor::{grad_check, GradCheckReport, OpKind, Tape, Var};

/// d=8, T=3, h=w=2, N=4, C=3.
pub fn tiny_task(seed: u64) -> TaskConfig {
    TaskConfig {
        segments: 3,
        words: 4,
        grid_h: 2,
        grid_w: 2,
        dim: 8,
        answers: 3,
        concepts: 3,
        noise_sigma: 0.1,
        seed,
        question: QuestionKind::Counting,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CheckedLoss {
    Qa,
    Csl,
    Matching,
    Total,
}

impl CheckedLoss {
    pub const ALL: [CheckedLoss; 4] = [CheckedLoss::Qa, CheckedLoss::Csl, CheckedLoss::Matching, CheckedLoss::Total];

    pub fn as_str(self) -> &'static str {
        match self {
            CheckedLoss::Qa => "L_qa",
            CheckedLoss::Csl => "L_csl",
            CheckedLoss::Matching => "L_s",
            CheckedLoss::Total => "L",
        }
    }
}

#[derive(Clone, Debug)]
pub struct LossCheck {
    pub loss: CheckedLoss,
    pub report: GradCheckReport,
}

/// Checks every parameter tensor of a freshly initialized tiny model for
/// each loss term and the total. The scene is a negative matching pair so
/// both grounding passes are exercised. `sign_flip` breaks one backward
/// rule on purpose.
pub fn tiny_model_gradcheck(
    seed: u64,
    model_cfg: &ModelConfig,
    eps: f64,
    sign_flip: Option<OpKind>,
) -> Result<Vec<LossCheck>> {
    let task = tiny_task(seed);
    let world = World::new(&task);
    let mut scene = gen_scene(&task, &world, 0)?;
    let other = gen_scene(&task, &world, 1)?;
    scene.match_audio_from = 1;
    scene.match_label = 0;
    let mut cfg = model_cfg.clone();
    cfg.dim = task.dim;
    cfg.answers = task.answers;
    cfg.validate()?;
    let params = model::init_params(&cfg, seed);
    let weights = LossWeights::default();
    CheckedLoss::ALL
        .into_iter()
        .map(|which| {
            let f = |t: &mut Tape, v: &Bound| -> Result<Var> {
                if let Some(k) = sign_flip {
                    t.inject_sign_flip(k);
                }
                let m = ModelVars::bind(v)?;
                let out = model::scene_losses(t, &m, &cfg, &scene, &other.audio, &weights)?;
                Ok(match which {
                    CheckedLoss::Qa => out.l_qa,
                    CheckedLoss::Csl => jtg::csl_loss(t, out.forward.modal.w_a, out.forward.modal.w_v)?,
                    CheckedLoss::Matching => out.l_s,
                    CheckedLoss::Total => out.total,
                })
            };
            Ok(LossCheck { loss: which, report: grad_check(f, &params, eps)? })
        })
        .collect()
}
