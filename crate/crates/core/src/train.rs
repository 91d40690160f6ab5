//! Two-stage training with Adam: matching pretraining of the grounding path,
//! then joint question answering.
//!
//! Within a batch, examples run in parallel on separate tapes; their
//! gradients are summed in example order, so results do not depend on the
//! number of worker threads.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::head::LossWeights;
use crate::model::{self, Model, ModelVars};
use crate::synth::{Dataset, QuestionKind, Scene};
use crate::tensor::{js_divergence, Gradients, Params, Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub stage1_epochs: usize,
    pub lr0: f64,
    pub lr_drop_every: usize,
    pub lr_factor: f64,
    pub seed: u64,
    pub loss: LossWeights,
    pub adam: AdamConfig,
    /// Rescale the batch gradient to this global norm when exceeded.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 64,
            epochs: 30,
            stage1_epochs: 10,
            lr0: 2e-4,
            lr_drop_every: 10,
            lr_factor: 0.1,
            seed: 0,
            loss: LossWeights::default(),
            adam: AdamConfig::default(),
            grad_clip: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |f: &str, why: String| Err(Error::contract(format!("{f}: {why}")));
        if self.batch_size == 0 {
            return bad("batch_size", "must be >= 1".into());
        }
        if self.lr_drop_every == 0 {
            return bad("lr_drop_every", "must be >= 1".into());
        }
        if !(self.lr0 > 0.0) || !self.lr0.is_finite() {
            return bad("lr0", format!("must be positive, got {}", self.lr0));
        }
        if !(self.lr_factor > 0.0 && self.lr_factor <= 1.0) {
            return bad("lr_factor", format!("must be in (0, 1], got {}", self.lr_factor));
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) {
            return bad("adam", "betas must be in [0, 1) and eps positive".into());
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return bad("grad_clip", format!("must be positive, got {c}"));
            }
        }
        self.loss.validate()
    }
}

/// `lr0 · factor^⌊epoch / drop_every⌋`.
pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> f64 {
    cfg.lr0 * cfg.lr_factor.powi((epoch / cfg.lr_drop_every) as i32)
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub config: AdamConfig,
    pub step: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

impl OptimizerState {
    pub fn new(params: &Params, config: AdamConfig) -> Self {
        let zeros = || params.iter().map(|(n, t)| (n.clone(), Tensor::zeros(t.shape()))).collect();
        OptimizerState { config, step: 0, m: zeros(), v: zeros() }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(params: &mut Params, grads: &Gradients, state: &mut OptimizerState, lr: f64) -> Result<()> {
    for (name, p) in params.iter() {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::contract(format!("no gradient for `{name}`")))?;
        if g.shape() != p.shape() || state.m.get(name).map(|m| m.shape()) != Some(p.shape()) {
            return Err(Error::shape("adam_step", p.shape(), g.shape()));
        }
    }
    state.step += 1;
    let AdamConfig { beta1, beta2, eps } = state.config;
    let c1 = 1.0 - beta1.powi(state.step as i32);
    let c2 = 1.0 - beta2.powi(state.step as i32);
    for (name, p) in params.iter_mut() {
        let g = grads.get(name).expect("checked above").data();
        let m = state.m.get_mut(name).expect("checked above").data_mut();
        let v = state.v.get_mut(name).expect("checked above").data_mut();
        for (((x, &gi), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = beta1 * *mi + (1.0 - beta1) * gi;
            *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
            *x -= lr * (*mi / c1) / ((*vi / c2).sqrt() + eps);
        }
    }
    Ok(())
}

fn epoch_order(len: usize, seed: u64, stream: u64) -> Vec<usize> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let mut idx: Vec<usize> = (0..len).collect();
    idx.shuffle(&mut rng);
    idx
}

/// Sums per-example results in order and applies one optimizer step.
fn apply_batch(
    params: &mut Params,
    state: &mut OptimizerState,
    grads: Vec<Gradients>,
    cfg: &TrainConfig,
    lr: f64,
) -> Result<()> {
    let n = grads.len() as f64;
    let mut iter = grads.into_iter();
    let mut total = iter.next().ok_or_else(|| Error::contract("empty batch"))?;
    for g in iter {
        total.accumulate(&g);
    }
    total.scale(1.0 / n);
    if let Some(clip) = cfg.grad_clip {
        let norm = total.global_norm();
        if norm > clip {
            total.scale(clip / norm);
        }
    }
    adam_step(params, &total, state, lr)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage1Metrics {
    pub epoch: usize,
    pub lr: f64,
    pub loss_s: f64,
    pub train_match_acc: f64,
    pub val_match_acc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub loss_qa: f64,
    pub loss_csl: f64,
    pub loss_s: f64,
    pub train_acc: f64,
    pub val_acc: f64,
}

/// Matching loss and whether the pair-level decision (mean probability
/// above one half) was right.
fn matching_example(model: &Model, scene: &Scene, audio: &Tensor, grad: bool) -> Result<(f64, bool, Option<Gradients>)> {
    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape);
    let m = ModelVars::bind(&bound)?;
    let (loss, z) = model::matching_pass(&mut tape, &m, &model.config, scene, audio)?;
    let zs = tape.value(z);
    let mean_p = zs.data().iter().map(|&x| crate::tensor::sigmoid(x)).sum::<f64>() / zs.len() as f64;
    let correct = (mean_p > 0.5) == (scene.match_label == 1);
    let grads = if grad { Some(tape.backward(loss)?) } else { None };
    Ok((tape.value(loss).item(), correct, grads))
}

/// Fraction of scenes whose audio/visual pairing is classified correctly.
pub fn matching_accuracy(model: &Model, dataset: &Dataset, scenes: &[Scene]) -> Result<f64> {
    if scenes.is_empty() {
        return Err(Error::contract("cannot evaluate an empty split"));
    }
    let hits: Vec<bool> = scenes
        .par_iter()
        .map(|s| matching_example(model, s, dataset.matching_audio(s), false).map(|r| r.1))
        .collect::<Result<_>>()?;
    Ok(hits.iter().filter(|&&h| h).count() as f64 / scenes.len() as f64)
}

/// Trains on the matching loss alone for `cfg.stage1_epochs` epochs.
pub fn train_stage1(
    model: &mut Model,
    dataset: &Dataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&Stage1Metrics),
) -> Result<Vec<Stage1Metrics>> {
    cfg.validate()?;
    let train = dataset.split(crate::synth::Split::Train);
    let val = dataset.split(crate::synth::Split::Val);
    if train.is_empty() {
        return Err(Error::contract("training split is empty"));
    }
    let mut state = OptimizerState::new(&model.params, cfg.adam);
    let mut out = Vec::with_capacity(cfg.stage1_epochs);
    for epoch in 0..cfg.stage1_epochs {
        let lr = lr_schedule(epoch, cfg);
        let order = epoch_order(train.len(), cfg.seed, (1 << 32) | epoch as u64);
        let (mut loss_sum, mut hits) = (0.0, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let snapshot = &*model;
            let results: Vec<(f64, bool, Option<Gradients>)> = batch
                .par_iter()
                .map(|&i| {
                    let s = &train[i];
                    matching_example(snapshot, s, dataset.matching_audio(s), true)
                })
                .collect::<Result<_>>()?;
            let mut grads = Vec::with_capacity(results.len());
            for (l, hit, g) in results {
                loss_sum += l;
                hits += hit as usize;
                grads.push(g.expect("requested"));
            }
            apply_batch(&mut model.params, &mut state, grads, cfg, lr)?;
        }
        let val_match_acc = if val.is_empty() { f64::NAN } else { matching_accuracy(model, dataset, val)? };
        let m = Stage1Metrics {
            epoch,
            lr,
            loss_s: loss_sum / train.len() as f64,
            train_match_acc: hits as f64 / train.len() as f64,
            val_match_acc,
        };
        on_epoch(&m);
        out.push(m);
    }
    Ok(out)
}

struct JointExample {
    l_qa: f64,
    l_csl: f64,
    l_s: f64,
    correct: bool,
    grads: Gradients,
}

fn joint_example(model: &Model, scene: &Scene, audio: &Tensor, weights: &LossWeights) -> Result<JointExample> {
    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape);
    let m = ModelVars::bind(&bound)?;
    let out = model::scene_losses(&mut tape, &m, &model.config, scene, audio, weights)?;
    let grads = tape.backward(out.total)?;
    let item = |v| tape.value(v).item();
    Ok(JointExample {
        l_qa: item(out.l_qa),
        l_csl: if weights.csl_enabled { item(out.l_csl) } else { 0.0 },
        l_s: item(out.l_s),
        correct: tape.value(out.forward.probs).argmax() == scene.answer,
        grads,
    })
}

/// Joint training on `L_qa + L_csl + λ L_s`, starting from `model`'s
/// current parameters with a fresh optimizer state.
pub fn train_stage2(
    model: &mut Model,
    dataset: &Dataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<Vec<EpochMetrics>> {
    cfg.validate()?;
    if dataset.config.answers != model.config.answers || dataset.config.dim != model.config.dim {
        return Err(Error::contract(format!(
            "model expects dim {} and {} answers, dataset has dim {} and {} answers",
            model.config.dim, model.config.answers, dataset.config.dim, dataset.config.answers
        )));
    }
    let train = dataset.split(crate::synth::Split::Train);
    let val = dataset.split(crate::synth::Split::Val);
    if train.is_empty() {
        return Err(Error::contract("training split is empty"));
    }
    let mut state = OptimizerState::new(&model.params, cfg.adam);
    let mut out = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = lr_schedule(epoch, cfg);
        let order = epoch_order(train.len(), cfg.seed, (2 << 32) | epoch as u64);
        let (mut qa, mut csl, mut ls, mut hits) = (0.0, 0.0, 0.0, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let snapshot = &*model;
            let results: Vec<JointExample> = batch
                .par_iter()
                .map(|&i| {
                    let s = &train[i];
                    joint_example(snapshot, s, dataset.matching_audio(s), &cfg.loss)
                })
                .collect::<Result<_>>()?;
            let mut grads = Vec::with_capacity(results.len());
            for r in results {
                qa += r.l_qa;
                csl += r.l_csl;
                ls += r.l_s;
                hits += r.correct as usize;
                grads.push(r.grads);
            }
            apply_batch(&mut model.params, &mut state, grads, cfg, lr)?;
        }
        let n = train.len() as f64;
        let val_acc = if val.is_empty() { f64::NAN } else { evaluate(model, val)?.accuracy };
        let m = EpochMetrics {
            epoch,
            lr,
            loss_qa: qa / n,
            loss_csl: csl / n,
            loss_s: ls / n,
            train_acc: hits as f64 / n,
            val_acc,
        };
        on_epoch(&m);
        out.push(m);
    }
    Ok(out)
}

/// Anything that answers scenes.
pub trait Predictor: Sync {
    fn predict(&self, scene: &Scene) -> Result<Prediction>;
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Prediction {
    pub answer: usize,
    /// `JS(w_a, w_v)` of the temporal weights, when the predictor has them.
    pub synchrony: Option<f64>,
}

impl Predictor for Model {
    fn predict(&self, scene: &Scene) -> Result<Prediction> {
        let ins = self.inspect(scene)?;
        let js = js_divergence(&ins.temporal.w_a, &ins.temporal.w_v)?;
        Ok(Prediction { answer: ins.predicted, synchrony: Some(js) })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TypeAccuracy {
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub scenes: usize,
    pub accuracy: f64,
    pub per_type: BTreeMap<QuestionKind, TypeAccuracy>,
    /// Mean `JS(w_a, w_v)`; `None` when the predictor reports none.
    pub mean_js: Option<f64>,
}

pub fn evaluate(predictor: &impl Predictor, scenes: &[Scene]) -> Result<EvalReport> {
    if scenes.is_empty() {
        return Err(Error::contract("cannot evaluate an empty split"));
    }
    let preds: Vec<Prediction> = scenes.par_iter().map(|s| predictor.predict(s)).collect::<Result<_>>()?;
    let mut per_type: BTreeMap<QuestionKind, TypeAccuracy> = BTreeMap::new();
    let (mut correct, mut js_sum, mut js_n) = (0usize, 0.0, 0usize);
    for (s, p) in scenes.iter().zip(&preds) {
        let hit = p.answer == s.answer;
        correct += hit as usize;
        let e = per_type.entry(s.question).or_insert(TypeAccuracy { correct: 0, total: 0, accuracy: 0.0 });
        e.correct += hit as usize;
        e.total += 1;
        if let Some(js) = p.synchrony {
            js_sum += js;
            js_n += 1;
        }
    }
    for e in per_type.values_mut() {
        e.accuracy = e.correct as f64 / e.total as f64;
    }
    Ok(EvalReport {
        scenes: scenes.len(),
        accuracy: correct as f64 / scenes.len() as f64,
        per_type,
        mean_js: (js_n > 0).then(|| js_sum / js_n as f64),
    })
}

pub const STAGE2_CSV_HEADER: &str = "epoch,lr,loss_qa,loss_csl,loss_s,train_acc,val_acc";
pub const STAGE1_CSV_HEADER: &str = "epoch,lr,loss_s,train_match_acc,val_match_acc";

pub fn stage2_csv(rows: &[EpochMetrics]) -> String {
    let mut s = format!("{STAGE2_CSV_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.epoch, r.lr, r.loss_qa, r.loss_csl, r.loss_s, r.train_acc, r.val_acc
        );
    }
    s
}

pub fn stage1_csv(rows: &[Stage1Metrics]) -> String {
    let mut s = format!("{STAGE1_CSV_HEADER}\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{},{}", r.epoch, r.lr, r.loss_s, r.train_match_acc, r.val_match_acc);
    }
    s
}

pub fn write_text(path: impl AsRef<Path>, text: &str) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::synth::{SplitCounts, TaskConfig};

    #[test]
    fn schedule_examples() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_schedule(0, &cfg), 2e-4);
        assert!((lr_schedule(10, &cfg) - 2e-5).abs() < 1e-18);
        assert!((lr_schedule(29, &cfg) - 2e-6).abs() < 1e-18);
        for e in 0..40 {
            assert!(lr_schedule(e + 1, &cfg) <= lr_schedule(e, &cfg));
        }
    }

    fn scalar_params(x: f64) -> Params {
        let mut p = Params::new();
        p.insert("x", Tensor::scalar(x));
        p
    }

    fn grads_of(p: &Params, g: f64) -> Gradients {
        let mut t = Tape::new();
        let v = p.bind(&mut t);
        let k = t.constant(Tensor::scalar(g));
        let y = t.mul(v["x"], k).unwrap();
        t.backward(y).unwrap()
    }

    fn grads_of_named(p: &Params, name: &str) -> Gradients {
        let mut t = Tape::new();
        let v = p.bind(&mut t);
        t.backward(v[name]).unwrap()
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = scalar_params(1.5);
        let mut st = OptimizerState::new(&p, AdamConfig::default());
        { let g = grads_of(&p, 0.0); adam_step(&mut p, &g, &mut st, 0.1) }.unwrap();
        assert_eq!(p.get("x").unwrap().item(), 1.5);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = scalar_params(0.0);
        let mut st = OptimizerState::new(&p, AdamConfig::default());
        { let g = grads_of(&p, 1.0); adam_step(&mut p, &g, &mut st, 0.1) }.unwrap();
        let want = -0.1 / (1.0 + 1e-8);
        assert!((p.get("x").unwrap().item() - want).abs() < 1e-15);
    }

    #[test]
    fn two_steps_match_reference() {
        // Values from a direct evaluation of the update rule in Python.
        let mut p = scalar_params(0.5);
        let mut st = OptimizerState::new(&p, AdamConfig::default());
        { let g = grads_of(&p, 0.3); adam_step(&mut p, &g, &mut st, 0.01) }.unwrap();
        { let g = grads_of(&p, -0.7); adam_step(&mut p, &g, &mut st, 0.01) }.unwrap();
        assert!((p.get("x").unwrap().item() - 0.494_201_854_203_950_1).abs() < 1e-12);
        assert_eq!(st.step, 2);
    }

    #[test]
    fn adam_rejects_missing_gradient() {
        let mut p = scalar_params(0.0);
        let mut st = OptimizerState::new(&p, AdamConfig::default());
        let mut q = Params::new();
        q.insert("y", Tensor::scalar(0.0));
        let other = grads_of_named(&q, "y");
        assert!(adam_step(&mut p, &other, &mut st, 0.1).is_err());
    }

    struct Oracle;
    impl Predictor for Oracle {
        fn predict(&self, scene: &Scene) -> Result<Prediction> {
            Ok(Prediction { answer: scene.answer, synchrony: None })
        }
    }

    fn small_task() -> TaskConfig {
        TaskConfig { segments: 3, words: 4, grid_h: 2, grid_w: 2, dim: 8, answers: 3, concepts: 3, ..TaskConfig::default() }
    }

    #[test]
    fn oracle_scores_one_and_empty_split_errors() {
        let ds = Dataset::generate(&small_task(), SplitCounts { train: 20, val: 5, test: 5 }, 0.5).unwrap();
        let r = evaluate(&Oracle, &ds.scenes).unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert_eq!(r.per_type[&QuestionKind::Counting].total, 30);
        assert!(r.mean_js.is_none());
        assert!(evaluate(&Oracle, &[]).is_err());
    }

    #[test]
    fn untrained_model_is_near_chance() {
        let task = TaskConfig { answers: 4, ..small_task() };
        let ds = Dataset::generate(&task, SplitCounts { train: 1000, val: 1, test: 1 }, 0.5).unwrap();
        let model = Model::new(ModelConfig::new(8, 4), 0).unwrap();
        // A fresh network answers almost every scene with the same class;
        // with balanced answers that is right about a quarter of the time.
        let r = evaluate(&model, ds.split(crate::synth::Split::Train)).unwrap();
        let sd = (0.25f64 * 0.75 / 1000.0).sqrt();
        assert!((r.accuracy - 0.25).abs() < 3.0 * sd, "accuracy {}", r.accuracy);
        let js = r.mean_js.unwrap();
        assert!((0.0..=std::f64::consts::LN_2).contains(&js));
    }

    #[test]
    fn training_is_deterministic_and_csv_well_formed() {
        let ds = Dataset::generate(&small_task(), SplitCounts { train: 24, val: 6, test: 6 }, 0.5).unwrap();
        let cfg = TrainConfig { batch_size: 8, epochs: 2, stage1_epochs: 2, lr0: 1e-3, ..TrainConfig::default() };
        let run = || {
            let mut m = Model::new(ModelConfig::new(8, 3), 1).unwrap();
            let s1 = train_stage1(&mut m, &ds, &cfg, |_| {}).unwrap();
            let s2 = train_stage2(&mut m, &ds, &cfg, |_| {}).unwrap();
            (m, stage1_csv(&s1), stage2_csv(&s2))
        };
        let (a, a1, a2) = run();
        let (b, b1, b2) = run();
        assert_eq!(a, b);
        assert_eq!((a1.clone(), a2.clone()), (b1, b2));
        let lines: Vec<&str> = a2.lines().collect();
        assert_eq!(lines[0], STAGE2_CSV_HEADER);
        assert_eq!(lines.len(), 3);
        assert!(lines[1..].iter().all(|l| l.split(',').count() == 7));
        assert_eq!(a1.lines().count(), 3);

        let off = TrainConfig { loss: LossWeights { csl_enabled: false, ..cfg.loss }, ..cfg.clone() };
        let mut m = Model::new(ModelConfig::new(8, 3), 1).unwrap();
        let rows = train_stage2(&mut m, &ds, &off, |_| {}).unwrap();
        assert!(rows.iter().all(|r| r.loss_csl == 0.0));
    }

    #[test]
    fn config_validation_names_fields() {
        let bad = TrainConfig { lr_factor: 1.5, ..TrainConfig::default() };
        assert!(bad.validate().unwrap_err().to_string().contains("lr_factor"));
        let bad = TrainConfig { batch_size: 0, ..TrainConfig::default() };
        assert!(bad.validate().unwrap_err().to_string().contains("batch_size"));
    }
}
