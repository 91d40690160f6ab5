//! Deterministic synthetic audio-visual question answering scenes.
//!
//! Each scene is a short "video" of `T` segments. A segment has an audio
//! feature (`d` values) and a visual feature map (`h x w` cells of `d`
//! values). The question is a sequence of `N` word vectors, one of which
//! names the target concept. The target is *active* in a segment when it is
//! both visible (planted in one grid cell) and audible (its audio image is
//! the segment's audio feature). The counting question asks in how many
//! segments the target is active.
//!
//! # Random number generation
//!
//! All randomness comes from ChaCha20 (`rand_chacha::ChaCha20Rng`) seeded with
//! `seed_from_u64(seed)` and a per-purpose stream id set with `set_stream`:
//!
//! * stream `u64::MAX`: the world (concept vectors, audio map, filler words),
//! * stream `2 * i`: content of scene `i`,
//! * stream `2 * i + 1`: matching-pair assignment of scene `i`.
//!
//! A uniform `u` in `[0, 1)` is the top 53 bits of the next `u64` times
//! `2^-53`. An index below `n` is `floor(u * n)`. A standard normal is
//! `sqrt(-2 ln(1 - u1)) * cos(2 pi u2)` from two consecutive uniforms.

mod dataset;

pub use dataset::{
    gen_dataset, Dataset, Manifest, ManifestScene, SceneFiles, Split, SplitCounts,
    DEFAULT_NEGATIVE_FRACTION, MANIFEST_FILE, MANIFEST_FORMAT,
};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Size of the filler-word vocabulary used for non-target question words.
pub const FILLER_VOCAB: usize = 16;

const WORLD_STREAM: u64 = u64::MAX;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "lowercase")]
pub enum QuestionKind {
    /// "How many segments contain the sounding target?" (clipped at `C - 1`).
    Counting,
    /// "Is the target ever sounding?" (0 = no, 1 = yes).
    Existential,
}

impl QuestionKind {
    pub fn as_str(self) -> &'static str {
        match self {
            QuestionKind::Counting => "counting",
            QuestionKind::Existential => "existential",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskConfig {
    /// Segments per video (`T`).
    pub segments: usize,
    /// Words per question (`N`).
    pub words: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    /// Common feature dimension of audio, visual and word features (`d`).
    pub dim: usize,
    /// Answer vocabulary size (`C`).
    pub answers: usize,
    /// Number of concept classes (`K`).
    pub concepts: usize,
    pub noise_sigma: f64,
    pub seed: u64,
    pub question: QuestionKind,
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig {
            segments: 6,
            words: 8,
            grid_h: 4,
            grid_w: 4,
            dim: 16,
            answers: 4,
            concepts: 6,
            noise_sigma: 0.1,
            seed: 0,
            question: QuestionKind::Counting,
        }
    }
}

impl TaskConfig {
    pub fn cells(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("segments", self.segments),
            ("words", self.words),
            ("grid_h", self.grid_h),
            ("grid_w", self.grid_w),
            ("dim", self.dim),
            ("answers", self.answers),
            ("concepts", self.concepts),
        ] {
            if v == 0 {
                return Err(Error::contract(format!("task config field `{name}` must be >= 1")));
            }
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return Err(Error::contract(format!(
                "task config field `noise_sigma` must be finite and >= 0, got {}",
                self.noise_sigma
            )));
        }
        if self.question == QuestionKind::Existential && self.answers < 2 {
            return Err(Error::contract("task config field `answers` must be >= 2 for existential questions"));
        }
        Ok(())
    }

    /// Probability of each answer class under the generator.
    ///
    /// Counting draws the answer uniformly from `0..=min(C-1, T)`; when the
    /// top class is the clipped "C-1 or more" bucket, the actual active count
    /// is then drawn uniformly from `C-1..=T`. Existential answers are yes/no
    /// with probability one half each.
    pub fn answer_distribution(&self) -> Vec<f64> {
        let mut p = vec![0.0; self.answers];
        match self.question {
            QuestionKind::Counting => {
                let top = (self.answers - 1).min(self.segments);
                for v in p.iter_mut().take(top + 1) {
                    *v = 1.0 / (top + 1) as f64;
                }
            }
            QuestionKind::Existential => {
                p[0] = 0.5;
                p[1] = 0.5;
            }
        }
        p
    }

    /// The answer implied by a temporal ground-truth mask.
    pub fn answer_for(&self, gt_temporal: &[f64]) -> usize {
        let active = gt_temporal.iter().filter(|&&x| x > 0.5).count();
        match self.question {
            QuestionKind::Counting => active.min(self.answers - 1),
            QuestionKind::Existential => usize::from(active > 0),
        }
    }
}

struct Draw(ChaCha20Rng);

impl Draw {
    fn new(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Draw(rng)
    }

    fn uniform(&mut self) -> f64 {
        (self.0.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    fn index(&mut self, n: usize) -> usize {
        ((self.uniform() * n as f64) as usize).min(n - 1)
    }

    fn normal(&mut self) -> f64 {
        let u1 = self.uniform();
        let u2 = self.uniform();
        (-2.0 * (1.0 - u1).ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    fn unit_vector(&mut self, d: usize) -> Vec<f64> {
        loop {
            let v: Vec<f64> = (0..d).map(|_| self.normal()).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-8 {
                return v.into_iter().map(|x| x / norm).collect();
            }
        }
    }
}

/// Fixed per-seed vocabulary shared by every scene of a dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct World {
    /// `K x d`, unit-norm rows.
    pub concepts: Tensor,
    /// `d x d` orthogonal map taking a visual concept to its audio feature.
    pub audio_map: Tensor,
    /// `FILLER_VOCAB x d`, unit-norm rows.
    pub fillers: Tensor,
}

impl World {
    pub fn new(cfg: &TaskConfig) -> Self {
        let d = cfg.dim;
        let mut rng = Draw::new(cfg.seed, WORLD_STREAM);
        let concepts: Vec<f64> = (0..cfg.concepts).flat_map(|_| rng.unit_vector(d)).collect();
        let audio_map = gram_schmidt(&mut rng, d);
        let fillers: Vec<f64> = (0..FILLER_VOCAB).flat_map(|_| rng.unit_vector(d)).collect();
        World {
            concepts: Tensor::from_parts(vec![cfg.concepts, d], concepts),
            audio_map: Tensor::from_parts(vec![d, d], audio_map),
            fillers: Tensor::from_parts(vec![FILLER_VOCAB, d], fillers),
        }
    }

    pub fn concept(&self, k: usize) -> &[f64] {
        self.concepts.row(k)
    }

    /// Audio image `M c` of a concept vector.
    pub fn audio_of(&self, concept: &[f64]) -> Vec<f64> {
        let d = concept.len();
        (0..d)
            .map(|i| (0..d).map(|j| self.audio_map.get(i, j) * concept[j]).sum())
            .collect()
    }

    /// Index of the concept with the largest dot product with `v`.
    pub fn nearest_concept(&self, v: &[f64]) -> usize {
        let scores: Vec<f64> = (0..self.concepts.dims2().unwrap().0)
            .map(|k| self.concept(k).iter().zip(v).map(|(a, b)| a * b).sum())
            .collect();
        Tensor::row_vector(&scores).argmax()
    }
}

fn gram_schmidt(rng: &mut Draw, d: usize) -> Vec<f64> {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(d);
    while rows.len() < d {
        let mut v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        for r in &rows {
            let dot: f64 = r.iter().zip(&v).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(r).for_each(|(x, y)| *x -= dot * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            rows.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    rows.concat()
}

/// One generated scene plus its planted ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub index: usize,
    pub question: QuestionKind,
    /// `T x d`.
    pub audio: Tensor,
    /// `T x h x w x d`.
    pub visual_map: Tensor,
    /// `N x d`.
    pub question_words: Tensor,
    pub target_word_index: usize,
    pub target_concept: usize,
    /// `T x h x w`, one where the target sounds and is seen.
    pub gt_spatial: Tensor,
    /// `T`, one in segments where the target is both audible and visible.
    pub gt_temporal: Tensor,
    pub answer: usize,
    /// Scene whose audio is paired with this scene's visuals for the
    /// audio-visual matching task. Equals `index` for aligned pairs.
    pub match_audio_from: usize,
    /// 1 for an aligned audio/visual pair, 0 for a shuffled negative.
    pub match_label: u8,
}

impl Scene {
    /// `hw x d` visual feature map of segment `t`.
    pub fn visual_segment(&self, t: usize) -> Tensor {
        let seg = self.visual_map.slab(t).expect("segment in range");
        let d = seg.last_dim();
        let n = seg.len() / d;
        seg.reshape(&[n, d]).expect("same element count")
    }

    /// Planted grid cell (flattened row-major) of each active segment.
    pub fn gt_cells(&self) -> Vec<Option<usize>> {
        let t_len = self.gt_temporal.len();
        let cells = self.gt_spatial.len() / t_len;
        (0..t_len)
            .map(|t| {
                self.gt_spatial.data()[t * cells..(t + 1) * cells]
                    .iter()
                    .position(|&x| x > 0.5)
            })
            .collect()
    }

    pub fn active_segments(&self) -> usize {
        self.gt_temporal.data().iter().filter(|&&x| x > 0.5).count()
    }
}

/// Generates scene `index` of the dataset described by `cfg`.
///
/// Deterministic in `(cfg, index)`; `world` must be `World::new(cfg)`.
pub fn gen_scene(cfg: &TaskConfig, world: &World, index: usize) -> Result<Scene> {
    cfg.validate()?;
    let (t_len, n_words, d, cells) = (cfg.segments, cfg.words, cfg.dim, cfg.cells());
    let mut rng = Draw::new(cfg.seed, 2 * index as u64);

    let target = rng.index(cfg.concepts);
    let active_count = match cfg.question {
        QuestionKind::Counting => {
            let top = (cfg.answers - 1).min(t_len);
            let answer = rng.index(top + 1);
            if answer == top && top < t_len {
                top + rng.index(t_len - top + 1)
            } else {
                answer
            }
        }
        QuestionKind::Existential => {
            if rng.uniform() < 0.5 {
                0
            } else {
                1 + rng.index(t_len)
            }
        }
    };

    // Partial Fisher-Yates: the first `active_count` entries are the active set.
    let mut order: Vec<usize> = (0..t_len).collect();
    for i in 0..active_count {
        let j = i + rng.index(t_len - i);
        order.swap(i, j);
    }
    let mut active = vec![false; t_len];
    for &t in &order[..active_count] {
        active[t] = true;
    }

    let sigma = cfg.noise_sigma;
    let mut audio = vec![0.0; t_len * d];
    let mut visual = vec![0.0; t_len * cells * d];
    let mut gt_spatial = vec![0.0; t_len * cells];
    let mut gt_temporal = vec![0.0; t_len];
    for t in 0..t_len {
        let concept = if active[t] {
            Some(target)
        } else if cfg.concepts > 1 {
            let k = rng.index(cfg.concepts - 1);
            Some(if k >= target { k + 1 } else { k })
        } else {
            None
        };
        let cell = rng.index(cells);
        let seg = &mut visual[t * cells * d..(t + 1) * cells * d];
        for v in seg.iter_mut() {
            *v = sigma * rng.normal();
        }
        let a = &mut audio[t * d..(t + 1) * d];
        for v in a.iter_mut() {
            *v = sigma * rng.normal();
        }
        if let Some(k) = concept {
            let c = world.concept(k);
            for (v, x) in seg[cell * d..(cell + 1) * d].iter_mut().zip(c) {
                *v += x;
            }
            for (v, x) in a.iter_mut().zip(world.audio_of(c)) {
                *v += x;
            }
        }
        if active[t] {
            gt_temporal[t] = 1.0;
            gt_spatial[t * cells + cell] = 1.0;
        }
    }

    let target_word_index = rng.index(n_words);
    let mut words = vec![0.0; n_words * d];
    for n in 0..n_words {
        let filler = rng.index(FILLER_VOCAB);
        let base = if n == target_word_index {
            world.concept(target)
        } else {
            world.fillers.row(filler)
        };
        for (v, x) in words[n * d..(n + 1) * d].iter_mut().zip(base) {
            *v = x + sigma * rng.normal();
        }
    }

    let gt_temporal = Tensor::from_parts(vec![t_len], gt_temporal);
    let answer = cfg.answer_for(gt_temporal.data());
    Ok(Scene {
        index,
        question: cfg.question,
        audio: Tensor::from_parts(vec![t_len, d], audio),
        visual_map: Tensor::from_parts(vec![t_len, cfg.grid_h, cfg.grid_w, d], visual),
        question_words: Tensor::from_parts(vec![n_words, d], words),
        target_word_index,
        target_concept: target,
        gt_spatial: Tensor::from_parts(vec![t_len, cfg.grid_h, cfg.grid_w], gt_spatial),
        gt_temporal,
        answer,
        match_audio_from: index,
        match_label: 1,
    })
}
