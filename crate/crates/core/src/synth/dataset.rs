use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{gen_scene, Draw, QuestionKind, Scene, TaskConfig, World};
use crate::error::{Error, Result};
use crate::tensor::{read_tensor, write_tensor, Tensor};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_FORMAT: &str = "tjstg-dataset/1";
pub const DEFAULT_NEGATIVE_FRACTION: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Split> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitCounts {
    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }

    fn split_of(&self, index: usize) -> Split {
        if index < self.train {
            Split::Train
        } else if index < self.train + self.val {
            Split::Val
        } else {
            Split::Test
        }
    }

    fn range(&self, split: Split) -> std::ops::Range<usize> {
        match split {
            Split::Train => 0..self.train,
            Split::Val => self.train..self.train + self.val,
            Split::Test => self.train + self.val..self.total(),
        }
    }
}

impl Default for SplitCounts {
    /// 2000/250/250.
    fn default() -> Self {
        SplitCounts {
            train: 2000,
            val: 250,
            test: 250,
        }
    }
}

/// Paths of one scene's tensor files, relative to the dataset directory.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneFiles {
    pub audio: String,
    pub visual_map: String,
    pub question_words: String,
    pub gt_spatial: String,
    pub gt_temporal: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestScene {
    pub index: usize,
    pub split: Split,
    pub question: QuestionKind,
    pub files: SceneFiles,
    pub target_word_index: usize,
    pub target_concept: usize,
    pub answer: usize,
    pub match_audio_from: usize,
    pub match_label: u8,
    pub gt_temporal: Vec<u8>,
    /// Planted cell (row-major `y * w + x`) per segment, `null` when inactive.
    pub gt_spatial_cells: Vec<Option<usize>>,
}

/// The dataset index written next to the tensor files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub config: TaskConfig,
    pub negative_fraction: f64,
    pub counts: SplitCounts,
    pub scenes: Vec<ManifestScene>,
}

impl Manifest {
    /// Structural checks beyond what deserialization enforces.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::contract(format!("manifest: {msg}")));
        if self.format != MANIFEST_FORMAT {
            return bad(format!("unknown format {:?}", self.format));
        }
        self.config.validate()?;
        if !(0.0..=1.0).contains(&self.negative_fraction) {
            return bad(format!("negative_fraction {} outside [0, 1]", self.negative_fraction));
        }
        if self.scenes.len() != self.counts.total() {
            return bad(format!(
                "{} scenes listed but counts add up to {}",
                self.scenes.len(),
                self.counts.total()
            ));
        }
        let cfg = &self.config;
        for (i, s) in self.scenes.iter().enumerate() {
            if s.index != i {
                return bad(format!("scene {i} has index {}", s.index));
            }
            if s.split != self.counts.split_of(i) {
                return bad(format!("scene {i} tagged {:?}", s.split));
            }
            if s.gt_temporal.len() != cfg.segments || s.gt_spatial_cells.len() != cfg.segments {
                return bad(format!("scene {i} ground truth has the wrong number of segments"));
            }
            let gt: Vec<f64> = s.gt_temporal.iter().map(|&x| f64::from(x)).collect();
            if s.answer != cfg.answer_for(&gt) {
                return bad(format!("scene {i} answer {} disagrees with its temporal mask", s.answer));
            }
            for (t, (&on, cell)) in s.gt_temporal.iter().zip(&s.gt_spatial_cells).enumerate() {
                if on > 1 || (on == 1) != cell.is_some() || cell.is_some_and(|c| c >= cfg.cells()) {
                    return bad(format!("scene {i} segment {t} has inconsistent grounding"));
                }
            }
            if s.target_word_index >= cfg.words || s.target_concept >= cfg.concepts {
                return bad(format!("scene {i} target out of range"));
            }
            if s.match_audio_from >= self.scenes.len()
                || self.counts.split_of(s.match_audio_from) != s.split
                || (s.match_label == 1) != (s.match_audio_from == i)
                || s.match_label > 1
            {
                return bad(format!("scene {i} has an invalid matching pair"));
            }
        }
        Ok(())
    }
}

/// Scenes of all splits held in memory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub config: TaskConfig,
    pub negative_fraction: f64,
    pub counts: SplitCounts,
    pub scenes: Vec<Scene>,
}

impl Dataset {
    /// Generates every scene and its matching pair. Scenes are produced in
    /// parallel, each from its own random stream, so the result does not
    /// depend on scheduling.
    pub fn generate(cfg: &TaskConfig, counts: SplitCounts, negative_fraction: f64) -> Result<Dataset> {
        cfg.validate()?;
        if counts.train == 0 || counts.val == 0 || counts.test == 0 {
            return Err(Error::contract("every split needs at least one scene"));
        }
        if !(0.0..=1.0).contains(&negative_fraction) {
            return Err(Error::contract(format!(
                "negative fraction must lie in [0, 1], got {negative_fraction}"
            )));
        }
        let world = World::new(cfg);
        let mut scenes = (0..counts.total())
            .into_par_iter()
            .map(|i| gen_scene(cfg, &world, i))
            .collect::<Result<Vec<_>>>()?;
        for scene in scenes.iter_mut() {
            let i = scene.index;
            let range = counts.range(counts.split_of(i));
            let mut rng = Draw::new(cfg.seed, 2 * i as u64 + 1);
            if range.len() > 1 && rng.uniform() < negative_fraction {
                let k = rng.index(range.len() - 1);
                let j = range.start + k;
                scene.match_audio_from = if j >= i { j + 1 } else { j };
                scene.match_label = 0;
            }
        }
        Ok(Dataset {
            config: cfg.clone(),
            negative_fraction,
            counts,
            scenes,
        })
    }

    pub fn split(&self, split: Split) -> &[Scene] {
        &self.scenes[self.counts.range(split)]
    }

    /// Audio paired with `scene`'s visuals for the matching task.
    pub fn matching_audio(&self, scene: &Scene) -> &Tensor {
        &self.scenes[scene.match_audio_from].audio
    }

    pub fn manifest(&self) -> Manifest {
        let scenes = self
            .scenes
            .iter()
            .map(|s| ManifestScene {
                index: s.index,
                split: self.counts.split_of(s.index),
                question: s.question,
                files: scene_files(s.index),
                target_word_index: s.target_word_index,
                target_concept: s.target_concept,
                answer: s.answer,
                match_audio_from: s.match_audio_from,
                match_label: s.match_label,
                gt_temporal: s.gt_temporal.data().iter().map(|&x| x as u8).collect(),
                gt_spatial_cells: s.gt_cells(),
            })
            .collect();
        Manifest {
            format: MANIFEST_FORMAT.to_string(),
            config: self.config.clone(),
            negative_fraction: self.negative_fraction,
            counts: self.counts,
            scenes,
        }
    }

    /// Writes every scene as `TJT1` files plus `manifest.json` under `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<Manifest> {
        let dir = dir.as_ref();
        let manifest = self.manifest();
        for (scene, entry) in self.scenes.iter().zip(&manifest.scenes) {
            let scene_dir = dir.join(format!("scenes/{:06}", scene.index));
            fs::create_dir_all(&scene_dir).map_err(|e| Error::io(&scene_dir, e))?;
            let f = &entry.files;
            write_tensor(dir.join(&f.audio), &scene.audio)?;
            write_tensor(dir.join(&f.visual_map), &scene.visual_map)?;
            write_tensor(dir.join(&f.question_words), &scene.question_words)?;
            write_tensor(dir.join(&f.gt_spatial), &scene.gt_spatial)?;
            write_tensor(dir.join(&f.gt_temporal), &scene.gt_temporal)?;
        }
        let path = dir.join(MANIFEST_FILE);
        let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        text.push('\n');
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(manifest)
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Dataset> {
        let dir = dir.as_ref();
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest =
            serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
        manifest.validate()?;
        let cfg = &manifest.config;
        let scenes = manifest
            .scenes
            .iter()
            .map(|m| {
                let load = |rel: &str, shape: &[usize]| -> Result<Tensor> {
                    let t = read_tensor(dir.join(rel))?;
                    if t.shape() != shape {
                        return Err(Error::format(dir.join(rel), format!("expected shape {shape:?}, got {:?}", t.shape())));
                    }
                    Ok(t)
                };
                let (t, d) = (cfg.segments, cfg.dim);
                let scene = Scene {
                    index: m.index,
                    question: m.question,
                    audio: load(&m.files.audio, &[t, d])?,
                    visual_map: load(&m.files.visual_map, &[t, cfg.grid_h, cfg.grid_w, d])?,
                    question_words: load(&m.files.question_words, &[cfg.words, d])?,
                    target_word_index: m.target_word_index,
                    target_concept: m.target_concept,
                    gt_spatial: load(&m.files.gt_spatial, &[t, cfg.grid_h, cfg.grid_w])?,
                    gt_temporal: load(&m.files.gt_temporal, &[t])?,
                    answer: m.answer,
                    match_audio_from: m.match_audio_from,
                    match_label: m.match_label,
                };
                if scene.gt_cells() != m.gt_spatial_cells {
                    return Err(Error::format(&path, format!("scene {} grounding differs from its files", m.index)));
                }
                Ok(scene)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset {
            config: manifest.config,
            negative_fraction: manifest.negative_fraction,
            counts: manifest.counts,
            scenes,
        })
    }
}

fn scene_files(index: usize) -> SceneFiles {
    let base = format!("scenes/{index:06}");
    SceneFiles {
        audio: format!("{base}/audio.tjt"),
        visual_map: format!("{base}/visual_map.tjt"),
        question_words: format!("{base}/question_words.tjt"),
        gt_spatial: format!("{base}/gt_spatial.tjt"),
        gt_temporal: format!("{base}/gt_temporal.tjt"),
    }
}

/// Generates a dataset and writes it to `out_dir`.
pub fn gen_dataset(
    cfg: &TaskConfig,
    counts: SplitCounts,
    negative_fraction: f64,
    out_dir: impl AsRef<Path>,
) -> Result<Manifest> {
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    Dataset::generate(cfg, counts, negative_fraction)?.save(out_dir)
}
