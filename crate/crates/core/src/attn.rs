//! Attention dumps: per-segment spatial heatmaps as plain PGM images and
//! the raw weights as CSV.
//!
//! For scene `i` the layout under the output directory is
//!
//! ```text
//! scene_<i>/segment_<t>.pgm   combined region weights, h x w, 0..=255
//! scene_<i>/spatial.csv       segment,r0,..,r{hw-1}
//! scene_<i>/temporal.csv      modality,t0,..,t{T-1}   (rows w_a, w_v)
//! summary.json                max-cell hit rate on active segments
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Inspection, Model};
use crate::synth::Scene;
use crate::tensor::Tensor;

/// Plain (P2) greyscale image of a `1 x hw` weight row laid out as `h x w`.
/// Values are min-max scaled to `0..=255`; a constant map is all zeros.
pub fn pgm(weights: &Tensor, h: usize, w: usize) -> Result<String> {
    if weights.len() != h * w {
        return Err(Error::shape("pgm", weights.shape(), &[h, w]));
    }
    let d = weights.data();
    let lo = d.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = d.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let mut s = format!("P2\n{w} {h}\n255\n");
    for y in 0..h {
        let row: Vec<String> = (0..w)
            .map(|x| {
                let v = if span > 0.0 { ((d[y * w + x] - lo) / span * 255.0).round() } else { 0.0 };
                (v as u8).to_string()
            })
            .collect();
        s.push_str(&row.join(" "));
        s.push('\n');
    }
    Ok(s)
}

pub fn spatial_csv(spatial: &[Tensor]) -> String {
    let cells = spatial.first().map_or(0, Tensor::len);
    let mut s = String::from("segment");
    for r in 0..cells {
        let _ = write!(s, ",r{r}");
    }
    s.push('\n');
    for (t, row) in spatial.iter().enumerate() {
        let _ = write!(s, "{t}");
        for x in row.data() {
            let _ = write!(s, ",{x}");
        }
        s.push('\n');
    }
    s
}

pub fn temporal_csv(ins: &Inspection) -> String {
    let t_len = ins.temporal.w_a.len();
    let mut s = String::from("modality");
    for t in 0..t_len {
        let _ = write!(s, ",t{t}");
    }
    s.push('\n');
    for (name, w) in [("w_a", &ins.temporal.w_a), ("w_v", &ins.temporal.w_v)] {
        s.push_str(name);
        for x in w.data() {
            let _ = write!(s, ",{x}");
        }
        s.push('\n');
    }
    s
}

/// How often the most-attended region is the planted one.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GroundingHits {
    pub active_segments: usize,
    pub hits: usize,
    pub hit_rate: f64,
}

impl GroundingHits {
    pub fn add(&mut self, scene: &Scene, spatial: &[Tensor]) {
        for (cell, w) in scene.gt_cells().iter().zip(spatial) {
            if let Some(c) = cell {
                self.active_segments += 1;
                self.hits += (w.argmax() == *c) as usize;
            }
        }
        self.hit_rate = if self.active_segments == 0 { 0.0 } else { self.hits as f64 / self.active_segments as f64 };
    }
}

/// Writes heatmaps and CSVs for every scene in `scenes` under `out_dir`.
pub fn dump_attention(model: &Model, scenes: &[Scene], out_dir: impl AsRef<Path>) -> Result<GroundingHits> {
    let out_dir = out_dir.as_ref();
    let mut hits = GroundingHits::default();
    for scene in scenes {
        let ins = model.inspect(scene)?;
        let shape = scene.visual_map.shape();
        let (h, w) = (shape[1], shape[2]);
        let dir = out_dir.join(format!("scene_{:06}", scene.index));
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for (t, weights) in ins.spatial.iter().enumerate() {
            write(&dir.join(format!("segment_{t}.pgm")), &pgm(weights, h, w)?)?;
        }
        write(&dir.join("spatial.csv"), &spatial_csv(&ins.spatial))?;
        write(&dir.join("temporal.csv"), &temporal_csv(&ins))?;
        hits.add(scene, &ins.spatial);
    }
    let mut text = serde_json::to_string_pretty(&hits).expect("summary serializes");
    text.push('\n');
    write(&out_dir.join("summary.json"), &text)?;
    Ok(hits)
}

/// Max-cell hit statistics without writing anything.
pub fn grounding_hits(model: &Model, scenes: &[Scene]) -> Result<GroundingHits> {
    let mut hits = GroundingHits::default();
    for scene in scenes {
        hits.add(scene, &model.inspect(scene)?.spatial);
    }
    Ok(hits)
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::create_dir_all(path.parent().expect("file has a parent")).map_err(|e| Error::io(path, e))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::synth::{gen_scene, TaskConfig, World};

    #[test]
    fn pgm_scaling() {
        let t = Tensor::row_vector(&[0.125, 0.25, 0.375, 0.625]);
        assert_eq!(pgm(&t, 2, 2).unwrap(), "P2\n2 2\n255\n0 64\n128 255\n");
        let flat = Tensor::full(&[1, 6], 1.0 / 6.0);
        assert_eq!(pgm(&flat, 2, 3).unwrap(), "P2\n3 2\n255\n0 0 0\n0 0 0\n");
        assert!(pgm(&t, 3, 2).is_err());
    }

    #[test]
    fn dump_writes_expected_files() {
        let task = TaskConfig { segments: 3, grid_h: 2, grid_w: 3, dim: 8, ..TaskConfig::default() };
        let world = World::new(&task);
        let scenes: Vec<Scene> = (0..2).map(|i| gen_scene(&task, &world, i).unwrap()).collect();
        let model = Model::new(ModelConfig::new(8, task.answers), 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let hits = dump_attention(&model, &scenes, dir.path()).unwrap();
        let active: usize = scenes.iter().map(Scene::active_segments).sum();
        assert_eq!(hits.active_segments, active);
        let img = fs::read_to_string(dir.path().join("scene_000001/segment_2.pgm")).unwrap();
        assert!(img.starts_with("P2\n3 2\n255\n"));
        let csv = fs::read_to_string(dir.path().join("scene_000000/temporal.csv")).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "modality,t0,t1,t2");
        for line in &lines[1..] {
            let sum: f64 = line.split(',').skip(1).map(|x| x.parse::<f64>().unwrap()).sum();
            assert!((sum - 1.0).abs() < 1e-9);
        }
        let sp = fs::read_to_string(dir.path().join("scene_000000/spatial.csv")).unwrap();
        assert_eq!(sp.lines().count(), 4);
        assert_eq!(grounding_hits(&model, &scenes).unwrap(), hits);
    }
}
