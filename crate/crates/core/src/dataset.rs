//! On-disk dataset layout and in-memory sample generation.
//!
//! A dataset directory holds `images/NNNN.ppm`, `masks/NNNN.pgm`,
//! `sparse/NNNN.pgm` (ignore = 255) and a `meta.json` manifest recording
//! every seed so the directory can be regenerated bit-identically.

use std::path::Path;

use crate::error::{CoreError, Result};
use crate::losses::SparseLabelMap;
use crate::parallel;
use crate::pnm;
use crate::rng::Rng;
use crate::synthetic::{self, SparsifySpec};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub train_count: usize,
    pub eval_count: usize,
    pub width: usize,
    pub height: usize,
    pub num_classes: usize,
    pub max_objects: usize,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            train_count: 200,
            eval_count: 50,
            width: 64,
            height: 64,
            num_classes: 5,
            max_objects: 3,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Sample {
    pub image: Tensor,
    pub dense: Vec<u8>,
    pub sparse: SparseLabelMap,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub samples: Vec<Sample>,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub count: usize,
    pub width: usize,
    pub height: usize,
    pub num_classes: usize,
    pub max_objects: usize,
    pub sparsify: SparsifySpec,
    pub scene_seeds: Vec<u64>,
    pub sparsify_seeds: Vec<u64>,
}

/// Scene i draws its own sub-seed; the sparsifier another, so changing
/// the annotation mode never perturbs the imagery.
fn scene_seed(base: u64, index: usize) -> u64 {
    Rng::derive(base, index as u64).next_u64()
}

fn sparse_seed(base: u64, index: usize) -> u64 {
    Rng::derive(base ^ 0x5157_AE11, index as u64).next_u64()
}

/// Generate `count` samples in memory, deterministically from `seed`.
pub fn generate_samples(
    cfg: &DatasetConfig,
    spec: &SparsifySpec,
    split_seed: u64,
    count: usize,
) -> Result<Dataset> {
    spec.validate()?;
    let results = parallel::map_range(count, |i| -> Result<Sample> {
        let scene = synthetic::generate_scene(
            scene_seed(split_seed, i),
            cfg.width,
            cfg.height,
            cfg.num_classes,
            cfg.max_objects,
        )?;
        let sparse = synthetic::sparsify(
            &scene.dense_mask,
            cfg.height,
            cfg.width,
            spec,
            sparse_seed(split_seed, i),
        )?;
        Ok(Sample {
            image: scene.image,
            dense: scene.dense_mask,
            sparse,
        })
    });
    let samples: Vec<Sample> = results.into_iter().collect::<Result<_>>()?;
    Ok(Dataset {
        height: cfg.height,
        width: cfg.width,
        num_classes: cfg.num_classes,
        samples,
    })
}

/// Train split uses the config seed, eval split a fixed offset of it.
pub fn train_split_seed(cfg: &DatasetConfig) -> u64 {
    cfg.seed
}

pub fn eval_split_seed(cfg: &DatasetConfig) -> u64 {
    cfg.seed.wrapping_add(0x00E0_7A11)
}

fn ensure_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| CoreError::io(path.display().to_string(), e))
}

/// Write one split to `dir` and return its manifest.
pub fn write_split(
    dir: &Path,
    cfg: &DatasetConfig,
    spec: &SparsifySpec,
    split_seed: u64,
    count: usize,
) -> Result<Manifest> {
    let data = generate_samples(cfg, spec, split_seed, count)?;
    ensure_dir(&dir.join("images"))?;
    ensure_dir(&dir.join("masks"))?;
    ensure_dir(&dir.join("sparse"))?;
    for (i, sample) in data.samples.iter().enumerate() {
        pnm::write_ppm(&dir.join(format!("images/{i:04}.ppm")), &sample.image)?;
        pnm::write_pgm(
            &dir.join(format!("masks/{i:04}.pgm")),
            cfg.height,
            cfg.width,
            &sample.dense,
        )?;
        pnm::write_pgm(
            &dir.join(format!("sparse/{i:04}.pgm")),
            cfg.height,
            cfg.width,
            &sample.sparse.grid,
        )?;
    }
    let manifest = Manifest {
        seed: split_seed,
        count,
        width: cfg.width,
        height: cfg.height,
        num_classes: cfg.num_classes,
        max_objects: cfg.max_objects,
        sparsify: spec.clone(),
        scene_seeds: (0..count).map(|i| scene_seed(split_seed, i)).collect(),
        sparsify_seeds: (0..count).map(|i| sparse_seed(split_seed, i)).collect(),
    };
    let meta = serde_json::to_string_pretty(&manifest)
        .map_err(|e| CoreError::Parse(e.to_string()))?;
    let meta_path = dir.join("meta.json");
    std::fs::write(&meta_path, meta)
        .map_err(|e| CoreError::io(meta_path.display().to_string(), e))?;
    Ok(manifest)
}

/// Load a split written by `write_split`.
pub fn load_split(dir: &Path) -> Result<(Dataset, Manifest)> {
    let meta_path = dir.join("meta.json");
    let meta = std::fs::read_to_string(&meta_path)
        .map_err(|e| CoreError::io(meta_path.display().to_string(), e))?;
    let manifest: Manifest =
        serde_json::from_str(&meta).map_err(|e| CoreError::Parse(format!("meta.json: {e}")))?;
    let mut samples = Vec::with_capacity(manifest.count);
    for i in 0..manifest.count {
        let image = pnm::read_ppm(&dir.join(format!("images/{i:04}.ppm")))?;
        let (_, _, dense) = pnm::read_pgm(&dir.join(format!("masks/{i:04}.pgm")))?;
        let (h, w, sparse) = pnm::read_pgm(&dir.join(format!("sparse/{i:04}.pgm")))?;
        samples.push(Sample {
            image,
            dense,
            sparse: SparseLabelMap::new(h, w, sparse)?,
        });
    }
    Ok((
        Dataset {
            height: manifest.height,
            width: manifest.width,
            num_classes: manifest.num_classes,
            samples,
        },
        manifest,
    ))
}
