//! SGD training loop over the synthetic dataset, deterministic given the
//! seed: sampling order, flip decisions and the gradient reduction order
//! are all fixed up front.

use crate::dataset::{Dataset, Sample};
use crate::error::{CoreError, Result};
use crate::losses::{self, LossConfig, Metric, SparseLabelMap};
use crate::metrics::{nearest_upsample, ConfusionMatrix};
use crate::model::{self, LossPath, ModelConfig};
use crate::parallel;
use crate::params::ParamSet;
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    Constant,
    Poly,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub flip_prob: f64,
    pub lr_schedule: LrSchedule,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.001,
            momentum: 0.9,
            weight_decay: 1e-4,
            steps: 100,
            batch_size: 4,
            seed: 0,
            flip_prob: 0.5,
            lr_schedule: LrSchedule::Constant,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(CoreError::Config("steps must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(CoreError::Config("batch_size must be >= 1".into()));
        }
        if self.learning_rate < 0.0 || self.momentum < 0.0 || self.weight_decay < 0.0 {
            return Err(CoreError::Config("rates must be nonnegative".into()));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(CoreError::Config("flip_prob must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        match self.lr_schedule {
            LrSchedule::Constant => self.learning_rate,
            LrSchedule::Poly => {
                let frac = 1.0 - step as f64 / self.steps as f64;
                self.learning_rate * frac.max(0.0).powf(0.9)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub l_seg: f64,
    pub l_aff: f64,
    pub total: f64,
    pub lr: f64,
}

pub fn write_log_csv<W: std::io::Write>(w: &mut W, log: &[StepLog]) -> Result<()> {
    let mut emit = || -> std::io::Result<()> {
        writeln!(w, "step,l_seg,l_aff,total,lr")?;
        for row in log {
            writeln!(
                w,
                "{},{:.17e},{:.17e},{:.17e},{:.17e}",
                row.step, row.l_seg, row.l_aff, row.total, row.lr
            )?;
        }
        Ok(())
    };
    emit().map_err(|e| CoreError::io("loss log", e))
}

pub fn flip_image(image: &Tensor) -> Result<Tensor> {
    let (h, w, c) = match image.shape() {
        [h, w, c] => (*h, *w, *c),
        other => {
            return Err(CoreError::Dimension(format!(
                "flip expects H x W x C, got {:?}",
                other
            )))
        }
    };
    let mut out = vec![0.0; h * w * c];
    for y in 0..h {
        for x in 0..w {
            let src = (y * w + (w - 1 - x)) * c;
            out[(y * w + x) * c..(y * w + x) * c + c]
                .copy_from_slice(&image.data()[src..src + c]);
        }
    }
    Tensor::new(vec![h, w, c], out)
}

pub fn flip_grid(grid: &[u8], h: usize, w: usize) -> Vec<u8> {
    let mut out = vec![0u8; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = grid[y * w + (w - 1 - x)];
        }
    }
    out
}

/// Flip image, dense mask and sparse labels together.
pub fn flip_sample(sample: &Sample) -> Result<Sample> {
    let h = sample.sparse.height;
    let w = sample.sparse.width;
    Ok(Sample {
        image: flip_image(&sample.image)?,
        dense: flip_grid(&sample.dense, h, w),
        sparse: SparseLabelMap::new(h, w, flip_grid(&sample.sparse.grid, h, w))?,
    })
}

struct Sgd {
    velocity: Vec<Tensor>,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
}

impl Sgd {
    fn new(params: &ParamSet, cfg: &TrainConfig) -> Self {
        Sgd {
            velocity: (0..params.len())
                .map(|i| Tensor::zeros(params.tensor(i).shape().to_vec()))
                .collect(),
            lr: cfg.learning_rate,
            momentum: cfg.momentum,
            weight_decay: cfg.weight_decay,
        }
    }

    fn step(&mut self, params: &mut ParamSet, grads: &[Tensor]) {
        for i in 0..params.len() {
            let v = self.velocity[i].data_mut();
            let p = params.tensor_mut(i).data_mut();
            let g = grads[i].data();
            for j in 0..p.len() {
                let grad = g[j] + self.weight_decay * p[j];
                v[j] = self.momentum * v[j] + grad;
                p[j] -= self.lr * v[j];
            }
        }
    }
}

pub struct TrainOutput {
    pub params: ParamSet,
    pub log: Vec<StepLog>,
}

/// Classic SGD with momentum and L2 weight decay; batch gradient is the
/// mean over elements, summed in batch order.
pub fn train(
    model_cfg: &ModelConfig,
    loss_cfg: &LossConfig,
    train_cfg: &TrainConfig,
    data: &Dataset,
    path: LossPath,
) -> Result<TrainOutput> {
    model_cfg.validate()?;
    loss_cfg.validate()?;
    train_cfg.validate()?;
    if data.samples.is_empty() {
        return Err(CoreError::Validation("training dataset is empty".into()));
    }
    for s in &data.samples {
        s.sparse.validate_classes(model_cfg.head.num_classes)?;
    }
    let mut params = model::init_params(model_cfg, train_cfg.seed)?;
    let mut sgd = Sgd::new(&params, train_cfg);
    let mut rng = Rng::new(train_cfg.seed ^ 0x7261_696E);
    let mut order: Vec<usize> = (0..data.samples.len()).collect();
    let mut cursor = order.len(); // forces an initial shuffle
    let mut log = Vec::with_capacity(train_cfg.steps);

    for step in 0..train_cfg.steps {
        // draw the batch and its flip decisions before any parallel work
        let mut batch = Vec::with_capacity(train_cfg.batch_size);
        for _ in 0..train_cfg.batch_size {
            if cursor >= order.len() {
                for i in (1..order.len()).rev() {
                    let j = rng.below(i + 1);
                    order.swap(i, j);
                }
                cursor = 0;
            }
            let idx = order[cursor];
            cursor += 1;
            let flip = rng.uniform() < train_cfg.flip_prob;
            batch.push((idx, flip));
        }

        let outputs = parallel::map_range(batch.len(), |bi| -> Result<model::StepOutput> {
            let (idx, flip) = batch[bi];
            let sample = if flip {
                flip_sample(&data.samples[idx])?
            } else {
                data.samples[idx].clone()
            };
            let cells = losses::project_labels(&sample.sparse, &model_cfg.encoder)?;
            model::loss_and_grads(model_cfg, loss_cfg, &params, &sample.image, &cells, path)
        });
        let outputs: Vec<model::StepOutput> = outputs.into_iter().collect::<Result<_>>()?;

        let inv = 1.0 / outputs.len() as f64;
        let mut grads: Vec<Tensor> = (0..params.len())
            .map(|i| Tensor::zeros(params.tensor(i).shape().to_vec()))
            .collect();
        let (mut l_seg, mut l_aff, mut total) = (0.0, 0.0, 0.0);
        for out in &outputs {
            l_seg += out.l_seg * inv;
            l_aff += out.l_aff * inv;
            total += out.total * inv;
            for (acc, g) in grads.iter_mut().zip(&out.grads) {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += b * inv;
                }
            }
        }
        if !total.is_finite() {
            return Err(CoreError::Diverged { step });
        }
        sgd.lr = train_cfg.lr_at(step);
        sgd.step(&mut params, &grads);
        log.push(StepLog {
            step,
            l_seg,
            l_aff,
            total,
            lr: sgd.lr,
        });
    }
    Ok(TrainOutput { params, log })
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub per_class: Vec<Option<f64>>,
    pub miou: f64,
    pub confusion: ConfusionMatrix,
}

/// Forward + argmax + nearest-neighbor upsampling + confusion counts
/// over the full dataset, no augmentation.
pub fn evaluate(model_cfg: &ModelConfig, params: &ParamSet, data: &Dataset) -> Result<EvalReport> {
    if data.samples.is_empty() {
        return Err(CoreError::Validation("evaluation dataset is empty".into()));
    }
    let (gh, gw) = model_cfg.encoder.grid(0)?;
    let c = model_cfg.head.num_classes;
    let per_sample = parallel::map_range(data.samples.len(), |i| -> Result<ConfusionMatrix> {
        let sample = &data.samples[i];
        let out = model::forward_inference(model_cfg, params, &sample.image)?;
        let logits = &out.logits;
        let mut grid = vec![0u8; gh * gw];
        for m in 0..gh * gw {
            let mut best = 0usize;
            for k in 1..c {
                if logits.at2(m, k) > logits.at2(m, best) {
                    best = k;
                }
            }
            grid[m] = best as u8;
        }
        let pred = nearest_upsample(&grid, gh, gw, data.height, data.width);
        let mut cm = ConfusionMatrix::new(c);
        cm.accumulate(&pred, &sample.dense)?;
        Ok(cm)
    });
    let mut confusion = ConfusionMatrix::new(c);
    for cm in per_sample {
        confusion.merge(&cm?);
    }
    let (per_class, miou) = confusion.miou();
    Ok(EvalReport {
        per_class,
        miou,
        confusion,
    })
}

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub name: String,
    pub block_mask: [bool; 4],
    pub metric: Metric,
    pub alpha: f64,
    pub miou: f64,
    pub final_total: f64,
}

/// Block-mask rows (exp1..exp8) plus one row per distance metric, all on
/// shared seeds.
pub fn ablation_grid(
    model_cfg: &ModelConfig,
    loss_base: &LossConfig,
    train_cfg: &TrainConfig,
    train_data: &Dataset,
    eval_data: &Dataset,
) -> Result<Vec<AblationRow>> {
    const BLOCK_ROWS: [(&str, [bool; 4]); 8] = [
        ("exp1", [false, false, false, false]),
        ("exp2", [true, false, false, false]),
        ("exp3", [false, true, false, false]),
        ("exp4", [false, false, true, false]),
        ("exp5", [false, false, false, true]),
        ("exp6", [true, true, false, false]),
        ("exp7", [true, true, true, false]),
        ("exp8", [true, true, true, true]),
    ];
    let mut rows = Vec::new();
    for (name, mask) in BLOCK_ROWS {
        let enabled = mask.iter().any(|&b| b);
        let loss_cfg = LossConfig {
            alpha: if enabled { loss_base.alpha } else { 0.0 },
            block_mask: if enabled { mask } else { [true; 4] },
            ..loss_base.clone()
        };
        let path = if enabled {
            LossPath::Full
        } else {
            LossPath::SegOnly
        };
        let out = train(model_cfg, &loss_cfg, train_cfg, train_data, path)?;
        let report = evaluate(model_cfg, &out.params, eval_data)?;
        rows.push(AblationRow {
            name: name.to_string(),
            block_mask: mask,
            metric: loss_base.metric,
            alpha: loss_cfg.alpha,
            miou: report.miou,
            final_total: out.log.last().expect("steps >= 1").total,
        });
    }
    for metric in Metric::ALL {
        let loss_cfg = LossConfig {
            metric,
            ..loss_base.clone()
        };
        let out = train(model_cfg, &loss_cfg, train_cfg, train_data, LossPath::Full)?;
        let report = evaluate(model_cfg, &out.params, eval_data)?;
        rows.push(AblationRow {
            name: format!("metric_{}", metric.name()),
            block_mask: loss_cfg.block_mask,
            metric,
            alpha: loss_cfg.alpha,
            miou: report.miou,
            final_total: out.log.last().expect("steps >= 1").total,
        });
    }
    Ok(rows)
}

pub fn write_ablation_csv<W: std::io::Write>(w: &mut W, rows: &[AblationRow]) -> Result<()> {
    let mut emit = || -> std::io::Result<()> {
        writeln!(w, "name,block1,block2,block3,block4,metric,alpha,miou,final_total")?;
        for r in rows {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{:.6},{:.6}",
                r.name,
                r.block_mask[0] as u8,
                r.block_mask[1] as u8,
                r.block_mask[2] as u8,
                r.block_mask[3] as u8,
                r.metric.name(),
                r.alpha,
                r.miou,
                r.final_total
            )?;
        }
        Ok(())
    };
    emit().map_err(|e| CoreError::io("ablation csv", e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_samples, DatasetConfig};
    use crate::encoder::EncoderConfig;
    use crate::seg_head::HeadConfig;
    use crate::synthetic::SparsifySpec;

    pub(crate) fn tiny_model() -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                image_width: 16,
                image_height: 16,
                patch_size: 2,
                embed_dims: [4, 6, 6, 8],
                num_layers: [1, 1, 1, 1],
                reduction: [2, 1, 1, 1],
                strides: [1, 2, 2, 2],
            },
            head: HeadConfig {
                common_dim: 6,
                num_classes: 3,
            },
        }
    }

    fn tiny_data(n: usize) -> Dataset {
        let cfg = DatasetConfig {
            width: 16,
            height: 16,
            num_classes: 3,
            max_objects: 1,
            seed: 2,
            ..DatasetConfig::default()
        };
        generate_samples(&cfg, &SparsifySpec::default(), cfg.seed, n).unwrap()
    }

    #[test]
    fn zero_lr_leaves_parameters_unchanged() {
        let model = tiny_model();
        let data = tiny_data(2);
        let train_cfg = TrainConfig {
            learning_rate: 0.0,
            weight_decay: 0.0,
            steps: 3,
            batch_size: 1,
            ..TrainConfig::default()
        };
        let out = train(&model, &LossConfig::default(), &train_cfg, &data, LossPath::Full)
            .unwrap();
        let init = model::init_params(&model, train_cfg.seed).unwrap();
        for i in 0..init.len() {
            assert_eq!(init.tensor(i).data(), out.params.tensor(i).data());
        }
    }

    #[test]
    fn single_step_matches_hand_applied_update() {
        let model = tiny_model();
        let data = tiny_data(1);
        let train_cfg = TrainConfig {
            learning_rate: 0.05,
            momentum: 0.9,
            weight_decay: 1e-4,
            steps: 1,
            batch_size: 1,
            flip_prob: 0.0,
            ..TrainConfig::default()
        };
        let loss_cfg = LossConfig::default();
        let out = train(&model, &loss_cfg, &train_cfg, &data, LossPath::Full).unwrap();

        let init = model::init_params(&model, train_cfg.seed).unwrap();
        let cells = losses::project_labels(&data.samples[0].sparse, &model.encoder).unwrap();
        let step = model::loss_and_grads(
            &model,
            &loss_cfg,
            &init,
            &data.samples[0].image,
            &cells,
            LossPath::Full,
        )
        .unwrap();
        for i in 0..init.len() {
            let p0 = init.tensor(i).data();
            let g = step.grads[i].data();
            let p1 = out.params.tensor(i).data();
            for j in 0..p0.len() {
                let v = g[j] + train_cfg.weight_decay * p0[j];
                let expect = p0[j] - train_cfg.learning_rate * v;
                assert!(
                    (p1[j] - expect).abs() < 1e-14,
                    "param {i} coord {j}"
                );
            }
        }
        assert!((out.log[0].total - step.total).abs() < 1e-14);
    }

    #[test]
    fn same_seed_identical_runs() {
        let model = tiny_model();
        let data = tiny_data(3);
        let train_cfg = TrainConfig {
            steps: 3,
            batch_size: 2,
            learning_rate: 0.05,
            ..TrainConfig::default()
        };
        let a = train(&model, &LossConfig::default(), &train_cfg, &data, LossPath::Full)
            .unwrap();
        let b = train(&model, &LossConfig::default(), &train_cfg, &data, LossPath::Full)
            .unwrap();
        assert_eq!(a.log, b.log);
        for i in 0..a.params.len() {
            assert_eq!(a.params.tensor(i).data(), b.params.tensor(i).data());
        }
    }

    #[test]
    fn empty_dataset_rejected() {
        let model = tiny_model();
        let data = Dataset {
            height: 16,
            width: 16,
            num_classes: 3,
            samples: vec![],
        };
        assert!(train(
            &model,
            &LossConfig::default(),
            &TrainConfig::default(),
            &data,
            LossPath::Full
        )
        .is_err());
        let params = model::init_params(&model, 0).unwrap();
        assert!(evaluate(&model, &params, &data).is_err());
    }

    #[test]
    fn evaluate_deterministic() {
        let model = tiny_model();
        let data = tiny_data(2);
        let params = model::init_params(&model, 1).unwrap();
        let a = evaluate(&model, &params, &data).unwrap();
        let b = evaluate(&model, &params, &data).unwrap();
        assert_eq!(a.miou, b.miou);
        assert_eq!(a.confusion, b.confusion);
    }

    #[test]
    fn flip_consistency() {
        let data = tiny_data(1);
        let s = &data.samples[0];
        let f = flip_sample(s).unwrap();
        let (h, w) = (s.sparse.height, s.sparse.width);
        for y in 0..h {
            for x in 0..w {
                assert_eq!(f.dense[y * w + x], s.dense[y * w + (w - 1 - x)]);
                assert_eq!(f.sparse.at(y, x), s.sparse.at(y, w - 1 - x));
                for c in 0..3 {
                    assert_eq!(
                        f.image.data()[(y * w + x) * 3 + c],
                        s.image.data()[(y * w + (w - 1 - x)) * 3 + c]
                    );
                }
            }
        }
        // double flip restores everything
        let ff = flip_sample(&f).unwrap();
        assert_eq!(ff.dense, s.dense);
        assert_eq!(ff.image.data(), s.image.data());
    }

    #[test]
    fn poly_schedule_decays() {
        let cfg = TrainConfig {
            lr_schedule: LrSchedule::Poly,
            steps: 10,
            ..TrainConfig::default()
        };
        assert!(cfg.lr_at(0) > cfg.lr_at(5));
        assert!(cfg.lr_at(5) > cfg.lr_at(9));
    }
}
