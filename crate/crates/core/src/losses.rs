//! Training objective: partial cross-entropy on labeled patch cells plus
//! the affinity loss that ties attention-propagated class probabilities
//! to the direct predictions, block by block.

use std::rc::Rc;

use crate::encoder::{AttentionStack, EncoderConfig, NUM_BLOCKS};
use crate::error::{CoreError, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{bilinear_table, Tensor};

pub const IGNORE: u8 = 255;
const LOG_EPS: f64 = 1e-12;

/// Per-pixel class-or-ignore grid (255 = ignore).
#[derive(Debug, Clone, PartialEq)]
pub struct SparseLabelMap {
    pub height: usize,
    pub width: usize,
    pub grid: Vec<u8>,
}

impl SparseLabelMap {
    pub fn new(height: usize, width: usize, grid: Vec<u8>) -> Result<Self> {
        if grid.len() != height * width {
            return Err(CoreError::Dimension(format!(
                "label grid has {} entries for {}x{}",
                grid.len(),
                height,
                width
            )));
        }
        Ok(SparseLabelMap {
            height,
            width,
            grid,
        })
    }

    pub fn validate_classes(&self, num_classes: usize) -> Result<()> {
        if let Some(&bad) = self
            .grid
            .iter()
            .find(|&&l| l != IGNORE && l as usize >= num_classes)
        {
            return Err(CoreError::Validation(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(())
    }

    pub fn at(&self, y: usize, x: usize) -> u8 {
        self.grid[y * self.width + x]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    L1,
    L2,
    Kl,
    Ce,
}

impl Metric {
    pub const ALL: [Metric; 4] = [Metric::Kl, Metric::Ce, Metric::L2, Metric::L1];

    pub fn name(&self) -> &'static str {
        match self {
            Metric::L1 => "l1",
            Metric::L2 => "l2",
            Metric::Kl => "kl",
            Metric::Ce => "ce",
        }
    }
}

/// What Eq.-style category normalization is fed with: the literal reading
/// re-normalizes probabilities (double softmax); the alternative feeds
/// interpolated logits so normalization is the only softmax.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormalizationInput {
    Probabilities,
    Logits,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub alpha: f64,
    pub metric: Metric,
    pub block_mask: [bool; NUM_BLOCKS],
    pub ignore_index: u8,
    pub normalization_input: NormalizationInput,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 1.2,
            metric: Metric::L1,
            block_mask: [true; NUM_BLOCKS],
            ignore_index: IGNORE,
            normalization_input: NormalizationInput::Probabilities,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 {
            return Err(CoreError::Config("alpha must be nonnegative".into()));
        }
        if self.alpha > 0.0 && !self.block_mask.iter().any(|&b| b) {
            return Err(CoreError::Config(
                "alpha > 0 requires at least one enabled block".into(),
            ));
        }
        Ok(())
    }

    pub fn enabled_blocks(&self) -> usize {
        self.block_mask.iter().filter(|&&b| b).count()
    }
}

/// Downproject a pixel label map to the finest patch grid. A grid cell
/// takes a class only if every labeled pixel it covers agrees; conflicts
/// and unlabeled cells become IGNORE.
pub fn project_labels(labels: &SparseLabelMap, enc: &EncoderConfig) -> Result<Vec<u8>> {
    if labels.height != enc.image_height || labels.width != enc.image_width {
        return Err(CoreError::Dimension(format!(
            "label map {}x{} vs image {}x{}",
            labels.height, labels.width, enc.image_height, enc.image_width
        )));
    }
    let (gh, gw) = enc.grid(0)?;
    let cell_h = enc.image_height / gh;
    let cell_w = enc.image_width / gw;
    let mut out = vec![IGNORE; gh * gw];
    for cy in 0..gh {
        for cx in 0..gw {
            let mut cell_label = IGNORE;
            let mut conflict = false;
            for dy in 0..cell_h {
                for dx in 0..cell_w {
                    let l = labels.at(cy * cell_h + dy, cx * cell_w + dx);
                    if l == IGNORE {
                        continue;
                    }
                    if cell_label == IGNORE {
                        cell_label = l;
                    } else if cell_label != l {
                        conflict = true;
                    }
                }
            }
            out[cy * gw + cx] = if conflict { IGNORE } else { cell_label };
        }
    }
    Ok(out)
}

/// Mean over labeled grid cells of -log softmax(P)[cell, label].
pub fn partial_cross_entropy(tape: &mut Tape, logits: Var, labels: Rc<Vec<u8>>) -> Result<Var> {
    tape.partial_cross_entropy(logits, labels)
}

/// Y_l = A_l (x) P'_l: transport class scores across the attention map.
pub fn propagate(tape: &mut Tape, attention: Var, probs: Var) -> Result<Var> {
    tape.matmul(attention, probs)
}

/// Row-wise softmax over the category dimension.
pub fn normalize_categories(tape: &mut Tape, x: Var) -> Result<Var> {
    tape.softmax_rows(x)
}

/// Per-patch mean of the chosen per-row distance between two
/// category-normalized score matrices.
pub fn metric_distance_value(metric: Metric, ystar: &Tensor, pstar: &Tensor) -> Result<f64> {
    let (m, c) = ystar.dims2()?;
    if pstar.shape() != ystar.shape() {
        return Err(CoreError::Dimension(format!(
            "metric inputs differ: {:?} vs {:?}",
            ystar.shape(),
            pstar.shape()
        )));
    }
    let mut total = 0.0;
    for i in 0..m {
        for j in 0..c {
            let y = ystar.at2(i, j);
            let p = pstar.at2(i, j);
            total += match metric {
                Metric::L1 => (y - p).abs(),
                Metric::L2 => (y - p) * (y - p),
                Metric::Kl => y * (y.max(LOG_EPS).ln() - p.max(LOG_EPS).ln()),
                Metric::Ce => -y * p.max(LOG_EPS).ln(),
            };
        }
    }
    Ok(total / m as f64)
}

fn metric_distance(tape: &mut Tape, metric: Metric, ystar: Var, pstar: Var) -> Result<Var> {
    let (m, _) = tape.value(ystar).dims2()?;
    let summed = match metric {
        Metric::L1 => {
            let d = tape.sub(ystar, pstar)?;
            let d = tape.abs(d)?;
            tape.sum_all(d)?
        }
        Metric::L2 => {
            let d = tape.sub(ystar, pstar)?;
            let d = tape.square(d)?;
            tape.sum_all(d)?
        }
        Metric::Kl => {
            let ly = tape.ln_clamped(ystar, LOG_EPS)?;
            let lp = tape.ln_clamped(pstar, LOG_EPS)?;
            let d = tape.sub(ly, lp)?;
            let term = tape.mul(ystar, d)?;
            tape.sum_all(term)?
        }
        Metric::Ce => {
            let lp = tape.ln_clamped(pstar, LOG_EPS)?;
            let term = tape.mul(ystar, lp)?;
            let s = tape.sum_all(term)?;
            tape.scale(s, -1.0)?
        }
    };
    tape.scale(summed, 1.0 / m as f64)
}

/// Per-block intermediates, mostly for tests and diagnostics.
pub struct BlockPropagation {
    pub block: usize,
    pub interpolated_reduced: Var,
    pub interpolated_full: Var,
    pub propagated: Var,
    pub propagated_normalized: Var,
    pub direct_normalized: Var,
}

pub struct AffinityOutput {
    pub loss: Var,
    pub blocks: Vec<BlockPropagation>,
}

/// Affinity loss across enabled blocks, averaged over the enabled count.
pub fn affinity_loss(
    tape: &mut Tape,
    attn: &AttentionStack,
    logits: Var,
    cfg: &LossConfig,
) -> Result<AffinityOutput> {
    cfg.validate()?;
    if !cfg.block_mask.iter().any(|&b| b) {
        return Err(CoreError::Config(
            "affinity loss with no enabled blocks".into(),
        ));
    }
    let source = match cfg.normalization_input {
        NormalizationInput::Probabilities => tape.softmax_rows(logits)?,
        NormalizationInput::Logits => logits,
    };
    let (h1, w1) = attn.blocks[0].grid;
    let mut acc: Option<Var> = None;
    let mut blocks = Vec::new();
    for (l, block) in attn.blocks.iter().enumerate() {
        if !cfg.block_mask[l] {
            continue;
        }
        let (rh, rw) = block.reduced_grid;
        let p_reduced = if (rh, rw) == (h1, w1) {
            source
        } else {
            let table = Rc::new(bilinear_table(h1, w1, rh, rw)?);
            tape.bilinear(source, table)?
        };
        let (bh, bw) = block.grid;
        let p_full = if (bh, bw) == (h1, w1) {
            source
        } else {
            let table = Rc::new(bilinear_table(h1, w1, bh, bw)?);
            tape.bilinear(source, table)?
        };
        let propagated = propagate(tape, block.aggregate, p_reduced)?;
        let y_star = normalize_categories(tape, propagated)?;
        let p_star = normalize_categories(tape, p_full)?;
        let dist = metric_distance(tape, cfg.metric, y_star, p_star)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, dist)?,
            None => dist,
        });
        blocks.push(BlockPropagation {
            block: l,
            interpolated_reduced: p_reduced,
            interpolated_full: p_full,
            propagated,
            propagated_normalized: y_star,
            direct_normalized: p_star,
        });
    }
    let total = acc.expect("at least one enabled block");
    let loss = tape.scale(total, 1.0 / cfg.enabled_blocks() as f64)?;
    Ok(AffinityOutput { loss, blocks })
}

/// L = L_seg + alpha * L_aff.
pub fn total_loss(tape: &mut Tape, l_seg: Var, l_aff: Var, alpha: f64) -> Result<Var> {
    let weighted = tape.scale(l_aff, alpha)?;
    tape.add(l_seg, weighted)
}
