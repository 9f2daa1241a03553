//! Confusion-matrix based evaluation: per-class IoU and mIoU with
//! ignore-label semantics.

use crate::error::{CoreError, Result};
use crate::losses::IGNORE;

#[derive(Debug, Clone, PartialEq)]
pub struct ConfusionMatrix {
    num_classes: usize,
    /// counts[gt * C + pred]
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        ConfusionMatrix {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn count(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.num_classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Per-pixel count increments; ground-truth IGNORE pixels skipped.
    pub fn accumulate(&mut self, pred: &[u8], gt: &[u8]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(CoreError::Dimension(format!(
                "prediction has {} pixels, ground truth {}",
                pred.len(),
                gt.len()
            )));
        }
        for (&p, &g) in pred.iter().zip(gt) {
            if g == IGNORE {
                continue;
            }
            if g as usize >= self.num_classes || p as usize >= self.num_classes {
                return Err(CoreError::Validation(format!(
                    "class out of range: pred {p}, gt {g}, C {}",
                    self.num_classes
                )));
            }
            self.counts[g as usize * self.num_classes + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    /// Per-class IoU (None for classes absent from both gt and pred) and
    /// the mean over present classes.
    pub fn miou(&self) -> (Vec<Option<f64>>, f64) {
        let c = self.num_classes;
        let mut per_class = Vec::with_capacity(c);
        let mut sum = 0.0;
        let mut present = 0usize;
        for k in 0..c {
            let diag = self.count(k, k);
            let row: u64 = (0..c).map(|j| self.count(k, j)).sum();
            let col: u64 = (0..c).map(|i| self.count(i, k)).sum();
            let denom = row + col - diag;
            if denom == 0 {
                per_class.push(None);
            } else {
                let iou = diag as f64 / denom as f64;
                per_class.push(Some(iou));
                sum += iou;
                present += 1;
            }
        }
        let mean = if present == 0 { 0.0 } else { sum / present as f64 };
        (per_class, mean)
    }
}

/// Nearest-neighbor upsampling of a grid of class indices, used to bring
/// patch-level argmax predictions to image resolution before scoring.
pub fn nearest_upsample(
    grid: &[u8],
    gh: usize,
    gw: usize,
    out_h: usize,
    out_w: usize,
) -> Vec<u8> {
    let mut out = vec![0u8; out_h * out_w];
    for y in 0..out_h {
        let gy = y * gh / out_h;
        for x in 0..out_w {
            let gx = x * gw / out_w;
            out[y * out_w + x] = grid[gy * gw + gx];
        }
    }
    out
}
