//! Attention heatmap extraction: the attention row of the patch that
//! contains a reference pixel, rendered per block as a grayscale image.

use std::path::Path;

use crate::error::{CoreError, Result};
use crate::model::InferenceOutput;
use crate::pnm;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct Heatmap {
    pub block: usize,
    pub height: usize,
    pub width: usize,
    /// Min-max normalized to [0, 1]; 0.5 everywhere when the row is flat.
    pub values: Vec<f64>,
}

/// Min-max normalize in place; a flat input maps to mid-gray.
fn normalize(values: &mut [f64]) {
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo < 1e-15 {
        for v in values.iter_mut() {
            *v = 0.5;
        }
    } else {
        for v in values.iter_mut() {
            *v = (*v - lo) / (hi - lo);
        }
    }
}

fn upsample_bilinear_like(values: &[f64], gh: usize, gw: usize, oh: usize, ow: usize) -> Vec<f64> {
    let src = Tensor::new(vec![gh, gw, 1], values.to_vec()).expect("grid sized");
    crate::tensor::bilinear_resize(&src, oh, ow)
        .expect("valid resize")
        .data()
        .to_vec()
}

/// One heatmap per encoder block for the patch containing image pixel
/// (x, y), upsampled back to image resolution.
pub fn attention_heatmaps(
    out: &InferenceOutput,
    image_height: usize,
    image_width: usize,
    x: usize,
    y: usize,
) -> Result<Vec<Heatmap>> {
    if x >= image_width || y >= image_height {
        return Err(CoreError::Validation(format!(
            "reference point ({x}, {y}) outside {image_width}x{image_height} image"
        )));
    }
    let mut maps = Vec::with_capacity(out.attention.len());
    for (i, (agg, grid, reduced)) in out.attention.iter().enumerate() {
        let (gh, gw) = *grid;
        let (rh, rw) = *reduced;
        let py = y * gh / image_height;
        let px = x * gw / image_width;
        let row = py * gw + px;
        let mut values: Vec<f64> = (0..rh * rw).map(|j| agg.at2(row, j)).collect();
        normalize(&mut values);
        let up = upsample_bilinear_like(&values, rh, rw, image_height, image_width);
        maps.push(Heatmap {
            block: i + 1,
            height: image_height,
            width: image_width,
            values: up,
        });
    }
    Ok(maps)
}

pub fn write_heatmap(path: &Path, map: &Heatmap) -> Result<()> {
    let bytes: Vec<u8> = map
        .values
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    pnm::write_pgm(path, map.height, map.width, &bytes)
}
