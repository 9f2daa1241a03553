//! Dense row-major f64 tensors and the numeric primitives the rest of the
//! crate is built on. Every primitive checks its output for NaN/Inf and
//! reports an error instead of letting non-finite values escape.

use std::io::{Read, Write};

use crate::error::{CoreError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(CoreError::Dimension(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        if shape.iter().any(|&e| e == 0) {
            return Err(CoreError::Dimension(format!(
                "zero extent in shape {:?}",
                shape
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
        }
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn check_finite(&self, op: &'static str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(CoreError::NonFinite { op })
        }
    }

    /// Rows/cols view of a 2-D tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            other => Err(CoreError::Dimension(format!(
                "expected rank-2 tensor, got shape {:?}",
                other
            ))),
        }
    }

    pub fn at2(&self, r: usize, c: usize) -> f64 {
        let cols = self.shape[1];
        self.data[r * cols + c]
    }
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(CoreError::Dimension(format!(
            "matmul inner extents differ: {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = vec![0.0; m * n];
    let ad = a.data();
    let bd = b.data();
    for i in 0..m {
        for p in 0..k {
            let aip = ad[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &bd[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += aip * brow[j];
            }
        }
    }
    let t = Tensor::new(vec![m, n], out)?;
    t.check_finite("matmul")?;
    Ok(t)
}

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    let (r, c) = a.dims2()?;
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a.data()[i * c + j];
        }
    }
    Tensor::new(vec![c, r], out)
}

/// Row-wise softmax with per-row max subtraction.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    let (r, c) = x.dims2()?;
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        let row = &x.data()[i * c..(i + 1) * c];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for j in 0..c {
            let e = (row[j] - m).exp();
            out[i * c + j] = e;
            sum += e;
        }
        for j in 0..c {
            out[i * c + j] /= sum;
        }
    }
    let t = Tensor::new(vec![r, c], out)?;
    t.check_finite("softmax_rows")?;
    Ok(t)
}

/// One output sample of align-corners-false bilinear interpolation:
/// up to four (source cell, weight) contributions on one axis pair.
#[derive(Debug, Clone)]
pub struct BilinearTable {
    /// Per output cell: (src_index, weight) pairs into the flattened src grid.
    pub taps: Vec<Vec<(usize, f64)>>,
    pub src: (usize, usize),
    pub dst: (usize, usize),
}

/// Sampling weights for align-corners-false bilinear resize of an
/// `src_h x src_w` grid to `dst_h x dst_w`. Sample centers sit at
/// `(i + 0.5) * scale - 0.5`, clamped to the source extent.
pub fn bilinear_table(
    src_h: usize,
    src_w: usize,
    dst_h: usize,
    dst_w: usize,
) -> Result<BilinearTable> {
    if dst_h == 0 || dst_w == 0 {
        return Err(CoreError::Dimension(
            "bilinear resize to zero-extent output".into(),
        ));
    }
    let axis = |src: usize, dst: usize| -> Vec<(usize, usize, f64)> {
        let scale = src as f64 / dst as f64;
        (0..dst)
            .map(|i| {
                let pos = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
                let lo = pos.floor() as usize;
                let hi = (lo + 1).min(src - 1);
                let frac = pos - lo as f64;
                (lo, hi, frac)
            })
            .collect()
    };
    let ys = axis(src_h, dst_h);
    let xs = axis(src_w, dst_w);
    let mut taps = Vec::with_capacity(dst_h * dst_w);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            let mut cell: Vec<(usize, f64)> = Vec::with_capacity(4);
            let mut push = |idx: usize, w: f64| {
                if w == 0.0 {
                    return;
                }
                if let Some(e) = cell.iter_mut().find(|(i, _)| *i == idx) {
                    e.1 += w;
                } else {
                    cell.push((idx, w));
                }
            };
            push(y0 * src_w + x0, (1.0 - fy) * (1.0 - fx));
            push(y0 * src_w + x1, (1.0 - fy) * fx);
            push(y1 * src_w + x0, fy * (1.0 - fx));
            push(y1 * src_w + x1, fy * fx);
            taps.push(cell);
        }
    }
    Ok(BilinearTable {
        taps,
        src: (src_h, src_w),
        dst: (dst_h, dst_w),
    })
}

/// Apply a bilinear table to grid-form data `[src_h*src_w, channels]`.
pub fn bilinear_apply(table: &BilinearTable, x: &Tensor) -> Result<Tensor> {
    let (m, c) = x.dims2()?;
    if m != table.src.0 * table.src.1 {
        return Err(CoreError::Dimension(format!(
            "bilinear input has {} cells, table expects {}x{}",
            m, table.src.0, table.src.1
        )));
    }
    let out_cells = table.dst.0 * table.dst.1;
    let mut out = vec![0.0; out_cells * c];
    for (o, cell) in table.taps.iter().enumerate() {
        for &(src, w) in cell {
            for ch in 0..c {
                out[o * c + ch] += w * x.data()[src * c + ch];
            }
        }
    }
    Tensor::new(vec![out_cells, c], out)
}

/// Bilinear resize of an `H x W x C` tensor (align-corners-false).
pub fn bilinear_resize(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (h, w, c) = match x.shape() {
        [h, w, c] => (*h, *w, *c),
        other => {
            return Err(CoreError::Dimension(format!(
                "bilinear_resize expects H x W x C, got {:?}",
                other
            )))
        }
    };
    let table = bilinear_table(h, w, out_h, out_w)?;
    let grid = Tensor::new(vec![h * w, c], x.data().to_vec())?;
    let out = bilinear_apply(&table, &grid)?;
    let t = Tensor::new(vec![out_h, out_w, c], out.data().to_vec())?;
    t.check_finite("bilinear_resize")?;
    Ok(t)
}

const MAGIC: &[u8; 4] = b"SAST";
const VERSION: u8 = 1;

impl Tensor {
    /// Flat binary encoding: "SAST", version byte, rank byte, extents as
    /// u64 little-endian, then doubles little-endian.
    pub fn write_binary<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&[VERSION, self.shape.len() as u8])?;
        for &e in &self.shape {
            w.write_all(&(e as u64).to_le_bytes())?;
        }
        for &v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(r: &mut R) -> Result<Self> {
        let mut head = [0u8; 6];
        r.read_exact(&mut head)
            .map_err(|e| CoreError::Parse(format!("tensor header: {e}")))?;
        if &head[0..4] != MAGIC {
            return Err(CoreError::Parse("bad tensor magic".into()));
        }
        if head[4] != VERSION {
            return Err(CoreError::Parse(format!(
                "unsupported tensor version {}",
                head[4]
            )));
        }
        let rank = head[5] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)
                .map_err(|e| CoreError::Parse(format!("tensor extents: {e}")))?;
            shape.push(u64::from_le_bytes(b) as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)
                .map_err(|e| CoreError::Parse(format!("tensor data: {e}")))?;
            data.push(f64::from_le_bytes(b));
        }
        Tensor::new(shape, data)
    }

    /// CSV export for 2-D tensors, one row per line.
    pub fn write_csv<W: Write>(&self, w: &mut W) -> Result<()> {
        let (r, c) = self.dims2()?;
        for i in 0..r {
            let row: Vec<String> = (0..c).map(|j| format!("{}", self.at2(i, j))).collect();
            writeln!(w, "{}", row.join(",")).map_err(|e| CoreError::Parse(e.to_string()))?;
        }
        Ok(())
    }
}
