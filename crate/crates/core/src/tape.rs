//! Tape-based reverse-mode differentiation over the primitive set used by
//! the encoder, decoder and losses. Each primitive carries a hand-derived
//! adjoint rule; the tape is append-only and acyclic by construction.
//!
//! One tape per training step. Tapes are not shared across threads;
//! independent tapes may run concurrently.

use std::rc::Rc;

use crate::error::{CoreError, Result};
use crate::tensor::{self, BilinearTable, Tensor};

/// Index of a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    /// [M, D] + [1, D] row broadcast.
    AddRows(Var, Var),
    SoftmaxRows(Var),
    Gelu(Var),
    Abs(Var),
    Square(Var),
    /// ln(max(x, eps))
    LnClamped(Var, f64),
    SumAll(Var),
    MeanPool {
        input: Var,
        grid: (usize, usize),
        factor: usize,
    },
    Bilinear {
        input: Var,
        table: Rc<BilinearTable>,
    },
    ConcatCols(Vec<Var>),
    /// Mean over labeled rows of -log softmax(logits)[row, label];
    /// 255 marks ignored rows.
    PartialCrossEntropy {
        logits: Var,
        labels: Rc<Vec<u8>>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

const GELU_A: f64 = 0.044715;

fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let u = c * (x + GELU_A * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let u = c * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * c * (1.0 + 3.0 * GELU_A * x * x)
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = tensor::matmul(self.value(a), self.value(b))?;
        Ok(self.push(y, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let y = tensor::transpose(self.value(a))?;
        Ok(self.push(y, Op::Transpose(a)))
    }

    fn zip_elementwise(
        &mut self,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
        name: &'static str,
    ) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(CoreError::Dimension(format!(
                "{name}: shapes {:?} vs {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let data: Vec<f64> = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let t = Tensor::new(va.shape().to_vec(), data)?;
        t.check_finite(name)?;
        Ok(self.push(t, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_elementwise(a, b, |x, y| x + y, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_elementwise(a, b, |x, y| x - y, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_elementwise(a, b, |x, y| x * y, Op::Mul(a, b), "mul")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let data: Vec<f64> = self.value(a).data().iter().map(|&x| x * c).collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        t.check_finite("scale")?;
        Ok(self.push(t, Op::Scale(a, c)))
    }

    /// `a` is [M, D], `bias` is [1, D]; adds the bias row to every row.
    pub fn add_rows(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (m, d) = self.value(a).dims2()?;
        let (br, bd) = self.value(bias).dims2()?;
        if br != 1 || bd != d {
            return Err(CoreError::Dimension(format!(
                "add_rows: bias {:?} incompatible with {:?}",
                self.value(bias).shape(),
                self.value(a).shape()
            )));
        }
        let mut data = self.value(a).data().to_vec();
        let bias_row = self.value(bias).data().to_vec();
        for i in 0..m {
            for j in 0..d {
                data[i * d + j] += bias_row[j];
            }
        }
        let t = Tensor::new(vec![m, d], data)?;
        t.check_finite("add_rows")?;
        Ok(self.push(t, Op::AddRows(a, bias)))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let y = tensor::softmax_rows(self.value(a))?;
        Ok(self.push(y, Op::SoftmaxRows(a)))
    }

    fn map_elementwise(
        &mut self,
        a: Var,
        f: impl Fn(f64) -> f64,
        op: Op,
        name: &'static str,
    ) -> Result<Var> {
        let data: Vec<f64> = self.value(a).data().iter().map(|&x| f(x)).collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        t.check_finite(name)?;
        Ok(self.push(t, op))
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.map_elementwise(a, gelu, Op::Gelu(a), "gelu")
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.map_elementwise(a, f64::abs, Op::Abs(a), "abs")
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.map_elementwise(a, |x| x * x, Op::Square(a), "square")
    }

    pub fn ln_clamped(&mut self, a: Var, eps: f64) -> Result<Var> {
        self.map_elementwise(a, |x| x.max(eps).ln(), Op::LnClamped(a, eps), "ln_clamped")
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.value(a).data().iter().sum();
        let t = Tensor::scalar(s);
        t.check_finite("sum_all")?;
        Ok(self.push(t, Op::SumAll(a)))
    }

    /// Non-overlapping `factor x factor` spatial mean pooling of a token
    /// grid. `a` is [h*w, D] in row-major grid order.
    pub fn mean_pool(&mut self, a: Var, grid: (usize, usize), factor: usize) -> Result<Var> {
        let (h, w) = grid;
        let (m, d) = self.value(a).dims2()?;
        if m != h * w {
            return Err(CoreError::Dimension(format!(
                "mean_pool: {} tokens but grid {}x{}",
                m, h, w
            )));
        }
        if factor == 0 || h % factor != 0 || w % factor != 0 {
            return Err(CoreError::Config(format!(
                "mean_pool: factor {} incompatible with grid {}x{}",
                factor, h, w
            )));
        }
        let (oh, ow) = (h / factor, w / factor);
        let inv = 1.0 / (factor * factor) as f64;
        let src = self.value(a).data();
        let mut out = vec![0.0; oh * ow * d];
        for oy in 0..oh {
            for ox in 0..ow {
                let o = (oy * ow + ox) * d;
                for dy in 0..factor {
                    for dx in 0..factor {
                        let s = ((oy * factor + dy) * w + (ox * factor + dx)) * d;
                        for ch in 0..d {
                            out[o + ch] += src[s + ch];
                        }
                    }
                }
                for ch in 0..d {
                    out[o + ch] *= inv;
                }
            }
        }
        let t = Tensor::new(vec![oh * ow, d], out)?;
        t.check_finite("mean_pool")?;
        Ok(self.push(
            t,
            Op::MeanPool {
                input: a,
                grid,
                factor,
            },
        ))
    }

    /// Bilinear resize of grid-form data [src_h*src_w, C].
    pub fn bilinear(&mut self, a: Var, table: Rc<BilinearTable>) -> Result<Var> {
        let y = tensor::bilinear_apply(&table, self.value(a))?;
        y.check_finite("bilinear")?;
        Ok(self.push(y, Op::Bilinear { input: a, table }))
    }

    /// Column-wise concatenation of tensors sharing the row count.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(CoreError::Config("concat_cols of empty list".into()));
        }
        let (rows, _) = self.value(parts[0]).dims2()?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.value(p).dims2()?;
            if r != rows {
                return Err(CoreError::Dimension(format!(
                    "concat_cols: row counts differ ({rows} vs {r})"
                )));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; rows * total];
        let mut off = 0;
        for (&p, &c) in parts.iter().zip(&widths) {
            let src = self.value(p).data();
            for i in 0..rows {
                out[i * total + off..i * total + off + c]
                    .copy_from_slice(&src[i * c..(i + 1) * c]);
            }
            off += c;
        }
        let t = Tensor::new(vec![rows, total], out)?;
        Ok(self.push(t, Op::ConcatCols(parts.to_vec())))
    }

    /// Mean over labeled rows of -log softmax(logits)[row, label].
    /// Rows labeled 255 are ignored; no labeled row gives loss 0.
    pub fn partial_cross_entropy(&mut self, logits: Var, labels: Rc<Vec<u8>>) -> Result<Var> {
        let (m, c) = self.value(logits).dims2()?;
        if labels.len() != m {
            return Err(CoreError::Dimension(format!(
                "labels length {} vs {} rows",
                labels.len(),
                m
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l != 255 && l as usize >= c) {
            return Err(CoreError::Validation(format!(
                "label {bad} out of range for {c} classes"
            )));
        }
        let probs = tensor::softmax_rows(self.value(logits))?;
        let mut total = 0.0;
        let mut count = 0usize;
        for (i, &l) in labels.iter().enumerate() {
            if l == 255 {
                continue;
            }
            total -= probs.at2(i, l as usize).max(1e-300).ln();
            count += 1;
        }
        let loss = if count == 0 { 0.0 } else { total / count as f64 };
        let t = Tensor::scalar(loss);
        t.check_finite("partial_cross_entropy")?;
        Ok(self.push(t, Op::PartialCrossEntropy { logits, labels }))
    }

    /// Reverse pass from a scalar root. Returns per-node adjoints.
    pub fn backward(&self, root: Var) -> Result<Grads> {
        if self.value(root).numel() != 1 {
            return Err(CoreError::Autodiff(format!(
                "backward root must be scalar, got shape {:?}",
                self.value(root).shape()
            )));
        }
        let mut adj: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        adj[root.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=root.0).rev() {
            let g = match adj[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.accumulate_inputs(idx, &g, &mut adj)?;
            adj[idx] = Some(g);
        }
        Ok(Grads { adjoints: adj })
    }

    fn accumulate_inputs(
        &self,
        idx: usize,
        g: &Tensor,
        adj: &mut [Option<Tensor>],
    ) -> Result<()> {
        let add_into = |adj: &mut [Option<Tensor>], v: Var, t: Tensor| {
            match &mut adj[v.0] {
                Some(acc) => {
                    for (a, b) in acc.data_mut().iter_mut().zip(t.data()) {
                        *a += b;
                    }
                }
                slot => *slot = Some(t),
            }
        };
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let bt = tensor::transpose(self.value(*b))?;
                let ga = tensor::matmul(g, &bt)?;
                let at = tensor::transpose(self.value(*a))?;
                let gb = tensor::matmul(&at, g)?;
                add_into(adj, *a, ga);
                add_into(adj, *b, gb);
            }
            Op::Transpose(a) => {
                add_into(adj, *a, tensor::transpose(g)?);
            }
            Op::Add(a, b) => {
                add_into(adj, *a, g.clone());
                add_into(adj, *b, g.clone());
            }
            Op::Sub(a, b) => {
                add_into(adj, *a, g.clone());
                let neg: Vec<f64> = g.data().iter().map(|&x| -x).collect();
                add_into(adj, *b, Tensor::new(g.shape().to_vec(), neg)?);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let ga: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(vb.data())
                    .map(|(&gi, &y)| gi * y)
                    .collect();
                let gb: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(va.data())
                    .map(|(&gi, &x)| gi * x)
                    .collect();
                add_into(adj, *a, Tensor::new(g.shape().to_vec(), ga)?);
                add_into(adj, *b, Tensor::new(g.shape().to_vec(), gb)?);
            }
            Op::Scale(a, c) => {
                let ga: Vec<f64> = g.data().iter().map(|&x| x * c).collect();
                add_into(adj, *a, Tensor::new(g.shape().to_vec(), ga)?);
            }
            Op::AddRows(a, bias) => {
                add_into(adj, *a, g.clone());
                let (m, d) = g.dims2()?;
                let mut gb = vec![0.0; d];
                for i in 0..m {
                    for j in 0..d {
                        gb[j] += g.data()[i * d + j];
                    }
                }
                add_into(adj, *bias, Tensor::new(vec![1, d], gb)?);
            }
            Op::SoftmaxRows(a) => {
                // dx = y * (g - sum_k g_k y_k) per row, with y the output
                let y = &self.nodes[idx].value;
                let (r, c) = y.dims2()?;
                let mut ga = vec![0.0; r * c];
                for i in 0..r {
                    let yrow = &y.data()[i * c..(i + 1) * c];
                    let grow = &g.data()[i * c..(i + 1) * c];
                    let dot: f64 = yrow.iter().zip(grow).map(|(&yv, &gv)| yv * gv).sum();
                    for j in 0..c {
                        ga[i * c + j] = yrow[j] * (grow[j] - dot);
                    }
                }
                add_into(adj, *a, Tensor::new(vec![r, c], ga)?);
            }
            Op::Gelu(a) => {
                let va = self.value(*a);
                let ga: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(va.data())
                    .map(|(&gi, &x)| gi * gelu_grad(x))
                    .collect();
                add_into(adj, *a, Tensor::new(g.shape().to_vec(), ga)?);
            }
            Op::Abs(a) => {
                let va = self.value(*a);
                let ga: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(va.data())
                    .map(|(&gi, &x)| gi * x.signum() * (x != 0.0) as u8 as f64)
                    .collect();
                add_into(adj, *a, Tensor::new(g.shape().to_vec(), ga)?);
            }
            Op::Square(a) => {
                let va = self.value(*a);
                let ga: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(va.data())
                    .map(|(&gi, &x)| gi * 2.0 * x)
                    .collect();
                add_into(adj, *a, Tensor::new(g.shape().to_vec(), ga)?);
            }
            Op::LnClamped(a, eps) => {
                let va = self.value(*a);
                let ga: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(va.data())
                    .map(|(&gi, &x)| if x > *eps { gi / x } else { 0.0 })
                    .collect();
                add_into(adj, *a, Tensor::new(g.shape().to_vec(), ga)?);
            }
            Op::SumAll(a) => {
                let va = self.value(*a);
                let gs = g.data()[0];
                add_into(adj, *a, Tensor::filled(va.shape().to_vec(), gs));
            }
            Op::MeanPool {
                input,
                grid: (h, w),
                factor,
            } => {
                let d = self.value(*input).dims2()?.1;
                let (oh, ow) = (h / factor, w / factor);
                let inv = 1.0 / (factor * factor) as f64;
                let mut ga = vec![0.0; h * w * d];
                for oy in 0..oh {
                    for ox in 0..ow {
                        let o = (oy * ow + ox) * d;
                        for dy in 0..*factor {
                            for dx in 0..*factor {
                                let s = ((oy * factor + dy) * w + (ox * factor + dx)) * d;
                                for ch in 0..d {
                                    ga[s + ch] += g.data()[o + ch] * inv;
                                }
                            }
                        }
                    }
                }
                add_into(adj, *input, Tensor::new(vec![h * w, d], ga)?);
            }
            Op::Bilinear { input, table } => {
                let (m, c) = self.value(*input).dims2()?;
                let mut ga = vec![0.0; m * c];
                for (o, cell) in table.taps.iter().enumerate() {
                    for &(src, wgt) in cell {
                        for ch in 0..c {
                            ga[src * c + ch] += wgt * g.data()[o * c + ch];
                        }
                    }
                }
                add_into(adj, *input, Tensor::new(vec![m, c], ga)?);
            }
            Op::ConcatCols(parts) => {
                let (rows, total) = self.nodes[idx].value.dims2()?;
                let mut off = 0;
                for &p in parts {
                    let (_, c) = self.value(p).dims2()?;
                    let mut gp = vec![0.0; rows * c];
                    for i in 0..rows {
                        gp[i * c..(i + 1) * c]
                            .copy_from_slice(&g.data()[i * total + off..i * total + off + c]);
                    }
                    add_into(adj, p, Tensor::new(vec![rows, c], gp)?);
                    off += c;
                }
            }
            Op::PartialCrossEntropy { logits, labels } => {
                // d/dlogits = (softmax - onehot) / count at labeled rows
                let probs = tensor::softmax_rows(self.value(*logits))?;
                let (m, c) = probs.dims2()?;
                let count = labels.iter().filter(|&&l| l != 255).count();
                let mut ga = vec![0.0; m * c];
                if count > 0 {
                    let gs = g.data()[0] / count as f64;
                    for (i, &l) in labels.iter().enumerate() {
                        if l == 255 {
                            continue;
                        }
                        for j in 0..c {
                            let onehot = (j == l as usize) as u8 as f64;
                            ga[i * c + j] = gs * (probs.at2(i, j) - onehot);
                        }
                    }
                }
                add_into(adj, *logits, Tensor::new(vec![m, c], ga)?);
            }
        }
        Ok(())
    }
}

#[derive(Debug)]
pub struct Grads {
    adjoints: Vec<Option<Tensor>>,
}

impl Grads {
    /// Adjoint of a node; zeros if the node never received gradient.
    pub fn get(&self, v: Var, tape: &Tape) -> Tensor {
        match self.adjoints.get(v.0) {
            Some(Some(t)) => t.clone(),
            _ => Tensor::zeros(tape.value(v).shape().to_vec()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient() {
        // d(x^T x)/dx = 2x
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
        let sq = tape.square(x).unwrap();
        let loss = tape.sum_all(sq).unwrap();
        let grads = tape.backward(loss).unwrap();
        let gx = grads.get(x, &tape);
        assert_eq!(gx.data(), &[2.0, 4.0]);
    }

    #[test]
    fn constant_has_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
        let c = tape.leaf(Tensor::scalar(5.0));
        let sq = tape.square(x).unwrap();
        let s = tape.sum_all(sq).unwrap();
        let loss = tape.add(s, c).unwrap();
        let grads = tape.backward(loss).unwrap();
        // c is a leaf on the sum path so it does receive gradient 1; an
        // unused leaf receives zeros
        let unused = tape.leaf(Tensor::new(vec![2, 2], vec![0.0; 4]).unwrap());
        let gu = grads.get(unused, &tape);
        assert!(gu.data().iter().all(|&v| v == 0.0));
        let _ = loss;
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn ignore_rows_get_zero_ce_gradient() {
        let mut tape = Tape::new();
        let logits = tape.leaf(
            Tensor::new(vec![3, 2], vec![0.3, -0.1, 1.0, 0.5, -0.2, 0.9]).unwrap(),
        );
        let labels = Rc::new(vec![0u8, 255, 1]);
        let loss = tape.partial_cross_entropy(logits, labels).unwrap();
        let grads = tape.backward(loss).unwrap();
        let gl = grads.get(logits, &tape);
        assert_eq!(gl.at2(1, 0), 0.0);
        assert_eq!(gl.at2(1, 1), 0.0);
        assert!(gl.at2(0, 0) != 0.0);
    }

    #[test]
    fn ce_uniform_logits_value() {
        let mut tape = Tape::new();
        let logits = tape.leaf(Tensor::zeros(vec![4, 4]));
        let labels = Rc::new(vec![2u8, 255, 255, 255]);
        let loss = tape.partial_cross_entropy(logits, labels).unwrap();
        assert!((tape.value(loss).data()[0] - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn ce_all_ignore_is_zero() {
        let mut tape = Tape::new();
        let logits = tape.leaf(Tensor::zeros(vec![2, 3]));
        let labels = Rc::new(vec![255u8, 255]);
        let loss = tape.partial_cross_entropy(logits, labels).unwrap();
        assert_eq!(tape.value(loss).data()[0], 0.0);
    }

    #[test]
    fn ce_label_out_of_range_rejected() {
        let mut tape = Tape::new();
        let logits = tape.leaf(Tensor::zeros(vec![2, 3]));
        let labels = Rc::new(vec![3u8, 255]);
        assert!(tape.partial_cross_entropy(logits, labels).is_err());
    }
}
