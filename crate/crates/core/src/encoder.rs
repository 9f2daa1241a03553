//! Toy hierarchical transformer encoder. Four blocks over a shrinking
//! token pyramid; each layer records its attention map and every block
//! keeps the layer-averaged aggregate used for label propagation.

use crate::error::{CoreError, Result};
use crate::params::ParamSet;
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const NUM_BLOCKS: usize = 4;
const INIT_STD: f64 = 0.02;
const FFN_EXPANSION: usize = 4;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub image_width: usize,
    pub image_height: usize,
    pub patch_size: usize,
    pub embed_dims: [usize; NUM_BLOCKS],
    pub num_layers: [usize; NUM_BLOCKS],
    pub reduction: [usize; NUM_BLOCKS],
    pub strides: [usize; NUM_BLOCKS],
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            image_width: 64,
            image_height: 64,
            patch_size: 2,
            embed_dims: [16, 24, 32, 48],
            num_layers: [2, 2, 2, 2],
            reduction: [4, 2, 1, 1],
            strides: [1, 2, 2, 2],
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0
            || self.image_width % self.patch_size != 0
            || self.image_height % self.patch_size != 0
        {
            return Err(CoreError::Config(format!(
                "image {}x{} not divisible by patch size {}",
                self.image_width, self.image_height, self.patch_size
            )));
        }
        for l in 0..NUM_BLOCKS {
            if self.num_layers[l] == 0 {
                return Err(CoreError::Config(format!("block {} has zero layers", l + 1)));
            }
            if self.embed_dims[l] < 2 {
                return Err(CoreError::Config(format!(
                    "block {} embed dim {} < 2",
                    l + 1,
                    self.embed_dims[l]
                )));
            }
            if self.reduction[l] == 0 || self.strides[l] == 0 {
                return Err(CoreError::Config("zero reduction or stride".into()));
            }
            let (h, w) = self.grid(l)?;
            if h % self.reduction[l] != 0 || w % self.reduction[l] != 0 {
                return Err(CoreError::Config(format!(
                    "block {} grid {}x{} incompatible with reduction {}",
                    l + 1,
                    h,
                    w,
                    self.reduction[l]
                )));
            }
        }
        Ok(())
    }

    /// Patch grid before any block stride.
    pub fn patch_grid(&self) -> (usize, usize) {
        (
            self.image_height / self.patch_size,
            self.image_width / self.patch_size,
        )
    }

    /// Token grid of block `l` (0-based).
    pub fn grid(&self, l: usize) -> Result<(usize, usize)> {
        let (mut h, mut w) = self.patch_grid();
        for s in &self.strides[..=l] {
            if h % s != 0 || w % s != 0 {
                return Err(CoreError::Config(format!(
                    "grid {h}x{w} not divisible by stride {s}"
                )));
            }
            h /= s;
            w /= s;
        }
        Ok((h, w))
    }

    pub fn tokens(&self, l: usize) -> Result<usize> {
        let (h, w) = self.grid(l)?;
        Ok(h * w)
    }

    /// Key/value grid after sequence reduction.
    pub fn reduced_grid(&self, l: usize) -> Result<(usize, usize)> {
        let (h, w) = self.grid(l)?;
        Ok((h / self.reduction[l], w / self.reduction[l]))
    }

    pub fn reduced_tokens(&self, l: usize) -> Result<usize> {
        let (h, w) = self.reduced_grid(l)?;
        Ok(h * w)
    }
}

fn normal_tensor(rng: &mut Rng, shape: Vec<usize>, std: f64) -> Tensor {
    let numel: usize = shape.iter().product();
    let data: Vec<f64> = (0..numel).map(|_| rng.normal() * std).collect();
    Tensor::new(shape, data).expect("shape/data agree by construction")
}

/// Projection weights ~ N(0, 0.02), biases zero, learned absolute
/// positional embedding at each block entry.
pub fn init_encoder_params(cfg: &EncoderConfig, rng: &mut Rng, params: &mut ParamSet) -> Result<()> {
    cfg.validate()?;
    let patch_in = cfg.patch_size * cfg.patch_size * 3;
    params.push(
        "patch_embed.w",
        normal_tensor(rng, vec![patch_in, cfg.embed_dims[0]], INIT_STD),
    );
    params.push("patch_embed.b", Tensor::zeros(vec![1, cfg.embed_dims[0]]));
    for l in 0..NUM_BLOCKS {
        let d = cfg.embed_dims[l];
        let prefix = format!("block{}", l + 1);
        if l > 0 {
            params.push(
                format!("{prefix}.proj.w"),
                normal_tensor(rng, vec![cfg.embed_dims[l - 1], d], INIT_STD),
            );
            params.push(format!("{prefix}.proj.b"), Tensor::zeros(vec![1, d]));
        }
        params.push(
            format!("{prefix}.pos"),
            normal_tensor(rng, vec![cfg.tokens(l)?, d], INIT_STD),
        );
        for n in 0..cfg.num_layers[l] {
            let lp = format!("{prefix}.layer{}", n + 1);
            for w in ["wq", "wk", "wv", "wo"] {
                params.push(format!("{lp}.{w}"), normal_tensor(rng, vec![d, d], INIT_STD));
            }
            for b in ["bq", "bk", "bv", "bo"] {
                params.push(format!("{lp}.{b}"), Tensor::zeros(vec![1, d]));
            }
            let hidden = d * FFN_EXPANSION;
            params.push(
                format!("{lp}.ffn1.w"),
                normal_tensor(rng, vec![d, hidden], INIT_STD),
            );
            params.push(format!("{lp}.ffn1.b"), Tensor::zeros(vec![1, hidden]));
            params.push(
                format!("{lp}.ffn2.w"),
                normal_tensor(rng, vec![hidden, d], INIT_STD),
            );
            params.push(format!("{lp}.ffn2.b"), Tensor::zeros(vec![1, d]));
        }
    }
    Ok(())
}

/// Parameters bound onto a tape as leaf nodes, keeping the set's order.
pub struct ParamVars {
    entries: Vec<(String, Var)>,
}

impl ParamVars {
    pub fn bind(tape: &mut Tape, params: &ParamSet) -> Self {
        let entries = params
            .iter()
            .map(|(name, t)| (name.to_string(), tape.leaf(t.clone())))
            .collect();
        ParamVars { entries }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| *v)
            .ok_or_else(|| CoreError::Config(format!("unknown parameter {name}")))
    }

    pub fn ordered(&self) -> impl Iterator<Item = Var> + '_ {
        self.entries.iter().map(|(_, v)| *v)
    }
}

/// Flatten an H x W x 3 image into per-patch rows (row-major patch order,
/// each row the flattened p x p x 3 patch).
pub fn extract_patches(image: &Tensor, cfg: &EncoderConfig) -> Result<Tensor> {
    let (h, w, c) = match image.shape() {
        [h, w, c] if *c == 3 => (*h, *w, *c),
        other => {
            return Err(CoreError::Dimension(format!(
                "expected H x W x 3 image, got {:?}",
                other
            )))
        }
    };
    if h != cfg.image_height || w != cfg.image_width {
        return Err(CoreError::Dimension(format!(
            "image {}x{} does not match config {}x{}",
            h, w, cfg.image_height, cfg.image_width
        )));
    }
    let p = cfg.patch_size;
    let (gh, gw) = cfg.patch_grid();
    let row_len = p * p * c;
    let mut out = vec![0.0; gh * gw * row_len];
    for py in 0..gh {
        for px in 0..gw {
            let base = (py * gw + px) * row_len;
            let mut k = 0;
            for dy in 0..p {
                for dx in 0..p {
                    let src = ((py * p + dy) * w + (px * p + dx)) * c;
                    out[base + k..base + k + c].copy_from_slice(&image.data()[src..src + c]);
                    k += c;
                }
            }
        }
    }
    Tensor::new(vec![gh * gw, row_len], out)
}

/// Linear patch projection plus block-1 positional embedding.
pub fn patch_embed(
    tape: &mut Tape,
    image: &Tensor,
    cfg: &EncoderConfig,
    vars: &ParamVars,
) -> Result<Var> {
    let patches = extract_patches(image, cfg)?;
    let patches = tape.leaf(patches);
    let w = vars.var("patch_embed.w")?;
    let b = vars.var("patch_embed.b")?;
    let proj = tape.matmul(patches, w)?;
    tape.add_rows(proj, b)
}

pub struct AttentionLayerParams {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
}

/// Single-head efficient self-attention with residual connection.
/// Sequence reduction is r x r spatial mean pooling of key/value tokens
/// before their projections. Returns (tokens, attention map).
pub fn attention_layer(
    tape: &mut Tape,
    tokens: Var,
    grid: (usize, usize),
    r: usize,
    p: &AttentionLayerParams,
) -> Result<(Var, Var)> {
    let (_, d) = tape.value(tokens).dims2()?;
    let kv_src = if r > 1 {
        tape.mean_pool(tokens, grid, r)?
    } else {
        tokens
    };
    let q = tape.matmul(tokens, p.wq)?;
    let q = tape.add_rows(q, p.bq)?;
    let k = tape.matmul(kv_src, p.wk)?;
    let k = tape.add_rows(k, p.bk)?;
    let v = tape.matmul(kv_src, p.wv)?;
    let v = tape.add_rows(v, p.bv)?;
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let scores = tape.scale(scores, 1.0 / (d as f64).sqrt())?;
    let attn = tape.softmax_rows(scores)?;
    let attended = tape.matmul(attn, v)?;
    let out = tape.matmul(attended, p.wo)?;
    let out = tape.add_rows(out, p.bo)?;
    let tokens = tape.add(tokens, out)?;
    Ok((tokens, attn))
}

/// Elementwise mean of the per-layer attention maps.
pub fn aggregate_block_attention(tape: &mut Tape, layer_maps: &[Var]) -> Result<Var> {
    if layer_maps.is_empty() {
        return Err(CoreError::Config(
            "attention aggregation over empty layer list".into(),
        ));
    }
    let mut acc = layer_maps[0];
    for &m in &layer_maps[1..] {
        acc = tape.add(acc, m)?;
    }
    tape.scale(acc, 1.0 / layer_maps.len() as f64)
}

pub struct BlockAttention {
    pub layers: Vec<Var>,
    pub aggregate: Var,
    pub grid: (usize, usize),
    pub reduced_grid: (usize, usize),
}

pub struct AttentionStack {
    pub blocks: Vec<BlockAttention>,
}

fn ffn(tape: &mut Tape, tokens: Var, vars: &ParamVars, prefix: &str) -> Result<Var> {
    let w1 = vars.var(&format!("{prefix}.ffn1.w"))?;
    let b1 = vars.var(&format!("{prefix}.ffn1.b"))?;
    let w2 = vars.var(&format!("{prefix}.ffn2.w"))?;
    let b2 = vars.var(&format!("{prefix}.ffn2.b"))?;
    let h = tape.matmul(tokens, w1)?;
    let h = tape.add_rows(h, b1)?;
    let h = tape.gelu(h)?;
    let out = tape.matmul(h, w2)?;
    let out = tape.add_rows(out, b2)?;
    tape.add(tokens, out)
}

/// Full encoder forward: per-block features plus the attention stack.
pub fn encoder_forward(
    tape: &mut Tape,
    image: &Tensor,
    cfg: &EncoderConfig,
    vars: &ParamVars,
) -> Result<(Vec<Var>, AttentionStack)> {
    cfg.validate()?;
    let mut tokens = patch_embed(tape, image, cfg, vars)?;
    let mut prev_grid = cfg.patch_grid();
    let mut features = Vec::with_capacity(NUM_BLOCKS);
    let mut blocks = Vec::with_capacity(NUM_BLOCKS);

    for l in 0..NUM_BLOCKS {
        let prefix = format!("block{}", l + 1);
        let s = cfg.strides[l];
        if s > 1 {
            tokens = tape.mean_pool(tokens, prev_grid, s)?;
        }
        if l > 0 {
            let w = vars.var(&format!("{prefix}.proj.w"))?;
            let b = vars.var(&format!("{prefix}.proj.b"))?;
            tokens = tape.matmul(tokens, w)?;
            tokens = tape.add_rows(tokens, b)?;
        }
        let pos = vars.var(&format!("{prefix}.pos"))?;
        tokens = tape.add(tokens, pos)?;

        let grid = cfg.grid(l)?;
        let r = cfg.reduction[l];
        let mut layer_maps = Vec::with_capacity(cfg.num_layers[l]);
        for n in 0..cfg.num_layers[l] {
            let lp = format!("{prefix}.layer{}", n + 1);
            let lparams = AttentionLayerParams {
                wq: vars.var(&format!("{lp}.wq"))?,
                bq: vars.var(&format!("{lp}.bq"))?,
                wk: vars.var(&format!("{lp}.wk"))?,
                bk: vars.var(&format!("{lp}.bk"))?,
                wv: vars.var(&format!("{lp}.wv"))?,
                bv: vars.var(&format!("{lp}.bv"))?,
                wo: vars.var(&format!("{lp}.wo"))?,
                bo: vars.var(&format!("{lp}.bo"))?,
            };
            let (next, attn) = attention_layer(tape, tokens, grid, r, &lparams)?;
            tokens = ffn(tape, next, vars, &lp)?;
            layer_maps.push(attn);
        }
        let aggregate = aggregate_block_attention(tape, &layer_maps)?;
        features.push(tokens);
        blocks.push(BlockAttention {
            layers: layer_maps,
            aggregate,
            grid,
            reduced_grid: cfg.reduced_grid(l)?,
        });
        prev_grid = grid;
    }
    Ok((features, AttentionStack { blocks }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity(d: usize) -> Tensor {
        let mut data = vec![0.0; d * d];
        for i in 0..d {
            data[i * d + i] = 1.0;
        }
        Tensor::new(vec![d, d], data).unwrap()
    }

    fn identity_layer(tape: &mut Tape, d: usize) -> AttentionLayerParams {
        let zero = Tensor::zeros(vec![1, d]);
        AttentionLayerParams {
            wq: tape.leaf(identity(d)),
            bq: tape.leaf(zero.clone()),
            wk: tape.leaf(identity(d)),
            bk: tape.leaf(zero.clone()),
            wv: tape.leaf(identity(d)),
            bv: tape.leaf(zero.clone()),
            wo: tape.leaf(identity(d)),
            bo: tape.leaf(zero),
        }
    }

    #[test]
    fn single_token_identity_projections() {
        let mut tape = Tape::new();
        let tokens = tape.leaf(Tensor::new(vec![1, 2], vec![0.3, -0.7]).unwrap());
        let p = identity_layer(&mut tape, 2);
        let (out, attn) = attention_layer(&mut tape, tokens, (1, 1), 1, &p).unwrap();
        assert_eq!(tape.value(attn).data(), &[1.0]);
        let v = tape.value(out);
        assert!((v.data()[0] - 0.6).abs() < 1e-12);
        assert!((v.data()[1] + 1.4).abs() < 1e-12);
    }

    #[test]
    fn identical_tokens_uniform_attention() {
        let mut tape = Tape::new();
        let tokens =
            tape.leaf(Tensor::new(vec![2, 2], vec![0.5, 1.0, 0.5, 1.0]).unwrap());
        let p = identity_layer(&mut tape, 2);
        let (_, attn) = attention_layer(&mut tape, tokens, (2, 1), 1, &p).unwrap();
        for &v in tape.value(attn).data() {
            assert!((v - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn dense_attention_matches_loop_oracle() {
        let mut rng = Rng::new(5);
        let d = 3;
        let m = 4;
        let mut tape = Tape::new();
        let tok = Tensor::new(vec![m, d], (0..m * d).map(|_| rng.normal()).collect()).unwrap();
        let mk = |rng: &mut Rng| {
            Tensor::new(vec![d, d], (0..d * d).map(|_| rng.normal()).collect()).unwrap()
        };
        let (wq, wk, wv, wo) = (mk(&mut rng), mk(&mut rng), mk(&mut rng), mk(&mut rng));
        let zero = Tensor::zeros(vec![1, d]);
        let p = AttentionLayerParams {
            wq: tape.leaf(wq.clone()),
            bq: tape.leaf(zero.clone()),
            wk: tape.leaf(wk.clone()),
            bk: tape.leaf(zero.clone()),
            wv: tape.leaf(wv.clone()),
            bv: tape.leaf(zero.clone()),
            wo: tape.leaf(wo.clone()),
            bo: tape.leaf(zero),
        };
        let tokens = tape.leaf(tok.clone());
        let (out, _) = attention_layer(&mut tape, tokens, (m, 1), 1, &p).unwrap();

        // direct loop oracle: softmax(QK^T/sqrt(D)) V Wo + residual
        let q = crate::tensor::matmul(&tok, &wq).unwrap();
        let k = crate::tensor::matmul(&tok, &wk).unwrap();
        let v = crate::tensor::matmul(&tok, &wv).unwrap();
        let mut scores = vec![0.0; m * m];
        for i in 0..m {
            for j in 0..m {
                let mut s = 0.0;
                for t in 0..d {
                    s += q.at2(i, t) * k.at2(j, t);
                }
                scores[i * m + j] = s / (d as f64).sqrt();
            }
        }
        let attn =
            crate::tensor::softmax_rows(&Tensor::new(vec![m, m], scores).unwrap()).unwrap();
        let att_v = crate::tensor::matmul(&attn, &v).unwrap();
        let proj = crate::tensor::matmul(&att_v, &wo).unwrap();
        for i in 0..m {
            for j in 0..d {
                let expect = tok.at2(i, j) + proj.at2(i, j);
                assert!(
                    (tape.value(out).at2(i, j) - expect).abs() < 1e-10,
                    "mismatch at ({i},{j})"
                );
            }
        }
    }

    #[test]
    fn aggregate_single_layer_is_identity() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::new(vec![2, 2], vec![0.9, 0.1, 0.3, 0.7]).unwrap());
        let agg = aggregate_block_attention(&mut tape, &[a]).unwrap();
        assert_eq!(tape.value(agg).data(), tape.value(a).data());
    }

    #[test]
    fn aggregate_two_permutations() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let b = tape.leaf(Tensor::new(vec![2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap());
        let agg = aggregate_block_attention(&mut tape, &[a, b]).unwrap();
        for &v in tape.value(agg).data() {
            assert!((v - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn aggregate_empty_rejected() {
        let mut tape = Tape::new();
        assert!(aggregate_block_attention(&mut tape, &[]).is_err());
    }

    #[test]
    fn pyramid_token_counts() {
        let cfg = EncoderConfig {
            image_width: 16,
            image_height: 16,
            patch_size: 2,
            embed_dims: [4, 4, 4, 4],
            num_layers: [1, 1, 1, 1],
            reduction: [1, 1, 1, 1],
            strides: [1, 2, 2, 2],
        };
        let expect = [64, 16, 4, 1];
        for l in 0..4 {
            assert_eq!(cfg.tokens(l).unwrap(), expect[l]);
        }
    }

    #[test]
    fn patch_embed_row_major_order() {
        let cfg = EncoderConfig {
            image_width: 4,
            image_height: 4,
            patch_size: 2,
            embed_dims: [2, 2, 2, 2],
            num_layers: [1, 1, 1, 1],
            reduction: [1, 1, 1, 1],
            strides: [1, 1, 1, 1],
        };
        // mark pixel (0,0) of each patch with a distinct value
        let mut img = Tensor::zeros(vec![4, 4, 3]);
        for (pi, &(y, x)) in [(0usize, 0usize), (0, 2), (2, 0), (2, 2)].iter().enumerate() {
            img.data_mut()[(y * 4 + x) * 3] = (pi + 1) as f64;
        }
        let patches = extract_patches(&img, &cfg).unwrap();
        assert_eq!(patches.shape(), &[4, 12]);
        for pi in 0..4 {
            assert_eq!(patches.at2(pi, 0), (pi + 1) as f64);
        }
    }

    #[test]
    fn patch_embed_matches_per_patch_oracle() {
        let cfg = EncoderConfig {
            image_width: 4,
            image_height: 4,
            patch_size: 2,
            embed_dims: [3, 2, 2, 2],
            num_layers: [1, 1, 1, 1],
            reduction: [1, 1, 1, 1],
            strides: [1, 1, 1, 1],
        };
        let mut rng = Rng::new(9);
        let img =
            Tensor::new(vec![4, 4, 3], (0..48).map(|_| rng.uniform()).collect()).unwrap();
        let mut params = ParamSet::new();
        init_encoder_params(&cfg, &mut Rng::new(1), &mut params).unwrap();
        let mut tape = Tape::new();
        let vars = ParamVars::bind(&mut tape, &params);
        let tokens = patch_embed(&mut tape, &img, &cfg, &vars).unwrap();

        let w = params.get("patch_embed.w").unwrap();
        let patches = extract_patches(&img, &cfg).unwrap();
        for t in 0..4 {
            for j in 0..3 {
                let mut acc = 0.0;
                for k in 0..12 {
                    acc += patches.at2(t, k) * w.at2(k, j);
                }
                assert!((tape.value(tokens).at2(t, j) - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn forward_attention_rows_stochastic() {
        let cfg = EncoderConfig {
            image_width: 16,
            image_height: 16,
            patch_size: 2,
            embed_dims: [4, 6, 6, 8],
            num_layers: [2, 1, 1, 1],
            reduction: [2, 1, 1, 1],
            strides: [1, 2, 2, 2],
        };
        let mut params = ParamSet::new();
        init_encoder_params(&cfg, &mut Rng::new(3), &mut params).unwrap();
        let mut rng = Rng::new(17);
        let img = Tensor::new(
            vec![16, 16, 3],
            (0..16 * 16 * 3).map(|_| rng.uniform()).collect(),
        )
        .unwrap();
        let mut tape = Tape::new();
        let vars = ParamVars::bind(&mut tape, &params);
        let (_, stack) = encoder_forward(&mut tape, &img, &cfg, &vars).unwrap();
        for block in &stack.blocks {
            for &layer in &block.layers {
                let t = tape.value(layer);
                let (r, c) = t.dims2().unwrap();
                for i in 0..r {
                    let s: f64 = (0..c).map(|j| t.at2(i, j)).sum();
                    assert!((s - 1.0).abs() < 1e-9);
                }
            }
            let agg = tape.value(block.aggregate);
            let (r, c) = agg.dims2().unwrap();
            for i in 0..r {
                let s: f64 = (0..c).map(|j| agg.at2(i, j)).sum();
                assert!((s - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn forward_deterministic() {
        let cfg = EncoderConfig {
            image_width: 8,
            image_height: 8,
            patch_size: 2,
            embed_dims: [4, 4, 4, 4],
            num_layers: [1, 1, 1, 1],
            reduction: [1, 1, 1, 1],
            strides: [1, 2, 1, 1],
        };
        let mut params = ParamSet::new();
        init_encoder_params(&cfg, &mut Rng::new(3), &mut params).unwrap();
        let mut rng = Rng::new(8);
        let img = Tensor::new(
            vec![8, 8, 3],
            (0..8 * 8 * 3).map(|_| rng.uniform()).collect(),
        )
        .unwrap();
        let run = || {
            let mut tape = Tape::new();
            let vars = ParamVars::bind(&mut tape, &params);
            let (features, _) = encoder_forward(&mut tape, &img, &cfg, &vars).unwrap();
            features
                .iter()
                .map(|&f| tape.value(f).data().to_vec())
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn token_permutation_equivariance_without_pos() {
        // one layer, R=1, no positional embedding: swapping two input
        // tokens swaps the corresponding outputs
        let mut rng = Rng::new(21);
        let d = 3;
        let m = 4;
        let tok: Vec<f64> = (0..m * d).map(|_| rng.normal()).collect();
        let mut swapped = tok.clone();
        for j in 0..d {
            swapped.swap(j, d + j); // tokens 0 and 1
        }
        let mk = |rng: &mut Rng| {
            Tensor::new(vec![d, d], (0..d * d).map(|_| rng.normal()).collect()).unwrap()
        };
        let (wq, wk, wv, wo) = (mk(&mut rng), mk(&mut rng), mk(&mut rng), mk(&mut rng));
        let run = |tokens: Vec<f64>| {
            let mut tape = Tape::new();
            let zero = Tensor::zeros(vec![1, d]);
            let p = AttentionLayerParams {
                wq: tape.leaf(wq.clone()),
                bq: tape.leaf(zero.clone()),
                wk: tape.leaf(wk.clone()),
                bk: tape.leaf(zero.clone()),
                wv: tape.leaf(wv.clone()),
                bv: tape.leaf(zero.clone()),
                wo: tape.leaf(wo.clone()),
                bo: tape.leaf(zero),
            };
            let t = tape.leaf(Tensor::new(vec![m, d], tokens).unwrap());
            let (out, _) = attention_layer(&mut tape, t, (m, 1), 1, &p).unwrap();
            tape.value(out).data().to_vec()
        };
        let base = run(tok);
        let perm = run(swapped);
        for j in 0..d {
            assert!((base[j] - perm[d + j]).abs() < 1e-10);
            assert!((base[d + j] - perm[j]).abs() < 1e-10);
        }
        for i in 2..m {
            for j in 0..d {
                assert!((base[i * d + j] - perm[i * d + j]).abs() < 1e-10);
            }
        }
    }
}
