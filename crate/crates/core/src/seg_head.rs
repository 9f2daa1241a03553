//! Decoder head: per-level linear projection to a common width, bilinear
//! upsampling onto the finest patch grid, channel concatenation and a
//! final linear classifier. Purely linear so patch-level class scores
//! stay easy to reason about.

use std::rc::Rc;

use crate::encoder::{EncoderConfig, ParamVars, NUM_BLOCKS};
use crate::error::{CoreError, Result};
use crate::params::ParamSet;
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::{bilinear_table, Tensor};

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadConfig {
    pub common_dim: usize,
    pub num_classes: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            common_dim: 32,
            num_classes: 5,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.common_dim == 0 {
            return Err(CoreError::Config("head common_dim must be positive".into()));
        }
        if self.num_classes == 0 {
            return Err(CoreError::Config("num_classes must be positive".into()));
        }
        Ok(())
    }
}

fn normal_tensor(rng: &mut Rng, shape: Vec<usize>, std: f64) -> Tensor {
    let numel: usize = shape.iter().product();
    let data: Vec<f64> = (0..numel).map(|_| rng.normal() * std).collect();
    Tensor::new(shape, data).expect("shape/data agree")
}

pub fn init_head_params(
    enc: &EncoderConfig,
    head: &HeadConfig,
    rng: &mut Rng,
    params: &mut ParamSet,
) -> Result<()> {
    head.validate()?;
    for l in 0..NUM_BLOCKS {
        params.push(
            format!("head.proj{}.w", l + 1),
            normal_tensor(rng, vec![enc.embed_dims[l], head.common_dim], 0.02),
        );
        params.push(
            format!("head.proj{}.b", l + 1),
            Tensor::zeros(vec![1, head.common_dim]),
        );
    }
    params.push(
        "head.out.w",
        normal_tensor(
            rng,
            vec![NUM_BLOCKS * head.common_dim, head.num_classes],
            0.02,
        ),
    );
    params.push("head.out.b", Tensor::zeros(vec![1, head.num_classes]));
    Ok(())
}

/// Fuse the four feature levels into patch-level class logits [M_1, C].
pub fn decode(
    tape: &mut Tape,
    features: &[Var],
    enc: &EncoderConfig,
    head: &HeadConfig,
    vars: &ParamVars,
) -> Result<Var> {
    if features.len() != NUM_BLOCKS {
        return Err(CoreError::Config(format!(
            "decoder expects {} feature levels, got {}",
            NUM_BLOCKS,
            features.len()
        )));
    }
    let (h1, w1) = enc.grid(0)?;
    let mut parts = Vec::with_capacity(NUM_BLOCKS);
    for (l, &feat) in features.iter().enumerate() {
        let w = vars.var(&format!("head.proj{}.w", l + 1))?;
        let b = vars.var(&format!("head.proj{}.b", l + 1))?;
        let proj = tape.matmul(feat, w)?;
        let proj = tape.add_rows(proj, b)?;
        let (h, wd) = enc.grid(l)?;
        let up = if (h, wd) == (h1, w1) {
            proj
        } else {
            let table = Rc::new(bilinear_table(h, wd, h1, w1)?);
            tape.bilinear(proj, table)?
        };
        parts.push(up);
    }
    let fused = tape.concat_cols(&parts)?;
    let w = vars.var("head.out.w")?;
    let expect = [NUM_BLOCKS * head.common_dim, head.num_classes];
    if tape.value(w).shape() != expect {
        return Err(CoreError::Dimension(format!(
            "classifier weight {:?} does not match head config {:?}",
            tape.value(w).shape(),
            expect
        )));
    }
    let b = vars.var("head.out.b")?;
    let logits = tape.matmul(fused, w)?;
    tape.add_rows(logits, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder;

    fn small_cfg() -> EncoderConfig {
        EncoderConfig {
            image_width: 8,
            image_height: 8,
            patch_size: 2,
            embed_dims: [4, 4, 6, 6],
            num_layers: [1, 1, 1, 1],
            reduction: [1, 1, 1, 1],
            strides: [1, 2, 1, 2],
        }
    }

    fn build(head: &HeadConfig) -> (EncoderConfig, ParamSet) {
        let enc = small_cfg();
        let mut params = ParamSet::new();
        let mut rng = Rng::new(2);
        encoder::init_encoder_params(&enc, &mut rng, &mut params).unwrap();
        init_head_params(&enc, head, &mut rng, &mut params).unwrap();
        (enc, params)
    }

    fn feature_vars(tape: &mut Tape, enc: &EncoderConfig, fill: f64) -> Vec<Var> {
        (0..NUM_BLOCKS)
            .map(|l| {
                tape.leaf(Tensor::filled(
                    vec![enc.tokens(l).unwrap(), enc.embed_dims[l]],
                    fill,
                ))
            })
            .collect()
    }

    #[test]
    fn zero_features_zero_bias_give_zero_logits() {
        let head = HeadConfig::default();
        let (enc, params) = build(&head);
        let mut tape = Tape::new();
        let vars = ParamVars::bind(&mut tape, &params);
        let features = feature_vars(&mut tape, &enc, 0.0);
        let logits = decode(&mut tape, &features, &enc, &head, &vars).unwrap();
        assert!(tape.value(logits).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_class_shape() {
        let head = HeadConfig {
            common_dim: 8,
            num_classes: 1,
        };
        let (enc, params) = build(&head);
        let mut tape = Tape::new();
        let vars = ParamVars::bind(&mut tape, &params);
        let features = feature_vars(&mut tape, &enc, 0.5);
        let logits = decode(&mut tape, &features, &enc, &head, &vars).unwrap();
        assert_eq!(tape.value(logits).shape(), &[enc.tokens(0).unwrap(), 1]);
    }

    #[test]
    fn wrong_level_count_rejected() {
        let head = HeadConfig::default();
        let (enc, params) = build(&head);
        let mut tape = Tape::new();
        let vars = ParamVars::bind(&mut tape, &params);
        let features = feature_vars(&mut tape, &enc, 0.5);
        assert!(decode(&mut tape, &features[..3], &enc, &head, &vars).is_err());
    }

    #[test]
    fn matches_composition_oracle() {
        let head = HeadConfig {
            common_dim: 4,
            num_classes: 3,
        };
        let (enc, params) = build(&head);
        let mut rng = Rng::new(31);
        let mut tape = Tape::new();
        let vars = ParamVars::bind(&mut tape, &params);
        let feats: Vec<Tensor> = (0..NUM_BLOCKS)
            .map(|l| {
                let n = enc.tokens(l).unwrap() * enc.embed_dims[l];
                Tensor::new(
                    vec![enc.tokens(l).unwrap(), enc.embed_dims[l]],
                    (0..n).map(|_| rng.normal()).collect(),
                )
                .unwrap()
            })
            .collect();
        let fvars: Vec<Var> = feats.iter().map(|t| tape.leaf(t.clone())).collect();
        let logits = decode(&mut tape, &fvars, &enc, &head, &vars).unwrap();

        // loop oracle: project, upsample, concat, project
        let (h1, w1) = enc.grid(0).unwrap();
        let mut fused = vec![vec![0.0; NUM_BLOCKS * head.common_dim]; h1 * w1];
        for l in 0..NUM_BLOCKS {
            let w = params.get(&format!("head.proj{}.w", l + 1)).unwrap();
            let proj = crate::tensor::matmul(&feats[l], w).unwrap();
            let (h, wd) = enc.grid(l).unwrap();
            let table = bilinear_table(h, wd, h1, w1).unwrap();
            let up = crate::tensor::bilinear_apply(&table, &proj).unwrap();
            for m in 0..h1 * w1 {
                for c in 0..head.common_dim {
                    fused[m][l * head.common_dim + c] = up.at2(m, c);
                }
            }
        }
        let wout = params.get("head.out.w").unwrap();
        for m in 0..h1 * w1 {
            for c in 0..head.num_classes {
                let mut acc = 0.0;
                for k in 0..NUM_BLOCKS * head.common_dim {
                    acc += fused[m][k] * wout.at2(k, c);
                }
                assert!(
                    (tape.value(logits).at2(m, c) - acc).abs() < 1e-10,
                    "mismatch at ({m},{c})"
                );
            }
        }
    }

    #[test]
    fn decode_is_linear_in_features() {
        // superposition: decode(a + b) == decode(a) + decode(b) - decode(0)
        let head = HeadConfig {
            common_dim: 4,
            num_classes: 2,
        };
        let (enc, params) = build(&head);
        let mut rng = Rng::new(77);
        let gen: Vec<Vec<Tensor>> = (0..2)
            .map(|_| {
                (0..NUM_BLOCKS)
                    .map(|l| {
                        let n = enc.tokens(l).unwrap() * enc.embed_dims[l];
                        Tensor::new(
                            vec![enc.tokens(l).unwrap(), enc.embed_dims[l]],
                            (0..n).map(|_| rng.normal()).collect(),
                        )
                        .unwrap()
                    })
                    .collect()
            })
            .collect();
        let run = |feats: &[Tensor]| {
            let mut tape = Tape::new();
            let vars = ParamVars::bind(&mut tape, &params);
            let fvars: Vec<Var> = feats.iter().map(|t| tape.leaf(t.clone())).collect();
            let logits = decode(&mut tape, &fvars, &enc, &head, &vars).unwrap();
            tape.value(logits).data().to_vec()
        };
        let sum_feats: Vec<Tensor> = gen[0]
            .iter()
            .zip(&gen[1])
            .map(|(a, b)| {
                let data: Vec<f64> =
                    a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
                Tensor::new(a.shape().to_vec(), data).unwrap()
            })
            .collect();
        let zeros: Vec<Tensor> = gen[0]
            .iter()
            .map(|t| Tensor::zeros(t.shape().to_vec()))
            .collect();
        let ya = run(&gen[0]);
        let yb = run(&gen[1]);
        let ysum = run(&sum_feats);
        let y0 = run(&zeros);
        for i in 0..ya.len() {
            assert!((ysum[i] - (ya[i] + yb[i] - y0[i])).abs() < 1e-9);
        }
    }
}
