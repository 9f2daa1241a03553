//! Whole-model assembly: encoder forward, decode, losses, and gradient
//! extraction for one sample.

use std::rc::Rc;

use crate::encoder::{self, EncoderConfig, ParamVars};
use crate::error::Result;
use crate::losses::{self, LossConfig};
use crate::params::ParamSet;
use crate::rng::Rng;
use crate::seg_head::{self, HeadConfig};
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Default, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub head: HeadConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.head.validate()
    }
}

pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ParamSet> {
    let mut rng = Rng::new(seed);
    let mut params = ParamSet::new();
    encoder::init_encoder_params(&cfg.encoder, &mut rng, &mut params)?;
    seg_head::init_head_params(&cfg.encoder, &cfg.head, &mut rng, &mut params)?;
    Ok(params)
}

/// Whether a step builds the full objective or only the labeled-cell
/// cross-entropy. SegOnly exists as an explicitly separate code path so
/// alpha = 0 runs can be verified against it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossPath {
    Full,
    SegOnly,
}

#[derive(Debug, Clone)]
pub struct StepOutput {
    pub l_seg: f64,
    pub l_aff: f64,
    pub total: f64,
    /// Aligned with the parameter set's order.
    pub grads: Vec<Tensor>,
}

/// One sample's loss and parameter gradients.
pub fn loss_and_grads(
    cfg: &ModelConfig,
    loss_cfg: &LossConfig,
    params: &ParamSet,
    image: &Tensor,
    cell_labels: &[u8],
    path: LossPath,
) -> Result<StepOutput> {
    let mut tape = Tape::new();
    let vars = ParamVars::bind(&mut tape, params);
    let (features, attn) = encoder::encoder_forward(&mut tape, image, &cfg.encoder, &vars)?;
    let logits = seg_head::decode(&mut tape, &features, &cfg.encoder, &cfg.head, &vars)?;
    let l_seg = losses::partial_cross_entropy(&mut tape, logits, Rc::new(cell_labels.to_vec()))?;

    let (root, l_seg_v, l_aff_v) = match path {
        LossPath::SegOnly => (l_seg, tape.value(l_seg).data()[0], 0.0),
        LossPath::Full => {
            let aff = losses::affinity_loss(&mut tape, &attn, logits, loss_cfg)?;
            let total = losses::total_loss(&mut tape, l_seg, aff.loss, loss_cfg.alpha)?;
            (
                total,
                tape.value(l_seg).data()[0],
                tape.value(aff.loss).data()[0],
            )
        }
    };
    let total_v = tape.value(root).data()[0];
    let grads_all = tape.backward(root)?;
    let grads = vars.ordered().map(|v| grads_all.get(v, &tape)).collect();
    Ok(StepOutput {
        l_seg: l_seg_v,
        l_aff: l_aff_v,
        total: total_v,
        grads,
    })
}

/// Forward-only total loss, used by the finite-difference checker.
pub fn loss_value(
    cfg: &ModelConfig,
    loss_cfg: &LossConfig,
    params: &ParamSet,
    image: &Tensor,
    cell_labels: &[u8],
) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = ParamVars::bind(&mut tape, params);
    let (features, attn) = encoder::encoder_forward(&mut tape, image, &cfg.encoder, &vars)?;
    let logits = seg_head::decode(&mut tape, &features, &cfg.encoder, &cfg.head, &vars)?;
    let l_seg = losses::partial_cross_entropy(&mut tape, logits, Rc::new(cell_labels.to_vec()))?;
    let aff = losses::affinity_loss(&mut tape, &attn, logits, loss_cfg)?;
    let total = losses::total_loss(&mut tape, l_seg, aff.loss, loss_cfg.alpha)?;
    Ok(tape.value(total).data()[0])
}

#[derive(Debug, Clone)]
pub struct InferenceOutput {
    /// Patch-level class logits [M_1, C].
    pub logits: Tensor,
    /// Aggregated attention map per block, with its grids.
    pub attention: Vec<(Tensor, (usize, usize), (usize, usize))>,
}

/// Forward pass without loss construction, for evaluation and
/// attention-map dumps.
pub fn forward_inference(
    cfg: &ModelConfig,
    params: &ParamSet,
    image: &Tensor,
) -> Result<InferenceOutput> {
    let mut tape = Tape::new();
    let vars = ParamVars::bind(&mut tape, params);
    let (features, attn) = encoder::encoder_forward(&mut tape, image, &cfg.encoder, &vars)?;
    let logits = seg_head::decode(&mut tape, &features, &cfg.encoder, &cfg.head, &vars)?;
    let attention = attn
        .blocks
        .iter()
        .map(|b| (tape.value(b.aggregate).clone(), b.grid, b.reduced_grid))
        .collect();
    Ok(InferenceOutput {
        logits: tape.value(logits).clone(),
        attention,
    })
}
