//! Dual-objective training: plan loss, audio loss, the warmup/inverse-sqrt
//! schedule, length-binned batching, gradient accumulation and the staged
//! scenario curriculum.

mod batching;
mod curriculum;
mod trainer;

use serde::{Deserialize, Serialize};

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::layout::{delay_encode, frame_sequence, FrameSeq, TokenGrid};
use crate::model::{Model, ModelConfig};
use crate::numerics::{finite_diff_check, GradCheckReport, GradFault, Graph, NodeId, ParamStore, Tensor};
use crate::rng::stream;

pub use batching::{plan_batches, BatchPlan};
pub use curriculum::{curriculum_draw, CurriculumSchedule, Stage};
pub use trainer::{EpochMetrics, Example, LossValues, TrainConfig, Trainer, TrainingSet};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    /// Weight of the cosine term inside the plan loss.
    pub lambda_cos: f64,
    /// Weight of the plan loss in the total.
    pub lambda_latent: f64,
    /// Weight of the audio loss in the total.
    pub lambda_audio: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_cos: 1.0,
            lambda_latent: 1.0,
            lambda_audio: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.lambda_cos, self.lambda_latent, self.lambda_audio]
            .iter()
            .any(|w| !(*w >= 0.0 && w.is_finite()))
        {
            return Err(Error::contract("loss weights must be finite and ≥ 0"));
        }
        Ok(())
    }
}

/// `(1/K) Σ_k [ mse(pred_k, target_k) + λ (1 − cos(pred_k, target_k)) ]` on a
/// `K × d_sem` prediction node.
pub fn latent_loss_node(g: &mut Graph, pred: NodeId, target: &[Vec<f64>], lambda: f64) -> Result<NodeId> {
    let shape = g.value(pred).shape().to_vec();
    let k = target.len();
    let d = target.first().map_or(0, Vec::len);
    if shape != [k, d] || k == 0 || target.iter().any(|t| t.len() != d) {
        return Err(Error::Dimension {
            op: "latent_loss",
            left: shape,
            right: vec![k, d],
        });
    }
    let tgt = g.input(Tensor::from_rows(target)?);
    // Each row has d entries, so the mean over the whole matrix is the mean
    // of the per-row MSEs.
    let mse = g.mse(pred, tgt)?;
    if lambda == 0.0 {
        return Ok(mse);
    }
    let mut cos_sum = None;
    for i in 0..k {
        let p = g.slice_rows(pred, i, 1)?;
        let t = g.slice_rows(tgt, i, 1)?;
        let c = g.cosine(p, t)?;
        cos_sum = Some(match cos_sum {
            None => c,
            Some(acc) => g.add(acc, c)?,
        });
    }
    let cos_sum = cos_sum.expect("k ≥ 1");
    // λ (1 − mean cos)
    let penalty = g.affine(cos_sum, -lambda / k as f64, lambda);
    g.add(mse, penalty)
}

/// Scalar plan loss on plain vectors.
pub fn latent_loss(pred: &[Vec<f64>], target: &[Vec<f64>], lambda: f64) -> Result<f64> {
    if pred.len() != target.len() || pred.iter().zip(target).any(|(a, b)| a.len() != b.len()) {
        return Err(Error::Dimension {
            op: "latent_loss",
            left: vec![pred.len(), pred.first().map_or(0, Vec::len)],
            right: vec![target.len(), target.first().map_or(0, Vec::len)],
        });
    }
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let p = g.input(Tensor::from_rows(pred)?);
    let l = latent_loss_node(&mut g, p, target, lambda)?;
    Ok(g.scalar(l))
}

/// Cross-entropy targets for a frame sequence, step-major.
pub fn audio_targets(frames: &FrameSeq) -> Vec<usize> {
    frames.flat().iter().map(|&t| t as usize).collect()
}

/// Mean cross-entropy over every `(step, codebook)` cell of `frames`,
/// pads included, against `(steps·Q) × classes` logits.
pub fn audio_loss_node(g: &mut Graph, logits: NodeId, frames: &FrameSeq) -> Result<NodeId> {
    let shape = g.value(logits).shape().to_vec();
    if shape.len() != 2 || shape[0] != frames.len() * frames.q() {
        return Err(Error::contract(format!(
            "audio logits {shape:?} do not align with {} steps × {} codebooks",
            frames.len(),
            frames.q()
        )));
    }
    g.cross_entropy(logits, &audio_targets(frames))
}

/// Scalar audio loss on a `T × Q × classes` logit tensor.
pub fn audio_loss(logits: &Tensor, frames: &FrameSeq) -> Result<f64> {
    let shape = logits.shape();
    if shape.len() != 3 || shape[0] != frames.len() || shape[1] != frames.q() {
        return Err(Error::contract(format!(
            "audio logits {shape:?} do not align with {} steps × {} codebooks",
            frames.len(),
            frames.q()
        )));
    }
    if frames.is_empty() {
        return Err(Error::contract("audio loss over zero frame steps"));
    }
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let flat = logits.clone().reshaped(&[shape[0] * shape[1], shape[2]])?;
    let l = g.input(flat);
    let loss = audio_loss_node(&mut g, l, frames)?;
    Ok(g.scalar(loss))
}

pub fn total_loss(latent: f64, audio: f64, w: &LossWeights) -> f64 {
    w.lambda_latent * latent + w.lambda_audio * audio
}

pub fn total_loss_node(g: &mut Graph, latent: NodeId, audio: NodeId, w: &LossWeights) -> Result<NodeId> {
    let a = g.scale(latent, w.lambda_latent);
    let b = g.scale(audio, w.lambda_audio);
    g.add(a, b)
}

/// Linear warmup to `lr_peak`, then `lr_peak · max(floor, √(warmup/step))`.
pub fn lr_at(step: u64, lr_peak: f64, warmup: u64, floor_factor: f64) -> f64 {
    assert!(step >= 1, "steps are 1-based");
    if step <= warmup {
        lr_peak * step as f64 / warmup as f64
    } else {
        lr_peak * floor_factor.max((warmup as f64 / step as f64).sqrt())
    }
}

/// Finite-difference check of the full training loss (plan loss with its
/// cosine term plus audio loss with the stop step) on a small model, every
/// parameter entry included. Weights are spread by ±0.3 beyond the default
/// initialisation so no path is near-degenerate.
pub fn full_gradient_check(fault: Option<GradFault>) -> Result<GradCheckReport> {
    let c = ModelConfig {
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        d_ff: 32,
        v_text: 12,
        v_audio: 6,
        codebooks: 2,
        d_sem: 4,
        latent_steps: 2,
        max_positions: 32,
    };
    let mut model = Model::new(c.clone(), 15)?;
    let mut rng = stream(16, "gradcheck");
    let ids: Vec<_> = model.params.ids().collect();
    for &id in &ids {
        for v in model.params.get_mut(id).data_mut() {
            *v += rng.gen_range(-0.3..0.3);
        }
    }
    let text: Vec<u32> = (0..3).map(|_| rng.gen_range(0..c.v_text as u32 - 4)).collect();
    let tokens = (0..4 * c.codebooks).map(|_| rng.gen_range(0..c.v_audio as u32)).collect();
    let grid = TokenGrid::new(4, c.codebooks, c.v_audio as u32, tokens)?;
    let plan: Vec<Vec<f64>> = (0..c.latent_steps)
        .map(|_| (0..c.d_sem).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();
    let seq = frame_sequence(&text, c.latent_steps, &grid, c.pad())?;
    let mut targets = delay_encode(&grid, c.pad())?;
    targets.push_step(&vec![c.pad(); c.codebooks]);
    let frozen = model.clone();
    let w = LossWeights::default();
    finite_diff_check(&mut model.params, &ids, 1e-5, fault, |g| {
        let nodes = frozen.build(g, &seq, &plan)?;
        let l = latent_loss_node(g, nodes.latent_pred, &plan, w.lambda_cos)?;
        let a = audio_loss_node(g, nodes.audio_logits, &targets)?;
        total_loss_node(g, l, a, &w)
    })
}

#[cfg(test)]
mod tests;
