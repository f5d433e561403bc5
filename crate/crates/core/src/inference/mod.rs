//! Two-phase generation: K deterministic plan steps, then top-k sampling of
//! one token per codebook per step until the stop step or the frame cap.

use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layout::{delay_decode, FrameSeq, Marker, Token, TokenGrid};
use crate::model::{Decoder, Model};
use crate::rng::{stream, Rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub top_k: usize,
    pub temperature: f64,
    /// Cap on emitted frame steps.
    pub max_frames: usize,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            top_k: 8,
            temperature: 1.0,
            max_frames: 99,
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self, model: &Model) -> Result<()> {
        let classes = model.config.head_width();
        if self.top_k == 0 || self.top_k > classes {
            return Err(Error::contract(format!(
                "top_k {} must lie in 1..={classes}",
                self.top_k
            )));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::contract("temperature must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Termination {
    Eoa,
    MaxLen,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenTrace {
    pub text: Vec<u32>,
    pub seed: u64,
    /// `K × d_sem`, emitted before any frame.
    pub latents: Vec<Vec<f64>>,
    pub frames: FrameSeq,
    pub termination: Termination,
    /// Renormalized probability of each sampled token, one row per sampled
    /// step (the stop step included).
    pub probs: Vec<Vec<f64>>,
    /// Top-k candidate sets, parallel to `probs`.
    pub support: Vec<Vec<Vec<Token>>>,
}

impl GenTrace {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }
}

/// The `k` largest logits, ties broken toward the lower index.
pub fn top_k_indices(logits: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..logits.len()).collect();
    idx.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Samples from the softmax of the `k` largest logits at `temperature`;
/// returns the token and its renormalized probability.
pub fn top_k_sample(logits: &[f64], k: usize, temperature: f64, rng: &mut Rng) -> (usize, f64) {
    assert!(k >= 1 && k <= logits.len(), "top-k needs 1 ≤ k ≤ V");
    let idx = top_k_indices(logits, k);
    let max = logits[idx[0]];
    let weights: Vec<f64> = idx.iter().map(|&i| ((logits[i] - max) / temperature).exp()).collect();
    let z: f64 = weights.iter().sum();
    let u = rng.gen::<f64>() * z;
    let mut cum = 0.0;
    for (&i, &w) in idx.iter().zip(&weights) {
        cum += w;
        if u < cum {
            return (i, w / z);
        }
    }
    // Rounding left u at the very top of the range.
    let last = idx.len() - 1;
    (idx[last], weights[last] / z)
}

/// Runs both phases for one prompt.
pub fn generate(model: &Model, text: &[u32], gen: &GenConfig) -> Result<GenTrace> {
    gen.validate(model)?;
    let c = &model.config;
    let prefix = model.prompt_prefix(text)?;
    let need = prefix.len() + c.latent_steps + 1 + gen.max_frames;
    if need > c.max_positions {
        return Err(Error::contract(format!(
            "prompt of {} tokens plus {} plan slots and {} frames exceeds max_positions {}",
            text.len(),
            c.latent_steps,
            gen.max_frames,
            c.max_positions
        )));
    }
    let mut rng = stream(gen.seed, "generate");
    let mut dec = Decoder::new(model);
    let mut hidden = Vec::new();
    for &t in &prefix {
        hidden = dec.push_text(t)?;
    }
    let latents = dec.run_plan(hidden)?;
    let mut hidden = dec.push_text(c.markers().id(Marker::Soa))?;

    let pad = c.pad();
    let width = c.head_width();
    let mut frames = FrameSeq::new(c.codebooks, Vec::new())?;
    let mut probs = Vec::new();
    let mut support = Vec::new();
    let termination = loop {
        let logits = model.audio_head(&hidden);
        let mut step = Vec::with_capacity(c.codebooks);
        let mut p = Vec::with_capacity(c.codebooks);
        let mut s = Vec::with_capacity(c.codebooks);
        for q in 0..c.codebooks {
            let row = &logits[q * width..(q + 1) * width];
            let (tok, prob) = top_k_sample(row, gen.top_k, gen.temperature, &mut rng);
            step.push(tok as Token);
            p.push(prob);
            s.push(top_k_indices(row, gen.top_k).into_iter().map(|i| i as Token).collect());
        }
        probs.push(p);
        support.push(s);
        // An all-pad step never occurs inside a delayed grid: it is the stop.
        if step.iter().all(|&t| t == pad) {
            break Termination::Eoa;
        }
        if frames.len() == gen.max_frames {
            break Termination::MaxLen;
        }
        frames.push_step(&step);
        if frames.len() == gen.max_frames {
            break Termination::MaxLen;
        }
        hidden = dec.push_frame(&step)?;
    };
    Ok(GenTrace {
        text: text.to_vec(),
        seed: gen.seed,
        latents,
        frames,
        termination,
        probs,
        support,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    pub grid: TokenGrid,
    /// Partially emitted frames removed by truncation repair.
    pub dropped: usize,
}

/// Undoes the delay pattern. A `MAX_LEN` trace is only accepted with
/// `repair`, which keeps the frames whose every codebook was emitted.
pub fn decode_output(trace: &GenTrace, q: usize, pad: Token, repair: bool) -> Result<Decoded> {
    match trace.termination {
        Termination::Eoa => Ok(Decoded {
            grid: delay_decode(&trace.frames, q, pad)?,
            dropped: 0,
        }),
        Termination::MaxLen if !repair => Err(Error::contract(
            "trace hit the frame cap; decode with truncation repair",
        )),
        Termination::MaxLen => {
            let len = trace.frames.len();
            let n = (len + 1).saturating_sub(q);
            let mut steps = vec![pad; crate::layout::delayed_len(n, q) * q];
            for t in 0..crate::layout::delayed_len(n, q) {
                for c in 0..q {
                    if t >= c && t - c < n {
                        steps[t * q + c] = trace.frames.step(t)[c];
                    }
                }
            }
            let complete = FrameSeq::new(q, steps)?;
            Ok(Decoded {
                grid: delay_decode(&complete, q, pad)?,
                dropped: len - n,
            })
        }
    }
}
