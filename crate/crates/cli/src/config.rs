//! Flat run configuration.
//!
//! One TOML file with the keys below; command-line flags override file keys.
//! Every subsystem seed is split from the root `seed`:
//! `derive_seed(seed, "world" | "model" | "train" | "gen")`.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use latent_plan::inference::GenConfig;
use latent_plan::model::ModelConfig;
use latent_plan::rng::derive_seed;
use latent_plan::toyworld::{World, WorldConfig};
use latent_plan::training::{CurriculumSchedule, LossWeights, Stage, TrainConfig};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,

    // World.
    pub events: usize,
    pub words: usize,
    pub codebooks: usize,
    pub codebook_vocab: u32,
    pub d_sem: usize,
    pub latent_steps: usize,
    pub min_duration: usize,
    pub max_duration: usize,
    pub clean_duration: usize,
    pub max_frames: usize,

    // Dataset: records per scenario (sound, speech, composite).
    pub train_counts: [usize; 3],
    pub test_counts: [usize; 3],

    // Model.
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_positions: usize,

    // Loss and optimiser.
    pub lambda_cos: f64,
    pub lambda_latent: f64,
    pub lambda_audio: f64,
    pub lr_peak: f64,
    pub warmup: u64,
    pub floor_factor: f64,
    pub accumulation: usize,
    pub max_batch_bin: usize,
    pub max_batch_size: usize,
    pub epochs: usize,
    /// `constant`, `gradual`, `disjoint` or `custom`.
    pub schedule: String,
    /// Rows of `[start, end, sound, speech, composite]` for `custom`.
    pub stages: Vec<[f64; 5]>,

    // Generation.
    pub top_k: usize,
    pub temperature: f64,
    pub gen_max_frames: usize,

    // Paths.
    pub data_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let w = WorldConfig::default();
        let m = ModelConfig::default();
        let t = TrainConfig::default();
        let g = GenConfig::default();
        RunConfig {
            seed: 0,
            events: w.events,
            words: w.words,
            codebooks: w.codebooks,
            codebook_vocab: w.codebook_vocab,
            d_sem: w.d_sem,
            latent_steps: w.latent_steps,
            min_duration: w.min_duration,
            max_duration: w.max_duration,
            clean_duration: w.clean_duration,
            max_frames: w.max_frames,
            train_counts: [1000; 3],
            test_counts: [60; 3],
            d_model: m.d_model,
            n_layers: m.n_layers,
            n_heads: m.n_heads,
            d_ff: m.d_ff,
            max_positions: m.max_positions,
            lambda_cos: t.loss.lambda_cos,
            lambda_latent: t.loss.lambda_latent,
            lambda_audio: t.loss.lambda_audio,
            lr_peak: t.lr_peak,
            warmup: t.warmup,
            floor_factor: t.floor_factor,
            accumulation: t.accumulation,
            max_batch_bin: t.max_batch_bin,
            max_batch_size: t.max_batch_size,
            epochs: t.epochs,
            schedule: "constant".into(),
            stages: Vec::new(),
            top_k: g.top_k,
            temperature: g.temperature,
            gen_max_frames: g.max_frames,
            data_dir: PathBuf::from("data"),
        }
    }
}

impl RunConfig {
    /// Reads `path`, or the defaults when no file is given.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(p) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", p.display()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("flat config serialises")
    }

    pub fn world_config(&self) -> WorldConfig {
        WorldConfig {
            events: self.events,
            words: self.words,
            codebooks: self.codebooks,
            codebook_vocab: self.codebook_vocab,
            d_sem: self.d_sem,
            latent_steps: self.latent_steps,
            min_duration: self.min_duration,
            max_duration: self.max_duration,
            clean_duration: self.clean_duration,
            max_frames: self.max_frames,
            seed: derive_seed(self.seed, "world"),
        }
    }

    /// Model extents taken from the run keys and the world's vocabularies.
    pub fn model_config(&self, world: &World) -> ModelConfig {
        ModelConfig {
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_ff: self.d_ff,
            v_text: world.text_vocab_size() as usize,
            v_audio: world.config.codebook_vocab as usize,
            codebooks: world.config.codebooks,
            d_sem: world.config.d_sem,
            latent_steps: world.config.latent_steps,
            max_positions: self.max_positions,
        }
    }

    pub fn model_seed(&self) -> u64 {
        derive_seed(self.seed, "model")
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: derive_seed(self.seed, "train"),
            epochs: self.epochs,
            loss: LossWeights {
                lambda_cos: self.lambda_cos,
                lambda_latent: self.lambda_latent,
                lambda_audio: self.lambda_audio,
            },
            lr_peak: self.lr_peak,
            warmup: self.warmup,
            floor_factor: self.floor_factor,
            accumulation: self.accumulation,
            max_batch_bin: self.max_batch_bin,
            max_batch_size: self.max_batch_size,
            ..TrainConfig::default()
        }
    }

    pub fn schedule(&self) -> Result<CurriculumSchedule> {
        if self.schedule == "custom" {
            if self.stages.is_empty() {
                bail!("schedule `custom` needs a `stages` table");
            }
            let stages = self
                .stages
                .iter()
                .map(|r| Stage {
                    start: r[0] as usize,
                    end: r[1] as usize,
                    weights: [r[2], r[3], r[4]],
                })
                .collect();
            return Ok(CurriculumSchedule::custom(stages)?);
        }
        Ok(CurriculumSchedule::by_name(&self.schedule, self.epochs)?)
    }

    pub fn gen_config(&self) -> GenConfig {
        GenConfig {
            top_k: self.top_k,
            temperature: self.temperature,
            max_frames: self.gen_max_frames,
            seed: derive_seed(self.seed, "gen"),
        }
    }
}
