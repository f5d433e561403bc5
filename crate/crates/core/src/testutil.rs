//! Small world and model shared by unit tests.

use crate::model::{Model, ModelConfig};
use crate::toyworld::{World, WorldConfig};

pub fn tiny_world() -> World {
    World::build(WorldConfig {
        events: 4,
        words: 6,
        codebooks: 2,
        codebook_vocab: 16,
        d_sem: 4,
        latent_steps: 2,
        min_duration: 2,
        max_duration: 4,
        clean_duration: 2,
        max_frames: 12,
        seed: 3,
    })
    .unwrap()
}

pub fn tiny_model(world: &World, seed: u64) -> Model {
    let c = ModelConfig {
        d_model: 32,
        n_layers: 2,
        n_heads: 2,
        d_ff: 64,
        v_text: world.text_vocab_size() as usize,
        v_audio: 16,
        codebooks: 2,
        d_sem: 4,
        latent_steps: 2,
        max_positions: 64,
    };
    Model::new(c, seed).unwrap()
}
