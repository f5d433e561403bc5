//! A deterministic, invertible stand-in for a real audio data stack.
//!
//! Every sound event and every spoken word is an *item* with a fixed motif:
//! frame `j` of item `i` renders as the Q-tuple `H(i, j, q) mod V`. The hash
//! seed is chosen so that each tuple identifies its `(item, j)` uniquely,
//! which makes rendering, semantic embedding and event detection exactly
//! invertible.

mod dataset;
mod prompt;
mod render;

use std::collections::HashMap;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layout::{MarkerIds, Token};
use crate::rng::{mix64, stream};

pub use dataset::{dataset_checksum, read_records, write_records, Record};
pub use prompt::{realize_text, sample_prompt, PromptSpec, Scenario};
pub use render::{Detection, SemanticTarget};

const MAX_SEED_ATTEMPTS: u64 = 1000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    /// Non-clean event types.
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
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            events: 16,
            words: 32,
            codebooks: 4,
            codebook_vocab: 64,
            d_sem: 32,
            latent_steps: 6,
            min_duration: 4,
            max_duration: 12,
            clean_duration: 4,
            max_frames: 96,
            seed: 0,
        }
    }
}

/// Items are numbered events first, then the clean background, then words.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ItemId(pub u32);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ItemKind {
    Event(u32),
    Clean,
    Word(u32),
}

/// Template words shared by all prompt templates.
const FILLER: &[&str] = &[
    "then", "while", "followed", "by", "with", "says", "a", "sound", "of", "you", "hear", "there",
    "is", "in", "the", "background", "someone", "person", "voice", "speaking", "quietly", "no",
    "noise", "clean", "speech", ":", "and", "«", "»",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct World {
    pub config: WorldConfig,
    pub hash_seed: u64,
    /// Text vocabulary; the last four entries are the sequence markers.
    pub vocabulary: Vec<String>,
    /// Motif length per item.
    pub durations: Vec<usize>,
    /// Unit-norm semantic embedding per item, `d_sem` wide.
    pub embeddings: Vec<Vec<f64>>,
    #[serde(skip)]
    lookup: HashMap<Vec<Token>, (ItemId, usize)>,
    #[serde(skip)]
    token_ids: HashMap<String, u32>,
}

impl World {
    pub fn build(config: WorldConfig) -> Result<World> {
        if config.min_duration < 2 || config.min_duration > config.max_duration {
            return Err(Error::contract("motif durations must satisfy 2 ≤ min ≤ max"));
        }
        if config.codebooks == 0 || config.latent_steps == 0 || config.d_sem == 0 {
            return Err(Error::contract("codebooks, latent_steps and d_sem must be positive"));
        }
        let n_items = config.events + 1 + config.words;
        let mut rng = stream(config.seed, "world/layout");
        let durations: Vec<usize> = (0..n_items)
            .map(|i| {
                if i == config.events {
                    config.clean_duration
                } else {
                    rng.gen_range(config.min_duration..=config.max_duration)
                }
            })
            .collect();
        let embeddings = (0..n_items)
            .map(|_| random_unit(&mut rng, config.d_sem))
            .collect();

        let mut vocabulary: Vec<String> = (0..config.events).map(|e| format!("ev{e}")).collect();
        vocabulary.extend((0..config.words).map(|w| format!("w{w}")));
        vocabulary.extend(FILLER.iter().map(|s| s.to_string()));
        vocabulary.extend(["<|sot|>", "<|sol|>", "<|soa|>", "<|eoa|>"].map(String::from));

        for attempt in 0..MAX_SEED_ATTEMPTS {
            let hash_seed = crate::rng::derive_seed(config.seed, &format!("world/hash/{attempt}"));
            let mut world = World {
                config: config.clone(),
                hash_seed,
                vocabulary: vocabulary.clone(),
                durations: durations.clone(),
                embeddings: Vec::clone(&embeddings),
                lookup: HashMap::new(),
                token_ids: HashMap::new(),
            };
            if world.index() {
                return Ok(world);
            }
        }
        Err(Error::Construction(format!(
            "no injective motif hash within {MAX_SEED_ATTEMPTS} seeds"
        )))
    }

    /// Rebuilds the lookup tables; returns false if two motif frames collide.
    fn index(&mut self) -> bool {
        self.lookup.clear();
        for item in 0..self.durations.len() {
            for j in 0..self.durations[item] {
                let tuple = self.motif_frame(ItemId(item as u32), j);
                if self.lookup.insert(tuple, (ItemId(item as u32), j)).is_some() {
                    return false;
                }
            }
        }
        self.token_ids = self
            .vocabulary
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), i as u32))
            .collect();
        true
    }

    pub fn load(path: &Path) -> Result<World> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut world: World = serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        if !world.index() {
            return Err(Error::Format("world file hash seed is not injective".into()));
        }
        Ok(world)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn n_items(&self) -> usize {
        self.durations.len()
    }

    pub fn clean_item(&self) -> ItemId {
        ItemId(self.config.events as u32)
    }

    pub fn event_item(&self, e: u32) -> ItemId {
        ItemId(e)
    }

    pub fn word_item(&self, w: u32) -> ItemId {
        ItemId(self.config.events as u32 + 1 + w)
    }

    pub fn kind(&self, item: ItemId) -> ItemKind {
        let e = self.config.events as u32;
        match item.0 {
            i if i < e => ItemKind::Event(i),
            i if i == e => ItemKind::Clean,
            i => ItemKind::Word(i - e - 1),
        }
    }

    pub fn duration(&self, item: ItemId) -> usize {
        self.durations[item.0 as usize]
    }

    pub fn embedding(&self, item: ItemId) -> &[f64] {
        &self.embeddings[item.0 as usize]
    }

    /// Codebook-token tuple of frame `j` of `item`.
    pub fn motif_frame(&self, item: ItemId, j: usize) -> Vec<Token> {
        (0..self.config.codebooks)
            .map(|q| {
                let key = (item.0 as u64) << 40 | (j as u64) << 20 | q as u64;
                (mix64(self.hash_seed ^ mix64(key)) % self.config.codebook_vocab as u64) as Token
            })
            .collect()
    }

    /// `(item, j)` of a frame tuple, if any motif produces it.
    pub fn invert_frame(&self, tuple: &[Token]) -> Option<(ItemId, usize)> {
        self.lookup.get(tuple).copied()
    }

    pub fn pad_token(&self) -> Token {
        self.config.codebook_vocab
    }

    pub fn text_vocab_size(&self) -> u32 {
        self.vocabulary.len() as u32
    }

    pub fn markers(&self) -> MarkerIds {
        MarkerIds::reserved_tail(self.text_vocab_size())
    }

    pub fn token_id(&self, word: &str) -> Option<u32> {
        self.token_ids.get(word).copied()
    }

    /// Whitespace tokenisation against the fixed vocabulary.
    pub fn tokenize(&self, text: &str) -> Result<Vec<u32>> {
        text.split_whitespace()
            .map(|w| {
                self.token_id(w)
                    .ok_or_else(|| Error::contract(format!("out-of-vocabulary prompt token {w:?}")))
            })
            .collect()
    }

    pub fn detokenize(&self, ids: &[u32]) -> String {
        ids.iter()
            .map(|&i| self.vocabulary.get(i as usize).map_or("<?>", String::as_str))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn item_name(&self, item: ItemId) -> String {
        match self.kind(item) {
            ItemKind::Event(e) => format!("ev{e}"),
            ItemKind::Clean => "clean".into(),
            ItemKind::Word(w) => format!("w{w}"),
        }
    }
}

fn random_unit(rng: &mut impl rand::Rng, d: usize) -> Vec<f64> {
    loop {
        // Normal components give a rotation-invariant direction.
        let v: Vec<f64> = (0..d).map(|_| crate::rng::normal(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}
