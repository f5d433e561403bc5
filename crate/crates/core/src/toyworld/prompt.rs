use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{ItemId, World};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Scenario {
    Sound,
    Speech,
    Composite,
}

impl Scenario {
    pub const ALL: [Scenario; 3] = [Scenario::Sound, Scenario::Speech, Scenario::Composite];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Scenario::Sound => "SOUND",
            Scenario::Speech => "SPEECH",
            Scenario::Composite => "COMPOSITE",
        }
    }

    pub fn parse(s: &str) -> Option<Scenario> {
        Scenario::ALL.into_iter().find(|sc| sc.name().eq_ignore_ascii_case(s))
    }
}

impl std::fmt::Display for Scenario {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Symbolic description of one clip.
///
/// The rendered item sequence is `events` followed by the payload words;
/// `overlaps[i]` says whether item `i` and item `i + 1` are interleaved.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSpec {
    pub scenario: Scenario,
    /// `(item id, duration in frames)`.
    pub events: Vec<(u32, usize)>,
    /// Word indices into the lexicon (not item ids).
    pub payload: Vec<u32>,
    pub overlaps: Vec<bool>,
}

/// Probability that an eligible adjacent pair is interleaved.
const OVERLAP_P: f64 = 0.3;

impl PromptSpec {
    /// Items in render order.
    pub fn items(&self, world: &World) -> Vec<ItemId> {
        self.events
            .iter()
            .map(|&(id, _)| ItemId(id))
            .chain(self.payload.iter().map(|&w| world.word_item(w)))
            .collect()
    }

    /// Number of frames the spec renders to. Interleaving reorders frames
    /// but drops none, so this is the sum of motif lengths.
    pub fn frame_count(&self, world: &World) -> usize {
        self.items(world).iter().map(|&i| world.duration(i)).sum()
    }

    /// Checks the scenario constraints and the frame budget.
    pub fn validate(&self, world: &World) -> Result<()> {
        let clean = world.clean_item().0;
        let bad = |m: &str| Err(Error::contract(format!("{} spec: {m}", self.scenario)));
        let items = self.items(world);
        if items.iter().any(|i| i.0 as usize >= world.n_items()) {
            return bad("unknown item");
        }
        if self
            .events
            .iter()
            .any(|&(id, d)| d != world.duration(ItemId(id)))
        {
            return bad("event duration differs from its motif length");
        }
        let has_clean = self.events.iter().any(|&(id, _)| id == clean);
        if self.events.iter().any(|&(id, _)| id as usize > world.config.events) {
            return bad("event list holds a word item");
        }
        match self.scenario {
            Scenario::Sound if !self.payload.is_empty() => return bad("payload must be empty"),
            Scenario::Sound | Scenario::Composite if has_clean || self.events.is_empty() => {
                return bad("needs at least one non-clean event and no clean event")
            }
            Scenario::Speech if self.events != [(clean, world.duration(world.clean_item()))] => {
                return bad("events must be exactly [clean]")
            }
            Scenario::Speech | Scenario::Composite if self.payload.is_empty() => {
                return bad("payload must be nonempty")
            }
            _ => {}
        }
        if self.overlaps.len() + 1 != items.len().max(1) {
            return bad("one overlap flag per adjacent pair");
        }
        if self.overlaps.windows(2).any(|w| w[0] && w[1]) {
            return bad("two consecutive overlaps");
        }
        if self.frame_count(world) > world.config.max_frames {
            return bad("exceeds max_frames");
        }
        Ok(())
    }
}

/// Frames shared by two interleaved items.
pub(crate) fn overlap_len(da: usize, db: usize) -> usize {
    da.min(db) / 2
}

/// Draws a valid spec; resamples until it fits in `max_frames`.
pub fn sample_prompt(world: &World, scenario: Scenario, rng: &mut impl Rng) -> PromptSpec {
    loop {
        let spec = draw(world, scenario, rng);
        if spec.frame_count(world) <= world.config.max_frames {
            return spec;
        }
    }
}

fn draw(world: &World, scenario: Scenario, rng: &mut impl Rng) -> PromptSpec {
    let cfg = &world.config;
    let mut events: Vec<u32> = Vec::new();
    let mut payload = Vec::new();
    match scenario {
        Scenario::Sound | Scenario::Composite => {
            let n = rng.gen_range(1..=3);
            events = (0..n).map(|_| rng.gen_range(0..cfg.events as u32)).collect();
        }
        Scenario::Speech => events.push(world.clean_item().0),
    }
    if scenario != Scenario::Sound {
        let n = rng.gen_range(2..=6);
        payload = (0..n).map(|_| rng.gen_range(0..cfg.words as u32)).collect();
    }
    // Eligible pairs: between events, and between the last event and the
    // first word of a composite. Speech is spoken without interruption.
    let n_items = events.len() + payload.len();
    let mut overlaps = vec![false; n_items.saturating_sub(1)];
    if scenario != Scenario::Speech {
        let eligible = if scenario == Scenario::Composite {
            events.len()
        } else {
            events.len() - 1
        };
        for i in 0..eligible {
            let prev = i > 0 && overlaps[i - 1];
            if rng.gen_bool(OVERLAP_P) && !prev {
                overlaps[i] = true;
            }
        }
    }
    PromptSpec {
        scenario,
        events: events
            .into_iter()
            .map(|id| (id, world.duration(ItemId(id))))
            .collect(),
        payload,
        overlaps,
    }
}

/// Templates per scenario. `{E}` expands to the event phrase, `{P}` to the
/// quoted payload.
const SOUND_TEMPLATES: &[&str] = &[
    "{E}",
    "a sound of {E}",
    "you hear {E}",
    "there is {E}",
    "the sound of {E}",
];
const SPEECH_TEMPLATES: &[&str] = &[
    "someone says {P}",
    "a person speaking : {P}",
    "a voice says {P} with no background noise",
    "clean speech : {P}",
    "someone speaking quietly says {P}",
];
const COMPOSITE_TEMPLATES: &[&str] = &[
    "{E} then someone says {P}",
    "{E} followed by a voice : {P}",
    "{E} and then a person says {P}",
    "you hear {E} and a voice says {P}",
    "there is {E} then a person speaking : {P}",
];
/// Composites whose last event runs into the speech.
const OVERLAPPED_COMPOSITE_TEMPLATES: &[&str] = &[
    "{E} while someone says {P}",
    "someone says {P} while {E}",
    "a voice says {P} with {E}",
    "you hear {E} while a person says {P}",
    "there is {E} while a voice says {P}",
];

/// Renders the spec as prompt text and tokenizes it.
///
/// The event phrase joins events with "then" / "followed by" when they are
/// sequential and "while" / "with" when they overlap, so the layout is
/// recoverable from the wording.
pub fn realize_text(world: &World, spec: &PromptSpec, rng: &mut impl Rng) -> Vec<u32> {
    let speech_overlapped = spec.scenario == Scenario::Composite
        && spec.overlaps.get(spec.events.len() - 1) == Some(&true);
    let templates = match spec.scenario {
        Scenario::Sound => SOUND_TEMPLATES,
        Scenario::Speech => SPEECH_TEMPLATES,
        Scenario::Composite if speech_overlapped => OVERLAPPED_COMPOSITE_TEMPLATES,
        Scenario::Composite => COMPOSITE_TEMPLATES,
    };
    let template = templates.choose(rng).expect("templates are nonempty");
    let mut events = String::new();
    for (i, &(id, _)) in spec.events.iter().enumerate() {
        if i > 0 {
            let connective = match (spec.overlaps[i - 1], rng.gen_bool(0.5)) {
                (false, true) => "then",
                (false, false) => "followed by",
                (true, true) => "while",
                (true, false) => "with",
            };
            events.push(' ');
            events.push_str(connective);
            events.push(' ');
        }
        events.push_str(&world.item_name(ItemId(id)));
    }
    let mut payload = String::from("«");
    for &w in &spec.payload {
        payload.push(' ');
        payload.push_str(&world.item_name(world.word_item(w)));
    }
    payload.push_str(" »");
    let text = template.replace("{E}", &events).replace("{P}", &payload);
    world
        .tokenize(&text)
        .expect("templates only use vocabulary words")
}
