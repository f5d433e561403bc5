//! Sequence plumbing: the delayed multi-codebook interleaving pattern and the
//! unified `[SOT, text, SOL, latents, SOA, frames, EOA]` framing.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Token = u32;

/// `N × Q` matrix of codebook tokens, each in `[0, vocab)`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenGrid {
    n: usize,
    q: usize,
    vocab: u32,
    tokens: Vec<Token>,
}

impl TokenGrid {
    pub fn new(n: usize, q: usize, vocab: u32, tokens: Vec<Token>) -> Result<Self> {
        if q == 0 {
            return Err(Error::contract("a token grid needs at least one codebook"));
        }
        if tokens.len() != n * q {
            return Err(Error::Dimension {
                op: "token_grid",
                left: vec![n, q],
                right: vec![tokens.len()],
            });
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= vocab) {
            return Err(Error::Index {
                what: "codebook token",
                index: bad as usize,
                bound: vocab as usize,
            });
        }
        Ok(TokenGrid { n, q, vocab, tokens })
    }

    pub fn from_rows(q: usize, vocab: u32, rows: &[Vec<Token>]) -> Result<Self> {
        if rows.iter().any(|r| r.len() != q) {
            return Err(Error::contract("grid rows must have Q tokens"));
        }
        TokenGrid::new(rows.len(), q, vocab, rows.concat())
    }

    pub fn empty(q: usize, vocab: u32) -> Self {
        TokenGrid {
            n: 0,
            q,
            vocab,
            tokens: Vec::new(),
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn q(&self) -> usize {
        self.q
    }

    pub fn vocab(&self) -> u32 {
        self.vocab
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    /// 0-based frame `n`.
    pub fn row(&self, n: usize) -> &[Token] {
        &self.tokens[n * self.q..(n + 1) * self.q]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[Token]> {
        self.tokens.chunks(self.q)
    }

    pub fn get(&self, n: usize, q: usize) -> Token {
        self.tokens[n * self.q + q]
    }
}

/// Delay-interleaved steps; each step holds one token (or pad) per codebook.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameSeq {
    q: usize,
    steps: Vec<Token>,
}

impl FrameSeq {
    pub fn new(q: usize, steps: Vec<Token>) -> Result<Self> {
        if q == 0 || steps.len() % q != 0 {
            return Err(Error::Dimension {
                op: "frame_seq",
                left: vec![q],
                right: vec![steps.len()],
            });
        }
        Ok(FrameSeq { q, steps })
    }

    pub fn from_steps(q: usize, steps: &[Vec<Token>]) -> Result<Self> {
        if steps.iter().any(|s| s.len() != q) {
            return Err(Error::contract("frame steps must have Q entries"));
        }
        FrameSeq::new(q, steps.concat())
    }

    pub fn q(&self) -> usize {
        self.q
    }

    pub fn len(&self) -> usize {
        self.steps.len() / self.q
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// 0-based step `t`.
    pub fn step(&self, t: usize) -> &[Token] {
        &self.steps[t * self.q..(t + 1) * self.q]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[Token]> {
        self.steps.chunks(self.q)
    }

    pub fn flat(&self) -> &[Token] {
        &self.steps
    }

    pub fn push_step(&mut self, step: &[Token]) {
        assert_eq!(step.len(), self.q);
        self.steps.extend_from_slice(step);
    }

    pub fn truncate(&mut self, len: usize) {
        self.steps.truncate(len * self.q);
    }
}

/// Encoded length for `n` frames and `q` codebooks; an empty grid encodes to
/// an empty sequence.
pub fn delayed_len(n: usize, q: usize) -> usize {
    if n == 0 {
        0
    } else {
        n + q - 1
    }
}

/// Step `t` (1-based) of codebook `q` (1-based) holds frame `t − (q − 1)`.
pub fn delay_encode(grid: &TokenGrid, pad: Token) -> Result<FrameSeq> {
    if pad < grid.vocab() {
        return Err(Error::contract(format!(
            "pad id {pad} collides with the codebook vocabulary (< {})",
            grid.vocab()
        )));
    }
    let (n, q) = (grid.n(), grid.q());
    let t_len = delayed_len(n, q);
    let mut steps = vec![pad; t_len * q];
    for frame in 0..n {
        for c in 0..q {
            steps[(frame + c) * q + c] = grid.get(frame, c);
        }
    }
    Ok(FrameSeq { q, steps })
}

/// Inverse of [`delay_encode`]; the decoded grid uses `pad` as its vocabulary
/// bound, so every interior token must be below it.
pub fn delay_decode(frames: &FrameSeq, q: usize, pad: Token) -> Result<TokenGrid> {
    if frames.q() != q {
        return Err(Error::Dimension {
            op: "delay_decode",
            left: vec![frames.q()],
            right: vec![q],
        });
    }
    let t_len = frames.len();
    if t_len == 0 {
        return Ok(TokenGrid::empty(q, pad));
    }
    if t_len < q {
        return Err(Error::MalformedLayout {
            t: t_len,
            q,
            reason: "sequence shorter than the delay triangle",
        });
    }
    let n = t_len + 1 - q;
    let mut tokens = vec![0; n * q];
    for t in 0..t_len {
        for c in 0..q {
            let tok = frames.step(t)[c];
            let interior = t >= c && t - c < n;
            if interior {
                if tok >= pad {
                    return Err(Error::MalformedLayout {
                        t: t + 1,
                        q: c + 1,
                        reason: if tok == pad { "pad inside the grid" } else { "token outside vocabulary" },
                    });
                }
                tokens[(t - c) * q + c] = tok;
            } else if tok != pad {
                return Err(Error::MalformedLayout {
                    t: t + 1,
                    q: c + 1,
                    reason: "token in a pad corner",
                });
            }
        }
    }
    TokenGrid::new(n, q, pad, tokens)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Marker {
    Sot,
    Sol,
    Soa,
    Eoa,
}

/// Text-vocabulary ids of the four markers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MarkerIds {
    pub sot: u32,
    pub sol: u32,
    pub soa: u32,
    pub eoa: u32,
}

impl MarkerIds {
    /// The markers occupy the last four ids of a text vocabulary of size `v_text`.
    pub fn reserved_tail(v_text: u32) -> Self {
        assert!(v_text >= 4);
        MarkerIds {
            sot: v_text - 4,
            sol: v_text - 3,
            soa: v_text - 2,
            eoa: v_text - 1,
        }
    }

    pub fn id(&self, m: Marker) -> u32 {
        match m {
            Marker::Sot => self.sot,
            Marker::Sol => self.sol,
            Marker::Soa => self.soa,
            Marker::Eoa => self.eoa,
        }
    }

    pub fn is_marker(&self, id: u32) -> bool {
        [self.sot, self.sol, self.soa, self.eoa].contains(&id)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SegmentTag {
    Text,
    Latent,
    Audio,
    Special,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Position {
    Marker(Marker),
    Text(u32),
    /// 0-based latent slot index.
    Latent(usize),
    Frame(Vec<Token>),
}

impl Position {
    pub fn tag(&self) -> SegmentTag {
        match self {
            Position::Marker(_) => SegmentTag::Special,
            Position::Text(_) => SegmentTag::Text,
            Position::Latent(_) => SegmentTag::Latent,
            Position::Frame(_) => SegmentTag::Audio,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnifiedSequence {
    positions: Vec<Position>,
}

/// Position indices of the markers in a well-formed sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SegmentOffsets {
    pub sot: usize,
    pub sol: usize,
    pub soa: usize,
    pub eoa: usize,
}

impl SegmentOffsets {
    pub fn text_len(&self) -> usize {
        self.sol - self.sot - 1
    }

    pub fn latent_slots(&self) -> usize {
        self.soa - self.sol - 1
    }

    pub fn frame_steps(&self) -> usize {
        self.eoa - self.soa - 1
    }
}

impl UnifiedSequence {
    pub fn from_positions(positions: Vec<Position>) -> Self {
        UnifiedSequence { positions }
    }

    pub fn positions(&self) -> &[Position] {
        &self.positions
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn tags(&self) -> Vec<SegmentTag> {
        self.positions.iter().map(Position::tag).collect()
    }

    /// Validates the marker structure and returns marker offsets.
    pub fn offsets(&self) -> Result<SegmentOffsets> {
        let find = |m: Marker| -> Result<usize> {
            let mut hits = self
                .positions
                .iter()
                .enumerate()
                .filter(|(_, p)| **p == Position::Marker(m))
                .map(|(i, _)| i);
            let first = hits
                .next()
                .ok_or_else(|| Error::MalformedSequence(format!("missing {m:?} marker")))?;
            if hits.next().is_some() {
                return Err(Error::MalformedSequence(format!("duplicate {m:?} marker")));
            }
            Ok(first)
        };
        let off = SegmentOffsets {
            sot: find(Marker::Sot)?,
            sol: find(Marker::Sol)?,
            soa: find(Marker::Soa)?,
            eoa: find(Marker::Eoa)?,
        };
        if !(off.sot == 0 && off.sot < off.sol && off.sol < off.soa && off.soa < off.eoa) {
            return Err(Error::MalformedSequence(format!("markers out of order: {off:?}")));
        }
        if off.eoa + 1 != self.positions.len() {
            return Err(Error::MalformedSequence("content after EOA".into()));
        }
        let segment_ok = |range: std::ops::Range<usize>, tag: SegmentTag| {
            self.positions[range].iter().all(|p| p.tag() == tag)
        };
        if !segment_ok(off.sot + 1..off.sol, SegmentTag::Text)
            || !segment_ok(off.sol + 1..off.soa, SegmentTag::Latent)
            || !segment_ok(off.soa + 1..off.eoa, SegmentTag::Audio)
        {
            return Err(Error::MalformedSequence("segment holds a foreign position".into()));
        }
        Ok(off)
    }
}

/// Emits `[SOT, text, SOL, K latent slots, SOA, delayed frames, EOA]`.
pub fn frame_sequence(text: &[u32], latent_slots: usize, grid: &TokenGrid, pad: Token) -> Result<UnifiedSequence> {
    if latent_slots == 0 {
        return Err(Error::contract("at least one latent slot is required"));
    }
    if text.is_empty() {
        return Err(Error::contract("text prefix must be nonempty"));
    }
    let frames = delay_encode(grid, pad)?;
    let mut positions = Vec::with_capacity(text.len() + latent_slots + frames.len() + 4);
    positions.push(Position::Marker(Marker::Sot));
    positions.extend(text.iter().map(|&t| Position::Text(t)));
    positions.push(Position::Marker(Marker::Sol));
    positions.extend((0..latent_slots).map(Position::Latent));
    positions.push(Position::Marker(Marker::Soa));
    positions.extend(frames.iter().map(|s| Position::Frame(s.to_vec())));
    positions.push(Position::Marker(Marker::Eoa));
    Ok(UnifiedSequence { positions })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitSequence {
    pub text: Vec<u32>,
    /// Position range of the latent slots.
    pub latent_span: std::ops::Range<usize>,
    pub grid: TokenGrid,
}

/// Inverse of [`frame_sequence`]; `latent_slots` is the declared K.
pub fn split_sequence(s: &UnifiedSequence, latent_slots: usize, q: usize, pad: Token) -> Result<SplitSequence> {
    let off = s.offsets()?;
    if off.latent_slots() != latent_slots {
        return Err(Error::MalformedSequence(format!(
            "expected {latent_slots} latent slots, found {}",
            off.latent_slots()
        )));
    }
    for (k, p) in s.positions()[off.sol + 1..off.soa].iter().enumerate() {
        if *p != Position::Latent(k) {
            return Err(Error::MalformedSequence(format!("latent slot {k} out of order")));
        }
    }
    let text = s.positions()[off.sot + 1..off.sol]
        .iter()
        .map(|p| match p {
            Position::Text(t) => *t,
            _ => unreachable!("validated by offsets()"),
        })
        .collect();
    let mut flat = Vec::with_capacity(off.frame_steps() * q);
    for p in &s.positions()[off.soa + 1..off.eoa] {
        match p {
            Position::Frame(f) if f.len() == q => flat.extend_from_slice(f),
            _ => return Err(Error::MalformedSequence("frame with wrong codebook count".into())),
        }
    }
    let frames = FrameSeq::new(q, flat)?;
    Ok(SplitSequence {
        text,
        latent_span: off.sol + 1..off.soa,
        grid: delay_decode(&frames, q, pad)?,
    })
}
