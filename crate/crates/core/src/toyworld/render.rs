use serde::{Deserialize, Serialize};

use super::prompt::overlap_len;
use super::{ItemId, ItemKind, PromptSpec, World};
use crate::error::{Error, Result};
use crate::layout::{Token, TokenGrid};

/// Pooled semantic targets, one `d_sem` vector per latent step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SemanticTarget {
    pub h: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub label: ItemId,
    /// Distinct motif frames observed over motif length.
    pub confidence: f64,
    /// Half-open frame span `[start, end)`.
    pub span: (usize, usize),
}

impl World {
    /// Lays out the spec's items as motif frames.
    ///
    /// Interleaved pairs share `min(da, db) / 2` frames: the tail of the first
    /// item alternates frame by frame with the head of the second.
    pub fn render(&self, spec: &PromptSpec) -> Result<TokenGrid> {
        spec.validate(self)?;
        let items = spec.items(self);
        let mut rows: Vec<Vec<Token>> = Vec::with_capacity(spec.frame_count(self));
        let mut start = 0;
        for (i, &a) in items.iter().enumerate() {
            let da = self.duration(a);
            match spec.overlaps.get(i) {
                Some(true) => {
                    let b = items[i + 1];
                    let ov = overlap_len(da, self.duration(b));
                    rows.extend((start..da - ov).map(|j| self.motif_frame(a, j)));
                    for k in 0..ov {
                        rows.push(self.motif_frame(a, da - ov + k));
                        rows.push(self.motif_frame(b, k));
                    }
                    start = ov;
                }
                _ => {
                    rows.extend((start..da).map(|j| self.motif_frame(a, j)));
                    start = 0;
                }
            }
        }
        TokenGrid::from_rows(self.config.codebooks, self.config.codebook_vocab, &rows)
    }

    /// Segment-wise mean of per-frame item embeddings.
    ///
    /// Segment `i` covers frames `⌊iN/K⌋ .. ⌊(i+1)N/K⌋`; an empty segment
    /// pools to the zero vector.
    pub fn oracle_embed(&self, grid: &TokenGrid) -> Result<SemanticTarget> {
        let (n, k, d) = (grid.n(), self.config.latent_steps, self.config.d_sem);
        let items = grid
            .rows()
            .map(|row| {
                self.invert_frame(row)
                    .map(|(item, _)| item)
                    .ok_or_else(|| Error::Inversion(row.to_vec()))
            })
            .collect::<Result<Vec<_>>>()?;
        let h = (0..k)
            .map(|i| {
                let (lo, hi) = (i * n / k, (i + 1) * n / k);
                let mut acc = vec![0.0; d];
                for &item in &items[lo..hi] {
                    for (a, e) in acc.iter_mut().zip(self.embedding(item)) {
                        *a += e;
                    }
                }
                if hi > lo {
                    acc.iter_mut().for_each(|a| *a /= (hi - lo) as f64);
                }
                acc
            })
            .collect();
        Ok(SemanticTarget { h })
    }

    /// Groups invertible frames into item instances.
    ///
    /// A frame `(item, j)` at position `p` extends an open group of the same
    /// item whose last frame `(j', p')` satisfies `0 < j − j' ≤ 2` (one missing
    /// motif frame tolerated) and `p − p' ≤ 2(j − j')` (room for one
    /// interleaved partner per step). Uninvertible frames are noise.
    pub fn detect_events(&self, grid: &TokenGrid) -> Vec<Detection> {
        struct Group {
            item: ItemId,
            first: usize,
            last_p: usize,
            last_j: usize,
            seen: usize,
        }
        let mut groups: Vec<Group> = Vec::new();
        for (p, row) in grid.rows().enumerate() {
            let Some((item, j)) = self.invert_frame(row) else {
                continue;
            };
            let best = groups
                .iter_mut()
                .filter(|g| {
                    g.item == item
                        && j > g.last_j
                        && j - g.last_j <= 2
                        && p - g.last_p <= 2 * (j - g.last_j)
                })
                .min_by_key(|g| (j - g.last_j, p - g.last_p));
            match best {
                Some(g) => {
                    g.last_j = j;
                    g.last_p = p;
                    g.seen += 1;
                }
                None => groups.push(Group {
                    item,
                    first: p,
                    last_p: p,
                    last_j: j,
                    seen: 1,
                }),
            }
        }
        // Groups are created in order of their first frame.
        groups
            .into_iter()
            .map(|g| Detection {
                label: g.item,
                confidence: g.seen as f64 / self.duration(g.item) as f64,
                span: (g.first, g.last_p + 1),
            })
            .collect()
    }

    /// Word indices of the word detections, in order of appearance.
    pub fn extract_payload(&self, grid: &TokenGrid) -> Vec<u32> {
        self.detect_events(grid)
            .into_iter()
            .filter_map(|d| match self.kind(d.label) {
                ItemKind::Word(w) => Some(w),
                _ => None,
            })
            .collect()
    }
}
