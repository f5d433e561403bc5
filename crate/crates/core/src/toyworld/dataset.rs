//! Line-delimited JSON dataset records.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::prompt::{realize_text, sample_prompt};
use super::{PromptSpec, Scenario, SemanticTarget, World};
use crate::error::{Error, Result};
use crate::layout::TokenGrid;
use crate::rng::stream;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub id: String,
    pub scenario: Scenario,
    pub text_token_ids: Vec<u32>,
    pub prompt_spec: PromptSpec,
    pub grid: TokenGrid,
    /// `K × d_sem` pooled targets.
    pub semantic: Vec<Vec<f64>>,
}

impl Record {
    pub fn target(&self) -> SemanticTarget {
        SemanticTarget {
            h: self.semantic.clone(),
        }
    }
}

impl World {
    /// Samples, renders and embeds one record. Each record has its own
    /// stream, so records do not depend on how many precede them.
    pub fn make_record(&self, split: &str, scenario: Scenario, index: usize) -> Result<Record> {
        let mut rng = stream(self.config.seed, &format!("data/{split}/{scenario}/{index}"));
        let spec = sample_prompt(self, scenario, &mut rng);
        let text = realize_text(self, &spec, &mut rng);
        let grid = self.render(&spec)?;
        let semantic = self.oracle_embed(&grid)?.h;
        Ok(Record {
            id: format!("{split}-{}-{index:05}", scenario.name().to_lowercase()),
            scenario,
            text_token_ids: text,
            prompt_spec: spec,
            grid,
            semantic,
        })
    }

    /// Records for one split, `counts` indexed by scenario, scenarios in
    /// declaration order.
    pub fn make_split(&self, split: &str, counts: [usize; 3]) -> Result<Vec<Record>> {
        let mut out = Vec::with_capacity(counts.iter().sum());
        for sc in Scenario::ALL {
            for i in 0..counts[sc.index()] {
                out.push(self.make_record(split, sc, i)?);
            }
        }
        Ok(out)
    }
}

pub fn write_records(path: &Path, records: &[Record]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| Error::Format(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_records(path: &Path) -> Result<Vec<Record>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

/// Hex SHA-256 over the concatenated bytes of the given files.
pub fn dataset_checksum(paths: &[&Path]) -> Result<String> {
    let mut h = Sha256::new();
    for p in paths {
        h.update(std::fs::read(p).map_err(|e| Error::io(*p, e))?);
    }
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}
