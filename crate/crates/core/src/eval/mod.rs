//! Metrics over generated grids and their aggregation across strategies.
//!
//! Semantic coverage (SCF) and payload WER are read back from generated
//! grids with the world's exact detector. Classifier-based audio metrics have
//! no counterpart here and are reported as unavailable.

mod metrics;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::{decode_output, generate, GenConfig, Termination};
use crate::layout::{delay_encode, frame_sequence, TokenGrid};
use crate::model::Model;
use crate::rng::derive_seed;
use crate::toyworld::{ItemId, Record, Scenario, World};

pub use metrics::{
    latent_fidelity, levenshtein, normalize_column, payload_wer, scf, MetricTable, Orientation, ScfConfig,
};

/// Metrics that need pretrained audio classifiers.
pub const UNAVAILABLE_METRICS: [&str; 5] = ["FAD", "KL", "IS", "CLAP", "UTMOS"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordResult {
    pub id: String,
    pub scenario: Scenario,
    /// SOUND and COMPOSITE only.
    pub scf: Option<f64>,
    /// SPEECH and COMPOSITE only.
    pub wer: Option<f64>,
    pub token_accuracy: f64,
    pub latent_fidelity: f64,
    pub frames: usize,
    pub termination: Termination,
    pub decodable: bool,
    pub dropped: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioReport {
    pub scenario: Scenario,
    pub records: usize,
    pub scf: Option<f64>,
    pub wer: Option<f64>,
    pub token_accuracy: f64,
    pub latent_fidelity: f64,
    pub undecodable: usize,
    pub max_len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub scenarios: Vec<ScenarioReport>,
    pub records: Vec<RecordResult>,
    pub unavailable: Vec<String>,
}

/// Events whose coverage SCF measures, or `None` for speech.
pub fn gt_events(record: &Record) -> Option<Vec<ItemId>> {
    match record.scenario {
        Scenario::Speech => None,
        _ => Some(record.prompt_spec.events.iter().map(|&(e, _)| ItemId(e)).collect()),
    }
}

/// SCF and payload WER of `grid` as a rendering of `record`.
pub fn score_grid(world: &World, record: &Record, grid: &TokenGrid, cfg: &ScfConfig) -> Result<(Option<f64>, Option<f64>)> {
    let detections = world.detect_events(grid);
    let s = match gt_events(record) {
        Some(gt) => Some(scf(&detections, &gt, |i| world.embedding(i), cfg)?),
        None => None,
    };
    let w = match record.scenario {
        Scenario::Sound => None,
        _ => Some(payload_wer(&world.extract_payload(grid), &record.prompt_spec.payload)?),
    };
    Ok((s, w))
}

/// Scores for a generation that could not be decoded.
fn failed_scores(record: &Record) -> (Option<f64>, Option<f64>) {
    let s = gt_events(record).map(|_| 0.0);
    let w = (record.scenario != Scenario::Sound).then_some(1.0);
    (s, w)
}

/// Fraction of frame and stop cells whose teacher-forced argmax is the target,
/// with the model's own plan in the latent slots.
pub fn token_accuracy(model: &Model, record: &Record) -> Result<f64> {
    let c = &model.config;
    let pad = c.pad();
    let seq = frame_sequence(&record.text_token_ids, c.latent_steps, &record.grid, pad)?;
    let out = model.forward(&seq, None)?;
    let mut targets = delay_encode(&record.grid, pad)?;
    targets.push_step(&vec![pad; c.codebooks]);
    let w = c.head_width();
    let logits = out.audio_logits.data().iter().chain(out.stop_logits.data());
    let rows: Vec<f64> = logits.copied().collect();
    let mut hits = 0;
    for (cell, &t) in targets.flat().iter().enumerate() {
        let row = &rows[cell * w..(cell + 1) * w];
        let best = (0..w).max_by(|&a, &b| row[a].total_cmp(&row[b]).then(b.cmp(&a))).unwrap_or(0);
        hits += usize::from(best == t as usize);
    }
    Ok(hits as f64 / targets.flat().len() as f64)
}

/// Generates, decodes and scores every record.
pub fn evaluate(world: &World, model: &Model, records: &[Record], gen: &GenConfig, cfg: &ScfConfig) -> Result<EvalReport> {
    cfg.validate()?;
    let mut results = Vec::with_capacity(records.len());
    for r in records {
        let g = GenConfig {
            seed: derive_seed(gen.seed, &format!("eval/{}", r.id)),
            ..gen.clone()
        };
        let trace = generate(model, &r.text_token_ids, &g)?;
        let fidelity = latent_fidelity(&trace.latents, &r.semantic)?;
        let (scores, decodable, dropped) = match decode_output(&trace, model.config.codebooks, model.config.pad(), true) {
            Ok(d) => (score_grid(world, r, &d.grid, cfg)?, true, d.dropped),
            Err(Error::MalformedLayout { .. }) => (failed_scores(r), false, 0),
            Err(e) => return Err(e),
        };
        results.push(RecordResult {
            id: r.id.clone(),
            scenario: r.scenario,
            scf: scores.0,
            wer: scores.1,
            token_accuracy: token_accuracy(model, r)?,
            latent_fidelity: fidelity,
            frames: trace.frames.len(),
            termination: trace.termination,
            decodable,
            dropped,
        });
    }
    Ok(EvalReport::from_records(results))
}

/// Scores the dataset's own grids: the upper bound every metric can reach.
pub fn evaluate_ground_truth(world: &World, records: &[Record], cfg: &ScfConfig) -> Result<EvalReport> {
    let mut results = Vec::with_capacity(records.len());
    for r in records {
        let (s, w) = score_grid(world, r, &r.grid, cfg)?;
        results.push(RecordResult {
            id: r.id.clone(),
            scenario: r.scenario,
            scf: s,
            wer: w,
            token_accuracy: 1.0,
            latent_fidelity: 1.0,
            frames: r.grid.n(),
            termination: Termination::Eoa,
            decodable: true,
            dropped: 0,
        });
    }
    Ok(EvalReport::from_records(results))
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

impl EvalReport {
    pub fn from_records(records: Vec<RecordResult>) -> Self {
        let scenarios = Scenario::ALL
            .iter()
            .filter_map(|&sc| {
                let rs: Vec<&RecordResult> = records.iter().filter(|r| r.scenario == sc).collect();
                if rs.is_empty() {
                    return None;
                }
                Some(ScenarioReport {
                    scenario: sc,
                    records: rs.len(),
                    scf: mean(rs.iter().filter_map(|r| r.scf)),
                    wer: mean(rs.iter().filter_map(|r| r.wer)),
                    token_accuracy: mean(rs.iter().map(|r| r.token_accuracy)).unwrap_or(0.0),
                    latent_fidelity: mean(rs.iter().map(|r| r.latent_fidelity)).unwrap_or(0.0),
                    undecodable: rs.iter().filter(|r| !r.decodable).count(),
                    max_len: rs.iter().filter(|r| r.termination == Termination::MaxLen).count(),
                })
            })
            .collect();
        EvalReport {
            scenarios,
            records,
            unavailable: UNAVAILABLE_METRICS.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn scenario(&self, sc: Scenario) -> Option<&ScenarioReport> {
        self.scenarios.iter().find(|s| s.scenario == sc)
    }

    /// Mean SCF over every record that has one.
    pub fn mean_scf(&self) -> Option<f64> {
        mean(self.records.iter().filter_map(|r| r.scf))
    }

    /// Mean payload WER over every record that has one.
    pub fn mean_wer(&self) -> Option<f64> {
        mean(self.records.iter().filter_map(|r| r.wer))
    }

    /// Adds this report's per-scenario metrics to `table` under `strategy`.
    pub fn fill_table(&self, table: &mut MetricTable, strategy: &str) -> Result<()> {
        table.declare("scf", Orientation::HigherBetter);
        table.declare("wer", Orientation::LowerBetter);
        table.declare("token_accuracy", Orientation::HigherBetter);
        for s in &self.scenarios {
            if let Some(v) = s.scf {
                table.insert(strategy, s.scenario, "scf", v)?;
            }
            if let Some(v) = s.wer {
                table.insert(strategy, s.scenario, "wer", v)?;
            }
            table.insert(strategy, s.scenario, "token_accuracy", s.token_accuracy)?;
        }
        Ok(())
    }

    /// `scenario,records,scf,wer,token_accuracy,latent_fidelity,undecodable,max_len`.
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |x| x.to_string());
        let mut out = String::from("scenario,records,scf,wer,token_accuracy,latent_fidelity,undecodable,max_len\n");
        for s in &self.scenarios {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                s.scenario,
                s.records,
                opt(s.scf),
                opt(s.wer),
                s.token_accuracy,
                s.latent_fidelity,
                s.undecodable,
                s.max_len
            ));
        }
        out
    }

    /// Writes `report.json` and `report.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))?;
        let p = dir.join("report.json");
        std::fs::write(&p, json).map_err(|e| Error::io(&p, e))?;
        let p = dir.join("report.csv");
        std::fs::write(&p, self.to_csv()).map_err(|e| Error::io(&p, e))
    }
}
