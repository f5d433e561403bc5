use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::toyworld::Scenario;

/// Sampling weights (Sound, Speech, Composite) for epochs `start..end`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage {
    pub start: usize,
    pub end: usize,
    pub weights: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurriculumSchedule {
    pub name: String,
    pub stages: Vec<Stage>,
}

/// Reference run length the three-stage boundaries are stated for.
const REFERENCE_EPOCHS: usize = 50;
const BOUNDARIES: [usize; 2] = [10, 25];

const CONSTANT: [[f64; 3]; 3] = [[1.0 / 3.0; 3]; 3];
const GRADUAL: [[f64; 3]; 3] = [[0.40, 0.40, 0.20], [0.40, 0.20, 0.40], [0.25, 0.25, 0.50]];
const DISJOINT: [[f64; 3]; 3] = [[0.50, 0.50, 0.0], [0.50, 0.50, 0.0], [0.0, 0.0, 1.0]];

impl CurriculumSchedule {
    pub const NAMES: [&'static str; 3] = ["constant", "gradual", "disjoint"];

    pub fn constant(total_epochs: usize) -> Self {
        Self::three_stage("constant", CONSTANT, total_epochs)
    }

    pub fn gradual(total_epochs: usize) -> Self {
        Self::three_stage("gradual", GRADUAL, total_epochs)
    }

    pub fn disjoint(total_epochs: usize) -> Self {
        Self::three_stage("disjoint", DISJOINT, total_epochs)
    }

    pub fn by_name(name: &str, total_epochs: usize) -> Result<Self> {
        match name {
            "constant" => Ok(Self::constant(total_epochs)),
            "gradual" => Ok(Self::gradual(total_epochs)),
            "disjoint" => Ok(Self::disjoint(total_epochs)),
            other => Err(Error::contract(format!(
                "unknown schedule `{other}` (expected constant, gradual, disjoint or custom stages)"
            ))),
        }
    }

    pub fn custom(stages: Vec<Stage>) -> Result<Self> {
        let s = CurriculumSchedule {
            name: "custom".into(),
            stages,
        };
        s.validate()?;
        Ok(s)
    }

    /// Stage boundaries `⌊total·10/50⌋` and `⌊total·25/50⌋`.
    fn three_stage(name: &str, weights: [[f64; 3]; 3], total: usize) -> Self {
        let b = BOUNDARIES.map(|e| total * e / REFERENCE_EPOCHS);
        let edges = [0, b[0], b[1], total];
        CurriculumSchedule {
            name: name.into(),
            stages: (0..3)
                .map(|i| Stage {
                    start: edges[i],
                    end: edges[i + 1],
                    weights: weights[i],
                })
                .collect(),
        }
    }

    pub fn total_epochs(&self) -> usize {
        self.stages.last().map_or(0, |s| s.end)
    }

    pub fn validate(&self) -> Result<()> {
        let mut next = 0;
        for (i, s) in self.stages.iter().enumerate() {
            if s.start != next || s.end < s.start {
                return Err(Error::contract(format!(
                    "curriculum stage {i} covers {}..{} but must start at {next}",
                    s.start, s.end
                )));
            }
            let sum: f64 = s.weights.iter().sum();
            if s.weights.iter().any(|w| !(*w >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
                return Err(Error::contract(format!(
                    "curriculum stage {i} weights {:?} must be ≥ 0 and sum to 1",
                    s.weights
                )));
            }
            next = s.end;
        }
        if next == 0 {
            return Err(Error::contract("curriculum covers no epochs"));
        }
        Ok(())
    }

    /// Index of the stage containing `epoch`.
    pub fn stage_at(&self, epoch: usize) -> Result<usize> {
        self.stages
            .iter()
            .position(|s| s.start <= epoch && epoch < s.end)
            .ok_or_else(|| {
                Error::contract(format!(
                    "epoch {epoch} is beyond the {}-epoch schedule",
                    self.total_epochs()
                ))
            })
    }
}

pub fn curriculum_draw(schedule: &CurriculumSchedule, epoch: usize, rng: &mut Rng) -> Result<Scenario> {
    let w = schedule.stages[schedule.stage_at(epoch)?].weights;
    let u: f64 = rng.gen::<f64>() * w.iter().sum::<f64>();
    let mut cum = 0.0;
    let mut last = None;
    for (s, &wi) in Scenario::ALL.iter().zip(&w) {
        if wi > 0.0 {
            cum += wi;
            last = Some(*s);
            if u < cum {
                return Ok(*s);
            }
        }
    }
    last.ok_or_else(|| Error::contract("curriculum stage has no positive weight"))
}
