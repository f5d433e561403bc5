use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{
    audio_loss_node, curriculum_draw, latent_loss_node, lr_at, plan_batches, total_loss, total_loss_node,
    CurriculumSchedule, LossWeights,
};
use crate::error::{Error, Result};
use crate::layout::{delay_encode, frame_sequence, FrameSeq, UnifiedSequence};
use crate::model::Model;
use crate::numerics::checkpoint::{assign_params, load_entries, write_entries};
use crate::numerics::{AdamConfig, AdamState, Gradients, Graph, Tensor};
use crate::rng::stream;
use crate::toyworld::{Record, Scenario};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub loss: LossWeights,
    pub adam: AdamConfig,
    pub lr_peak: f64,
    pub warmup: u64,
    pub floor_factor: f64,
    /// Micro-batches per optimizer step.
    pub accumulation: usize,
    /// Cap on summed sequence positions per micro-batch.
    pub max_batch_bin: usize,
    pub max_batch_size: usize,
    /// Curriculum draws per epoch; `None` means the training-set size.
    pub epoch_size: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            epochs: 30,
            loss: LossWeights::default(),
            adam: AdamConfig::default(),
            lr_peak: 4e-3,
            warmup: 300,
            floor_factor: 0.1,
            accumulation: 2,
            max_batch_bin: 2000,
            max_batch_size: 16,
            epoch_size: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        if !(self.lr_peak > 0.0 && self.lr_peak.is_finite()) {
            return Err(Error::contract("lr_peak must be positive"));
        }
        if self.warmup == 0 || self.accumulation == 0 || self.max_batch_size == 0 || self.epochs == 0 {
            return Err(Error::contract(
                "warmup, accumulation, max_batch_size and epochs must be ≥ 1",
            ));
        }
        if !(0.0..=1.0).contains(&self.floor_factor) {
            return Err(Error::contract("floor_factor must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// One record prepared for the model.
#[derive(Clone, Debug)]
pub struct Example {
    pub id: String,
    pub scenario: Scenario,
    pub sequence: UnifiedSequence,
    /// `[SOT, text.., SOL]`.
    pub prefix: Vec<u32>,
    /// Delayed frame steps followed by the all-PAD stop step.
    pub targets: FrameSeq,
    pub plan: Vec<Vec<f64>>,
}

#[derive(Clone, Debug)]
pub struct TrainingSet {
    pub examples: Vec<Example>,
    by_scenario: [Vec<usize>; 3],
}

impl TrainingSet {
    pub fn new(model: &Model, records: &[Record]) -> Result<Self> {
        let c = &model.config;
        let pad = c.pad();
        let mut examples = Vec::with_capacity(records.len());
        let mut by_scenario: [Vec<usize>; 3] = Default::default();
        for r in records {
            if r.semantic.len() != c.latent_steps || r.semantic.iter().any(|h| h.len() != c.d_sem) {
                return Err(Error::contract(format!(
                    "record {} has a {}-step plan target, model expects {} × {}",
                    r.id,
                    r.semantic.len(),
                    c.latent_steps,
                    c.d_sem
                )));
            }
            let sequence = frame_sequence(&r.text_token_ids, c.latent_steps, &r.grid, pad)?;
            let mut targets = delay_encode(&r.grid, pad)?;
            targets.push_step(&vec![pad; c.codebooks]);
            by_scenario[r.scenario.index()].push(examples.len());
            examples.push(Example {
                id: r.id.clone(),
                scenario: r.scenario,
                sequence,
                prefix: model.prompt_prefix(&r.text_token_ids)?,
                targets,
                plan: r.semantic.clone(),
            });
        }
        Ok(TrainingSet { examples, by_scenario })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }
}

/// Loss values of one record or an average over several.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossValues {
    pub latent: f64,
    pub audio: f64,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub stage: usize,
    pub l_latent: f64,
    pub l_audio: f64,
    pub l_total: f64,
    pub lr: f64,
    pub wall_seconds: f64,
}

impl EpochMetrics {
    pub fn append_jsonl(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        let line = serde_json::to_string(self).map_err(|e| Error::Format(e.to_string()))?;
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))
    }
}

pub struct Trainer {
    pub model: Model,
    pub config: TrainConfig,
    pub schedule: CurriculumSchedule,
    adam: AdamState,
    /// Optimizer steps taken.
    step: u64,
    /// Epochs completed.
    epoch: usize,
}

const STEP_KEY: &str = "train/step";
const EPOCH_KEY: &str = "train/epoch";

impl Trainer {
    pub fn new(model: Model, config: TrainConfig, schedule: CurriculumSchedule) -> Result<Self> {
        config.validate()?;
        schedule.validate()?;
        if schedule.total_epochs() < config.epochs {
            return Err(Error::contract(format!(
                "schedule covers {} epochs, training runs {}",
                schedule.total_epochs(),
                config.epochs
            )));
        }
        let adam = AdamState::new(config.adam, &model.params);
        Ok(Trainer {
            model,
            config,
            schedule,
            adam,
            step: 0,
            epoch: 0,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn epochs_done(&self) -> usize {
        self.epoch
    }

    /// Loss and gradient for one record. With the plan loss switched off the
    /// latent slots are fed the model's own plan instead of the target.
    pub fn record_grad(&self, ex: &Example) -> Result<(LossValues, Gradients)> {
        let w = &self.config.loss;
        let own;
        let plan: &[Vec<f64>] = if w.lambda_latent > 0.0 {
            &ex.plan
        } else {
            own = self.model.predict_plan(&ex.prefix)?;
            &own
        };
        let mut g = Graph::new(&self.model.params);
        let nodes = self.model.build(&mut g, &ex.sequence, plan)?;
        let l_lat = latent_loss_node(&mut g, nodes.latent_pred, &ex.plan, w.lambda_cos)?;
        let l_aud = audio_loss_node(&mut g, nodes.audio_logits, &ex.targets)?;
        let total = total_loss_node(&mut g, l_lat, l_aud, w)?;
        let values = LossValues {
            latent: g.scalar(l_lat),
            audio: g.scalar(l_aud),
            total: g.scalar(total),
        };
        Ok((values, g.backward(total)?))
    }

    /// Mean loss over `batch` without touching the parameters.
    pub fn batch_loss(&self, set: &TrainingSet, batch: &[usize]) -> Result<LossValues> {
        let mut acc = LossValues::default();
        for &i in batch {
            let ex = &set.examples[i];
            let mut g = Graph::new(&self.model.params);
            let nodes = self.model.build(&mut g, &ex.sequence, &ex.plan)?;
            let l = latent_loss_node(&mut g, nodes.latent_pred, &ex.plan, self.config.loss.lambda_cos)?;
            let a = audio_loss_node(&mut g, nodes.audio_logits, &ex.targets)?;
            acc.latent += g.scalar(l);
            acc.audio += g.scalar(a);
        }
        let n = batch.len().max(1) as f64;
        acc.latent /= n;
        acc.audio /= n;
        acc.total = total_loss(acc.latent, acc.audio, &self.config.loss);
        Ok(acc)
    }

    /// One optimizer step over `micro` micro-batches: per-batch mean
    /// gradients averaged over the micro-batches. Returns the summed
    /// per-record losses and the learning rate used.
    pub fn optimizer_step(&mut self, set: &TrainingSet, micro: &[Vec<usize>]) -> Result<(LossValues, f64)> {
        let mut grads = Gradients::empty(&self.model.params);
        let mut sums = LossValues::default();
        let step = self.step + 1;
        for (b, batch) in micro.iter().enumerate() {
            let scale = 1.0 / (batch.len() as f64 * micro.len() as f64);
            for &i in batch {
                let ex = &set.examples[i];
                let (l, g) = self.record_grad(ex)?;
                if !l.total.is_finite() || !g.all_finite() {
                    return Err(Error::NonFiniteLoss {
                        step,
                        batch: b,
                        detail: format!(
                            "record {}: latent {} audio {} total {}",
                            ex.id, l.latent, l.audio, l.total
                        ),
                    });
                }
                grads.accumulate(&g, scale);
                sums.latent += l.latent;
                sums.audio += l.audio;
                sums.total += l.total;
            }
        }
        let c = &self.config;
        let lr = lr_at(step, c.lr_peak, c.warmup, c.floor_factor);
        self.adam.step(&mut self.model.params, &grads, lr);
        self.step = step;
        Ok((sums, lr))
    }

    /// Runs the next epoch.
    pub fn train_epoch(&mut self, set: &TrainingSet) -> Result<EpochMetrics> {
        let start = Instant::now();
        let e = self.epoch;
        if e >= self.config.epochs {
            return Err(Error::contract(format!("training already ran {e} epochs")));
        }
        let stage = self.schedule.stage_at(e)?;
        let mut rng = stream(self.config.seed, &format!("train/epoch/{e}"));

        // Curriculum draws pull from per-scenario pools reshuffled each epoch
        // and cycled when a scenario is drawn more often than it has records.
        let mut pools = set.by_scenario.clone();
        for p in &mut pools {
            p.shuffle(&mut rng);
        }
        let mut cursor = [0usize; 3];
        let n = self.config.epoch_size.unwrap_or(set.len());
        let mut drawn = Vec::with_capacity(n);
        for _ in 0..n {
            let s = curriculum_draw(&self.schedule, e, &mut rng)?.index();
            if pools[s].is_empty() {
                return Err(Error::contract(format!(
                    "curriculum draws {} but the training set has none",
                    Scenario::ALL[s]
                )));
            }
            drawn.push(pools[s][cursor[s] % pools[s].len()]);
            cursor[s] += 1;
        }
        let lens: Vec<(&str, usize)> = drawn
            .iter()
            .map(|&i| (set.examples[i].id.as_str(), set.examples[i].sequence.len()))
            .collect();
        let plan = plan_batches(&lens, self.config.max_batch_bin, self.config.max_batch_size, &mut rng)?;
        let batches: Vec<Vec<usize>> = plan
            .batches
            .iter()
            .map(|b| b.iter().map(|&j| drawn[j]).collect())
            .collect();

        let mut sums = LossValues::default();
        let mut lr = 0.0;
        for group in batches.chunks(self.config.accumulation) {
            let (s, l) = self.optimizer_step(set, group)?;
            sums.latent += s.latent;
            sums.audio += s.audio;
            sums.total += s.total;
            lr = l;
        }
        self.epoch += 1;
        let n = n.max(1) as f64;
        Ok(EpochMetrics {
            epoch: e,
            stage,
            l_latent: sums.latent / n,
            l_audio: sums.audio / n,
            l_total: sums.total / n,
            lr,
            wall_seconds: start.elapsed().as_secs_f64(),
        })
    }

    /// Runs the remaining epochs, calling `on_epoch` after each.
    pub fn run(
        &mut self,
        set: &TrainingSet,
        mut on_epoch: impl FnMut(&Trainer, &EpochMetrics) -> Result<()>,
    ) -> Result<Vec<EpochMetrics>> {
        let mut out = Vec::new();
        while self.epoch < self.config.epochs {
            let m = self.train_epoch(set)?;
            on_epoch(self, &m)?;
            out.push(m);
        }
        Ok(out)
    }

    /// Parameters, Adam moments (`adam/m/<name>`, `adam/v/<name>`) and the
    /// step and epoch counters in one checkpoint file.
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let names: Vec<String> = self.model.params.iter().map(|(_, n, _)| n.to_string()).collect();
        let (m, v) = self.adam.moments();
        let m_names: Vec<String> = names.iter().map(|n| format!("adam/m/{n}")).collect();
        let v_names: Vec<String> = names.iter().map(|n| format!("adam/v/{n}")).collect();
        let step = Tensor::scalar(self.step as f64);
        let epoch = Tensor::scalar(self.epoch as f64);
        let mut entries: Vec<(&str, &Tensor)> = self.model.params.iter().map(|(_, n, t)| (n, t)).collect();
        entries.extend(m_names.iter().map(String::as_str).zip(m));
        entries.extend(v_names.iter().map(String::as_str).zip(v));
        entries.push((STEP_KEY, &step));
        entries.push((EPOCH_KEY, &epoch));
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        write_entries(std::io::BufWriter::new(f), &entries).map_err(|e| Error::io(path, e))
    }

    /// Restores a trainer saved by [`Trainer::save_checkpoint`]. A file with
    /// parameters only starts a fresh optimizer at step 0.
    pub fn resume(mut model: Model, config: TrainConfig, schedule: CurriculumSchedule, path: &Path) -> Result<Self> {
        let entries = load_entries(path)?;
        assign_params(&mut model.params, &entries)?;
        let mut t = Trainer::new(model, config, schedule)?;
        let find = |name: &str| entries.iter().find(|(n, _)| n == name).map(|(_, t)| t);
        let Some(step) = find(STEP_KEY) else {
            return Ok(t);
        };
        let counter = |t: &Tensor, what: &str| -> Result<u64> {
            let v = t.data().first().copied().unwrap_or(-1.0);
            if !(v >= 0.0 && v.fract() == 0.0) {
                return Err(Error::Format(format!("bad {what} counter {v}")));
            }
            Ok(v as u64)
        };
        let step = counter(step, STEP_KEY)?;
        let epoch = counter(
            find(EPOCH_KEY).ok_or_else(|| Error::Format("checkpoint lacks train/epoch".into()))?,
            EPOCH_KEY,
        )? as usize;
        let mut m = Vec::new();
        let mut v = Vec::new();
        for (_, n, _) in t.model.params.iter() {
            let get = |prefix: &str| {
                find(&format!("{prefix}{n}"))
                    .cloned()
                    .ok_or_else(|| Error::Format(format!("checkpoint lacks {prefix}{n}")))
            };
            m.push(get("adam/m/")?);
            v.push(get("adam/v/")?);
        }
        t.adam = AdamState::restore(t.config.adam, step, m, v, &t.model.params)?;
        t.step = step;
        t.epoch = epoch;
        Ok(t)
    }
}
