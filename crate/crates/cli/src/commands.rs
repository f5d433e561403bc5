//! Command bodies. Each writes its artifacts plus a `config.toml` echo into
//! its output directory; JSON artifacts also embed the config.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use latent_plan::eval::{evaluate, EvalReport, MetricTable, ScfConfig};
use latent_plan::inference::{decode_output, generate};
use latent_plan::model::Model;
use latent_plan::numerics::checkpoint::{assign_params, load_entries};
use latent_plan::toyworld::{dataset_checksum, read_records, write_records, Record, Scenario, World};
use latent_plan::training::{Trainer, TrainingSet};
use serde::Serialize;

use crate::config::RunConfig;
use crate::verify::run_all;

#[derive(Debug)]
pub struct VerificationFailed(pub String);

impl std::fmt::Display for VerificationFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "verification failed: {}", self.0)
    }
}

impl std::error::Error for VerificationFailed {}

fn prepare_out(cfg: &RunConfig, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let p = out.join("config.toml");
    std::fs::write(&p, cfg.to_toml()).with_context(|| format!("writing {}", p.display()))
}

fn write_json<T: Serialize>(path: &Path, cfg: &RunConfig, key: &str, value: &T) -> Result<()> {
    let mut doc = serde_json::Map::new();
    doc.insert("config".into(), serde_json::to_value(cfg)?);
    doc.insert(key.into(), serde_json::to_value(value)?);
    let text = serde_json::to_string_pretty(&doc)?;
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn require(path: &Path, what: &str) -> Result<()> {
    if !path.exists() {
        bail!("{what} not found: {}", path.display());
    }
    Ok(())
}

fn load_world(cfg: &RunConfig) -> Result<World> {
    let p = cfg.data_dir.join("world.json");
    require(&p, "world file")?;
    Ok(World::load(&p)?)
}

fn load_split(cfg: &RunConfig, split: &str) -> Result<Vec<Record>> {
    let p = cfg.data_dir.join(format!("{split}.jsonl"));
    require(&p, "dataset split")?;
    Ok(read_records(&p)?)
}

/// Builds the configured model and overwrites its weights from `checkpoint`.
pub fn load_model(cfg: &RunConfig, world: &World, checkpoint: &Path) -> Result<Model> {
    require(checkpoint, "checkpoint")?;
    let mut model = Model::new(cfg.model_config(world), cfg.model_seed())?;
    let entries = load_entries(checkpoint)?;
    assign_params(&mut model.params, &entries)
        .with_context(|| format!("loading {} into the configured model", checkpoint.display()))?;
    Ok(model)
}

#[derive(Serialize)]
struct DatasetManifest {
    counts: BTreeMap<String, BTreeMap<String, usize>>,
    checksum: String,
}

fn count_by_scenario(records: &[Record]) -> BTreeMap<String, usize> {
    Scenario::ALL
        .iter()
        .map(|&sc| (sc.to_string(), records.iter().filter(|r| r.scenario == sc).count()))
        .collect()
}

/// Writes `world.json`, `train.jsonl`, `test.jsonl` and `dataset.json`.
/// Returns the dataset checksum.
pub fn gen_data(cfg: &RunConfig, out: &Path) -> Result<String> {
    prepare_out(cfg, out)?;
    let world = World::build(cfg.world_config())?;
    let world_path = out.join("world.json");
    world.save(&world_path)?;
    let mut counts = BTreeMap::new();
    let mut paths = vec![world_path];
    for (split, n) in [("train", cfg.train_counts), ("test", cfg.test_counts)] {
        let records = world.make_split(split, n)?;
        let p = out.join(format!("{split}.jsonl"));
        write_records(&p, &records)?;
        println!("{split}: {} records {:?}", records.len(), count_by_scenario(&records));
        counts.insert(split.to_string(), count_by_scenario(&records));
        paths.push(p);
    }
    let refs: Vec<&Path> = paths.iter().map(PathBuf::as_path).collect();
    let checksum = dataset_checksum(&refs)?;
    println!("checksum {checksum}");
    write_json(&out.join("dataset.json"), cfg, "dataset", &DatasetManifest { counts, checksum: checksum.clone() })?;
    Ok(checksum)
}

/// Trains from `data_dir`, writing `metrics.jsonl`, `epoch_NNN.lpck` after
/// every epoch and `last.lpck`. `resume` continues from a saved checkpoint.
pub fn train(cfg: &RunConfig, out: &Path, resume: Option<&Path>) -> Result<()> {
    let world = load_world(cfg)?;
    let records = load_split(cfg, "train")?;
    let schedule = cfg.schedule()?;
    let model = Model::new(cfg.model_config(&world), cfg.model_seed())?;
    let set = TrainingSet::new(&model, &records)?;
    let mut trainer = match resume {
        Some(p) => {
            require(p, "checkpoint")?;
            Trainer::resume(model, cfg.train_config(), schedule, p)?
        }
        None => Trainer::new(model, cfg.train_config(), schedule)?,
    };
    prepare_out(cfg, out)?;
    let metrics = out.join("metrics.jsonl");
    if resume.is_none() && metrics.exists() {
        std::fs::remove_file(&metrics).with_context(|| format!("clearing {}", metrics.display()))?;
    }
    println!(
        "training {} parameters on {} records, schedule {}, epochs {}..{}",
        trainer.model.param_count(),
        set.len(),
        trainer.schedule.name,
        trainer.epochs_done(),
        cfg.epochs
    );
    let mut stage = None;
    trainer.run(&set, |t, m| {
        if stage != Some(m.stage) {
            let s = &t.schedule.stages[m.stage];
            println!(
                "stage {} from epoch {} (epochs {}..{}), weights sound {:.2} speech {:.2} composite {:.2}",
                m.stage + 1,
                m.epoch,
                s.start,
                s.end,
                s.weights[0],
                s.weights[1],
                s.weights[2]
            );
            stage = Some(m.stage);
        }
        println!(
            "epoch {} latent {:.5} audio {:.5} total {:.5} lr {:.3e} ({:.1}s)",
            m.epoch, m.l_latent, m.l_audio, m.l_total, m.lr, m.wall_seconds
        );
        m.append_jsonl(&metrics)?;
        t.save_checkpoint(&out.join(format!("epoch_{:03}.lpck", m.epoch + 1)))?;
        t.save_checkpoint(&out.join("last.lpck"))
    })?;
    Ok(())
}

/// Generates from a prompt and writes `trace.json` and `decoded.txt`.
pub fn generate_cmd(cfg: &RunConfig, checkpoint: &Path, prompt: &str, out: &Path) -> Result<()> {
    let world = load_world(cfg)?;
    let text = world.tokenize(prompt)?;
    let model = load_model(cfg, &world, checkpoint)?;
    let trace = generate(&model, &text, &cfg.gen_config())?;
    prepare_out(cfg, out)?;
    write_json(&out.join("trace.json"), cfg, "trace", &trace)?;

    let mut dump = format!("prompt: {prompt}\ntermination: {:?}\nsteps: {}\n", trace.termination, trace.frames.len());
    match decode_output(&trace, model.config.codebooks, model.config.pad(), true) {
        Ok(d) => {
            dump.push_str(&format!("frames: {} (dropped {})\nevents:\n", d.grid.n(), d.dropped));
            for det in world.detect_events(&d.grid) {
                dump.push_str(&format!(
                    "  {} frames {}..{} confidence {:.3}\n",
                    world.item_name(det.label),
                    det.span.0,
                    det.span.1,
                    det.confidence
                ));
            }
            let payload = world.extract_payload(&d.grid);
            let words: Vec<String> = payload.iter().map(|&w| world.item_name(world.word_item(w))).collect();
            dump.push_str(&format!("payload: {}\n", words.join(" ")));
        }
        Err(e) => dump.push_str(&format!("undecodable: {e}\n")),
    }
    let p = out.join("decoded.txt");
    std::fs::write(&p, &dump).with_context(|| format!("writing {}", p.display()))?;
    print!("{dump}");
    Ok(())
}

fn print_report(name: &str, r: &EvalReport) {
    for s in &r.scenarios {
        let opt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"));
        println!(
            "{name} {:<9} n {:>4} scf {:>6} wer {:>6} token_acc {:.4} fidelity {:.4} undecodable {} max_len {}",
            s.scenario.to_string(),
            s.records,
            opt(s.scf),
            opt(s.wer),
            s.token_accuracy,
            s.latent_fidelity,
            s.undecodable,
            s.max_len
        );
    }
}

fn eval_one(cfg: &RunConfig, world: &World, records: &[Record], checkpoint: &Path, out: &Path) -> Result<EvalReport> {
    let model = load_model(cfg, world, checkpoint)?;
    let report = evaluate(world, &model, records, &cfg.gen_config(), &ScfConfig::default())?;
    prepare_out(cfg, out)?;
    write_json(&out.join("report.json"), cfg, "report", &report)?;
    let p = out.join("report.csv");
    std::fs::write(&p, report.to_csv()).with_context(|| format!("writing {}", p.display()))?;
    Ok(report)
}

/// Evaluates one checkpoint, or several `name=path` strategies plus their
/// normalised-score table.
pub fn eval_cmd(cfg: &RunConfig, checkpoint: Option<&Path>, strategies: &[String], split: &str, out: &Path) -> Result<()> {
    let world = load_world(cfg)?;
    let records = load_split(cfg, split)?;
    let mut runs: Vec<(String, PathBuf)> = Vec::new();
    if let Some(c) = checkpoint {
        runs.push(("model".into(), c.to_path_buf()));
    }
    for s in strategies {
        let Some((name, path)) = s.split_once('=') else {
            bail!("strategy `{s}` must be given as name=checkpoint");
        };
        runs.push((name.to_string(), PathBuf::from(path)));
    }
    if runs.is_empty() {
        bail!("eval needs --checkpoint or --strategies");
    }
    if runs.len() == 1 && strategies.is_empty() {
        let r = eval_one(cfg, &world, &records, &runs[0].1, out)?;
        print_report(&runs[0].0, &r);
        return Ok(());
    }
    prepare_out(cfg, out)?;
    let mut table = MetricTable::new();
    for (name, path) in &runs {
        let r = eval_one(cfg, &world, &records, path, &out.join(name))?;
        print_report(name, &r);
        r.fill_table(&mut table, name)?;
    }
    let p = out.join("table.csv");
    std::fs::write(&p, table.to_csv()).with_context(|| format!("writing {}", p.display()))?;
    let mut norm = String::from("strategy,scenario,normalized_score\n");
    for sc in Scenario::ALL {
        let Ok(scores) = table.normalized_score(sc) else {
            continue;
        };
        for (s, v) in scores {
            println!("normalized {sc} {s} {v:.4}");
            norm.push_str(&format!("{s},{sc},{v}\n"));
        }
    }
    let p = out.join("normalized.csv");
    std::fs::write(&p, norm).with_context(|| format!("writing {}", p.display()))
}

/// Runs the property suites, printing one timed line per suite.
pub fn verify_cmd(inject_fault: bool) -> Result<()> {
    let outcomes = run_all(inject_fault);
    let mut first = None;
    for o in &outcomes {
        match &o.result {
            Ok(()) => println!("{:<11} pass {:>7.2}s", o.name, o.seconds),
            Err(e) => {
                println!("{:<11} FAIL {:>7.2}s  {e}", o.name, o.seconds);
                first.get_or_insert_with(|| format!("{}: {e}", o.name));
            }
        }
    }
    let total: f64 = outcomes.iter().map(|o| o.seconds).sum();
    println!("total {total:.2}s");
    match first {
        Some(f) => Err(VerificationFailed(f).into()),
        None => Ok(()),
    }
}
