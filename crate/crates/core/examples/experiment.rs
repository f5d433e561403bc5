//! Training experiment driver used to size the toy defaults.
//!
//! `cargo run --release --example experiment -- d_model=64 layers=2 epochs=12 lr=2e-3`
//!
//! Unset keys fall back to the library defaults.

use std::time::Instant;

use latent_plan::eval::{evaluate, ScfConfig};
use latent_plan::inference::GenConfig;
use latent_plan::model::{Model, ModelConfig};
use latent_plan::toyworld::{World, WorldConfig};
use latent_plan::training::{CurriculumSchedule, TrainConfig, Trainer, TrainingSet};

fn main() {
    let args: std::collections::HashMap<String, String> = std::env::args()
        .skip(1)
        .filter_map(|a| a.split_once('=').map(|(k, v)| (k.to_string(), v.to_string())))
        .collect();
    let get = |k: &str, d: &str| args.get(k).cloned().unwrap_or_else(|| d.to_string());
    let world = World::build(WorldConfig::default()).unwrap();
    let per: usize = get("per", "1000").parse().unwrap();
    let train = world.make_split("train", [per; 3]).unwrap();
    let test = world.make_split("test", [get("test", "60").parse().unwrap(); 3]).unwrap();
    let (dm, dt) = (ModelConfig::default(), TrainConfig::default());
    let mc = ModelConfig {
        d_model: get("d_model", &dm.d_model.to_string()).parse().unwrap(),
        n_layers: get("layers", &dm.n_layers.to_string()).parse().unwrap(),
        d_ff: get("d_ff", &dm.d_ff.to_string()).parse().unwrap(),
        v_text: world.text_vocab_size() as usize,
        ..ModelConfig::default()
    };
    let epochs: usize = get("epochs", &dt.epochs.to_string()).parse().unwrap();
    let mut tc = TrainConfig {
        epochs,
        lr_peak: get("lr", &dt.lr_peak.to_string()).parse().unwrap(),
        warmup: get("warmup", &dt.warmup.to_string()).parse().unwrap(),
        accumulation: get("acc", &dt.accumulation.to_string()).parse().unwrap(),
        ..TrainConfig::default()
    };
    tc.loss.lambda_latent = get("l1", "1").parse().unwrap();
    let schedule = CurriculumSchedule::by_name(&get("schedule", "constant"), epochs).unwrap();
    let model = Model::new(mc, 0).unwrap();
    println!("params {}", model.param_count());
    let gen = GenConfig::default();
    let scf_cfg = ScfConfig::default();
    let t0 = Instant::now();
    let base = evaluate(&world, &model, &test, &gen, &scf_cfg).unwrap();
    println!("untrained: scf {:?} wer {:?} ({:.1}s)", base.mean_scf(), base.mean_wer(), t0.elapsed().as_secs_f64());
    let set = TrainingSet::new(&model, &train).unwrap();
    let mut t = Trainer::new(model, tc, schedule).unwrap();
    let eval_every: usize = get("eval_every", "0").parse().unwrap();
    let t0 = Instant::now();
    t.run(&set, |tr, m| {
        println!(
            "epoch {} stage {} lat {:.4} aud {:.4} lr {:.2e} {:.1}s (total {:.0}s)",
            m.epoch, m.stage, m.l_latent, m.l_audio, m.lr, m.wall_seconds, t0.elapsed().as_secs_f64()
        );
        if eval_every > 0 && (m.epoch + 1) % eval_every == 0 {
            let r = evaluate(&world, &tr.model, &test, &gen, &scf_cfg).unwrap();
            for s in &r.scenarios {
                println!("  {:?} scf {:?} wer {:?} acc {:.3} fid {:.3} undec {} maxlen {}", s.scenario, s.scf, s.wer, s.token_accuracy, s.latent_fidelity, s.undecodable, s.max_len);
            }
        }
        Ok(())
    })
    .unwrap();
    let t1 = Instant::now();
    let r = evaluate(&world, &t.model, &test, &gen, &scf_cfg).unwrap();
    for s in &r.scenarios {
        println!("  {:?} scf {:?} wer {:?} acc {:.3} fid {:.3} undec {} maxlen {}", s.scenario, s.scf, s.wer, s.token_accuracy, s.latent_fidelity, s.undecodable, s.max_len);
    }
    println!("trained: scf {:?} wer {:?} (eval {:.1}s)", r.mean_scf(), r.mean_wer(), t1.elapsed().as_secs_f64());
}
