use proptest::prelude::*;
use rand::{Rng as _, SeedableRng};

use super::*;
use crate::testutil::{tiny_model, tiny_world};
use crate::numerics::softmax_rows;
use crate::rng::{stream, Rng};
use crate::toyworld::{Record, Scenario, World};

// ---- losses --------------------------------------------------------------

#[test]
fn latent_loss_hand_values() {
    let t = vec![vec![1.0, 0.0]];
    assert_eq!(latent_loss(&t, &t, 1.0).unwrap(), 0.0);
    let orth = latent_loss(&[vec![0.0, 1.0]], &t, 1.0).unwrap();
    assert!((orth - 2.0).abs() < 1e-12, "{orth}");
    let anti = latent_loss(&[vec![-1.0, 0.0]], &t, 1.0).unwrap();
    assert!((anti - 4.0).abs() < 1e-12, "{anti}");
    // Mean over K: one matching row and one antipodal row.
    let two = latent_loss(&[vec![1.0, 0.0], vec![-1.0, 0.0]], &[vec![1.0, 0.0], vec![1.0, 0.0]], 1.0).unwrap();
    assert!((two - 2.0).abs() < 1e-12, "{two}");
}

#[test]
fn latent_loss_rejects_shape_mismatch() {
    let e = latent_loss(&[vec![1.0, 0.0]], &[vec![1.0, 0.0, 0.0]], 1.0).unwrap_err();
    assert!(matches!(e, crate::Error::Dimension { .. }));
    let e = latent_loss(&[vec![1.0]], &[vec![1.0], vec![2.0]], 1.0).unwrap_err();
    assert!(matches!(e, crate::Error::Dimension { .. }));
}

fn latent_oracle(pred: &[Vec<f64>], target: &[Vec<f64>], lambda: f64) -> f64 {
    let mut total = 0.0;
    for (p, t) in pred.iter().zip(target) {
        let mse = p.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / p.len() as f64;
        let dot: f64 = p.iter().zip(t).map(|(a, b)| a * b).sum();
        let np = p.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nt = t.iter().map(|a| a * a).sum::<f64>().sqrt();
        total += mse + lambda * (1.0 - dot / (np * nt).max(1e-8));
    }
    total / pred.len() as f64
}

fn plan_pair() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    (1usize..5, 1usize..6).prop_flat_map(|(k, d)| {
        let m = prop::collection::vec(prop::collection::vec(-2.0f64..2.0, d), k);
        (m.clone(), m)
    })
}

proptest! {
    #[test]
    fn latent_loss_matches_oracle_and_is_monotone_in_lambda((p, t) in plan_pair(), lam in 0.0f64..3.0) {
        let got = latent_loss(&p, &t, lam).unwrap();
        prop_assert!((got - latent_oracle(&p, &t, lam)).abs() < 1e-9);
        prop_assert!(got >= -1e-12);
        let more = latent_loss(&p, &t, lam + 0.5).unwrap();
        prop_assert!(more >= got - 1e-12);
        prop_assert!(latent_loss(&t, &t, lam).unwrap().abs() < 1e-12);
    }
}

fn frames(q: usize, steps: &[Vec<u32>]) -> crate::layout::FrameSeq {
    crate::layout::FrameSeq::from_steps(q, steps).unwrap()
}

#[test]
fn audio_loss_uniform_and_saturated() {
    let f = frames(2, &[vec![3, 64], vec![0, 5], vec![64, 7]]);
    let uniform = Tensor::zeros(&[3, 2, 65]);
    let l = audio_loss(&uniform, &f).unwrap();
    assert!((l - 65f64.ln()).abs() < 1e-9, "{l}");

    let mut sat = Tensor::zeros(&[3, 2, 65]);
    for (t, step) in f.iter().enumerate() {
        for (q, &tok) in step.iter().enumerate() {
            sat.data_mut()[(t * 2 + q) * 65 + tok as usize] = 40.0;
        }
    }
    assert!(audio_loss(&sat, &f).unwrap() < 1e-6);
}

#[test]
fn audio_loss_matches_per_position_sum() {
    let mut rng = Rng::seed_from_u64(5);
    let (t, q, v) = (4, 3, 9);
    let steps: Vec<Vec<u32>> = (0..t).map(|_| (0..q).map(|_| rng.gen_range(0..v as u32)).collect()).collect();
    let f = frames(q, &steps);
    let data: Vec<f64> = (0..t * q * v).map(|_| rng.gen_range(-3.0..3.0)).collect();
    let logits = Tensor::new(&[t, q, v], data).unwrap();
    let probs = softmax_rows(&logits.clone().reshaped(&[t * q, v]).unwrap());
    let mut want = 0.0;
    for (ti, step) in steps.iter().enumerate() {
        for (qi, &tok) in step.iter().enumerate() {
            want -= probs.row(ti * q + qi)[tok as usize].ln();
        }
    }
    want /= (t * q) as f64;
    assert!((audio_loss(&logits, &f).unwrap() - want).abs() < 1e-12);
}

#[test]
fn audio_loss_rejects_misalignment() {
    let f = frames(2, &[vec![1, 2], vec![3, 4]]);
    assert!(audio_loss(&Tensor::zeros(&[3, 2, 8]), &f).is_err());
    assert!(audio_loss(&Tensor::zeros(&[2, 3, 8]), &f).is_err());
}

#[test]
fn total_loss_examples() {
    let w = LossWeights::default();
    assert_eq!(total_loss(1.0, 2.0, &w), 3.0);
    let no_cot = LossWeights { lambda_latent: 0.0, ..w };
    assert_eq!(total_loss(1.0, 2.0, &no_cot), 2.0);
    let latent_only = LossWeights { lambda_audio: 0.0, ..w };
    assert_eq!(total_loss(1.0, 2.0, &latent_only), 1.0);
    assert!(LossWeights { lambda_cos: -1.0, ..w }.validate().is_err());
}

// ---- schedule ------------------------------------------------------------

#[test]
fn lr_examples() {
    assert!((lr_at(3000, 1e-4, 3000, 0.1) - 1e-4).abs() < 1e-18);
    assert!((lr_at(1500, 1e-4, 3000, 0.1) - 5e-5).abs() < 1e-18);
    assert!((lr_at(12000, 1e-4, 3000, 0.1) - 5e-5).abs() < 1e-18);
    // Both branches meet at the boundary; the first decay step moves by the
    // decay curve's own increment only.
    let jump = lr_at(3000, 1e-4, 3000, 0.1) - lr_at(3001, 1e-4, 3000, 0.1);
    assert!((jump - 1e-4 * (1.0 - (3000.0f64 / 3001.0).sqrt())).abs() < 1e-12);
    assert!((lr_at(10_000_000, 1e-4, 3000, 0.1) - 1e-5).abs() < 1e-18);
}

proptest! {
    #[test]
    fn lr_is_nonincreasing_after_warmup_and_floored(warmup in 1u64..5000, s in 1u64..100_000, floor in 0.0f64..1.0) {
        let peak = 1e-3;
        let a = lr_at(s, peak, warmup, floor);
        prop_assert!(a > 0.0 && a <= peak);
        if s >= warmup {
            prop_assert!(lr_at(s + 1, peak, warmup, floor) <= a);
            prop_assert!(a >= floor * peak - 1e-18);
        } else {
            prop_assert!(lr_at(s + 1, peak, warmup, floor) > a);
        }
    }
}

// ---- batching ------------------------------------------------------------

fn ids(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("r{i}")).collect()
}

#[test]
fn batch_examples() {
    let names = ids(20);
    let recs: Vec<(&str, usize)> = names.iter().map(|n| (n.as_str(), 400)).collect();
    let mut rng = stream(1, "batch");
    assert_eq!(plan_batches(&recs[..10], 4000, 16, &mut rng).unwrap().len(), 1);
    assert_eq!(plan_batches(&recs, 4000, 16, &mut rng).unwrap().len(), 2);
    let short: Vec<(&str, usize)> = names.iter().map(|n| (n.as_str(), 100)).collect();
    let p = plan_batches(&short, 4000, 16, &mut rng).unwrap();
    assert!(p.batches.iter().all(|b| b.len() <= 16));
    assert_eq!(p.len(), 2);
}

#[test]
fn oversize_record_is_named() {
    let recs = [("ok", 10), ("huge", 5000)];
    let e = plan_batches(&recs, 4000, 16, &mut stream(0, "b")).unwrap_err();
    match e {
        crate::Error::OversizeRecord { id, len, cap } => assert_eq!((id.as_str(), len, cap), ("huge", 5000, 4000)),
        other => panic!("{other:?}"),
    }
}

proptest! {
    #[test]
    fn batches_cover_once_and_respect_caps(lens in prop::collection::vec(1usize..300, 0..120), bin in 300usize..1500, size in 1usize..20, seed in any::<u64>()) {
        let names = ids(lens.len());
        let recs: Vec<(&str, usize)> = names.iter().map(String::as_str).zip(lens.iter().copied()).collect();
        let p = plan_batches(&recs, bin, size, &mut stream(seed, "b")).unwrap();
        let mut seen: Vec<usize> = p.batches.iter().flatten().copied().collect();
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..lens.len()).collect::<Vec<_>>());
        for b in &p.batches {
            prop_assert!(!b.is_empty() && b.len() <= size);
            prop_assert!(b.iter().map(|&i| lens[i]).sum::<usize>() <= bin);
        }
        let again = plan_batches(&recs, bin, size, &mut stream(seed, "b")).unwrap();
        prop_assert_eq!(p, again);
    }
}

// ---- curriculum ----------------------------------------------------------

/// Chi-square critical values at p = 0.001 for 1 and 2 degrees of freedom.
const CHI2_CRIT: [f64; 2] = [10.828, 13.816];

#[test]
fn curriculum_frequencies_match_stage_weights() {
    let n = 50_000;
    for name in CurriculumSchedule::NAMES {
        let s = CurriculumSchedule::by_name(name, 50).unwrap();
        for (si, stage) in s.stages.iter().enumerate() {
            let mut rng = stream(7, &format!("{name}/{si}"));
            let mut counts = [0usize; 3];
            for _ in 0..n {
                counts[curriculum_draw(&s, stage.start, &mut rng).unwrap().index()] += 1;
            }
            let mut chi2 = 0.0;
            let mut df = 0;
            for (c, w) in counts.iter().zip(&stage.weights) {
                let f = *c as f64 / n as f64;
                assert!((f - w).abs() <= 0.02, "{name} stage {si}: {counts:?} vs {:?}", stage.weights);
                if *w == 0.0 {
                    assert_eq!(*c, 0, "{name} stage {si} drew a zero-weight scenario");
                } else {
                    let e = w * n as f64;
                    chi2 += (*c as f64 - e).powi(2) / e;
                    df += 1;
                }
            }
            if df > 1 {
                assert!(chi2 < CHI2_CRIT[df - 2], "{name} stage {si}: chi2 {chi2}");
            }
        }
    }
}

#[test]
fn disjoint_examples_and_bounds() {
    let s = CurriculumSchedule::disjoint(50);
    let mut rng = stream(3, "d");
    assert!((0..1000).all(|_| curriculum_draw(&s, 30, &mut rng).unwrap() == Scenario::Composite));
    assert!((0..1000).all(|_| curriculum_draw(&s, 5, &mut rng).unwrap() != Scenario::Composite));
    assert!(curriculum_draw(&s, 50, &mut rng).is_err());
}

#[test]
fn stage_boundaries_scale_with_run_length() {
    let edges = |s: &CurriculumSchedule| s.stages.iter().map(|st| (st.start, st.end)).collect::<Vec<_>>();
    assert_eq!(edges(&CurriculumSchedule::gradual(50)), [(0, 10), (10, 25), (25, 50)]);
    assert_eq!(edges(&CurriculumSchedule::gradual(20)), [(0, 4), (4, 10), (10, 20)]);
    assert_eq!(edges(&CurriculumSchedule::disjoint(7)), [(0, 1), (1, 3), (3, 7)]);
    let s = CurriculumSchedule::constant(12);
    assert_eq!(s.stage_at(0).unwrap(), 0);
    assert_eq!(s.stage_at(3).unwrap(), 1);
    assert_eq!(s.stage_at(11).unwrap(), 2);
}

#[test]
fn custom_schedules_are_validated() {
    let ok = CurriculumSchedule::custom(vec![
        Stage { start: 0, end: 2, weights: [1.0, 0.0, 0.0] },
        Stage { start: 2, end: 3, weights: [0.2, 0.3, 0.5] },
    ]);
    assert_eq!(ok.unwrap().total_epochs(), 3);
    let gap = CurriculumSchedule::custom(vec![
        Stage { start: 0, end: 2, weights: [1.0, 0.0, 0.0] },
        Stage { start: 3, end: 4, weights: [1.0, 0.0, 0.0] },
    ]);
    assert!(gap.is_err());
    let bad_sum = CurriculumSchedule::custom(vec![Stage { start: 0, end: 1, weights: [0.5, 0.4, 0.0] }]);
    assert!(bad_sum.is_err());
    assert!(CurriculumSchedule::by_name("zigzag", 10).is_err());
}

// ---- trainer -------------------------------------------------------------

fn records(world: &World, per: usize) -> Vec<Record> {
    world.make_split("train", [per; 3]).unwrap()
}

fn tiny_config(epochs: usize) -> TrainConfig {
    TrainConfig {
        seed: 11,
        epochs,
        lr_peak: 3e-3,
        warmup: 5,
        max_batch_bin: 200,
        max_batch_size: 4,
        ..TrainConfig::default()
    }
}

#[test]
fn one_epoch_smoke_run_logs_finite_losses() {
    let world = tiny_world();
    let model = tiny_model(&world, 1);
    let recs = records(&world, 22);
    let set = TrainingSet::new(&model, &recs[..64]).unwrap();
    let mut t = Trainer::new(model, tiny_config(1), CurriculumSchedule::constant(1)).unwrap();
    let m = t.train_epoch(&set).unwrap();
    assert!(m.l_latent.is_finite() && m.l_audio.is_finite() && m.l_total.is_finite());
    assert!(t.step_count() > 0);
    assert!(t.train_epoch(&set).is_err(), "ran past the configured epochs");
}

#[test]
fn zero_loss_weights_leave_parameters_unchanged() {
    let world = tiny_world();
    let model = tiny_model(&world, 2);
    let before = model.params.clone();
    let set = TrainingSet::new(&model, &records(&world, 4)).unwrap();
    let cfg = TrainConfig {
        loss: LossWeights {
            lambda_cos: 1.0,
            lambda_latent: 0.0,
            lambda_audio: 0.0,
        },
        ..tiny_config(1)
    };
    let mut t = Trainer::new(model, cfg, CurriculumSchedule::gradual(1)).unwrap();
    t.train_epoch(&set).unwrap();
    assert!(t.step_count() > 0);
    for ((_, n, a), (_, _, b)) in t.model.params.iter().zip(before.iter()) {
        assert_eq!(a.data(), b.data(), "{n} moved");
    }
}

#[test]
fn accumulation_matches_one_large_batch() {
    let world = tiny_world();
    let set_model = tiny_model(&world, 4);
    let set = TrainingSet::new(&set_model, &records(&world, 2)).unwrap();
    let cfg = TrainConfig {
        accumulation: 3,
        ..tiny_config(1)
    };
    let mut micro = Trainer::new(tiny_model(&world, 4), cfg.clone(), CurriculumSchedule::constant(1)).unwrap();
    let mut whole = Trainer::new(tiny_model(&world, 4), cfg, CurriculumSchedule::constant(1)).unwrap();
    micro.optimizer_step(&set, &[vec![0], vec![2], vec![5]]).unwrap();
    whole.optimizer_step(&set, &[vec![0, 2, 5]]).unwrap();
    let mut worst: f64 = 0.0;
    for ((_, _, a), (_, _, b)) in micro.model.params.iter().zip(whole.model.params.iter()) {
        for (x, y) in a.data().iter().zip(b.data()) {
            worst = worst.max((x - y).abs());
        }
    }
    assert!(worst < 1e-10, "max parameter difference {worst}");
}

#[test]
fn overfitting_one_batch_drives_loss_down() {
    let world = tiny_world();
    let model = tiny_model(&world, 5);
    let set = TrainingSet::new(&model, &records(&world, 1)).unwrap();
    let cfg = TrainConfig {
        lr_peak: 3e-3,
        warmup: 10,
        accumulation: 1,
        ..tiny_config(1)
    };
    let mut t = Trainer::new(model, cfg, CurriculumSchedule::constant(1)).unwrap();
    let batch = vec![0, 1, 2];
    let initial = t.batch_loss(&set, &batch).unwrap().total;
    for _ in 0..200 {
        t.optimizer_step(&set, std::slice::from_ref(&batch)).unwrap();
    }
    let last = t.batch_loss(&set, &batch).unwrap().total;
    assert!(last < 0.1 * initial, "loss {initial} -> {last}");
}

#[test]
fn non_finite_loss_aborts_with_diagnostics() {
    let world = tiny_world();
    let mut model = tiny_model(&world, 6);
    let id = model.params.lookup("heads.b").unwrap();
    model.params.get_mut(id).data_mut()[0] = f64::NAN;
    let set = TrainingSet::new(&model, &records(&world, 2)).unwrap();
    let mut t = Trainer::new(model, tiny_config(1), CurriculumSchedule::constant(1)).unwrap();
    match t.optimizer_step(&set, &[vec![0]]).unwrap_err() {
        crate::Error::NonFiniteLoss { step, batch, detail } => {
            assert_eq!((step, batch), (1, 0));
            assert!(detail.contains("train-sound-00000"), "{detail}");
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn resume_from_checkpoint_is_bitwise() {
    let world = tiny_world();
    let model = tiny_model(&world, 7);
    let set = TrainingSet::new(&model, &records(&world, 6)).unwrap();
    let cfg = tiny_config(3);
    let sched = CurriculumSchedule::disjoint(3);

    let mut full = Trainer::new(model.clone(), cfg.clone(), sched.clone()).unwrap();
    full.run(&set, |_, _| Ok(())).unwrap();

    let dir = std::env::temp_dir().join(format!("lp-resume-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let ckpt = dir.join("epoch1.lpck");
    let mut first = Trainer::new(model.clone(), cfg.clone(), sched.clone()).unwrap();
    first.train_epoch(&set).unwrap();
    first.save_checkpoint(&ckpt).unwrap();
    drop(first);

    let fresh = tiny_model(&world, 99);
    let mut resumed = Trainer::resume(fresh, cfg, sched, &ckpt).unwrap();
    assert_eq!(resumed.epochs_done(), 1);
    resumed.run(&set, |_, _| Ok(())).unwrap();
    assert_eq!(resumed.step_count(), full.step_count());
    for ((_, n, a), (_, _, b)) in resumed.model.params.iter().zip(full.model.params.iter()) {
        assert!(
            a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()),
            "{n} differs"
        );
    }
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn training_set_appends_the_stop_step() {
    let world = tiny_world();
    let model = tiny_model(&world, 8);
    let recs = records(&world, 1);
    let set = TrainingSet::new(&model, &recs).unwrap();
    for (ex, r) in set.examples.iter().zip(&recs) {
        let n = r.grid.n();
        let want = crate::layout::delayed_len(n, 2) + 1;
        assert_eq!(ex.targets.len(), want);
        assert!(ex.targets.step(want - 1).iter().all(|&t| t == model.config.pad()));
        assert_eq!(ex.sequence.offsets().unwrap().frame_steps() + 1, ex.targets.len());
    }
}

#[test]
fn full_training_loss_passes_the_gradient_check() {
    let r = full_gradient_check(None).unwrap();
    assert!(r.max_rel_error < 1e-3, "{r:?}");
    let fault = crate::numerics::GradFault {
        op: crate::numerics::OpKind::LayerNorm,
        factor: 2.0,
    };
    assert!(full_gradient_check(Some(fault)).unwrap().max_rel_error > 1e-3);
}
