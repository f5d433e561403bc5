//! Property suites behind `verify`.
//!
//! Each suite returns the first failing case as text. The runner times every
//! suite and stops reporting success at the first failure.

use std::time::Instant;

use latent_plan::eval::{scf, ScfConfig};
use latent_plan::layout::{delay_decode, delay_encode, frame_sequence, split_sequence, TokenGrid};
use latent_plan::numerics::{GradFault, OpKind, Tensor};
use latent_plan::rng::{normal, stream};
use latent_plan::toyworld::{Detection, ItemId, Scenario};
use latent_plan::training::{
    audio_loss, curriculum_draw, full_gradient_check, latent_loss, lr_at, CurriculumSchedule,
};
use rand::Rng as _;

pub type SuiteResult = std::result::Result<(), String>;

pub struct SuiteOutcome {
    pub name: &'static str,
    pub seconds: f64,
    pub result: SuiteResult,
}

/// Runs every suite. `fault` injects a ×2 layer-norm gradient error.
pub fn run_all(fault: bool) -> Vec<SuiteOutcome> {
    let suites: [(&'static str, Box<dyn Fn() -> SuiteResult>); 6] = [
        ("numerics", Box::new(move || gradients(fault))),
        ("layout", Box::new(layout)),
        ("losses", Box::new(losses)),
        ("curriculum", Box::new(curriculum)),
        ("schedule", Box::new(schedule)),
        ("scf", Box::new(scf_suite)),
    ];
    suites
        .into_iter()
        .map(|(name, f)| {
            let t0 = Instant::now();
            let result = f();
            SuiteOutcome {
                name,
                seconds: t0.elapsed().as_secs_f64(),
                result,
            }
        })
        .collect()
}

fn check(ok: bool, msg: impl FnOnce() -> String) -> SuiteResult {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn gradients(fault: bool) -> SuiteResult {
    let f = fault.then_some(GradFault {
        op: OpKind::LayerNorm,
        factor: 2.0,
    });
    let r = full_gradient_check(f).map_err(|e| e.to_string())?;
    check(r.max_rel_error < 1e-3, || {
        format!(
            "max relative error {:.3e} at {:?} (analytic {:.6e}, numeric {:.6e})",
            r.max_rel_error, r.worst, r.analytic, r.numeric
        )
    })
}

fn layout() -> SuiteResult {
    let mut rng = stream(0, "verify/layout");
    for case in 0..1000 {
        let n = rng.gen_range(0..=64);
        let q = rng.gen_range(1..=8);
        let vocab = rng.gen_range(1..=32u32);
        let tokens = (0..n * q).map(|_| rng.gen_range(0..vocab)).collect();
        let grid = TokenGrid::new(n, q, vocab, tokens).map_err(|e| e.to_string())?;
        let enc = delay_encode(&grid, vocab).map_err(|e| e.to_string())?;
        let want_len = if n == 0 { 0 } else { n + q - 1 };
        check(enc.len() == want_len, || format!("case {case}: N={n} Q={q} encoded length {}", enc.len()))?;
        let pads = enc.flat().iter().filter(|&&t| t == vocab).count();
        let want_pads = if n == 0 { 0 } else { q * (q - 1) };
        check(pads == want_pads, || format!("case {case}: N={n} Q={q} pad count {pads}"))?;
        let back = delay_decode(&enc, q, vocab).map_err(|e| format!("case {case}: {e}"))?;
        check(back == grid, || format!("case {case}: N={n} Q={q} decode mismatch"))?;

        let text: Vec<u32> = (0..rng.gen_range(1..6)).map(|_| rng.gen_range(0..20)).collect();
        let k = rng.gen_range(1..5);
        let seq = frame_sequence(&text, k, &grid, vocab).map_err(|e| e.to_string())?;
        let split = split_sequence(&seq, k, q, vocab).map_err(|e| format!("case {case}: {e}"))?;
        check(split.text == text && split.grid == grid && split.latent_span.len() == k, || {
            format!("case {case}: sequence round trip mismatch")
        })?;
    }
    Ok(())
}

fn losses() -> SuiteResult {
    let e1 = vec![vec![1.0, 0.0]];
    let e2 = vec![vec![0.0, 1.0]];
    let neg = vec![vec![-1.0, 0.0]];
    for (pred, want, what) in [(&e1, 0.0, "identity"), (&e2, 2.0, "orthogonal"), (&neg, 4.0, "antipodal")] {
        let got = latent_loss(pred, &e1, 1.0).map_err(|e| e.to_string())?;
        check((got - want).abs() < 1e-12, || format!("latent loss {what}: {got}, want {want}"))?;
    }
    for v in [2usize, 16, 64] {
        let steps = 3;
        let q = 2;
        let logits = Tensor::zeros(&[steps, q, v + 1]);
        let frames = latent_plan::layout::FrameSeq::new(q, vec![0; steps * q]).map_err(|e| e.to_string())?;
        let got = audio_loss(&logits, &frames).map_err(|e| e.to_string())?;
        let want = ((v + 1) as f64).ln();
        check((got - want).abs() < 1e-9, || format!("uniform audio loss V={v}: {got}, want {want}"))?;
    }
    Ok(())
}

fn curriculum() -> SuiteResult {
    let draws = 50_000;
    for name in ["constant", "gradual", "disjoint"] {
        let s = CurriculumSchedule::by_name(name, 50).map_err(|e| e.to_string())?;
        for (i, stage) in s.stages.iter().enumerate() {
            let mut rng = stream(i as u64, &format!("verify/curriculum/{name}"));
            let mut counts = [0usize; 3];
            for _ in 0..draws {
                let sc = curriculum_draw(&s, stage.start, &mut rng).map_err(|e| e.to_string())?;
                counts[sc.index()] += 1;
            }
            let total: f64 = stage.weights.iter().sum();
            let mut chi2 = 0.0;
            let mut dof = 0;
            for sc in Scenario::ALL {
                let p = stage.weights[sc.index()] / total;
                let freq = counts[sc.index()] as f64 / draws as f64;
                check((freq - p).abs() <= 0.02, || {
                    format!("{name} stage {}: {sc} frequency {freq:.4}, weight {p:.4}", i + 1)
                })?;
                if p == 0.0 {
                    check(counts[sc.index()] == 0, || format!("{name} stage {}: drew zero-weight {sc}", i + 1))?;
                } else {
                    let e = p * draws as f64;
                    chi2 += (counts[sc.index()] as f64 - e).powi(2) / e;
                    dof += 1;
                }
            }
            // 0.1% critical values for 1 and 2 degrees of freedom.
            let crit = match dof {
                0 | 1 => f64::INFINITY,
                2 => 10.828,
                _ => 13.816,
            };
            check(chi2 < crit, || format!("{name} stage {}: chi-square {chi2:.2} ≥ {crit}", i + 1))?;
        }
    }
    Ok(())
}

fn schedule() -> SuiteResult {
    let lr = |s| lr_at(s, 1e-4, 3000, 0.1);
    for (step, want) in [(3000, 1e-4), (1500, 5e-5), (12000, 5e-5)] {
        check((lr(step) - want).abs() < 1e-15, || format!("lr_at({step}) = {}, want {want}", lr(step)))?;
    }
    // Both branches equal the peak at the boundary; the first decay step moves
    // by the inverse-square-root increment only.
    let jump = lr(3000) - lr(3001);
    let want = 1e-4 * (1.0 - (3000.0f64 / 3001.0).sqrt());
    check((jump - want).abs() < 1e-12, || format!("warmup boundary jump {jump:.3e}, want {want:.3e}"))?;
    for step in [3001, 100_000, 10_000_000] {
        check(lr(step) >= 1e-5 - 1e-18, || format!("lr_at({step}) below the floor"))?;
    }
    Ok(())
}

fn scf_suite() -> SuiteResult {
    let cfg = ScfConfig::default();
    let basis = |i: ItemId| {
        let mut v = vec![0.0; 4];
        v[i.0 as usize] = 1.0;
        v
    };
    let det = |label, confidence| Detection {
        label: ItemId(label),
        confidence,
        span: (0, 1),
    };
    let hand = scf(&[det(0, 0.5)], &[ItemId(0), ItemId(1)], basis, &cfg).map_err(|e| e.to_string())?;
    check(hand == 0.25, || format!("hand case scored {hand}, want 0.25"))?;
    let mut rng = stream(0, "verify/scf");
    let table: Vec<Vec<f64>> = (0..6).map(|_| (0..3).map(|_| normal(&mut rng)).collect()).collect();
    for case in 0..1000 {
        let dets: Vec<Detection> = (0..rng.gen_range(0..12))
            .map(|_| det(rng.gen_range(0..6), rng.gen::<f64>()))
            .collect();
        let gt: Vec<ItemId> = (0..rng.gen_range(1..6)).map(|_| ItemId(rng.gen_range(0..6))).collect();
        let s = scf(&dets, &gt, |i| table[i.0 as usize].clone(), &cfg).map_err(|e| e.to_string())?;
        check((0.0..=1.0).contains(&s), || format!("case {case}: SCF {s} outside [0, 1]"))?;
    }
    Ok(())
}
