use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn store_with(rng: &mut ChaCha8Rng, shapes: &[(&str, &[usize])]) -> (ParamStore, Vec<ParamId>) {
    let mut s = ParamStore::new();
    let ids = shapes
        .iter()
        .map(|(n, sh)| s.insert(*n, rand_tensor(rng, sh)).unwrap())
        .collect();
    (s, ids)
}

fn ce_value(logits: &[f64], target: usize) -> f64 {
    let params = ParamStore::new();
    let mut g = Graph::new(&params);
    let l = g.input(Tensor::new(&[1, logits.len()], logits.to_vec()).unwrap());
    let loss = g.cross_entropy(l, &[target]).unwrap();
    g.scalar(loss)
}

#[test]
fn cross_entropy_examples() {
    assert!((ce_value(&[0.5; 4], 2) - 4f64.ln()).abs() < 1e-12);
    let mut sat = vec![0.0; 5];
    sat[3] = 30.0;
    assert!(ce_value(&sat, 3) < 1e-9);
    // log-sum-exp by hand: ln(e + e² + e³) − 1
    assert!((ce_value(&[1.0, 2.0, 3.0], 0) - 2.40760596444438).abs() < 1e-12);
}

#[test]
fn cross_entropy_target_out_of_range() {
    let params = ParamStore::new();
    let mut g = Graph::new(&params);
    let l = g.input(Tensor::zeros(&[1, 3]));
    assert!(matches!(g.cross_entropy(l, &[3]), Err(crate::Error::Index { .. })));
}

#[test]
fn cross_entropy_gradient_is_softmax_minus_onehot() {
    let mut s = ParamStore::new();
    let p = s.insert("l", Tensor::new(&[1, 3], vec![1.0, 2.0, 3.0]).unwrap()).unwrap();
    let mut g = Graph::new(&s);
    let n = g.param(p);
    let loss = g.cross_entropy(n, &[0]).unwrap();
    let grads = g.backward(loss).unwrap();
    let sm = softmax_rows(s.get(p));
    let got = grads.get(p).unwrap();
    for i in 0..3 {
        let want = sm.data()[i] - if i == 0 { 1.0 } else { 0.0 };
        assert!((got.data()[i] - want).abs() < 1e-14);
    }
}

fn scalar_of(f: impl FnOnce(&mut Graph, NodeId, NodeId) -> NodeId, a: &[f64], b: &[f64]) -> f64 {
    let params = ParamStore::new();
    let mut g = Graph::new(&params);
    let x = g.input(Tensor::new(&[a.len()], a.to_vec()).unwrap());
    let y = g.input(Tensor::new(&[b.len()], b.to_vec()).unwrap());
    let out = f(&mut g, x, y);
    g.scalar(out)
}

#[test]
fn mse_examples() {
    let mse = |a: &[f64], b: &[f64]| scalar_of(|g, x, y| g.mse(x, y).unwrap(), a, b);
    assert_eq!(mse(&[0.3, -2.0], &[0.3, -2.0]), 0.0);
    assert!((mse(&[1.0, 0.0], &[0.0, 1.0]) - 1.0).abs() < 1e-15);
    assert!((mse(&[1.0, 0.0], &[-1.0, 0.0]) - 2.0).abs() < 1e-15);
}

#[test]
fn cosine_examples() {
    let cos = |a: &[f64], b: &[f64]| scalar_of(|g, x, y| g.cosine(x, y).unwrap(), a, b);
    assert!((cos(&[0.4, -1.5, 2.0], &[0.4, -1.5, 2.0]) - 1.0).abs() < 1e-12);
    assert_eq!(cos(&[1.0, 0.0], &[0.0, 1.0]), 0.0);
    assert!((cos(&[1.0, 0.0], &[-1.0, 0.0]) + 1.0).abs() < 1e-15);
    // ε-guard: zero vector is defined and yields 0.
    assert_eq!(cos(&[0.0, 0.0], &[1.0, 2.0]), 0.0);
}

#[test]
fn dimension_errors() {
    let params = ParamStore::new();
    let mut g = Graph::new(&params);
    let a = g.input(Tensor::zeros(&[2]));
    let b = g.input(Tensor::zeros(&[3]));
    assert!(matches!(g.mse(a, b), Err(crate::Error::Dimension { .. })));
    assert!(matches!(g.cosine(a, b), Err(crate::Error::Dimension { .. })));
    let m = g.input(Tensor::zeros(&[2, 3]));
    let err = g.matmul(m, m).unwrap_err().to_string();
    assert!(err.contains("[2, 3]"));
}

#[test]
fn backward_of_sum_is_ones() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (s, ids) = store_with(&mut rng, &[("p", &[3, 4])]);
    let mut g = Graph::new(&s);
    let p = g.param(ids[0]);
    let loss = g.sum(p);
    let grads = g.backward(loss).unwrap();
    assert!(grads.get(ids[0]).unwrap().data().iter().all(|&v| v == 1.0));
}

#[test]
fn backward_of_self_mse_is_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (s, ids) = store_with(&mut rng, &[("p", &[5])]);
    let mut g = Graph::new(&s);
    let a = g.param(ids[0]);
    let b = g.param(ids[0]);
    let loss = g.mse(a, b).unwrap();
    let grads = g.backward(loss).unwrap();
    assert!(grads.get(ids[0]).unwrap().data().iter().all(|&v| v == 0.0));
}

#[test]
fn backward_rejects_non_scalar() {
    let s = ParamStore::new();
    let mut g = Graph::new(&s);
    let a = g.input(Tensor::zeros(&[2]));
    assert!(matches!(g.backward(a), Err(crate::Error::Contract(_))));
}

#[test]
fn zero_gradient_graph_has_zero_error() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut s, ids) = store_with(&mut rng, &[("p", &[4])]);
    let report = finite_diff_check(&mut s, &ids, 1e-5, None, |g| {
        let a = g.param(ids[0]);
        let b = g.param(ids[0]);
        g.mse(a, b)
    })
    .unwrap();
    assert_eq!(report.max_rel_error, 0.0);
}

/// Each differentiable op, checked against central differences.
#[test]
fn every_op_matches_finite_differences() {
    type Build = fn(&mut Graph, &[ParamId]) -> crate::Result<NodeId>;
    let cases: Vec<(&str, Vec<(&str, &[usize])>, Build)> = vec![
        ("matmul", vec![("a", &[3, 4]), ("b", &[4, 2])], |g, p| {
            let (a, b) = (g.param(p[0]), g.param(p[1]));
            let m = g.matmul(a, b)?;
            let m = g.gelu(m);
            Ok(g.sum(m))
        }),
        ("add/add_row/affine", vec![("a", &[3, 4]), ("b", &[3, 4]), ("r", &[4])], |g, p| {
            let (a, b, r) = (g.param(p[0]), g.param(p[1]), g.param(p[2]));
            let s = g.add(a, b)?;
            let s = g.add_row(s, r)?;
            let s = g.affine(s, -1.7, 0.3);
            let s = g.gelu(s);
            Ok(g.sum(s))
        }),
        ("layer_norm", vec![("x", &[3, 5]), ("g", &[5]), ("b", &[5]), ("w", &[5, 5])], |g, p| {
            let x = g.param(p[0]);
            let (gm, bt) = (g.param(p[1]), g.param(p[2]));
            let y = g.layer_norm(x, gm, bt)?;
            let w = g.param(p[3]);
            let y = g.matmul(y, w)?;
            let y = g.gelu(y);
            Ok(g.sum(y))
        }),
        ("attention", vec![("qkv", &[5, 12]), ("w", &[4, 3])], |g, p| {
            let qkv = g.param(p[0]);
            let o = g.causal_attention(qkv, 2)?;
            let w = g.param(p[1]);
            let o = g.matmul(o, w)?;
            let o = g.gelu(o);
            Ok(g.sum(o))
        }),
        ("gather/concat/slice/reshape", vec![("t", &[6, 3]), ("u", &[2, 3])], |g, p| {
            let t = g.param(p[0]);
            let e = g.gather_sum(t, vec![vec![0, 2], vec![5], vec![2, 2, 1]])?;
            let u = g.param(p[1]);
            let c = g.concat_rows(&[e, u])?;
            let s = g.slice_rows(c, 1, 3)?;
            let r = g.reshape(s, &[1, 9])?;
            let r = g.gelu(r);
            Ok(g.sum(r))
        }),
        ("cross_entropy", vec![("l", &[4, 5])], |g, p| {
            let l = g.param(p[0]);
            g.cross_entropy(l, &[0, 4, 2, 2])
        }),
        ("mse/cosine", vec![("a", &[6]), ("b", &[6])], |g, p| {
            let (a, b) = (g.param(p[0]), g.param(p[1]));
            let m = g.mse(a, b)?;
            let c = g.cosine(a, b)?;
            let c = g.affine(c, -0.8, 1.0);
            g.add(m, c)
        }),
    ];
    for (seed, (name, shapes, build)) in cases.into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed as u64);
        let (mut s, ids) = store_with(&mut rng, &shapes);
        let report = finite_diff_check(&mut s, &ids, 1e-5, None, |g| build(g, &ids)).unwrap();
        assert!(
            report.max_rel_error < 1e-4,
            "{name}: {report:?}"
        );
    }
}

#[test]
fn injected_fault_is_detected() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (mut s, ids) = store_with(&mut rng, &[("a", &[3, 4]), ("b", &[4, 2])]);
    let fault = GradFault {
        op: OpKind::Gelu,
        factor: 2.0,
    };
    let report = finite_diff_check(&mut s, &ids, 1e-5, Some(fault), |g| {
        let (a, b) = (g.param(ids[0]), g.param(ids[1]));
        let m = g.matmul(a, b)?;
        let m = g.gelu(m);
        Ok(g.sum(m))
    })
    .unwrap();
    assert!(report.max_rel_error > 0.3, "{report:?}");
}

#[test]
fn graph_evaluation_is_bitwise_reproducible() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let (s, ids) = store_with(&mut rng, &[("qkv", &[7, 24])]);
        let mut g = Graph::new(&s);
        let x = g.param(ids[0]);
        let o = g.causal_attention(x, 4).unwrap();
        let loss = g.sum(o);
        let grads = g.backward(loss).unwrap();
        (g.scalar(loss).to_bits(), grads.get(ids[0]).unwrap().clone())
    };
    assert_eq!(run(), run());
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(vals in prop::collection::vec(-50.0f64..50.0, 12)) {
        let t = Tensor::new(&[3, 4], vals).unwrap();
        let sm = softmax_rows(&t);
        for r in 0..3 {
            let row = sm.row(r);
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn mse_nonnegative_and_cosine_bounded(
        a in prop::collection::vec(-10.0f64..10.0, 5),
        b in prop::collection::vec(-10.0f64..10.0, 5),
    ) {
        let m = scalar_of(|g, x, y| g.mse(x, y).unwrap(), &a, &b);
        prop_assert!(m >= 0.0);
        prop_assert_eq!(m == 0.0, a == b);
        let c = cosine_sim(&a, &b);
        prop_assert!((-1.0 - 1e-9..=1.0 + 1e-9).contains(&c));
    }
}
