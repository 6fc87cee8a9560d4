use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn rand_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize, lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(r, c, |_, _| rng.random_range(lo..hi))
}

/// Weighted sum of `x` with fixed random weights, so no gradient entry
/// vanishes by symmetry.
fn probe(g: &mut Graph, x: NodeId, seed: u64) -> Result<NodeId, DiffError> {
    let (r, c) = g.shape(x);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = g.constant(rand_tensor(&mut rng, r, c, -1.0, 1.0));
    let p = g.mul(x, w)?;
    Ok(g.sum_all(p))
}

#[test]
fn identity_matmul() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::from_fn(3, 2, |r, c| (r + 2 * c) as f64));
    let i = g.constant(Tensor::eye(3));
    let y = g.matmul(i, x).unwrap();
    assert_eq!(g.value(y), g.value(x));
}

#[test]
fn softmax_of_zeros_is_uniform() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(1, 3));
    let y = g.softmax(x, Axis::Cols);
    for &v in g.value(y).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn softmax_is_stable_for_large_inputs() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::matrix(1, 3, vec![1000.0, 1000.0, 1000.0]).unwrap());
    let y = g.softmax(x, Axis::Cols);
    assert!(g.value(y).all_finite());
}

#[test]
fn tanh_gradient_at_zero() {
    let mut g = Graph::new();
    let x = g.param(Tensor::scalar(0.0));
    let y = g.tanh(x);
    assert_eq!(g.backward(y).unwrap().get(x).item(), 1.0);
}

#[test]
fn relu_forward_and_gradient() {
    let mut g = Graph::new();
    let x = g.param(Tensor::matrix(1, 3, vec![-1.5, 0.0, 2.0]).unwrap());
    let y = g.relu(x);
    assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
    let s = g.sum_all(y);
    assert_eq!(g.backward(s).unwrap().get(x).data(), &[0.0, 0.0, 1.0]);
}

#[test]
fn square_gradient() {
    let mut g = Graph::new();
    let x = g.param(Tensor::scalar(3.0));
    let y = g.mul(x, x).unwrap();
    assert_eq!(g.backward(y).unwrap().get(x).item(), 6.0);
}

#[test]
fn sum_of_softmax_has_zero_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut g = Graph::new();
    let w = g.param(rand_tensor(&mut rng, 4, 3, -1.0, 1.0));
    let x = g.constant(rand_tensor(&mut rng, 3, 1, -1.0, 1.0));
    let z = g.matmul(w, x).unwrap();
    let s = g.softmax(z, Axis::Rows);
    let loss = g.sum_all(s);
    let grad = g.backward(loss).unwrap().get(w);
    assert!(grad.max_abs() < 1e-15, "{grad:?}");
}

#[test]
fn unreachable_params_get_zero() {
    let mut g = Graph::new();
    let a = g.param(Tensor::full(2, 2, 1.5));
    let b = g.param(Tensor::full(2, 3, 2.0));
    let loss = g.sum_all(a);
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get(b), Tensor::zeros(2, 3));
    assert_eq!(grads.get(a), Tensor::full(2, 2, 1.0));
}

#[test]
fn non_scalar_loss_rejected() {
    let mut g = Graph::new();
    let a = g.param(Tensor::zeros(2, 2));
    assert!(matches!(g.backward(a), Err(DiffError::NonScalarLoss((2, 2)))));
}

#[test]
fn shape_mismatch_names_both_shapes() {
    let mut g = Graph::new();
    let a = g.param(Tensor::zeros(2, 3));
    let b = g.param(Tensor::zeros(2, 3));
    let err = g.matmul(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("(2, 3)") && msg.contains("matmul"), "{msg}");
    assert!(g.add(a, g.len().checked_sub(1).map(|_| a).unwrap()).is_ok());
    let c = g.param(Tensor::zeros(3, 2));
    assert!(g.add(a, c).is_err());
    assert!(g.slice(a, Axis::Rows, 1, 2).is_err());
}

#[test]
fn linear_map_grad_check_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let w = rand_tensor(&mut rng, 3, 4, -1.0, 1.0);
    let x = rand_tensor(&mut rng, 4, 2, -1.0, 1.0);
    // truncation error vanishes for a linear map, so a wide step only
    // shrinks roundoff
    let err = grad_check(&[w, x.clone()], 1e-3, |g, p| {
        let xc = g.constant(x.clone());
        let y = g.matmul(p[0], xc)?;
        probe(g, y, 2)
    })
    .unwrap();
    assert!(err < 1e-10, "{err}");
}

#[test]
fn three_layer_composite_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let params = vec![
        rand_tensor(&mut rng, 5, 6, -0.5, 0.5),
        rand_tensor(&mut rng, 1, 6, -0.5, 0.5),
        rand_tensor(&mut rng, 6, 6, -0.5, 0.5),
        rand_tensor(&mut rng, 6, 2, -0.5, 0.5),
    ];
    let x = rand_tensor(&mut rng, 4, 5, -1.0, 1.0);
    let err = grad_check(&params, 1e-5, |g, p| {
        let xc = g.constant(x.clone());
        let h = g.matmul(xc, p[0])?;
        let h = g.add_row(h, p[1])?;
        let h = g.tanh(h);
        let h = g.matmul(h, p[2])?;
        let h = g.softplus(h);
        let h = g.matmul(h, p[3])?;
        let s = g.softmax(h, Axis::Cols);
        probe(g, s, 3)
    })
    .unwrap();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn scan_matches_direct_recurrence() {
    let mut g = Graph::new();
    let u = g.constant(Tensor::matrix(3, 1, vec![1.0, 1.0, 1.0]).unwrap());
    let a = g.constant(Tensor::scalar(0.5));
    let h = g.scan(u, a, false).unwrap();
    assert_eq!(g.value(h).data(), &[1.0, 1.5, 1.75]);
    let h = g.scan(u, a, true).unwrap();
    assert_eq!(g.value(h).data(), &[1.75, 1.5, 1.0]);
}

#[test]
fn forward_is_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut g = Graph::new();
        let w = g.param(rand_tensor(&mut rng, 16, 16, -1.0, 1.0));
        let x = g.constant(rand_tensor(&mut rng, 32, 16, -1.0, 1.0));
        let y = g.matmul(x, w).unwrap();
        let y = g.softmax(y, Axis::Cols);
        let l = g.sum(y, Axis::Rows);
        let l = g.square(l);
        let l = g.sum_all(l);
        let grads = g.backward(l).unwrap();
        (g.value(l).clone(), grads.get(w))
    };
    assert_eq!(run(), run());
}

#[test]
fn fault_injection_breaks_grad_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = rand_tensor(&mut rng, 3, 3, -1.0, 1.0);
    let f = |g: &mut Graph, p: &[NodeId]| {
        let y = g.tanh(p[0]);
        probe(g, y, 1)
    };
    inject_fault(Some(OpKind::Tanh));
    let bad = grad_check(std::slice::from_ref(&x), 1e-5, f).unwrap();
    inject_fault(None);
    let good = grad_check(std::slice::from_ref(&x), 1e-5, f).unwrap();
    assert!(bad > 1e-3 && good < 1e-6, "{bad} {good}");
    assert_eq!(OpKind::parse("tanh"), Some(OpKind::Tanh));
    assert_eq!(OpKind::parse("nope"), None);
}

#[test]
fn checkpoint_round_trip_and_errors() {
    let tensors = vec![
        ("actor.w".to_string(), Tensor::from_fn(2, 3, |r, c| r as f64 - c as f64 * 0.25)),
        ("s".to_string(), Tensor::scalar(f64::MIN_POSITIVE)),
        ("v".to_string(), Tensor::new(vec![4], vec![1.0, -2.0, 3.5, 0.0]).unwrap()),
    ];
    let bytes = encode_tensors(&tensors);
    assert_eq!(decode_tensors(&bytes).unwrap(), tensors);

    let mut wrong = bytes.clone();
    wrong[8] = 9;
    assert!(matches!(decode_tensors(&wrong), Err(DiffError::Version { found: 9, .. })));
    assert!(matches!(decode_tensors(&bytes[..bytes.len() - 3]), Err(DiffError::Format(_))));
    assert!(matches!(decode_tensors(b"NOTATENSORFILE.."), Err(DiffError::Format(_))));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.bin");
    save_tensors(&path, &tensors).unwrap();
    assert_eq!(load_tensors(&path).unwrap(), tensors);
}

#[test]
fn param_set_prefix_round_trip() {
    let mut p = ParamSet::new();
    p.push("a", Tensor::full(2, 2, 1.0));
    p.push("b", Tensor::scalar(3.0));
    let saved = p.prefixed("actor.");
    let mut q = ParamSet::new();
    q.push("a", Tensor::zeros(2, 2));
    q.push("b", Tensor::zeros(1, 1));
    q.load_prefixed("actor.", &saved).unwrap();
    assert_eq!(p, q);
    assert!(matches!(q.load_prefixed("critic1.", &saved), Err(DiffError::MissingParam(_))));
    let mut r = ParamSet::new();
    r.push("a", Tensor::zeros(3, 2));
    assert!(matches!(r.load_prefixed("actor.", &saved), Err(DiffError::ParamShape { .. })));
}

#[test]
fn adamw_with_zero_lr_is_identity() {
    let mut p = ParamSet::new();
    p.push("w", Tensor::from_fn(3, 3, |r, c| r as f64 * 0.1 - c as f64));
    let before = p.clone();
    let mut opt = AdamW::new(&p, 0.01);
    opt.step(&mut p, &[Tensor::full(3, 3, 0.3)], 0.0);
    assert_eq!(p, before);
    opt.step(&mut p, &[Tensor::full(3, 3, 0.3)], 1e-2);
    assert!(p.get(0).at(0, 0) < before.get(0).at(0, 0));
}

#[test]
fn cosine_schedule_endpoints() {
    assert_eq!(cosine_lr(1e-4, 1e-6, 0.0), 1e-4);
    assert!((cosine_lr(1e-4, 1e-6, 1.0) - 1e-6).abs() < 1e-20);
    assert!((cosine_lr(1e-4, 1e-6, 0.5) - (1e-4 + 1e-6) / 2.0).abs() < 1e-18);
}

mod props {
    use super::*;
    use proptest::prelude::{prop_assert_eq, proptest, ProptestConfig};

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn checkpoint_round_trips(
            vals in proptest::collection::vec(-1e300f64..1e300, 1..40),
            name in "[a-z0-9_.]{1,20}",
        ) {
            let t = Tensor::matrix(1, vals.len(), vals).unwrap();
            let entries = vec![(name, t)];
            prop_assert_eq!(decode_tensors(&encode_tensors(&entries)).unwrap(), entries);
        }
    }
}
