use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::gradcheck::check;
use super::*;

fn randn(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    let data = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

/// Weighted sum with fixed pseudo-random coefficients, so every output
/// coordinate contributes a distinct amount to the checked scalar.
fn probe_sum(tape: &mut Tape, v: Var) -> Result<Var> {
    let n = tape.value(v).len();
    let c: Vec<f64> = (0..n).map(|i| ((i as f64) * 0.731 + 0.3).sin()).collect();
    let cv = tape.constant(tape.shape(v).to_vec(), c)?;
    let m = tape.mul(v, cv)?;
    Ok(tape.sum(m))
}

fn assert_fd(inputs: &[Tensor], f: impl Fn(&mut Tape, &[Var]) -> Result<Var>) {
    let r = check(inputs, 24, 11, f).unwrap();
    assert!(r.max_rel_err < 1e-4, "max relative error {} at {:?}", r.max_rel_err, r.worst);
}

#[test]
fn affine_examples() {
    let eye = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let zero_b = Tensor::vector(vec![0.0, 0.0]);
    let x = Tensor::vector(vec![3.0, 4.0]);
    assert_eq!(affine(&eye, &zero_b, &x).unwrap().data(), &[3.0, 4.0]);

    let zw = Tensor::zeros(&[2, 2]);
    let ones = Tensor::vector(vec![1.0, 1.0]);
    assert_eq!(affine(&zw, &ones, &Tensor::vector(vec![-7.0, 2.5])).unwrap().data(), &[1.0, 1.0]);

    let w = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    assert_eq!(affine(&w, &zero_b, &ones).unwrap().data(), &[3.0, 7.0]);

    let bad = Tensor::vector(vec![1.0, 2.0, 3.0]);
    match affine(&w, &zero_b, &bad) {
        Err(Error::Dimension { left, right, .. }) => {
            assert_eq!(left, vec![2, 2]);
            assert_eq!(right, vec![3]);
        }
        other => panic!("expected dimension error, got {other:?}"),
    }
}

#[test]
fn l2_normalize_examples() {
    let y = l2_normalize(&Tensor::vector(vec![3.0, 4.0])).unwrap();
    assert!(close(y.data(), &[0.6, 0.8], 1e-15));
    let u = Tensor::vector(vec![0.0, 1.0, 0.0]);
    assert_eq!(l2_normalize(&u).unwrap().data(), u.data());
    assert!(matches!(
        l2_normalize(&Tensor::vector(vec![0.0, 0.0])),
        Err(Error::Degenerate(_))
    ));
}

#[test]
fn softmax_examples() {
    let y = softmax(&Tensor::vector(vec![2.0; 4])).unwrap();
    assert!(close(y.data(), &[0.25; 4], 1e-15));
    let x = Tensor::vector(vec![0.3, -1.2, 4.0]);
    let shifted = Tensor::vector(x.data().iter().map(|v| v + 100.0).collect());
    assert!(close(softmax(&x).unwrap().data(), softmax(&shifted).unwrap().data(), 1e-12));
    let y = softmax(&Tensor::vector(vec![10.0, 0.0])).unwrap();
    let e = 10f64.exp();
    assert!(close(y.data(), &[e / (e + 1.0), 1.0 / (e + 1.0)], 1e-15));
    assert!((y.data()[0] - 0.99995).abs() < 1e-5);
    assert!(matches!(
        softmax(&Tensor::vector(vec![1.0, f64::NAN])),
        Err(Error::Numeric(_))
    ));
}

#[test]
fn layer_norm_examples() {
    let one = Tensor::vector(vec![1.0; 3]);
    let zero = Tensor::vector(vec![0.0; 3]);
    let y = layer_norm(&Tensor::vector(vec![5.0; 3]), &one, &zero, LAYER_NORM_EPS).unwrap();
    assert_eq!(y.data(), &[0.0; 3]);
    let s = Tensor::vector(vec![2.5; 3]);
    let y = layer_norm(&Tensor::vector(vec![1.0, 9.0, -4.0]), &zero, &s, LAYER_NORM_EPS).unwrap();
    assert_eq!(y.data(), &[2.5; 3]);
    let y = layer_norm(
        &Tensor::vector(vec![1.0, -1.0]),
        &Tensor::vector(vec![1.0; 2]),
        &Tensor::vector(vec![0.0; 2]),
        1e-15,
    )
    .unwrap();
    assert!(close(y.data(), &[1.0, -1.0], 1e-12));
}

fn mha_params(d: usize, seed: u64) -> MhaParams {
    MhaParams {
        wq: randn(&[d, d], seed),
        bq: randn(&[d], seed + 1),
        wk: randn(&[d, d], seed + 2),
        bk: randn(&[d], seed + 3),
        wv: randn(&[d, d], seed + 4),
        bv: randn(&[d], seed + 5),
        wo: randn(&[d, d], seed + 6),
        bo: randn(&[d], seed + 7),
    }
}

#[test]
fn attention_examples() {
    let p = mha_params(8, 3);
    let q = randn(&[8], 20);
    let k = randn(&[8], 21);
    let v = randn(&[8], 22);
    let (_, w) = multi_head_attention(&q, &[k.clone()], &[v.clone()], &p, 4).unwrap();
    assert!(w.iter().all(|h| h == &[1.0]));
    let (_, w) = multi_head_attention(&q, &[k.clone(), k.clone()], &[v.clone(), v.clone()], &p, 4).unwrap();
    assert!(w.iter().all(|h| h == &[0.5, 0.5]));
    assert!(matches!(
        multi_head_attention(&q, &[], &[], &p, 4),
        Err(Error::InvalidInput(_))
    ));
}

#[test]
fn cross_entropy_examples() {
    let u = Tensor::vector(vec![0.25; 4]);
    for c in 0..4 {
        assert!((cross_entropy(&u, c).unwrap() - 4f64.ln()).abs() < 1e-15);
    }
    assert_eq!(cross_entropy(&Tensor::vector(vec![0.0, 1.0]), 1).unwrap(), 0.0);
    let h = Tensor::vector(vec![0.5, 0.25, 0.25]);
    assert!((cross_entropy(&h, 0).unwrap() - 2f64.ln()).abs() < 1e-15);
    assert!(matches!(cross_entropy(&u, 4), Err(Error::Index { index: 4, len: 4 })));

    // Fused logit form agrees with -ln softmax.
    let logits = Tensor::vector(vec![0.2, -1.0, 3.0, 0.5]);
    let mut tape = Tape::new();
    let l = tape.param(&logits);
    let loss = tape.cross_entropy(l, &[2]).unwrap();
    let direct = cross_entropy(&softmax(&logits).unwrap(), 2).unwrap();
    assert!((tape.scalar(loss) - direct).abs() < 1e-14);
}

#[test]
fn resample_examples() {
    let x = Tensor::vector(vec![0.4, -2.0, 7.0]);
    assert_eq!(resample_linear(&x, 3).unwrap().data(), x.data());
    let y = resample_linear(&Tensor::vector(vec![0.0, 1.0]), 3).unwrap();
    assert_eq!(y.data(), &[0.0, 0.5, 1.0]);
    let y = resample_linear(&Tensor::vector(vec![0.0, 1.0, 2.0]), 2).unwrap();
    assert_eq!(y.data(), &[0.0, 2.0]);
    let y = resample_linear(&Tensor::vector(vec![0.0, 1.0, 4.0]), 1).unwrap();
    assert_eq!(y.data(), &[1.0]);
    assert!(matches!(
        resample_linear(&Tensor::vector(vec![1.0]), 4),
        Err(Error::InvalidInput(_))
    ));
}

#[test]
fn backward_examples() {
    let x = Tensor::vector(vec![1.0, -2.0, 3.0]).trainable();
    let frozen = Tensor::vector(vec![0.5, 0.5, 0.5]);
    let mut tape = Tape::new();
    let xv = tape.param(&x);
    let fv = tape.param(&frozen);
    let m = tape.mul(xv, fv).unwrap();
    let s0 = tape.sum(xv);
    let s1 = tape.sum(m);
    let s = tape.add(s0, s1).unwrap();
    let g = tape.backward(s).unwrap();
    assert_eq!(g.for_tensor(&x).unwrap(), &[1.5, 1.5, 1.5]);
    assert!(g.for_tensor(&frozen).is_none());

    let mut tape = Tape::new();
    let xv = tape.param(&x);
    let s = tape.sum(xv);
    assert_eq!(tape.backward(s).unwrap().wrt(xv).unwrap(), &[1.0; 3]);
    assert!(matches!(tape.backward(xv), Err(Error::InvalidInput(_))));

    let mut f = frozen.clone();
    g.accumulate_into(&mut f).unwrap();
    assert!(f.grad().is_none());
}

#[test]
fn reset_leaves_no_state_behind() {
    let w = randn(&[5, 4], 1).trainable();
    let x = randn(&[3, 4], 2);
    let run = |tape: &mut Tape| {
        let wv = tape.param(&w);
        let xv = tape.param(&x);
        let y = tape.linear(xv, wv, None).unwrap();
        let y = tape.gelu(y);
        let l = tape.sum(y);
        (tape.scalar(l).to_bits(), tape.backward(l).unwrap().for_tensor(&w).unwrap().to_vec())
    };
    let mut tape = Tape::new();
    let a = run(&mut tape);
    tape.reset();
    assert!(tape.is_empty());
    let b = run(&mut tape);
    assert_eq!(a.0, b.0);
    assert!(a.1.iter().zip(&b.1).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn fd_matmul_linear() {
    assert_fd(&[randn(&[3, 5], 1), randn(&[5, 4], 2)], |t, v| {
        let y = t.matmul(v[0], v[1])?;
        probe_sum(t, y)
    });
    assert_fd(&[randn(&[4, 6], 3), randn(&[7, 6], 4), randn(&[7], 5)], |t, v| {
        let y = t.linear(v[0], v[1], Some(v[2]))?;
        probe_sum(t, y)
    });
    assert_fd(&[randn(&[6], 6), randn(&[3, 6], 7), randn(&[3], 8)], |t, v| {
        let y = t.linear(v[0], v[1], Some(v[2]))?;
        probe_sum(t, y)
    });
}

#[test]
fn fd_elementwise() {
    assert_fd(&[randn(&[2, 3], 1), randn(&[2, 3], 2)], |t, v| {
        let a = t.add(v[0], v[1])?;
        let s = t.sub(a, v[1])?;
        let s = t.sub(s, v[1])?;
        let m = t.mul(s, v[0])?;
        let m = t.scale(m, -1.7);
        probe_sum(t, m)
    });
    assert_fd(&[randn(&[9], 3)], |t, v| {
        let g = t.gelu(v[0]);
        probe_sum(t, g)
    });
    assert_fd(&[randn(&[2, 3], 4), randn(&[2, 3], 5), randn(&[2, 3], 6)], |t, v| {
        let m = t.mean_of(v)?;
        probe_sum(t, m)
    });
}

#[test]
fn fd_norms_and_softmax() {
    assert_fd(&[randn(&[3, 6], 1), randn(&[6], 2), randn(&[6], 3)], |t, v| {
        let y = t.layer_norm(v[0], v[1], v[2], LAYER_NORM_EPS)?;
        probe_sum(t, y)
    });
    assert_fd(&[randn(&[2, 5], 4)], |t, v| {
        let y = t.softmax(v[0])?;
        probe_sum(t, y)
    });
    assert_fd(&[randn(&[7], 5)], |t, v| {
        let y = t.l2_normalize(v[0])?;
        probe_sum(t, y)
    });
}

#[test]
fn fd_causal_attention() {
    assert_fd(&[randn(&[2 * 4, 3 * 6], 1)], |t, v| {
        let y = t.causal_attention(v[0], 2, 4, 3)?;
        probe_sum(t, y)
    });
}

#[test]
fn fd_indexing_ops() {
    assert_fd(&[randn(&[6, 4], 1)], |t, v| {
        let e = t.embedding(v[0], &[3, 1, 3, 5])?;
        let r = t.select_rows(e, &[2, 0])?;
        let c = t.slice_cols(r, 1, 2)?;
        let a = t.concat_cols(&[c, r])?;
        let f = t.reshape(a, vec![12])?;
        probe_sum(t, f)
    });
    assert_fd(&[randn(&[5], 2), randn(&[5], 3)], |t, v| {
        let s = t.stack_rows(&[v[0], v[1], v[0]])?;
        probe_sum(t, s)
    });
    assert_fd(&[randn(&[5], 4)], |t, v| {
        let y = t.resample_linear(v[0], 8)?;
        probe_sum(t, y)
    });
    assert_fd(&[randn(&[9], 5)], |t, v| {
        let y = t.resample_linear(v[0], 4)?;
        probe_sum(t, y)
    });
}

#[test]
fn fd_inject() {
    for rows in [vec![0, 1, 2], vec![2]] {
        assert_fd(&[randn(&[3, 6], 1), randn(&[6], 2)], |t, v| {
            let y = t.inject(v[0], v[1], 0.25, &rows)?;
            probe_sum(t, y)
        });
    }
}

#[test]
fn fd_cross_entropy() {
    assert_fd(&[randn(&[3, 4], 1)], |t, v| t.cross_entropy(v[0], &[2, 0, 3]));
    assert_fd(&[randn(&[5], 2)], |t, v| t.cross_entropy(v[0], &[4]));
}

#[test]
fn fd_multi_head_attention() {
    let d = 8;
    let p = mha_params(d, 40);
    let mut inputs = vec![randn(&[d], 1), randn(&[d], 2), randn(&[d], 3)];
    inputs.extend(p.tensors().into_iter().cloned());
    assert_fd(&inputs, |t, v| {
        let mv = MhaVars {
            wq: v[3],
            bq: v[4],
            wk: v[5],
            bk: v[6],
            wv: v[7],
            bv: v[8],
            wo: v[9],
            bo: v[10],
        };
        let (o, _) = t.multi_head_attention(v[0], &[v[1], v[2]], &[v[1], v[2]], &mv, 4)?;
        probe_sum(t, o)
    });
}

#[test]
fn shape_errors_name_both_shapes() {
    let mut t = Tape::new();
    let a = t.constant(vec![2, 3], vec![0.0; 6]).unwrap();
    let b = t.constant(vec![2, 3], vec![0.0; 6]).unwrap();
    match t.matmul(a, b) {
        Err(Error::Dimension { left, right, .. }) => {
            assert_eq!(left, vec![2, 3]);
            assert_eq!(right, vec![2, 3]);
        }
        other => panic!("{other:?}"),
    }
    let c = t.constant(vec![3], vec![0.0; 3]).unwrap();
    assert!(matches!(t.add(a, c), Err(Error::Dimension { .. })));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn softmax_sums_to_one(x in prop::collection::vec(-50.0f64..50.0, 1..64)) {
        let y = softmax(&Tensor::vector(x)).unwrap();
        prop_assert!((y.data().iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(y.data().iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn normalize_has_unit_norm(x in prop::collection::vec(-10.0f64..10.0, 1..64)) {
        prop_assume!(norm2(&x) > 1e-6);
        let y = l2_normalize(&Tensor::vector(x)).unwrap();
        prop_assert!((norm2(y.data()) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn attention_weights_normalized(seed in 0u64..1000, n in 1usize..5) {
        let p = mha_params(8, seed);
        let q = randn(&[8], seed + 100);
        let ks: Vec<Tensor> = (0..n).map(|i| randn(&[8], seed + 200 + i as u64)).collect();
        let (_, w) = multi_head_attention(&q, &ks, &ks, &p, 4).unwrap();
        for h in w {
            prop_assert!((h.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn random_composite_matches_fd(seed in 0u64..10_000, rows in 1usize..5, width in 2usize..9) {
        let inputs = [randn(&[rows, width], seed), randn(&[width, width], seed + 1), randn(&[width], seed + 2)];
        let r = check(&inputs, 20, seed, |t, v| {
            let y = t.linear(v[0], v[1], Some(v[2]))?;
            let y = t.gelu(y);
            let ones = t.constant(vec![width], vec![1.0; width])?;
            let zeros = t.constant(vec![width], vec![0.0; width])?;
            let y = t.layer_norm(y, ones, zeros, LAYER_NORM_EPS)?;
            let y = t.softmax(y)?;
            probe_sum(t, y)
        }).unwrap();
        prop_assert!(r.max_rel_err < 1e-4, "{:?}", r);
    }

    #[test]
    fn frozen_inputs_never_receive_gradient(seed in 0u64..1000) {
        let w = randn(&[4, 4], seed).trainable();
        let mut frozen = randn(&[4], seed + 1);
        let mut tape = Tape::new();
        let (wv, fv) = (tape.param(&w), tape.param(&frozen));
        let y = tape.linear(fv, wv, None).unwrap();
        let l = tape.sum(y);
        let g = tape.backward(l).unwrap();
        g.accumulate_into(&mut frozen).unwrap();
        prop_assert!(frozen.grad().is_none());
        prop_assert!(g.for_tensor(&frozen).is_none());
    }
}
