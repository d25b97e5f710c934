use propvis::numcore::checkpoint;
use propvis::numcore::{grad_check, GradCheckOptions, Graph, ParamSet, Tensor, Var};
use propvis::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    // stay away from the ReLU kink at 0
    let data = (0..n)
        .map(|_| {
            let v: f64 = rng.gen_range(0.05..1.5);
            if rng.gen_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Reduces an arbitrary tensor to a scalar through a fixed random
/// weighting, so every output element gets a distinct upstream gradient.
fn weigh(g: &mut Graph, x: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    let shape = g.shape(x).to_vec();
    let w = random(&mut rng, &shape);
    let w = g.constant(shape, w.into_data()).unwrap();
    let y = g.mul(x, w).unwrap();
    g.sum(y)
}

type OpFn = fn(&mut Graph, &[Var]) -> Var;

fn check_op(name: &str, shapes: &[&[usize]], op: OpFn) {
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        let ids: Vec<_> = shapes
            .iter()
            .enumerate()
            .map(|(i, s)| ps.add(format!("x{i}"), random(&mut rng, s)))
            .collect();
        let report = grad_check(
            &ps,
            |g, p| {
                let vars: Vec<Var> = ids.iter().map(|&id| p.var(id)).collect();
                let out = op(g, &vars);
                Ok(weigh(g, out, seed))
            },
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.passed(), "{name}, seed {seed}: {:?}", report.params);
    }
}

#[test]
fn primitive_gradients_match_finite_differences() {
    check_op("matmul", &[&[3, 4], &[4, 2]], |g, v| g.matmul(v[0], v[1]).unwrap());
    check_op("matmul_nt", &[&[3, 4], &[5, 4]], |g, v| g.matmul_nt(v[0], v[1]).unwrap());
    check_op("add", &[&[2, 3], &[2, 3]], |g, v| g.add(v[0], v[1]).unwrap());
    check_op("sub", &[&[2, 3], &[2, 3]], |g, v| g.sub(v[0], v[1]).unwrap());
    check_op("mul", &[&[2, 3], &[2, 3]], |g, v| g.mul(v[0], v[1]).unwrap());
    check_op("add_row", &[&[4, 3], &[3]], |g, v| g.add_row(v[0], v[1]).unwrap());
    check_op("scale", &[&[2, 3]], |g, v| g.scale(v[0], -1.7));
    check_op("relu", &[&[3, 3]], |g, v| g.relu(v[0]));
    check_op("sigmoid", &[&[3, 3]], |g, v| g.sigmoid(v[0]));
    check_op("softmax rows", &[&[3, 5]], |g, v| g.softmax(v[0], 1).unwrap());
    check_op("softmax cols", &[&[3, 5]], |g, v| g.softmax(v[0], 0).unwrap());
    check_op("softmax masked", &[&[3, 4]], |g, v| {
        let mask = [
            true, false, true, false, //
            false, false, false, false, //
            false, true, true, true,
        ];
        g.softmax_masked(v[0], 1, Some(&mask)).unwrap()
    });
    check_op("layernorm", &[&[3, 6], &[6], &[6]], |g, v| g.layernorm(v[0], v[1], v[2], 1e-5).unwrap());
    check_op("slice_cols", &[&[3, 6]], |g, v| g.slice_cols(v[0], 2, 3).unwrap());
    check_op("concat_cols", &[&[3, 2], &[3, 4]], |g, v| g.concat_cols(&[v[0], v[1]]).unwrap());
    check_op("gather_rows", &[&[4, 3]], |g, v| g.gather_rows(v[0], &[3, 1, 3, 0]).unwrap());
    check_op("concat_rows", &[&[2, 3], &[1, 3]], |g, v| g.concat_rows(&[v[0], v[1]]).unwrap());
    check_op("sum", &[&[2, 3]], |g, v| g.sum(v[0]));
    check_op("mean", &[&[2, 3]], |g, v| g.mean(v[0]));
    check_op("focal", &[&[3, 4]], |g, v| {
        let t: Vec<f64> = (0..12).map(|i| (i % 3 == 0) as u8 as f64).collect();
        g.focal_loss_mean(v[0], &t, 0.25, 2.0).unwrap()
    });
    check_op("bce", &[&[3, 4]], |g, v| {
        let t: Vec<f64> = (0..12).map(|i| (i % 2) as f64).collect();
        g.bce_mean(v[0], &t).unwrap()
    });
    check_op("dice", &[&[1, 6]], |g, v| g.dice_loss(v[0], &[1.0, 1.0, 0.0, 0.0, 1.0, 0.0]).unwrap());
}

fn mlp_params(seed: u64) -> ParamSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ps = ParamSet::new();
    ps.add("w1", random(&mut rng, &[4, 6]));
    ps.add("b1", random(&mut rng, &[6]));
    ps.add("w2", random(&mut rng, &[6, 1]));
    ps.add("x", random(&mut rng, &[5, 4]));
    ps
}

fn mlp_loss(g: &mut Graph, p: &propvis::numcore::Bound, ps: &ParamSet) -> propvis::Result<Var> {
    let v = |n: &str| p.var(ps.id(n).unwrap());
    let h = g.matmul(v("x"), v("w1"))?;
    let h = g.add_row(h, v("b1"))?;
    let h = g.relu(h);
    let y = g.matmul(h, v("w2"))?;
    let y = g.mul(y, y)?;
    Ok(g.mean(y))
}

#[test]
fn two_layer_perceptron_passes_and_scaled_gradient_fails() {
    let ps = mlp_params(3);
    let ok = grad_check(&ps, |g, p| mlp_loss(g, p, &ps), &GradCheckOptions::default()).unwrap();
    assert!(ok.passed(), "{:?}", ok.params);
    assert_eq!(ok.params.len(), 4);
    let bad = grad_check(
        &ps,
        |g, p| mlp_loss(g, p, &ps),
        &GradCheckOptions {
            analytic_scale: 1.1,
            ..GradCheckOptions::default()
        },
    )
    .unwrap();
    assert!(!bad.passed());
}

#[test]
fn zero_parameter_function_is_vacuous_pass() {
    let ps = ParamSet::new();
    let r = grad_check(
        &ps,
        |g, _| {
            let c = g.constant(vec![1], vec![2.0])?;
            Ok(g.sum(c))
        },
        &GradCheckOptions::default(),
    )
    .unwrap();
    assert!(r.params.is_empty());
    assert!(r.passed());
}

#[test]
fn matmul_chain_within_1e6() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut ps = ParamSet::new();
    let a = ps.add("a", random(&mut rng, &[3, 4]));
    let b = ps.add("b", random(&mut rng, &[4, 5]));
    let c = ps.add("c", random(&mut rng, &[5, 2]));
    let r = grad_check(
        &ps,
        |g, p| {
            let ab = g.matmul(p.var(a), p.var(b))?;
            let abc = g.matmul(ab, p.var(c))?;
            Ok(weigh(g, abc, 1))
        },
        &GradCheckOptions {
            tol: 1e-6,
            ..GradCheckOptions::default()
        },
    )
    .unwrap();
    assert!(r.passed(), "{:?}", r.params);
}

#[test]
fn backward_is_linear_in_the_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random(&mut rng, &[3, 3]).with_grad();
    let grads = |which: u8| {
        let mut g = Graph::new();
        let v = g.leaf(&x);
        let s = g.sigmoid(v);
        let l1 = weigh(&mut g, s, 1);
        let t = g.mul(v, v).unwrap();
        let l2 = weigh(&mut g, t, 2);
        let loss = match which {
            0 => g.add(l1, l2).unwrap(),
            1 => l1,
            _ => l2,
        };
        g.backward(loss).unwrap();
        g.grad(v).unwrap().to_vec()
    };
    let (both, a, b) = (grads(0), grads(1), grads(2));
    for i in 0..9 {
        assert!((both[i] - (a[i] + b[i])).abs() <= 1e-12 * (1.0 + both[i].abs()));
    }
}

#[test]
fn repeated_use_accumulates() {
    let x = Tensor::new(vec![1], vec![2.0]).unwrap().with_grad();
    let mut g = Graph::new();
    let v = g.leaf(&x);
    let y = g.add(v, v).unwrap();
    let y = g.mul(y, v).unwrap();
    let l = g.sum(y);
    g.backward(l).unwrap();
    // d(2x²)/dx = 4x
    assert_eq!(g.grad(v).unwrap(), &[8.0]);
}

#[test]
fn operations_are_bit_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = random(&mut rng, &[4, 6]).with_grad();
        let gain = random(&mut rng, &[6]).with_grad();
        let bias = random(&mut rng, &[6]).with_grad();
        let mut g = Graph::new();
        let (va, vg, vb) = (g.leaf(&a), g.leaf(&gain), g.leaf(&bias));
        let n = g.layernorm(va, vg, vb, 1e-5).unwrap();
        let s = g.softmax(n, 1).unwrap();
        let l = weigh(&mut g, s, 4);
        g.backward(l).unwrap();
        (g.scalar_value(l).to_bits(), g.grad(va).unwrap().iter().map(|x| x.to_bits()).collect::<Vec<_>>())
    };
    assert_eq!(run(), run());
}

#[test]
fn tensor_shape_contract() {
    assert!(matches!(Tensor::new(vec![2, 3], vec![0.0; 5]), Err(Error::Dimension { .. })));
    assert!(Tensor::new(vec![0, 3], vec![]).is_err());
    let mut t = Tensor::zeros(vec![2, 2]).with_grad();
    assert!(t.grad.is_none());
    t.accumulate_grad(&[1.0, 2.0, 3.0, 4.0]);
    t.accumulate_grad(&[1.0, 1.0, 1.0, 1.0]);
    assert_eq!(t.grad.as_deref(), Some(&[2.0, 3.0, 4.0, 5.0][..]));
}

#[test]
fn checkpoint_round_trip_on_disk() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.bin");
    let entries = vec![
        ("a.b".to_string(), Tensor::new(vec![2], vec![1.5, -0.0]).unwrap()),
        ("c".to_string(), Tensor::new(vec![1, 3], vec![f64::MIN_POSITIVE, 1e300, 3.0]).unwrap()),
    ];
    checkpoint::save(&path, &entries).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(&bytes[..5], b"L2GV1");
    let back = checkpoint::load(&path).unwrap();
    assert_eq!(back.len(), 2);
    for ((n1, t1), (n2, t2)) in entries.iter().zip(&back) {
        assert_eq!(n1, n2);
        assert_eq!(t1.shape(), t2.shape());
        let bits = |t: &Tensor| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(t1), bits(t2));
    }
}

proptest! {
    #[test]
    fn softmax_is_a_distribution_and_shift_invariant(
        xs in prop::collection::vec(-30.0f64..30.0, 1..8),
        c in -100.0f64..100.0,
    ) {
        let n = xs.len();
        let mut g = Graph::new();
        let a = g.constant(vec![1, n], xs.clone()).unwrap();
        let b = g.constant(vec![1, n], xs.iter().map(|x| x + c).collect()).unwrap();
        let sa = g.softmax(a, 1).unwrap();
        let sb = g.softmax(b, 1).unwrap();
        let (pa, pb) = (g.data(sa).to_vec(), g.data(sb).to_vec());
        prop_assert!((pa.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for (x, y) in pa.iter().zip(&pb) {
            prop_assert!(*x > 0.0);
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn layernorm_normalizes(xs in prop::collection::vec(-100.0f64..100.0, 2..10)) {
        let n = xs.len();
        prop_assume!(xs.iter().any(|&x| (x - xs[0]).abs() > 1e-3));
        let mut g = Graph::new();
        let a = g.constant(vec![1, n], xs).unwrap();
        let gain = g.constant(vec![n], vec![1.0; n]).unwrap();
        let bias = g.constant(vec![n], vec![0.0; n]).unwrap();
        let y = g.layernorm(a, gain, bias, 1e-12).unwrap();
        let d = g.data(y);
        let mean = d.iter().sum::<f64>() / n as f64;
        let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        prop_assert!(mean.abs() < 1e-9);
        prop_assert!((var - 1.0).abs() < 1e-6);
    }

    #[test]
    fn finite_inputs_give_finite_outputs(xs in prop::collection::vec(-700.0f64..700.0, 4)) {
        let mut g = Graph::new();
        let a = g.constant(vec![2, 2], xs).unwrap();
        let s = g.sigmoid(a);
        let m = g.softmax(a, 0).unwrap();
        let f = g.focal_loss_mean(a, &[1.0, 0.0, 1.0, 0.0], 0.25, 2.0).unwrap();
        let b = g.bce_mean(a, &[1.0, 0.0, 0.0, 1.0]).unwrap();
        for v in [s, m, f, b] {
            prop_assert!(g.data(v).iter().all(|x| x.is_finite()));
        }
    }
}
