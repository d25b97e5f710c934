use propvis::nn::{
    attention, decoder_layer, init_decoder_layer, AttentionInputs, AttentionParams, DecoderInputs, DecoderLayerSpec, Init,
};
use propvis::numcore::{grad_check, GradCheckOptions, Graph, ParamId, ParamSet, Tensor, Var};
use propvis::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
}

fn set(ps: &mut ParamSet, id: ParamId, values: &[f64]) {
    ps.get_mut(id).data_mut().copy_from_slice(values);
}

fn attn_setup(width: usize, heads: usize, seed: u64) -> (ParamSet, AttentionParams) {
    let mut ps = ParamSet::new();
    let mut init = Init::new(seed);
    let a = AttentionParams::new(&mut ps, &mut init, "attn", width, heads).unwrap();
    (ps, a)
}

fn run_attention(
    ps: &ParamSet,
    a: &AttentionParams,
    q: &Tensor,
    kv: &Tensor,
    q_pos: Option<&Tensor>,
    k_pos: Option<&Tensor>,
) -> Tensor {
    let mut g = Graph::new();
    let p = ps.bind(&mut g);
    let (q, kv) = (g.leaf(q), g.leaf(kv));
    let q_pos = q_pos.map(|t| g.leaf(t));
    let k_pos = k_pos.map(|t| g.leaf(t));
    let out = attention(
        &mut g,
        &p,
        a,
        AttentionInputs {
            queries: q,
            keys: kv,
            values: kv,
            query_pos: q_pos,
            key_pos: k_pos,
            mask: None,
        },
    )
    .unwrap();
    g.value(out)
}

fn affine(x: &[f64], w: &Tensor, b: &Tensor) -> Vec<f64> {
    let (din, dout) = (w.rows(), w.cols());
    (0..dout)
        .map(|j| (0..din).map(|i| x[i] * w.get2(i, j)).sum::<f64>() + b.data()[j])
        .collect()
}

#[test]
fn single_key_returns_projected_value() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (ps, a) = attn_setup(8, 2, 1);
    let q = random(&mut rng, 3, 8, 1.0);
    let kv = random(&mut rng, 1, 8, 1.0);
    let out = run_attention(&ps, &a, &q, &kv, None, None);
    let v = affine(kv.row(0), ps.get(a.value.weight), ps.get(a.value.bias));
    let want = affine(&v, ps.get(a.output.weight), ps.get(a.output.bias));
    for r in 0..3 {
        for (x, y) in out.row(r).iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn hand_computed_single_head() {
    let (mut ps, a) = attn_setup(2, 1, 0);
    // Wq = I, Wk = 2I, Wv = [[1,1],[0,1]], Wo = I, biases zero except bv
    set(&mut ps, a.query.weight, &[1.0, 0.0, 0.0, 1.0]);
    set(&mut ps, a.key.weight, &[2.0, 0.0, 0.0, 2.0]);
    set(&mut ps, a.value.weight, &[1.0, 1.0, 0.0, 1.0]);
    set(&mut ps, a.output.weight, &[1.0, 0.0, 0.0, 1.0]);
    for id in [a.query.bias, a.key.bias, a.output.bias] {
        set(&mut ps, id, &[0.0, 0.0]);
    }
    set(&mut ps, a.value.bias, &[0.5, -0.5]);
    let q = Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
    let kv = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let out = run_attention(&ps, &a, &q, &kv, None, None);

    // logits: q·k_j / √2 with k = 2·kv → [2/√2, 0]
    let l0 = 2.0 / 2f64.sqrt();
    let w0 = l0.exp() / (l0.exp() + 1.0);
    let w1 = 1.0 - w0;
    // values: kv·Wv + bv → [1.5, 0.5] and [0.5, 0.5]
    let want = [w0 * 1.5 + w1 * 0.5, w0 * 0.5 + w1 * 0.5];
    assert!((out.data()[0] - want[0]).abs() < 1e-14);
    assert!((out.data()[1] - want[1]).abs() < 1e-14);
}

#[test]
fn key_value_permutation_leaves_output_unchanged() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (ps, a) = attn_setup(8, 4, 2);
    let q = random(&mut rng, 3, 8, 1.0);
    let kv = random(&mut rng, 5, 8, 1.0);
    let kp = random(&mut rng, 5, 8, 1.0);
    let perm = [3, 0, 4, 1, 2];
    let base = run_attention(&ps, &a, &q, &kv, None, Some(&kp));
    let moved = run_attention(&ps, &a, &q, &kv.permute_rows(&perm), None, Some(&kp.permute_rows(&perm)));
    assert!(base.max_abs_diff(&moved) < 1e-12);
}

#[test]
fn identity_projections_give_convex_combinations() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut ps, a) = attn_setup(4, 2, 3);
    let eye = Tensor::identity(4);
    for l in [&a.value, &a.output] {
        set(&mut ps, l.weight, eye.data());
        set(&mut ps, l.bias, &[0.0; 4]);
    }
    let q = random(&mut rng, 6, 4, 2.0);
    let kv = random(&mut rng, 5, 4, 2.0);
    let out = run_attention(&ps, &a, &q, &kv, None, None);
    for r in 0..6 {
        for c in 0..4 {
            let col: Vec<f64> = (0..5).map(|k| kv.get2(k, c)).collect();
            let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let v = out.get2(r, c);
            assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
        }
    }
}

#[test]
fn width_contracts() {
    let mut ps = ParamSet::new();
    let mut init = Init::new(0);
    assert!(matches!(AttentionParams::new(&mut ps, &mut init, "a", 10, 4), Err(Error::Config(_))));
    let spec = DecoderLayerSpec {
        width: 16,
        heads: 4,
        ffn: 8,
    };
    assert!(init_decoder_layer(spec, 0).is_err());
}

struct LayerRun {
    out: Tensor,
}

fn run_layer(seed: u64, q: &Tensor, qp: &Tensor, mem: &Tensor, mp: &Tensor) -> LayerRun {
    let spec = DecoderLayerSpec {
        width: 16,
        heads: 4,
        ffn: 32,
    };
    let (ps, layer) = init_decoder_layer(spec, seed).unwrap();
    let mut g = Graph::new();
    let p = ps.bind(&mut g);
    let vars: Vec<Var> = [q, qp, mem, mp].iter().map(|t| g.leaf(t)).collect();
    let out = decoder_layer(
        &mut g,
        &p,
        &layer,
        DecoderInputs {
            queries: vars[0],
            query_pos: Some(vars[1]),
            memory: vars[2],
            memory_pos: Some(vars[3]),
            cross_mask: None,
        },
    )
    .unwrap();
    LayerRun { out: g.value(out) }
}

#[test]
fn decoder_layer_shape_and_query_equivariance() {
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = random(&mut rng, 6, 16, 1.0);
        let qp = random(&mut rng, 6, 16, 1.0);
        let mem = random(&mut rng, 9, 16, 1.0);
        let mp = random(&mut rng, 9, 16, 1.0);
        let base = run_layer(seed, &q, &qp, &mem, &mp).out;
        assert_eq!(base.shape(), &[6, 16]);
        let perm = [5, 2, 0, 1, 4, 3];
        let moved = run_layer(seed, &q.permute_rows(&perm), &qp.permute_rows(&perm), &mem, &mp).out;
        assert!(base.permute_rows(&perm).max_abs_diff(&moved) < 1e-9);
    }
}

#[test]
fn post_norm_stack_stays_finite_on_large_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let q = random(&mut rng, 4, 16, 1e3);
    let qp = random(&mut rng, 4, 16, 1e3);
    let mem = random(&mut rng, 7, 16, 1e3);
    let mp = random(&mut rng, 7, 16, 1e3);
    assert!(run_layer(4, &q, &qp, &mem, &mp).out.all_finite());
}

#[test]
fn decoder_layer_gradients_match_finite_differences() {
    let spec = DecoderLayerSpec {
        width: 8,
        heads: 2,
        ffn: 16,
    };
    let (mut ps, layer) = init_decoder_layer(spec, 7).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let q = ps.add("in.q", random(&mut rng, 3, 8, 1.0));
    let qp = ps.add("in.qp", random(&mut rng, 3, 8, 1.0));
    let mem = ps.add("in.mem", random(&mut rng, 5, 8, 1.0));
    let mp = ps.add("in.mp", random(&mut rng, 5, 8, 1.0));
    let weights = random(&mut rng, 3, 8, 1.0);
    let mask = [
        true, false, true, true, false, //
        false, false, false, false, false, //
        true, true, true, false, true,
    ];
    let report = grad_check(
        &ps,
        |g, p| {
            let out = decoder_layer(
                g,
                p,
                &layer,
                DecoderInputs {
                    queries: p.var(q),
                    query_pos: Some(p.var(qp)),
                    memory: p.var(mem),
                    memory_pos: Some(p.var(mp)),
                    cross_mask: Some(&mask),
                },
            )?;
            let w = g.leaf(&weights);
            let y = g.mul(out, w)?;
            Ok(g.sum(y))
        },
        &GradCheckOptions::default(),
    )
    .unwrap();
    assert!(report.passed(), "max error {}", report.max_error());
}

#[test]
fn init_is_deterministic_per_seed() {
    let spec = DecoderLayerSpec {
        width: 16,
        heads: 4,
        ffn: 32,
    };
    let (a, _) = init_decoder_layer(spec, 5).unwrap();
    let (b, _) = init_decoder_layer(spec, 5).unwrap();
    let (c, _) = init_decoder_layer(spec, 6).unwrap();
    let flat = |ps: &ParamSet| ps.iter().flat_map(|(_, t)| t.data().to_vec()).collect::<Vec<_>>();
    assert_eq!(flat(&a), flat(&b));
    assert_ne!(flat(&a), flat(&c));
    // biases start at zero
    for (name, t) in a.iter() {
        if name.ends_with(".bias") && !name.contains("norm") {
            assert!(t.data().iter().all(|&x| x == 0.0), "{name}");
        }
    }
}

#[test]
fn init_mean_is_within_three_standard_errors() {
    let mut init = Init::new(42);
    let w = init.weight(100, 100);
    let n = w.numel() as f64;
    let bound = 1.0 / 100f64.sqrt();
    // uniform on [-b, b] has standard deviation b/√3
    let se = bound / 3f64.sqrt() / n.sqrt();
    let mean = w.data().iter().sum::<f64>() / n;
    assert!(mean.abs() < 3.0 * se, "mean {mean}, se {se}");
    assert!(w.data().iter().all(|x| x.abs() <= bound));
}
