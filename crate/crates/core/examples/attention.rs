//! Multi-head attention on random tokens: shuffling the keys together
//! with their values leaves the output unchanged.
//!
//! cargo run --example attention

use propvis::nn::{attention, AttentionInputs, AttentionParams, Init};
use propvis::numcore::{Graph, ParamSet, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> propvis::Result<()> {
    let mut ps = ParamSet::new();
    let params = AttentionParams::new(&mut ps, &mut Init::new(0), "attn", 16, 4)?;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut random = |rows: usize| Tensor::new(vec![rows, 16], (0..rows * 16).map(|_| rng.gen_range(-1.0..1.0)).collect());
    let queries = random(3)?;
    let memory = random(6)?;

    let run = |mem: &Tensor| -> propvis::Result<Tensor> {
        let mut g = Graph::new();
        let p = ps.bind(&mut g);
        let (q, kv) = (g.leaf(&queries), g.leaf(mem));
        let inputs = AttentionInputs {
            queries: q,
            keys: kv,
            values: kv,
            query_pos: None,
            key_pos: None,
            mask: None,
        };
        let out = attention(&mut g, &p, &params, inputs)?;
        Ok(g.value(out))
    };

    let out = run(&memory)?;
    let shuffled = run(&memory.permute_rows(&[5, 2, 0, 4, 1, 3]))?;
    println!("output {:?}", out.shape());
    println!("first row {:.4?}", &out.row(0)[..4]);
    println!("max change after shuffling keys: {:.2e}", out.max_abs_diff(&shuffled));
    Ok(())
}
