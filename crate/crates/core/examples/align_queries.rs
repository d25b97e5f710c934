//! The local-to-global aligner: global queries attend to the current
//! frame's local queries. The output does not depend on the order of the
//! local queries.
//!
//! cargo run --example align_queries

use propvis::aligner::{align, bootstrap};
use propvis::model::{Model, ModelConfig};
use propvis::numcore::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> propvis::Result<()> {
    let model = Model::new(ModelConfig::default(), 2)?;
    let (k, c) = (model.config.num_local, model.config.width);
    let q_global = bootstrap(&model.params, &model.aligner);
    let g_pos = Tensor::zeros(q_global.shape().to_vec());
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut random = || Tensor::new(vec![k, c], (0..k * c).map(|_| rng.gen_range(-1.0..1.0)).collect());
    let (q_local, l_pos) = (random()?, random()?);

    let run = |ql: &Tensor, lp: &Tensor| -> propvis::Result<Tensor> {
        let mut g = Graph::new();
        let p = model.params.bind(&mut g);
        let v = [&q_global, ql, &g_pos, lp].map(|t| g.leaf(t));
        let out = align(&mut g, &p, &model.aligner, v[0], v[1], v[2], v[3])?;
        Ok(g.value(out))
    };
    let aligned = run(&q_local, &l_pos)?;
    let order: Vec<usize> = (0..k).rev().collect();
    let reversed = run(&q_local.permute_rows(&order), &l_pos.permute_rows(&order))?;
    println!("{} aligner parameters", model.num_aligner_params());
    println!("aligned queries {:?}, moved by {:.3}", aligned.shape(), aligned.max_abs_diff(&q_global));
    println!("change when local queries are reversed: {:.2e}", aligned.max_abs_diff(&reversed));
    Ok(())
}
