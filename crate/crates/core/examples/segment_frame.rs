//! One frame through an untrained model: token grid, top-scoring local
//! queries, and the per-query masks and boxes.
//!
//! cargo run --example segment_frame -- [seed]

use propvis::model::{Model, ModelConfig};
use propvis::numcore::Graph;
use propvis::synth::scenario;

fn main() -> propvis::Result<()> {
    let seed: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let model = Model::new(ModelConfig::default(), seed)?;
    let clip = scenario("easy", seed)?;

    let mut g = Graph::new();
    let p = model.params.bind(&mut g);
    let state = model.initial_graph_state(&mut g, &p)?;
    let (out, _) = model.forward_frame(&mut g, &p, state, &clip.frames[0])?;

    println!("{} parameters", model.params.iter().map(|(_, t)| t.numel()).sum::<usize>());
    println!("local queries taken from tokens {:?}", out.local_indices);
    println!("class logits {:?}, mask logits {:?}", g.shape(out.class_logits), g.shape(out.mask_logits));
    for (q, (m, b)) in out.masks.iter().zip(&out.boxes).enumerate() {
        println!("query {q}: {:>2} mask cells, box ({:.2}, {:.2}, {:.2}, {:.2})", m.area(), b.cx, b.cy, b.w, b.h);
    }
    Ok(())
}
