//! From a binary mask to its box, its sinusoidal code and the learned
//! positional embedding.
//!
//! cargo run --example box_embedding

use propvis::mask::BinaryMask;
use propvis::nn::Init;
use propvis::numcore::{Graph, ParamSet};
use propvis::posembed::{mask2box, sinusoidal_box_encode, BoxEmbedder};

fn main() -> propvis::Result<()> {
    let mut mask = BinaryMask::empty(8, 8);
    for r in 2..5 {
        for c in 1..7 {
            mask.set(r, c, true);
        }
    }
    let b = mask2box(&mask);
    println!("box cx={:.4} cy={:.4} w={:.4} h={:.4}", b.cx, b.cy, b.w, b.h);
    println!("empty mask box {:?}", mask2box(&BinaryMask::empty(8, 8)));

    let code = sinusoidal_box_encode(&b, 8)?;
    println!("sinusoidal code ({} values) starts {:.4?}", code.len(), &code[..4]);

    let mut ps = ParamSet::new();
    let embedder = BoxEmbedder::new(&mut ps, &mut Init::new(3), "box_mlp", 32)?;
    let mut g = Graph::new();
    let p = ps.bind(&mut g);
    let e = embedder.embed_masks(&mut g, &p, &[mask, BinaryMask::full(8, 8)])?;
    println!("embeddings {:?}", g.shape(e));
    Ok(())
}
