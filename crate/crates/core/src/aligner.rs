//! Local-to-global query alignment.
//!
//! Propagated (global) queries attend over the current frame's local
//! queries before the segmentation decoder sees them. Global queries keep
//! their row order, so query `i` keeps tracking the same instance.

use crate::error::{Error, Result};
use crate::nn::{decoder_layer, DecoderInputs, DecoderLayerParams, Init};
use crate::numcore::{Bound, Graph, ParamId, ParamSet, Tensor, Var};

#[derive(Clone, Debug)]
pub struct AlignerParams {
    pub layers: Vec<DecoderLayerParams>,
    /// Learnable `[N × c]` queries standing in for the global queries at
    /// the first frame of a video.
    pub bootstrap: ParamId,
}

impl AlignerParams {
    pub fn new(
        ps: &mut ParamSet,
        init: &mut Init,
        num_layers: usize,
        num_queries: usize,
        width: usize,
        heads: usize,
        ffn: usize,
    ) -> Result<Self> {
        let layers = (0..num_layers)
            .map(|i| DecoderLayerParams::new(ps, init, &format!("aligner.layers.{i}"), width, heads, ffn))
            .collect::<Result<Vec<_>>>()?;
        let bootstrap = ps.add("aligner.bootstrap", init.table(num_queries, width));
        Ok(AlignerParams { layers, bootstrap })
    }
}

/// Aligns `q_global` (with positional term `g_pos`) to the local queries
/// `q_local` (with positional term `l_pos`). Returns `[N × c]` in the row
/// order of `q_global`.
pub fn align(
    g: &mut Graph,
    p: &Bound,
    params: &AlignerParams,
    q_global: Var,
    q_local: Var,
    g_pos: Var,
    l_pos: Var,
) -> Result<Var> {
    let check = |a: Var, b: Var, g: &Graph| -> Result<()> {
        if g.shape(a) != g.shape(b) {
            return Err(Error::Dimension {
                op: "align",
                lhs: g.shape(a).to_vec(),
                rhs: g.shape(b).to_vec(),
            });
        }
        Ok(())
    };
    check(q_global, g_pos, g)?;
    check(q_local, l_pos, g)?;
    if g.shape(q_global)[1] != g.shape(q_local)[1] {
        return Err(Error::Dimension {
            op: "align",
            lhs: g.shape(q_global).to_vec(),
            rhs: g.shape(q_local).to_vec(),
        });
    }
    let mut q = q_global;
    for layer in &params.layers {
        q = decoder_layer(
            g,
            p,
            layer,
            DecoderInputs {
                queries: q,
                query_pos: Some(g_pos),
                memory: q_local,
                memory_pos: Some(l_pos),
                cross_mask: None,
            },
        )?;
    }
    Ok(q)
}

/// First-frame global queries.
pub fn bootstrap(ps: &ParamSet, params: &AlignerParams) -> Tensor {
    let mut t = ps.get(params.bootstrap).clone();
    t.requires_grad = false;
    t.grad = None;
    t
}
