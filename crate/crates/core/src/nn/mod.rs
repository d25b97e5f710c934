//! Transformer building blocks: affine maps, multi-head attention with
//! additive positional terms, post-norm encoder and decoder layers.

mod init;

pub use init::Init;

use crate::error::{Error, Result};
use crate::numcore::{Bound, Graph, ParamId, ParamSet, Var};

pub const LAYERNORM_EPS: f64 = 1e-5;

/// `x·W + b` with `W: [in × out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(ps: &mut ParamSet, init: &mut Init, name: &str, d_in: usize, d_out: usize) -> Self {
        let weight = ps.add(format!("{name}.weight"), init.weight(d_in, d_out));
        let bias = ps.add(format!("{name}.bias"), init.zeros(d_out));
        Linear {
            weight,
            bias,
            d_in,
            d_out,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let y = g.matmul(x, p.var(self.weight))?;
        g.add_row(y, p.var(self.bias))
    }
}

/// Two affine maps with a ReLU in between.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub hidden: Linear,
    pub output: Linear,
}

impl Mlp {
    pub fn new(ps: &mut ParamSet, init: &mut Init, name: &str, d_in: usize, d_hidden: usize, d_out: usize) -> Self {
        Mlp {
            hidden: Linear::new(ps, init, &format!("{name}.0"), d_in, d_hidden),
            output: Linear::new(ps, init, &format!("{name}.1"), d_hidden, d_out),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let h = self.hidden.forward(g, p, x)?;
        let h = g.relu(h);
        self.output.forward(g, p, h)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNormParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNormParams {
    pub fn new(ps: &mut ParamSet, init: &mut Init, name: &str, width: usize) -> Self {
        LayerNormParams {
            gain: ps.add(format!("{name}.gain"), init.ones(width)),
            bias: ps.add(format!("{name}.bias"), init.zeros(width)),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        g.layernorm(x, p.var(self.gain), p.var(self.bias), LAYERNORM_EPS)
    }
}

/// Multi-head attention projections.
#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
    pub width: usize,
}

impl AttentionParams {
    pub fn new(ps: &mut ParamSet, init: &mut Init, name: &str, width: usize, heads: usize) -> Result<Self> {
        if heads == 0 || width % heads != 0 {
            return Err(Error::config(format!(
                "attention width {width} is not divisible by {heads} heads"
            )));
        }
        Ok(AttentionParams {
            query: Linear::new(ps, init, &format!("{name}.wq"), width, width),
            key: Linear::new(ps, init, &format!("{name}.wk"), width, width),
            value: Linear::new(ps, init, &format!("{name}.wv"), width, width),
            output: Linear::new(ps, init, &format!("{name}.wo"), width, width),
            heads,
            width,
        })
    }
}

/// Inputs of one attention call. Positional terms are added to queries and
/// keys before projection; values never see them.
#[derive(Clone, Copy, Debug)]
pub struct AttentionInputs<'a> {
    pub queries: Var,
    pub keys: Var,
    pub values: Var,
    pub query_pos: Option<Var>,
    pub key_pos: Option<Var>,
    /// Row-major `[Nq × Nk]`; `false` blocks a key. Rows with no open key
    /// attend everywhere.
    pub mask: Option<&'a [bool]>,
}

pub fn attention(g: &mut Graph, p: &Bound, params: &AttentionParams, inp: AttentionInputs<'_>) -> Result<Var> {
    let c = params.width;
    for v in [inp.queries, inp.keys, inp.values] {
        if g.shape(v).len() != 2 || g.shape(v)[1] != c {
            return Err(Error::Dimension {
                op: "attention",
                lhs: g.shape(v).to_vec(),
                rhs: vec![c],
            });
        }
    }
    let nq = g.shape(inp.queries)[0];
    let nk = g.shape(inp.keys)[0];
    if g.shape(inp.values)[0] != nk {
        return Err(Error::Dimension {
            op: "attention",
            lhs: g.shape(inp.keys).to_vec(),
            rhs: g.shape(inp.values).to_vec(),
        });
    }
    if let Some(m) = inp.mask {
        if m.len() != nq * nk {
            return Err(Error::Dimension {
                op: "attention mask",
                lhs: vec![nq, nk],
                rhs: vec![m.len()],
            });
        }
    }
    let q_in = g.add_opt(inp.queries, inp.query_pos)?;
    let k_in = g.add_opt(inp.keys, inp.key_pos)?;
    let q = params.query.forward(g, p, q_in)?;
    let k = params.key.forward(g, p, k_in)?;
    let v = params.value.forward(g, p, inp.values)?;

    let d = c / params.heads;
    let scale = 1.0 / (d as f64).sqrt();
    let mut heads = Vec::with_capacity(params.heads);
    for h in 0..params.heads {
        let (qh, kh, vh) = if params.heads == 1 {
            (q, k, v)
        } else {
            (
                g.slice_cols(q, h * d, d)?,
                g.slice_cols(k, h * d, d)?,
                g.slice_cols(v, h * d, d)?,
            )
        };
        let logits = g.matmul_nt(qh, kh)?;
        let logits = g.scale(logits, scale);
        let weights = g.softmax_masked(logits, 1, inp.mask)?;
        heads.push(g.matmul(weights, vh)?);
    }
    let joined = if heads.len() == 1 {
        heads[0]
    } else {
        g.concat_cols(&heads)?
    };
    params.output.forward(g, p, joined)
}

/// Self-attention, feed-forward, each followed by residual and layer norm.
#[derive(Clone, Debug)]
pub struct EncoderLayerParams {
    pub self_attn: AttentionParams,
    pub ffn: Mlp,
    pub norm1: LayerNormParams,
    pub norm2: LayerNormParams,
}

impl EncoderLayerParams {
    pub fn new(ps: &mut ParamSet, init: &mut Init, name: &str, width: usize, heads: usize, ffn: usize) -> Result<Self> {
        Ok(EncoderLayerParams {
            self_attn: AttentionParams::new(ps, init, &format!("{name}.self_attn"), width, heads)?,
            ffn: Mlp::new(ps, init, &format!("{name}.ffn"), width, ffn, width),
            norm1: LayerNormParams::new(ps, init, &format!("{name}.norm1"), width),
            norm2: LayerNormParams::new(ps, init, &format!("{name}.norm2"), width),
        })
    }
}

pub fn encoder_layer(g: &mut Graph, p: &Bound, params: &EncoderLayerParams, x: Var, pos: Option<Var>) -> Result<Var> {
    let a = attention(
        g,
        p,
        &params.self_attn,
        AttentionInputs {
            queries: x,
            keys: x,
            values: x,
            query_pos: pos,
            key_pos: pos,
            mask: None,
        },
    )?;
    let x = g.add(x, a)?;
    let x = params.norm1.forward(g, p, x)?;
    let f = params.ffn.forward(g, p, x)?;
    let x = g.add(x, f)?;
    params.norm2.forward(g, p, x)
}

#[derive(Clone, Debug)]
pub struct DecoderLayerParams {
    pub self_attn: AttentionParams,
    pub cross_attn: AttentionParams,
    pub ffn: Mlp,
    pub norm1: LayerNormParams,
    pub norm2: LayerNormParams,
    pub norm3: LayerNormParams,
}

impl DecoderLayerParams {
    pub fn new(ps: &mut ParamSet, init: &mut Init, name: &str, width: usize, heads: usize, ffn: usize) -> Result<Self> {
        if ffn < width {
            return Err(Error::config(format!(
                "feed-forward width {ffn} must be at least the model width {width}"
            )));
        }
        Ok(DecoderLayerParams {
            self_attn: AttentionParams::new(ps, init, &format!("{name}.self_attn"), width, heads)?,
            cross_attn: AttentionParams::new(ps, init, &format!("{name}.cross_attn"), width, heads)?,
            ffn: Mlp::new(ps, init, &format!("{name}.ffn"), width, ffn, width),
            norm1: LayerNormParams::new(ps, init, &format!("{name}.norm1"), width),
            norm2: LayerNormParams::new(ps, init, &format!("{name}.norm2"), width),
            norm3: LayerNormParams::new(ps, init, &format!("{name}.norm3"), width),
        })
    }
}

/// Width settings for a stand-alone decoder layer.
#[derive(Clone, Copy, Debug)]
pub struct DecoderLayerSpec {
    pub width: usize,
    pub heads: usize,
    pub ffn: usize,
}

/// Initializes one decoder layer into a fresh parameter set.
pub fn init_decoder_layer(spec: DecoderLayerSpec, seed: u64) -> Result<(ParamSet, DecoderLayerParams)> {
    if spec.width == 0 || spec.heads == 0 || spec.ffn == 0 {
        return Err(Error::config("decoder layer widths must be positive"));
    }
    let mut ps = ParamSet::new();
    let mut init = Init::new(seed);
    let layer = DecoderLayerParams::new(&mut ps, &mut init, "layer", spec.width, spec.heads, spec.ffn)?;
    Ok((ps, layer))
}

/// Queries and memory of one decoder layer call.
#[derive(Clone, Copy, Debug)]
pub struct DecoderInputs<'a> {
    pub queries: Var,
    pub query_pos: Option<Var>,
    pub memory: Var,
    pub memory_pos: Option<Var>,
    pub cross_mask: Option<&'a [bool]>,
}

/// Post-norm decoder layer: self-attention, cross-attention over memory,
/// feed-forward.
pub fn decoder_layer(g: &mut Graph, p: &Bound, params: &DecoderLayerParams, inp: DecoderInputs<'_>) -> Result<Var> {
    let x = inp.queries;
    let a = attention(
        g,
        p,
        &params.self_attn,
        AttentionInputs {
            queries: x,
            keys: x,
            values: x,
            query_pos: inp.query_pos,
            key_pos: inp.query_pos,
            mask: None,
        },
    )?;
    let x = g.add(x, a)?;
    let x = params.norm1.forward(g, p, x)?;
    let a = attention(
        g,
        p,
        &params.cross_attn,
        AttentionInputs {
            queries: x,
            keys: inp.memory,
            values: inp.memory,
            query_pos: inp.query_pos,
            key_pos: inp.memory_pos,
            mask: inp.cross_mask,
        },
    )?;
    let x = g.add(x, a)?;
    let x = params.norm2.forward(g, p, x)?;
    let f = params.ffn.forward(g, p, x)?;
    let x = g.add(x, f)?;
    params.norm3.forward(g, p, x)
}
