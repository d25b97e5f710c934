//! Desk-scale mask-classification segmenter: a two-scale patch encoder,
//! confidence-based local query selection, a mask-restricted decoder with
//! per-layer positional refinement, and the class/mask prediction heads.

use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::nn::{decoder_layer, encoder_layer, DecoderInputs, DecoderLayerParams, EncoderLayerParams, Linear, Mlp};
use crate::numcore::{Bound, Decision, Graph, Tensor, Var};
use crate::posembed::{binarize_masks, grid_position_encoding, mask2box, BoxCxCyWH, BoxEmbedder};

/// One RGB frame, `[3 × H × W]` with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub pixels: Tensor,
}

impl Frame {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        Ok(Frame {
            pixels: Tensor::new(vec![3, height, width], data)?,
        })
    }

    pub fn constant(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        let data = rgb
            .iter()
            .flat_map(|&v| std::iter::repeat(v).take(height * width))
            .collect();
        Frame::new(height, width, data).expect("positive frame size")
    }

    pub fn height(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[2]
    }

    pub fn at(&self, ch: usize, r: usize, c: usize) -> f64 {
        self.pixels.data()[(ch * self.height() + r) * self.width() + c]
    }
}

/// Splits a frame into non-overlapping `patch × patch` cells, one row per
/// cell in row-major cell order, each row ordered (channel, dy, dx).
pub fn patchify(frame: &Frame, patch: usize) -> Result<Tensor> {
    let (h, w) = (frame.height(), frame.width());
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::config(format!(
            "frame {h}×{w} is not divisible by patch size {patch}"
        )));
    }
    let (gr, gc) = (h / patch, w / patch);
    let mut data = Vec::with_capacity(h * w * 3);
    for pr in 0..gr {
        for pc in 0..gc {
            for ch in 0..3 {
                for dy in 0..patch {
                    for dx in 0..patch {
                        data.push(frame.at(ch, pr * patch + dy, pc * patch + dx));
                    }
                }
            }
        }
    }
    Tensor::new(vec![gr * gc, 3 * patch * patch], data)
}

/// Token grid geometry of the two encoder scales.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenGrid {
    pub fine_rows: usize,
    pub fine_cols: usize,
    pub coarse_rows: usize,
    pub coarse_cols: usize,
}

impl TokenGrid {
    pub fn new(height: usize, width: usize, patch: usize) -> Result<Self> {
        if patch == 0 || height % (2 * patch) != 0 || width % (2 * patch) != 0 {
            return Err(Error::config(format!(
                "frame {height}×{width} must be divisible by twice the patch size {patch} for the coarse scale"
            )));
        }
        Ok(TokenGrid {
            fine_rows: height / patch,
            fine_cols: width / patch,
            coarse_rows: height / (2 * patch),
            coarse_cols: width / (2 * patch),
        })
    }

    pub fn fine_len(&self) -> usize {
        self.fine_rows * self.fine_cols
    }

    pub fn coarse_len(&self) -> usize {
        self.coarse_rows * self.coarse_cols
    }

    pub fn num_tokens(&self) -> usize {
        self.fine_len() + self.coarse_len()
    }

    /// Which tokens a query may attend to given its mask at the fine grid.
    /// A coarse token is open when any of its four fine cells is.
    pub fn token_mask(&self, mask: &BinaryMask) -> Vec<bool> {
        let mut out = Vec::with_capacity(self.num_tokens());
        out.extend_from_slice(mask.data());
        for r in 0..self.coarse_rows {
            for c in 0..self.coarse_cols {
                let any = (0..2).any(|dy| (0..2).any(|dx| mask.get(2 * r + dy, 2 * c + dx)));
                out.push(any);
            }
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct EncoderParams {
    pub patch_fine: Linear,
    pub patch_coarse: Linear,
    pub layers: Vec<EncoderLayerParams>,
    pub pixel_embed: Linear,
    pub patch: usize,
}

/// Class and mask prediction heads, shared between token scoring and the
/// final per-query predictions.
#[derive(Clone, Debug)]
pub struct Heads {
    pub class_head: Linear,
    pub mask_head: Mlp,
    pub num_classes: usize,
}

/// Encoder output for one frame.
#[derive(Clone, Debug)]
pub struct FrameFeatures {
    /// `[M × c]`, fine tokens first then coarse.
    pub tokens: Var,
    /// `[M × c]` fixed sinusoidal cell-center encodings.
    pub token_pos: Var,
    /// `[H'·W' × c]` per-location embeddings at the fine (mask) grid.
    pub pixel_embed: Var,
    pub grid: TokenGrid,
}

pub fn encode_frame(g: &mut Graph, p: &Bound, params: &EncoderParams, frame: &Frame) -> Result<FrameFeatures> {
    let grid = TokenGrid::new(frame.height(), frame.width(), params.patch)?;
    let c = params.pixel_embed.d_out;
    let fine = patchify(frame, params.patch)?;
    let coarse = patchify(frame, 2 * params.patch)?;
    let fine = g.leaf(&fine);
    let coarse = g.leaf(&coarse);
    let fine = params.patch_fine.forward(g, p, fine)?;
    let coarse = params.patch_coarse.forward(g, p, coarse)?;
    let mut tokens = g.concat_rows(&[fine, coarse])?;

    let mut pos = grid_position_encoding(grid.fine_rows, grid.fine_cols, c)?;
    pos.extend(grid_position_encoding(grid.coarse_rows, grid.coarse_cols, c)?);
    let token_pos = g.constant(vec![grid.num_tokens(), c], pos)?;

    for layer in &params.layers {
        tokens = encoder_layer(g, p, layer, tokens, Some(token_pos))?;
    }
    let fine_idx: Vec<usize> = (0..grid.fine_len()).collect();
    let fine_out = g.gather_rows(tokens, &fine_idx)?;
    let pixel_embed = params.pixel_embed.forward(g, p, fine_out)?;
    Ok(FrameFeatures {
        tokens,
        token_pos,
        pixel_embed,
        grid,
    })
}

/// Indices of the `k` highest scores in descending order; equal scores keep
/// the lower index first.
pub fn top_k_by_score(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    if k > scores.len() {
        return Err(Error::config(format!(
            "cannot select {k} local queries from {} tokens",
            scores.len()
        )));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    Ok(idx)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Maximum foreground class probability per row of `[R × (C+1)]` logits.
pub fn foreground_scores(logits: &[f64], num_classes: usize) -> Vec<f64> {
    logits
        .chunks(num_classes + 1)
        .map(|row| row[..num_classes].iter().map(|&l| sigmoid(l)).fold(0.0, f64::max))
        .collect()
}

/// Local queries: the `k` encoder tokens the class head is most confident
/// about, gathered in descending score order.
pub fn select_local_queries(g: &mut Graph, p: &Bound, features: &FrameFeatures, heads: &Heads, k: usize) -> Result<(Var, Vec<usize>)> {
    let logits = heads.class_head.forward(g, p, features.tokens)?;
    let scores = foreground_scores(g.data(logits), heads.num_classes);
    let computed = top_k_by_score(&scores, k)?;
    let Decision::Indices(indices) = g.decide(Decision::Indices(computed))? else {
        return Err(Error::contract("expected an index decision"));
    };
    let q_local = g.gather_rows(features.tokens, &indices)?;
    Ok((q_local, indices))
}

/// `[N × H'W']` mask logits: each query's mask embedding dotted with every
/// pixel embedding.
pub fn mask_logits(g: &mut Graph, p: &Bound, heads: &Heads, queries: Var, pixel_embed: Var) -> Result<Var> {
    let e = heads.mask_head.forward(g, p, queries)?;
    g.matmul_nt(e, pixel_embed)
}

/// Prediction head outputs still attached to the graph.
#[derive(Clone, Debug)]
pub struct HeadOutputs {
    pub class_logits: Var,
    pub mask_logits: Var,
    pub masks: Vec<BinaryMask>,
    pub boxes: Vec<BoxCxCyWH>,
}

pub fn predict_heads(g: &mut Graph, p: &Bound, queries: Var, features: &FrameFeatures, heads: &Heads) -> Result<HeadOutputs> {
    let class_logits = heads.class_head.forward(g, p, queries)?;
    let mask_logits = mask_logits(g, p, heads, queries, features.pixel_embed)?;
    let masks = binarize_masks(g, mask_logits, features.grid.fine_rows, features.grid.fine_cols)?;
    let boxes = masks.iter().map(mask2box).collect();
    Ok(HeadOutputs {
        class_logits,
        mask_logits,
        masks,
        boxes,
    })
}

#[derive(Clone, Debug)]
pub struct DecoderParams {
    pub layers: Vec<DecoderLayerParams>,
}

/// Decoder output: refined queries and the binarized mask after every layer.
#[derive(Clone, Debug)]
pub struct DecodeOutput {
    pub queries: Var,
    pub per_layer_masks: Vec<Vec<BinaryMask>>,
}

/// Runs the decoder layers over the frame tokens. After each layer the
/// current masks restrict the next layer's cross-attention and, when
/// `box_embed` is given, the positional embeddings are recomputed from the
/// masks' boxes.
pub fn segmentation_decode(
    g: &mut Graph,
    p: &Bound,
    params: &DecoderParams,
    heads: &Heads,
    box_embed: Option<&BoxEmbedder>,
    q_global: Var,
    g_pos: Var,
    features: &FrameFeatures,
) -> Result<DecodeOutput> {
    if g.shape(q_global) != g.shape(g_pos) {
        return Err(Error::Dimension {
            op: "segmentation_decode",
            lhs: g.shape(q_global).to_vec(),
            rhs: g.shape(g_pos).to_vec(),
        });
    }
    let grid = features.grid;
    let mut queries = q_global;
    let mut pos = g_pos;
    let mut attn_mask: Option<Vec<bool>> = None;
    let mut per_layer_masks = Vec::with_capacity(params.layers.len());
    for (l, layer) in params.layers.iter().enumerate() {
        queries = decoder_layer(
            g,
            p,
            layer,
            DecoderInputs {
                queries,
                query_pos: Some(pos),
                memory: features.tokens,
                memory_pos: Some(features.token_pos),
                cross_mask: attn_mask.as_deref(),
            },
        )?;
        let logits = mask_logits(g, p, heads, queries, features.pixel_embed)?;
        let masks = binarize_masks(g, logits, grid.fine_rows, grid.fine_cols)?;
        if l + 1 < params.layers.len() {
            attn_mask = Some(masks.iter().flat_map(|m| grid.token_mask(m)).collect());
            if let Some(be) = box_embed {
                pos = be.embed_masks(g, p, &masks)?;
            }
        }
        per_layer_masks.push(masks);
    }
    Ok(DecodeOutput {
        queries,
        per_layer_masks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn top_k_examples() {
        assert_eq!(top_k_by_score(&[0.1, 0.9, 0.4, 0.7], 2).unwrap(), vec![1, 3]);
        assert_eq!(top_k_by_score(&[0.5, 0.2, 0.5, 0.9], 4).unwrap(), vec![3, 0, 2, 1]);
        assert!(matches!(top_k_by_score(&[0.1], 2), Err(Error::Config(_))));
    }

    #[test]
    fn token_grid_counts() {
        let g = TokenGrid::new(32, 32, 4).unwrap();
        assert_eq!((g.fine_len(), g.coarse_len(), g.num_tokens()), (64, 16, 80));
        assert!(TokenGrid::new(36, 32, 4).is_err());
    }

    #[test]
    fn coarse_token_open_if_any_child_open() {
        let grid = TokenGrid::new(16, 16, 4).unwrap();
        let mut m = BinaryMask::empty(4, 4);
        m.set(1, 3, true);
        let tm = grid.token_mask(&m);
        assert_eq!(tm.len(), 20);
        assert_eq!(&tm[16..], &[false, true, false, false]);
    }

    #[test]
    fn constant_frame_patches_are_identical() {
        let f = Frame::constant(16, 16, [0.2, 0.5, 0.9]);
        let t = patchify(&f, 4).unwrap();
        for r in 1..t.rows() {
            assert_eq!(t.row(r), t.row(0));
        }
    }
}
