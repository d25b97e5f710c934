//! The full per-frame network: encoder, local query selection, aligner,
//! decoder and heads, wired according to a [`ModelConfig`].

use crate::aligner::{align, AlignerParams};
use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::nn::{DecoderLayerParams, EncoderLayerParams, Init, Linear, Mlp};
use crate::numcore::{Bound, Graph, ParamId, ParamSet, Tensor, Var};
use crate::posembed::{binarize_masks, mask2box, BoxCxCyWH, BoxEmbedder, StaticLocalPE};
use crate::segmenter::{
    encode_frame, mask_logits, predict_heads, segmentation_decode, select_local_queries, DecoderParams,
    EncoderParams, Frame, Heads, TokenGrid,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LocalPeKind {
    /// Learnable per-slot table, identical at every frame.
    Static,
    /// Recomputed each frame from the boxes of the local tokens' own masks.
    Dynamic,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub num_queries: usize,
    pub num_local: usize,
    pub width: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub encoder_ffn: usize,
    pub decoder_layers: usize,
    pub decoder_ffn: usize,
    pub aligner_layers: usize,
    pub aligner_ffn: usize,
    pub patch: usize,
    pub image_height: usize,
    pub image_width: usize,
    pub num_classes: usize,
    /// Run the aligner between encoder and decoder.
    pub use_aligner: bool,
    /// Derive global positional embeddings from previous masks; otherwise
    /// a learnable per-query table is used.
    pub trajectory_pe: bool,
    pub local_pe: LocalPeKind,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_queries: 8,
            num_local: 16,
            width: 32,
            heads: 4,
            encoder_layers: 1,
            encoder_ffn: 64,
            decoder_layers: 3,
            decoder_ffn: 64,
            aligner_layers: 3,
            aligner_ffn: 128,
            patch: 4,
            image_height: 32,
            image_width: 32,
            num_classes: 3,
            use_aligner: true,
            trajectory_pe: true,
            local_pe: LocalPeKind::Static,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<TokenGrid> {
        let positive = [
            ("num_queries", self.num_queries),
            ("num_local", self.num_local),
            ("width", self.width),
            ("heads", self.heads),
            ("decoder_layers", self.decoder_layers),
            ("num_classes", self.num_classes),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        if self.use_aligner && self.aligner_layers == 0 {
            return Err(Error::config("aligner_layers must be positive when the aligner is on"));
        }
        if self.width % 4 != 0 {
            return Err(Error::config("width must be a multiple of 4"));
        }
        let grid = TokenGrid::new(self.image_height, self.image_width, self.patch)?;
        if self.num_local > grid.num_tokens() {
            return Err(Error::config(format!(
                "num_local {} exceeds the {} encoder tokens",
                self.num_local,
                grid.num_tokens()
            )));
        }
        Ok(grid)
    }

    pub fn mask_height(&self) -> usize {
        self.image_height / self.patch
    }

    pub fn mask_width(&self) -> usize {
        self.image_width / self.patch
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamSet,
    pub encoder: EncoderParams,
    pub heads: Heads,
    pub decoder: DecoderParams,
    pub aligner: AlignerParams,
    pub box_embed: BoxEmbedder,
    pub local_pe: Option<StaticLocalPE>,
    /// Learnable global positional table used when trajectory embeddings
    /// are disabled.
    pub query_pos: Option<ParamId>,
    pub grid: TokenGrid,
}

/// Per-video values threaded through a graph across frames.
#[derive(Clone, Copy, Debug)]
pub struct GraphState {
    pub q_global: Var,
    pub g_pos: Var,
}

/// Outputs of one frame, still attached to the graph.
#[derive(Clone, Debug)]
pub struct FrameOutput {
    pub class_logits: Var,
    pub mask_logits: Var,
    pub masks: Vec<BinaryMask>,
    pub boxes: Vec<BoxCxCyWH>,
    pub per_layer_masks: Vec<Vec<BinaryMask>>,
    pub local_indices: Vec<usize>,
    /// Decoder output queries, propagated to the next frame.
    pub queries: Var,
    /// Aligner output (decoder input).
    pub aligned: Var,
}

/// Detached per-frame prediction.
#[derive(Clone, Debug, PartialEq)]
pub struct FramePrediction {
    /// `[N × (C+1)]`, last column is "no object".
    pub class_logits: Tensor,
    /// `[N × H'W']`.
    pub mask_logits: Tensor,
    pub masks: Vec<BinaryMask>,
    pub boxes: Vec<BoxCxCyWH>,
    /// Track id per query, `-1` when unassigned.
    pub track_ids: Vec<i64>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl FramePrediction {
    pub fn from_graph(g: &Graph, out: &FrameOutput, track_ids: Vec<i64>) -> Self {
        FramePrediction {
            class_logits: g.value(out.class_logits),
            mask_logits: g.value(out.mask_logits),
            masks: out.masks.clone(),
            boxes: out.boxes.clone(),
            track_ids,
        }
    }

    pub fn num_queries(&self) -> usize {
        self.class_logits.rows()
    }

    pub fn num_classes(&self) -> usize {
        self.class_logits.cols() - 1
    }

    /// Per-class sigmoid probabilities of query `i`.
    pub fn class_probs(&self, i: usize) -> Vec<f64> {
        self.class_logits.row(i).iter().map(|&l| sigmoid(l)).collect()
    }

    /// Most probable foreground class and its probability.
    pub fn best_class(&self, i: usize) -> (usize, f64) {
        let probs = self.class_probs(i);
        probs[..self.num_classes()]
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (k, &p)| if p > best.1 { (k, p) } else { best })
    }
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let grid = config.validate()?;
        let c = config.width;
        let mut ps = ParamSet::new();
        let mut init = Init::new(seed);
        let p = config.patch;

        let encoder = EncoderParams {
            patch_fine: Linear::new(&mut ps, &mut init, "segmenter.encoder.patch_fine", 3 * p * p, c),
            patch_coarse: Linear::new(&mut ps, &mut init, "segmenter.encoder.patch_coarse", 12 * p * p, c),
            layers: (0..config.encoder_layers)
                .map(|i| {
                    EncoderLayerParams::new(
                        &mut ps,
                        &mut init,
                        &format!("segmenter.encoder.layers.{i}"),
                        c,
                        config.heads,
                        config.encoder_ffn,
                    )
                })
                .collect::<Result<_>>()?,
            pixel_embed: Linear::new(&mut ps, &mut init, "segmenter.encoder.pixel_embed", c, c),
            patch: p,
        };
        let heads = Heads {
            class_head: Linear::new(&mut ps, &mut init, "segmenter.class_head", c, config.num_classes + 1),
            mask_head: Mlp::new(&mut ps, &mut init, "segmenter.mask_head", c, c, c),
            num_classes: config.num_classes,
        };
        let decoder = DecoderParams {
            layers: (0..config.decoder_layers)
                .map(|i| {
                    DecoderLayerParams::new(
                        &mut ps,
                        &mut init,
                        &format!("segmenter.decoder.layers.{i}"),
                        c,
                        config.heads,
                        config.decoder_ffn,
                    )
                })
                .collect::<Result<_>>()?,
        };
        let aligner_layers = if config.use_aligner { config.aligner_layers } else { 0 };
        let aligner = AlignerParams::new(
            &mut ps,
            &mut init,
            aligner_layers,
            config.num_queries,
            c,
            config.heads,
            config.aligner_ffn,
        )?;
        let box_embed = BoxEmbedder::new(&mut ps, &mut init, "posembed.box_mlp", c)?;
        let local_pe = (config.local_pe == LocalPeKind::Static)
            .then(|| StaticLocalPE::new(&mut ps, &mut init, "posembed.local_static", config.num_local, c));
        let query_pos = (!config.trajectory_pe)
            .then(|| ps.add("posembed.query_static", init.table(config.num_queries, c)));

        Ok(Model {
            config,
            params: ps,
            encoder,
            heads,
            decoder,
            aligner,
            box_embed,
            local_pe,
            query_pos,
            grid,
        })
    }

    pub fn mask_shape(&self) -> (usize, usize) {
        (self.grid.fine_rows, self.grid.fine_cols)
    }

    /// Global positional embeddings for a set of previous masks, or the
    /// static table when trajectory embeddings are off.
    pub fn global_pos(&self, g: &mut Graph, p: &Bound, prev_masks: &[BinaryMask]) -> Result<Var> {
        match self.query_pos {
            Some(id) => Ok(p.var(id)),
            None => self.box_embed.embed_masks(g, p, prev_masks),
        }
    }

    /// Global positional embeddings when no mask history exists: every
    /// query gets the whole-frame box.
    pub fn initial_global_pos(&self, g: &mut Graph, p: &Bound) -> Result<Var> {
        match self.query_pos {
            Some(id) => Ok(p.var(id)),
            None => self
                .box_embed
                .embed_boxes(g, p, &vec![BoxCxCyWH::WHOLE_FRAME; self.config.num_queries]),
        }
    }

    pub fn initial_graph_state(&self, g: &mut Graph, p: &Bound) -> Result<GraphState> {
        Ok(GraphState {
            q_global: p.var(self.aligner.bootstrap),
            g_pos: self.initial_global_pos(g, p)?,
        })
    }

    /// One frame: encode, select local queries, align, decode, predict.
    /// Returns the frame outputs and the state for the next frame.
    pub fn forward_frame(&self, g: &mut Graph, p: &Bound, state: GraphState, frame: &Frame) -> Result<(FrameOutput, GraphState)> {
        if frame.height() != self.config.image_height || frame.width() != self.config.image_width {
            return Err(Error::config(format!(
                "frame is {}×{}, model expects {}×{}",
                frame.height(),
                frame.width(),
                self.config.image_height,
                self.config.image_width
            )));
        }
        let features = encode_frame(g, p, &self.encoder, frame)?;
        let (q_local, local_indices) = select_local_queries(g, p, &features, &self.heads, self.config.num_local)?;

        let aligned = if self.config.use_aligner {
            let l_pos = match &self.local_pe {
                Some(table) => table.var(p),
                None => {
                    let logits = mask_logits(g, p, &self.heads, q_local, features.pixel_embed)?;
                    let masks = binarize_masks(g, logits, self.grid.fine_rows, self.grid.fine_cols)?;
                    let boxes: Vec<_> = masks.iter().map(mask2box).collect();
                    self.box_embed.embed_boxes(g, p, &boxes)?
                }
            };
            align(g, p, &self.aligner, state.q_global, q_local, state.g_pos, l_pos)?
        } else {
            state.q_global
        };

        let refine = self.query_pos.is_none().then_some(&self.box_embed);
        let decoded = segmentation_decode(g, p, &self.decoder, &self.heads, refine, aligned, state.g_pos, &features)?;
        let heads = predict_heads(g, p, decoded.queries, &features, &self.heads)?;
        let next_pos = self.global_pos(g, p, &heads.masks)?;
        let out = FrameOutput {
            class_logits: heads.class_logits,
            mask_logits: heads.mask_logits,
            masks: heads.masks,
            boxes: heads.boxes,
            per_layer_masks: decoded.per_layer_masks,
            local_indices,
            queries: decoded.queries,
            aligned,
        };
        Ok((
            out,
            GraphState {
                q_global: decoded.queries,
                g_pos: next_pos,
            },
        ))
    }

    pub fn num_aligner_params(&self) -> usize {
        self.params.numel_with_prefix("aligner.layers.")
    }
}
