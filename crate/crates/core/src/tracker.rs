//! Online query propagation, one frame at a time.

use std::borrow::Borrow;

use crate::aligner::bootstrap;
use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::model::{FramePrediction, GraphState, Model};
use crate::numcore::{Graph, Tensor};
use crate::segmenter::Frame;

/// Class probability above which an unassigned query is given a track id.
pub const BIRTH_THRESHOLD: f64 = 0.5;

/// Per-video state carried between frames.
#[derive(Clone, Debug, PartialEq)]
pub struct TrackState {
    /// `[N × c]` decoder output queries of the previous frame.
    pub q_global: Tensor,
    /// Binarized masks of the previous frame.
    pub prev_masks: Vec<BinaryMask>,
    /// `[N × c]` positional embeddings derived from `prev_masks`.
    pub g_pos: Tensor,
    /// `-1` while a query has not been given an identity.
    pub track_ids: Vec<i64>,
    pub frame_index: usize,
    pub next_track_id: i64,
}

pub fn init_state(model: &Model) -> Result<TrackState> {
    let mut g = Graph::new();
    let p = model.params.bind(&mut g);
    let g_pos = model.initial_global_pos(&mut g, &p)?;
    let n = model.config.num_queries;
    let (h, w) = model.mask_shape();
    Ok(TrackState {
        q_global: bootstrap(&model.params, &model.aligner),
        prev_masks: vec![BinaryMask::empty(h, w); n],
        g_pos: g.value(g_pos),
        track_ids: vec![-1; n],
        frame_index: 0,
        next_track_id: 0,
    })
}

/// Processes one frame. Track ids are carried over unchanged; see
/// [`birth_tracks`] for assigning new ones.
pub fn step(state: &TrackState, frame: &Frame, model: &Model) -> Result<(FramePrediction, TrackState)> {
    let n = model.config.num_queries;
    if state.track_ids.len() != n || state.q_global.shape() != [n, model.config.width] {
        return Err(Error::contract("track state does not match the model"));
    }
    let mut g = Graph::new();
    let p = model.params.bind(&mut g);
    let graph_state = GraphState {
        q_global: g.leaf(&detached(&state.q_global)),
        g_pos: g.leaf(&detached(&state.g_pos)),
    };
    let (out, next) = model.forward_frame(&mut g, &p, graph_state, frame)?;
    let prediction = FramePrediction::from_graph(&g, &out, state.track_ids.clone());
    let new_state = TrackState {
        q_global: g.value(next.q_global),
        prev_masks: out.masks.clone(),
        g_pos: g.value(next.g_pos),
        track_ids: state.track_ids.clone(),
        frame_index: state.frame_index + 1,
        next_track_id: state.next_track_id,
    };
    Ok((prediction, new_state))
}

fn detached(t: &Tensor) -> Tensor {
    let mut t = t.clone();
    t.requires_grad = false;
    t.grad = None;
    t
}

/// Gives a fresh id to every unassigned query whose best foreground class
/// probability exceeds [`BIRTH_THRESHOLD`]. Existing ids are never changed.
pub fn birth_tracks(state: &mut TrackState, prediction: &mut FramePrediction) {
    for i in 0..state.track_ids.len() {
        if state.track_ids[i] < 0 && prediction.best_class(i).1 > BIRTH_THRESHOLD {
            state.track_ids[i] = state.next_track_id;
            state.next_track_id += 1;
        }
    }
    prediction.track_ids = state.track_ids.clone();
}

/// Runs a video through the tracker, calling `on_frame` with each
/// prediction before the next frame is requested from `frames`.
pub fn run_video_with<I, F, C>(frames: I, model: &Model, mut on_frame: C) -> Result<TrackState>
where
    I: IntoIterator<Item = F>,
    F: Borrow<Frame>,
    C: FnMut(usize, FramePrediction) -> Result<()>,
{
    let mut state = init_state(model)?;
    let mut seen = 0;
    for frame in frames {
        let (mut pred, mut next) = step(&state, frame.borrow(), model)?;
        drop(frame);
        birth_tracks(&mut next, &mut pred);
        on_frame(seen, pred)?;
        state = next;
        seen += 1;
    }
    if seen == 0 {
        return Err(Error::contract("run_video needs at least one frame"));
    }
    Ok(state)
}

/// Collects every prediction of a video.
pub fn run_video<I, F>(frames: I, model: &Model) -> Result<(Vec<FramePrediction>, TrackState)>
where
    I: IntoIterator<Item = F>,
    F: Borrow<Frame>,
{
    let mut preds = Vec::new();
    let state = run_video_with(frames, model, |_, p| {
        preds.push(p);
        Ok(())
    })?;
    Ok((preds, state))
}
