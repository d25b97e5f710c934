//! Mask and track overlap, query-identity consistency, ID switches and a
//! track-level AP@0.5.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{BinaryMask, Rle};
use crate::model::FramePrediction;
use crate::synth::ClipGroundTruth;

/// IoU above which a query may anchor an instance.
pub const ANCHOR_IOU: f64 = 0.5;

/// `|a ∩ b| / |a ∪ b|`, and 1 when both masks are empty.
pub fn mask_iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::Dimension {
            op: "mask_iou",
            lhs: vec![a.height(), a.width()],
            rhs: vec![b.height(), b.width()],
        });
    }
    let u = a.union(b);
    Ok(if u == 0 { 1.0 } else { a.intersection(b) as f64 / u as f64 })
}

/// `Σ_t |p_t ∩ g_t| / Σ_t |p_t ∪ g_t|`; `None` stands for an empty mask.
/// Tracks that are empty everywhere on both sides score 1.
pub fn st_track_iou(pred: &[Option<&BinaryMask>], gt: &[Option<&BinaryMask>]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::contract(format!(
            "track lengths differ: {} vs {}",
            pred.len(),
            gt.len()
        )));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (p, g) in pred.iter().zip(gt) {
        match (p, g) {
            (Some(p), Some(g)) => {
                if !p.same_shape(g) {
                    return Err(Error::contract("mask shapes differ within a track"));
                }
                inter += p.intersection(g);
                union += p.union(g);
            }
            (Some(m), None) | (None, Some(m)) => union += m.area(),
            (None, None) => {}
        }
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// What evaluation needs from one predicted frame.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictedFrame {
    pub masks: Vec<BinaryMask>,
    /// Per query, sigmoid probability of every foreground class.
    pub class_probs: Vec<Vec<f64>>,
    /// `-1` while unassigned.
    pub track_ids: Vec<i64>,
}

impl From<&FramePrediction> for PredictedFrame {
    fn from(p: &FramePrediction) -> Self {
        let c = p.num_classes();
        PredictedFrame {
            masks: p.masks.clone(),
            class_probs: (0..p.num_queries()).map(|q| p.class_probs(q)[..c].to_vec()).collect(),
            track_ids: p.track_ids.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceReport {
    pub clip: usize,
    pub instance: usize,
    pub class: usize,
    /// Query best overlapping the instance at its first frame, if that
    /// overlap exceeds 0.5.
    pub anchor_query: Option<usize>,
    /// Mean IoU of the anchor query over frames where the instance is
    /// visible.
    pub mean_iou: Option<f64>,
    pub consistency: Option<f64>,
    pub switches: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackEvalReport {
    pub instances: Vec<InstanceReport>,
    pub mean_iou: f64,
    /// Mean over matched instances; 0 when none matched.
    pub mean_consistency: f64,
    pub total_switches: usize,
    pub unmatched: usize,
    pub ap50: f64,
}

impl TrackEvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Query with the highest IoU (lowest index on ties), or `None` if every
/// query misses the instance entirely.
fn best_query(ious: &[f64]) -> Option<usize> {
    let (q, v) = ious
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |b, (i, &v)| if v > b.1 { (i, v) } else { b });
    (v > 0.0).then_some(q)
}

fn check_clip(preds: &[PredictedFrame], gt: &ClipGroundTruth) -> Result<()> {
    if preds.len() != gt.frames.len() {
        return Err(Error::contract(format!(
            "{} predicted frames for {} ground-truth frames",
            preds.len(),
            gt.frames.len()
        )));
    }
    Ok(())
}

fn instance_reports(clip: usize, preds: &[PredictedFrame], gt: &ClipGroundTruth) -> Result<Vec<InstanceReport>> {
    check_clip(preds, gt)?;
    let mut out = Vec::new();
    for id in gt.instance_ids() {
        // per visible frame, IoU of every query
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for (pf, gf) in preds.iter().zip(&gt.frames) {
            if let Some(inst) = gf.get(id) {
                rows.push(pf.masks.iter().map(|m| mask_iou(m, &inst.mask)).collect::<Result<_>>()?);
            }
        }
        let first_best = best_query(&rows[0]);
        let anchor = first_best.filter(|&q| rows[0][q] > ANCHOR_IOU);
        let mut switches = 0;
        let mut last = first_best;
        for r in &rows[1..] {
            let b = best_query(r);
            if let (Some(prev), Some(cur)) = (last, b) {
                if prev != cur {
                    switches += 1;
                }
            }
            if b.is_some() {
                last = b;
            }
        }
        let (mean_iou, consistency) = match anchor {
            Some(a) => {
                let later = &rows[1..];
                let kept = later
                    .iter()
                    .filter(|r| {
                        let max = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                        max > 0.0 && r[a] == max
                    })
                    .count();
                let consistency = if later.is_empty() { 1.0 } else { kept as f64 / later.len() as f64 };
                let mean = rows.iter().map(|r| r[a]).sum::<f64>() / rows.len() as f64;
                (Some(mean), Some(consistency))
            }
            None => (None, None),
        };
        out.push(InstanceReport {
            clip,
            instance: id,
            class: gt.class_of(id).unwrap_or(0),
            anchor_query: anchor,
            mean_iou,
            consistency,
            switches,
        });
    }
    Ok(out)
}

/// A predicted track: one query from the frame it first got a track id.
struct PredTrack {
    clip: usize,
    query: usize,
    class: usize,
    confidence: f64,
    masks: Vec<Option<BinaryMask>>,
}

fn predicted_tracks(clip: usize, preds: &[PredictedFrame]) -> Vec<PredTrack> {
    let n = preds.first().map_or(0, |p| p.masks.len());
    let mut out = Vec::new();
    for q in 0..n {
        let Some(birth) = preds.iter().position(|p| p.track_ids.get(q).is_some_and(|&id| id >= 0)) else {
            continue;
        };
        let alive = &preds[birth..];
        let classes = alive[0].class_probs[q].len();
        let mean: Vec<f64> = (0..classes)
            .map(|k| alive.iter().map(|p| p.class_probs[q][k]).sum::<f64>() / alive.len() as f64)
            .collect();
        let (class, confidence) = mean
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |b, (k, &v)| if v > b.1 { (k, v) } else { b });
        let masks = preds
            .iter()
            .enumerate()
            .map(|(t, p)| (t >= birth).then(|| p.masks[q].clone()))
            .collect();
        out.push(PredTrack {
            clip,
            query: q,
            class,
            confidence,
            masks,
        });
    }
    out
}

/// Track-level AP at a single IoU threshold with 11-point interpolation,
/// pooled over clips. Each query that ever received a track id is one
/// predicted track, scored by its mean best-class probability.
pub fn average_precision(clips: &[(&[PredictedFrame], &ClipGroundTruth)], iou_threshold: f64) -> Result<f64> {
    let mut tracks = Vec::new();
    let mut gt_tracks: Vec<(usize, usize, usize)> = Vec::new();
    for (c, (preds, gt)) in clips.iter().enumerate() {
        check_clip(preds, gt)?;
        tracks.extend(predicted_tracks(c, preds));
        for id in gt.instance_ids() {
            gt_tracks.push((c, id, gt.class_of(id).unwrap_or(0)));
        }
    }
    if gt_tracks.is_empty() {
        return Ok(0.0);
    }
    tracks.sort_by(|a, b| {
        b.confidence
            .total_cmp(&a.confidence)
            .then(a.clip.cmp(&b.clip))
            .then(a.query.cmp(&b.query))
    });
    let mut claimed = vec![false; gt_tracks.len()];
    let mut tp = 0usize;
    let mut curve = Vec::with_capacity(tracks.len());
    for (rank, tr) in tracks.iter().enumerate() {
        let gt = clips[tr.clip].1;
        let mut best: Option<(usize, f64)> = None;
        for (g, &(c, id, class)) in gt_tracks.iter().enumerate() {
            if claimed[g] || c != tr.clip || class != tr.class {
                continue;
            }
            let gt_masks: Vec<Option<&BinaryMask>> = gt.frames.iter().map(|f| f.get(id).map(|i| &i.mask)).collect();
            let pred_masks: Vec<Option<&BinaryMask>> = tr.masks.iter().map(Option::as_ref).collect();
            let iou = st_track_iou(&pred_masks, &gt_masks)?;
            if iou >= iou_threshold && best.is_none_or(|(_, b)| iou > b) {
                best = Some((g, iou));
            }
        }
        if let Some((g, _)) = best {
            claimed[g] = true;
            tp += 1;
        }
        curve.push((tp as f64 / gt_tracks.len() as f64, tp as f64 / (rank + 1) as f64));
    }
    Ok(eleven_point(&curve))
}

/// Mean over recall levels 0, 0.1, …, 1 of the best precision reached at
/// or beyond that recall.
pub fn eleven_point(curve: &[(f64, f64)]) -> f64 {
    (0..=10)
        .map(|i| {
            let r = i as f64 / 10.0;
            curve
                .iter()
                .filter(|(rec, _)| *rec >= r - 1e-12)
                .map(|&(_, p)| p)
                .fold(0.0, f64::max)
        })
        .sum::<f64>()
        / 11.0
}

/// Per-instance consistency and switches plus AP@0.5 over a set of clips.
pub fn evaluate(clips: &[(&[PredictedFrame], &ClipGroundTruth)]) -> Result<TrackEvalReport> {
    let mut instances = Vec::new();
    for (c, (preds, gt)) in clips.iter().enumerate() {
        instances.extend(instance_reports(c, preds, gt)?);
    }
    let matched: Vec<&InstanceReport> = instances.iter().filter(|i| i.anchor_query.is_some()).collect();
    let mean = |f: fn(&InstanceReport) -> f64| {
        if matched.is_empty() {
            0.0
        } else {
            matched.iter().map(|i| f(i)).sum::<f64>() / matched.len() as f64
        }
    };
    let mean_iou = mean(|i| i.mean_iou.unwrap_or(0.0));
    let mean_consistency = mean(|i| i.consistency.unwrap_or(0.0));
    Ok(TrackEvalReport {
        mean_iou,
        mean_consistency,
        total_switches: instances.iter().map(|i| i.switches).sum(),
        unmatched: instances.len() - matched.len(),
        ap50: average_precision(clips, 0.5)?,
        instances,
    })
}

/// Convenience wrapper for a single clip.
pub fn track_consistency(preds: &[PredictedFrame], gt: &ClipGroundTruth) -> Result<TrackEvalReport> {
    evaluate(&[(preds, gt)])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct QueryDoc {
    query: usize,
    track_id: i64,
    class_probs: Vec<f64>,
    mask: Rle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct FrameDoc {
    frame: usize,
    queries: Vec<QueryDoc>,
}

/// Serializes per-frame predictions as one JSON document.
pub fn predictions_to_json(preds: &[PredictedFrame]) -> Result<String> {
    let doc: Vec<FrameDoc> = preds
        .iter()
        .enumerate()
        .map(|(t, p)| FrameDoc {
            frame: t,
            queries: (0..p.masks.len())
                .map(|q| QueryDoc {
                    query: q,
                    track_id: p.track_ids[q],
                    class_probs: p.class_probs[q].clone(),
                    mask: p.masks[q].to_rle(),
                })
                .collect(),
        })
        .collect();
    Ok(serde_json::to_string_pretty(&doc)?)
}

pub fn predictions_from_json(text: &str) -> Result<Vec<PredictedFrame>> {
    let doc: Vec<FrameDoc> = serde_json::from_str(text)?;
    doc.into_iter()
        .map(|f| {
            let mut qs = f.queries;
            qs.sort_by_key(|q| q.query);
            Ok(PredictedFrame {
                masks: qs.iter().map(|q| q.mask.decode()).collect::<Result<_>>()?,
                class_probs: qs.iter().map(|q| q.class_probs.clone()).collect(),
                track_ids: qs.iter().map(|q| q.track_id).collect(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square(r: usize, c: usize) -> BinaryMask {
        let mut m = BinaryMask::empty(4, 4);
        for dr in 0..2 {
            for dc in 0..2 {
                m.set(r + dr, c + dc, true);
            }
        }
        m
    }

    #[test]
    fn iou_examples() {
        let a = square(0, 0);
        assert_eq!(mask_iou(&a, &a).unwrap(), 1.0);
        assert_eq!(mask_iou(&a, &square(2, 2)).unwrap(), 0.0);
        assert_eq!(mask_iou(&a, &square(0, 1)).unwrap(), 2.0 / 6.0);
        let e = BinaryMask::empty(4, 4);
        assert_eq!(mask_iou(&e, &e).unwrap(), 1.0);
        assert!(mask_iou(&a, &BinaryMask::empty(2, 2)).is_err());
    }

    #[test]
    fn st_iou_two_frames() {
        let a = square(0, 0);
        let b = square(2, 2);
        let v = st_track_iou(&[Some(&a), Some(&b)], &[Some(&a), Some(&a)]).unwrap();
        assert!((v - 4.0 / 12.0).abs() < 1e-15);
        assert_eq!(st_track_iou(&[None], &[Some(&a)]).unwrap(), 0.0);
    }

    #[test]
    fn eleven_point_single_perfect() {
        assert_eq!(eleven_point(&[(1.0, 1.0)]), 1.0);
        assert_eq!(eleven_point(&[]), 0.0);
    }
}
