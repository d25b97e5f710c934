//! Classification and mask losses, the clip loss over supervised frames,
//! and the random supervision schedule.

use rand::Rng;

use crate::assign::Assignment;
use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::model::FrameOutput;
use crate::numcore::{Graph, Var};
use crate::synth::ClipGroundTruth;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub cls: f64,
    pub ce: f64,
    pub dice: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            cls: 2.0,
            ce: 5.0,
            dice: 5.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let w = [self.cls, self.ce, self.dice];
        if w.iter().any(|x| !x.is_finite() || *x < 0.0) || w.iter().all(|&x| x == 0.0) {
            return Err(Error::config(format!(
                "loss weights must be non-negative with one positive, got {w:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FocalParams {
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        FocalParams { alpha: 0.25, gamma: 2.0 }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `ln(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// α-balanced sigmoid focal loss of a single logit.
pub fn focal_loss(logit: f64, target: bool, alpha: f64, gamma: f64) -> f64 {
    let (z, alpha_t) = if target { (logit, alpha) } else { (-logit, 1.0 - alpha) };
    let p_t = sigmoid(z);
    alpha_t * (1.0 - p_t).powf(gamma) * softplus(-z)
}

fn check_shape(logits: &[f64], mask: &BinaryMask, op: &'static str) -> Result<()> {
    if logits.len() != mask.height() * mask.width() {
        return Err(Error::Dimension {
            op,
            lhs: vec![logits.len()],
            rhs: vec![mask.height(), mask.width()],
        });
    }
    Ok(())
}

/// `1 − (2Σ p·g + 1)/(Σp + Σg + 1)` with `p = sigmoid(logits)`.
pub fn dice_loss(logits: &[f64], mask: &BinaryMask) -> Result<f64> {
    check_shape(logits, mask, "dice_loss")?;
    let (mut inter, mut sp) = (0.0, 0.0);
    for (&l, &g) in logits.iter().zip(mask.data()) {
        let p = sigmoid(l);
        sp += p;
        if g {
            inter += p;
        }
    }
    Ok(1.0 - (2.0 * inter + 1.0) / (sp + mask.area() as f64 + 1.0))
}

/// Mean per-pixel sigmoid cross-entropy.
pub fn mask_ce_loss(logits: &[f64], mask: &BinaryMask) -> Result<f64> {
    check_shape(logits, mask, "mask_ce_loss")?;
    let s: f64 = logits
        .iter()
        .zip(mask.data())
        .map(|(&l, &g)| if g { softplus(-l) } else { softplus(l) })
        .sum();
    Ok(s / logits.len() as f64)
}

/// Which frames of a clip contribute to the loss.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct SupervisionMask {
    frames: Vec<bool>,
}

impl SupervisionMask {
    /// Fails unless the last frame is set and, for two or more frames, at
    /// least two are.
    pub fn new(frames: Vec<bool>) -> Result<Self> {
        let n = frames.len();
        let count = frames.iter().filter(|&&b| b).count();
        if n == 0 || !frames[n - 1] || count < n.min(2) {
            return Err(Error::contract(format!("invalid supervision mask {frames:?}")));
        }
        Ok(SupervisionMask { frames })
    }

    pub fn all(len: usize) -> Result<Self> {
        Self::new(vec![true; len])
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn is_supervised(&self, t: usize) -> bool {
        self.frames[t]
    }

    pub fn count(&self) -> usize {
        self.frames.iter().filter(|&&b| b).count()
    }

    pub fn frames(&self) -> &[bool] {
        &self.frames
    }

    /// Compact form such as `"1011"`.
    pub fn bits(&self) -> String {
        self.frames.iter().map(|&b| if b { '1' } else { '0' }).collect()
    }
}

/// Keeps the last frame and each earlier frame with probability `p_keep`.
/// If that leaves a single frame of a multi-frame clip, one earlier frame
/// chosen uniformly is added back.
pub fn supervision_schedule<R: Rng + ?Sized>(len: usize, p_keep: f64, rng: &mut R) -> Result<SupervisionMask> {
    if len == 0 {
        return Err(Error::contract("supervision schedule needs at least one frame"));
    }
    if !(0.0..=1.0).contains(&p_keep) {
        return Err(Error::config(format!("p_keep must lie in [0, 1], got {p_keep}")));
    }
    let mut frames: Vec<bool> = (0..len - 1).map(|_| rng.gen_bool(p_keep)).collect();
    frames.push(true);
    if len >= 2 && frames.iter().filter(|&&b| b).count() < 2 {
        frames[rng.gen_range(0..len - 1)] = true;
    }
    SupervisionMask::new(frames)
}

/// Loss value and its per-term breakdown (already weighted and summed
/// over supervised frames).
#[derive(Clone, Debug)]
pub struct ClipLoss {
    pub total: Var,
    pub cls: f64,
    pub ce: f64,
    pub dice: f64,
    /// Weighted loss of every frame, supervised or not.
    pub per_frame: Vec<f64>,
}

/// Sum over supervised frames of the weighted classification, mask
/// cross-entropy and dice terms.
///
/// Queries matched to an instance visible in the frame are pushed toward
/// its class; every other query toward the trailing no-object class. Mask
/// terms are averaged over the matched, visible queries.
pub fn clip_loss(
    g: &mut Graph,
    outputs: &[FrameOutput],
    gt: &ClipGroundTruth,
    assignment: &Assignment,
    weights: &LossWeights,
    focal: &FocalParams,
    sup: &SupervisionMask,
) -> Result<ClipLoss> {
    weights.validate()?;
    if outputs.len() != gt.frames.len() || sup.len() != outputs.len() {
        return Err(Error::contract(format!(
            "clip loss over {} outputs, {} gt frames, {} supervision flags",
            outputs.len(),
            gt.frames.len(),
            sup.len()
        )));
    }
    let mut total: Option<Var> = None;
    let (mut cls_sum, mut ce_sum, mut dice_sum) = (0.0, 0.0, 0.0);
    let mut per_frame = Vec::with_capacity(outputs.len());
    for (t, (out, frame)) in outputs.iter().zip(&gt.frames).enumerate() {
        let shape = g.shape(out.class_logits).to_vec();
        let (n, classes) = (shape[0], shape[1]);
        let mut targets = vec![0.0; n * classes];
        for q in 0..n {
            targets[q * classes + classes - 1] = 1.0;
        }
        let mut matched = Vec::new();
        for inst in &frame.instances {
            let q = assignment.query_of(inst.id).ok_or_else(|| {
                Error::contract(format!("instance {} present at frame {t} has no query", inst.id))
            })?;
            if assignment.birth_frame(inst.id).is_some_and(|b| b > t) {
                return Err(Error::contract(format!("instance {} is visible before its birth frame", inst.id)));
            }
            if inst.class_id + 1 >= classes {
                return Err(Error::contract(format!("class {} outside the model's classes", inst.class_id)));
            }
            targets[q * classes + classes - 1] = 0.0;
            targets[q * classes + inst.class_id] = 1.0;
            matched.push((q, &inst.mask));
        }
        let l_cls = g.focal_loss_mean(out.class_logits, &targets, focal.alpha, focal.gamma)?;
        let mut frame_loss = g.scale(l_cls, weights.cls);
        let cls_v = g.scalar_value(l_cls);
        let (mut ce_v, mut dice_v) = (0.0, 0.0);
        if !matched.is_empty() {
            let inv = 1.0 / matched.len() as f64;
            let mut ce_acc: Option<Var> = None;
            let mut dice_acc: Option<Var> = None;
            for (q, mask) in &matched {
                let row = g.gather_rows(out.mask_logits, &[*q])?;
                let target = mask.as_f64();
                let ce = g.bce_mean(row, &target)?;
                let dice = g.dice_loss(row, &target)?;
                ce_acc = Some(match ce_acc {
                    Some(a) => g.add(a, ce)?,
                    None => ce,
                });
                dice_acc = Some(match dice_acc {
                    Some(a) => g.add(a, dice)?,
                    None => dice,
                });
            }
            let ce = g.scale(ce_acc.unwrap(), inv * weights.ce);
            let dice = g.scale(dice_acc.unwrap(), inv * weights.dice);
            ce_v = g.scalar_value(ce);
            dice_v = g.scalar_value(dice);
            frame_loss = g.add(frame_loss, ce)?;
            frame_loss = g.add(frame_loss, dice)?;
        }
        per_frame.push(g.scalar_value(frame_loss));
        if sup.is_supervised(t) {
            cls_sum += weights.cls * cls_v;
            ce_sum += ce_v;
            dice_sum += dice_v;
            total = Some(match total {
                Some(a) => g.add(a, frame_loss)?,
                None => frame_loss,
            });
        }
    }
    Ok(ClipLoss {
        total: total.expect("supervision mask keeps the last frame"),
        cls: cls_sum,
        ce: ce_sum,
        dice: dice_sum,
        per_frame,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn focal_at_zero_logit() {
        let want = 0.25 * 0.25 * std::f64::consts::LN_2;
        assert!((focal_loss(0.0, true, 0.25, 2.0) - want).abs() < 1e-15);
        assert!(focal_loss(40.0, true, 0.25, 2.0) < 1e-15);
    }

    #[test]
    fn dice_closed_forms() {
        let m = BinaryMask::new(1, 4, vec![true, true, false, false]).unwrap();
        let hard: Vec<f64> = m.data().iter().map(|&b| if b { 60.0 } else { -60.0 }).collect();
        assert!(dice_loss(&hard, &m).unwrap().abs() < 1e-12);
        let empty = BinaryMask::empty(1, 4);
        assert!(dice_loss(&[-60.0; 4], &empty).unwrap().abs() < 1e-12);
        assert!(dice_loss(&[0.0; 3], &empty).is_err());
    }

    #[test]
    fn ce_at_zero_logits_is_ln2() {
        let m = BinaryMask::new(2, 2, vec![true, false, true, false]).unwrap();
        assert!((mask_ce_loss(&[0.0; 4], &m).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn two_frames_are_always_both_supervised() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..200 {
            assert_eq!(supervision_schedule(2, 0.5, &mut rng).unwrap().bits(), "11");
        }
        assert_eq!(supervision_schedule(1, 0.5, &mut rng).unwrap().bits(), "1");
    }

    #[test]
    fn invalid_masks() {
        assert!(SupervisionMask::new(vec![true, false]).is_err());
        assert!(SupervisionMask::new(vec![false, false, true]).is_err());
        assert!(SupervisionMask::new(vec![]).is_err());
        assert!(LossWeights { cls: 0.0, ce: 0.0, dice: 0.0 }.validate().is_err());
    }
}
