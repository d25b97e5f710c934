//! Deterministic synthetic videos of moving shapes with instance masks.
//!
//! Shapes are rasterized with 4×4 supersampling over a static noise
//! background. Each subsample belongs to the front-most shape covering
//! it; a mask cell belongs to an instance when more than half of the
//! cell's subsamples do, so instance masks within a frame are disjoint.

use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::mask::{BinaryMask, Rle};
use crate::segmenter::Frame;

const SUPERSAMPLE: usize = 4;
const BACKGROUND_LEVEL: f64 = 0.35;
const BACKGROUND_NOISE: f64 = 0.06;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Disc,
    Square,
    Triangle,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Disc, ShapeKind::Square, ShapeKind::Triangle];

    pub fn class_id(self) -> usize {
        self as usize
    }
}

/// Sinusoidal offset added to a linear trajectory.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Wobble {
    pub amplitude: (f64, f64),
    /// Period in frames.
    pub period: f64,
    pub phase: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Trajectory {
    pub start: (f64, f64),
    pub velocity: (f64, f64),
    pub wobble: Option<Wobble>,
}

impl Trajectory {
    /// Normalized `(x, y)` center at frame `t`.
    pub fn position(&self, t: usize) -> (f64, f64) {
        let t = t as f64;
        let (mut x, mut y) = (self.start.0 + self.velocity.0 * t, self.start.1 + self.velocity.1 * t);
        if let Some(w) = self.wobble {
            let s = (2.0 * PI * t / w.period + w.phase).sin();
            x += w.amplitude.0 * s;
            y += w.amplitude.1 * s;
        }
        (x, y)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShapeSpec {
    pub kind: ShapeKind,
    pub class_id: usize,
    /// Extent as a fraction of the frame's shorter side.
    pub size: f64,
    pub trajectory: Trajectory,
    pub color: [f64; 3],
    /// Smaller is closer to the camera.
    pub depth: usize,
}

impl ShapeSpec {
    /// Whether the normalized point `(x, y)` lies inside the shape at `t`.
    fn contains(&self, t: usize, x: f64, y: f64) -> bool {
        let (cx, cy) = self.trajectory.position(t);
        let r = self.size / 2.0;
        let (dx, dy) = (x - cx, y - cy);
        match self.kind {
            ShapeKind::Disc => dx * dx + dy * dy <= r * r,
            ShapeKind::Square => dx.abs() <= r && dy.abs() <= r,
            ShapeKind::Triangle => dy.abs() <= r && dx.abs() <= (dy + r) / 2.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClipConfig {
    pub height: usize,
    pub width: usize,
    /// Pixel stride between mask cells (the encoder patch size).
    pub mask_stride: usize,
    pub frames: usize,
    pub num_instances: usize,
    /// Number of model queries; clips never hold more instances.
    pub max_instances: usize,
}

impl Default for ClipConfig {
    fn default() -> Self {
        ClipConfig {
            height: 32,
            width: 32,
            mask_stride: 4,
            frames: 4,
            num_instances: 3,
            max_instances: 8,
        }
    }
}

impl ClipConfig {
    pub fn validate(&self) -> Result<()> {
        if self.mask_stride == 0 || self.height % self.mask_stride != 0 || self.width % self.mask_stride != 0 {
            return Err(Error::config(format!(
                "clip resolution {}×{} is not divisible by the mask stride {}",
                self.height, self.width, self.mask_stride
            )));
        }
        if self.frames == 0 {
            return Err(Error::config("clips need at least one frame"));
        }
        if self.num_instances == 0 || self.num_instances > self.max_instances {
            return Err(Error::config(format!(
                "clips need between 1 and {} instances, got {}",
                self.max_instances, self.num_instances
            )));
        }
        Ok(())
    }

    pub fn mask_height(&self) -> usize {
        self.height / self.mask_stride
    }

    pub fn mask_width(&self) -> usize {
        self.width / self.mask_stride
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GtInstance {
    pub id: usize,
    pub class_id: usize,
    pub mask: BinaryMask,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GtFrame {
    pub instances: Vec<GtInstance>,
}

impl GtFrame {
    pub fn get(&self, id: usize) -> Option<&GtInstance> {
        self.instances.iter().find(|i| i.id == id)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClipGroundTruth {
    pub mask_height: usize,
    pub mask_width: usize,
    pub frames: Vec<GtFrame>,
}

impl ClipGroundTruth {
    /// Instance ids present anywhere in the clip, ascending.
    pub fn instance_ids(&self) -> Vec<usize> {
        let mut ids: Vec<usize> = self.frames.iter().flat_map(|f| f.instances.iter().map(|i| i.id)).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    pub fn class_of(&self, id: usize) -> Option<usize> {
        self.frames.iter().find_map(|f| f.get(id).map(|i| i.class_id))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Clip {
    pub frames: Vec<Frame>,
    pub gt: ClipGroundTruth,
}

fn background(config: &ClipConfig, rng: &mut ChaCha8Rng) -> Vec<[f64; 3]> {
    (0..config.height * config.width)
        .map(|_| {
            let base = BACKGROUND_LEVEL + rng.gen_range(-BACKGROUND_NOISE..BACKGROUND_NOISE);
            let tint = rng.gen_range(-0.02..0.02);
            [base + tint, base, base - tint]
        })
        .collect()
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Index into `order` of the front-most shape containing the point.
fn owner(shapes: &[ShapeSpec], order: &[usize], t: usize, x: f64, y: f64) -> Option<usize> {
    order.iter().copied().find(|&s| shapes[s].contains(t, x, y))
}

/// Renders shapes into frames and per-instance ground truth. Instance ids
/// are indices into `shapes`.
pub fn render_clip(shapes: &[ShapeSpec], config: &ClipConfig, seed: u64) -> Result<Clip> {
    config.validate()?;
    if shapes.len() != config.num_instances {
        return Err(Error::config(format!(
            "{} shapes given for {} instances",
            shapes.len(),
            config.num_instances
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6267_6e64);
    let bg = background(config, &mut rng);
    let mut order: Vec<usize> = (0..shapes.len()).collect();
    order.sort_by_key(|&i| (shapes[i].depth, i));

    let (h, w) = (config.height, config.width);
    let (mh, mw) = (config.mask_height(), config.mask_width());
    let stride = config.mask_stride;
    let scale = h.min(w) as f64;
    let sub = SUPERSAMPLE as f64;
    let cell_samples = stride * stride * SUPERSAMPLE * SUPERSAMPLE;

    let mut frames = Vec::with_capacity(config.frames);
    let mut gt_frames = Vec::with_capacity(config.frames);
    for t in 0..config.frames {
        let mut data = vec![0.0; 3 * h * w];
        // per mask cell, per shape: covered subsample count
        let mut counts = vec![0usize; mh * mw * shapes.len()];
        for r in 0..h {
            for c in 0..w {
                let mut rgb = [0.0; 3];
                for sy in 0..SUPERSAMPLE {
                    for sx in 0..SUPERSAMPLE {
                        let x = (c as f64 + (sx as f64 + 0.5) / sub) / scale;
                        let y = (r as f64 + (sy as f64 + 0.5) / sub) / scale;
                        let color = match owner(shapes, &order, t, x, y) {
                            Some(s) => {
                                counts[((r / stride) * mw + c / stride) * shapes.len() + s] += 1;
                                shapes[s].color
                            }
                            None => bg[r * w + c],
                        };
                        for ch in 0..3 {
                            rgb[ch] += color[ch];
                        }
                    }
                }
                for ch in 0..3 {
                    data[(ch * h + r) * w + c] = quantize(rgb[ch] / (sub * sub));
                }
            }
        }
        frames.push(Frame::new(h, w, data)?);

        let mut instances = Vec::new();
        for (s, shape) in shapes.iter().enumerate() {
            let bits: Vec<bool> = (0..mh * mw)
                .map(|cell| 2 * counts[cell * shapes.len() + s] > cell_samples)
                .collect();
            let mask = BinaryMask::new(mh, mw, bits)?;
            if !mask.is_empty() {
                instances.push(GtInstance {
                    id: s,
                    class_id: shape.class_id,
                    mask,
                });
            }
        }
        gt_frames.push(GtFrame { instances });
    }
    Ok(Clip {
        frames,
        gt: ClipGroundTruth {
            mask_height: mh,
            mask_width: mw,
            frames: gt_frames,
        },
    })
}

/// Subsamples of frame `t` covered by two or more shapes.
pub fn occluded_samples(shapes: &[ShapeSpec], config: &ClipConfig, t: usize) -> usize {
    let scale = config.height.min(config.width) as f64;
    let sub = SUPERSAMPLE as f64;
    let mut n = 0;
    for r in 0..config.height * SUPERSAMPLE {
        for c in 0..config.width * SUPERSAMPLE {
            let x = (c as f64 + 0.5) / sub / scale;
            let y = (r as f64 + 0.5) / sub / scale;
            if shapes.iter().filter(|s| s.contains(t, x, y)).count() >= 2 {
                n += 1;
            }
        }
    }
    n
}

fn hue_color(h: f64) -> [f64; 3] {
    // HSV with s = 0.75, v = 0.95
    let (s, v) = (0.75, 0.95);
    let i = (h * 6.0).floor();
    let f = h * 6.0 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - f * s), v * (1.0 - (1.0 - f) * s));
    match (i as i64).rem_euclid(6) {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn random_shape(rng: &mut ChaCha8Rng, depth: usize, frames: usize) -> ShapeSpec {
    let kind = *ShapeKind::ALL.choose(rng).unwrap();
    let vmax = (0.4 / frames.max(1) as f64).min(0.08);
    ShapeSpec {
        kind,
        class_id: kind.class_id(),
        size: rng.gen_range(0.25..0.35),
        trajectory: Trajectory {
            start: (rng.gen_range(0.2..0.8), rng.gen_range(0.2..0.8)),
            velocity: (rng.gen_range(-vmax..vmax), rng.gen_range(-vmax..vmax)),
            wobble: None,
        },
        color: hue_color(rng.gen_range(0.0..1.0)),
        depth,
    }
}

/// A clip with `config.num_instances` randomly placed moving shapes.
pub fn generate_clip(config: &ClipConfig, seed: u64) -> Result<Clip> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut depths: Vec<usize> = (0..config.num_instances).collect();
    depths.shuffle(&mut rng);
    let shapes: Vec<ShapeSpec> = depths
        .into_iter()
        .map(|d| random_shape(&mut rng, d, config.frames))
        .collect();
    render_clip(&shapes, config, seed)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scenario {
    /// Instances in separate horizontal bands; they never touch.
    Easy,
    /// Two instances cross paths mid-clip; one occludes the other.
    Crossing,
    /// One instance leaves the frame and comes back.
    ExitReentry,
}

impl std::str::FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "easy" => Ok(Scenario::Easy),
            "crossing" => Ok(Scenario::Crossing),
            "exit_reentry" => Ok(Scenario::ExitReentry),
            other => Err(Error::config(format!(
                "unknown scenario {other:?} (expected easy, crossing or exit_reentry)"
            ))),
        }
    }
}

impl Scenario {
    pub fn name(self) -> &'static str {
        match self {
            Scenario::Easy => "easy",
            Scenario::Crossing => "crossing",
            Scenario::ExitReentry => "exit_reentry",
        }
    }

    /// The scenario's shapes for a given configuration and seed.
    pub fn shapes(self, config: &ClipConfig, seed: u64) -> Result<Vec<ShapeSpec>> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = config.num_instances;
        let frames = config.frames;
        let span = (frames.max(2) - 1) as f64;
        let mut depths: Vec<usize> = (0..n).collect();
        depths.shuffle(&mut rng);
        let mut hues: Vec<f64> = (0..n).map(|i| (i as f64 + rng.gen_range(0.0..0.6)) / n as f64).collect();
        hues.shuffle(&mut rng);
        let shape = |i: usize, size: f64, traj: Trajectory, rng: &mut ChaCha8Rng| {
            let kind = *ShapeKind::ALL.choose(rng).unwrap();
            ShapeSpec {
                kind,
                class_id: kind.class_id(),
                size,
                trajectory: traj,
                color: hue_color(hues[i]),
                depth: depths[i],
            }
        };
        let band = |i: usize| (i as f64 + 0.5) / n as f64;
        let band_size = (0.8 / n as f64).min(0.3);
        let drift = |rng: &mut ChaCha8Rng| rng.gen_range(-0.15..0.15) / span;

        let mut shapes = Vec::with_capacity(n);
        match self {
            Scenario::Easy => {
                for i in 0..n {
                    let traj = Trajectory {
                        start: (rng.gen_range(0.3..0.7), band(i)),
                        velocity: (drift(&mut rng), 0.0),
                        wobble: None,
                    };
                    shapes.push(shape(i, band_size, traj, &mut rng));
                }
            }
            Scenario::Crossing => {
                if n < 2 {
                    return Err(Error::config("the crossing scenario needs at least two instances"));
                }
                let row = rng.gen_range(0.42..0.55);
                let speed = 0.6 / span;
                // the centers pass 0.06 apart at an integer frame, so one
                // center always lies inside the other shape
                let meet = ((frames.max(1) - 1) / 2) as f64;
                for (i, (x_meet, dir)) in [(0.47, 1.0), (0.53, -1.0)].into_iter().enumerate() {
                    let traj = Trajectory {
                        start: (x_meet - dir * speed * meet, row + rng.gen_range(-0.04..0.04)),
                        velocity: (dir * speed, 0.0),
                        wobble: None,
                    };
                    let size = rng.gen_range(0.26..0.32);
                    shapes.push(shape(i, size, traj, &mut rng));
                }
                let lanes = [0.12, 0.88];
                for i in 2..n {
                    let lane = lanes[(i - 2) % 2];
                    let x = if n > 4 { (i as f64 - 1.5) / (n as f64 - 1.0) } else { rng.gen_range(0.25..0.75) };
                    let traj = Trajectory {
                        start: (x, lane),
                        velocity: (drift(&mut rng) * 0.5, 0.0),
                        wobble: None,
                    };
                    shapes.push(shape(i, 0.2, traj, &mut rng));
                }
            }
            Scenario::ExitReentry => {
                for i in 0..n {
                    let traj = if i == 0 {
                        Trajectory {
                            start: (0.7, band(0)),
                            velocity: (0.0, 0.0),
                            wobble: Some(Wobble {
                                amplitude: (0.52, 0.0),
                                period: 2.0 * span,
                                phase: 0.0,
                            }),
                        }
                    } else {
                        Trajectory {
                            start: (rng.gen_range(0.25..0.55), band(i)),
                            velocity: (drift(&mut rng) * 0.5, 0.0),
                            wobble: None,
                        }
                    };
                    shapes.push(shape(i, band_size, traj, &mut rng));
                }
            }
        }
        Ok(shapes)
    }

    pub fn clip(self, config: &ClipConfig, seed: u64) -> Result<Clip> {
        let shapes = self.shapes(config, seed)?;
        render_clip(&shapes, config, seed)
    }
}

/// Curated clip by scenario name at the default resolution (4 frames,
/// 3 instances).
pub fn scenario(name: &str, seed: u64) -> Result<Clip> {
    let s: Scenario = name.parse()?;
    s.clip(&ClipConfig::default(), seed)
}

#[derive(Serialize, Deserialize)]
struct GtInstanceDoc {
    id: usize,
    class: usize,
    mask: Rle,
}

#[derive(Serialize, Deserialize)]
struct GtFrameDoc {
    instances: Vec<GtInstanceDoc>,
}

#[derive(Serialize, Deserialize)]
struct GtDoc {
    mask_height: usize,
    mask_width: usize,
    frames: Vec<GtFrameDoc>,
}

pub fn gt_to_json(gt: &ClipGroundTruth) -> Result<String> {
    let doc = GtDoc {
        mask_height: gt.mask_height,
        mask_width: gt.mask_width,
        frames: gt
            .frames
            .iter()
            .map(|f| GtFrameDoc {
                instances: f
                    .instances
                    .iter()
                    .map(|i| GtInstanceDoc {
                        id: i.id,
                        class: i.class_id,
                        mask: i.mask.to_rle(),
                    })
                    .collect(),
            })
            .collect(),
    };
    Ok(serde_json::to_string_pretty(&doc)?)
}

pub fn gt_from_json(text: &str) -> Result<ClipGroundTruth> {
    let doc: GtDoc = serde_json::from_str(text)?;
    let frames = doc
        .frames
        .into_iter()
        .map(|f| {
            Ok(GtFrame {
                instances: f
                    .instances
                    .into_iter()
                    .map(|i| {
                        Ok(GtInstance {
                            id: i.id,
                            class_id: i.class,
                            mask: i.mask.decode()?,
                        })
                    })
                    .collect::<Result<_>>()?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(ClipGroundTruth {
        mask_height: doc.mask_height,
        mask_width: doc.mask_width,
        frames,
    })
}

pub fn frame_file_name(t: usize) -> String {
    format!("frame_{t:03}.ppm")
}

/// Writes `frame_NNN.ppm` files and `gt.json` into `dir`.
pub fn save_clip(clip: &Clip, dir: &Path) -> Result<()> {
    io::create_dir(dir)?;
    for (t, f) in clip.frames.iter().enumerate() {
        io::write_file(&dir.join(frame_file_name(t)), &io::encode_ppm(f))?;
    }
    io::write_file(&dir.join("gt.json"), gt_to_json(&clip.gt)?.as_bytes())
}

pub fn load_frame(dir: &Path, t: usize) -> Result<Frame> {
    let path = dir.join(frame_file_name(t));
    io::decode_ppm(&io::read_file(&path)?, &path)
}

pub fn load_gt(dir: &Path) -> Result<ClipGroundTruth> {
    let path = dir.join("gt.json");
    let text = String::from_utf8(io::read_file(&path)?).map_err(|_| Error::format(&path, "not UTF-8"))?;
    gt_from_json(&text)
}

pub fn load_clip(dir: &Path) -> Result<Clip> {
    let gt = load_gt(dir)?;
    let frames = (0..gt.frames.len()).map(|t| load_frame(dir, t)).collect::<Result<_>>()?;
    Ok(Clip { frames, gt })
}

/// Loads every `clip_*` subdirectory of `dir` in name order.
pub fn load_dataset(dir: &Path) -> Result<Vec<Clip>> {
    let clips: Vec<Clip> = io::subdirs(dir)?
        .iter()
        .filter(|p| p.file_name().is_some_and(|n| n.to_string_lossy().starts_with("clip_")))
        .map(|p| load_clip(p))
        .collect::<Result<_>>()?;
    if clips.is_empty() {
        return Err(Error::config(format!("no clip_* directories in {}", dir.display())));
    }
    Ok(clips)
}
