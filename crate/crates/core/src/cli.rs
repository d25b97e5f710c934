//! The `propvis` command line: dataset generation, training, evaluation,
//! inference and gradient checking.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::eval::{evaluate, predictions_from_json, predictions_to_json, PredictedFrame};
use crate::io;
use crate::model::Model;
use crate::numcore::GradCheckOptions;
use crate::segmenter::Frame;
use crate::synth::{self, Clip};
use crate::tracker::{self, run_video};
use crate::train::{self, OptimizerState};

#[derive(Debug, Parser)]
#[command(name = "propvis", version, about = "Online video instance segmentation at desk scale")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, clap::Args)]
pub struct Common {
    /// key = value configuration file
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed
    #[arg(long)]
    pub seed: Option<u64>,
    /// no-aligner, no-trajectory, dynamic-local-pe or no-reduced-supervision
    #[arg(long = "ablate")]
    pub ablate: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write synthetic clips to a directory
    Gen {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on a generated dataset and write a checkpoint
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from this checkpoint
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a checkpoint (or saved predictions) on a dataset
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Directory of clip_NNN.json prediction documents used instead of
        /// running a model
        #[arg(long, conflicts_with = "checkpoint")]
        predictions: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Report path; printed to stdout when absent
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Track one clip and write overlays plus a predictions document
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Clip directory
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare backpropagated gradients with finite differences
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Scale analytic gradients by 1.5 before comparing
        #[arg(long)]
        corrupt_grad: bool,
    },
}

/// Parses `args` (program name first) and runs the command, returning the
/// process exit status.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = if code == 0 {
                write!(out, "{}", e.render())
            } else {
                write!(err, "{}", e.render())
            };
            return code;
        }
    };
    match dispatch(cli.command, out) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cmd: Command, out: &mut dyn Write) -> Result<i32> {
    match cmd {
        Command::Gen { common, out: dir } => cmd_gen(&load_config(&common)?, &dir, out).map(|_| 0),
        Command::Train {
            common,
            data,
            out: ckpt,
            resume,
        } => cmd_train(&load_config(&common)?, &data, &ckpt, resume.as_deref(), out).map(|_| 0),
        Command::Eval {
            checkpoint,
            predictions,
            data,
            out: report,
        } => {
            let source = match (checkpoint, predictions) {
                (Some(c), None) => PredictionSource::Checkpoint(c),
                (None, Some(p)) => PredictionSource::Documents(p),
                _ => return Err(Error::config("eval needs --checkpoint or --predictions")),
            };
            let json = cmd_eval(&source, &data)?;
            match report {
                Some(path) => io::write_file(&path, json.as_bytes())?,
                None => writeln!(out, "{json}").map_err(|e| Error::io("<stdout>", e))?,
            }
            Ok(0)
        }
        Command::Infer {
            checkpoint,
            data,
            out: dir,
        } => cmd_infer(&checkpoint, &data, &dir).map(|_| 0),
        Command::Gradcheck { common, corrupt_grad } => {
            let passed = cmd_gradcheck(&load_config(&common)?, corrupt_grad, out)?;
            Ok(if passed { 0 } else { 2 })
        }
    }
}

/// Reads `--config` (or the defaults), then applies `--seed` and
/// `--ablate`.
pub fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    for a in &common.ablate {
        cfg.ablate(a)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_line(out: &mut dyn Write, line: &str) -> Result<()> {
    writeln!(out, "{line}").map_err(|e| Error::io("<stdout>", e))
}

fn timestamp() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

/// Seed of clip `index` in a dataset generated with `seed`.
pub fn clip_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (index as u64).wrapping_mul(0xbf58_476d_1ce4_e5b9)
}

/// The clips `cmd_gen` would write, cycling through the configured
/// scenarios.
pub fn generate_dataset(cfg: &RunConfig) -> Result<Vec<Clip>> {
    let clip_cfg = cfg.clip_config();
    (0..cfg.clips)
        .map(|i| cfg.scenarios[i % cfg.scenarios.len()].clip(&clip_cfg, clip_seed(cfg.seed, i)))
        .collect()
}

pub fn clip_dir_name(i: usize) -> String {
    format!("clip_{i:03}")
}

pub fn cmd_gen(cfg: &RunConfig, dir: &Path, out: &mut dyn Write) -> Result<()> {
    let clips = generate_dataset(cfg)?;
    io::create_dir(dir)?;
    for (i, clip) in clips.iter().enumerate() {
        synth::save_clip(clip, &dir.join(clip_dir_name(i)))?;
    }
    write_line(out, &format!("wrote {} clips to {}", clips.len(), dir.display()))
}

pub fn cmd_train(cfg: &RunConfig, data: &Path, ckpt: &Path, resume: Option<&Path>, out: &mut dyn Write) -> Result<()> {
    let pool = synth::load_dataset(data)?;
    let (mut model, mut opt) = match resume {
        Some(path) => {
            let (model, opt) = train::load_checkpoint(path)?;
            if model.config != cfg.model {
                return Err(Error::config("checkpoint model configuration differs from the run configuration"));
            }
            (model, opt)
        }
        None => {
            let model = Model::new(cfg.model.clone(), cfg.seed)?;
            let opt = OptimizerState::new(&model);
            (model, opt)
        }
    };
    write_line(out, &format!("# start unix={} step={}", timestamp(), opt.step))?;
    let tc = cfg.train_config();
    train::train(&mut model, &pool, &mut opt, &tc, cfg.steps, |step, rec| {
        write_line(out, &rec.log_line(step))
    })?;
    train::save_checkpoint(ckpt, &model, &opt)?;
    write_line(out, &format!("# done unix={} step={}", timestamp(), opt.step))
}

pub enum PredictionSource {
    Checkpoint(PathBuf),
    /// Directory with one `clip_NNN.json` per dataset clip.
    Documents(PathBuf),
}

/// Runs the tracker over every clip of a dataset.
pub fn predict_dataset(model: &Model, clips: &[Clip]) -> Result<Vec<Vec<PredictedFrame>>> {
    clips
        .iter()
        .map(|c| {
            let (preds, _) = run_video(&c.frames, model)?;
            Ok(preds.iter().map(PredictedFrame::from).collect())
        })
        .collect()
}

/// Evaluation report of a dataset as JSON.
pub fn cmd_eval(source: &PredictionSource, data: &Path) -> Result<String> {
    let clips = synth::load_dataset(data)?;
    let preds: Vec<Vec<PredictedFrame>> = match source {
        PredictionSource::Checkpoint(path) => predict_dataset(&train::load_checkpoint(path)?.0, &clips)?,
        PredictionSource::Documents(dir) => (0..clips.len())
            .map(|i| {
                let path = dir.join(format!("{}.json", clip_dir_name(i)));
                let text = String::from_utf8(io::read_file(&path)?).map_err(|_| Error::format(&path, "not UTF-8"))?;
                predictions_from_json(&text)
            })
            .collect::<Result<_>>()?,
    };
    let pairs: Vec<_> = preds.iter().zip(&clips).map(|(p, c)| (p.as_slice(), &c.gt)).collect();
    evaluate(&pairs)?.to_json()
}

/// Stable display color of a track id.
pub fn track_color(id: i64) -> [u8; 3] {
    let h = (id as f64 * 0.618_033_988_75).rem_euclid(1.0);
    let sector = (h * 6.0).floor();
    let f = h * 6.0 - sector;
    let (v, p, q, t) = (255.0, 40.0, 255.0 - 215.0 * f, 40.0 + 215.0 * f);
    let rgb = match sector as i64 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    };
    rgb.map(|x| x.round() as u8)
}

/// Frame blended half-and-half with the track colors of every tracked
/// query's mask.
pub fn overlay(frame: &Frame, pred: &PredictedFrame) -> Vec<[u8; 3]> {
    let (h, w) = (frame.height(), frame.width());
    let mut owner: Vec<Option<i64>> = vec![None; h * w];
    for (q, m) in pred.masks.iter().enumerate() {
        let id = pred.track_ids[q];
        if id < 0 {
            continue;
        }
        let (sy, sx) = (h / m.height(), w / m.width());
        for r in 0..h {
            for c in 0..w {
                if m.get(r / sy, c / sx) {
                    owner[r * w + c] = Some(id);
                }
            }
        }
    }
    let mut out = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            let base = [0, 1, 2].map(|ch| frame.at(ch, r, c).clamp(0.0, 1.0) * 255.0);
            let px = match owner[r * w + c] {
                Some(id) => {
                    let col = track_color(id);
                    [0, 1, 2].map(|ch| ((base[ch] + col[ch] as f64) / 2.0).round() as u8)
                }
                None => base.map(|x| x.round() as u8),
            };
            out.push(px);
        }
    }
    out
}

pub fn cmd_infer(ckpt: &Path, clip_dir: &Path, out_dir: &Path) -> Result<()> {
    let (model, _) = train::load_checkpoint(ckpt)?;
    let gt = synth::load_gt(clip_dir)?;
    io::create_dir(out_dir)?;
    let mut preds = Vec::with_capacity(gt.frames.len());
    let mut state = tracker::init_state(&model)?;
    for t in 0..gt.frames.len() {
        let frame = synth::load_frame(clip_dir, t)?;
        let (mut p, mut next) = tracker::step(&state, &frame, &model)?;
        tracker::birth_tracks(&mut next, &mut p);
        state = next;
        let pf = PredictedFrame::from(&p);
        io::write_file(
            &out_dir.join(format!("overlay_{t:03}.ppm")),
            &io::rgb_to_ppm(frame.height(), frame.width(), &overlay(&frame, &pf)),
        )?;
        preds.push(pf);
    }
    io::write_file(&out_dir.join("predictions.json"), predictions_to_json(&preds)?.as_bytes())
}

/// Prints the per-module table and returns whether every tensor passed.
pub fn cmd_gradcheck(cfg: &RunConfig, corrupt: bool, out: &mut dyn Write) -> Result<bool> {
    let model = Model::new(cfg.model.clone(), cfg.seed)?;
    let mut clip_cfg = cfg.clip_config();
    clip_cfg.frames = 2;
    let clip = synth::Scenario::Crossing.clip(&clip_cfg, cfg.seed)?;
    let opts = GradCheckOptions {
        max_coords: (cfg.gradcheck_coords > 0).then_some(cfg.gradcheck_coords),
        analytic_scale: if corrupt { 1.5 } else { 1.0 },
        ..GradCheckOptions::default()
    };
    let report = train::clip_grad_check(&model, &clip, &cfg.train_config(), &opts)?;
    let mut by_module: BTreeMap<&str, (usize, f64)> = BTreeMap::new();
    for p in &report.params {
        let e = by_module.entry(train::module_of(&p.name)).or_insert((0, 0.0));
        e.0 += p.checked;
        e.1 = e.1.max(p.max_rel_error);
    }
    write_line(out, &format!("{:<24} {:>8} {:>14}", "module", "checked", "max_rel_error"))?;
    for (m, (n, e)) in &by_module {
        write_line(out, &format!("{:<24} {:>8} {:>14.3e}", m, n, e))?;
    }
    let passed = report.passed();
    write_line(
        out,
        &format!(
            "gradcheck {} loss={:.6} max_rel_error={:.3e} tol={:.0e}",
            if passed { "PASS" } else { "FAIL" },
            report.loss,
            report.max_error(),
            report.tol
        ),
    )?;
    Ok(passed)
}
