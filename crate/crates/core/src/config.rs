//! Flat `key = value` run configuration with `#` comments.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::io;
use crate::loss::{FocalParams, LossWeights};
use crate::model::{LocalPeKind, ModelConfig};
use crate::synth::{ClipConfig, Scenario};
use crate::train::{AdamW, TrainConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub weights: LossWeights,
    pub focal: FocalParams,
    pub optimizer: AdamW,
    pub reduced_supervision: bool,
    pub p_keep: f64,
    pub clip_len: usize,
    pub instances: usize,
    pub clips: usize,
    pub scenarios: Vec<Scenario>,
    pub steps: u64,
    pub seed: u64,
    /// Coordinates checked per parameter tensor by the gradient check;
    /// 0 checks all of them.
    pub gradcheck_coords: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            weights: LossWeights::default(),
            focal: FocalParams::default(),
            optimizer: AdamW::default(),
            reduced_supervision: true,
            p_keep: 0.5,
            clip_len: 4,
            instances: 3,
            clips: 20,
            scenarios: vec![Scenario::Crossing],
            steps: 2000,
            seed: 0,
            gradcheck_coords: 6,
        }
    }
}

/// Ablation switches accepted by `--ablate`.
pub const ABLATIONS: [&str; 4] = ["no-aligner", "no-trajectory", "dynamic-local-pe", "no-reduced-supervision"];

fn parse_bool(v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" | "1" | "on" | "yes" => Ok(true),
        "false" | "0" | "off" | "no" => Ok(false),
        _ => Err(format!("expected a boolean, got {v:?}")),
    }
}

fn parse_num<T: std::str::FromStr>(v: &str) -> std::result::Result<T, String> {
    v.parse().map_err(|_| format!("expected a number, got {v:?}"))
}

impl RunConfig {
    fn set(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        let m = &mut self.model;
        match key {
            "num_queries" => m.num_queries = parse_num(v)?,
            "num_local" => m.num_local = parse_num(v)?,
            "width" => m.width = parse_num(v)?,
            "heads" => m.heads = parse_num(v)?,
            "encoder_layers" => m.encoder_layers = parse_num(v)?,
            "encoder_ffn" => m.encoder_ffn = parse_num(v)?,
            "decoder_layers" => m.decoder_layers = parse_num(v)?,
            "decoder_ffn" => m.decoder_ffn = parse_num(v)?,
            "aligner_layers" => m.aligner_layers = parse_num(v)?,
            "aligner_ffn" => m.aligner_ffn = parse_num(v)?,
            "patch" => m.patch = parse_num(v)?,
            "image_height" => m.image_height = parse_num(v)?,
            "image_width" => m.image_width = parse_num(v)?,
            "num_classes" => m.num_classes = parse_num(v)?,
            "use_aligner" => m.use_aligner = parse_bool(v)?,
            "trajectory_pe" => m.trajectory_pe = parse_bool(v)?,
            "local_pe" => {
                m.local_pe = match v {
                    "static" => LocalPeKind::Static,
                    "dynamic" => LocalPeKind::Dynamic,
                    _ => return Err(format!("expected static or dynamic, got {v:?}")),
                }
            }
            "reduced_supervision" => self.reduced_supervision = parse_bool(v)?,
            "p_keep" => self.p_keep = parse_num(v)?,
            "lambda_cls" => self.weights.cls = parse_num(v)?,
            "lambda_ce" => self.weights.ce = parse_num(v)?,
            "lambda_dice" => self.weights.dice = parse_num(v)?,
            "focal_alpha" => self.focal.alpha = parse_num(v)?,
            "focal_gamma" => self.focal.gamma = parse_num(v)?,
            "lr" => self.optimizer.lr = parse_num(v)?,
            "beta1" => self.optimizer.beta1 = parse_num(v)?,
            "beta2" => self.optimizer.beta2 = parse_num(v)?,
            "weight_decay" => self.optimizer.weight_decay = parse_num(v)?,
            "clip_len" => self.clip_len = parse_num(v)?,
            "instances" => self.instances = parse_num(v)?,
            "clips" => self.clips = parse_num(v)?,
            "scenarios" => {
                self.scenarios = v
                    .split(',')
                    .map(|s| s.trim().parse::<Scenario>().map_err(|e| e.to_string()))
                    .collect::<std::result::Result<_, _>>()?
            }
            "steps" => self.steps = parse_num(v)?,
            "seed" => self.seed = parse_num(v)?,
            "gradcheck_coords" => self.gradcheck_coords = parse_num(v)?,
            _ => return Err(format!("unknown key {key:?}")),
        }
        Ok(())
    }

    /// Parses `text` over the defaults. Every line is checked before the
    /// result is validated.
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |message: String| Error::ConfigLine {
                path: origin.to_string(),
                line: i + 1,
                message,
            };
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected key = value, got {line:?}")))?;
            cfg.set(k.trim(), v.trim()).map_err(err)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = io::read_file(path)?;
        let text = String::from_utf8(bytes).map_err(|_| Error::format(path, "config is not UTF-8"))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.weights.validate()?;
        if !(0.0..=1.0).contains(&self.p_keep) {
            return Err(Error::config("p_keep must lie in [0, 1]"));
        }
        if self.scenarios.is_empty() {
            return Err(Error::config("at least one scenario is required"));
        }
        self.clip_config().validate()?;
        let o = &self.optimizer;
        if !(o.lr >= 0.0 && (0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2) && o.weight_decay >= 0.0) {
            return Err(Error::config("invalid optimizer settings"));
        }
        Ok(())
    }

    /// Applies one `--ablate` switch.
    pub fn ablate(&mut self, name: &str) -> Result<()> {
        match name {
            "no-aligner" => self.model.use_aligner = false,
            "no-trajectory" => self.model.trajectory_pe = false,
            "dynamic-local-pe" => self.model.local_pe = LocalPeKind::Dynamic,
            "no-reduced-supervision" => self.reduced_supervision = false,
            _ => {
                return Err(Error::config(format!(
                    "unknown ablation {name:?} (expected one of {})",
                    ABLATIONS.join(", ")
                )))
            }
        }
        Ok(())
    }

    pub fn clip_config(&self) -> ClipConfig {
        ClipConfig {
            height: self.model.image_height,
            width: self.model.image_width,
            mask_stride: self.model.patch,
            frames: self.clip_len,
            num_instances: self.instances,
            max_instances: self.model.num_queries,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            optimizer: self.optimizer,
            weights: self.weights,
            focal: self.focal,
            reduced_supervision: self.reduced_supervision,
            p_keep: self.p_keep,
            seed: self.seed,
        }
    }

    /// The configuration as parseable text.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("num_queries", m.num_queries.to_string());
        kv("num_local", m.num_local.to_string());
        kv("width", m.width.to_string());
        kv("heads", m.heads.to_string());
        kv("encoder_layers", m.encoder_layers.to_string());
        kv("encoder_ffn", m.encoder_ffn.to_string());
        kv("decoder_layers", m.decoder_layers.to_string());
        kv("decoder_ffn", m.decoder_ffn.to_string());
        kv("aligner_layers", m.aligner_layers.to_string());
        kv("aligner_ffn", m.aligner_ffn.to_string());
        kv("patch", m.patch.to_string());
        kv("image_height", m.image_height.to_string());
        kv("image_width", m.image_width.to_string());
        kv("num_classes", m.num_classes.to_string());
        kv("use_aligner", m.use_aligner.to_string());
        kv("trajectory_pe", m.trajectory_pe.to_string());
        kv(
            "local_pe",
            match m.local_pe {
                LocalPeKind::Static => "static",
                LocalPeKind::Dynamic => "dynamic",
            }
            .to_string(),
        );
        kv("reduced_supervision", self.reduced_supervision.to_string());
        kv("p_keep", self.p_keep.to_string());
        kv("lambda_cls", self.weights.cls.to_string());
        kv("lambda_ce", self.weights.ce.to_string());
        kv("lambda_dice", self.weights.dice.to_string());
        kv("focal_alpha", self.focal.alpha.to_string());
        kv("focal_gamma", self.focal.gamma.to_string());
        kv("lr", self.optimizer.lr.to_string());
        kv("beta1", self.optimizer.beta1.to_string());
        kv("beta2", self.optimizer.beta2.to_string());
        kv("weight_decay", self.optimizer.weight_decay.to_string());
        kv("clip_len", self.clip_len.to_string());
        kv("instances", self.instances.to_string());
        kv("clips", self.clips.to_string());
        kv(
            "scenarios",
            self.scenarios.iter().map(|s| s.name()).collect::<Vec<_>>().join(","),
        );
        kv("steps", self.steps.to_string());
        kv("seed", self.seed.to_string());
        kv("gradcheck_coords", self.gradcheck_coords.to_string());
        s
    }
}
