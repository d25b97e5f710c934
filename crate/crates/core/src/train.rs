//! Clip-level training: forward over every frame in one graph, one-shot
//! assignment, clip loss, backward and a decoupled-weight-decay Adam step.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::assign::{match_new_instances, Assignment};
use crate::error::{Error, Result};
use crate::loss::{clip_loss, supervision_schedule, FocalParams, LossWeights, SupervisionMask};
use crate::model::{FrameOutput, FramePrediction, LocalPeKind, Model, ModelConfig};
use crate::numcore::{checkpoint, grad_check, Bound, GradCheckOptions, GradCheckReport, Graph, Tensor};
use crate::synth::Clip;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// First and second moments per parameter tensor, in parameter order.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(model: &Model) -> Self {
        let zeros: Vec<Vec<f64>> = model.params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        OptimizerState {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

impl AdamW {
    /// Applies one update from the gradients stored on the parameters.
    pub fn update(&self, model: &mut Model, state: &mut OptimizerState) -> Result<()> {
        if state.m.len() != model.params.len() {
            return Err(Error::contract("optimizer state does not match the model"));
        }
        state.step += 1;
        let t = state.step as f64;
        let c1 = 1.0 - self.beta1.powf(t);
        let c2 = 1.0 - self.beta2.powf(t);
        for ((p, m), v) in model.params.tensors_mut().zip(&mut state.m).zip(&mut state.v) {
            let Some(grad) = p.grad.take() else { continue };
            let data = p.data_mut();
            for j in 0..data.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * grad[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * grad[j] * grad[j];
                let step = (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps) + self.weight_decay * data[j];
                data[j] -= self.lr * step;
            }
            p.grad = Some(vec![0.0; data.len()]);
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub optimizer: AdamW,
    pub weights: LossWeights,
    pub focal: FocalParams,
    /// Randomly drop earlier frames from the loss.
    pub reduced_supervision: bool,
    pub p_keep: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: AdamW::default(),
            weights: LossWeights::default(),
            focal: FocalParams::default(),
            reduced_supervision: true,
            p_keep: 0.5,
            seed: 0,
        }
    }
}

/// One training step's outcome.
#[derive(Clone, Debug)]
pub struct StepRecord {
    pub loss: f64,
    pub cls: f64,
    pub ce: f64,
    pub dice: f64,
    pub supervision: SupervisionMask,
    /// Assignment after each frame.
    pub assignments: Vec<Assignment>,
}

impl StepRecord {
    pub fn log_line(&self, step: u64) -> String {
        format!(
            "step={step} loss={:.6} cls={:.6} ce={:.6} dice={:.6} sup={}",
            self.loss,
            self.cls,
            self.ce,
            self.dice,
            self.supervision.bits()
        )
    }
}

/// Runs every frame of `clip` through one graph, propagating queries.
pub fn clip_forward(model: &Model, g: &mut Graph, p: &Bound, clip: &Clip) -> Result<Vec<FrameOutput>> {
    if clip.frames.is_empty() {
        return Err(Error::contract("training clips need at least one frame"));
    }
    let mut state = model.initial_graph_state(g, p)?;
    let mut outs = Vec::with_capacity(clip.frames.len());
    for frame in &clip.frames {
        let (out, next) = model.forward_frame(g, p, state, frame)?;
        outs.push(out);
        state = next;
    }
    Ok(outs)
}

/// Builds the one-shot assignment frame by frame, checking after each
/// frame that it stayed injective and kept every earlier pair.
pub fn assign_clip(g: &Graph, outs: &[FrameOutput], clip: &Clip, weights: &LossWeights) -> Result<Vec<Assignment>> {
    let mut current = Assignment::new();
    let mut history = Vec::with_capacity(outs.len());
    for (t, (out, gt)) in outs.iter().zip(&clip.gt.frames).enumerate() {
        let pred = FramePrediction::from_graph(g, out, Vec::new());
        let next = match_new_instances(&current, &pred, gt, t, weights)?;
        if !next.is_injective() || !next.extends(&current) {
            return Err(Error::contract(format!("assignment invariant broken at frame {t}")));
        }
        history.push(next.clone());
        current = next;
    }
    Ok(history)
}

/// Forward, loss, backward and one optimizer update on a single clip.
pub fn train_step(
    model: &mut Model,
    clip: &Clip,
    opt: &mut OptimizerState,
    config: &TrainConfig,
    supervision: &SupervisionMask,
) -> Result<StepRecord> {
    let mut g = Graph::new();
    let p = model.params.bind(&mut g);
    let outs = clip_forward(model, &mut g, &p, clip)?;
    let assignments = assign_clip(&g, &outs, clip, &config.weights)?;
    let final_assignment = assignments.last().expect("clip has frames");
    let loss = clip_loss(
        &mut g,
        &outs,
        &clip.gt,
        final_assignment,
        &config.weights,
        &config.focal,
        supervision,
    )?;
    let value = g.scalar_value(loss.total);
    if !value.is_finite() {
        return Err(Error::contract(format!("non-finite loss {value}")));
    }
    g.backward(loss.total)?;
    model.params.zero_grad();
    model.params.collect_grads(&g, &p);
    drop(g);
    config.optimizer.update(model, opt)?;
    Ok(StepRecord {
        loss: value,
        cls: loss.cls,
        ce: loss.ce,
        dice: loss.dice,
        supervision: supervision.clone(),
        assignments,
    })
}

/// Random stream for step `step` of a run, independent of earlier steps.
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng
}

/// Picks the step's clip and supervision mask, then trains on it.
pub fn train_on_pool(
    model: &mut Model,
    pool: &[Clip],
    opt: &mut OptimizerState,
    config: &TrainConfig,
) -> Result<StepRecord> {
    if pool.is_empty() {
        return Err(Error::contract("empty training pool"));
    }
    let mut rng = step_rng(config.seed, opt.step);
    let clip = &pool[rng.gen_range(0..pool.len())];
    let len = clip.frames.len();
    let sup = if config.reduced_supervision {
        supervision_schedule(len, config.p_keep, &mut rng)?
    } else {
        SupervisionMask::all(len)?
    };
    train_step(model, clip, opt, config, &sup)
}

/// Trains until `opt.step == total_steps`, calling `on_step` after each.
pub fn train<F>(model: &mut Model, pool: &[Clip], opt: &mut OptimizerState, config: &TrainConfig, total_steps: u64, mut on_step: F) -> Result<()>
where
    F: FnMut(u64, &StepRecord) -> Result<()>,
{
    while opt.step < total_steps {
        let rec = train_on_pool(model, pool, opt, config)?;
        on_step(opt.step, &rec)?;
    }
    Ok(())
}

/// Finite-difference check of the full clip loss (every frame
/// supervised). The assignment is computed once at the unperturbed
/// parameters and held fixed.
pub fn clip_grad_check(model: &Model, clip: &Clip, config: &TrainConfig, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let assignment = {
        let mut g = Graph::new();
        let p = model.params.bind(&mut g);
        let outs = clip_forward(model, &mut g, &p, clip)?;
        assign_clip(&g, &outs, clip, &config.weights)?
            .pop()
            .expect("clip has frames")
    };
    let sup = SupervisionMask::all(clip.frames.len())?;
    grad_check(
        &model.params,
        |g, p| {
            let outs = clip_forward(model, g, p, clip)?;
            Ok(clip_loss(g, &outs, &clip.gt, &assignment, &config.weights, &config.focal, &sup)?.total)
        },
        opts,
    )
}

/// Module a parameter belongs to, for grouping gradient-check results.
pub fn module_of(name: &str) -> &'static str {
    const MODULES: [&str; 7] = [
        "segmenter.encoder",
        "segmenter.decoder",
        "segmenter.class_head",
        "segmenter.mask_head",
        "aligner",
        "posembed",
        "",
    ];
    MODULES.iter().copied().find(|m| name.starts_with(m)).unwrap_or("")
}

const CONFIG_KEY: &str = "meta.model_config";
const STEP_KEY: &str = "optim.step";

fn config_to_tensor(c: &ModelConfig) -> Tensor {
    let v = [
        c.num_queries,
        c.num_local,
        c.width,
        c.heads,
        c.encoder_layers,
        c.encoder_ffn,
        c.decoder_layers,
        c.decoder_ffn,
        c.aligner_layers,
        c.aligner_ffn,
        c.patch,
        c.image_height,
        c.image_width,
        c.num_classes,
        c.use_aligner as usize,
        c.trajectory_pe as usize,
        (c.local_pe == LocalPeKind::Dynamic) as usize,
    ];
    Tensor::new(vec![v.len()], v.iter().map(|&x| x as f64).collect()).expect("non-empty")
}

fn config_from_tensor(t: &Tensor) -> Result<ModelConfig> {
    let d = t.data();
    if d.len() != 17 || d.iter().any(|x| x.fract() != 0.0 || *x < 0.0) {
        return Err(Error::contract("malformed model configuration in checkpoint"));
    }
    let u = |i: usize| d[i] as usize;
    Ok(ModelConfig {
        num_queries: u(0),
        num_local: u(1),
        width: u(2),
        heads: u(3),
        encoder_layers: u(4),
        encoder_ffn: u(5),
        decoder_layers: u(6),
        decoder_ffn: u(7),
        aligner_layers: u(8),
        aligner_ffn: u(9),
        patch: u(10),
        image_height: u(11),
        image_width: u(12),
        num_classes: u(13),
        use_aligner: u(14) == 1,
        trajectory_pe: u(15) == 1,
        local_pe: if u(16) == 1 { LocalPeKind::Dynamic } else { LocalPeKind::Static },
    })
}

/// Checkpoint entries: model configuration, parameters, then optimizer
/// moments and step count.
pub fn checkpoint_entries(model: &Model, opt: &OptimizerState) -> Vec<(String, Tensor)> {
    let mut out = vec![(CONFIG_KEY.to_string(), config_to_tensor(&model.config))];
    for (name, t) in model.params.iter() {
        out.push((name.to_string(), Tensor::new(t.shape().to_vec(), t.data().to_vec()).expect("valid shape")));
    }
    out.push((STEP_KEY.to_string(), Tensor::scalar(opt.step as f64)));
    for (k, (name, t)) in model.params.iter().enumerate() {
        let shape = t.shape().to_vec();
        out.push((format!("optim.m.{name}"), Tensor::new(shape.clone(), opt.m[k].clone()).expect("valid shape")));
        out.push((format!("optim.v.{name}"), Tensor::new(shape, opt.v[k].clone()).expect("valid shape")));
    }
    out
}

pub fn save_checkpoint(path: &Path, model: &Model, opt: &OptimizerState) -> Result<()> {
    checkpoint::save(path, &checkpoint_entries(model, opt))
}

/// Restores a model and its optimizer state.
pub fn restore(entries: &[(String, Tensor)], path: &Path) -> Result<(Model, OptimizerState)> {
    let find = |key: &str| {
        entries
            .iter()
            .find(|(n, _)| n == key)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::format(path, format!("missing {key}")))
    };
    let config = config_from_tensor(find(CONFIG_KEY)?)?;
    let mut model = Model::new(config, 0)?;
    let params: Vec<(String, Tensor)> = entries
        .iter()
        .filter(|(n, _)| n != CONFIG_KEY && !n.starts_with("optim."))
        .cloned()
        .collect();
    model.params.load_values(&params).map_err(|e| Error::format(path, e.to_string()))?;
    let mut opt = OptimizerState::new(&model);
    let step = find(STEP_KEY)?.data()[0];
    if step < 0.0 || step.fract() != 0.0 {
        return Err(Error::format(path, "bad optimizer step"));
    }
    opt.step = step as u64;
    for (k, (name, _)) in model.params.iter().enumerate() {
        opt.m[k] = find(&format!("optim.m.{name}"))?.data().to_vec();
        opt.v[k] = find(&format!("optim.v.{name}"))?.data().to_vec();
        if opt.m[k].len() != opt.v[k].len() || opt.m[k].len() != model.params.get(model.params.id(name).unwrap()).numel() {
            return Err(Error::format(path, format!("optimizer moments for {name} have the wrong size")));
        }
    }
    Ok((model, opt))
}

pub fn load_checkpoint(path: &Path) -> Result<(Model, OptimizerState)> {
    restore(&checkpoint::load(path)?, path)
}
