use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use propvis::cli::{self, clip_dir_name, track_color};
use propvis::mask::BinaryMask;
use propvis::eval::{predictions_from_json, predictions_to_json, PredictedFrame, TrackEvalReport};
use propvis::model::{GraphState, Model};
use propvis::numcore::Graph;
use propvis::synth::{load_dataset, load_gt};
use propvis::train::load_checkpoint;
use tempfile::TempDir;

fn run(args: &[&str]) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let argv = std::iter::once("propvis").chain(args.iter().copied());
    let code = cli::run(argv, &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path
}

/// Every file under `dir` as (relative path, bytes), sorted.
fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push((path.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

/// A small dataset plus a config that trains for `steps`.
fn small_setup(steps: u64) -> (TempDir, PathBuf, PathBuf) {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path(), "run.cfg", &format!("# small run\nclips = 3\nsteps = {steps}\nseed = 4\n"));
    let data = tmp.path().join("data");
    let (code, _, err) = run(&["gen", "--config", p(&cfg), "--out", p(&data)]);
    assert_eq!(code, 0, "{err}");
    (tmp, cfg, data)
}

#[test]
fn gen_is_byte_identical_and_counts_clips() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path(), "gen.cfg", "clips = 5\nscenarios = easy, crossing, exit_reentry\n");
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for dir in [&a, &b] {
        let (code, out, err) = run(&["gen", "--config", p(&cfg), "--seed", "3", "--out", p(dir)]);
        assert_eq!(code, 0, "{err}");
        assert!(out.contains("wrote 5 clips"));
    }
    assert!(tree(&a) == tree(&b));
    let clips = load_dataset(&a).unwrap();
    assert_eq!(clips.len(), 5);
    assert!(clips.iter().all(|c| c.frames.len() == 4));

    let c = tmp.path().join("c");
    run(&["gen", "--config", p(&cfg), "--seed", "4", "--out", p(&c)]);
    assert!(tree(&a) != tree(&c));
}

#[test]
fn unknown_scenario_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path(), "bad.cfg", "scenarios = easy, spiral\n");
    let out = tmp.path().join("never");
    let (code, _, err) = run(&["gen", "--config", p(&cfg), "--out", p(&out)]);
    assert_eq!(code, 1);
    assert!(err.contains("bad.cfg:1:"), "{err}");
    assert!(!out.exists());
}

#[test]
fn config_errors_name_the_line_and_stop_early() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path(), "typo.cfg", "# comment\nsteps = 3\nlearning_rate = 0.1\n");
    let out = tmp.path().join("never");
    let (code, _, err) = run(&["gen", "--config", p(&cfg), "--out", p(&out)]);
    assert_eq!(code, 1);
    assert!(err.contains("typo.cfg:3:") && err.contains("learning_rate"), "{err}");
    assert!(!out.exists());

    let (code, _, err) = run(&["gen", "--ablate", "no-encoder", "--out", p(&out)]);
    assert_eq!(code, 1);
    assert!(err.contains("no-encoder"));
    assert_eq!(run(&["fly"]).0, 1);
}

#[test]
fn training_is_deterministic_and_resumable() {
    let (tmp, cfg, data) = small_setup(4);
    let ck = |name: &str| tmp.path().join(name);
    for name in ["a.ckpt", "b.ckpt"] {
        let (code, out, err) = run(&["train", "--config", p(&cfg), "--data", p(&data), "--out", p(&ck(name))]);
        assert_eq!(code, 0, "{err}");
        // timestamps stay on "#" lines
        assert_eq!(out.lines().filter(|l| !l.starts_with('#')).count(), 4);
    }
    assert!(fs::read(ck("a.ckpt")).unwrap() == fs::read(ck("b.ckpt")).unwrap());

    let half = config(tmp.path(), "half.cfg", &fs::read_to_string(&cfg).unwrap().replace("steps = 4", "steps = 2"));
    run(&["train", "--config", p(&half), "--data", p(&data), "--out", p(&ck("h.ckpt"))]);
    let (code, _, err) = run(&[
        "train",
        "--config",
        p(&cfg),
        "--data",
        p(&data),
        "--out",
        p(&ck("r.ckpt")),
        "--resume",
        p(&ck("h.ckpt")),
    ]);
    assert_eq!(code, 0, "{err}");
    // `steps` is the total, so resuming a 2-step run under the 4-step
    // config trains the remaining two
    assert!(fs::read(ck("a.ckpt")).unwrap() == fs::read(ck("r.ckpt")).unwrap());

    let (_, opt) = load_checkpoint(&ck("r.ckpt")).unwrap();
    assert_eq!(opt.step, 4);

    let other = tmp.path().join("s.ckpt");
    run(&["train", "--config", p(&cfg), "--seed", "5", "--data", p(&data), "--out", p(&other)]);
    assert!(fs::read(ck("a.ckpt")).unwrap() != fs::read(other).unwrap());
}

#[test]
fn zero_steps_saves_the_initialization() {
    let (tmp, cfg, data) = small_setup(0);
    let ckpt = tmp.path().join("z.ckpt");
    assert_eq!(run(&["train", "--config", p(&cfg), "--data", p(&data), "--out", p(&ckpt)]).0, 0);
    let (model, opt) = load_checkpoint(&ckpt).unwrap();
    let init = Model::new(cli::load_config(&common(&cfg)).unwrap().model, 4).unwrap();
    assert_eq!(opt.step, 0);
    assert_eq!(model.config, init.config);
    for ((na, a), (nb, b)) in model.params.iter().zip(init.params.iter()) {
        assert_eq!(na, nb);
        assert_eq!(a.data(), b.data());
    }
}

fn common(cfg: &Path) -> cli::Common {
    cli::Common {
        config: Some(cfg.to_path_buf()),
        seed: None,
        ablate: vec![],
    }
}

#[test]
fn no_aligner_feeds_global_queries_to_the_decoder() {
    let (tmp, cfg, data) = small_setup(1);
    let ckpt = tmp.path().join("na.ckpt");
    let args = ["train", "--config", p(&cfg), "--ablate", "no-aligner", "--data", p(&data), "--out", p(&ckpt)];
    assert_eq!(run(&args).0, 0);
    let (model, _) = load_checkpoint(&ckpt).unwrap();
    assert!(!model.config.use_aligner);
    assert_eq!(model.num_aligner_params(), 0);

    let clip = &load_dataset(&data).unwrap()[0];
    let mut g = Graph::new();
    let bound = model.params.bind(&mut g);
    let state = model.initial_graph_state(&mut g, &bound).unwrap();
    let q_global = state.q_global;
    let (out, next): (_, GraphState) = model.forward_frame(&mut g, &bound, state, &clip.frames[0]).unwrap();
    assert_eq!(g.value(out.aligned), g.value(q_global));
    let (out2, _) = model.forward_frame(&mut g, &bound, next, &clip.frames[1]).unwrap();
    assert_eq!(g.value(out2.aligned), g.value(out.queries));
}

fn write_docs(dir: &Path, preds: &[Vec<PredictedFrame>]) {
    fs::create_dir_all(dir).unwrap();
    for (i, p) in preds.iter().enumerate() {
        fs::write(dir.join(format!("{}.json", clip_dir_name(i))), predictions_to_json(p).unwrap()).unwrap();
    }
}

#[test]
fn eval_reports_are_stable_and_oracle_scores_one() {
    let (tmp, cfg, data) = small_setup(2);
    let ckpt = tmp.path().join("m.ckpt");
    run(&["train", "--config", p(&cfg), "--data", p(&data), "--out", p(&ckpt)]);
    let report = tmp.path().join("report.json");
    let (code, _, err) = run(&["eval", "--checkpoint", p(&ckpt), "--data", p(&data), "--out", p(&report)]);
    assert_eq!(code, 0, "{err}");
    let (_, stdout, _) = run(&["eval", "--checkpoint", p(&ckpt), "--data", p(&data)]);
    let text = fs::read_to_string(&report).unwrap();
    assert_eq!(stdout.trim_end(), text.trim_end());
    let value: serde_json::Value = serde_json::from_str(&text).unwrap();
    let keys: Vec<&str> = value.as_object().unwrap().keys().map(String::as_str).collect();
    for k in ["ap50", "instances", "mean_consistency", "mean_iou", "total_switches", "unmatched"] {
        assert!(keys.contains(&k), "missing {k}");
    }

    // predictions that copy the ground truth
    let clips = load_dataset(&data).unwrap();
    let oracle: Vec<Vec<PredictedFrame>> = clips
        .iter()
        .map(|c| {
            let ids = c.gt.instance_ids();
            c.gt.frames
                .iter()
                .map(|f| PredictedFrame {
                    masks: ids
                        .iter()
                        .map(|&id| f.get(id).map_or(BinaryMask::empty(8, 8), |i| i.mask.clone()))
                        .collect(),
                    class_probs: ids
                        .iter()
                        .map(|&id| (0..3).map(|k| if Some(k) == c.gt.class_of(id) { 0.9 } else { 0.1 }).collect())
                        .collect(),
                    track_ids: (0..ids.len() as i64).collect(),
                })
                .collect()
        })
        .collect();
    let docs = tmp.path().join("oracle");
    write_docs(&docs, &oracle);
    let (code, stdout, err) = run(&["eval", "--predictions", p(&docs), "--data", p(&data)]);
    assert_eq!(code, 0, "{err}");
    let rep: TrackEvalReport = serde_json::from_str(&stdout).unwrap();
    assert_eq!(rep.ap50, 1.0);
    assert_eq!(rep.mean_consistency, 1.0);
    assert_eq!(rep.unmatched, 0);

    assert_eq!(run(&["eval", "--data", p(&data)]).0, 1);
    fs::remove_file(docs.join("clip_001.json")).unwrap();
    assert_eq!(run(&["eval", "--predictions", p(&docs), "--data", p(&data)]).0, 2);
}

#[test]
fn infer_writes_overlays_and_round_trippable_predictions() {
    let (tmp, cfg, data) = small_setup(2);
    let ckpt = tmp.path().join("m.ckpt");
    run(&["train", "--config", p(&cfg), "--data", p(&data), "--out", p(&ckpt)]);
    let clip_dir = data.join(clip_dir_name(0));
    let out = tmp.path().join("infer");
    let (code, _, err) = run(&["infer", "--checkpoint", p(&ckpt), "--data", p(&clip_dir), "--out", p(&out)]);
    assert_eq!(code, 0, "{err}");
    let gt = load_gt(&clip_dir).unwrap();
    let overlays = fs::read_dir(&out)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().ends_with(".ppm"))
        .count();
    assert_eq!(overlays, gt.frames.len());

    let preds = predictions_from_json(&fs::read_to_string(out.join("predictions.json")).unwrap()).unwrap();
    assert_eq!(preds.len(), gt.frames.len());
    let (model, _) = load_checkpoint(&ckpt).unwrap();
    let direct = cli::predict_dataset(&model, &load_dataset(&data).unwrap()[..1]).unwrap();
    for (a, b) in preds.iter().zip(&direct[0]) {
        assert_eq!(a.masks, b.masks);
        assert_eq!(a.track_ids, b.track_ids);
        for (x, y) in a.class_probs.iter().flatten().zip(b.class_probs.iter().flatten()) {
            assert_eq!(x.to_bits(), y.to_bits(), "{x} vs {y}");
        }
    }
    propvis::eval::track_consistency(&preds, &gt).unwrap();

    let again = tmp.path().join("infer2");
    run(&["infer", "--checkpoint", p(&ckpt), "--data", p(&clip_dir), "--out", p(&again)]);
    assert!(tree(&out) == tree(&again));
}

#[test]
fn track_colors_are_stable_and_distinct() {
    for id in 0..50 {
        assert_eq!(track_color(id), track_color(id));
    }
    for id in 0..7 {
        assert_ne!(track_color(id), track_color(id + 1));
    }
}

#[test]
fn gradcheck_passes_and_detects_corruption() {
    let (code, out, err) = run(&["gradcheck"]);
    assert_eq!(code, 0, "{out}{err}");
    assert!(out.lines().next().unwrap().starts_with("module"));
    for m in ["aligner", "posembed", "segmenter.decoder", "segmenter.encoder"] {
        assert!(out.lines().any(|l| l.starts_with(m)), "{m} missing from\n{out}");
    }
    assert!(out.lines().last().unwrap().starts_with("gradcheck PASS"));

    let (code, out, _) = run(&["gradcheck", "--corrupt-grad"]);
    assert_eq!(code, 2);
    assert!(out.lines().last().unwrap().starts_with("gradcheck FAIL"));
}

#[test]
fn binary_reports_exit_status() {
    let bin = env!("CARGO_BIN_EXE_propvis");
    let help = Command::new(bin).arg("--help").output().unwrap();
    assert!(help.status.success());
    let text = String::from_utf8(help.stdout).unwrap();
    for sub in ["gen", "train", "eval", "infer", "gradcheck"] {
        assert!(text.contains(sub));
    }
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path(), "x.cfg", "widht = 32\n");
    let bad = Command::new(bin)
        .args(["gen", "--config", p(&cfg), "--out", p(&tmp.path().join("o"))])
        .output()
        .unwrap();
    assert_eq!(bad.status.code(), Some(1));
}
