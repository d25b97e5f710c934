//! Trains the ablation variants on crossing clips and reports track
//! consistency on a held-out benchmark.
//!
//! cargo run --release --example ablation -- [steps] [seeds...]

use std::time::Instant;

use propvis::cli::{generate_dataset, predict_dataset};
use propvis::config::RunConfig;
use propvis::eval::evaluate;
use propvis::model::Model;
use propvis::train::{train, OptimizerState};

const VARIANTS: [(&str, &[&str]); 4] = [
    ("baseline", &["no-aligner", "no-trajectory"]),
    ("+aligner", &["no-trajectory"]),
    ("+aligner+trajectory", &[]),
    ("dynamic-local-pe", &["dynamic-local-pe"]),
];

fn main() -> propvis::Result<()> {
    let mut args = std::env::args().skip(1);
    let steps: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(2000);
    let mut seeds: Vec<u64> = args.filter_map(|s| s.parse().ok()).collect();
    if seeds.is_empty() {
        seeds = vec![1, 2, 3];
    }

    let bench_cfg = RunConfig {
        clips: 20,
        seed: 7,
        ..RunConfig::default()
    };
    let bench = generate_dataset(&bench_cfg)?;
    let pool = generate_dataset(&RunConfig {
        clips: 200,
        seed: 1000,
        ..RunConfig::default()
    })?;

    for &seed in &seeds {
        for (name, flags) in VARIANTS {
            let mut cfg = RunConfig {
                seed,
                steps,
                ..RunConfig::default()
            };
            for f in flags {
                cfg.ablate(f)?;
            }
            let start = Instant::now();
            let mut model = Model::new(cfg.model.clone(), seed)?;
            let mut opt = OptimizerState::new(&model);
            let mut tail = 0.0;
            train(&mut model, &pool, &mut opt, &cfg.train_config(), steps, |step, rec| {
                if step + 100 > steps {
                    tail += rec.loss / 100.0;
                }
                Ok(())
            })?;
            let preds = predict_dataset(&model, &bench)?;
            let pairs: Vec<_> = preds.iter().zip(&bench).map(|(p, c)| (p.as_slice(), &c.gt)).collect();
            let r = evaluate(&pairs)?;
            println!(
                "seed={seed} {name:<20} consistency={:.4} iou={:.3} switches={} unmatched={} ap50={:.3} loss={:.3} ({:.0}s)",
                r.mean_consistency,
                r.mean_iou,
                r.total_switches,
                r.unmatched,
                r.ap50,
                tail,
                start.elapsed().as_secs_f64()
            );
        }
    }
    Ok(())
}
