//! Finite-difference check of the whole pipeline on a two-frame clip,
//! listing the tensors with the largest disagreement.
//!
//! cargo run --example gradcheck -- [seed] [coords-per-tensor]

use propvis::model::{Model, ModelConfig};
use propvis::numcore::GradCheckOptions;
use propvis::synth::{ClipConfig, Scenario};
use propvis::train::{clip_grad_check, TrainConfig};

fn main() -> propvis::Result<()> {
    let mut args = std::env::args().skip(1);
    let seed: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(1);
    let coords: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(8);

    let model = Model::new(ModelConfig::default(), seed)?;
    let clip = Scenario::Crossing.clip(
        &ClipConfig {
            frames: 2,
            ..ClipConfig::default()
        },
        seed,
    )?;
    let opts = GradCheckOptions {
        max_coords: Some(coords),
        ..GradCheckOptions::default()
    };
    let report = clip_grad_check(&model, &clip, &TrainConfig::default(), &opts)?;

    let mut worst: Vec<_> = report.params.iter().collect();
    worst.sort_by(|a, b| b.max_rel_error.total_cmp(&a.max_rel_error));
    println!("loss {:.6}, {} tensors", report.loss, report.params.len());
    for p in worst.iter().take(10) {
        let (j, a, n) = p.worst.unwrap_or_default();
        println!(
            "{:<44} rel {:.3e}  at [{j}] analytic {a:+.6e} numeric {n:+.6e}",
            p.name, p.max_rel_error
        );
    }
    println!("{}", if report.passed() { "PASS" } else { "FAIL" });
    Ok(())
}
