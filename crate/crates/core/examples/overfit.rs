//! Fits the model to a single clip and prints the loss curve.
//!
//! cargo run --release --example overfit -- [seed] [steps]

use std::time::Instant;

use propvis::loss::SupervisionMask;
use propvis::model::{Model, ModelConfig};
use propvis::synth::scenario;
use propvis::train::{train_step, OptimizerState, TrainConfig};

fn main() -> propvis::Result<()> {
    let mut args = std::env::args().skip(1);
    let seed: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(1);
    let steps: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(200);

    let clip = scenario("crossing", seed)?;
    let mut model = Model::new(ModelConfig::default(), seed)?;
    let mut opt = OptimizerState::new(&model);
    let config = TrainConfig {
        seed,
        ..TrainConfig::default()
    };
    let sup = SupervisionMask::all(clip.frames.len())?;
    let start = Instant::now();
    let mut first = None;
    for step in 0..steps {
        let rec = train_step(&mut model, &clip, &mut opt, &config, &sup)?;
        let initial = *first.get_or_insert(rec.loss);
        if step % 20 == 0 || step + 1 == steps {
            println!("{}  ratio={:.3}", rec.log_line(step as u64), rec.loss / initial);
        }
    }
    println!("{:.1} ms/step", start.elapsed().as_secs_f64() * 1e3 / steps as f64);
    Ok(())
}
