//! Trains briefly on crossing clips, then tracks a held-out clip online
//! and prints the track ids and the mask area of every tracked query.
//!
//! cargo run --release --example track_video -- [steps] [seed]

use propvis::config::RunConfig;
use propvis::cli::generate_dataset;
use propvis::model::Model;
use propvis::synth::scenario;
use propvis::tracker::run_video_with;
use propvis::train::{train, OptimizerState};

fn main() -> propvis::Result<()> {
    let mut args = std::env::args().skip(1);
    let steps: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(300);
    let seed: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(1);

    let cfg = RunConfig {
        clips: 50,
        seed,
        ..RunConfig::default()
    };
    let pool = generate_dataset(&cfg)?;
    let mut model = Model::new(cfg.model.clone(), seed)?;
    let mut opt = OptimizerState::new(&model);
    train(&mut model, &pool, &mut opt, &cfg.train_config(), steps, |step, rec| {
        if (step + 1) % 100 == 0 {
            println!("{}", rec.log_line(step));
        }
        Ok(())
    })?;

    let clip = scenario("crossing", seed + 500)?;
    run_video_with(&clip.frames, &model, |t, pred| {
        let tracked: Vec<String> = pred
            .track_ids
            .iter()
            .enumerate()
            .filter(|(_, &id)| id >= 0)
            .map(|(q, id)| format!("q{q}=#{id}({})", pred.masks[q].area()))
            .collect();
        println!("frame {t}: gt {} instances, tracks [{}]", clip.gt.frames[t].instances.len(), tracked.join(" "));
        Ok(())
    })?;
    Ok(())
}
