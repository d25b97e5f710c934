//! Scores an untrained model and a ground-truth copy on the same clips.
//!
//! cargo run --release --example evaluate -- [clips]

use propvis::cli::{generate_dataset, predict_dataset};
use propvis::config::RunConfig;
use propvis::eval::{evaluate, PredictedFrame};
use propvis::mask::BinaryMask;
use propvis::model::Model;

fn main() -> propvis::Result<()> {
    let clips: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(5);
    let cfg = RunConfig {
        clips,
        ..RunConfig::default()
    };
    let data = generate_dataset(&cfg)?;

    let model = Model::new(cfg.model.clone(), 0)?;
    let preds = predict_dataset(&model, &data)?;
    let pairs: Vec<_> = preds.iter().zip(&data).map(|(p, c)| (p.as_slice(), &c.gt)).collect();
    let r = evaluate(&pairs)?;
    println!(
        "untrained: consistency {:.3}, iou {:.3}, switches {}, unmatched {}, ap50 {:.3}",
        r.mean_consistency, r.mean_iou, r.total_switches, r.unmatched, r.ap50
    );

    let oracle: Vec<Vec<PredictedFrame>> = data
        .iter()
        .map(|c| {
            let ids = c.gt.instance_ids();
            let empty = BinaryMask::empty(c.gt.mask_height, c.gt.mask_width);
            c.gt.frames
                .iter()
                .map(|f| PredictedFrame {
                    masks: ids.iter().map(|&id| f.get(id).map_or(empty.clone(), |i| i.mask.clone())).collect(),
                    class_probs: ids
                        .iter()
                        .map(|&id| (0..cfg.model.num_classes).map(|k| f64::from(Some(k) == c.gt.class_of(id))).collect())
                        .collect(),
                    track_ids: (0..ids.len() as i64).collect(),
                })
                .collect()
        })
        .collect();
    let pairs: Vec<_> = oracle.iter().zip(&data).map(|(p, c)| (p.as_slice(), &c.gt)).collect();
    println!("{}", evaluate(&pairs)?.to_json()?);
    Ok(())
}
