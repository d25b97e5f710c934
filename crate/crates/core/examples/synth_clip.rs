//! Renders one clip of each scenario, prints the instance masks of every
//! frame as text and writes the clips to a directory.
//!
//! cargo run --example synth_clip -- [seed] [out-dir]

use std::path::PathBuf;

use propvis::synth::{save_clip, scenario};

fn main() -> propvis::Result<()> {
    let mut args = std::env::args().skip(1);
    let seed: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(0);
    let out = args.next().map(PathBuf::from);

    for name in ["easy", "crossing", "exit_reentry"] {
        let clip = scenario(name, seed)?;
        println!("{name}: instances {:?}", clip.gt.instance_ids());
        let (h, w) = (clip.gt.mask_height, clip.gt.mask_width);
        for r in 0..h {
            let mut line = String::new();
            for f in &clip.gt.frames {
                for c in 0..w {
                    let owner = f.instances.iter().find(|i| i.mask.get(r, c));
                    line.push(owner.map_or('.', |i| char::from(b'0' + i.id as u8)));
                }
                line.push_str("   ");
            }
            println!("  {line}");
        }
        if let Some(dir) = &out {
            save_clip(&clip, &dir.join(name))?;
        }
    }
    Ok(())
}
