//! Minimum-cost matching of instances to queries, and the one-shot rule:
//! an instance keeps the query it was matched to at its first frame.
//!
//! cargo run --example hungarian

use propvis::assign::{hungarian, Assignment};

fn main() -> propvis::Result<()> {
    let cost = vec![
        vec![4.0, 1.0, 3.0, 2.0],
        vec![2.0, 0.0, 5.0, 3.0],
        vec![3.0, 2.0, 2.0, 4.0],
    ];
    let pairs = hungarian(&cost)?;
    let total: f64 = pairs.iter().map(|&(r, c)| cost[r][c]).sum();
    println!("pairs {pairs:?}, total cost {total}");

    let mut a = Assignment::new();
    for &(inst, q) in &pairs {
        a.insert(inst, q, 0)?;
    }
    // a later frame may add instances but never move existing ones
    let before = a.clone();
    let free = (0..4).find(|&q| a.instance_of(q).is_none()).expect("four queries, three instances");
    a.insert(3, free, 2)?;
    println!("instance 3 -> query {:?} born at frame {:?}", a.query_of(3), a.birth_frame(3));
    println!("extends the earlier assignment: {}", a.extends(&before));
    println!("re-matching instance 0: {:?}", a.insert(0, free, 2).map_err(|e| e.to_string()));
    Ok(())
}
