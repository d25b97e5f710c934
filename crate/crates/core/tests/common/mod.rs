//! Reference implementations shared by the integration tests.
#![allow(dead_code)]

use propvis::mask::BinaryMask;
use propvis::posembed::BoxCxCyWH;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Every injective pairing of the smaller side into the larger, as
/// row-sorted `(row, col)` lists.
pub fn pairings(rows: usize, cols: usize) -> Vec<Vec<(usize, usize)>> {
    fn extend(k: usize, small: usize, large: usize, used: &mut Vec<bool>, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if k == small {
            out.push(cur.clone());
            return;
        }
        for j in 0..large {
            if !used[j] {
                used[j] = true;
                cur.push(j);
                extend(k + 1, small, large, used, cur, out);
                cur.pop();
                used[j] = false;
            }
        }
    }
    let (small, large) = (rows.min(cols), rows.max(cols));
    let mut maps = Vec::new();
    extend(0, small, large, &mut vec![false; large], &mut Vec::new(), &mut maps);
    maps.into_iter()
        .map(|m| {
            let mut pairs: Vec<(usize, usize)> = m
                .iter()
                .enumerate()
                .map(|(i, &j)| if rows <= cols { (i, j) } else { (j, i) })
                .collect();
            pairs.sort();
            pairs
        })
        .collect()
}

/// Minimum total and the lexicographically smallest pairing attaining it.
/// Costs are compared exactly, so callers use values whose sums are exact.
pub fn brute_force(cost: &[Vec<f64>]) -> (f64, Vec<(usize, usize)>) {
    let (rows, cols) = (cost.len(), cost[0].len());
    let mut best: Option<(f64, Vec<(usize, usize)>)> = None;
    for p in pairings(rows, cols) {
        let total: f64 = p.iter().map(|&(r, c)| cost[r][c]).sum();
        best = match best {
            Some((b, bp)) if b < total || (b == total && bp <= p) => Some((b, bp)),
            _ => Some((total, p)),
        };
    }
    best.unwrap()
}

/// Multiples of 1/64 keep every partial sum exact.
pub fn dyadic_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, levels: u32) -> Vec<Vec<f64>> {
    (0..rows)
        .map(|_| (0..cols).map(|_| rng.gen_range(0..levels) as f64 / 64.0).collect())
        .collect()
}

/// Bounding box by visiting every pixel.
pub fn scan(mask: &BinaryMask) -> BoxCxCyWH {
    let (h, w) = (mask.height(), mask.width());
    let on: Vec<(usize, usize)> = (0..h)
        .flat_map(|r| (0..w).map(move |c| (r, c)))
        .filter(|&(r, c)| mask.get(r, c))
        .collect();
    if on.is_empty() {
        return BoxCxCyWH {
            cx: 0.5,
            cy: 0.5,
            w: 0.0,
            h: 0.0,
        };
    }
    let rmin = on.iter().map(|p| p.0).min().unwrap() as f64;
    let rmax = on.iter().map(|p| p.0).max().unwrap() as f64;
    let cmin = on.iter().map(|p| p.1).min().unwrap() as f64;
    let cmax = on.iter().map(|p| p.1).max().unwrap() as f64;
    let (wf, hf) = (w as f64, h as f64);
    BoxCxCyWH {
        cx: (cmin + cmax + 1.0) / (2.0 * wf),
        cy: (rmin + rmax + 1.0) / (2.0 * hf),
        w: (cmax - cmin + 1.0) / wf,
        h: (rmax - rmin + 1.0) / hf,
    }
}

/// Exact law of the repaired schedule for length `t`: a Bernoulli draw on
/// the first `t-1` frames, then one uniformly chosen frame forced on when
/// fewer than two frames are kept.
pub fn repaired_law(t: usize, p: f64) -> Vec<(Vec<bool>, f64)> {
    let k = t - 1;
    let mut law: std::collections::BTreeMap<Vec<bool>, f64> = Default::default();
    for bits in 0u32..(1 << k) {
        let drawn: Vec<bool> = (0..k).map(|i| bits >> i & 1 == 1).collect();
        let ones = drawn.iter().filter(|&&b| b).count();
        let pr = p.powi(ones as i32) * (1.0 - p).powi((k - ones) as i32);
        if ones == 0 {
            for j in 0..k {
                let mut f = drawn.clone();
                f[j] = true;
                *law.entry(f).or_default() += pr / k as f64;
            }
        } else {
            *law.entry(drawn).or_default() += pr;
        }
    }
    law.into_iter().collect()
}
