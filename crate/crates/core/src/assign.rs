//! Minimum-cost bipartite matching and the per-clip instance→query
//! assignment, fixed once at each instance's first appearance.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::loss::{dice_loss, mask_ce_loss, LossWeights};
use crate::model::FramePrediction;
use crate::synth::GtFrame;

/// Potentials-based Hungarian solve for `rows ≤ cols`. Returns the column
/// of every row.
fn solve_wide(cost: &[Vec<f64>], rows: usize, cols: usize) -> Vec<usize> {
    let inf = f64::INFINITY;
    let mut u = vec![0.0; rows + 1];
    let mut v = vec![0.0; cols + 1];
    let mut p = vec![0usize; cols + 1];
    let mut way = vec![0usize; cols + 1];
    for i in 1..=rows {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; cols + 1];
        let mut used = vec![false; cols + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=cols {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=cols {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![0; rows];
    for j in 1..=cols {
        if p[j] != 0 {
            out[p[j] - 1] = j - 1;
        }
    }
    out
}

/// Some optimal pairing (row-sorted) and its total cost.
fn solve_any(cost: &[Vec<f64>], rows: usize, cols: usize) -> (Vec<(usize, usize)>, f64) {
    if rows == 0 || cols == 0 {
        return (Vec::new(), 0.0);
    }
    let mut pairs: Vec<(usize, usize)> = if rows <= cols {
        solve_wide(cost, rows, cols).into_iter().enumerate().collect()
    } else {
        let t: Vec<Vec<f64>> = (0..cols).map(|c| (0..rows).map(|r| cost[r][c]).collect()).collect();
        solve_wide(&t, cols, rows)
            .into_iter()
            .enumerate()
            .map(|(c, r)| (r, c))
            .collect()
    };
    pairs.sort_unstable();
    let total = pairs.iter().map(|&(r, c)| cost[r][c]).sum();
    (pairs, total)
}

/// Optimal cost of pairing `need` rows from `rows` with `need` columns
/// from `cols`, or `None` if fewer than `need` of either remain.
fn restricted_optimum(cost: &[Vec<f64>], rows: &[usize], cols: &[usize], need: usize) -> Option<f64> {
    if rows.len() < need || cols.len() < need {
        return None;
    }
    if rows.len().min(cols.len()) != need {
        // more candidates on both sides than slots cannot happen for a
        // min(R, C) pairing
        return None;
    }
    let sub: Vec<Vec<f64>> = rows.iter().map(|&r| cols.iter().map(|&c| cost[r][c]).collect()).collect();
    Some(solve_any(&sub, rows.len(), cols.len()).1)
}

/// Minimum-cost pairing of `min(R, C)` rows and columns of `cost`,
/// returned as `(row, column)` pairs sorted by row.
///
/// Among optimal pairings (costs equal within `1e-9·(1 + |optimum|)`) the
/// lexicographically smallest row-sorted sequence is returned.
pub fn hungarian(cost: &[Vec<f64>]) -> Result<Vec<(usize, usize)>> {
    let rows = cost.len();
    let cols = cost.first().map_or(0, Vec::len);
    if cost.iter().any(|r| r.len() != cols) {
        return Err(Error::contract("cost matrix rows differ in length"));
    }
    if let Some((r, c)) = (0..rows)
        .flat_map(|r| (0..cols).map(move |c| (r, c)))
        .find(|&(r, c)| !cost[r][c].is_finite())
    {
        return Err(Error::contract(format!("cost[{r}][{c}] = {} is not finite", cost[r][c])));
    }
    let (_, optimum) = solve_any(cost, rows, cols);
    let k = rows.min(cols);
    let tol = 1e-9 * (1.0 + optimum.abs());

    let mut fixed: Vec<(usize, usize)> = Vec::with_capacity(k);
    let mut fixed_cost = 0.0;
    let mut col_used = vec![false; cols];
    let mut next_row = 0;
    while fixed.len() < k {
        let need = k - fixed.len() - 1;
        let mut chosen = None;
        'search: for r in next_row..rows {
            for c in 0..cols {
                if col_used[c] {
                    continue;
                }
                let rest_rows: Vec<usize> = (r + 1..rows).collect();
                let rest_cols: Vec<usize> = (0..cols).filter(|&j| j != c && !col_used[j]).collect();
                let rest = if need == 0 {
                    Some(0.0)
                } else {
                    restricted_optimum(cost, &rest_rows, &rest_cols, need)
                };
                if let Some(rest) = rest {
                    if fixed_cost + cost[r][c] + rest <= optimum + tol {
                        chosen = Some((r, c));
                        break 'search;
                    }
                }
            }
        }
        let (r, c) = chosen.ok_or_else(|| Error::contract("no optimal completion found"))?;
        fixed.push((r, c));
        fixed_cost += cost[r][c];
        col_used[c] = true;
        next_row = r + 1;
    }
    Ok(fixed)
}

/// Instance → query pairs of one clip, with each instance's birth frame.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Assignment {
    queries: BTreeMap<usize, usize>,
    births: BTreeMap<usize, usize>,
}

impl Assignment {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn query_of(&self, instance: usize) -> Option<usize> {
        self.queries.get(&instance).copied()
    }

    pub fn birth_frame(&self, instance: usize) -> Option<usize> {
        self.births.get(&instance).copied()
    }

    /// Instance id assigned to `query`, if any.
    pub fn instance_of(&self, query: usize) -> Option<usize> {
        self.queries.iter().find(|&(_, &q)| q == query).map(|(&i, _)| i)
    }

    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }

    /// `(instance, query)` pairs in instance order.
    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.queries.iter().map(|(&i, &q)| (i, q))
    }

    /// Records a new pair. Fails if the instance is already assigned or
    /// the query is taken.
    pub fn insert(&mut self, instance: usize, query: usize, frame: usize) -> Result<()> {
        if let Some(q) = self.query_of(instance) {
            return Err(Error::contract(format!(
                "instance {instance} is already assigned to query {q}"
            )));
        }
        if let Some(i) = self.instance_of(query) {
            return Err(Error::contract(format!("query {query} is already assigned to instance {i}")));
        }
        self.queries.insert(instance, query);
        self.births.insert(instance, frame);
        Ok(())
    }

    pub fn is_injective(&self) -> bool {
        let mut qs: Vec<usize> = self.queries.values().copied().collect();
        qs.sort_unstable();
        qs.windows(2).all(|w| w[0] != w[1])
    }

    /// Whether every pair (and birth frame) of `earlier` is present here
    /// unchanged.
    pub fn extends(&self, earlier: &Assignment) -> bool {
        earlier
            .queries
            .iter()
            .all(|(i, q)| self.queries.get(i) == Some(q) && self.births.get(i) == earlier.births.get(i))
    }
}

/// Matching cost of query `q` against a ground-truth instance.
pub fn match_cost(pred: &FramePrediction, q: usize, class_id: usize, mask: &crate::mask::BinaryMask, w: &LossWeights) -> Result<f64> {
    let p_class = pred.class_probs(q)[class_id];
    let logits = pred.mask_logits.row(q);
    Ok(w.cls * (1.0 - p_class) + w.ce * mask_ce_loss(logits, mask)? + w.dice * dice_loss(logits, mask)?)
}

/// Matches instances appearing for the first time at `frame` to free
/// queries. Existing pairs are never revised.
pub fn match_new_instances(
    assignment: &Assignment,
    pred: &FramePrediction,
    gt: &GtFrame,
    frame: usize,
    weights: &LossWeights,
) -> Result<Assignment> {
    let new: Vec<_> = gt
        .instances
        .iter()
        .filter(|inst| assignment.query_of(inst.id).is_none())
        .collect();
    if new.is_empty() {
        return Ok(assignment.clone());
    }
    let free: Vec<usize> = (0..pred.num_queries())
        .filter(|&q| assignment.instance_of(q).is_none())
        .collect();
    if new.len() > free.len() {
        return Err(Error::contract(format!(
            "{} new instances at frame {frame} but only {} free queries ({} over)",
            new.len(),
            free.len(),
            new.len() - free.len()
        )));
    }
    if new.iter().any(|i| i.class_id >= pred.num_classes()) {
        return Err(Error::contract("ground-truth class outside the model's classes"));
    }
    let cost = new
        .iter()
        .map(|inst| {
            free.iter()
                .map(|&q| match_cost(pred, q, inst.class_id, &inst.mask, weights))
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out = assignment.clone();
    for (r, c) in hungarian(&cost)? {
        out.insert(new[r].id, free[c], frame)?;
    }
    Ok(out)
}
