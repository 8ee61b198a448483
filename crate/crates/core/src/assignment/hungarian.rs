//! Rectangular linear assignment by shortest augmenting paths
//! (Jonker–Volgenant style, with row and column potentials).

use crate::error::{invalid, Result};

use super::{Assignment, CostMatrix};

/// Minimum-cost one-to-one matching of size `min(rows, cols)`.
///
/// Pairs are returned sorted by row. The total cost is summed from the
/// original entries in row order. Among equal reduced costs the search
/// prefers the lowest column index, then a free column, which makes the
/// result reproducible for tied inputs.
pub fn hungarian(cost: &CostMatrix) -> Result<Assignment> {
    if cost.rows() == 0 || cost.cols() == 0 {
        return Err(invalid("empty cost matrix"));
    }
    if let Some(bad) = cost.data().iter().find(|v| !v.is_finite()) {
        return Err(invalid(format!("non-finite cost entry {bad}")));
    }

    let transposed = cost.rows() > cost.cols();
    let work = if transposed {
        cost.transposed()
    } else {
        cost.clone()
    };
    let col_for_row = solve_wide(&work);

    let mut pairs: Vec<(usize, usize)> = col_for_row
        .into_iter()
        .enumerate()
        .map(|(r, c)| if transposed { (c, r) } else { (r, c) })
        .collect();
    pairs.sort_unstable();
    let total_cost = pairs.iter().map(|&(r, c)| cost.get(r, c)).sum();
    Ok(Assignment {
        pairs,
        total_cost,
        excess_gts: 0,
    })
}

/// Requires `rows <= cols`; returns the column assigned to each row.
fn solve_wide(cost: &CostMatrix) -> Vec<usize> {
    let (nr, nc) = (cost.rows(), cost.cols());
    let mut u = vec![0.0; nr];
    let mut v = vec![0.0; nc];
    let mut col_for_row = vec![usize::MAX; nr];
    let mut row_for_col = vec![usize::MAX; nc];
    let mut path = vec![usize::MAX; nc];
    let mut shortest = vec![f64::INFINITY; nc];
    let mut seen_row = vec![false; nr];
    let mut seen_col = vec![false; nc];
    let mut remaining: Vec<usize> = Vec::with_capacity(nc);

    for cur_row in 0..nr {
        shortest.fill(f64::INFINITY);
        seen_row.fill(false);
        seen_col.fill(false);
        remaining.clear();
        remaining.extend(0..nc);

        let mut min_val = 0.0;
        let mut i = cur_row;
        let sink = loop {
            seen_row[i] = true;
            let mut best: Option<usize> = None;
            let mut lowest = f64::INFINITY;
            for (slot, &j) in remaining.iter().enumerate() {
                let reduced = min_val + cost.get(i, j) - u[i] - v[j];
                if reduced < shortest[j] {
                    path[j] = i;
                    shortest[j] = reduced;
                }
                if shortest[j] < lowest
                    || (shortest[j] == lowest && row_for_col[j] == usize::MAX && best.is_some_and(|b| row_for_col[remaining[b]] != usize::MAX))
                {
                    lowest = shortest[j];
                    best = Some(slot);
                }
            }
            let slot = best.expect("finite costs always leave a reachable column");
            min_val = lowest;
            let j = remaining.remove(slot);
            seen_col[j] = true;
            if row_for_col[j] == usize::MAX {
                break j;
            }
            i = row_for_col[j];
        };

        u[cur_row] += min_val;
        for r in 0..nr {
            if seen_row[r] && r != cur_row {
                u[r] += min_val - shortest[col_for_row[r]];
            }
        }
        for c in 0..nc {
            if seen_col[c] {
                v[c] -= min_val - shortest[c];
            }
        }

        let mut j = sink;
        loop {
            let r = path[j];
            row_for_col[j] = r;
            std::mem::swap(&mut col_for_row[r], &mut j);
            if r == cur_row {
                break;
            }
        }
    }
    col_for_row
}
