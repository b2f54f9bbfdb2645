//! Optimal bipartite assignment between predictions and ground-truth
//! objects, via the shortest-augmenting-path Hungarian algorithm (O(n^3)).

use crate::{DdError, Result};

/// One-to-one assignment of each ground-truth object to a distinct
/// prediction slot.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    /// `(query, gt)` pairs, sorted by gt index.
    pub pairs: Vec<(usize, usize)>,
    pub total_cost: f64,
}

/// Minimize total cost over injective maps gt -> query. `cost` is row-major
/// `[n_queries, n_gt]` (entry `q * n_gt + g`). Requires `n_gt <= n_queries`
/// and finite costs.
pub fn hungarian_match(cost: &[f64], n_queries: usize, n_gt: usize) -> Result<Assignment> {
    if cost.len() != n_queries * n_gt {
        return Err(DdError::ShapeMismatch(format!(
            "cost matrix has {} entries, expected {} x {}",
            cost.len(),
            n_queries,
            n_gt
        )));
    }
    if n_gt > n_queries {
        return Err(DdError::InfeasibleSpec(format!(
            "{n_gt} objects cannot be assigned to {n_queries} prediction slots"
        )));
    }
    if cost.iter().any(|c| !c.is_finite()) {
        return Err(DdError::NonFinite("assignment cost matrix".into()));
    }
    if n_gt == 0 {
        return Ok(Assignment {
            pairs: vec![],
            total_cost: 0.0,
        });
    }

    // Rows = ground truth (the scarce side), columns = queries. 1-based
    // internally; p[j] is the row matched to column j (0 = free).
    let at = |g: usize, q: usize| cost[q * n_gt + g];
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n_gt + 1];
    let mut v = vec![0.0; n_queries + 1];
    let mut p = vec![0usize; n_queries + 1];
    let mut way = vec![0usize; n_queries + 1];

    for i in 1..=n_gt {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; n_queries + 1];
        let mut used = vec![false; n_queries + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=n_queries {
                if used[j] {
                    continue;
                }
                let cur = at(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n_queries {
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
        // Unwind the augmenting path.
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut pairs = Vec::with_capacity(n_gt);
    let mut total = 0.0;
    #[allow(clippy::needless_range_loop)]
    for j in 1..=n_queries {
        if p[j] != 0 {
            pairs.push((j - 1, p[j] - 1));
            total += at(p[j] - 1, j - 1);
        }
    }
    pairs.sort_by_key(|&(_, g)| g);
    debug_assert_eq!(pairs.len(), n_gt);
    Ok(Assignment {
        pairs,
        total_cost: total,
    })
}

/// Exhaustive minimum over all injective assignments; usable only for tiny
/// problems. Kept as the correctness oracle for the solver above.
pub fn brute_force_match(cost: &[f64], n_queries: usize, n_gt: usize) -> Assignment {
    #[allow(clippy::too_many_arguments)]
    fn recurse(
        cost: &[f64],
        n_queries: usize,
        n_gt: usize,
        g: usize,
        used: &mut Vec<bool>,
        cur: &mut Vec<usize>,
        cur_cost: f64,
        best: &mut (f64, Vec<usize>),
    ) {
        if g == n_gt {
            if cur_cost < best.0 {
                *best = (cur_cost, cur.clone());
            }
            return;
        }
        for q in 0..n_queries {
            if used[q] {
                continue;
            }
            used[q] = true;
            cur.push(q);
            recurse(
                cost,
                n_queries,
                n_gt,
                g + 1,
                used,
                cur,
                cur_cost + cost[q * n_gt + g],
                best,
            );
            cur.pop();
            used[q] = false;
        }
    }
    let mut best = (f64::INFINITY, vec![]);
    let mut used = vec![false; n_queries];
    recurse(
        cost,
        n_queries,
        n_gt,
        0,
        &mut used,
        &mut Vec::new(),
        0.0,
        &mut best,
    );
    let pairs: Vec<(usize, usize)> = best.1.iter().enumerate().map(|(g, &q)| (q, g)).collect();
    Assignment {
        pairs,
        total_cost: best.0,
    }
}
