use std::cmp::Ordering;

use super::ProbMatrix;
use crate::cloud::TemporalAssociation;

/// Fixes the most probable remaining (query, outcome) pair first. Choosing a
/// candidate retires the query and the candidate; choosing no-match retires
/// only the query. Ties go to the lower row, then the lower column.
pub fn greedy_assign(h: &ProbMatrix) -> TemporalAssociation {
    let none_col = h.no_match_column();
    let mut entries: Vec<(f64, usize, usize)> = h
        .rows
        .iter()
        .enumerate()
        .flat_map(|(i, r)| r.probs.iter().enumerate().map(move |(j, p)| (*p, i, j)))
        .collect();
    entries.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap_or(Ordering::Equal)
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });
    let mut pairs: Vec<Option<Option<usize>>> = vec![None; h.rows.len()];
    let mut taken = vec![false; none_col];
    let mut open = h.rows.len();
    for (_, i, j) in entries {
        if open == 0 {
            break;
        }
        if pairs[i].is_some() {
            continue;
        }
        if j == none_col {
            pairs[i] = Some(None);
        } else if !taken[j] {
            taken[j] = true;
            pairs[i] = Some(Some(j));
        } else {
            continue;
        }
        open -= 1;
    }
    TemporalAssociation::new(pairs.into_iter().map(|p| p.flatten()).collect()).expect("greedy picks are injective")
}
