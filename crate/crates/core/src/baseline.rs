//! Nearest-neighbour re-identification by center distance with a no-match
//! threshold, and a grid search for that threshold.

use std::collections::BTreeMap;
use std::path::Path;

use serde::Serialize;

use crate::cloud::TemporalAssociation;
use crate::metrics::{f1_scores, matching_confusion, write_json, MatchConfusion};
use crate::synth::ScenePair;
use crate::{dist3, Error, Result, Vec3};

/// Pairs the globally closest unpaired fruits first; pairs farther apart
/// than `epsilon` are never formed. Ties go to the lower current index,
/// then the lower previous index.
pub fn nn_match(current: &[Vec3], previous: &[Vec3], epsilon: f64) -> Result<TemporalAssociation> {
    if !(epsilon > 0.0) {
        return Err(Error::Config(format!("epsilon must be positive, got {epsilon}")));
    }
    let mut candidates: Vec<(f64, usize, usize)> = current
        .iter()
        .enumerate()
        .flat_map(|(i, c)| previous.iter().enumerate().map(move |(j, p)| (dist3(*c, *p), i, j)))
        .filter(|(d, _, _)| *d <= epsilon)
        .collect();
    candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut pairs = vec![None; current.len()];
    let mut used = vec![false; previous.len()];
    for (_, i, j) in candidates {
        if pairs[i].is_none() && !used[j] {
            pairs[i] = Some(j);
            used[j] = true;
        }
    }
    TemporalAssociation::new(pairs)
}

/// Fruit centers of both sessions with the true association.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchCase {
    pub current: Vec<Vec3>,
    pub previous: Vec<Vec3>,
    pub truth: TemporalAssociation,
}

impl MatchCase {
    pub fn from_pair(pair: &ScenePair) -> Self {
        MatchCase {
            current: pair.current.1.centers(),
            previous: pair.prev.1.centers(),
            truth: pair.association.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpsilonSweep {
    pub best: f64,
    /// `(epsilon, mF1)` in grid order.
    pub curve: Vec<(f64, f64)>,
}

impl EpsilonSweep {
    /// Writes `{"<epsilon>": mF1, ...}`.
    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        #[derive(Serialize)]
        struct Report<'a> {
            best_epsilon: f64,
            curve: &'a BTreeMap<String, f64>,
        }
        let curve: BTreeMap<String, f64> = self.curve.iter().map(|(e, m)| (format!("{e}"), *m)).collect();
        write_json(
            &Report {
                best_epsilon: self.best,
                curve: &curve,
            },
            path,
        )
    }
}

/// Confusion of the baseline summed over `cases`.
pub fn baseline_confusion(cases: &[MatchCase], epsilon: f64) -> Result<MatchConfusion> {
    let mut total = MatchConfusion::default();
    for case in cases {
        let pred = nn_match(&case.current, &case.previous, epsilon)?;
        total.add(&matching_confusion(&pred, &case.truth)?);
    }
    Ok(total)
}

/// mF1 for every threshold of `grid`; the best one wins, the smaller on ties.
pub fn sweep_epsilon(cases: &[MatchCase], grid: &[f64]) -> Result<EpsilonSweep> {
    if grid.is_empty() || cases.is_empty() {
        return Err(Error::EmptyInput("epsilon sweep needs a grid and at least one case".into()));
    }
    let curve = grid
        .iter()
        .map(|&e| Ok((e, f1_scores(&baseline_confusion(cases, e)?).mf1)))
        .collect::<Result<Vec<_>>>()?;
    let best = curve
        .iter()
        .copied()
        .reduce(|a, b| if b.1 > a.1 || (b.1 == a.1 && b.0 < a.0) { b } else { a })
        .map(|(e, _)| e)
        .unwrap();
    Ok(EpsilonSweep { best, curve })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::Rng;

    use super::*;
    use crate::rng::rng_from_seed;
    use crate::synth::{generate_pair, OrchardConfig};

    fn random_points(rng: &mut crate::rng::Rng, n: usize) -> Vec<Vec3> {
        (0..n).map(|_| [0; 3].map(|_| rng.gen_range(0.0..0.1))).collect()
    }

    /// Enumerates every injective partial assignment within epsilon and
    /// picks the one whose sorted distance list is lexicographically smallest
    /// (longer lists preferred at a shared prefix), which is what globally
    /// closest-first pairing produces.
    fn enumeration_oracle(cur: &[Vec3], prev: &[Vec3], eps: f64) -> Vec<Option<usize>> {
        fn rec(cur: &[Vec3], prev: &[Vec3], eps: f64, i: usize, used: &mut Vec<bool>, acc: &mut Vec<Option<usize>>, out: &mut Vec<Vec<Option<usize>>>) {
            if i == cur.len() {
                out.push(acc.clone());
                return;
            }
            acc.push(None);
            rec(cur, prev, eps, i + 1, used, acc, out);
            acc.pop();
            for j in 0..prev.len() {
                if !used[j] && dist3(cur[i], prev[j]) <= eps {
                    used[j] = true;
                    acc.push(Some(j));
                    rec(cur, prev, eps, i + 1, used, acc, out);
                    acc.pop();
                    used[j] = false;
                }
            }
        }
        let mut all = Vec::new();
        rec(cur, prev, eps, 0, &mut vec![false; prev.len()], &mut Vec::new(), &mut all);
        // Maximal assignments only: no further pair within eps can be added.
        all.retain(|a| {
            !cur.iter().enumerate().any(|(i, c)| {
                a[i].is_none()
                    && prev
                        .iter()
                        .enumerate()
                        .any(|(j, p)| !a.contains(&Some(j)) && dist3(*c, *p) <= eps)
            })
        });
        let key = |a: &Vec<Option<usize>>| {
            let mut d: Vec<f64> = a
                .iter()
                .enumerate()
                .filter_map(|(i, j)| j.map(|j| dist3(cur[i], prev[j])))
                .collect();
            d.sort_by(f64::total_cmp);
            d
        };
        all.into_iter()
            .min_by(|a, b| {
                let (ka, kb) = (key(a), key(b));
                for (x, y) in ka.iter().zip(&kb) {
                    match x.total_cmp(y) {
                        std::cmp::Ordering::Equal => continue,
                        o => return o,
                    }
                }
                kb.len().cmp(&ka.len())
            })
            .unwrap()
    }

    #[test]
    fn close_pair_matches_and_far_pair_does_not() {
        let a = nn_match(&[[0.02, 0.0, 0.0]], &[[0.0; 3]], 0.033).unwrap();
        assert_eq!(a.pairs(), &[Some(0)]);
        let a = nn_match(&[[0.05, 0.0, 0.0]], &[[0.0; 3]], 0.033).unwrap();
        assert_eq!(a.pairs(), &[None]);
        assert!(matches!(nn_match(&[], &[], 0.0), Err(Error::Config(_))));
    }

    #[test]
    fn closest_pair_wins_a_contested_fruit() {
        let prev = [[0.0; 3]];
        let cur = [[0.02, 0.0, 0.0], [0.01, 0.0, 0.0]];
        assert_eq!(nn_match(&cur, &prev, 0.05).unwrap().pairs(), &[None, Some(0)]);
    }

    #[test]
    fn matches_exhaustive_oracle() {
        for seed in 0..150u64 {
            let mut rng = rng_from_seed(seed);
            let a = rng.gen_range(0..=6);
            let b = rng.gen_range(0..=6);
            let cur = random_points(&mut rng, a);
            let prev = random_points(&mut rng, b);
            let eps = rng.gen_range(0.01..0.12);
            let got = nn_match(&cur, &prev, eps).unwrap();
            assert_eq!(got.pairs(), enumeration_oracle(&cur, &prev, eps).as_slice(), "seed {seed}");
        }
    }

    #[test]
    fn threshold_limits() {
        let mut rng = rng_from_seed(3);
        let cur = random_points(&mut rng, 5);
        let prev = random_points(&mut rng, 7);
        assert_eq!(nn_match(&cur, &prev, 1e3).unwrap().num_matched(), 5);
        assert_eq!(nn_match(&cur, &prev, 1e-12).unwrap().num_matched(), 0);
    }

    #[test]
    fn single_threshold_grid_is_returned() {
        let case = MatchCase {
            current: vec![[0.0; 3]],
            previous: vec![[0.01, 0.0, 0.0]],
            truth: TemporalAssociation::new(vec![Some(0)]).unwrap(),
        };
        let s = sweep_epsilon(&[case], &[0.02]).unwrap();
        assert_eq!(s.best, 0.02);
        assert_eq!(s.curve, vec![(0.02, 0.5)]);
        assert!(sweep_epsilon(&[], &[0.02]).is_err());
    }

    #[test]
    fn sweep_ties_prefer_the_smaller_threshold() {
        let case = MatchCase {
            current: vec![[0.0; 3], [0.5, 0.0, 0.0]],
            previous: vec![[0.01, 0.0, 0.0]],
            truth: TemporalAssociation::new(vec![Some(0), None]).unwrap(),
        };
        let s = sweep_epsilon(&[case], &[0.3, 0.02, 0.1]).unwrap();
        assert_eq!(s.best, 0.02);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sweep.json");
        s.write_json(&p).unwrap();
        let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&p).unwrap()).unwrap();
        assert_eq!(v["curve"]["0.02"], 1.0);
    }

    #[test]
    fn sweep_peaks_at_or_above_the_drift() {
        let cases: Vec<MatchCase> = (0..4)
            .map(|k| MatchCase::from_pair(&generate_pair(&OrchardConfig { rng_seed: 40 + k, ..Default::default() }).unwrap()))
            .collect();
        let grid: Vec<f64> = (1..=12).map(|k| 0.005 * k as f64).collect();
        let s = sweep_epsilon(&cases, &grid).unwrap();
        // Typical displacement magnitude for a per-axis std of 0.01 m.
        assert!(s.best >= 0.01, "{:?}", s);
    }

    proptest! {
        #[test]
        fn no_match_count_never_grows_with_epsilon(seed in any::<u64>(), a in 0usize..8, b in 0usize..8) {
            let mut rng = rng_from_seed(seed);
            let cur = random_points(&mut rng, a);
            let prev = random_points(&mut rng, b);
            let mut last = usize::MAX;
            for k in 1..=20 {
                let n = nn_match(&cur, &prev, 0.01 * k as f64).unwrap().pairs().iter().filter(|p| p.is_none()).count();
                prop_assert!(n <= last);
                last = n;
            }
        }

        #[test]
        fn relabeling_commutes(seed in any::<u64>(), a in 0usize..7, b in 0usize..7) {
            let mut rng = rng_from_seed(seed);
            let cur = random_points(&mut rng, a);
            let prev = random_points(&mut rng, b);
            let base = nn_match(&cur, &prev, 0.05).unwrap();
            let rev_cur: Vec<Vec3> = cur.iter().rev().copied().collect();
            let rev_prev: Vec<Vec3> = prev.iter().rev().copied().collect();
            let other = nn_match(&rev_cur, &rev_prev, 0.05).unwrap();
            for i in 0..a {
                let expected = base.get(i).map(|j| b - 1 - j);
                prop_assert_eq!(other.get(a - 1 - i), expected);
            }
        }
    }
}
