//! Teacher selection: pick `K` clients whose pooled class distribution is
//! closest to uniform.
//!
//! The exact problem generalizes maximum coverage, so the engine uses the
//! greedy heuristic. The exhaustive solver is an oracle for small instances.

use rand::seq::SliceRandom;

use crate::data::ClassDistribution;
use crate::distill::{discrepancy_slices, Metric};
use crate::error::{arg, Error, Result};
use crate::rng::rng_from_seed;

/// Largest candidate count the exhaustive solver accepts.
pub const BRUTE_FORCE_MAX_CANDIDATES: usize = 20;

#[derive(Debug, Clone)]
pub struct SelectionInstance {
    pub candidates: Vec<ClassDistribution>,
    pub k: usize,
    pub metric: Metric,
}

/// Chosen indices and the objective `d(normalize(Σ D_i), U)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub indices: Vec<usize>,
    pub objective: f64,
}

impl SelectionInstance {
    pub fn new(candidates: Vec<ClassDistribution>, k: usize, metric: Metric) -> Result<Self> {
        let inst = Self {
            candidates,
            k,
            metric,
        };
        inst.validate()?;
        Ok(inst)
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.candidates.len();
        if self.k == 0 || self.k > m {
            return arg(format!("K must lie in [1, {m}], got {}", self.k));
        }
        let c = self.candidates[0].len();
        if c == 0 || self.candidates.iter().any(|d| d.len() != c) {
            return arg("candidate distributions must share a non-zero length");
        }
        if self.candidates.iter().any(|d| d.empty) {
            return arg("candidates with empty datasets are not eligible");
        }
        Ok(())
    }

    fn num_classes(&self) -> usize {
        self.candidates[0].len()
    }

    /// Objective of a subset. Sums in ascending index order so that every
    /// solver reports bit-identical values for the same set.
    pub fn objective(&self, subset: &[usize]) -> f64 {
        let mut sorted = subset.to_vec();
        sorted.sort_unstable();
        let mut agg = vec![0.0; self.num_classes()];
        for &i in &sorted {
            for (a, p) in agg.iter_mut().zip(&self.candidates[i].proportions) {
                *a += p;
            }
        }
        self.distance_to_uniform(&agg)
    }

    fn distance_to_uniform(&self, agg: &[f64]) -> f64 {
        let total: f64 = agg.iter().sum();
        let c = agg.len();
        let normalized: Vec<f64> = agg.iter().map(|v| v / total).collect();
        let uniform = vec![1.0 / c as f64; c];
        discrepancy_slices(&normalized, &uniform, self.metric)
    }
}

/// Greedy selection: repeatedly add the candidate that brings the normalized
/// running aggregate closest to uniform. Ties go to the lowest index.
/// Indices are returned in selection order.
pub fn greedy_select(inst: &SelectionInstance) -> Result<Selection> {
    inst.validate()?;
    let c = inst.num_classes();
    let mut agg = vec![0.0; c];
    let mut chosen = Vec::with_capacity(inst.k);
    let mut taken = vec![false; inst.candidates.len()];
    let mut trial = vec![0.0; c];
    while chosen.len() < inst.k {
        let mut best: Option<(f64, usize)> = None;
        for (i, cand) in inst.candidates.iter().enumerate() {
            if taken[i] {
                continue;
            }
            for ((t, a), p) in trial.iter_mut().zip(&agg).zip(&cand.proportions) {
                *t = a + p;
            }
            let d = inst.distance_to_uniform(&trial);
            if best.is_none_or(|(bd, _)| d < bd) {
                best = Some((d, i));
            }
        }
        let (_, pick) = best.expect("K <= M leaves a candidate");
        taken[pick] = true;
        for (a, p) in agg.iter_mut().zip(&inst.candidates[pick].proportions) {
            *a += p;
        }
        chosen.push(pick);
    }
    let objective = inst.objective(&chosen);
    Ok(Selection {
        indices: chosen,
        objective,
    })
}

/// Exhaustive search over all `K`-subsets; ties go to the lexicographically
/// smallest index set.
pub fn brute_force_select(inst: &SelectionInstance) -> Result<Selection> {
    inst.validate()?;
    let m = inst.candidates.len();
    if m > BRUTE_FORCE_MAX_CANDIDATES {
        return Err(Error::Capacity(format!(
            "exhaustive selection is limited to {BRUTE_FORCE_MAX_CANDIDATES} candidates, got {m}"
        )));
    }
    let k = inst.k;
    let mut subset: Vec<usize> = (0..k).collect();
    let mut best = Selection {
        objective: inst.objective(&subset),
        indices: subset.clone(),
    };
    // lexicographic successor of a k-combination of 0..m
    while let Some(pos) = (0..k).rev().find(|&i| subset[i] < m - k + i) {
        subset[pos] += 1;
        for j in pos + 1..k {
            subset[j] = subset[j - 1] + 1;
        }
        let obj = inst.objective(&subset);
        if obj < best.objective {
            best = Selection {
                objective: obj,
                indices: subset.clone(),
            };
        }
    }
    Ok(best)
}

/// Uniform `K`-subset of `0..m`, sorted ascending.
pub fn random_select(m: usize, k: usize, seed: u64) -> Result<Vec<usize>> {
    if k > m {
        return arg(format!("cannot choose {k} of {m}"));
    }
    let mut all: Vec<usize> = (0..m).collect();
    let (chosen, _) = all.partial_shuffle(&mut rng_from_seed(seed), k);
    let mut chosen = chosen.to_vec();
    chosen.sort_unstable();
    Ok(chosen)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn d(p: &[f64]) -> ClassDistribution {
        ClassDistribution::from_weights(p.to_vec()).unwrap()
    }

    fn documented_instance() -> SelectionInstance {
        SelectionInstance::new(
            vec![
                d(&[1.0, 0.0]),
                d(&[0.0, 1.0]),
                d(&[1.0, 0.0]),
                d(&[0.5, 0.5]),
            ],
            2,
            Metric::L1,
        )
        .unwrap()
    }

    #[test]
    fn greedy_documented_trace() {
        let sel = greedy_select(&documented_instance()).unwrap();
        assert_eq!(sel.indices, vec![3, 0]);
        assert!((sel.objective - 0.5).abs() < 1e-15);
    }

    #[test]
    fn brute_force_beats_greedy_on_documented_instance() {
        let sel = brute_force_select(&documented_instance()).unwrap();
        assert_eq!(sel.indices, vec![0, 1]);
        assert_eq!(sel.objective, 0.0);
    }

    #[test]
    fn one_hot_candidates_reach_uniform() {
        let inst = SelectionInstance::new(
            vec![
                d(&[1.0, 0.0, 0.0]),
                d(&[0.0, 1.0, 0.0]),
                d(&[0.0, 0.0, 1.0]),
            ],
            3,
            Metric::L1,
        )
        .unwrap();
        let g = greedy_select(&inst).unwrap();
        let mut idx = g.indices.clone();
        idx.sort();
        assert_eq!(idx, vec![0, 1, 2]);
        assert!(g.objective.abs() < 1e-15);
        let b = brute_force_select(&inst).unwrap();
        assert_eq!(b.indices, vec![0, 1, 2]);
    }

    #[test]
    fn k_one_picks_closest_to_uniform() {
        let inst = SelectionInstance::new(
            vec![d(&[0.9, 0.1]), d(&[0.6, 0.4]), d(&[0.2, 0.8])],
            1,
            Metric::L2,
        )
        .unwrap();
        assert_eq!(brute_force_select(&inst).unwrap().indices, vec![1]);
        assert_eq!(greedy_select(&inst).unwrap().indices, vec![1]);
    }

    #[test]
    fn invalid_instances() {
        assert!(SelectionInstance::new(vec![d(&[1.0, 0.0])], 2, Metric::L1).is_err());
        assert!(SelectionInstance::new(vec![d(&[1.0, 0.0])], 0, Metric::L1).is_err());
        let empty = ClassDistribution {
            proportions: vec![0.0, 0.0],
            empty: true,
        };
        assert!(SelectionInstance::new(vec![d(&[1.0, 0.0]), empty], 1, Metric::L1).is_err());
        let big = SelectionInstance::new(vec![d(&[1.0, 0.0]); 21], 2, Metric::L1).unwrap();
        assert!(matches!(brute_force_select(&big), Err(Error::Capacity(_))));
        assert!(random_select(3, 4, 0).is_err());
    }

    #[test]
    fn random_select_basics() {
        assert_eq!(random_select(5, 5, 3).unwrap(), vec![0, 1, 2, 3, 4]);
        assert_eq!(
            random_select(9, 4, 17).unwrap(),
            random_select(9, 4, 17).unwrap()
        );
        let s = random_select(9, 4, 17).unwrap();
        assert_eq!(s.len(), 4);
        assert!(s.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn random_select_is_uniform() {
        let mut hits = [0usize; 5];
        let trials = 10_000;
        for seed in 0..trials {
            for i in random_select(5, 2, seed).unwrap() {
                hits[i] += 1;
            }
        }
        for h in hits {
            let freq = h as f64 / trials as f64;
            assert!((freq - 0.4).abs() <= 0.02, "{freq}");
        }
    }
}
