//! Partitioner checks: a reference reimplementation of the ExDir recipe and
//! the structural invariants.

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma};
use sfedkd::data::{generate_synthetic, partition_exdir, Dataset, PartitionSpec};
use sfedkd::rng::rng_from_seed;

/// Straight-line restatement of the recipe: allocate `c` classes per client
/// (redrawing until every class has a holder), then per class draw Gamma(α)
/// weights for its holders, shuffle the class samples, and hand out
/// largest-remainder shares in holder order.
fn reference_counts(
    labels: &[usize],
    num_classes: usize,
    n: usize,
    c: usize,
    alpha: f64,
    seed: u64,
) -> Vec<Vec<usize>> {
    let mut rng = rng_from_seed(seed);
    let holders = loop {
        let mut holders: Vec<Vec<usize>> = vec![vec![]; num_classes];
        for client in 0..n {
            let mut all: Vec<usize> = (0..num_classes).collect();
            let (chosen, _) = all.partial_shuffle(&mut rng, c);
            for &k in chosen.iter() {
                holders[k].push(client);
            }
        }
        if holders.iter().all(|h| !h.is_empty()) {
            break holders;
        }
    };
    let mut counts = vec![vec![0usize; num_classes]; n];
    for class in 0..num_classes {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        let owners = &holders[class];
        let props: Vec<f64> = if owners.len() == 1 {
            vec![1.0]
        } else {
            let gamma = Gamma::new(alpha, 1.0).unwrap();
            let g: Vec<f64> = owners.iter().map(|_| gamma.sample(&mut rng)).collect();
            let s: f64 = g.iter().sum();
            if s > 0.0 {
                g.iter().map(|v| v / s).collect()
            } else {
                let mut p = vec![0.0; owners.len()];
                p[rng.random_range(0..owners.len())] = 1.0;
                p
            }
        };
        members.shuffle(&mut rng);
        let total = members.len();
        let quotas: Vec<f64> = props.iter().map(|p| total as f64 * p).collect();
        let mut share: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
        let mut left = total - share.iter().sum::<usize>();
        let mut order: Vec<usize> = (0..owners.len()).collect();
        order.sort_by(|&a, &b| {
            (quotas[b] - quotas[b].floor())
                .partial_cmp(&(quotas[a] - quotas[a].floor()))
                .unwrap()
                .then(a.cmp(&b))
        });
        for i in order {
            if left == 0 {
                break;
            }
            share[i] += 1;
            left -= 1;
        }
        for (o, s) in owners.iter().zip(share) {
            counts[*o][class] += s;
        }
    }
    counts
}

#[test]
fn matches_reference_recipe() {
    let ds = generate_synthetic(50, 10, 2, 1.0, 21).unwrap();
    let spec = PartitionSpec {
        clients: 20,
        classes_per_client: 2,
        alpha: 0.5,
        seed: 3,
    };
    let parts = partition_exdir(&ds, &spec).unwrap();
    let expected = reference_counts(ds.labels(), 10, 20, 2, 0.5, 3);
    let got: Vec<Vec<usize>> = parts.iter().map(Dataset::class_counts).collect();
    assert_eq!(got, expected);
}

fn sorted_rows(ds: &Dataset) -> Vec<(Vec<u64>, usize)> {
    let mut rows: Vec<(Vec<u64>, usize)> = (0..ds.len())
        .map(|i| {
            (
                ds.sample(i).iter().map(|v| v.to_bits()).collect(),
                ds.labels()[i],
            )
        })
        .collect();
    rows.sort();
    rows
}

fn check_partition(ds: &Dataset, spec: &PartitionSpec) {
    let parts = partition_exdir(ds, spec).unwrap();
    assert_eq!(parts.len(), spec.clients);
    let mut union_rows = Vec::new();
    for p in &parts {
        let classes = p.class_counts().iter().filter(|&&n| n > 0).count();
        assert!(classes <= spec.classes_per_client);
        union_rows.extend(sorted_rows(p));
    }
    union_rows.sort();
    assert_eq!(union_rows, sorted_rows(ds));
    let again = partition_exdir(ds, spec).unwrap();
    assert_eq!(parts, again);
}

#[test]
fn many_draws_over_grid() {
    let ds = generate_synthetic(30, 6, 2, 1.0, 5).unwrap();
    let mut draws = 0;
    for c in [1, 2, 3, 6] {
        for alpha in [0.05, 0.5, 1.0, 10.0] {
            for seed in 0..25 {
                let spec = PartitionSpec {
                    clients: 8,
                    classes_per_client: c,
                    alpha,
                    seed,
                };
                check_partition(&ds, &spec);
                draws += 1;
            }
        }
    }
    assert_eq!(draws, 400);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn partition_invariants(
        classes in 2usize..7,
        clients in 1usize..12,
        c_frac in 0.0f64..1.0,
        alpha in 0.01f64..20.0,
        seed in any::<u64>(),
    ) {
        let c = 1 + ((classes - 1) as f64 * c_frac) as usize;
        prop_assume!(clients * c >= classes);
        let ds = generate_synthetic(7, classes, 2, 1.0, seed ^ 0x55).unwrap();
        check_partition(&ds, &PartitionSpec { clients, classes_per_client: c, alpha, seed });
    }
}
