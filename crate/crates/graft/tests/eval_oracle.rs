//! Metric correctness against independent oracles.
//!
//! The oracle computes each gallery item's rank directly by counting (no
//! sorting) and accumulates AP/CMC from first principles, so it shares no
//! code path with the library implementation.

use std::collections::BTreeMap;

use graft::eval::{chance_map, cmc_and_map, pairwise_distances, rank_gallery, DistanceMetric};
use graft::numerics::SeededRng;

/// Rank of gallery item `g` for one query: 1 + number of items strictly
/// closer, or equally close with a smaller index.
fn direct_rank(dists: &[f64], g: usize) -> usize {
    let mut rank = 1;
    for (other, &d) in dists.iter().enumerate() {
        if other == g {
            continue;
        }
        if d < dists[g] || (d == dists[g] && other < g) {
            rank += 1;
        }
    }
    rank
}

struct OracleReport {
    map: f64,
    rank_hits: BTreeMap<usize, f64>,
    excluded: usize,
}

fn oracle_metrics(dists: &[Vec<f64>], query_ids: &[u64], gallery_ids: &[u64], ks: &[usize]) -> OracleReport {
    let mut ap_sum = 0.0;
    let mut hits: BTreeMap<usize, usize> = ks.iter().map(|&k| (k, 0)).collect();
    let mut scored = 0usize;
    let mut excluded = 0usize;
    for (q, row) in dists.iter().enumerate() {
        let relevant: Vec<usize> = (0..gallery_ids.len())
            .filter(|&g| gallery_ids[g] == query_ids[q])
            .collect();
        if relevant.is_empty() {
            excluded += 1;
            continue;
        }
        scored += 1;
        // Ranks of the relevant items, ascending.
        let mut rel_ranks: Vec<usize> = relevant.iter().map(|&g| direct_rank(row, g)).collect();
        rel_ranks.sort_unstable();
        let mut ap = 0.0;
        for (j, &r) in rel_ranks.iter().enumerate() {
            ap += (j + 1) as f64 / r as f64;
        }
        ap /= rel_ranks.len() as f64;
        ap_sum += ap;
        for (&k, h) in hits.iter_mut() {
            if rel_ranks[0] <= k {
                *h += 1;
            }
        }
    }
    OracleReport {
        map: if scored == 0 { 0.0 } else { ap_sum / scored as f64 },
        rank_hits: hits
            .into_iter()
            .map(|(k, h)| (k, if scored == 0 { 0.0 } else { h as f64 / scored as f64 }))
            .collect(),
        excluded,
    }
}

#[test]
fn hand_ap_example_to_machine_precision() {
    // Relevant at ranks 1 and 3 of 5.
    let dists = vec![vec![0.1, 0.2, 0.3, 0.4, 0.5]];
    let qids = [7u64];
    let gids = [7u64, 1, 7, 2, 3];
    let ranking = rank_gallery(&dists, &qids, &gids, &[0], &[0; 5], false).unwrap();
    let report = cmc_and_map(&ranking, &[1, 5, 10]);
    let expected = (1.0 + 2.0 / 3.0) / 2.0;
    assert!((report.map - expected).abs() < 1e-12, "{} vs {expected}", report.map);
}

#[test]
fn matches_direct_rank_oracle_on_200_random_instances() {
    let mut rng = SeededRng::new(2024);
    for instance in 0..200 {
        let nq = 1 + rng.below(5);
        let ng = 2 + rng.below(7); // 2..=8
        let dim = 1 + rng.below(4);
        let q: Vec<Vec<f64>> = (0..nq)
            .map(|_| (0..dim).map(|_| rng.normal(0.0, 1.0)).collect())
            .collect();
        let g: Vec<Vec<f64>> = (0..ng)
            .map(|_| (0..dim).map(|_| rng.normal(0.0, 1.0)).collect())
            .collect();
        let n_ids = 1 + rng.below(4) as u64;
        let qids: Vec<u64> = (0..nq).map(|_| rng.below(n_ids as usize) as u64).collect();
        let gids: Vec<u64> = (0..ng).map(|_| rng.below(n_ids as usize) as u64).collect();
        let dists = pairwise_distances(&q, &g, DistanceMetric::Euclidean).unwrap();

        let ranking = rank_gallery(&dists, &qids, &gids, &vec![0; nq], &vec![0; ng], false).unwrap();
        let got = cmc_and_map(&ranking, &[1, 5, 10]);
        let want = oracle_metrics(&dists, &qids, &gids, &[1, 5, 10]);

        assert_eq!(got.map, want.map, "instance {instance}: mAP mismatch");
        assert_eq!(got.excluded_queries, want.excluded, "instance {instance}");
        for k in [1usize, 5, 10] {
            assert_eq!(got.rank(k), want.rank_hits[&k], "instance {instance} R{k}");
        }
    }
}

#[test]
fn rank_bounds_and_ordering() {
    let mut rng = SeededRng::new(77);
    for _ in 0..50 {
        let nq = 1 + rng.below(5);
        let ng = 2 + rng.below(7);
        let dists: Vec<Vec<f64>> = (0..nq)
            .map(|_| (0..ng).map(|_| rng.uniform(0.0, 1.0)).collect())
            .collect();
        let qids: Vec<u64> = (0..nq).map(|_| rng.below(3) as u64).collect();
        let gids: Vec<u64> = (0..ng).map(|_| rng.below(3) as u64).collect();
        let ranking = rank_gallery(&dists, &qids, &gids, &vec![0; nq], &vec![0; ng], false).unwrap();
        let rep = cmc_and_map(&ranking, &[1, 5, 10]);
        assert!((0.0..=1.0).contains(&rep.map));
        let (r1, r5, r10) = (rep.rank(1), rep.rank(5), rep.rank(10));
        assert!(r1 <= r5 && r5 <= r10, "{r1} {r5} {r10}");
        assert!((0.0..=1.0).contains(&r1) && (0.0..=1.0).contains(&r10));
    }
}

/// Exact expected AP under a uniformly random ranking by enumerating all
/// C(N, R) placements of the relevant items.
fn exact_random_ap(n: usize, r: usize) -> f64 {
    fn combos(n: usize, k: usize, start: usize, current: &mut Vec<usize>, all: &mut Vec<Vec<usize>>) {
        if current.len() == k {
            all.push(current.clone());
            return;
        }
        for i in start..n {
            current.push(i);
            combos(n, k, i + 1, current, all);
            current.pop();
        }
    }
    let mut all = Vec::new();
    combos(n, r, 0, &mut Vec::new(), &mut all);
    let mut total = 0.0;
    for positions in &all {
        let mut ap = 0.0;
        for (j, &pos) in positions.iter().enumerate() {
            ap += (j + 1) as f64 / (pos + 1) as f64;
        }
        total += ap / r as f64;
    }
    total / all.len() as f64
}

#[test]
fn chance_map_estimator_matches_exact_enumeration() {
    for (n, r) in [(8usize, 1usize), (8, 3), (6, 2), (5, 5)] {
        let exact = exact_random_ap(n, r);
        let est = chance_map(&[r], n, 30_000, 99);
        assert!(
            (est - exact).abs() < 0.01,
            "N={n} R={r}: est {est} vs exact {exact}"
        );
    }
}

#[test]
fn random_embeddings_score_near_chance() {
    // Fixed gallery composition; many random queries approach the exact
    // random-ranking expectation.
    let mut rng = SeededRng::new(505);
    let ng = 8;
    let gids: Vec<u64> = (0..ng).map(|g| (g % 4) as u64).collect(); // 2 relevant per id
    let nq = 400;
    let qids: Vec<u64> = (0..nq).map(|q| (q % 4) as u64).collect();
    let dists: Vec<Vec<f64>> = (0..nq)
        .map(|_| (0..ng).map(|_| rng.uniform(0.0, 1.0)).collect())
        .collect();
    let ranking = rank_gallery(&dists, &qids, &gids, &vec![0; nq], &vec![0; ng], false).unwrap();
    let rep = cmc_and_map(&ranking, &[1, 5, 10]);
    let exact = exact_random_ap(ng, 2);
    assert!(
        (rep.map - exact).abs() < 0.05,
        "random mAP {} vs expectation {exact}",
        rep.map
    );
}
