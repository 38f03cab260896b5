use forensic_raft::live::{candidate_for, expected_election_rounds, simulate_election_rounds};
use forensic_raft::NodeId;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Lexicographic successor; false once `v` is the last permutation.
fn next_permutation(v: &mut [usize]) -> bool {
    let Some(i) = (1..v.len()).rev().find(|&i| v[i - 1] < v[i]) else { return false };
    let j = (i..v.len()).rev().find(|&j| v[j] > v[i - 1]).unwrap();
    v.swap(i - 1, j);
    v[i..].reverse();
    true
}

/// Exact expected rounds as (numerator, denominator), by enumerating every
/// freshness ranking. Rounds start at node 0; rotation symmetry makes the
/// starting node irrelevant.
fn exhaustive_rounds(n: usize) -> (u64, u64) {
    let f = (n - 1) / 2;
    let mut ranks: Vec<usize> = (0..n).collect();
    let (mut total, mut count) = (0u64, 0u64);
    loop {
        total += ranks.iter().position(|&r| r <= f).unwrap() as u64 + 1;
        count += 1;
        if !next_permutation(&mut ranks) {
            return (total, count);
        }
    }
}

#[test]
fn closed_form_matches_enumeration() {
    for n in [3, 5, 7, 9] {
        let f = (n - 1) / 2;
        let (num, den) = exhaustive_rounds(n);
        assert_eq!(num * (f as u64 + 2), den * (n as u64 + 1), "n = {n}");
        assert!((expected_election_rounds(n) - num as f64 / den as f64).abs() < 1e-12);
        assert!(expected_election_rounds(n) < 2.0);
    }
    assert_eq!(expected_election_rounds(5), 1.5);
    assert!((expected_election_rounds(3) - 4.0 / 3.0).abs() < 1e-12);
}

#[test]
fn monte_carlo_is_close() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for n in [3, 5, 9] {
        let (mean, se) = simulate_election_rounds(n, 20_000, &mut rng);
        assert!((mean - expected_election_rounds(n)).abs() <= 4.0 * se, "n = {n}: {mean} ± {se}");
    }
}

#[test]
fn every_node_gets_a_turn() {
    for n in [3, 5, 7] {
        let seen: Vec<NodeId> = (1..=n as u64).map(|t| candidate_for(t, n)).collect();
        let mut sorted = seen.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), n);
    }
}
