//! Disparity-weighted sampling frequencies.

mod common;

use ccd_core::model::RankingList;
use ccd_core::proxies::{disparity, sample_by_disparity, weighted_sample_without_replacement, SamplingParams, Source};
use common::rng;
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const DRAWS: usize = 10_000;

fn list(user: usize, items: Vec<usize>, source: &str) -> RankingList {
    RankingList {
        user,
        items,
        source: source.into(),
    }
}

#[test]
fn single_draw_frequencies_follow_disparity_weights() {
    let mut setup = rng(11);
    for (case, epsilon) in [0.05, 0.2, 0.5].into_iter().enumerate() {
        let top_n = 10;
        let mut b_items: Vec<usize> = (0..40).collect();
        b_items.shuffle(&mut setup);
        b_items.truncate(top_n);
        // A shares part of B's list in a different order; the rest of A is
        // filled with items B does not rank.
        let mut a_items: Vec<usize> = b_items.iter().copied().filter(|_| setup.random_bool(0.6)).collect();
        a_items.extend(100..100 + (top_n - a_items.len()));
        a_items.shuffle(&mut setup);
        let a = list(0, a_items.clone(), "student");
        let b = list(0, b_items.clone(), "proxy");

        let weights: Vec<f64> = b_items
            .iter()
            .enumerate()
            .map(|(rb, i)| {
                let ra = a_items.iter().position(|x| x == i).unwrap_or(top_n);
                (epsilon * (ra as f64 - rb as f64)).exp()
            })
            .collect();
        let total: f64 = weights.iter().sum();
        let params = SamplingParams {
            n_samples: 1,
            top_n,
            epsilon,
        };
        let scores = vec![0.0; top_n];
        let mut counts = vec![0usize; top_n];
        let mut r = ChaCha8Rng::seed_from_u64(1_000 + case as u64);
        for _ in 0..DRAWS {
            let s = sample_by_disparity(&a, &b, &scores, Source::Plasticity, &params, &mut r);
            assert_eq!(s.len(), 1);
            counts[b_items.iter().position(|&i| i == s[0].item).unwrap()] += 1;
        }
        for p in 0..top_n {
            let expected = weights[p] / total;
            let observed = counts[p] as f64 / DRAWS as f64;
            let se = (expected * (1.0 - expected) / DRAWS as f64).sqrt();
            assert!(
                (observed - expected).abs() <= 3.0 * se,
                "epsilon {epsilon} position {p}: observed {observed}, expected {expected}, se {se}"
            );
        }
    }
}

#[test]
fn draws_without_replacement_match_sequential_inclusion_probabilities() {
    let weights = [1.0, 2.0, 3.0, 0.5, 4.0];
    let total: f64 = weights.iter().sum();
    // first-or-second pick probability by enumerating ordered pairs
    let mut inclusion = [0.0; 5];
    for i in 0..5 {
        for j in 0..5 {
            if i != j {
                let p = weights[i] / total * weights[j] / (total - weights[i]);
                inclusion[i] += p;
                inclusion[j] += p;
            }
        }
    }
    let mut counts = [0usize; 5];
    let mut r = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..DRAWS {
        let picked = weighted_sample_without_replacement(&weights, 2, &mut r);
        assert_eq!(picked.len(), 2);
        assert_ne!(picked[0], picked[1]);
        for p in picked {
            counts[p] += 1;
        }
    }
    for i in 0..5 {
        let observed = counts[i] as f64 / DRAWS as f64;
        let se = (inclusion[i] * (1.0 - inclusion[i]) / DRAWS as f64).sqrt();
        assert!((observed - inclusion[i]).abs() <= 3.0 * se, "item {i}: {observed} vs {}", inclusion[i]);
    }
}

#[test]
fn zero_weight_items_are_never_drawn_and_requests_are_capped() {
    let mut r = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..1_000 {
        let picked = weighted_sample_without_replacement(&[0.0, 1.0, 0.0, 2.0], 4, &mut r);
        let mut sorted = picked.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, vec![1, 3]);
    }
    assert!(weighted_sample_without_replacement(&[1.0], 0, &mut r).is_empty());
}

#[test]
fn disparity_matches_examples() {
    assert_eq!(disparity(3, 3, 0.05), 1.0);
    assert!((disparity(10, 0, 0.1) - 1f64.exp()).abs() < 1e-15);
    assert!(disparity(0, 10, 0.1) < 1.0);
}

#[test]
fn sampling_is_reproducible_under_a_seed() {
    let a = list(3, vec![4, 5, 6], "student");
    let b = list(3, vec![6, 7, 8, 4], "proxy");
    let params = SamplingParams {
        n_samples: 2,
        top_n: 4,
        epsilon: 0.3,
    };
    let scores = [1.0, 2.0, 3.0, 4.0];
    let draw = |seed| {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        sample_by_disparity(&a, &b, &scores, Source::Stability, &params, &mut r)
    };
    assert_eq!(draw(1), draw(1));
    for s in draw(2) {
        assert_eq!(s.user, 3);
        let p = b.items.iter().position(|&i| i == s.item).unwrap();
        assert_eq!(s.target_score, scores[p]);
    }
}
