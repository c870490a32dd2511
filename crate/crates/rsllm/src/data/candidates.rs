//! Seeded candidate-set sampling for the next-item protocol.

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{stable_hash, ItemCatalog, UserSequence};
use crate::error::{Error, Result};

/// The items a model must rank for one evaluation: the ground truth
/// plus seeded non-interacted distractors, uniformly shuffled.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CandidateSet {
    pub candidates: Vec<usize>,
    pub ground_truth_position: usize,
}

impl CandidateSet {
    pub fn ground_truth(&self) -> usize {
        self.candidates[self.ground_truth_position]
    }
}

/// Sample a candidate set of `size` items (ground truth included) for
/// one user and target. Distractors are drawn without replacement from
/// items absent from the user's full interaction history; the final
/// order is a uniform shuffle. Deterministic given (user_id, seed,
/// target position).
pub fn sample_candidates(
    sequence: &UserSequence,
    target: usize,
    target_pos: usize,
    catalog: &ItemCatalog,
    size: usize,
    seed: u64,
) -> Result<CandidateSet> {
    if size < 2 {
        return Err(Error::Invalid(format!("candidate size {size} is too small")));
    }
    let mut in_history = vec![false; catalog.len()];
    for &i in &sequence.items {
        in_history[i] = true;
    }
    in_history[target] = true;

    let eligible: Vec<usize> = (0..catalog.len()).filter(|&i| !in_history[i]).collect();
    if eligible.len() < size - 1 {
        return Err(Error::TooFewCandidates {
            user: sequence.user_id.clone(),
            needed: size - 1,
            available: eligible.len(),
            catalog: catalog.len(),
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(
        seed ^ stable_hash(&[sequence.user_id.as_bytes(), &target_pos.to_le_bytes()]),
    );
    let picks = rand::seq::index::sample(&mut rng, eligible.len(), size - 1);
    let mut candidates: Vec<usize> = picks.iter().map(|i| eligible[i]).collect();
    candidates.push(target);
    candidates.shuffle(&mut rng);

    let ground_truth_position = candidates.iter().position(|&c| c == target).unwrap();
    Ok(CandidateSet { candidates, ground_truth_position })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn catalog(n: usize) -> ItemCatalog {
        let mut c = ItemCatalog::new();
        for i in 0..n {
            c.insert(&format!("i{i}"), &format!("t {i}")).unwrap();
        }
        c
    }

    fn seq(user: &str, items: Vec<usize>) -> UserSequence {
        let timestamps = (0..items.len() as i64).collect();
        UserSequence { user_id: user.into(), items, timestamps }
    }

    #[test]
    fn candidate_invariants_hold_across_many_users() {
        let cat = catalog(120);
        for u in 0..1000 {
            let items: Vec<usize> = (0..8).map(|k| (u * 7 + k * 13) % 120).collect();
            let s = seq(&format!("user{u}"), items.clone());
            let target = *items.last().unwrap();
            let cs = sample_candidates(&s, target, items.len() - 1, &cat, 20, 99).unwrap();
            assert_eq!(cs.candidates.len(), 20);
            let mut sorted = cs.candidates.clone();
            sorted.sort_unstable();
            sorted.dedup();
            assert_eq!(sorted.len(), 20, "duplicates in candidate set");
            assert_eq!(cs.candidates.iter().filter(|&&c| c == target).count(), 1);
            assert_eq!(cs.ground_truth(), target);
            for &c in &cs.candidates {
                if c != target {
                    assert!(!items.contains(&c), "distractor {c} interacted by user {u}");
                }
            }
        }
    }

    #[test]
    fn same_seed_gives_identical_sets() {
        let cat = catalog(60);
        let s = seq("u", vec![0, 1, 2, 3]);
        let a = sample_candidates(&s, 3, 3, &cat, 20, 5).unwrap();
        let b = sample_candidates(&s, 3, 3, &cat, 20, 5).unwrap();
        assert_eq!(a, b);
        let c = sample_candidates(&s, 3, 3, &cat, 20, 6).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn too_small_catalog_errors_with_counts() {
        let cat = catalog(15);
        let s = seq("u", vec![0, 1, 2]);
        let err = sample_candidates(&s, 2, 2, &cat, 20, 0).unwrap_err();
        match err {
            Error::TooFewCandidates { needed, available, catalog, .. } => {
                assert_eq!(needed, 19);
                assert_eq!(available, 12);
                assert_eq!(catalog, 15);
            }
            other => panic!("unexpected error {other}"),
        }
    }
}
