//! Planted-structure synthetic datasets: first-order Markov walks over
//! a known transition matrix, with seeded pseudo-word titles. The true
//! matrix is returned so tests can compute exact oracle scores.

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{CandidateSet, Interaction, ItemCatalog, SplitPoint, UserSequence};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransitionSpec {
    /// Explicit row-stochastic matrix, row-major.
    Matrix { probabilities: Vec<Vec<f64>> },
    /// Every row puts `peak` mass on one seeded successor and spreads
    /// the rest uniformly.
    Peaked { peak: f64 },
    /// Rows drawn from a symmetric Dirichlet with this concentration.
    Concentration { alpha: f64 },
    Uniform,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub items: usize,
    pub sequences: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub transitions: TransitionSpec,
    pub title_vocab: usize,
    pub title_min_words: usize,
    pub title_max_words: usize,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.items < 2 || self.sequences == 0 {
            return Err(Error::Invalid("synthetic spec needs ≥2 items and ≥1 sequence".into()));
        }
        if self.min_len < 3 || self.max_len < self.min_len {
            return Err(Error::Invalid(format!(
                "sequence length range [{}, {}] must start at ≥3",
                self.min_len, self.max_len
            )));
        }
        if self.title_vocab == 0 || self.title_min_words == 0 || self.title_max_words < self.title_min_words {
            return Err(Error::Invalid("bad title vocabulary or length range".into()));
        }
        if let TransitionSpec::Matrix { probabilities } = &self.transitions {
            if probabilities.len() != self.items {
                return Err(Error::Invalid(format!(
                    "transition matrix has {} rows for {} items",
                    probabilities.len(),
                    self.items
                )));
            }
            for (i, row) in probabilities.iter().enumerate() {
                if row.len() != self.items {
                    return Err(Error::Invalid(format!("transition row {i} has {} entries", row.len())));
                }
                let sum: f64 = row.iter().sum();
                if (sum - 1.0).abs() > 1e-9 || row.iter().any(|&p| p < 0.0) {
                    return Err(Error::Invalid(format!("transition row {i} is not a distribution (sum {sum})")));
                }
            }
        }
        Ok(())
    }
}

pub struct SyntheticDataset {
    pub interactions: Vec<Interaction>,
    pub catalog: ItemCatalog,
    /// Row-major `items × items` transition probabilities.
    pub transitions: Vec<f64>,
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticDataset> {
    spec.validate()?;
    let n = spec.items;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let transitions = materialize_transitions(&spec.transitions, n, &mut rng);

    let words = pseudo_words(spec.title_vocab, &mut rng);
    let mut catalog = ItemCatalog::new();
    for i in 0..n {
        let k = rng.gen_range(spec.title_min_words..=spec.title_max_words);
        let mut title: Vec<&str> = Vec::with_capacity(k + 1);
        for _ in 0..k {
            title.push(&words[rng.gen_range(0..words.len())]);
        }
        // index suffix keeps titles unique per item
        let title = format!("{} {}", title.join(" "), i);
        catalog.insert(&format!("s{i}"), &title)?;
    }

    let samplers: Vec<WeightedIndex<f64>> = (0..n)
        .map(|i| WeightedIndex::new(&transitions[i * n..(i + 1) * n]).expect("stochastic row"))
        .collect();

    let mut interactions = Vec::new();
    for u in 0..spec.sequences {
        let len = rng.gen_range(spec.min_len..=spec.max_len);
        let mut item = rng.gen_range(0..n);
        for t in 0..len {
            interactions.push(Interaction {
                user_id: format!("u{u}"),
                item_id: format!("s{item}"),
                rating: Some(1.0),
                timestamp: t as i64,
            });
            item = samplers[item].sample(&mut rng);
        }
    }

    Ok(SyntheticDataset { interactions, catalog, transitions })
}

fn materialize_transitions(spec: &TransitionSpec, n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    match spec {
        TransitionSpec::Matrix { probabilities } => {
            probabilities.iter().flat_map(|r| r.iter().copied()).collect()
        }
        TransitionSpec::Peaked { peak } => {
            let rest = (1.0 - peak) / (n - 1) as f64;
            let mut m = vec![0.0; n * n];
            for i in 0..n {
                let succ = loop {
                    let s = rng.gen_range(0..n);
                    if s != i {
                        break s;
                    }
                };
                for j in 0..n {
                    m[i * n + j] = if j == succ { *peak } else { rest };
                }
                // keep self-transitions possible but cheap
                let diag = m[i * n + i];
                m[i * n + i] = diag;
            }
            m
        }
        TransitionSpec::Concentration { alpha } => {
            let gamma = rand_distr::Gamma::new(*alpha, 1.0).expect("alpha > 0");
            let mut m = vec![0.0; n * n];
            for i in 0..n {
                let mut row: Vec<f64> = (0..n).map(|_| gamma.sample(rng).max(1e-300)) .collect();
                let sum: f64 = row.iter().sum();
                for v in row.iter_mut() {
                    *v /= sum;
                }
                m[i * n..(i + 1) * n].copy_from_slice(&row);
            }
            m
        }
        TransitionSpec::Uniform => {
            let p = 1.0 / n as f64;
            vec![p; n * n]
        }
    }
}

/// Short pronounceable pseudo-words, deterministic per seed.
fn pseudo_words(count: usize, rng: &mut ChaCha8Rng) -> Vec<String> {
    const SYLLABLES: [&str; 20] = [
        "ba", "do", "ki", "lu", "mar", "ne", "pol", "qua", "rin", "sa", "tor", "vel", "wi", "xen",
        "yo", "zu", "fe", "gri", "hol", "jas",
    ];
    let mut words = Vec::with_capacity(count);
    let mut seen = std::collections::HashSet::new();
    while words.len() < count {
        let k = rng.gen_range(2..=3);
        let mut w = String::new();
        for _ in 0..k {
            w.push_str(SYLLABLES[rng.gen_range(0..SYLLABLES.len())]);
        }
        if seen.insert(w.clone()) {
            words.push(w);
        }
    }
    words
}

#[derive(Serialize, Deserialize)]
pub struct TransitionsFile {
    pub n_items: usize,
    /// Row-major probabilities.
    pub probabilities: Vec<f64>,
}

pub fn write_transitions(path: &std::path::Path, n_items: usize, transitions: &[f64]) -> Result<()> {
    let file = TransitionsFile { n_items, probabilities: transitions.to_vec() };
    std::fs::write(path, serde_json::to_string(&file)?)?;
    Ok(())
}

pub fn read_transitions(path: &std::path::Path) -> Result<TransitionsFile> {
    let text = std::fs::read_to_string(path)?;
    let file: TransitionsFile = serde_json::from_str(&text)?;
    if file.probabilities.len() != file.n_items * file.n_items {
        return Err(Error::Invalid("transitions.json: matrix size mismatch".into()));
    }
    Ok(file)
}

// ── Oracles ─────────────────────────────────────────────────────────

/// Accuracy of the Bayes predictor (argmax of the true transition row,
/// full catalog) on the given split.
pub fn bayes_full_catalog_accuracy(
    transitions: &[f64],
    n: usize,
    sequences: &[UserSequence],
    points: &[SplitPoint],
) -> f64 {
    let mut hits = 0usize;
    for p in points {
        let last = *p.history(sequences, usize::MAX).last().expect("non-empty history");
        let row = &transitions[last * n..(last + 1) * n];
        let best = argmax_tie_lowest(row);
        if best == p.target(sequences) {
            hits += 1;
        }
    }
    hits as f64 / points.len().max(1) as f64
}

/// HitRatio@1 of the Bayes predictor restricted to each candidate set.
pub fn bayes_candidate_hit_ratio(
    transitions: &[f64],
    n: usize,
    sequences: &[UserSequence],
    points: &[(SplitPoint, CandidateSet)],
) -> f64 {
    let mut hits = 0usize;
    for (p, cs) in points {
        let last = *p.history(sequences, usize::MAX).last().expect("non-empty history");
        let row = &transitions[last * n..(last + 1) * n];
        let best = cs
            .candidates
            .iter()
            .copied()
            .max_by(|&a, &b| row[a].total_cmp(&row[b]).then(b.cmp(&a)))
            .unwrap();
        if best == cs.ground_truth() {
            hits += 1;
        }
    }
    hits as f64 / points.len().max(1) as f64
}

fn argmax_tie_lowest(row: &[f64]) -> usize {
    let mut best = 0usize;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}
