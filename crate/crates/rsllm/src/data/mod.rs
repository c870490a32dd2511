//! Interaction logs, chronological user sequences, leave-one-out
//! splits, candidate sets, and dataset statistics.

pub mod candidates;
pub mod synthetic;

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use candidates::{sample_candidates, CandidateSet};
pub use synthetic::{generate_synthetic, SyntheticSpec, TransitionSpec};

#[derive(Debug, Clone, PartialEq)]
pub struct Interaction {
    pub user_id: String,
    pub item_id: String,
    pub rating: Option<f64>,
    pub timestamp: i64,
}

/// Item id → title with a dense, stable integer index per item.
#[derive(Debug, Clone, Default)]
pub struct ItemCatalog {
    ids: Vec<String>,
    titles: Vec<String>,
    index: HashMap<String, usize>,
}

impl ItemCatalog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, item_id: &str, title: &str) -> Result<usize> {
        if item_id.is_empty() || title.is_empty() {
            return Err(Error::Invalid(format!(
                "catalog entries need non-empty id and title (id `{item_id}`)"
            )));
        }
        if let Some(&i) = self.index.get(item_id) {
            return Ok(i);
        }
        let i = self.ids.len();
        self.ids.push(item_id.to_string());
        self.titles.push(title.to_string());
        self.index.insert(item_id.to_string(), i);
        Ok(i)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn index_of(&self, item_id: &str) -> Option<usize> {
        self.index.get(item_id).copied()
    }

    pub fn item_id(&self, index: usize) -> &str {
        &self.ids[index]
    }

    pub fn title(&self, index: usize) -> &str {
        &self.titles[index]
    }

    pub fn titles(&self) -> &[String] {
        &self.titles
    }

    /// Stable content hash (item ids and titles in index order).
    pub fn tag(&self) -> u64 {
        let mut h = Fnv::new();
        for i in 0..self.len() {
            h.write(self.ids[i].as_bytes());
            h.write(b"\t");
            h.write(self.titles[i].as_bytes());
            h.write(b"\n");
        }
        h.finish()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UserSequence {
    pub user_id: String,
    pub items: Vec<usize>,
    pub timestamps: Vec<i64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub sequences: usize,
    pub items: usize,
    pub interactions: usize,
    pub sparsity: f64,
}

/// Counts of inputs discarded during loading and sequence building.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DropReport {
    pub missing_catalog_items: usize,
    pub interactions_dropped: usize,
    pub short_users_dropped: usize,
}

/// One leave-one-out example: the target sits at `sequences[seq].items[pos]`
/// and the history is everything before it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitPoint {
    pub seq: usize,
    pub pos: usize,
}

#[derive(Debug, Clone, Default)]
pub struct Splits {
    pub train: Vec<SplitPoint>,
    pub validation: Vec<SplitPoint>,
    pub test: Vec<SplitPoint>,
}

impl SplitPoint {
    pub fn target(&self, sequences: &[UserSequence]) -> usize {
        sequences[self.seq].items[self.pos]
    }

    /// History truncated to the most recent `max_history` items.
    pub fn history<'a>(&self, sequences: &'a [UserSequence], max_history: usize) -> &'a [usize] {
        let items = &sequences[self.seq].items[..self.pos];
        let start = items.len().saturating_sub(max_history);
        &items[start..]
    }
}

// ── Loading ─────────────────────────────────────────────────────────

/// Parse `interactions.tsv` (`user \t item \t rating \t timestamp`) and
/// `catalog.tsv` (`item \t title`). The whole load fails on the first
/// malformed line; interactions for items missing from the catalog are
/// dropped and counted.
pub fn load_interactions(
    interactions_path: &Path,
    catalog_path: &Path,
) -> Result<(Vec<Interaction>, ItemCatalog, DropReport)> {
    let catalog = load_catalog(catalog_path)?;

    let text = std::fs::read_to_string(interactions_path)?;
    if text.trim().is_empty() {
        return Err(Error::EmptyDataset(interactions_path.display().to_string()));
    }

    let mut interactions = Vec::new();
    let mut report = DropReport::default();
    let mut missing: HashMap<String, ()> = HashMap::new();

    for (lineno, line) in text.lines().enumerate() {
        let lineno = lineno + 1;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(parse_err(interactions_path, lineno, format!("expected 4 tab-separated fields, got {}", fields.len())));
        }
        let (user_id, item_id, rating_s, ts_s) = (fields[0], fields[1], fields[2], fields[3]);
        if user_id.is_empty() || item_id.is_empty() {
            return Err(parse_err(interactions_path, lineno, "empty user or item id".into()));
        }
        let rating = if rating_s.is_empty() {
            None
        } else {
            Some(rating_s.parse::<f64>().map_err(|_| {
                parse_err(interactions_path, lineno, format!("bad rating `{rating_s}`"))
            })?)
        };
        let timestamp: i64 = ts_s
            .parse()
            .map_err(|_| parse_err(interactions_path, lineno, format!("bad timestamp `{ts_s}`")))?;
        if timestamp < 0 {
            return Err(parse_err(interactions_path, lineno, format!("negative timestamp {timestamp}")));
        }
        if catalog.index_of(item_id).is_none() {
            missing.insert(item_id.to_string(), ());
            report.interactions_dropped += 1;
            continue;
        }
        interactions.push(Interaction {
            user_id: user_id.to_string(),
            item_id: item_id.to_string(),
            rating,
            timestamp,
        });
    }
    report.missing_catalog_items = missing.len();

    if interactions.is_empty() {
        return Err(Error::EmptyDataset(format!(
            "{}: no usable interactions",
            interactions_path.display()
        )));
    }
    Ok((interactions, catalog, report))
}

pub fn load_catalog(path: &Path) -> Result<ItemCatalog> {
    let text = std::fs::read_to_string(path)?;
    if text.trim().is_empty() {
        return Err(Error::EmptyDataset(path.display().to_string()));
    }
    let mut catalog = ItemCatalog::new();
    for (lineno, line) in text.lines().enumerate() {
        let lineno = lineno + 1;
        if line.is_empty() {
            continue;
        }
        let Some((id, title)) = line.split_once('\t') else {
            return Err(parse_err(path, lineno, "expected `item \\t title`".into()));
        };
        if id.is_empty() || title.is_empty() {
            return Err(parse_err(path, lineno, "empty item id or title".into()));
        }
        catalog.insert(id, title)?;
    }
    Ok(catalog)
}

pub fn write_dataset(
    dir: &Path,
    interactions: &[Interaction],
    catalog: &ItemCatalog,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut cat = String::new();
    for i in 0..catalog.len() {
        writeln!(cat, "{}\t{}", catalog.item_id(i), catalog.title(i)).unwrap();
    }
    std::fs::write(dir.join("catalog.tsv"), cat)?;

    let mut log = String::new();
    for it in interactions {
        let rating = it.rating.map(|r| format!("{r}")).unwrap_or_default();
        writeln!(log, "{}\t{}\t{}\t{}", it.user_id, it.item_id, rating, it.timestamp).unwrap();
    }
    std::fs::write(dir.join("interactions.tsv"), log)?;
    Ok(())
}

// ── Sequences and splits ────────────────────────────────────────────

/// Group interactions per user in (timestamp, item index) order. Users
/// with fewer than three interactions are dropped and counted.
pub fn build_sequences(
    interactions: &[Interaction],
    catalog: &ItemCatalog,
    report: &mut DropReport,
) -> Vec<UserSequence> {
    let mut per_user: HashMap<&str, Vec<(i64, usize)>> = HashMap::new();
    let mut user_order: Vec<&str> = Vec::new();
    for it in interactions {
        let idx = catalog
            .index_of(&it.item_id)
            .expect("interactions were filtered against the catalog");
        let entry = per_user.entry(it.user_id.as_str()).or_default();
        if entry.is_empty() {
            user_order.push(it.user_id.as_str());
        }
        entry.push((it.timestamp, idx));
    }
    user_order.sort_unstable();

    let mut sequences = Vec::new();
    for user in user_order {
        let mut events = per_user.remove(user).unwrap();
        events.sort_unstable(); // (timestamp, item index) lexicographic
        if events.len() < 3 {
            report.short_users_dropped += 1;
            continue;
        }
        sequences.push(UserSequence {
            user_id: user.to_string(),
            items: events.iter().map(|&(_, i)| i).collect(),
            timestamps: events.iter().map(|&(t, _)| t).collect(),
        });
    }
    sequences
}

/// Leave-one-out: last item per user is the test target, second-to-last
/// the validation target, and every earlier position a training target.
pub fn split_leave_one_out(sequences: &[UserSequence]) -> Splits {
    let mut splits = Splits::default();
    for (s, seq) in sequences.iter().enumerate() {
        let n = seq.items.len();
        debug_assert!(n >= 3);
        for pos in 1..n - 1 {
            splits.train.push(SplitPoint { seq: s, pos });
        }
        splits.validation.push(SplitPoint { seq: s, pos: n - 2 });
        splits.test.push(SplitPoint { seq: s, pos: n - 1 });
    }
    splits
}

pub fn compute_stats(sequences: &[UserSequence], catalog: &ItemCatalog) -> DatasetStats {
    let interactions: usize = sequences.iter().map(|s| s.items.len()).sum();
    DatasetStats {
        sequences: sequences.len(),
        items: catalog.len(),
        interactions,
        sparsity: sparsity(sequences.len(), catalog.len(), interactions),
    }
}

/// `1 − interactions / (sequences × items)`.
pub fn sparsity(sequences: usize, items: usize, interactions: usize) -> f64 {
    if sequences == 0 || items == 0 {
        return 0.0;
    }
    1.0 - interactions as f64 / (sequences as f64 * items as f64)
}

/// Stable content hash of a file, hex-encoded (for run manifests).
pub fn file_sha256(path: &Path) -> Result<String> {
    use sha2::{Digest, Sha256};
    let bytes = std::fs::read(path)?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(format!("{:x}", hasher.finalize()))
}

fn parse_err(path: &Path, line: usize, msg: String) -> Error {
    Error::Parse { path: path.to_path_buf(), line, msg }
}

/// FNV-1a, used wherever a stable, build-independent hash is needed.
pub struct Fnv(u64);

impl Fnv {
    pub fn new() -> Self {
        Fnv(0xcbf29ce484222325)
    }
    pub fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(0x100000001b3);
        }
    }
    pub fn finish(&self) -> u64 {
        self.0
    }
}

impl Default for Fnv {
    fn default() -> Self {
        Self::new()
    }
}

pub fn stable_hash(parts: &[&[u8]]) -> u64 {
    let mut h = Fnv::new();
    for p in parts {
        h.write(p);
        h.write(&[0xff]);
    }
    h.finish()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mk_interaction(u: &str, i: &str, t: i64) -> Interaction {
        Interaction { user_id: u.into(), item_id: i.into(), rating: None, timestamp: t }
    }

    fn small_catalog(n: usize) -> ItemCatalog {
        let mut c = ItemCatalog::new();
        for i in 0..n {
            c.insert(&format!("i{i}"), &format!("title {i}")).unwrap();
        }
        c
    }

    #[test]
    fn sequences_sort_by_timestamp_then_item_index() {
        let catalog = small_catalog(5);
        let interactions = vec![
            mk_interaction("u", "i3", 30),
            mk_interaction("u", "i0", 10),
            mk_interaction("u", "i4", 20),
            mk_interaction("u", "i1", 20), // tie with i4, lower index wins
        ];
        let mut report = DropReport::default();
        let seqs = build_sequences(&interactions, &catalog, &mut report);
        assert_eq!(seqs.len(), 1);
        assert_eq!(seqs[0].items, vec![0, 1, 4, 3]);
    }

    #[test]
    fn short_users_are_dropped_and_counted() {
        let catalog = small_catalog(3);
        let interactions = vec![
            mk_interaction("a", "i0", 1),
            mk_interaction("a", "i1", 2),
            mk_interaction("b", "i0", 1),
            mk_interaction("b", "i1", 2),
            mk_interaction("b", "i2", 3),
        ];
        let mut report = DropReport::default();
        let seqs = build_sequences(&interactions, &catalog, &mut report);
        assert_eq!(seqs.len(), 1);
        assert_eq!(seqs[0].user_id, "b");
        assert_eq!(report.short_users_dropped, 1);
    }

    #[test]
    fn leave_one_out_matches_the_unrolled_definition() {
        let catalog = small_catalog(4);
        let interactions = (0..4).map(|k| mk_interaction("u", &format!("i{k}"), k as i64)).collect::<Vec<_>>();
        let mut report = DropReport::default();
        let seqs = build_sequences(&interactions, &catalog, &mut report);
        let splits = split_leave_one_out(&seqs);
        // [a,b,c,d]: train {([a],b), ([a,b],c)}, validation ([a,b],c), test ([a,b,c],d)
        assert_eq!(splits.train.len(), 2);
        assert_eq!(splits.train[0].history(&seqs, 10), &[0]);
        assert_eq!(splits.train[0].target(&seqs), 1);
        assert_eq!(splits.train[1].history(&seqs, 10), &[0, 1]);
        assert_eq!(splits.train[1].target(&seqs), 2);
        assert_eq!(splits.validation[0].history(&seqs, 10), &[0, 1]);
        assert_eq!(splits.validation[0].target(&seqs), 2);
        assert_eq!(splits.test[0].history(&seqs, 10), &[0, 1, 2]);
        assert_eq!(splits.test[0].target(&seqs), 3);
    }

    #[test]
    fn length_three_sequence_has_one_training_pair() {
        let catalog = small_catalog(3);
        let interactions = (0..3).map(|k| mk_interaction("u", &format!("i{k}"), k as i64)).collect::<Vec<_>>();
        let mut report = DropReport::default();
        let seqs = build_sequences(&interactions, &catalog, &mut report);
        let splits = split_leave_one_out(&seqs);
        assert_eq!(splits.train.len(), 1);
    }

    #[test]
    fn max_history_truncates_to_most_recent() {
        let catalog = small_catalog(4);
        let interactions = (0..4).map(|k| mk_interaction("u", &format!("i{k}"), k as i64)).collect::<Vec<_>>();
        let mut report = DropReport::default();
        let seqs = build_sequences(&interactions, &catalog, &mut report);
        let splits = split_leave_one_out(&seqs);
        assert_eq!(splits.test[0].history(&seqs, 2), &[1, 2]);
    }

    #[test]
    fn sparsity_reproduces_reference_rows() {
        assert!((sparsity(943, 1682, 100_000) - 0.93695).abs() < 5e-5);
        assert!((sparsity(11_938, 3_581, 274_726) - 0.994).abs() < 5e-4);
        assert!((sparsity(1_220, 4_606, 73_510) - 0.987).abs() < 5e-4);
        assert_eq!(sparsity(1, 1, 1), 0.0);
    }

    #[test]
    fn test_target_never_appears_as_training_target_at_same_prefix_length() {
        let catalog = small_catalog(6);
        let interactions = (0..6).map(|k| mk_interaction("u", &format!("i{k}"), k as i64)).collect::<Vec<_>>();
        let mut report = DropReport::default();
        let seqs = build_sequences(&interactions, &catalog, &mut report);
        let splits = split_leave_one_out(&seqs);
        let test = &splits.test[0];
        for tr in &splits.train {
            assert!(!(tr.seq == test.seq && tr.pos == test.pos));
        }
    }
}
