//! Word-level vocabulary over catalog titles and template text, plus
//! the special tokens the prompt format needs: one dedicated item-id
//! token per catalog item and the `[DSR]` marker that announces an
//! item-id representation.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use crate::data::ItemCatalog;
use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
pub const DSR: u32 = 4;
const N_SPECIALS: u32 = 5;

#[derive(Debug, Clone)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, u32>,
    n_items: usize,
}

impl Vocabulary {
    /// Deterministic construction: specials, then one `[IID{i}]` token
    /// per catalog item in index order, then the sorted lowercased word
    /// set harvested from titles and template text (digits 0-9 always
    /// included so numeric ids can be spelled out).
    pub fn build(catalog: &ItemCatalog, template_text: &str) -> Result<Self> {
        if catalog.is_empty() {
            return Err(Error::EmptyDataset("vocabulary needs a non-empty catalog".into()));
        }
        let mut tokens: Vec<String> =
            vec!["[PAD]".into(), "[BOS]".into(), "[EOS]".into(), "[UNK]".into(), "[DSR]".into()];
        for i in 0..catalog.len() {
            tokens.push(format!("[IID{i}]"));
        }

        let mut words: BTreeSet<String> = BTreeSet::new();
        for title in catalog.titles() {
            for w in split_words(title) {
                words.insert(w);
            }
        }
        for w in split_words(template_text) {
            words.insert(w);
        }
        for d in 0..10 {
            words.insert(d.to_string());
        }
        tokens.extend(words);

        let ids = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        Ok(Self { tokens, ids, n_items: catalog.len() })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn iid(&self, item: usize) -> Result<u32> {
        if item >= self.n_items {
            return Err(Error::UnknownItem { index: item, catalog: self.n_items });
        }
        Ok(N_SPECIALS + item as u32)
    }

    /// The row range of the embedding table holding item-id tokens.
    pub fn iid_rows(&self) -> std::ops::Range<usize> {
        N_SPECIALS as usize..N_SPECIALS as usize + self.n_items
    }

    pub fn token(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    pub fn word_id(&self, word: &str) -> Option<u32> {
        self.ids.get(word).copied()
    }

    /// Word-level encoding: lowercase, split on anything that is not a
    /// letter or digit, unknown words map to `[UNK]`.
    pub fn encode_text(&self, text: &str) -> Vec<u32> {
        split_words(text)
            .into_iter()
            .map(|w| self.ids.get(&w).copied().unwrap_or(UNK))
            .collect()
    }

    /// Plain-text rendering of generated ids; specials and item-id
    /// tokens print as their bracketed names.
    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .map(|&id| self.tokens.get(id as usize).map(|s| s.as_str()).unwrap_or("[UNK]"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn save_tsv(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for (i, t) in self.tokens.iter().enumerate() {
            writeln!(out, "{t}\t{i}").unwrap();
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn load_tsv(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut tokens = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let Some((tok, id)) = line.split_once('\t') else {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: lineno + 1,
                    msg: "expected `token \\t id`".into(),
                });
            };
            let id: usize = id.parse().map_err(|_| Error::Parse {
                path: path.to_path_buf(),
                line: lineno + 1,
                msg: format!("bad id `{id}`"),
            })?;
            if id != tokens.len() {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: lineno + 1,
                    msg: format!("ids must be dense, expected {}", tokens.len()),
                });
            }
            tokens.push(tok.to_string());
        }
        let n_items = tokens.iter().filter(|t| t.starts_with("[IID")).count();
        let ids = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        Ok(Self { tokens, ids, n_items })
    }
}

fn split_words(text: &str) -> Vec<String> {
    let mut words = Vec::new();
    let mut cur = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            for c in ch.to_lowercase() {
                cur.push(c);
            }
        } else if !cur.is_empty() {
            words.push(std::mem::take(&mut cur));
        }
    }
    if !cur.is_empty() {
        words.push(cur);
    }
    words
}
