//! Sememe knowledge base and dictionary ingestion, inventory construction
//! and dataset splitting.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::embeddings::EmbeddingTable;
use crate::error::{Error, Result};

/// One annotated word of the sememe KB.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KbRecord {
    pub word: String,
    pub sememes: BTreeSet<String>,
}

pub(crate) fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn source_name(path: &Path) -> String {
    path.display().to_string()
}

/// Splits `word TAB rest`, rejecting lines without a tab or with an empty word.
fn split_tab<'a>(src: &str, lineno: usize, line: &'a str) -> Result<(&'a str, &'a str)> {
    let (word, rest) = line
        .split_once('\t')
        .ok_or_else(|| Error::parse(src, lineno, "missing TAB separator"))?;
    if word.trim().is_empty() {
        return Err(Error::parse(src, lineno, "empty word"));
    }
    Ok((word.trim(), rest))
}

fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r')))
        .filter(|(_, l)| !l.trim().is_empty())
}

pub fn load_kb(path: &Path) -> Result<Vec<KbRecord>> {
    parse_kb(&read_text(path)?, &source_name(path))
}

/// Parses `word TAB sememe1,sememe2,...` lines; repeated words are merged.
pub fn parse_kb(text: &str, src: &str) -> Result<Vec<KbRecord>> {
    let mut records: Vec<KbRecord> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    for (lineno, line) in content_lines(text) {
        let (word, rest) = split_tab(src, lineno, line)?;
        let sememes: BTreeSet<String> = rest
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(str::to_string)
            .collect();
        if sememes.is_empty() {
            return Err(Error::parse(src, lineno, "empty sememe list"));
        }
        match index.get(word) {
            Some(&i) => records[i].sememes.extend(sememes),
            None => {
                index.insert(word.to_string(), records.len());
                records.push(KbRecord {
                    word: word.to_string(),
                    sememes,
                });
            }
        }
    }
    Ok(records)
}

pub fn load_definitions(path: &Path) -> Result<HashMap<String, Vec<String>>> {
    parse_definitions(&read_text(path)?, &source_name(path))
}

/// Parses `word TAB tok1 tok2 ...`; multiple lines for a word concatenate in file order.
pub fn parse_definitions(text: &str, src: &str) -> Result<HashMap<String, Vec<String>>> {
    let mut defs: HashMap<String, Vec<String>> = HashMap::new();
    for (lineno, line) in content_lines(text) {
        let (word, rest) = split_tab(src, lineno, line)?;
        let tokens: Vec<String> = rest.split_whitespace().map(str::to_string).collect();
        if tokens.is_empty() {
            return Err(Error::parse(src, lineno, "empty definition"));
        }
        defs.entry(word.to_string()).or_default().extend(tokens);
    }
    Ok(defs)
}

pub fn load_frequencies(path: &Path) -> Result<HashMap<String, u64>> {
    parse_frequencies(&read_text(path)?, &source_name(path))
}

/// Parses `word TAB count`. Later lines override earlier ones.
pub fn parse_frequencies(text: &str, src: &str) -> Result<HashMap<String, u64>> {
    let mut freq = HashMap::new();
    for (lineno, line) in content_lines(text) {
        let (word, rest) = split_tab(src, lineno, line)?;
        let count: u64 = rest
            .trim()
            .parse()
            .map_err(|_| Error::parse(src, lineno, format!("bad count `{}`", rest.trim())))?;
        freq.insert(word.to_string(), count);
    }
    Ok(freq)
}

/// The closed set of sememe labels, ids assigned by descending count then name.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SememeInventory {
    names: Vec<String>,
    ids: HashMap<String, usize>,
    counts: Vec<usize>,
}

impl SememeInventory {
    /// Builds an inventory from `(name, count)` pairs already in id order.
    pub fn from_ordered(pairs: Vec<(String, usize)>) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::EmptyInventory(0));
        }
        let mut ids = HashMap::with_capacity(pairs.len());
        let mut names = Vec::with_capacity(pairs.len());
        let mut counts = Vec::with_capacity(pairs.len());
        for (i, (name, count)) in pairs.into_iter().enumerate() {
            if ids.insert(name.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate sememe `{name}` in inventory")));
            }
            names.push(name);
            counts.push(count);
        }
        Ok(SememeInventory { names, ids, counts })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.ids.get(name).copied()
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn count(&self, id: usize) -> usize {
        self.counts[id]
    }

    /// Maps a sememe name set onto inventory ids, dropping unknown names.
    pub fn ids_of<'a>(&self, names: impl IntoIterator<Item = &'a String>) -> BTreeSet<usize> {
        names.into_iter().filter_map(|n| self.id(n)).collect()
    }

    /// `name TAB count` per line, in id order.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (n, c) in self.names.iter().zip(&self.counts) {
            out.push_str(&format!("{n}\t{c}\n"));
        }
        out
    }

    pub fn parse_tsv(text: &str, src: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (lineno, line) in content_lines(text) {
            let (name, rest) = split_tab(src, lineno, line)?;
            let count = rest
                .trim()
                .parse()
                .map_err(|_| Error::parse(src, lineno, "bad sememe count"))?;
            pairs.push((name.to_string(), count));
        }
        if pairs.is_empty() {
            return Err(Error::parse(src, 0, "empty inventory file"));
        }
        Self::from_ordered(pairs)
    }
}

pub fn build_inventory(records: &[KbRecord], min_count: usize) -> Result<SememeInventory> {
    if records.is_empty() {
        return Err(Error::EmptyDataset("no KB records".into()));
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for r in records {
        for s in &r.sememes {
            *counts.entry(s.as_str()).or_default() += 1;
        }
    }
    let mut kept: Vec<(String, usize)> = counts
        .into_iter()
        .filter(|&(_, c)| c >= min_count)
        .map(|(s, c)| (s.to_string(), c))
        .collect();
    if kept.is_empty() {
        return Err(Error::EmptyInventory(min_count));
    }
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    SememeInventory::from_ordered(kept)
}

/// Word → inventory sememe ids, for every KB word (used by +SE retrofitting).
pub fn sememe_lookup(records: &[KbRecord], inventory: &SememeInventory) -> HashMap<String, Vec<usize>> {
    records
        .iter()
        .filter_map(|r| {
            let ids: Vec<usize> = inventory.ids_of(&r.sememes).into_iter().collect();
            (!ids.is_empty()).then(|| (r.word.clone(), ids))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LexEntry {
    pub word: String,
    pub sememes: BTreeSet<usize>,
    pub definition: Vec<String>,
    pub frequency: u64,
    pub has_embedding: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::Config(format!("unknown split `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub entries: Vec<LexEntry>,
    pub inventory: SememeInventory,
    /// One tag per entry; empty until [`split_dataset`] or [`Dataset::apply_fold`].
    pub splits: Vec<Split>,
    /// Fold index per entry when k-fold mode was used.
    pub folds: Option<Vec<usize>>,
}

impl Dataset {
    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.entries.len())
            .filter(|&i| self.splits.get(i) == Some(&split))
            .collect()
    }

    pub fn entries_in(&self, split: Split) -> Vec<&LexEntry> {
        self.indices(split).into_iter().map(|i| &self.entries[i]).collect()
    }

    /// Uses fold `test_fold` as test, the following fold as validation, the rest as training.
    pub fn apply_fold(&mut self, test_fold: usize) -> Result<()> {
        let folds = self
            .folds
            .as_ref()
            .ok_or_else(|| Error::Config("dataset has no folds".into()))?;
        let k = folds.iter().max().map_or(0, |m| m + 1);
        if test_fold >= k {
            return Err(Error::Config(format!("fold {test_fold} out of range for {k} folds")));
        }
        let val_fold = (test_fold + 1) % k;
        self.splits = folds
            .iter()
            .map(|&f| match f {
                f if f == test_fold => Split::Test,
                f if f == val_fold && k > 1 => Split::Val,
                _ => Split::Train,
            })
            .collect();
        Ok(())
    }

    /// `word TAB split TAB fold` per entry; fold is `-` when absent.
    pub fn manifest(&self) -> String {
        let mut out = String::new();
        for (i, e) in self.entries.iter().enumerate() {
            let split = self.splits.get(i).map_or("-", |s| s.as_str());
            let fold = self
                .folds
                .as_ref()
                .map_or_else(|| "-".to_string(), |f| f[i].to_string());
            out.push_str(&format!("{}\t{split}\t{fold}\n", e.word));
        }
        out
    }

    /// Restricts and re-tags entries according to a parsed manifest.
    pub fn apply_manifest(&mut self, manifest: &[ManifestRow]) -> Result<()> {
        let by_word: HashMap<&str, usize> = self
            .entries
            .iter()
            .enumerate()
            .map(|(i, e)| (e.word.as_str(), i))
            .collect();
        let mut entries = Vec::with_capacity(manifest.len());
        let mut splits = Vec::with_capacity(manifest.len());
        let mut folds = Vec::with_capacity(manifest.len());
        for row in manifest {
            let &i = by_word
                .get(row.word.as_str())
                .ok_or_else(|| Error::Config(format!("manifest word `{}` is not in the dataset", row.word)))?;
            entries.push(self.entries[i].clone());
            splits.push(
                row.split
                    .ok_or_else(|| Error::Config(format!("manifest word `{}` has no split", row.word)))?,
            );
            folds.push(row.fold);
        }
        self.entries = entries;
        self.splits = splits;
        self.folds = if folds.iter().all(Option::is_some) {
            Some(folds.into_iter().flatten().collect())
        } else {
            None
        };
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestRow {
    pub word: String,
    pub split: Option<Split>,
    pub fold: Option<usize>,
}

pub fn parse_manifest(text: &str, src: &str) -> Result<Vec<ManifestRow>> {
    let mut rows = Vec::new();
    for (lineno, line) in content_lines(text) {
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 || fields[0].is_empty() {
            return Err(Error::parse(src, lineno, "expected `word TAB split TAB fold`"));
        }
        let split = match fields[1] {
            "-" => None,
            s => Some(
                s.parse()
                    .map_err(|_| Error::parse(src, lineno, format!("bad split `{s}`")))?,
            ),
        };
        let fold = match fields[2] {
            "-" => None,
            f => Some(
                f.parse()
                    .map_err(|_| Error::parse(src, lineno, format!("bad fold `{f}`")))?,
            ),
        };
        rows.push(ManifestRow {
            word: fields[0].to_string(),
            split,
            fold,
        });
    }
    Ok(rows)
}

/// Intersects KB annotations with definitions (and embeddings when required).
pub fn assemble_dataset(
    kb: &[KbRecord],
    defs: &HashMap<String, Vec<String>>,
    embeddings: Option<&EmbeddingTable>,
    frequencies: &HashMap<String, u64>,
    inventory: &SememeInventory,
    require_embedding: bool,
) -> Result<Dataset> {
    let mut entries = Vec::new();
    for r in kb {
        let Some(definition) = defs.get(&r.word) else { continue };
        let has_embedding = embeddings.is_some_and(|t| t.contains(&r.word));
        if require_embedding && !has_embedding {
            continue;
        }
        let sememes = inventory.ids_of(&r.sememes);
        if sememes.is_empty() {
            continue;
        }
        entries.push(LexEntry {
            word: r.word.clone(),
            sememes,
            definition: definition.clone(),
            frequency: frequencies.get(&r.word).copied().unwrap_or(0),
            has_embedding,
        });
    }
    if entries.is_empty() {
        return Err(Error::EmptyDataset(
            "no word has a KB annotation, a definition and (if required) an embedding".into(),
        ));
    }
    Ok(Dataset {
        entries,
        inventory: inventory.clone(),
        splits: Vec::new(),
        folds: None,
    })
}

/// Largest-remainder apportionment of `n` items over `ratios`.
fn apportion(n: usize, ratios: &[usize]) -> Vec<usize> {
    let total: usize = ratios.iter().sum();
    let mut sizes: Vec<usize> = ratios.iter().map(|r| n * r / total).collect();
    let mut rem: Vec<(usize, usize)> = ratios.iter().enumerate().map(|(i, r)| (n * r % total, i)).collect();
    rem.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let short = n - sizes.iter().sum::<usize>();
    for &(_, i) in rem.iter().take(short) {
        sizes[i] += 1;
    }
    sizes
}

fn shuffled_indices(n: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx
}

/// Random train/val/test tagging with sizes proportional to `ratios`.
pub fn split_dataset(mut dataset: Dataset, seed: u64, ratios: [usize; 3]) -> Result<Dataset> {
    let n = dataset.entries.len();
    let parts = ratios.iter().filter(|&&r| r > 0).count();
    if n < parts || ratios.iter().sum::<usize>() == 0 {
        return Err(Error::TooFewEntries { entries: n, parts });
    }
    let sizes = apportion(n, &ratios);
    let order = shuffled_indices(n, seed);
    let mut splits = vec![Split::Train; n];
    for (pos, &i) in order.iter().enumerate() {
        splits[i] = if pos < sizes[0] {
            Split::Train
        } else if pos < sizes[0] + sizes[1] {
            Split::Val
        } else {
            Split::Test
        };
    }
    dataset.splits = splits;
    dataset.folds = None;
    Ok(dataset)
}

/// Assigns every entry to one of `k` folds of near-equal size, then tags fold 0 as test.
pub fn kfold_dataset(mut dataset: Dataset, seed: u64, k: usize) -> Result<Dataset> {
    let n = dataset.entries.len();
    if k == 0 || n < k {
        return Err(Error::TooFewEntries { entries: n, parts: k });
    }
    let order = shuffled_indices(n, seed);
    let mut folds = vec![0; n];
    for (pos, &i) in order.iter().enumerate() {
        folds[i] = pos % k;
    }
    dataset.folds = Some(folds);
    dataset.apply_fold(0)?;
    Ok(dataset)
}
