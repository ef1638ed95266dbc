//! Seeded synthetic corpora where each sememe is signalled by dedicated
//! trigger tokens hidden among distractors, for trend and localization tests.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::embeddings::EmbeddingTable;
use crate::error::{Error, Result};
use crate::lexicon::{assemble_dataset, build_inventory, sememe_lookup, split_dataset, Dataset, KbRecord};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    /// Definitions contain one trigger per gold sememe; target-word vectors
    /// average the gold sememes' prototypes.
    Plain,
    /// One gold sememe per word is left out of the definition and encoded
    /// only in the target word's vector.
    TargetWord,
    /// Trigger tokens of sememe pairs (2k, 2k+1) share one vector; only the
    /// KB annotations of the trigger tokens tell them apart.
    AmbiguousTriggers,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticConfig {
    pub entries: usize,
    /// Trigger plus distractor token types.
    pub vocab: usize,
    pub sememes: usize,
    pub dim: usize,
    pub triggers_per_sememe: (usize, usize),
    pub distractors: (usize, usize),
    /// Sememes triggered in each definition.
    pub gold_per_entry: (usize, usize),
    /// Std-dev of the noise added to target-word vectors.
    pub target_noise: f64,
    pub variant: Variant,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            entries: 2000,
            vocab: 300,
            sememes: 30,
            dim: 16,
            triggers_per_sememe: (1, 3),
            distractors: (8, 20),
            gold_per_entry: (1, 3),
            target_noise: 0.3,
            variant: Variant::Plain,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticCorpus {
    pub config: SyntheticConfig,
    pub sememe_names: Vec<String>,
    /// Trigger tokens of each sememe, indexed like `sememe_names`.
    pub triggers: Vec<Vec<String>>,
    /// Target-word annotations followed by one record per trigger token.
    pub kb: Vec<KbRecord>,
    pub definitions: HashMap<String, Vec<String>>,
    /// Target words in generation order.
    pub words: Vec<String>,
    pub embeddings: EmbeddingTable,
    pub frequencies: HashMap<String, u64>,
}

fn between<R: Rng>(rng: &mut R, (lo, hi): (usize, usize)) -> usize {
    rng.random_range(lo..=hi.max(lo))
}

impl SyntheticCorpus {
    pub fn generate(config: SyntheticConfig) -> Result<Self> {
        let c = &config;
        if c.sememes == 0 || c.entries == 0 || c.dim == 0 || c.gold_per_entry.0 == 0 {
            return Err(Error::Config("synthetic sizes must be positive".into()));
        }
        if c.gold_per_entry.1 > c.sememes {
            return Err(Error::Config("more gold sememes per entry than sememes".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let gauss = |rng: &mut ChaCha8Rng, n: usize| -> Vec<f64> { (0..n).map(|_| normal.sample(rng)).collect() };

        let sememe_names: Vec<String> = (0..c.sememes).map(|s| format!("s{s:02}")).collect();
        let mut triggers: Vec<Vec<String>> = Vec::with_capacity(c.sememes);
        let mut vectors: Vec<(String, Vec<f64>)> = Vec::new();
        let mut shared: HashMap<usize, Vec<f64>> = HashMap::new();
        for s in 0..c.sememes {
            let k = between(&mut rng, c.triggers_per_sememe).max(1);
            let mut toks = Vec::with_capacity(k);
            for t in 0..k {
                let name = format!("t{s:02}_{t}");
                let v = match c.variant {
                    Variant::AmbiguousTriggers => shared
                        .entry(s / 2 * 8 + t)
                        .or_insert_with(|| gauss(&mut rng, c.dim))
                        .clone(),
                    _ => gauss(&mut rng, c.dim),
                };
                vectors.push((name.clone(), v));
                toks.push(name);
            }
            triggers.push(toks);
        }
        let n_triggers = vectors.len();
        if n_triggers >= c.vocab {
            return Err(Error::Config(format!(
                "vocabulary {} leaves no room for distractors after {n_triggers} triggers",
                c.vocab
            )));
        }
        let distractors: Vec<String> = (0..c.vocab - n_triggers).map(|i| format!("d{i:03}")).collect();
        for d in &distractors {
            vectors.push((d.clone(), gauss(&mut rng, c.dim)));
        }
        let prototypes: Vec<Vec<f64>> = (0..c.sememes).map(|_| gauss(&mut rng, c.dim)).collect();

        let mut kb = Vec::with_capacity(c.entries + n_triggers);
        let mut definitions = HashMap::with_capacity(c.entries);
        let mut frequencies = HashMap::with_capacity(c.entries);
        let mut words = Vec::with_capacity(c.entries);
        let all: Vec<usize> = (0..c.sememes).collect();
        for i in 0..c.entries {
            let word = format!("w{i:05}");
            let triggered_n = between(&mut rng, c.gold_per_entry);
            let extra = usize::from(c.variant == Variant::TargetWord && triggered_n < c.sememes);
            let chosen: Vec<usize> = all.choose_multiple(&mut rng, triggered_n + extra).copied().collect();
            let (triggered, held_out) = chosen.split_at(triggered_n);

            let n = between(&mut rng, c.distractors);
            let mut def: Vec<String> = (0..n)
                .map(|_| distractors.choose(&mut rng).expect("distractors").clone())
                .collect();
            for &s in triggered {
                let tok = triggers[s].choose(&mut rng).expect("trigger").clone();
                let at = rng.random_range(0..=def.len());
                def.insert(at, tok);
            }

            let basis: &[usize] = if held_out.is_empty() { &chosen } else { held_out };
            let mut tv = vec![0.0; c.dim];
            for &s in basis {
                for (a, b) in tv.iter_mut().zip(&prototypes[s]) {
                    *a += b / basis.len() as f64;
                }
            }
            for (a, z) in tv.iter_mut().zip(gauss(&mut rng, c.dim)) {
                *a += c.target_noise * z;
            }
            vectors.push((word.clone(), tv));

            let freq = (10f64.powf(rng.random_range(0.0..4.5))) as u64;
            frequencies.insert(word.clone(), freq);
            kb.push(KbRecord {
                word: word.clone(),
                sememes: chosen.iter().map(|&s| sememe_names[s].clone()).collect(),
            });
            definitions.insert(word.clone(), def);
            words.push(word);
        }
        for (s, toks) in triggers.iter().enumerate() {
            for t in toks {
                kb.push(KbRecord {
                    word: t.clone(),
                    sememes: BTreeSet::from([sememe_names[s].clone()]),
                });
            }
        }
        let embeddings = EmbeddingTable::from_pairs(vectors)?;
        Ok(SyntheticCorpus {
            config,
            sememe_names,
            triggers,
            kb,
            definitions,
            words,
            embeddings,
            frequencies,
        })
    }

    /// Trigger token → sememe name.
    pub fn trigger_owner(&self) -> HashMap<&str, &str> {
        self.triggers
            .iter()
            .enumerate()
            .flat_map(|(s, toks)| toks.iter().map(move |t| (t.as_str(), self.sememe_names[s].as_str())))
            .collect()
    }

    /// Inventory (min count 5), dataset over the target words, 8:1:1 split,
    /// and the KB lookup used for sememe retrofitting.
    pub fn dataset(&self, split_seed: u64) -> Result<(Dataset, HashMap<String, Vec<usize>>)> {
        let inventory = build_inventory(&self.kb, 5)?;
        let ds = assemble_dataset(
            &self.kb,
            &self.definitions,
            Some(&self.embeddings),
            &self.frequencies,
            &inventory,
            false,
        )?;
        let ds = split_dataset(ds, split_seed, [8, 1, 1])?;
        let lookup = sememe_lookup(&self.kb, &inventory);
        Ok((ds, lookup))
    }

    /// Writes `kb.tsv`, `defs.tsv`, `emb.txt` and `freq.tsv` into `dir`.
    pub fn write_files(&self, dir: &Path) -> Result<SyntheticFiles> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let files = SyntheticFiles {
            kb: dir.join("kb.tsv"),
            defs: dir.join("defs.tsv"),
            embeddings: dir.join("emb.txt"),
            freq: dir.join("freq.tsv"),
        };
        let mut kb = String::new();
        for r in &self.kb {
            let s: Vec<&str> = r.sememes.iter().map(String::as_str).collect();
            let _ = writeln!(kb, "{}\t{}", r.word, s.join(","));
        }
        let mut defs = String::new();
        let mut freq = String::new();
        for w in &self.words {
            let _ = writeln!(defs, "{w}\t{}", self.definitions[w].join(" "));
            let _ = writeln!(freq, "{w}\t{}", self.frequencies[w]);
        }
        let mut emb = format!("{} {}\n", self.embeddings.len(), self.embeddings.dim());
        for w in self.embeddings.words() {
            let v: Vec<String> = self
                .embeddings
                .get(w)
                .expect("listed")
                .iter()
                .map(f64::to_string)
                .collect();
            let _ = writeln!(emb, "{w} {}", v.join(" "));
        }
        for (path, text) in [
            (&files.kb, kb),
            (&files.defs, defs),
            (&files.embeddings, emb),
            (&files.freq, freq),
        ] {
            std::fs::write(path, text).map_err(|e| Error::io(path, e))?;
        }
        Ok(files)
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticFiles {
    pub kb: PathBuf,
    pub defs: PathBuf,
    pub embeddings: PathBuf,
    pub freq: PathBuf,
}
