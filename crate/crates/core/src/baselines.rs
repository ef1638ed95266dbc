//! Embedding-neighbor sememe recommender and the weighted-addition ensemble.

use std::collections::{BTreeSet, HashMap};

use rayon::prelude::*;

use crate::embeddings::EmbeddingTable;
use crate::error::{Error, Result};
use crate::evaluation::ScoreDump;
use crate::lexicon::LexEntry;

pub const DEFAULT_DECAY: f64 = 0.8;
pub const DEFAULT_NEIGHBORS: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Neighbor {
    /// Index into the index's training words.
    pub train: usize,
    pub similarity: f64,
}

/// Top-N training neighbors (by cosine) of each query word.
#[derive(Clone, Debug)]
pub struct NeighborIndex {
    pub n: usize,
    pub train_words: Vec<String>,
    pub train_sememes: Vec<BTreeSet<usize>>,
    neighbors: HashMap<String, Vec<Neighbor>>,
}

fn unit(v: &[f64]) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        return vec![0.0; v.len()];
    }
    v.iter().map(|x| x / norm).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl NeighborIndex {
    /// Indexes `queries` against the embedded words of `train`; queries
    /// without an embedding are left out (and later scored as zero).
    pub fn build(train: &[&LexEntry], table: &EmbeddingTable, queries: &[&str], n: usize) -> Self {
        let kept: Vec<(&LexEntry, Vec<f64>)> = train
            .iter()
            .filter_map(|e| table.get(&e.word).map(|v| (*e, unit(v))))
            .collect();
        let neighbors = queries
            .par_iter()
            .filter_map(|&q| {
                let qv = unit(table.get(q)?);
                let mut sims: Vec<Neighbor> = kept
                    .iter()
                    .enumerate()
                    .map(|(i, (_, v))| Neighbor {
                        train: i,
                        similarity: dot(&qv, v),
                    })
                    .collect();
                sims.sort_by(|a, b| b.similarity.total_cmp(&a.similarity).then(a.train.cmp(&b.train)));
                sims.truncate(n);
                Some((q.to_string(), sims))
            })
            .collect();
        NeighborIndex {
            n,
            train_words: kept.iter().map(|(e, _)| e.word.clone()).collect(),
            train_sememes: kept.iter().map(|(e, _)| e.sememes.clone()).collect(),
            neighbors,
        }
    }

    pub fn neighbors(&self, word: &str) -> Option<&[Neighbor]> {
        self.neighbors.get(word).map(Vec::as_slice)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpweScore {
    pub scores: Vec<f64>,
    /// `false` when the word had no embedding and the scores are all zero.
    pub has_embedding: bool,
}

/// `score(s) = Σ_r cos(w, w_r) · [s ∈ S(w_r)] · c^r` over the ranked neighbors.
pub fn spwe_score(word: &str, index: &NeighborIndex, num_sememes: usize, decay: f64) -> SpweScore {
    let mut scores = vec![0.0; num_sememes];
    let Some(neighbors) = index.neighbors(word) else {
        return SpweScore {
            scores,
            has_embedding: false,
        };
    };
    let mut weight = 1.0;
    for nb in neighbors {
        weight *= decay;
        for &s in &index.train_sememes[nb.train] {
            scores[s] += nb.similarity * weight;
        }
    }
    SpweScore {
        scores,
        has_embedding: true,
    }
}

/// Zero mean, unit (population) variance; a constant vector maps to zeros.
pub fn standardize(x: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    if var.is_nan() || var <= 0.0 {
        log::warn!("zero-variance score vector standardized to zeros");
        return vec![0.0; x.len()];
    }
    let sd = var.sqrt();
    x.iter().map(|v| (v - mean) / sd).collect()
}

/// `λ_a·norm(x_a) + λ_b·norm(x_b)`; `norm` is the identity when `raw`.
pub fn ensemble_score(x_a: &[f64], x_b: &[f64], lambda_a: f64, lambda_b: f64, raw: bool) -> Result<Vec<f64>> {
    if x_a.len() != x_b.len() {
        return Err(Error::shape(
            "ensemble",
            format!("lengths {} and {}", x_a.len(), x_b.len()),
        ));
    }
    if !lambda_a.is_finite() || !lambda_b.is_finite() {
        return Err(Error::Config("ensemble weights must be finite".into()));
    }
    let (a, b) = if raw {
        (x_a.to_vec(), x_b.to_vec())
    } else {
        (standardize(x_a), standardize(x_b))
    };
    Ok(a.iter().zip(&b).map(|(p, q)| lambda_a * p + lambda_b * q).collect())
}

/// Combines two dumps over the same words and sememes (in `a`'s word order).
pub fn ensemble_dumps(a: &ScoreDump, b: &ScoreDump, lambda_a: f64, lambda_b: f64, raw: bool) -> Result<ScoreDump> {
    if a.sememes != b.sememes {
        return Err(Error::shape("ensemble", "score dumps list different sememes"));
    }
    let pos: HashMap<&str, usize> = b.words.iter().enumerate().map(|(i, w)| (w.as_str(), i)).collect();
    if a.words.len() != b.words.len() {
        return Err(Error::shape("ensemble", "score dumps cover different words"));
    }
    let scores = a
        .words
        .iter()
        .zip(&a.scores)
        .map(|(w, xa)| {
            let i = pos
                .get(w.as_str())
                .ok_or_else(|| Error::shape("ensemble", format!("word `{w}` missing from the second dump")))?;
            ensemble_score(xa, &b.scores[*i], lambda_a, lambda_b, raw)
        })
        .collect::<Result<_>>()?;
    Ok(ScoreDump {
        sememes: a.sememes.clone(),
        words: a.words.clone(),
        scores,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluation::rank;

    fn entry(word: &str, sememes: &[usize]) -> LexEntry {
        LexEntry {
            word: word.into(),
            sememes: sememes.iter().copied().collect(),
            definition: vec![],
            frequency: 0,
            has_embedding: true,
        }
    }

    fn setup() -> (Vec<LexEntry>, EmbeddingTable) {
        let entries = vec![
            entry("a", &[0]),
            entry("b", &[1]),
            entry("c", &[0, 2]),
            entry("d", &[2]),
            entry("e", &[1, 2]),
        ];
        let table = EmbeddingTable::from_pairs(vec![
            ("a".to_string(), vec![1.0, 0.0, 0.2]),
            ("b".to_string(), vec![0.1, 1.0, 0.0]),
            ("c".to_string(), vec![0.9, 0.3, 0.1]),
            ("d".to_string(), vec![0.2, 0.2, 1.0]),
            ("e".to_string(), vec![0.5, 0.5, 0.5]),
            ("q".to_string(), vec![0.7, 0.4, 0.3]),
        ])
        .unwrap();
        (entries, table)
    }

    fn cos(a: &[f64], b: &[f64]) -> f64 {
        let n = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (n(a) * n(b))
    }

    #[test]
    fn brute_force_sum() {
        let (entries, table) = setup();
        let refs: Vec<&LexEntry> = entries.iter().collect();
        let index = NeighborIndex::build(&refs, &table, &["q"], 100);
        let got = spwe_score("q", &index, 3, 0.8);
        // independent: sort all pairs by cosine, then sum
        let q = table.get("q").unwrap();
        let mut sims: Vec<(f64, &LexEntry)> = entries
            .iter()
            .map(|e| (cos(q, table.get(&e.word).unwrap()), e))
            .collect();
        sims.sort_by(|x, y| y.0.partial_cmp(&x.0).unwrap());
        let mut want = [0.0; 3];
        for (r, (c, e)) in sims.iter().enumerate() {
            for &s in &e.sememes {
                want[s] += c * 0.8f64.powi(r as i32 + 1);
            }
        }
        for (g, w) in got.scores.iter().zip(&want) {
            assert!((g - w).abs() < 1e-12);
        }
        assert!(got.has_embedding);
    }

    #[test]
    fn single_neighbor_and_self() {
        let (entries, table) = setup();
        let refs: Vec<&LexEntry> = entries.iter().collect();
        let index = NeighborIndex::build(&refs, &table, &["a", "q"], 1);
        let own = spwe_score("a", &index, 3, 0.8);
        assert!((own.scores[0] - 0.8).abs() < 1e-12);
        assert_eq!((own.scores[1], own.scores[2]), (0.0, 0.0));
        let q = spwe_score("q", &index, 3, 0.8);
        let nb = index.neighbors("q").unwrap()[0];
        let c = cos(
            table.get("q").unwrap(),
            table.get(&index.train_words[nb.train]).unwrap(),
        );
        let nonzero: Vec<f64> = q.scores.iter().copied().filter(|&v| v != 0.0).collect();
        assert!(nonzero.iter().all(|v| (v - c * 0.8).abs() < 1e-12));
    }

    #[test]
    fn oov_flagged_zero() {
        let (entries, table) = setup();
        let refs: Vec<&LexEntry> = entries.iter().collect();
        let index = NeighborIndex::build(&refs, &table, &["zzz"], 5);
        let s = spwe_score("zzz", &index, 3, 0.8);
        assert!(!s.has_embedding);
        assert_eq!(s.scores, vec![0.0; 3]);
    }

    #[test]
    fn scaling_invariance() {
        let (entries, table) = setup();
        let refs: Vec<&LexEntry> = entries.iter().collect();
        let a = spwe_score("q", &NeighborIndex::build(&refs, &table, &["q"], 3), 3, 0.8);
        let scaled = table.scaled(3.0);
        let b = spwe_score("q", &NeighborIndex::build(&refs, &scaled, &["q"], 3), 3, 0.8);
        for (x, y) in a.scores.iter().zip(&b.scores) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn ensemble_hand_values() {
        let a = [1.0, 2.0, 3.0];
        let b = [0.0, 0.0, 3.0];
        let got = ensemble_score(&a, &b, 1.0, 10.0, false).unwrap();
        let sa = (2.0f64 / 3.0).sqrt();
        let sb = 2.0f64.sqrt();
        let want = [
            -1.0 / sa + 10.0 * (-1.0 / sb),
            0.0 + 10.0 * (-1.0 / sb),
            1.0 / sa + 10.0 * (2.0 / sb),
        ];
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-12);
        }
        assert_eq!(ensemble_score(&a, &b, 1.0, 1.0, true).unwrap(), vec![1.0, 2.0, 6.0]);
        assert_eq!(standardize(&[4.0, 4.0]), vec![0.0, 0.0]);
        assert!(ensemble_score(&a, &b[..2], 1.0, 1.0, false).is_err());
    }

    #[test]
    fn ensemble_ranking_contracts() {
        let a = [0.3, -1.0, 2.5, 0.3, 7.0];
        let b = [9.0, 1.0, -4.0, 0.0, 2.0];
        assert_eq!(rank(&ensemble_score(&a, &b, 1.0, 0.0, false).unwrap()), rank(&a));
        assert_eq!(rank(&ensemble_score(&a, &a, 1.0, 10.0, false).unwrap()), rank(&a));
    }

    #[test]
    fn dumps_align_by_word() {
        let a = ScoreDump {
            sememes: vec!["x".into(), "y".into()],
            words: vec!["p".into(), "q".into()],
            scores: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
        };
        let mut b = a.clone();
        b.words.reverse();
        b.scores.reverse();
        let e = ensemble_dumps(&a, &b, 1.0, 1.0, true).unwrap();
        assert_eq!(e.scores, vec![vec![2.0, 0.0], vec![0.0, 2.0]]);
        b.sememes.reverse();
        assert!(ensemble_dumps(&a, &b, 1.0, 1.0, true).is_err());
    }
}
