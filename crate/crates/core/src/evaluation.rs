//! Ranking metrics, threshold tuning, bucketed reports and the
//! correspondence case-study table.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use crate::embeddings::InputSequence;
use crate::error::{Error, Result};
use crate::lexicon::SememeInventory;
use crate::models::{Mode, Model};

#[derive(Clone, Debug, PartialEq)]
pub struct RankedPrediction {
    pub word: String,
    pub scores: Vec<f64>,
    /// Sememe ids by descending score, ties by ascending id.
    pub ranking: Vec<usize>,
    pub gold: BTreeSet<usize>,
}

impl RankedPrediction {
    pub fn new(word: impl Into<String>, scores: Vec<f64>, gold: BTreeSet<usize>) -> Self {
        let ranking = rank(&scores);
        RankedPrediction {
            word: word.into(),
            scores,
            ranking,
            gold,
        }
    }

    pub fn average_precision(&self) -> Result<f64> {
        average_precision(&self.ranking, &self.gold).map_err(|_| Error::EmptyGold(self.word.clone()))
    }
}

/// Sememe ids by descending score; equal scores (including `-0.0` and `0.0`)
/// keep ascending id order.
pub fn rank(scores: &[f64]) -> Vec<usize> {
    let key = |x: f64| if x == 0.0 { 0.0 } else { x };
    let mut ids: Vec<usize> = (0..scores.len()).collect();
    ids.sort_by(|&a, &b| key(scores[b]).total_cmp(&key(scores[a])).then(a.cmp(&b)));
    ids
}

/// `(1/K) Σ_k k / p_k` over the 1-based ranks `p_1 < ... < p_K` of the gold ids.
///
/// The sum is kept as an exact fraction while it fits, so the result is the
/// correctly rounded value (e.g. exactly `5.0 / 6.0` for ranks 1 and 3).
pub fn average_precision(ranking: &[usize], gold: &BTreeSet<usize>) -> Result<f64> {
    if gold.is_empty() {
        return Err(Error::EmptyGold(String::new()));
    }
    let mut hits = 0usize;
    let mut float_sum = 0.0;
    let mut exact = Some((0u128, 1u128));
    for (pos, id) in ranking.iter().enumerate() {
        if gold.contains(id) {
            hits += 1;
            float_sum += hits as f64 / (pos + 1) as f64;
            exact = exact.and_then(|(n, d)| add_fraction(n, d, hits as u128, pos as u128 + 1));
        }
    }
    if hits != gold.len() {
        return Err(Error::shape("average_precision", "gold ids missing from the ranking"));
    }
    const EXACT_LIMIT: u128 = 1 << 53;
    match exact {
        Some((n, d)) if n < EXACT_LIMIT && d.checked_mul(hits as u128).is_some_and(|dk| dk < EXACT_LIMIT) => {
            Ok(n as f64 / (d * hits as u128) as f64)
        }
        _ => Ok(float_sum / hits as f64),
    }
}

fn gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// `n/d + a/b` in lowest terms, or `None` on overflow.
fn add_fraction(n: u128, d: u128, a: u128, b: u128) -> Option<(u128, u128)> {
    let g = gcd(d, b);
    let den = (d / g).checked_mul(b)?;
    let num = n.checked_mul(b / g)?.checked_add(a.checked_mul(d / g)?)?;
    let r = gcd(num, den);
    Some((num / r, den / r))
}

pub fn map_eval(predictions: &[RankedPrediction]) -> Result<f64> {
    if predictions.is_empty() {
        return Err(Error::EmptyDataset("no predictions to evaluate".into()));
    }
    let mut total = 0.0;
    for p in predictions {
        total += p.average_precision()?;
    }
    Ok(total / predictions.len() as f64)
}

fn prf(predicted: usize, gold: usize, hits: usize) -> f64 {
    if predicted == 0 || hits == 0 {
        return 0.0;
    }
    let p = hits as f64 / predicted as f64;
    let r = hits as f64 / gold as f64;
    2.0 * p * r / (p + r)
}

/// Mean per-word F1 of `{j : x_j > δ}` against the gold set.
pub fn f1_eval(predictions: &[RankedPrediction], delta: f64) -> f64 {
    if predictions.is_empty() {
        return 0.0;
    }
    let total: f64 = predictions
        .iter()
        .map(|p| {
            let mut predicted = 0;
            let mut hits = 0;
            for (j, &s) in p.scores.iter().enumerate() {
                if s > delta {
                    predicted += 1;
                    hits += p.gold.contains(&j) as usize;
                }
            }
            prf(predicted, p.gold.len(), hits)
        })
        .sum();
    total / predictions.len() as f64
}

/// F1 over the pooled (word, sememe) decisions.
pub fn micro_f1(predictions: &[RankedPrediction], delta: f64) -> f64 {
    let (mut predicted, mut gold, mut hits) = (0, 0, 0);
    for p in predictions {
        gold += p.gold.len();
        for (j, &s) in p.scores.iter().enumerate() {
            if s > delta {
                predicted += 1;
                hits += p.gold.contains(&j) as usize;
            }
        }
    }
    prf(predicted, gold, hits)
}

pub const THRESHOLD_GRID: usize = 200;

/// Candidate thresholds: evenly spaced over `[min score, max score]`.
pub fn threshold_grid(predictions: &[RankedPrediction]) -> Vec<f64> {
    let (lo, hi) = predictions
        .iter()
        .flat_map(|p| p.scores.iter().copied())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), s| (lo.min(s), hi.max(s)));
    if !lo.is_finite() || !hi.is_finite() {
        return vec![0.0];
    }
    let step = (hi - lo) / (THRESHOLD_GRID - 1) as f64;
    (0..THRESHOLD_GRID)
        .map(|i| {
            if i == THRESHOLD_GRID - 1 {
                hi
            } else {
                lo + step * i as f64
            }
        })
        .collect()
}

/// The grid threshold maximizing mean per-word F1; ties go to the smallest.
pub fn tune_threshold(predictions: &[RankedPrediction]) -> f64 {
    let mut best = (f64::NEG_INFINITY, 0.0);
    for delta in threshold_grid(predictions) {
        let f1 = f1_eval(predictions, delta);
        if f1 > best.0 {
            best = (f1, delta);
        }
    }
    best.1
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BucketKey {
    pub frequency: u64,
    pub has_embedding: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub enum BucketScheme {
    /// Descending lower bounds; bucket `i` is `[bounds[i], bounds[i-1])`, the last is `[0, bounds[last-1])`.
    Frequency(Vec<u64>),
    Oov,
}

impl BucketScheme {
    pub fn default_frequency() -> Self {
        BucketScheme::Frequency(vec![5000, 500, 50])
    }

    fn labels(&self) -> Vec<String> {
        match self {
            BucketScheme::Oov => vec!["IV".into(), "OOV".into()],
            BucketScheme::Frequency(bounds) => {
                let mut out = Vec::with_capacity(bounds.len() + 1);
                for (i, b) in bounds.iter().enumerate() {
                    out.push(match i {
                        0 => format!(">={b}"),
                        _ => format!("{b}-{}", bounds[i - 1]),
                    });
                }
                out.push(format!("<{}", bounds.last().copied().unwrap_or(0)));
                out
            }
        }
    }

    fn assign(&self, key: BucketKey) -> usize {
        match self {
            BucketScheme::Oov => usize::from(!key.has_embedding),
            BucketScheme::Frequency(bounds) => bounds.iter().position(|&b| key.frequency >= b).unwrap_or(bounds.len()),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            BucketScheme::Oov => "oov",
            BucketScheme::Frequency(_) => "freq",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BucketRow {
    pub label: String,
    pub count: usize,
    /// `None` for an empty bucket.
    pub map: Option<f64>,
}

pub fn bucket_eval(
    predictions: &[RankedPrediction],
    keys: &[BucketKey],
    scheme: &BucketScheme,
) -> Result<Vec<BucketRow>> {
    if keys.len() != predictions.len() {
        return Err(Error::shape("bucket_eval", "one bucket key per prediction required"));
    }
    let labels = scheme.labels();
    let mut members: Vec<Vec<RankedPrediction>> = vec![Vec::new(); labels.len()];
    for (p, k) in predictions.iter().zip(keys) {
        members[scheme.assign(*k)].push(p.clone());
    }
    labels
        .into_iter()
        .zip(members)
        .map(|(label, m)| {
            Ok(BucketRow {
                label,
                count: m.len(),
                map: if m.is_empty() { None } else { Some(map_eval(&m)?) },
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub words: usize,
    pub map: f64,
    pub f1: f64,
    pub micro_f1: f64,
    pub delta: f64,
    pub buckets: Vec<(String, Vec<BucketRow>)>,
}

impl EvalReport {
    /// MAP on `test`, F1 on `test` at the threshold tuned on `val`.
    pub fn build(val: &[RankedPrediction], test: &[RankedPrediction]) -> Result<Self> {
        let delta = if val.is_empty() {
            tune_threshold(test)
        } else {
            tune_threshold(val)
        };
        Ok(EvalReport {
            words: test.len(),
            map: map_eval(test)?,
            f1: f1_eval(test, delta),
            micro_f1: micro_f1(test, delta),
            delta,
            buckets: Vec::new(),
        })
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "words      {}", self.words);
        let _ = writeln!(s, "MAP        {:.2}", 100.0 * self.map);
        let _ = writeln!(s, "F1         {:.2}", 100.0 * self.f1);
        let _ = writeln!(s, "micro-F1   {:.2}", 100.0 * self.micro_f1);
        let _ = writeln!(s, "delta      {:.6}", self.delta);
        for (scheme, rows) in &self.buckets {
            let _ = writeln!(s, "\n[{scheme}]");
            for r in rows {
                let map = r.map.map_or("absent".to_string(), |m| format!("{:.2}", 100.0 * m));
                let _ = writeln!(s, "{:<12} {:>7} {:>8}", r.label, r.count, map);
            }
        }
        s
    }

    /// `key=value` lines with full-precision numbers.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "words={}", self.words);
        let _ = writeln!(s, "map={}", self.map);
        let _ = writeln!(s, "f1={}", self.f1);
        let _ = writeln!(s, "micro_f1={}", self.micro_f1);
        let _ = writeln!(s, "delta={}", self.delta);
        for (scheme, rows) in &self.buckets {
            for r in rows {
                let _ = writeln!(s, "bucket.{scheme}.{}.count={}", r.label, r.count);
                if let Some(m) = r.map {
                    let _ = writeln!(s, "bucket.{scheme}.{}.map={m}", r.label);
                }
            }
        }
        s
    }
}

/// Full score vectors per word: `word TAB sememe TAB score`, sememes in id order.
pub fn write_score_dump(predictions: &[RankedPrediction], inventory: &SememeInventory) -> String {
    let mut s = String::new();
    for p in predictions {
        for (j, score) in p.scores.iter().enumerate() {
            let _ = writeln!(s, "{}\t{}\t{score}", p.word, inventory.name(j));
        }
    }
    s
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreDump {
    pub sememes: Vec<String>,
    pub words: Vec<String>,
    /// `scores[w][j]` aligned with `sememes`.
    pub scores: Vec<Vec<f64>>,
}

impl ScoreDump {
    /// Parses a dump; every word must list the same sememes in the same order.
    pub fn parse(text: &str, src: &str) -> Result<Self> {
        let mut words: Vec<String> = Vec::new();
        let mut rows: Vec<Vec<(String, f64)>> = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 3 || f[0].is_empty() || f[1].is_empty() {
                return Err(Error::parse(src, i + 1, "expected `word TAB sememe TAB score`"));
            }
            let score: f64 = f[2]
                .trim()
                .parse()
                .map_err(|_| Error::parse(src, i + 1, format!("bad score `{}`", f[2])))?;
            if !score.is_finite() {
                return Err(Error::parse(src, i + 1, "non-finite score"));
            }
            if words.last().map(String::as_str) != Some(f[0]) {
                if words.iter().any(|w| w == f[0]) {
                    return Err(Error::parse(src, i + 1, format!("word `{}` is not contiguous", f[0])));
                }
                words.push(f[0].to_string());
                rows.push(Vec::new());
            }
            rows.last_mut().unwrap().push((f[1].to_string(), score));
        }
        let Some(first) = rows.first() else {
            return Err(Error::parse(src, 0, "empty score dump"));
        };
        let sememes: Vec<String> = first.iter().map(|(s, _)| s.clone()).collect();
        let mut scores = Vec::with_capacity(rows.len());
        for (w, row) in words.iter().zip(&rows) {
            if row.len() != sememes.len() || row.iter().zip(&sememes).any(|((a, _), b)| a != b) {
                return Err(Error::parse(src, 0, format!("sememe list of `{w}` differs")));
            }
            scores.push(row.iter().map(|(_, v)| *v).collect());
        }
        Ok(ScoreDump { sememes, words, scores })
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::new();
        for (w, row) in self.words.iter().zip(&self.scores) {
            for (name, v) in self.sememes.iter().zip(row) {
                let _ = writeln!(s, "{w}\t{name}\t{v}");
            }
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaseRow {
    pub token: String,
    /// `(sememe name, score)` by descending score.
    pub top: Vec<(String, f64)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PooledCell {
    pub sememe: String,
    pub score: f64,
    /// Index into the token rows of the maximizing token.
    pub argmax: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaseStudy {
    pub word: String,
    pub rows: Vec<CaseRow>,
    pub pooled: Vec<PooledCell>,
}

/// Per-token top sememes from the correspondence matrix, then the pooled top sememes.
pub fn dump_correspondence(
    model: &Model,
    mode: Mode,
    word: &str,
    seq: &InputSequence,
    inventory: &SememeInventory,
    top_k: usize,
) -> Result<CaseStudy> {
    let cm = model.correspondence_matrix(seq, mode)?;
    let (s, len) = cm.scores.dims2();
    let rows = (0..len)
        .map(|i| {
            let col: Vec<f64> = (0..s).map(|j| cm.scores.get(j, i)).collect();
            CaseRow {
                token: seq.tokens[i].clone(),
                top: rank(&col)
                    .into_iter()
                    .take(top_k)
                    .map(|j| (inventory.name(j).to_string(), col[j]))
                    .collect(),
            }
        })
        .collect();
    let pooled = rank(&cm.pooled)
        .into_iter()
        .take(top_k)
        .map(|j| PooledCell {
            sememe: inventory.name(j).to_string(),
            score: cm.pooled[j],
            argmax: cm.argmax[j],
        })
        .collect();
    Ok(CaseStudy {
        word: word.to_string(),
        rows,
        pooled,
    })
}

fn display_width(s: &str) -> usize {
    s.chars()
        .map(|c| match c as u32 {
            0x1100..=0x115F
            | 0x2E80..=0xA4CF
            | 0xAC00..=0xD7A3
            | 0xF900..=0xFAFF
            | 0xFE30..=0xFE4F
            | 0xFF00..=0xFF60
            | 0xFFE0..=0xFFE6
            | 0x20000..=0x3FFFD => 2,
            _ => 1,
        })
        .sum()
}

fn pad_to(s: &str, width: usize) -> String {
    let w = display_width(s);
    format!("{s}{}", " ".repeat(width.saturating_sub(w)))
}

impl CaseStudy {
    /// Aligned text table: one row per token, then the pooled row with argmax tokens.
    pub fn render(&self) -> String {
        let mut cells: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| {
                let mut c = vec![r.token.clone()];
                c.extend(r.top.iter().map(|(s, v)| format!("{s} {v:.2}")));
                c
            })
            .collect();
        let mut pooled = vec![format!("[{}]", self.word)];
        pooled.extend(self.pooled.iter().map(|p| {
            let tok = self.rows.get(p.argmax).map_or("?", |r| r.token.as_str());
            format!("{} {:.2} <{tok}>", p.sememe, p.score)
        }));
        cells.push(pooled);
        let ncols = cells.iter().map(Vec::len).max().unwrap_or(0);
        let widths: Vec<usize> = (0..ncols)
            .map(|c| {
                cells
                    .iter()
                    .filter_map(|r| r.get(c))
                    .map(|s| display_width(s))
                    .max()
                    .unwrap_or(0)
            })
            .collect();
        let mut out = String::new();
        let sep = widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("-+-");
        for (i, row) in cells.iter().enumerate() {
            if i + 1 == cells.len() {
                out.push_str(&sep);
                out.push('\n');
            }
            let line: Vec<String> = row.iter().zip(&widths).map(|(c, w)| pad_to(c, *w)).collect();
            out.push_str(line.join(" | ").trim_end());
            out.push('\n');
        }
        out
    }
}
