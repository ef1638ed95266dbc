//! Frozen word vectors, +SE/+TW retrofitting and the OOV subword fallback.

use std::collections::HashMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::gradcore::Tensor;
use crate::lexicon::{read_text, LexEntry};

pub const SEPARATOR: &str = ":";

/// Immutable token → vector map with a fixed dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    words: Vec<String>,
    index: HashMap<String, usize>,
    data: Vec<f64>,
}

impl EmbeddingTable {
    /// Builds a table from `(token, vector)` pairs; the first occurrence of a token wins.
    pub fn from_pairs<I>(pairs: I) -> Result<Self>
    where
        I: IntoIterator<Item = (String, Vec<f64>)>,
    {
        let mut table: Option<EmbeddingTable> = None;
        for (i, (word, vec)) in pairs.into_iter().enumerate() {
            let t = table.get_or_insert_with(|| EmbeddingTable {
                dim: vec.len(),
                words: Vec::new(),
                index: HashMap::new(),
                data: Vec::new(),
            });
            t.insert(word, &vec)
                .map_err(|msg| Error::parse("embeddings", i + 1, msg))?;
        }
        table.ok_or_else(|| Error::parse("embeddings", 0, "no vectors"))
    }

    fn insert(&mut self, word: String, vec: &[f64]) -> std::result::Result<(), String> {
        if vec.len() != self.dim || self.dim == 0 {
            return Err(format!("expected {} components, got {}", self.dim, vec.len()));
        }
        if let Some(bad) = vec.iter().find(|v| !v.is_finite()) {
            return Err(format!("non-finite component {bad}"));
        }
        if self.index.contains_key(&word) {
            return Ok(());
        }
        self.index.insert(word.clone(), self.words.len());
        self.words.push(word);
        self.data.extend_from_slice(vec);
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&read_text(path)?, &path.display().to_string())
    }

    /// Parses `token v1 ... vD` lines, tolerating a leading `count dim` header.
    pub fn parse(text: &str, src: &str) -> Result<Self> {
        let mut table: Option<EmbeddingTable> = None;
        for (i, line) in text.lines().enumerate() {
            let lineno = i + 1;
            let mut fields = line.split_whitespace();
            let Some(word) = fields.next() else { continue };
            let rest: Vec<&str> = fields.collect();
            if lineno == 1 && rest.len() == 1 && word.parse::<usize>().is_ok() && rest[0].parse::<usize>().is_ok() {
                continue;
            }
            let vec = rest
                .iter()
                .map(|v| {
                    v.parse::<f64>()
                        .map_err(|_| Error::parse(src, lineno, format!("non-numeric component `{v}`")))
                })
                .collect::<Result<Vec<f64>>>()?;
            let t = table.get_or_insert_with(|| EmbeddingTable {
                dim: vec.len(),
                words: Vec::new(),
                index: HashMap::new(),
                data: Vec::new(),
            });
            t.insert(word.to_string(), &vec)
                .map_err(|msg| Error::parse(src, lineno, msg))?;
        }
        table.ok_or_else(|| Error::parse(src, 0, "no vectors"))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn get(&self, token: &str) -> Option<&[f64]> {
        self.index
            .get(token)
            .map(|&i| &self.data[i * self.dim..(i + 1) * self.dim])
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    /// A copy with every vector multiplied by `c`.
    pub fn scaled(&self, c: f64) -> Self {
        let mut t = self.clone();
        t.data.iter_mut().for_each(|v| *v *= c);
        t
    }

    /// SHA-256 over tokens and vector bits, in load order.
    pub fn fingerprint(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update((self.dim as u64).to_le_bytes());
        for (i, w) in self.words.iter().enumerate() {
            h.update((w.len() as u64).to_le_bytes());
            h.update(w.as_bytes());
            for v in &self.data[i * self.dim..(i + 1) * self.dim] {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().into()
    }
}

/// `d + mean(sememe vectors of the token)`, or `d` for unannotated tokens.
pub fn retrofit_se(
    token: &str,
    table: &EmbeddingTable,
    kb_lookup: &HashMap<String, Vec<usize>>,
    sememe_emb: &Tensor,
) -> Result<Vec<f64>> {
    let base = table
        .get(token)
        .ok_or_else(|| Error::MissingEmbedding(token.to_string()))?;
    if sememe_emb.cols() != table.dim() {
        return Err(Error::shape(
            "retrofit_se",
            format!("sememe dim {} vs word dim {}", sememe_emb.cols(), table.dim()),
        ));
    }
    Ok(add_sememe_mean(
        base,
        kb_lookup.get(token).map(Vec::as_slice),
        sememe_emb,
    ))
}

fn add_sememe_mean(base: &[f64], ids: Option<&[usize]>, sememe_emb: &Tensor) -> Vec<f64> {
    let mut out = base.to_vec();
    let Some(ids) = ids.filter(|ids| !ids.is_empty()) else {
        return out;
    };
    let mut mean = vec![0.0; base.len()];
    for &s in ids {
        for (m, v) in mean.iter_mut().zip(sememe_emb.row(s)) {
            *m += v;
        }
    }
    let k = ids.len() as f64;
    for (o, m) in out.iter_mut().zip(mean) {
        *o += m / k;
    }
    out
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Subwords {
    pub pieces: Vec<String>,
    /// Characters with no vector of their own, dropped from the output.
    pub skipped: Vec<char>,
}

/// Greedy left-to-right longest-prefix segmentation against the table vocabulary.
pub fn subword_split(word: &str, table: &EmbeddingTable) -> Subwords {
    let chars: Vec<(usize, char)> = word.char_indices().collect();
    let mut out = Subwords::default();
    let mut i = 0;
    while i < chars.len() {
        let start = chars[i].0;
        let matched = (i + 1..=chars.len()).rev().find(|&j| {
            let end = chars.get(j).map_or(word.len(), |c| c.0);
            table.contains(&word[start..end])
        });
        match matched {
            Some(j) => {
                let end = chars.get(j).map_or(word.len(), |c| c.0);
                out.pieces.push(word[start..end].to_string());
                i = j;
            }
            None => {
                log::warn!("subword split of `{word}`: no vector for `{}`", chars[i].1);
                out.skipped.push(chars[i].1);
                i += 1;
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenOrigin {
    Definition,
    TargetWord,
    TargetSubword,
    Separator,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct SequenceOptions {
    /// Prefix the target word (or its subwords) and a separator.
    pub tw: bool,
    /// Add mean sememe embeddings to annotated definition tokens.
    pub se: bool,
    /// Split OOV target words into subwords under `tw`.
    pub ws: bool,
}

/// Encoder input for one entry.
///
/// `vectors` hold the frozen base embeddings; the +SE term depends on the
/// trainable sememe table and is added inside the model from `sememe_groups`.
#[derive(Clone, Debug, PartialEq)]
pub struct InputSequence {
    pub tokens: Vec<String>,
    pub vectors: Vec<Vec<f64>>,
    pub origins: Vec<TokenOrigin>,
    /// Inventory sememe ids to average into each token (empty when not retrofitted).
    pub sememe_groups: Vec<Vec<usize>>,
}

impl InputSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.first().map_or(0, Vec::len)
    }

    /// Vectors with the +SE term applied against a fixed sememe table.
    pub fn retrofitted_vectors(&self, sememe_emb: &Tensor) -> Result<Vec<Vec<f64>>> {
        if sememe_emb.cols() != self.dim() {
            return Err(Error::shape(
                "retrofitted_vectors",
                format!("sememe dim {} vs word dim {}", sememe_emb.cols(), self.dim()),
            ));
        }
        Ok(self
            .vectors
            .iter()
            .zip(&self.sememe_groups)
            .map(|(v, g)| add_sememe_mean(v, Some(g), sememe_emb))
            .collect())
    }
}

pub fn build_input_sequence(
    entry: &LexEntry,
    table: &EmbeddingTable,
    opts: SequenceOptions,
    kb_lookup: &HashMap<String, Vec<usize>>,
) -> Result<InputSequence> {
    let mut seq = InputSequence {
        tokens: Vec::new(),
        vectors: Vec::new(),
        origins: Vec::new(),
        sememe_groups: Vec::new(),
    };
    let dim = table.dim();
    let push = |seq: &mut InputSequence, tok: &str, vec: Vec<f64>, origin, group| {
        seq.tokens.push(tok.to_string());
        seq.vectors.push(vec);
        seq.origins.push(origin);
        seq.sememe_groups.push(group);
    };

    if opts.tw {
        let prefix: Vec<(String, TokenOrigin)> = match table.get(&entry.word) {
            Some(_) => vec![(entry.word.clone(), TokenOrigin::TargetWord)],
            None if opts.ws => subword_split(&entry.word, table)
                .pieces
                .into_iter()
                .map(|p| (p, TokenOrigin::TargetSubword))
                .collect(),
            None => Vec::new(),
        };
        if !prefix.is_empty() {
            for (tok, origin) in prefix {
                let v = table.get(&tok).expect("prefix tokens are embedded").to_vec();
                push(&mut seq, &tok, v, origin, Vec::new());
            }
            let sep = table.get(SEPARATOR).map_or_else(|| vec![0.0; dim], <[f64]>::to_vec);
            push(&mut seq, SEPARATOR, sep, TokenOrigin::Separator, Vec::new());
        }
    }

    let mut kept_definition = 0;
    for tok in &entry.definition {
        let Some(v) = table.get(tok) else {
            log::warn!("`{}`: definition token `{tok}` has no vector, skipped", entry.word);
            continue;
        };
        let group = if opts.se {
            kb_lookup.get(tok).cloned().unwrap_or_default()
        } else {
            Vec::new()
        };
        push(&mut seq, tok, v.to_vec(), TokenOrigin::Definition, group);
        kept_definition += 1;
    }
    if kept_definition == 0 {
        return Err(Error::NoEmbeddableTokens(entry.word.clone()));
    }
    Ok(seq)
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeSet;

    use super::*;

    fn table(src: &str) -> EmbeddingTable {
        EmbeddingTable::parse(src, "t").unwrap()
    }

    #[test]
    fn loads_with_and_without_header() {
        let a = table("x 1 2 3\ny 4 5 6\n");
        assert_eq!((a.dim(), a.len()), (3, 2));
        let b = table("2 3\nx 1 2 3\ny 4 5 6\n");
        assert_eq!(a, b);
        assert_eq!(b.get("y").unwrap(), &[4.0, 5.0, 6.0]);
    }

    #[test]
    fn load_errors() {
        let err = EmbeddingTable::parse("x 1 2 3\ny 4 5\n", "t").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
        assert!(EmbeddingTable::parse("x 1 zz 3\n", "t").is_err());
        assert!(EmbeddingTable::parse("x 1 NaN\n", "t").is_err());
    }

    #[test]
    fn duplicate_tokens_keep_first() {
        let t = table("x 1 1\nx 2 2\n");
        assert_eq!(t.len(), 1);
        assert_eq!(t.get("x").unwrap(), &[1.0, 1.0]);
    }

    fn sememes(rows: &[[f64; 2]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn retrofit_examples() {
        let t = table("plain 1 1\nrich 1 1\nzero 0 0\n");
        let lookup = HashMap::from([("rich".to_string(), vec![0, 1]), ("zero".to_string(), vec![2])]);
        let s = sememes(&[[1.0, 0.0], [0.0, 1.0], [2.0, -2.0]]);
        assert_eq!(retrofit_se("plain", &t, &lookup, &s).unwrap(), vec![1.0, 1.0]);
        assert_eq!(retrofit_se("rich", &t, &lookup, &s).unwrap(), vec![1.5, 1.5]);
        assert_eq!(retrofit_se("zero", &t, &lookup, &s).unwrap(), vec![2.0, -2.0]);
    }

    #[test]
    fn retrofit_dimension_mismatch() {
        let t = table("a 1 1\n");
        let s = Tensor::from_rows(&[vec![1.0, 2.0, 3.0]]).unwrap();
        assert!(matches!(
            retrofit_se("a", &t, &HashMap::new(), &s),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn subword_examples() {
        let t = table("ab 1\na 1\nb 1\nc 1\nx 1\n");
        assert_eq!(subword_split("ab", &t).pieces, vec!["ab"]);
        assert_eq!(subword_split("abc", &t).pieces, vec!["ab", "c"]);
        let s = subword_split("xy", &t);
        assert_eq!(s.pieces, vec!["x"]);
        assert_eq!(s.skipped, vec!['y']);
        assert!(subword_split("zz", &t).pieces.is_empty());
    }

    #[test]
    fn subword_handles_multibyte() {
        let t = table("观 1\n测站 1\n");
        assert_eq!(subword_split("观测站", &t).pieces, vec!["观", "测站"]);
    }

    fn entry(word: &str, def: &[&str], has_embedding: bool) -> LexEntry {
        LexEntry {
            word: word.into(),
            sememes: BTreeSet::from([0]),
            definition: def.iter().map(|s| s.to_string()).collect(),
            frequency: 0,
            has_embedding,
        }
    }

    #[test]
    fn sequence_modes() {
        let t = table("w 1 0\na 0 1\nb 1 1\nq 2 2\nu 3 3\n");
        let none = HashMap::new();
        let tw = SequenceOptions {
            tw: true,
            se: false,
            ws: true,
        };

        let s = build_input_sequence(&entry("w", &["a", "b"], true), &t, tw, &none).unwrap();
        assert_eq!(s.tokens, vec!["w", ":", "a", "b"]);
        assert_eq!(s.vectors[1], vec![0.0, 0.0]);
        assert_eq!(
            s.origins,
            vec![
                TokenOrigin::TargetWord,
                TokenOrigin::Separator,
                TokenOrigin::Definition,
                TokenOrigin::Definition
            ]
        );

        let plain = SequenceOptions::default();
        let s = build_input_sequence(&entry("w", &["a", "b"], true), &t, plain, &none).unwrap();
        assert_eq!(s.tokens, vec!["a", "b"]);

        let s = build_input_sequence(&entry("qu", &["a", "b"], false), &t, tw, &none).unwrap();
        assert_eq!(s.tokens, vec!["q", "u", ":", "a", "b"]);
        assert_eq!(s.origins[0], TokenOrigin::TargetSubword);

        let lesion = SequenceOptions { ws: false, ..tw };
        let s = build_input_sequence(&entry("qu", &["a", "b"], false), &t, lesion, &none).unwrap();
        assert_eq!(s.tokens, vec!["a", "b"]);
    }

    #[test]
    fn separator_uses_table_vector_when_present() {
        let t = table("w 1 0\n: 7 7\na 0 1\n");
        let tw = SequenceOptions {
            tw: true,
            ..Default::default()
        };
        let s = build_input_sequence(&entry("w", &["a"], true), &t, tw, &HashMap::new()).unwrap();
        assert_eq!(s.vectors[1], vec![7.0, 7.0]);
    }

    #[test]
    fn unembedded_definition_tokens_skipped_and_empty_is_error() {
        let t = table("w 1 0\na 0 1\n");
        let tw = SequenceOptions {
            tw: true,
            ..Default::default()
        };
        let s = build_input_sequence(&entry("w", &["a", "zz"], true), &t, tw, &HashMap::new()).unwrap();
        assert_eq!(s.tokens, vec!["w", ":", "a"]);
        assert!(matches!(
            build_input_sequence(&entry("w", &["zz"], true), &t, tw, &HashMap::new()),
            Err(Error::NoEmbeddableTokens(_))
        ));
    }

    #[test]
    fn se_groups_only_on_definition_tokens() {
        let t = table("w 1 0\na 0 1\nb 1 1\n");
        let lookup = HashMap::from([("a".to_string(), vec![1]), ("w".to_string(), vec![0])]);
        let opts = SequenceOptions {
            tw: true,
            se: true,
            ws: true,
        };
        let s = build_input_sequence(&entry("w", &["a", "b"], true), &t, opts, &lookup).unwrap();
        assert_eq!(s.sememe_groups, vec![vec![], vec![], vec![1], vec![]]);
        let emb = sememes(&[[5.0, 5.0], [2.0, 0.0]]);
        let r = s.retrofitted_vectors(&emb).unwrap();
        assert_eq!(r[0], vec![1.0, 0.0]);
        assert_eq!(r[2], vec![2.0, 1.0]);
        assert_eq!(r[2], retrofit_se("a", &t, &lookup, &emb).unwrap());
    }

    #[test]
    fn fingerprint_tracks_content() {
        let a = table("x 1 2\n");
        assert_eq!(a.fingerprint(), a.clone().fingerprint());
        assert_ne!(a.fingerprint(), a.scaled(2.0).fingerprint());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn subword_pieces_are_an_ordered_subsequence(
                word in "[a-e]{1,12}",
                vocab in proptest::collection::btree_set("[a-e]{1,3}", 0..10),
            ) {
                let src: String = vocab.iter().map(|v| format!("{v} 1\n")).collect();
                let src = if src.is_empty() { "zzz 1\n".to_string() } else { src };
                let t = table(&src);
                let split = subword_split(&word, &t);
                let joined: String = split.pieces.concat();
                let mut rest = word.chars();
                for c in joined.chars() {
                    prop_assert!(rest.any(|w| w == c));
                }
                prop_assert_eq!(joined.chars().count() + split.skipped.len(), word.chars().count());
            }
        }
    }
}
