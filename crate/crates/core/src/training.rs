//! Batching, the one-versus-all loss, the epoch loop with validation-MAP
//! early stopping, and training checkpoints.

use std::collections::BTreeSet;
use std::fs::{File, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::checkpoint::Checkpoint;
use crate::embeddings::{build_input_sequence, EmbeddingTable, InputSequence};
use crate::error::{Error, Result};
use crate::evaluation::{f1_eval, map_eval, tune_threshold, BucketKey, RankedPrediction};
use crate::gradcore::{softplus, AdamConfig, AdamState, Gradients, Graph, ParamStore, Tensor};
use crate::lexicon::LexEntry;
use crate::models::{EncoderInput, Mode, Model, ModelConfig, OwnedInput, PARAM_NAMES};

/// Independent sub-seed for a named purpose (`"split"`, `"init"`, `"shuffle"`, `"dropout"`).
pub fn sub_seed(seed: u64, name: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn derive(seed: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(mix(seed), |acc, &p| mix(acc ^ mix(p)))
}

/// One encoded entry ready for training or evaluation.
#[derive(Clone, Debug)]
pub struct Example {
    pub word: String,
    pub seq: InputSequence,
    pub gold: BTreeSet<usize>,
    pub key: BucketKey,
}

impl Example {
    pub fn labels(&self, num_sememes: usize) -> Vec<f64> {
        (0..num_sememes)
            .map(|j| f64::from(u8::from(self.gold.contains(&j))))
            .collect()
    }
}

/// Builds the input sequence of every entry under `mode`.
pub fn prepare_examples(
    entries: &[&LexEntry],
    table: &EmbeddingTable,
    mode: Mode,
    kb_lookup: &std::collections::HashMap<String, Vec<usize>>,
) -> Result<Vec<Example>> {
    entries
        .iter()
        .map(|e| {
            Ok(Example {
                word: e.word.clone(),
                seq: build_input_sequence(e, table, mode.sequence_options(), kb_lookup)?,
                gold: e.sememes.clone(),
                key: BucketKey {
                    frequency: e.frequency,
                    has_embedding: e.has_embedding,
                },
            })
        })
        .collect()
}

/// Right-padded batch of examples.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// Indices into the example slice the batch was built from.
    pub members: Vec<usize>,
    pub max_len: usize,
    pub dim: usize,
    /// `B × max_len × dim`, zero past each length.
    pub vectors: Vec<f64>,
    pub lengths: Vec<usize>,
    /// `B × max_len`, a prefix of `true`s per row.
    pub mask: Vec<bool>,
    /// `B × |S|` binary targets.
    pub labels: Vec<f64>,
    pub num_sememes: usize,
}

impl Batch {
    pub fn assemble(examples: &[Example], members: Vec<usize>, num_sememes: usize) -> Result<Self> {
        let first = members
            .first()
            .ok_or_else(|| Error::EmptyDataset("empty batch".into()))?;
        let dim = examples[*first].seq.dim();
        let max_len = members.iter().map(|&i| examples[i].seq.len()).max().unwrap_or(0);
        let b = members.len();
        let mut vectors = vec![0.0; b * max_len * dim];
        let mut mask = vec![false; b * max_len];
        let mut labels = Vec::with_capacity(b * num_sememes);
        let mut lengths = Vec::with_capacity(b);
        for (row, &i) in members.iter().enumerate() {
            let seq = &examples[i].seq;
            if seq.dim() != dim {
                return Err(Error::shape("batch", format!("dim {} vs {dim}", seq.dim())));
            }
            for (t, v) in seq.vectors.iter().enumerate() {
                let at = (row * max_len + t) * dim;
                vectors[at..at + dim].copy_from_slice(v);
                mask[row * max_len + t] = true;
            }
            lengths.push(seq.len());
            labels.extend(examples[i].labels(num_sememes));
        }
        Ok(Batch {
            members,
            max_len,
            dim,
            vectors,
            lengths,
            mask,
            labels,
            num_sememes,
        })
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn input<'a>(&'a self, row: usize, examples: &'a [Example]) -> EncoderInput<'a> {
        let stride = self.max_len * self.dim;
        EncoderInput {
            vectors: &self.vectors[row * stride..(row + 1) * stride],
            dim: self.dim,
            len: self.lengths[row],
            max_len: self.max_len,
            sememe_groups: &examples[self.members[row]].seq.sememe_groups,
        }
    }

    pub fn labels_of(&self, row: usize) -> &[f64] {
        &self.labels[row * self.num_sememes..(row + 1) * self.num_sememes]
    }
}

/// Batch membership for one epoch: a seeded shuffle, optionally grouped by length.
pub fn batch_order(
    lengths: &[usize],
    batch_size: usize,
    seed: u64,
    epoch: usize,
    bucket_by_length: bool,
) -> Vec<Vec<usize>> {
    let batch_size = batch_size.max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(derive(seed, &[epoch as u64]));
    let mut order: Vec<usize> = (0..lengths.len()).collect();
    order.shuffle(&mut rng);
    if !bucket_by_length {
        return order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    }
    order.sort_by_key(|&i| lengths[i]);
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    batches.shuffle(&mut rng);
    batches
}

pub fn make_batches(
    examples: &[Example],
    num_sememes: usize,
    batch_size: usize,
    seed: u64,
    epoch: usize,
    bucket_by_length: bool,
) -> Result<Vec<Batch>> {
    if examples.is_empty() {
        return Err(Error::EmptyDataset("no training examples".into()));
    }
    let lengths: Vec<usize> = examples.iter().map(|e| e.seq.len()).collect();
    batch_order(&lengths, batch_size, seed, epoch, bucket_by_length)
        .into_iter()
        .map(|m| Batch::assemble(examples, m, num_sememes))
        .collect()
}

/// Mean one-versus-all cross-entropy `−(1/|S|) Σ [y log σ(x) + (1−y) log σ(−x)]`.
pub fn loss(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    x.iter()
        .zip(y)
        .map(|(&x, &y)| y * softplus(-x) + (1.0 - y) * softplus(x))
        .sum::<f64>()
        / n
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub mode: Mode,
    pub hidden: usize,
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Evaluations without validation-MAP improvement before stopping.
    pub patience: usize,
    pub dropout: f64,
    pub seed: u64,
    pub bucket_by_length: bool,
    /// Train on the loss exactly as printed (no logarithms) instead of cross-entropy.
    pub literal_loss: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: Mode::scorp(crate::models::Pooling::Max),
            hidden: 256,
            adam: AdamConfig::default(),
            batch_size: 64,
            max_epochs: 50,
            patience: 5,
            dropout: 0.5,
            seed: 0,
            bucket_by_length: false,
            literal_loss: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.hidden == 0 || self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 {
            return bad("hidden, batch_size, max_epochs and patience must be positive");
        }
        if !(self.adam.lr.is_finite() && self.adam.lr > 0.0) {
            return bad("lr must be positive and finite");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        Ok(())
    }

    /// Provenance entries echoed into checkpoints.
    pub fn metadata(&self) -> Vec<(String, String)> {
        vec![
            ("mode".into(), self.mode.to_string()),
            ("hidden".into(), self.hidden.to_string()),
            ("lr".into(), self.adam.lr.to_string()),
            ("batch_size".into(), self.batch_size.to_string()),
            ("max_epochs".into(), self.max_epochs.to_string()),
            ("patience".into(), self.patience.to_string()),
            ("dropout".into(), self.dropout.to_string()),
            ("seed".into(), self.seed.to_string()),
            ("bucket_by_length".into(), self.bucket_by_length.to_string()),
            ("literal_loss".into(), self.literal_loss.to_string()),
        ]
    }
}

/// Contiguous groups whose gradients are computed independently and then
/// summed in order, so results do not depend on the thread count.
const GRAD_CHUNKS: usize = 8;

/// One Adam step on a batch; returns the mean entry loss.
pub fn train_step(
    model: &mut Model,
    adam: &mut AdamState,
    examples: &[Example],
    batch: &Batch,
    cfg: &TrainConfig,
    step_key: (usize, usize),
) -> Result<f64> {
    let b = batch.len();
    let per_chunk = b.div_ceil(GRAD_CHUNKS).max(1);
    let rows: Vec<usize> = (0..b).collect();
    let dropout_seed = sub_seed(cfg.seed, "dropout");
    let model_ref = &*model;
    let partials: Vec<Result<(Gradients, f64)>> = rows
        .par_chunks(per_chunk)
        .map(|chunk| {
            let mut grads = Gradients::zeros_like(&model_ref.params);
            let mut total = 0.0;
            for &row in chunk {
                let key = [step_key.0 as u64, step_key.1 as u64, row as u64];
                let mut rng = ChaCha8Rng::seed_from_u64(derive(dropout_seed, &key));
                let mut g = Graph::new(&model_ref.params);
                let input = batch.input(row, examples);
                let out = model_ref.forward(&mut g, &input, cfg.mode, cfg.dropout, true, &mut rng)?;
                let l = g.bce_with_logits(out.logits, batch.labels_of(row), cfg.literal_loss)?;
                total += g.value(l).data()[0];
                let scaled = g.scale(l, 1.0 / b as f64);
                g.backward(scaled, &mut grads)?;
            }
            Ok((grads, total))
        })
        .collect();
    let mut grads = Gradients::zeros_like(&model.params);
    let mut total = 0.0;
    for p in partials {
        let (g, l) = p?;
        grads.add_scaled(&g, 1.0);
        total += l;
    }
    let mean = total / b as f64;
    if !mean.is_finite() || !grads.is_finite() {
        return Err(Error::NonFiniteLoss {
            epoch: step_key.0,
            batch: step_key.1,
        });
    }
    adam.step(&mut model.params, &mut grads)?;
    Ok(mean)
}

/// Eval-mode predictions, in example order.
pub fn predict(model: &Model, examples: &[Example], mode: Mode) -> Result<Vec<RankedPrediction>> {
    examples
        .par_iter()
        .map(|e| {
            let input = OwnedInput::from_sequence(&e.seq);
            let scores = model.score_input(&input.view(), mode)?;
            Ok(RankedPrediction::new(e.word.clone(), scores, e.gold.clone()))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_map: f64,
    pub val_f1: f64,
    /// `None` for rows restored from a checkpoint.
    pub wall_secs: Option<f64>,
}

pub const LOG_HEADER: &str = "epoch\ttrain_loss\tval_map\tval_f1\twall_secs";

impl EpochLog {
    pub fn tsv_line(&self) -> String {
        let wall = self.wall_secs.map_or("-".to_string(), |w| format!("{w:.3}"));
        format!(
            "{}\t{}\t{}\t{}\t{wall}",
            self.epoch, self.train_loss, self.val_map, self.val_f1
        )
    }

    fn deterministic_part(&self) -> String {
        format!("{}\t{}\t{}\t{}", self.epoch, self.train_loss, self.val_map, self.val_f1)
    }

    fn parse_deterministic(s: &str) -> Result<Self> {
        let f: Vec<&str> = s.split('\t').collect();
        let bad = || Error::Checkpoint(format!("bad history row {s:?}"));
        if f.len() != 4 {
            return Err(bad());
        }
        Ok(EpochLog {
            epoch: f[0].parse().map_err(|_| bad())?,
            train_loss: f[1].parse().map_err(|_| bad())?,
            val_map: f[2].parse().map_err(|_| bad())?,
            val_f1: f[3].parse().map_err(|_| bad())?,
            wall_secs: None,
        })
    }
}

/// Everything needed to continue an interrupted run.
#[derive(Clone, Debug)]
pub struct TrainerState {
    /// Completed epochs.
    pub epoch: usize,
    pub best_map: f64,
    pub best_epoch: usize,
    pub since_best: usize,
    pub best_params: Option<ParamStore>,
    pub history: Vec<EpochLog>,
    pub adam: AdamState,
}

impl TrainerState {
    pub fn fresh(model: &Model, cfg: &TrainConfig) -> Self {
        TrainerState {
            epoch: 0,
            best_map: f64::NEG_INFINITY,
            best_epoch: 0,
            since_best: 0,
            best_params: None,
            history: Vec::new(),
            adam: AdamState::new(&model.params, cfg.adam),
        }
    }
}

/// Output locations `{dir}/{run}.ckpt`, `{run}.best.ckpt`, `{run}.log.tsv`.
#[derive(Clone, Debug)]
pub struct RunPaths {
    pub dir: PathBuf,
    pub run_name: String,
}

impl RunPaths {
    pub fn new(dir: impl Into<PathBuf>, run_name: impl Into<String>) -> Self {
        RunPaths {
            dir: dir.into(),
            run_name: run_name.into(),
        }
    }

    pub fn last(&self) -> PathBuf {
        self.dir.join(format!("{}.ckpt", self.run_name))
    }

    pub fn best(&self) -> PathBuf {
        self.dir.join(format!("{}.best.ckpt", self.run_name))
    }

    pub fn log(&self) -> PathBuf {
        self.dir.join(format!("{}.log.tsv", self.run_name))
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub best_params: ParamStore,
    pub best_map: f64,
    pub best_epoch: usize,
    pub history: Vec<EpochLog>,
    pub stopped_early: bool,
    pub state: TrainerState,
}

fn open_log(path: &Path, state: &TrainerState) -> Result<File> {
    if state.epoch > 0 && path.exists() {
        return OpenOptions::new()
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e));
    }
    let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut text = format!("{LOG_HEADER}\n");
    for row in &state.history {
        text.push_str(&row.tsv_line());
        text.push('\n');
    }
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))?;
    Ok(f)
}

/// Runs epochs `state.epoch + 1 ..= cfg.max_epochs`, evaluating validation MAP
/// after each and keeping the best parameters.
///
/// With `paths`, the resumable checkpoint, best checkpoint and log are
/// written after every epoch; `metadata` is echoed into both checkpoints.
pub fn train(
    model: &mut Model,
    train_set: &[Example],
    val_set: &[Example],
    cfg: &TrainConfig,
    state: Option<TrainerState>,
    paths: Option<&RunPaths>,
    metadata: &[(String, String)],
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::EmptyDataset("training split is empty".into()));
    }
    if val_set.is_empty() {
        return Err(Error::EmptyDataset("validation split is empty".into()));
    }
    let mut state = state.unwrap_or_else(|| TrainerState::fresh(model, cfg));
    let mut log = paths.map(|p| open_log(&p.log(), &state)).transpose()?;
    let shuffle_seed = sub_seed(cfg.seed, "shuffle");
    let s = model.config.num_sememes;
    let mut stopped_early = state.since_best >= cfg.patience && state.epoch > 0;
    while !stopped_early && state.epoch < cfg.max_epochs {
        let epoch = state.epoch + 1;
        let started = Instant::now();
        let batches = make_batches(train_set, s, cfg.batch_size, shuffle_seed, epoch, cfg.bucket_by_length)?;
        let mut weighted = 0.0;
        for (bi, batch) in batches.iter().enumerate() {
            let l = train_step(model, &mut state.adam, train_set, batch, cfg, (epoch, bi))?;
            weighted += l * batch.len() as f64;
        }
        let train_loss = weighted / train_set.len() as f64;
        let preds = predict(model, val_set, cfg.mode)?;
        let val_map = map_eval(&preds)?;
        let val_f1 = f1_eval(&preds, tune_threshold(&preds));
        let row = EpochLog {
            epoch,
            train_loss,
            val_map,
            val_f1,
            wall_secs: Some(started.elapsed().as_secs_f64()),
        };
        log::info!("{}", row.tsv_line());
        state.epoch = epoch;
        if val_map > state.best_map {
            state.best_map = val_map;
            state.best_epoch = epoch;
            state.since_best = 0;
            state.best_params = Some(model.params.clone());
            if let Some(p) = paths {
                model_checkpoint(model, metadata).save(&p.best())?;
            }
        } else {
            state.since_best += 1;
        }
        if let (Some(f), Some(p)) = (log.as_mut(), paths) {
            writeln!(f, "{}", row.tsv_line()).map_err(|e| Error::io(p.log(), e))?;
        }
        state.history.push(row);
        if let Some(p) = paths {
            training_checkpoint(model, &state, metadata).save(&p.last())?;
        }
        stopped_early = state.since_best >= cfg.patience;
    }
    Ok(TrainOutcome {
        best_params: state.best_params.clone().unwrap_or_else(|| model.params.clone()),
        best_map: state.best_map,
        best_epoch: state.best_epoch,
        history: state.history.clone(),
        stopped_early,
        state,
    })
}

fn config_metadata(config: &ModelConfig) -> [(String, String); 3] {
    [
        ("model.input_dim".into(), config.input_dim.to_string()),
        ("model.hidden".into(), config.hidden.to_string()),
        ("model.num_sememes".into(), config.num_sememes.to_string()),
    ]
}

/// Parameters plus provenance; what `eval`/`predict` consume.
pub fn model_checkpoint(model: &Model, metadata: &[(String, String)]) -> Checkpoint {
    let mut c = Checkpoint::default();
    for (k, v) in config_metadata(&model.config)
        .into_iter()
        .chain(metadata.iter().cloned())
    {
        c.set_meta(k, v);
    }
    c.arrays = model.params.iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
    c
}

fn meta_usize(c: &Checkpoint, key: &str) -> Result<usize> {
    c.meta(key)
        .ok_or_else(|| Error::Checkpoint(format!("missing metadata `{key}`")))?
        .parse()
        .map_err(|_| Error::Checkpoint(format!("metadata `{key}` is not an integer")))
}

fn meta_f64(c: &Checkpoint, key: &str) -> Result<f64> {
    c.meta(key)
        .ok_or_else(|| Error::Checkpoint(format!("missing metadata `{key}`")))?
        .parse()
        .map_err(|_| Error::Checkpoint(format!("metadata `{key}` is not a number")))
}

fn store_from(c: &Checkpoint, prefix: &str) -> Result<ParamStore> {
    let mut store = ParamStore::new();
    for name in PARAM_NAMES {
        let t = c
            .array(&format!("{prefix}{name}"))
            .ok_or_else(|| Error::Checkpoint(format!("missing array `{prefix}{name}`")))?;
        store.add(name, t.clone());
    }
    Ok(store)
}

pub fn model_from_checkpoint(c: &Checkpoint) -> Result<Model> {
    let config = ModelConfig {
        input_dim: meta_usize(c, "model.input_dim")?,
        hidden: meta_usize(c, "model.hidden")?,
        num_sememes: meta_usize(c, "model.num_sememes")?,
    };
    Model::from_params(config, store_from(c, "")?)
}

/// Model, Adam moments and trainer bookkeeping for resuming.
pub fn training_checkpoint(model: &Model, state: &TrainerState, metadata: &[(String, String)]) -> Checkpoint {
    let mut c = model_checkpoint(model, metadata);
    c.set_meta("state.epoch", state.epoch.to_string());
    c.set_meta("state.best_map", state.best_map.to_string());
    c.set_meta("state.best_epoch", state.best_epoch.to_string());
    c.set_meta("state.since_best", state.since_best.to_string());
    c.set_meta("state.adam_t", state.adam.t.to_string());
    for row in &state.history {
        c.set_meta(format!("history.{}", row.epoch), row.deterministic_part());
    }
    for (i, (name, t)) in model.params.iter().enumerate() {
        let shape = t.shape().to_vec();
        let m = Tensor::new(shape.clone(), state.adam.m[i].clone()).expect("moment shape");
        let v = Tensor::new(shape, state.adam.v[i].clone()).expect("moment shape");
        c.arrays.push((format!("adam.m.{name}"), m));
        c.arrays.push((format!("adam.v.{name}"), v));
    }
    if let Some(best) = &state.best_params {
        for (name, t) in best.iter() {
            c.arrays.push((format!("best.{name}"), t.clone()));
        }
    }
    c
}

pub fn resume_from_checkpoint(c: &Checkpoint, adam: AdamConfig) -> Result<(Model, TrainerState)> {
    let model = model_from_checkpoint(c)?;
    let mut state = TrainerState::fresh(
        &model,
        &TrainConfig {
            adam,
            ..TrainConfig::default()
        },
    );
    state.epoch = meta_usize(c, "state.epoch")?;
    state.best_map = meta_f64(c, "state.best_map")?;
    state.best_epoch = meta_usize(c, "state.best_epoch")?;
    state.since_best = meta_usize(c, "state.since_best")?;
    state.adam.t = meta_usize(c, "state.adam_t")? as u64;
    for (i, (name, t)) in model.params.iter().enumerate() {
        for (slot, kind) in [(&mut state.adam.m[i], "m"), (&mut state.adam.v[i], "v")] {
            let a = c
                .array(&format!("adam.{kind}.{name}"))
                .ok_or_else(|| Error::Checkpoint(format!("missing Adam state for `{name}`")))?;
            if a.shape() != t.shape() {
                return Err(Error::Checkpoint(format!("Adam state shape mismatch for `{name}`")));
            }
            *slot = a.data().to_vec();
        }
    }
    if c.array(&format!("best.{}", PARAM_NAMES[0])).is_some() {
        state.best_params = Some(store_from(c, "best.")?);
    }
    for e in 1..=state.epoch {
        let row = c
            .meta(&format!("history.{e}"))
            .ok_or_else(|| Error::Checkpoint(format!("missing history for epoch {e}")))?;
        state.history.push(EpochLog::parse_deterministic(row)?);
    }
    Ok((model, state))
}

/// Checks that a checkpoint's sememe count matches the inventory in use.
pub fn check_compatible(model: &Model, num_sememes: usize, input_dim: usize) -> Result<()> {
    if model.config.num_sememes != num_sememes {
        return Err(Error::shape(
            "checkpoint",
            format!(
                "checkpoint has |S|={} but the inventory has {num_sememes} sememes",
                model.config.num_sememes
            ),
        ));
    }
    if model.config.input_dim != input_dim {
        return Err(Error::shape(
            "checkpoint",
            format!(
                "checkpoint expects dim {} but the embeddings have dim {input_dim}",
                model.config.input_dim
            ),
        ));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::Pooling;

    fn example(word: &str, vectors: Vec<Vec<f64>>, gold: &[usize]) -> Example {
        let n = vectors.len();
        Example {
            word: word.into(),
            seq: InputSequence {
                tokens: (0..n).map(|i| format!("t{i}")).collect(),
                vectors,
                origins: vec![crate::embeddings::TokenOrigin::Definition; n],
                sememe_groups: vec![Vec::new(); n],
            },
            gold: gold.iter().copied().collect(),
            key: BucketKey {
                frequency: 1,
                has_embedding: true,
            },
        }
    }

    fn toy(n: usize) -> Vec<Example> {
        (0..n)
            .map(|i| {
                let len = 1 + i % 4;
                let v = (0..len)
                    .map(|t| vec![(i + t) as f64 * 0.1, -(t as f64) * 0.2, 0.3])
                    .collect();
                example(&format!("w{i}"), v, &[i % 3])
            })
            .collect()
    }

    #[test]
    fn loss_anchors() {
        assert!((loss(&[0.0, 0.0, 0.0], &[1.0, 0.0, 1.0]) - 2f64.ln()).abs() < 1e-15);
        assert!(loss(&[20.0], &[1.0]) < 1e-8);
        assert!((loss(&[1.0, -1.0], &[1.0, 0.0]) - softplus(-1.0)).abs() < 1e-15);
        assert!((softplus(-1.0) - 0.313_261_687_518_222_8).abs() < 1e-15);
    }

    #[test]
    fn batch_sizes_and_determinism() {
        let lengths = vec![3; 10];
        let a = batch_order(&lengths, 4, 1, 1, false);
        assert_eq!(a.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 4, 2]);
        assert_eq!(a, batch_order(&lengths, 4, 1, 1, false));
        assert_ne!(a, batch_order(&lengths, 4, 1, 2, false));
    }

    #[test]
    fn bucketing_reduces_padding() {
        let lengths: Vec<usize> = (0..64).map(|i| 1 + (i * 7) % 30).collect();
        let pad = |bs: &Vec<Vec<usize>>| -> usize {
            bs.iter()
                .map(|b| {
                    let m = b.iter().map(|&i| lengths[i]).max().unwrap();
                    b.iter().map(|&i| m - lengths[i]).sum::<usize>()
                })
                .sum()
        };
        let plain = batch_order(&lengths, 8, 3, 1, false);
        let bucketed = batch_order(&lengths, 8, 3, 1, true);
        assert!(pad(&bucketed) < pad(&plain));
    }

    #[test]
    fn batch_mask_is_prefix() {
        let ex = toy(5);
        let b = Batch::assemble(&ex, vec![3, 0, 1], 3).unwrap();
        assert_eq!(b.max_len, 4);
        for (row, &len) in b.lengths.iter().enumerate() {
            let m = &b.mask[row * 4..row * 4 + 4];
            assert_eq!(m.iter().filter(|&&x| x).count(), len);
            assert!(m[..len].iter().all(|&x| x));
        }
        assert_eq!(b.labels_of(0), &[1.0, 0.0, 0.0]);
    }

    fn tiny_model(seed: u64) -> Model {
        Model::new(
            ModelConfig {
                input_dim: 3,
                hidden: 4,
                num_sememes: 3,
            },
            seed,
        )
    }

    #[test]
    fn patience_one_stops_after_two_evaluations() {
        let ex = toy(6);
        let mut model = tiny_model(1);
        let mut cfg = TrainConfig {
            hidden: 4,
            max_epochs: 10,
            patience: 1,
            batch_size: 3,
            ..TrainConfig::default()
        };
        // a learning rate far too small to move validation MAP
        cfg.adam.lr = 1e-300;
        let out = train(&mut model, &ex, &ex, &cfg, None, None, &[]).unwrap();
        assert_eq!(out.history.len(), 2);
        assert!(out.stopped_early);
        assert_eq!(out.best_epoch, 1);
    }

    #[test]
    fn checkpoint_roundtrip_and_mismatch() {
        let model = tiny_model(4);
        let c = model_checkpoint(&model, &[("seed".into(), "4".into())]);
        let back = model_from_checkpoint(&Checkpoint::decode(&c.encode()).unwrap()).unwrap();
        for ((_, a), (_, b)) in model.params.iter().zip(back.params.iter()) {
            assert_eq!(a, b);
        }
        assert!(check_compatible(&back, 5, 3).is_err());
        assert!(check_compatible(&back, 3, 3).is_ok());
    }

    #[test]
    fn nan_input_aborts_naming_the_batch() {
        let mut ex = toy(4);
        ex[2].seq.vectors[0][0] = f64::NAN;
        let mut model = tiny_model(2);
        let cfg = TrainConfig {
            hidden: 4,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let mut adam = AdamState::new(&model.params, cfg.adam);
        let b = make_batches(&ex, 3, 4, 0, 1, false).unwrap();
        let err = train_step(&mut model, &mut adam, &ex, &b[0], &cfg, (1, 0)).unwrap_err();
        assert!(matches!(err, Error::NonFiniteLoss { epoch: 1, batch: 0 }));
    }

    #[test]
    fn sub_seeds_differ() {
        assert_ne!(sub_seed(1, "split"), sub_seed(1, "init"));
        assert_eq!(sub_seed(1, "split"), sub_seed(1, "split"));
    }

    #[test]
    fn attention_mode_trains() {
        let ex = toy(4);
        let mut model = tiny_model(3);
        let cfg = TrainConfig {
            mode: Mode::scorp(Pooling::Attention),
            hidden: 4,
            max_epochs: 2,
            batch_size: 2,
            ..TrainConfig::default()
        };
        let out = train(&mut model, &ex, &ex, &cfg, None, None, &[]).unwrap();
        assert_eq!(out.history.len(), 2);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn exactly_once_per_epoch(n in 1usize..80, bs in 1usize..20, seed in any::<u64>(), epoch in 0usize..5, bucket in any::<bool>()) {
                let lengths: Vec<usize> = (0..n).map(|i| 1 + (i * 13) % 17).collect();
                let order = batch_order(&lengths, bs, seed, epoch, bucket);
                let mut all: Vec<usize> = order.iter().flatten().copied().collect();
                all.sort_unstable();
                prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
                prop_assert!(order.iter().all(|b| !b.is_empty() && b.len() <= bs));
            }

            #[test]
            fn loss_non_negative(x in proptest::collection::vec(-30.0f64..30.0, 1..10), bits in any::<u16>()) {
                let y: Vec<f64> = (0..x.len()).map(|i| f64::from((bits >> i) & 1)).collect();
                prop_assert!(loss(&x, &y) >= 0.0);
            }
        }
    }
}
