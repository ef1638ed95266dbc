//! Commands behind the `scorp` binary. Each takes a resolved [`RunConfig`]
//! and writes human-readable output to `out`; files go to the `out` directory.

pub mod config;

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use scorp_core::baselines::{ensemble_dumps, spwe_score, NeighborIndex};
use scorp_core::checkpoint::Checkpoint;
use scorp_core::embeddings::{build_input_sequence, EmbeddingTable};
use scorp_core::evaluation::{
    bucket_eval, dump_correspondence, map_eval, rank, write_score_dump, BucketKey, BucketScheme, EvalReport,
    RankedPrediction, ScoreDump,
};
use scorp_core::lexicon::{
    assemble_dataset, build_inventory, kfold_dataset, load_definitions, load_frequencies, load_kb, parse_manifest,
    sememe_lookup, split_dataset, Dataset, KbRecord, LexEntry, SememeInventory, Split,
};
use scorp_core::models::{Mode, Model, ModelConfig};
use scorp_core::training::{
    check_compatible, model_from_checkpoint, predict, prepare_examples, resume_from_checkpoint, sub_seed, train,
    Example, RunPaths,
};
use scorp_core::{Error, Result};

pub use config::RunConfig;

fn emit(out: &mut dyn Write, text: &str) -> Result<()> {
    out.write_all(text.as_bytes())
        .map_err(|e| Error::io(Path::new("<stdout>"), e))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Raw input files named by the config.
pub struct Inputs {
    pub kb: Vec<KbRecord>,
    pub defs: HashMap<String, Vec<String>>,
    pub table: EmbeddingTable,
    pub freqs: HashMap<String, u64>,
}

impl Inputs {
    pub fn load(cfg: &RunConfig) -> Result<Self> {
        Ok(Inputs {
            kb: load_kb(&cfg.path("kb")?)?,
            defs: load_definitions(&cfg.path("defs")?)?,
            table: EmbeddingTable::load(&cfg.path("embeddings")?)?,
            freqs: match cfg.opt("freq") {
                Some(p) => load_frequencies(Path::new(p))?,
                None => HashMap::new(),
            },
        })
    }
}

/// A prepared dataset together with everything needed to encode it.
pub struct Workspace {
    pub inputs: Inputs,
    pub dataset: Dataset,
    pub lookup: HashMap<String, Vec<usize>>,
}

impl Workspace {
    /// Rebuilds the dataset from the inputs, the stored inventory and the manifest.
    pub fn load(cfg: &RunConfig) -> Result<Self> {
        let inputs = Inputs::load(cfg)?;
        let inv_path = cfg.inventory_path();
        let inventory = SememeInventory::parse_tsv(&read_file(&inv_path)?, &inv_path.display().to_string())?;
        let mut dataset = assemble_dataset(
            &inputs.kb,
            &inputs.defs,
            Some(&inputs.table),
            &inputs.freqs,
            &inventory,
            cfg.flag("require_embedding")?,
        )?;
        let man_path = cfg.manifest_path();
        let rows = parse_manifest(&read_file(&man_path)?, &man_path.display().to_string())?;
        dataset.apply_manifest(&rows)?;
        let lookup = sememe_lookup(&inputs.kb, &inventory);
        Ok(Workspace {
            inputs,
            dataset,
            lookup,
        })
    }

    pub fn examples(&self, split: Split, mode: Mode) -> Result<Vec<Example>> {
        prepare_examples(&self.dataset.entries_in(split), &self.inputs.table, mode, &self.lookup)
    }

    pub fn inventory(&self) -> &SememeInventory {
        &self.dataset.inventory
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrepareSummary {
    pub words: usize,
    pub sememes: usize,
    pub avg_sememes: f64,
    pub oov_words: usize,
    pub dropped_unencodable: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

/// Builds the inventory and the tagged dataset; writes `manifest.tsv` and `inventory.tsv`.
pub fn cmd_prepare(cfg: &RunConfig, out: &mut dyn Write) -> Result<PrepareSummary> {
    cfg.write_resolved()?;
    let inputs = Inputs::load(cfg)?;
    let inventory = build_inventory(&inputs.kb, cfg.parse("min_count")?)?;
    let mut dataset = assemble_dataset(
        &inputs.kb,
        &inputs.defs,
        Some(&inputs.table),
        &inputs.freqs,
        &inventory,
        cfg.flag("require_embedding")?,
    )?;
    let before = dataset.entries.len();
    dataset
        .entries
        .retain(|e| e.definition.iter().any(|t| inputs.table.contains(t)));
    let dropped = before - dataset.entries.len();
    if dropped > 0 {
        log::warn!("dropped {dropped} entries whose definitions have no embedded token");
    }
    let seed: u64 = cfg.parse("seed")?;
    let folds: usize = cfg.parse("folds")?;
    let dataset = if folds > 0 {
        let mut d = kfold_dataset(dataset, sub_seed(seed, "split"), folds)?;
        d.apply_fold(cfg.parse("fold")?)?;
        d
    } else {
        split_dataset(dataset, sub_seed(seed, "split"), cfg.split_ratios()?)?
    };
    write_file(&cfg.manifest_path(), &dataset.manifest())?;
    write_file(&cfg.inventory_path(), &inventory.to_tsv())?;

    let words = dataset.entries.len();
    let total: usize = dataset.entries.iter().map(|e| e.sememes.len()).sum();
    let summary = PrepareSummary {
        words,
        sememes: inventory.len(),
        avg_sememes: total as f64 / words as f64,
        oov_words: dataset.entries.iter().filter(|e| !e.has_embedding).count(),
        dropped_unencodable: dropped,
        train: dataset.indices(Split::Train).len(),
        val: dataset.indices(Split::Val).len(),
        test: dataset.indices(Split::Test).len(),
    };
    let mut s = String::new();
    let _ = writeln!(s, "words in dataset        {}", summary.words);
    let _ = writeln!(s, "sememes in inventory    {}", summary.sememes);
    let _ = writeln!(s, "avg sememes per word    {:.2}", summary.avg_sememes);
    let _ = writeln!(s, "words without embedding {}", summary.oov_words);
    let _ = writeln!(
        s,
        "train / val / test      {} / {} / {}",
        summary.train, summary.val, summary.test
    );
    emit(out, &s)?;
    Ok(summary)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub run_name: String,
    pub best_epoch: usize,
    pub best_val_map: f64,
    pub epochs_run: usize,
    pub best_checkpoint: PathBuf,
}

/// Trains one mode, writing `{run}.ckpt`, `{run}.best.ckpt` and `{run}.log.tsv`.
pub fn cmd_train(cfg: &RunConfig, out: &mut dyn Write) -> Result<TrainSummary> {
    cfg.write_resolved()?;
    let ws = Workspace::load(cfg)?;
    let tc = cfg.train_config()?;
    let run = cfg.run_name()?;
    let paths = RunPaths::new(cfg.out_dir(), run.clone());
    let train_set = ws.examples(Split::Train, tc.mode)?;
    let val_set = ws.examples(Split::Val, tc.mode)?;

    let fingerprint = ws.inputs.table.fingerprint();
    let mut metadata = tc.metadata();
    metadata.push(("embeddings.sha256".into(), hex(&fingerprint)));
    metadata.push(("inventory.size".into(), ws.inventory().len().to_string()));

    let (mut model, state) = if cfg.flag("resume")? && paths.last().exists() {
        let ck = Checkpoint::load(&paths.last())?;
        if ck.meta("mode") != Some(tc.mode.to_string().as_str()) {
            return Err(Error::Config(format!(
                "cannot resume {}: it was trained as `{}`",
                paths.last().display(),
                ck.meta("mode").unwrap_or("?")
            )));
        }
        let (m, s) = resume_from_checkpoint(&ck, tc.adam)?;
        check_compatible(&m, ws.inventory().len(), ws.inputs.table.dim())?;
        log::info!("resuming {} after epoch {}", run, s.epoch);
        (m, Some(s))
    } else {
        let mc = ModelConfig {
            input_dim: ws.inputs.table.dim(),
            hidden: tc.hidden,
            num_sememes: ws.inventory().len(),
        };
        (Model::new(mc, sub_seed(tc.seed, "init")), None)
    };
    let outcome = train(&mut model, &train_set, &val_set, &tc, state, Some(&paths), &metadata)?;
    if ws.inputs.table.fingerprint() != fingerprint {
        return Err(Error::Checkpoint("embedding table changed during training".into()));
    }
    let summary = TrainSummary {
        run_name: run,
        best_epoch: outcome.best_epoch,
        best_val_map: outcome.best_map,
        epochs_run: outcome.history.len(),
        best_checkpoint: paths.best(),
    };
    emit(
        out,
        &format!(
            "{}: {} epochs, best val MAP {:.2} at epoch {} -> {}\n",
            summary.run_name,
            summary.epochs_run,
            100.0 * summary.best_val_map,
            summary.best_epoch,
            summary.best_checkpoint.display()
        ),
    )?;
    Ok(summary)
}

fn checkpoint_path(cfg: &RunConfig) -> Result<PathBuf> {
    Ok(match cfg.opt("checkpoint") {
        Some(p) => PathBuf::from(p),
        None => RunPaths::new(cfg.out_dir(), cfg.run_name()?).best(),
    })
}

/// Loads a model checkpoint and the mode it was trained in.
pub fn load_model(path: &Path) -> Result<(Model, Mode)> {
    let ck = Checkpoint::load(path)?;
    let mode: Mode = ck
        .meta("mode")
        .ok_or_else(|| Error::Checkpoint(format!("{} records no mode", path.display())))?
        .parse()?;
    Ok((model_from_checkpoint(&ck)?, mode))
}

fn bucket_schemes(cfg: &RunConfig) -> Vec<BucketScheme> {
    cfg.get("buckets")
        .split(',')
        .map(str::trim)
        .filter_map(|b| match b {
            "freq" => Some(BucketScheme::default_frequency()),
            "oov" => Some(BucketScheme::Oov),
            _ => None,
        })
        .collect()
}

fn top_dump(preds: &[RankedPrediction], inventory: &SememeInventory, k: usize) -> String {
    let mut s = String::new();
    for p in preds {
        for &j in p.ranking.iter().take(k) {
            let _ = writeln!(s, "{}\t{}\t{}", p.word, inventory.name(j), p.scores[j]);
        }
    }
    s
}

/// Builds an evaluation report (δ tuned on `val`) with the configured buckets.
pub fn build_report(
    cfg: &RunConfig,
    val: &[RankedPrediction],
    test: &[RankedPrediction],
    test_examples: &[Example],
) -> Result<EvalReport> {
    let mut report = EvalReport::build(val, test)?;
    let keys: Vec<_> = test_examples.iter().map(|e| e.key).collect();
    for scheme in bucket_schemes(cfg) {
        report
            .buckets
            .push((scheme.name().to_string(), bucket_eval(test, &keys, &scheme)?));
    }
    Ok(report)
}

fn write_report(cfg: &RunConfig, stem: &str, report: &EvalReport, dump: &str) -> Result<[PathBuf; 3]> {
    let dir = cfg.out_dir();
    let paths = [
        dir.join(format!("{stem}.report.txt")),
        dir.join(format!("{stem}.report.kv")),
        dir.join(format!("{stem}.scores.tsv")),
    ];
    write_file(&paths[0], &report.to_text())?;
    write_file(&paths[1], &report.to_kv())?;
    write_file(&paths[2], dump)?;
    Ok(paths)
}

/// Evaluates a checkpoint: δ tuned on validation, metrics on test.
pub fn cmd_eval(cfg: &RunConfig, out: &mut dyn Write) -> Result<EvalReport> {
    cfg.write_resolved()?;
    let ws = Workspace::load(cfg)?;
    let ck = checkpoint_path(cfg)?;
    let (model, mode) = load_model(&ck)?;
    check_compatible(&model, ws.inventory().len(), ws.inputs.table.dim())?;
    let val_ex = ws.examples(Split::Val, mode)?;
    let test_ex = ws.examples(Split::Test, mode)?;
    let val = predict(&model, &val_ex, mode)?;
    let test = predict(&model, &test_ex, mode)?;
    let report = build_report(cfg, &val, &test, &test_ex)?;
    let dump = if cfg.flag("full_dump")? {
        write_score_dump(&test, ws.inventory())
    } else {
        top_dump(&test, ws.inventory(), cfg.parse("top_k")?)
    };
    write_report(cfg, &cfg.run_name()?, &report, &dump)?;
    emit(out, &format!("{mode}\n{}", report.to_text()))?;
    Ok(report)
}

/// Ranks sememes for one word and definition; optionally explains via the correspondence table.
pub fn cmd_predict(cfg: &RunConfig, out: &mut dyn Write) -> Result<Vec<(String, f64)>> {
    let word = cfg
        .opt("word")
        .ok_or_else(|| Error::Config("config key `word` is required".into()))?
        .to_string();
    let definition: Vec<String> = cfg.get("definition").split_whitespace().map(str::to_string).collect();
    if definition.is_empty() {
        return Err(Error::Config("a non-empty definition is required".into()));
    }
    let table = EmbeddingTable::load(&cfg.path("embeddings")?)?;
    let inv_path = cfg.inventory_path();
    let inventory = SememeInventory::parse_tsv(&read_file(&inv_path)?, &inv_path.display().to_string())?;
    let (model, mode) = load_model(&checkpoint_path(cfg)?)?;
    check_compatible(&model, inventory.len(), table.dim())?;
    let lookup = match cfg.opt("kb") {
        Some(p) => sememe_lookup(&load_kb(Path::new(p))?, &inventory),
        None if mode.se => return Err(Error::Config("+se checkpoints need `kb` for retrofitting".into())),
        None => HashMap::new(),
    };
    let entry = LexEntry {
        has_embedding: table.contains(&word),
        word: word.clone(),
        sememes: BTreeSet::new(),
        definition,
        frequency: 0,
    };
    let seq = build_input_sequence(&entry, &table, mode.sequence_options(), &lookup)?;
    let scores = model.score(&seq, mode)?;
    let k: usize = cfg.parse("top_k")?;
    let top: Vec<(String, f64)> = rank(&scores)
        .into_iter()
        .take(k)
        .map(|j| (inventory.name(j).to_string(), scores[j]))
        .collect();
    let mut s = String::new();
    for (i, (name, score)) in top.iter().enumerate() {
        let _ = writeln!(s, "{}\t{name}\t{score}", i + 1);
    }
    if cfg.flag("explain")? {
        let case = dump_correspondence(&model, mode, &word, &seq, &inventory, k)?;
        s.push('\n');
        s.push_str(&case.render());
    }
    emit(out, &s)?;
    Ok(top)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub mode: Mode,
    /// `Ok((MAP, F1))` or the error message of the failed run.
    pub result: std::result::Result<(f64, f64), String>,
}

/// Trains and evaluates each requested mode with the shared seed; writes `ablate.tsv`.
pub fn cmd_ablate(cfg: &RunConfig, out: &mut dyn Write) -> Result<Vec<AblationRow>> {
    cfg.write_resolved()?;
    let modes = cfg.modes()?;
    let mut rows = Vec::with_capacity(modes.len());
    let mut table = String::from("mode\tMAP\tF1\tstatus\n");
    for mode in modes {
        let mut sub = cfg.clone();
        sub.set("mode", &mode.to_string())?;
        sub.set("run_name", &mode.slug())?;
        sub.set("checkpoint", "")?;
        let result = cmd_train(&sub, &mut std::io::sink())
            .and_then(|_| cmd_eval(&sub, &mut std::io::sink()))
            .map(|r| (r.map, r.f1))
            .map_err(|e| {
                log::error!("{mode}: {e}");
                e.to_string().replace(['\t', '\n'], " ")
            });
        let line = match &result {
            Ok((m, f)) => format!("{mode}\t{:.2}\t{:.2}\tok\n", 100.0 * m, 100.0 * f),
            Err(e) => format!("{mode}\t-\t-\terror: {e}\n"),
        };
        emit(out, &line)?;
        table.push_str(&line);
        rows.push(AblationRow { mode, result });
    }
    cfg.write_resolved()?;
    write_file(&cfg.out_dir().join("ablate.tsv"), &table)?;
    Ok(rows)
}

fn load_dump(path: &Path) -> Result<ScoreDump> {
    ScoreDump::parse(&read_file(path)?, &path.display().to_string())
}

/// MAP of a dump against gold sets, over the words that have one.
pub fn dump_map(dump: &ScoreDump, gold: &HashMap<String, BTreeSet<usize>>, inventory: &SememeInventory) -> Result<f64> {
    let order: Vec<usize> = dump
        .sememes
        .iter()
        .map(|s| {
            inventory
                .id(s)
                .ok_or_else(|| Error::Config(format!("dump sememe `{s}` is not in the inventory")))
        })
        .collect::<Result<_>>()?;
    let preds: Vec<RankedPrediction> = dump
        .words
        .iter()
        .zip(&dump.scores)
        .filter_map(|(w, row)| {
            let g = gold.get(w)?;
            let mut scores = vec![f64::NEG_INFINITY; inventory.len()];
            for (&j, &v) in order.iter().zip(row) {
                scores[j] = v;
            }
            Some(RankedPrediction::new(w.clone(), scores, g.clone()))
        })
        .collect();
    map_eval(&preds)
}

/// Weighted addition of two score dumps; reports MAPs when a dataset is configured.
pub fn cmd_ensemble(cfg: &RunConfig, out: &mut dyn Write) -> Result<ScoreDump> {
    cfg.write_resolved()?;
    let a = load_dump(&cfg.path("ensemble_a")?)?;
    let b = load_dump(&cfg.path("ensemble_b")?)?;
    let combined = ensemble_dumps(
        &a,
        &b,
        cfg.parse("lambda_a")?,
        cfg.parse("lambda_b")?,
        cfg.flag("raw_ensemble")?,
    )?;
    let target = cfg
        .opt("ensemble_out")
        .map_or_else(|| cfg.out_dir().join("ensemble.scores.tsv"), PathBuf::from);
    write_file(&target, &combined.to_tsv())?;
    let mut s = format!("wrote {}\n", target.display());
    if cfg.opt("kb").is_some() {
        let ws = Workspace::load(cfg)?;
        let gold: HashMap<String, BTreeSet<usize>> = ws
            .dataset
            .entries
            .iter()
            .map(|e| (e.word.clone(), e.sememes.clone()))
            .collect();
        for (name, d) in [("a", &a), ("b", &b), ("ensemble", &combined)] {
            let _ = writeln!(s, "MAP {name:<9} {:.2}", 100.0 * dump_map(d, &gold, ws.inventory())?);
        }
    }
    emit(out, &s)?;
    Ok(combined)
}

/// Embedding-neighbor baseline over the test split; writes `spwe.report.*` and `spwe.scores.tsv`.
pub fn cmd_spwe(cfg: &RunConfig, out: &mut dyn Write) -> Result<EvalReport> {
    cfg.write_resolved()?;
    let ws = Workspace::load(cfg)?;
    let train_entries = ws.dataset.entries_in(Split::Train);
    let val_entries = ws.dataset.entries_in(Split::Val);
    let test_entries = ws.dataset.entries_in(Split::Test);
    let queries: Vec<&str> = val_entries
        .iter()
        .chain(&test_entries)
        .map(|e| e.word.as_str())
        .collect();
    let index = NeighborIndex::build(&train_entries, &ws.inputs.table, &queries, cfg.parse("spwe_neighbors")?);
    let decay: f64 = cfg.parse("spwe_decay")?;
    let s = ws.inventory().len();
    let score = |entries: &[&LexEntry]| -> Vec<RankedPrediction> {
        entries
            .iter()
            .map(|e| {
                RankedPrediction::new(
                    e.word.clone(),
                    spwe_score(&e.word, &index, s, decay).scores,
                    e.sememes.clone(),
                )
            })
            .collect()
    };
    let (val, test) = (score(&val_entries), score(&test_entries));
    let mut report = EvalReport::build(&val, &test)?;
    let bkeys: Vec<_> = test_entries
        .iter()
        .map(|e| BucketKey {
            frequency: e.frequency,
            has_embedding: e.has_embedding,
        })
        .collect();
    for scheme in bucket_schemes(cfg) {
        report
            .buckets
            .push((scheme.name().to_string(), bucket_eval(&test, &bkeys, &scheme)?));
    }
    write_report(cfg, "spwe", &report, &write_score_dump(&test, ws.inventory()))?;
    emit(out, &format!("spwe\n{}", report.to_text()))?;
    Ok(report)
}

/// Correspondence case-study tables for the configured words; writes `{run}.case.txt`.
pub fn cmd_case(cfg: &RunConfig, out: &mut dyn Write) -> Result<String> {
    let ws = Workspace::load(cfg)?;
    let (model, mode) = load_model(&checkpoint_path(cfg)?)?;
    check_compatible(&model, ws.inventory().len(), ws.inputs.table.dim())?;
    let words: Vec<&str> = cfg
        .get("words")
        .split(',')
        .map(str::trim)
        .filter(|w| !w.is_empty())
        .collect();
    if words.is_empty() {
        return Err(Error::Config("`words` lists no word".into()));
    }
    let k: usize = cfg.parse("top_k")?;
    let mut text = String::new();
    for w in words {
        let entry = ws
            .dataset
            .entries
            .iter()
            .find(|e| e.word == w)
            .ok_or_else(|| Error::Config(format!("word `{w}` is not in the dataset")))?;
        let seq = build_input_sequence(entry, &ws.inputs.table, mode.sequence_options(), &ws.lookup)?;
        let case = dump_correspondence(&model, mode, w, &seq, ws.inventory(), k)?;
        let gold: Vec<&str> = entry.sememes.iter().map(|&j| ws.inventory().name(j)).collect();
        let _ = writeln!(text, "{w}  gold: {}", gold.join(", "));
        text.push_str(&case.render());
        text.push('\n');
    }
    write_file(&cfg.out_dir().join(format!("{}.case.txt", cfg.run_name()?)), &text)?;
    emit(out, &text)?;
    Ok(text)
}
