use std::collections::{BTreeSet, HashMap};
use std::path::{Path, PathBuf};
use std::process::Command;

use scorp_cli::{
    cmd_ablate, cmd_case, cmd_ensemble, cmd_eval, cmd_predict, cmd_prepare, cmd_spwe, cmd_train, dump_map, RunConfig,
};
use scorp_core::evaluation::{rank, ScoreDump};
use scorp_core::lexicon::{build_inventory, load_definitions, load_kb, parse_manifest, Split};
use scorp_core::synthetic::{SyntheticConfig, SyntheticCorpus, SyntheticFiles};
use scorp_core::Error;

struct Env {
    _dir: tempfile::TempDir,
    root: PathBuf,
    files: SyntheticFiles,
}

fn env() -> Env {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let corpus = SyntheticCorpus::generate(SyntheticConfig {
        entries: 240,
        vocab: 90,
        sememes: 10,
        dim: 6,
        seed: 21,
        ..SyntheticConfig::default()
    })
    .unwrap();
    let files = corpus.write_files(&root.join("data")).unwrap();
    Env { _dir: dir, root, files }
}

fn config(env: &Env, out: &str, extra: &[(&str, &str)]) -> RunConfig {
    let mut pairs: Vec<(String, String)> = [
        ("kb", env.files.kb.display().to_string()),
        ("defs", env.files.defs.display().to_string()),
        ("embeddings", env.files.embeddings.display().to_string()),
        ("freq", env.files.freq.display().to_string()),
        ("out", env.root.join(out).display().to_string()),
        ("hidden", "5".into()),
        ("batch_size", "32".into()),
        ("max_epochs", "2".into()),
        ("seed", "3".into()),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect();
    pairs.extend(extra.iter().map(|(k, v)| (k.to_string(), v.to_string())));
    RunConfig::resolve(None, &pairs).unwrap()
}

fn sink() -> std::io::Sink {
    std::io::sink()
}

fn read(p: &Path) -> String {
    std::fs::read_to_string(p).unwrap()
}

#[test]
fn prepare_train_eval_predict_case() {
    let env = env();
    let cfg = config(&env, "run", &[("mode", "scorp +tw"), ("buckets", "freq,oov")]);
    let summary = cmd_prepare(&cfg, &mut sink()).unwrap();
    assert_eq!(summary.train + summary.val + summary.test, summary.words);

    // Average sememes per word, recomputed from the manifest and the KB.
    let manifest = parse_manifest(&read(&cfg.manifest_path()), "manifest").unwrap();
    let kb = load_kb(&env.files.kb).unwrap();
    let inventory = build_inventory(&kb, 5).unwrap();
    let by_word: HashMap<&str, usize> = kb
        .iter()
        .map(|r| {
            (
                r.word.as_str(),
                r.sememes.iter().filter(|s| inventory.id(s).is_some()).count(),
            )
        })
        .collect();
    let total: usize = manifest.iter().map(|r| by_word[r.word.as_str()]).sum();
    assert!((total as f64 / manifest.len() as f64 - summary.avg_sememes).abs() < 1e-12);

    let trained = cmd_train(&cfg, &mut sink()).unwrap();
    assert_eq!(trained.run_name, "scorp_tw_max");
    assert!(trained.best_checkpoint.exists());

    let report = cmd_eval(&cfg, &mut sink()).unwrap();
    let out = cfg.out_dir();
    let kv = read(&out.join("scorp_tw_max.report.kv"));
    assert!(kv.contains("bucket.freq.>=5000.count="), "{kv}");
    assert!(kv.contains("bucket.oov.IV.count="), "{kv}");
    let dump = ScoreDump::parse(&read(&out.join("scorp_tw_max.scores.tsv")), "dump").unwrap();
    let test_words: BTreeSet<&str> = manifest
        .iter()
        .filter(|r| r.split == Some(Split::Test))
        .map(|r| r.word.as_str())
        .collect();
    assert_eq!(
        dump.words.iter().map(String::as_str).collect::<BTreeSet<_>>(),
        test_words
    );
    let gold: HashMap<String, BTreeSet<usize>> = kb
        .iter()
        .map(|r| (r.word.clone(), inventory.ids_of(&r.sememes)))
        .collect();
    assert!((dump_map(&dump, &gold, &inventory).unwrap() - report.map).abs() < 1e-12);

    // `predict` on a test word reproduces its row of the dump.
    let defs = load_definitions(&env.files.defs).unwrap();
    let word = &dump.words[0];
    let definition = defs[word].join(" ");
    let cfg_predict = config(
        &env,
        "run",
        &[
            ("mode", "scorp +tw"),
            ("word", word),
            ("definition", &definition),
            ("top_k", "4"),
            ("explain", "true"),
        ],
    );
    let mut printed = Vec::new();
    let top = cmd_predict(&cfg_predict, &mut printed).unwrap();
    let row = &dump.scores[0];
    let expected: Vec<(String, f64)> = rank(row)
        .into_iter()
        .take(4)
        .map(|j| (dump.sememes[j].clone(), row[j]))
        .collect();
    assert_eq!(top, expected);
    let printed = String::from_utf8(printed).unwrap();
    assert!(printed.contains(&format!("[{word}]")), "{printed}");

    let cfg_case = config(&env, "run", &[("mode", "scorp +tw"), ("words", word)]);
    let text = cmd_case(&cfg_case, &mut sink()).unwrap();
    assert_eq!(read(&out.join("scorp_tw_max.case.txt")), text);
}

#[test]
fn prepare_is_reproducible_and_seed_sensitive() {
    let env = env();
    let a = config(&env, "a", &[]);
    let b = config(&env, "b", &[]);
    let c = config(&env, "c", &[("seed", "4")]);
    for cfg in [&a, &b, &c] {
        cmd_prepare(cfg, &mut sink()).unwrap();
    }
    assert_eq!(read(&a.manifest_path()), read(&b.manifest_path()));
    assert_eq!(read(&a.inventory_path()), read(&b.inventory_path()));
    assert_ne!(read(&a.manifest_path()), read(&c.manifest_path()));

    let folds = config(&env, "folds", &[("folds", "10"), ("fold", "2")]);
    let s = cmd_prepare(&folds, &mut sink()).unwrap();
    assert!(s.test > 0 && s.val > 0 && s.train > s.test);
}

#[test]
fn explaining_a_model_without_correspondence_fails() {
    let env = env();
    let cfg = config(&env, "mc", &[("mode", "mc")]);
    cmd_prepare(&cfg, &mut sink()).unwrap();
    cmd_train(&cfg, &mut sink()).unwrap();
    let defs = load_definitions(&env.files.defs).unwrap();
    let (word, def) = defs.iter().next().unwrap();
    let def = def.join(" ");
    let ask = |explain: &str| {
        config(
            &env,
            "mc",
            &[
                ("mode", "mc"),
                ("word", word),
                ("definition", &def),
                ("explain", explain),
            ],
        )
    };
    assert!(cmd_predict(&ask("false"), &mut sink()).is_ok());
    let err = cmd_predict(&ask("true"), &mut sink()).unwrap_err();
    assert!(matches!(err, Error::NoCorrespondence(_)), "{err}");
}

#[test]
fn ablation_follows_request_order_and_ensembles_combine_dumps() {
    let env = env();
    let cfg = config(&env, "abl", &[("modes", "scorp pool=mean, mc")]);
    cmd_prepare(&cfg, &mut sink()).unwrap();
    let rows = cmd_ablate(&cfg, &mut sink()).unwrap();
    let modes: Vec<String> = rows.iter().map(|r| r.mode.to_string()).collect();
    assert_eq!(modes, ["scorp pool=mean", "mc"]);
    assert!(rows.iter().all(|r| r.result.is_ok()));
    let table = read(&cfg.out_dir().join("ablate.tsv"));
    let firsts: Vec<&str> = table.lines().skip(1).map(|l| l.split('\t').next().unwrap()).collect();
    assert_eq!(firsts, ["scorp pool=mean", "mc"]);

    cmd_spwe(&cfg, &mut sink()).unwrap();
    let out = cfg.out_dir();
    let a = out.join("scorp_mean.scores.tsv");
    let b = out.join("spwe.scores.tsv");
    let ens = |la: &str, lb: &str, target: &str| {
        let c = config(
            &env,
            "abl",
            &[
                ("ensemble_a", &a.display().to_string()),
                ("ensemble_b", &b.display().to_string()),
                ("lambda_a", la),
                ("lambda_b", lb),
                ("ensemble_out", &out.join(target).display().to_string()),
            ],
        );
        cmd_ensemble(&c, &mut sink()).unwrap()
    };
    let identity = ens("1", "0", "identity.tsv");
    let base = ScoreDump::parse(&read(&a), "a").unwrap();
    for (x, y) in identity.scores.iter().zip(&base.scores) {
        assert_eq!(rank(x), rank(y));
    }
    let weighted = ens("1", "10", "weighted.tsv");
    assert_eq!(weighted.words, base.words);
    assert_eq!(
        ScoreDump::parse(&read(&out.join("weighted.tsv")), "w").unwrap(),
        weighted
    );
}

fn scorp(args: &[&str], envs: &[(&str, &str)]) -> (bool, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_scorp"))
        .args(args)
        .envs(envs.iter().copied())
        .env_remove("RUST_LOG")
        .output()
        .unwrap();
    (
        out.status.success(),
        String::from_utf8(out.stdout).unwrap(),
        String::from_utf8(out.stderr).unwrap(),
    )
}

fn assert_error_line(stderr: &str, kind: &str) {
    let lines: Vec<&str> = stderr.lines().collect();
    assert_eq!(lines.len(), 1, "{stderr}");
    let fields: Vec<&str> = lines[0].split('\t').collect();
    assert_eq!(fields.len(), 3, "{stderr}");
    assert_eq!(fields[..2], ["error", kind], "{stderr}");
}

#[test]
fn binary_reports_failures_as_one_line() {
    let env = env();
    let out = env.root.join("bin");
    let out = out.to_str().unwrap();

    let (ok, _, err) = scorp(&["--out", out, "--set", "bogus=1", "prepare"], &[]);
    assert!(!ok);
    assert_error_line(&err, "config");

    let (ok, _, err) = scorp(&["--out", out, "--set", "kb=/nonexistent/kb.tsv", "prepare"], &[]);
    assert!(!ok);
    assert_error_line(&err, "io");

    let (ok, _, err) = scorp(&["--out", out, "frobnicate"], &[]);
    assert!(!ok);
    assert_error_line(&err, "usage");

    let (ok, _, err) = scorp(&["--mode", "scorp pool=sum", "prepare"], &[]);
    assert!(!ok);
    assert_error_line(&err, "invalid_mode");

    let (ok, stdout, _) = scorp(&["--help"], &[]);
    assert!(ok && stdout.contains("prepare"));
}

#[test]
fn binary_takes_the_seed_from_the_environment() {
    let env = env();
    let out = env.root.join("seeded");
    let f = &env.files;
    let args = [
        "--out",
        out.to_str().unwrap(),
        "--set",
        &format!("kb={}", f.kb.display()),
        "--set",
        &format!("defs={}", f.defs.display()),
        "--set",
        &format!("embeddings={}", f.embeddings.display()),
        "--set",
        &format!("freq={}", f.freq.display()),
        "prepare",
    ];
    let (ok, stdout, err) = scorp(&args, &[("SCORP_SEED", "17")]);
    assert!(ok, "{err}");
    assert!(stdout.contains("train / val / test"));
    assert!(read(&out.join("config.resolved")).contains("seed = 17\n"));

    let (ok, _, err) = scorp(&args, &[("SCORP_SEED", "seventeen")]);
    assert!(!ok);
    assert_error_line(&err, "config");
}
