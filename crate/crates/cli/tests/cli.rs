//! End-to-end checks of the command-line contract: exit codes, byte-level
//! determinism, and configuration precedence. Everything runs the actual
//! binary against the small fixture language under `fixtures/`.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ctc-correct"))
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures").join(name)
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary should spawn")
}

/// Runs the binary and demands success, echoing its stderr on failure so
/// the test log says what actually went wrong.
fn run_ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "command {:?} failed (code {:?}):\n{}",
        args,
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn path_str(p: &Path) -> String {
    p.to_str().expect("paths in tests are valid UTF-8").to_owned()
}

/// Simulates `count` utterances into `dir/name` and returns that directory.
fn simulate_into(dir: &Path, name: &str, count: usize, seed: u64, extra: &[&str]) -> PathBuf {
    let out = dir.join(name);
    let mut args = vec![
        "simulate".to_owned(),
        "--corpus".to_owned(),
        path_str(&fixture("corpus.txt")),
        "--lexicon".to_owned(),
        path_str(&fixture("lexicon.tsv")),
        "--count".to_owned(),
        count.to_string(),
        "--seed".to_owned(),
        seed.to_string(),
        "--out".to_owned(),
        path_str(&out),
    ];
    args.extend(extra.iter().map(|s| s.to_string()));
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    run_ok(&refs);
    out
}

fn train_into(dir: &Path, kind: &str, corpus: &Path, vocab: &Path, name: &str) -> PathBuf {
    let out = dir.join(name);
    let mut args = vec![
        "train-lm",
        "--kind",
        kind,
        "--corpus",
        corpus.to_str().unwrap(),
        "--vocab",
        vocab.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--seed",
        "3",
    ];
    let lexicon = path_str(&fixture("lexicon.tsv"));
    if kind != "ngram" {
        args.extend(["--lexicon", &lexicon]);
    }
    run_ok(&args);
    out
}

/// Extracts `(id, words)` pairs from a hypothesis-shaped JSONL file,
/// ignoring whatever else each record carries.
fn words_of(path: &Path) -> Vec<(String, Vec<String>)> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|line| {
            let v: serde_json::Value = serde_json::from_str(line).unwrap();
            let id = v["id"].as_str().unwrap().to_owned();
            let words = v["words"]
                .as_array()
                .unwrap()
                .iter()
                .map(|w| w.as_str().unwrap().to_owned())
                .collect();
            (id, words)
        })
        .collect()
}

#[test]
fn usage_errors_exit_one() {
    // Unknown subcommand.
    assert_eq!(run(&["transmogrify"]).status.code(), Some(1));
    // decode needs --greedy or --beam.
    let out = run(&["decode", "--posteriors", "x.jsonl", "--vocab", "v.json", "--out", "d"]);
    assert_eq!(out.status.code(), Some(1));
    // Zero workers is meaningless.
    let sim = TempDir::new().unwrap();
    let dir = simulate_into(sim.path(), "s", 2, 1, &[]);
    let out = run(&[
        "decode",
        "--greedy",
        "--jobs",
        "0",
        "--posteriors",
        dir.join("posteriors.jsonl").to_str().unwrap(),
        "--vocab",
        dir.join("vocab.json").to_str().unwrap(),
        "--out",
        sim.path().join("d").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("jobs"));
}

#[test]
fn help_and_version_exit_zero() {
    assert_eq!(run(&["--help"]).status.code(), Some(0));
    assert_eq!(run(&["--version"]).status.code(), Some(0));
    assert_eq!(run(&["simulate", "--help"]).status.code(), Some(0));
}

#[test]
fn vocab_hash_mismatch_exits_two_and_names_both_hashes() {
    let tmp = TempDir::new().unwrap();
    let a = simulate_into(tmp.path(), "a", 3, 1, &[]);
    // A seed corpus over fewer words gives a different vocabulary.
    let small = tmp.path().join("small.txt");
    fs::write(&small, "cat dog\nsun run\ncat sun\n").unwrap();
    let b = tmp.path().join("b");
    run_ok(&[
        "simulate",
        "--corpus",
        small.to_str().unwrap(),
        "--lexicon",
        fixture("lexicon.tsv").to_str().unwrap(),
        "--count",
        "3",
        "--seed",
        "1",
        "--out",
        b.to_str().unwrap(),
    ]);
    let vocab_a = ctc_correct::lexicon::Vocab::load(&a.join("vocab.json")).unwrap();
    let vocab_b = ctc_correct::lexicon::Vocab::load(&b.join("vocab.json")).unwrap();
    assert_ne!(vocab_a.hash(), vocab_b.hash(), "fixture must produce distinct vocabs");

    let out = run(&[
        "decode",
        "--greedy",
        "--posteriors",
        a.join("posteriors.jsonl").to_str().unwrap(),
        "--vocab",
        b.join("vocab.json").to_str().unwrap(),
        "--out",
        tmp.path().join("d").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains(&vocab_a.hash()), "stderr should name the file hash: {stderr}");
    assert!(stderr.contains(&vocab_b.hash()), "stderr should name the vocab hash: {stderr}");
}

#[test]
fn mismatched_eval_lengths_exit_two() {
    let tmp = TempDir::new().unwrap();
    let dir = simulate_into(tmp.path(), "s", 4, 9, &[]);
    let hyps = tmp.path().join("hyps.jsonl");
    fs::write(&hyps, "{\"id\":\"utt-00000\",\"words\":[\"cat\"]}\n").unwrap();
    let out = run(&[
        "eval",
        "--hyps",
        hyps.to_str().unwrap(),
        "--refs",
        dir.join("corpus.txt").to_str().unwrap(),
        "--vocab",
        dir.join("vocab.json").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn simulate_is_byte_identical_across_runs() {
    let tmp = TempDir::new().unwrap();
    let a = simulate_into(tmp.path(), "a", 25, 7, &[]);
    let b = simulate_into(tmp.path(), "b", 25, 7, &[]);
    for name in ["corpus.txt", "vocab.json", "posteriors.jsonl", "phones.jsonl", "corruption.jsonl", "meta.json"] {
        let left = fs::read(a.join(name)).unwrap();
        let right = fs::read(b.join(name)).unwrap();
        assert_eq!(left, right, "{name} differs between identical runs");
    }
}

#[test]
fn parallel_jobs_match_sequential_output() {
    let tmp = TempDir::new().unwrap();
    let sim = simulate_into(tmp.path(), "s", 24, 11, &[]);
    let posts = path_str(&sim.join("posteriors.jsonl"));
    let vocab = path_str(&sim.join("vocab.json"));
    let mut hyp_files = Vec::new();
    for (name, jobs) in [("seq", "1"), ("par", "4")] {
        let out = tmp.path().join(name);
        run_ok(&[
            "decode",
            "--greedy",
            "--jobs",
            jobs,
            "--posteriors",
            &posts,
            "--vocab",
            &vocab,
            "--out",
            out.to_str().unwrap(),
        ]);
        hyp_files.push(fs::read(out.join("hyps.jsonl")).unwrap());
    }
    assert_eq!(hyp_files[0], hyp_files[1], "worker count must not change results");
}

#[test]
fn correct_with_beta_zero_matches_greedy_decode() {
    let tmp = TempDir::new().unwrap();
    let sim = simulate_into(tmp.path(), "s", 30, 5, &[]);
    let model = train_into(
        tmp.path(),
        "pcmlm",
        &sim.join("corpus.txt"),
        &sim.join("vocab.json"),
        "pcmlm.json",
    );
    let decoded = tmp.path().join("greedy");
    run_ok(&[
        "decode",
        "--greedy",
        "--posteriors",
        sim.join("posteriors.jsonl").to_str().unwrap(),
        "--vocab",
        sim.join("vocab.json").to_str().unwrap(),
        "--out",
        decoded.to_str().unwrap(),
    ]);
    let corrected = tmp.path().join("corrected");
    run_ok(&[
        "correct",
        "--beta",
        "0",
        "--posteriors",
        sim.join("posteriors.jsonl").to_str().unwrap(),
        "--vocab",
        sim.join("vocab.json").to_str().unwrap(),
        "--lexicon",
        fixture("lexicon.tsv").to_str().unwrap(),
        "--model",
        model.to_str().unwrap(),
        "--phones",
        sim.join("phones.jsonl").to_str().unwrap(),
        "--out",
        corrected.to_str().unwrap(),
    ]);
    assert_eq!(
        words_of(&decoded.join("hyps.jsonl")),
        words_of(&corrected.join("corrected.jsonl")),
        "a zero masking threshold must leave the greedy output untouched"
    );
}

#[test]
fn phone_conditioned_model_requires_phones_flag() {
    let tmp = TempDir::new().unwrap();
    let sim = simulate_into(tmp.path(), "s", 4, 2, &[]);
    let model = train_into(
        tmp.path(),
        "pcmlm",
        &sim.join("corpus.txt"),
        &sim.join("vocab.json"),
        "pcmlm.json",
    );
    let out = run(&[
        "correct",
        "--posteriors",
        sim.join("posteriors.jsonl").to_str().unwrap(),
        "--vocab",
        sim.join("vocab.json").to_str().unwrap(),
        "--lexicon",
        fixture("lexicon.tsv").to_str().unwrap(),
        "--model",
        model.to_str().unwrap(),
        "--out",
        tmp.path().join("c").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1), "missing --phones is a usage error");
}

#[test]
fn flags_override_config_file_which_overrides_defaults() {
    let tmp = TempDir::new().unwrap();
    let sim = simulate_into(tmp.path(), "s", 6, 13, &[]);
    let model = train_into(
        tmp.path(),
        "mlm",
        &sim.join("corpus.txt"),
        &sim.join("vocab.json"),
        "mlm.json",
    );
    let conf = tmp.path().join("defaults.conf");
    fs::write(&conf, "# lab defaults\nbeta = 0.9\nalpha = 0.25\n").unwrap();

    let meta_config = |out_dir: &Path| -> serde_json::Value {
        let meta: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(out_dir.join("meta.json")).unwrap()).unwrap();
        meta["config"].clone()
    };
    let base: Vec<String> = [
        "correct",
        "--posteriors",
        sim.join("posteriors.jsonl").to_str().unwrap(),
        "--vocab",
        sim.join("vocab.json").to_str().unwrap(),
        "--lexicon",
        fixture("lexicon.tsv").to_str().unwrap(),
        "--model",
        model.to_str().unwrap(),
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();

    // Defaults only.
    let d = tmp.path().join("d");
    let mut args = base.clone();
    args.extend(["--out".into(), path_str(&d)]);
    run_ok(&args.iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(meta_config(&d)["beta"], 0.8);

    // Config file overrides the default.
    let f = tmp.path().join("f");
    let mut args = base.clone();
    args.extend(["--config".into(), path_str(&conf), "--out".into(), path_str(&f)]);
    run_ok(&args.iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(meta_config(&f)["beta"], 0.9);
    assert_eq!(meta_config(&f)["alpha"], 0.25);

    // An explicit flag beats the config file.
    let g = tmp.path().join("g");
    let mut args = base.clone();
    args.extend([
        "--config".into(),
        path_str(&conf),
        "--beta".into(),
        "0.7".into(),
        "--out".into(),
        path_str(&g),
    ]);
    run_ok(&args.iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(meta_config(&g)["beta"], 0.7);
    assert_eq!(meta_config(&g)["alpha"], 0.25);

    // A malformed config line is a data error.
    fs::write(&conf, "beta 0.9\n").unwrap();
    let mut args = base;
    args.extend(["--config".into(), path_str(&conf), "--out".into(), path_str(&tmp.path().join("h"))]);
    let out = run(&args.iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn bench_prints_one_row_per_system() {
    let tmp = TempDir::new().unwrap();
    let sim = simulate_into(tmp.path(), "s", 20, 21, &[]);
    let corpus = sim.join("corpus.txt");
    let vocab = sim.join("vocab.json");
    let ngram = train_into(tmp.path(), "ngram", &corpus, &vocab, "ngram.json");
    let del = train_into(tmp.path(), "del-pcmlm", &corpus, &vocab, "del.json");

    let out = run_ok(&[
        "bench",
        "--posteriors",
        sim.join("posteriors.jsonl").to_str().unwrap(),
        "--vocab",
        vocab.to_str().unwrap(),
        "--lexicon",
        fixture("lexicon.tsv").to_str().unwrap(),
        "--refs",
        corpus.to_str().unwrap(),
        "--phones",
        sim.join("phones.jsonl").to_str().unwrap(),
        "--systems",
        "greedy,ec-del,beam-rescore,fusion",
        "--ngram",
        ngram.to_str().unwrap(),
        "--del-pcmlm",
        del.to_str().unwrap(),
        "--runs",
        "1",
    ]);
    let stdout = String::from_utf8_lossy(&out.stdout);
    let rows: Vec<&str> = stdout.lines().filter(|l| !l.trim().is_empty()).collect();
    // One header plus one row per requested system, in the order given.
    assert_eq!(rows.len(), 5, "expected header + 4 rows, got:\n{stdout}");
    assert!(rows[1].starts_with("greedy"));
    assert!(rows[2].starts_with("ec-del-pcmlm"));
    assert!(rows[3].starts_with("rescore:5:5:0.3"), "row: {}", rows[3]);
    assert!(rows[4].starts_with("fusion:5:0.3"), "row: {}", rows[4]);
}

#[test]
fn assert_order_failure_exits_two() {
    let tmp = TempDir::new().unwrap();
    let sim = simulate_into(tmp.path(), "s", 12, 3, &[]);
    let corpus = sim.join("corpus.txt");
    let vocab = sim.join("vocab.json");
    let ngram = train_into(tmp.path(), "ngram", &corpus, &vocab, "ngram.json");
    // Fusion does strictly more work than greedy, so listing them in the
    // opposite order must trip the check.
    let out = run(&[
        "bench",
        "--posteriors",
        sim.join("posteriors.jsonl").to_str().unwrap(),
        "--vocab",
        vocab.to_str().unwrap(),
        "--lexicon",
        fixture("lexicon.tsv").to_str().unwrap(),
        "--refs",
        corpus.to_str().unwrap(),
        "--phones",
        sim.join("phones.jsonl").to_str().unwrap(),
        "--systems",
        "fusion,greedy",
        "--ngram",
        ngram.to_str().unwrap(),
        "--runs",
        "2",
        "--assert-order",
    ]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("fusion") && stderr.contains("greedy"), "stderr: {stderr}");
}

#[test]
fn eval_report_matches_stdout_table() {
    let tmp = TempDir::new().unwrap();
    let sim = simulate_into(tmp.path(), "s", 15, 17, &[]);
    let decoded = tmp.path().join("d");
    run_ok(&[
        "decode",
        "--greedy",
        "--posteriors",
        sim.join("posteriors.jsonl").to_str().unwrap(),
        "--vocab",
        sim.join("vocab.json").to_str().unwrap(),
        "--out",
        decoded.to_str().unwrap(),
    ]);
    let report = tmp.path().join("report.json");
    let out = run_ok(&[
        "eval",
        "--hyps",
        decoded.join("hyps.jsonl").to_str().unwrap(),
        "--refs",
        sim.join("corpus.txt").to_str().unwrap(),
        "--vocab",
        sim.join("vocab.json").to_str().unwrap(),
        "--out",
        report.to_str().unwrap(),
    ]);
    let stdout = String::from_utf8_lossy(&out.stdout);
    let json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    let wer = json["wer"].as_f64().unwrap();
    assert!(stdout.contains(&format!("{wer:.6}")), "table/report disagree:\n{stdout}\n{json}");
    assert_eq!(json["n_utterances"].as_u64(), Some(15));
}
