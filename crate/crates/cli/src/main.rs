//! Command-line front end: simulation, training, decoding, correction,
//! rescoring, and benchmarking over JSON Lines artifacts.
//!
//! Exit codes: 0 on success, 1 for usage problems, 2 for data or format
//! problems (missing files, malformed records, hash mismatches).

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use ctc_correct::correct::{correct_pipeline, CorrectionConfig, Provenance};
use ctc_correct::ctc::{
    greedy_decode, parse_posteriors, prefix_beam_search, FusionLm, PosteriorRecord,
};
use ctc_correct::fusion::{rescore_nbest, RescoreLm};
use ctc_correct::lexicon::{Corpus, Lexicon, Vocab};
use ctc_correct::lm::{
    train_ngram, train_pcmlm, MlmScorer, ModelKind, NgramConfig, NgramLm, PcMlmConfig,
    PcMlmModel, PcMlmScorer,
};
use ctc_correct::sim::{
    bench_rtf, confusable_sets, gen_corpus, simulate_utterance, wer, CorpusWer, CorruptionRecord,
    Edit, Pipelines, SimConfig, SimUtterance, System,
};
use ctc_correct::{PhoneId, TokenId};

const JOBS_ENV: &str = "CTC_CORRECT_JOBS";

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            print!("{e}");
            std::process::exit(0);
        }
        Err(e) => {
            eprint!("{e}");
            std::process::exit(1);
        }
    };
    match run(cli) {
        Ok(()) => {}
        Err(f) => {
            eprintln!("error: {f}");
            std::process::exit(f.code());
        }
    }
}

/// A failed command, bucketed by exit code.
enum Failure {
    Usage(String),
    Data(anyhow::Error),
}

impl Failure {
    fn code(&self) -> i32 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Usage(msg) => write!(f, "{msg}"),
            // `:#` prints the whole anyhow context chain on one line.
            Failure::Data(e) => write!(f, "{e:#}"),
        }
    }
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

macro_rules! data_from {
    ($($ty:ty),*) => {$(
        impl From<$ty> for Failure {
            fn from(e: $ty) -> Self {
                Failure::Data(e.into())
            }
        }
    )*};
}

data_from!(
    std::io::Error,
    anyhow::Error,
    ctc_correct::lexicon::LexiconError,
    ctc_correct::ctc::CtcError,
    ctc_correct::lm::LmError,
    ctc_correct::correct::CorrectError,
    ctc_correct::fusion::FusionError,
    ctc_correct::sim::SimError
);

#[derive(Parser)]
#[command(name = "ctc-correct", version, about = "CTC decoding and masked error correction")]
struct Cli {
    /// Defaults file with one `key = value` per line (# starts a comment).
    /// Command-line flags take precedence over it.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Master seed for everything random.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: $CTC_CORRECT_JOBS, then 1). `bench` and
    /// `train-lm` always run single-threaded regardless.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus with posterior grids and phone hypotheses.
    Simulate(SimulateArgs),
    /// Train a masked or n-gram language model.
    TrainLm(TrainLmArgs),
    /// Decode posterior grids (greedy or beam search, optionally fused).
    Decode(DecodeArgs),
    /// Greedy-decode, mask low-confidence tokens, and fill them with a model.
    Correct(CorrectArgs),
    /// Beam-search then rescore the n-best list with a language model.
    Rescore(RescoreArgs),
    /// Score a hypothesis file against references (WER with S/D/I counts).
    Eval(EvalArgs),
    /// Time whole systems and report WER and real-time factor.
    Bench(BenchArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// Seed corpus (one sentence per line) the generator is fitted to.
    #[arg(long, value_name = "FILE")]
    corpus: PathBuf,
    /// Pronunciation lexicon (word TAB space-separated phones).
    #[arg(long, value_name = "FILE")]
    lexicon: PathBuf,
    /// Number of utterances to generate.
    #[arg(long)]
    count: usize,
    /// Output directory (corpus.txt, vocab.json, posteriors.jsonl,
    /// phones.jsonl, corruption.jsonl, meta.json).
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long)]
    sub_rate: Option<f64>,
    #[arg(long)]
    del_rate: Option<f64>,
    #[arg(long)]
    ins_rate: Option<f64>,
    #[arg(long)]
    c_hi: Option<f64>,
    #[arg(long)]
    c_lo: Option<f64>,
    #[arg(long)]
    blank_rate: Option<f64>,
    /// Phone error rate of the synthetic phone recognizer.
    #[arg(long)]
    per: Option<f64>,
    #[arg(long)]
    frame_sec: Option<f64>,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum TrainKind {
    Mlm,
    Pcmlm,
    DelPcmlm,
    Ngram,
}

#[derive(Args)]
struct TrainLmArgs {
    #[arg(long, value_enum)]
    kind: TrainKind,
    /// Training corpus (one sentence per line).
    #[arg(long, value_name = "FILE")]
    corpus: PathBuf,
    /// Vocabulary the model is bound to (vocab.json).
    #[arg(long, value_name = "FILE")]
    vocab: PathBuf,
    /// Pronunciation lexicon; required for the masked kinds.
    #[arg(long, value_name = "FILE")]
    lexicon: Option<PathBuf>,
    /// Output model file (JSON, embeds its training config).
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    #[arg(long)]
    mask_rate: Option<f64>,
    /// Poisson mean of inserted-mask training noise (del-pcmlm only).
    #[arg(long = "lambda")]
    insert_lambda: Option<f64>,
    #[arg(long)]
    phone_mask_rate: Option<f64>,
    #[arg(long)]
    passes: Option<u32>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    /// N-gram order (ngram only).
    #[arg(long)]
    order: Option<usize>,
}

#[derive(Args)]
struct DecodeArgs {
    #[arg(long, value_name = "FILE")]
    posteriors: PathBuf,
    #[arg(long, value_name = "FILE")]
    vocab: PathBuf,
    /// Frame-wise argmax decoding.
    #[arg(long, group = "mode")]
    greedy: bool,
    /// Prefix beam search.
    #[arg(long, group = "mode")]
    beam: bool,
    #[arg(long)]
    beam_width: Option<usize>,
    /// N-gram model for shallow fusion (beam mode only).
    #[arg(long, value_name = "FILE", conflicts_with = "greedy")]
    lm: Option<PathBuf>,
    #[arg(long)]
    lm_weight: Option<f64>,
    /// Output directory (hyps.jsonl, timings.jsonl, meta.json).
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

#[derive(Args)]
struct CorrectArgs {
    #[arg(long, value_name = "FILE")]
    posteriors: PathBuf,
    #[arg(long, value_name = "FILE")]
    vocab: PathBuf,
    #[arg(long, value_name = "FILE")]
    lexicon: PathBuf,
    /// Masked model file from `train-lm` (its kind picks the scorer).
    #[arg(long, value_name = "FILE")]
    model: PathBuf,
    /// Phone hypotheses (phones.jsonl); required unless the model is
    /// context-only.
    #[arg(long, value_name = "FILE")]
    phones: Option<PathBuf>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    /// Output directory (corrected.jsonl, timings.jsonl, meta.json).
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

#[derive(Args)]
#[command(group = clap::ArgGroup::new("rescorer").required(true).multiple(false))]
struct RescoreArgs {
    #[arg(long, value_name = "FILE")]
    posteriors: PathBuf,
    #[arg(long, value_name = "FILE")]
    vocab: PathBuf,
    /// Autoregressive n-gram model to rescore with.
    #[arg(long, value_name = "FILE", group = "rescorer")]
    lm: Option<PathBuf>,
    /// Masked model scored as a pseudo log-likelihood instead.
    #[arg(long, value_name = "FILE", group = "rescorer")]
    masked_lm: Option<PathBuf>,
    /// Lexicon (only needed with --masked-lm).
    #[arg(long, value_name = "FILE")]
    lexicon: Option<PathBuf>,
    #[arg(long)]
    lm_weight: Option<f64>,
    #[arg(long)]
    beam_width: Option<usize>,
    #[arg(long)]
    nbest: Option<usize>,
    /// Output directory (rescored.jsonl, timings.jsonl, meta.json).
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Hypothesis file: JSON Lines with `id` and `words` (as written by
    /// decode, correct, and rescore).
    #[arg(long, value_name = "FILE")]
    hyps: PathBuf,
    /// Reference corpus, one sentence per line, in utterance order.
    #[arg(long, value_name = "FILE")]
    refs: PathBuf,
    #[arg(long, value_name = "FILE")]
    vocab: PathBuf,
    /// Optional JSON report destination (a table always goes to stdout).
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, value_name = "FILE")]
    posteriors: PathBuf,
    #[arg(long, value_name = "FILE")]
    vocab: PathBuf,
    #[arg(long, value_name = "FILE")]
    lexicon: PathBuf,
    #[arg(long, value_name = "FILE")]
    refs: PathBuf,
    #[arg(long, value_name = "FILE")]
    phones: PathBuf,
    /// Comma-separated systems, e.g. greedy,ec-del,beam-rescore,fusion.
    #[arg(long, value_delimiter = ',')]
    systems: Vec<String>,
    #[arg(long, value_name = "FILE")]
    ngram: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    mlm: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    pcmlm: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    del_pcmlm: Option<PathBuf>,
    /// Timed passes over the set (after one untimed warm-up pass).
    #[arg(long)]
    runs: Option<usize>,
    /// Fail (exit 2) unless RTF strictly increases in the listed order.
    #[arg(long)]
    assert_order: bool,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

/// Every tunable the tool understands, after merging defaults, the config
/// file, and command-line flags (in increasing precedence). Serialized
/// verbatim into each output's meta/report as the config echo.
#[derive(Debug, Clone, Serialize)]
struct Settings {
    seed: u64,
    jobs: usize,
    beta: f64,
    alpha: f64,
    mask_rate: f64,
    insert_lambda: f64,
    phone_mask_rate: f64,
    beam_width: usize,
    nbest: usize,
    lm_weight: f64,
    delta: f64,
    gamma: f64,
    order: usize,
    passes: u32,
    sub_rate: f64,
    del_rate: f64,
    ins_rate: f64,
    c_hi: f64,
    c_lo: f64,
    blank_rate: f64,
    per: f64,
    frame_sec: f64,
    max_len: usize,
    runs: usize,
}

impl Default for Settings {
    fn default() -> Self {
        let correction = CorrectionConfig::default();
        let masked = PcMlmConfig::default();
        let ngram = NgramConfig::default();
        let sim = SimConfig::default();
        Settings {
            seed: 0,
            jobs: 1,
            beta: correction.beta,
            alpha: correction.alpha,
            mask_rate: masked.mask_rate,
            insert_lambda: masked.insert_lambda,
            phone_mask_rate: masked.phone_mask_rate,
            beam_width: 5,
            nbest: 5,
            lm_weight: 0.3,
            delta: masked.delta,
            gamma: masked.gamma,
            order: ngram.order,
            passes: masked.passes,
            sub_rate: sim.sub_rate,
            del_rate: sim.del_rate,
            ins_rate: sim.ins_rate,
            c_hi: sim.c_hi,
            c_lo: sim.c_lo,
            blank_rate: sim.blank_rate,
            per: sim.phone_error_rate,
            frame_sec: sim.frame_sec,
            max_len: 12,
            runs: 5,
        }
    }
}

impl Settings {
    /// Applies one `key = value` pair (config-file syntax).
    fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, String> {
            value.parse().map_err(|_| format!("bad value {value:?} for {key}"))
        }
        match key {
            "seed" => self.seed = parse(key, value)?,
            "jobs" => self.jobs = parse(key, value)?,
            "beta" => self.beta = parse(key, value)?,
            "alpha" => self.alpha = parse(key, value)?,
            "mask-rate" => self.mask_rate = parse(key, value)?,
            "lambda" => self.insert_lambda = parse(key, value)?,
            "phone-mask-rate" => self.phone_mask_rate = parse(key, value)?,
            "beam-width" => self.beam_width = parse(key, value)?,
            "nbest" => self.nbest = parse(key, value)?,
            "lm-weight" => self.lm_weight = parse(key, value)?,
            "delta" => self.delta = parse(key, value)?,
            "gamma" => self.gamma = parse(key, value)?,
            "order" => self.order = parse(key, value)?,
            "passes" => self.passes = parse(key, value)?,
            "sub-rate" => self.sub_rate = parse(key, value)?,
            "del-rate" => self.del_rate = parse(key, value)?,
            "ins-rate" => self.ins_rate = parse(key, value)?,
            "c-hi" => self.c_hi = parse(key, value)?,
            "c-lo" => self.c_lo = parse(key, value)?,
            "blank-rate" => self.blank_rate = parse(key, value)?,
            "per" => self.per = parse(key, value)?,
            "frame-sec" => self.frame_sec = parse(key, value)?,
            "max-len" => self.max_len = parse(key, value)?,
            "runs" => self.runs = parse(key, value)?,
            _ => return Err(format!("unknown config key {key:?}")),
        }
        Ok(())
    }

    fn apply_file(&mut self, path: &Path) -> Result<(), Failure> {
        let text = fs::read_to_string(path)
            .map_err(|e| Failure::Data(anyhow::anyhow!("config file {}: {e}", path.display())))?;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| {
                    Failure::Data(anyhow::anyhow!(
                        "config file {} line {}: expected key = value, got {raw:?}",
                        path.display(),
                        i + 1
                    ))
                })?;
            self.set(key.trim(), value.trim()).map_err(|msg| {
                Failure::Data(anyhow::anyhow!(
                    "config file {} line {}: {msg}",
                    path.display(),
                    i + 1
                ))
            })?;
        }
        Ok(())
    }

    fn sim_config(&self) -> SimConfig {
        SimConfig {
            sub_rate: self.sub_rate,
            del_rate: self.del_rate,
            ins_rate: self.ins_rate,
            c_hi: self.c_hi,
            c_lo: self.c_lo,
            blank_rate: self.blank_rate,
            phone_error_rate: self.per,
            frame_sec: self.frame_sec,
            seed: self.seed,
        }
    }

    fn masked_config(&self, kind: ModelKind) -> PcMlmConfig {
        PcMlmConfig {
            kind,
            delta: self.delta,
            gamma: self.gamma,
            mask_rate: self.mask_rate,
            insert_lambda: self.insert_lambda,
            phone_mask_rate: self.phone_mask_rate,
            passes: self.passes,
            seed: self.seed,
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let mut settings = Settings::default();
    if let Ok(jobs) = std::env::var(JOBS_ENV) {
        settings.jobs = jobs
            .parse()
            .map_err(|_| usage(format!("${JOBS_ENV} must be a thread count, got {jobs:?}")))?;
    }
    if let Some(path) = &cli.config {
        settings.apply_file(path)?;
    }
    if let Some(seed) = cli.seed {
        settings.seed = seed;
    }
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            return Err(usage("--jobs must be at least 1"));
        }
        settings.jobs = jobs;
    }
    match cli.command {
        Command::Simulate(args) => cmd_simulate(args, settings),
        Command::TrainLm(args) => cmd_train_lm(args, settings),
        Command::Decode(args) => cmd_decode(args, settings),
        Command::Correct(args) => cmd_correct(args, settings),
        Command::Rescore(args) => cmd_rescore(args, settings),
        Command::Eval(args) => cmd_eval(args, settings),
        Command::Bench(args) => cmd_bench(args, settings),
    }
}

/// Applies `f` to every item, in parallel when `jobs > 1`, preserving
/// input order either way.
fn run_jobs<T, R, F>(jobs: usize, items: &[T], f: F) -> Result<Vec<R>, Failure>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> Result<R, Failure> + Sync,
{
    if jobs <= 1 || items.len() <= 1 {
        return items.iter().enumerate().map(|(i, item)| f(i, item)).collect();
    }
    use rayon::prelude::*;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Failure::Data(anyhow::anyhow!("thread pool: {e}")))?;
    pool.install(|| items.par_iter().enumerate().map(|(i, item)| f(i, item)).collect())
}

// ---------------------------------------------------------------------------
// Output plumbing

/// Sidecar written next to every output so runs are self-describing:
/// the resolved configuration, the inputs (by file name), and their
/// content hashes. Deliberately free of timestamps, directories, and
/// output paths, so identical invocations produce byte-identical trees
/// no matter where their inputs happened to live.
#[derive(Serialize)]
struct Meta<'a> {
    command: &'static str,
    config: &'a Settings,
    inputs: BTreeMap<&'static str, String>,
    hashes: BTreeMap<&'static str, String>,
}

impl<'a> Meta<'a> {
    fn new(command: &'static str, config: &'a Settings) -> Self {
        Meta { command, config, inputs: BTreeMap::new(), hashes: BTreeMap::new() }
    }

    fn input(mut self, name: &'static str, path: &Path) -> Self {
        let file = path
            .file_name()
            .map_or_else(|| path.display().to_string(), |f| f.to_string_lossy().into_owned());
        self.inputs.insert(name, file);
        self
    }

    fn input_opt(self, name: &'static str, path: &Option<PathBuf>) -> Self {
        match path {
            Some(p) => self.input(name, p),
            None => self,
        }
    }

    fn hash(mut self, name: &'static str, value: impl Into<String>) -> Self {
        self.hashes.insert(name, value.into());
        self
    }

    fn write(&self, dir: &Path) -> Result<(), Failure> {
        let mut text = serde_json::to_string_pretty(self).expect("meta serializes");
        text.push('\n');
        write_file(&dir.join("meta.json"), text.as_bytes())
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    let mut f = fs::File::create(path)
        .map_err(|e| Failure::Data(anyhow::anyhow!("create {}: {e}", path.display())))?;
    f.write_all(bytes)
        .and_then(|()| f.flush())
        .map_err(|e| Failure::Data(anyhow::anyhow!("write {}: {e}", path.display())))?;
    Ok(())
}

fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<(), Failure> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("record serializes"));
        out.push('\n');
    }
    write_file(path, out.as_bytes())
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, Failure> {
    let text = fs::read_to_string(path)
        .map_err(|e| Failure::Data(anyhow::anyhow!("read {}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(line).map_err(|e| {
            Failure::Data(anyhow::anyhow!("{} line {}: {e}", path.display(), i + 1))
        })?;
        out.push(record);
    }
    Ok(out)
}

fn make_out_dir(path: &Path) -> Result<(), Failure> {
    fs::create_dir_all(path)
        .map_err(|e| Failure::Data(anyhow::anyhow!("create {}: {e}", path.display())))
}

// Line formats shared between subcommands.

#[derive(Serialize, Deserialize)]
struct PhoneLine {
    id: String,
    phones: Vec<String>,
}

#[derive(Serialize)]
struct CorruptionLine<'a> {
    id: &'a str,
    reference: Vec<&'a str>,
    corrupted: Vec<&'a str>,
    edits: &'a [Edit],
}

#[derive(Serialize)]
struct HypLine<'a> {
    id: &'a str,
    words: Vec<&'a str>,
    score: f64,
}

#[derive(Serialize)]
struct CorrectedLine<'a> {
    id: &'a str,
    words: Vec<&'a str>,
    masked: &'a [usize],
    provenance: &'a [Provenance],
}

#[derive(Serialize)]
struct RescoredLine<'a> {
    id: &'a str,
    words: Vec<&'a str>,
    chosen: usize,
    scores: &'a [f64],
}

/// The least any hypothesis line carries; extra fields are ignored, so
/// eval accepts the output of decode, correct, and rescore alike.
#[derive(Deserialize)]
struct EvalLine {
    id: String,
    words: Vec<String>,
}

#[derive(Serialize)]
struct WallLine<'a> {
    id: &'a str,
    wall_sec: f64,
}

#[derive(Serialize)]
struct StageLine<'a> {
    id: &'a str,
    decode_sec: f64,
    align_sec: f64,
    score_sec: f64,
    total_sec: f64,
}

#[derive(Serialize)]
struct SearchTimingLine<'a> {
    id: &'a str,
    search_sec: f64,
    rescore_sec: f64,
}

fn word_strs<'a>(vocab: &'a Vocab, ids: &[TokenId]) -> Result<Vec<&'a str>, Failure> {
    ids.iter().map(|&id| Ok(vocab.token(id)?)).collect()
}

// ---------------------------------------------------------------------------
// simulate

fn cmd_simulate(args: SimulateArgs, mut settings: Settings) -> Result<(), Failure> {
    for (flag, slot) in [
        (args.sub_rate, &mut settings.sub_rate),
        (args.del_rate, &mut settings.del_rate),
        (args.ins_rate, &mut settings.ins_rate),
        (args.c_hi, &mut settings.c_hi),
        (args.c_lo, &mut settings.c_lo),
        (args.blank_rate, &mut settings.blank_rate),
        (args.per, &mut settings.per),
        (args.frame_sec, &mut settings.frame_sec),
    ] {
        if let Some(v) = flag {
            *slot = v;
        }
    }
    if let Some(v) = args.max_len {
        settings.max_len = v;
    }

    let seed_corpus = Corpus::load(&args.corpus)?;
    let lexicon = Lexicon::load(&args.lexicon)?;
    let vocab = Vocab::from_corpus(&seed_corpus)?;
    let prons = lexicon.pron_table(&vocab)?;
    let sim = settings.sim_config();
    sim.validate()?;
    if vocab.n_words() < 2 {
        return Err(Failure::Data(anyhow::anyhow!(
            "seed corpus has {} distinct words; need at least 2",
            vocab.n_words()
        )));
    }

    let corpus = gen_corpus(&seed_corpus, args.count, settings.max_len, settings.seed)?;
    let confusables = confusable_sets(&prons);
    let utts = run_jobs(settings.jobs, corpus.utterances(), |u, words| {
        Ok(simulate_utterance(u, words, &vocab, &prons, &confusables, &sim)?)
    })?;

    make_out_dir(&args.out)?;
    write_file(&args.out.join("corpus.txt"), corpus.to_text().as_bytes())?;
    vocab.save(&args.out.join("vocab.json"))?;

    let mut posteriors = String::new();
    let mut phones = Vec::with_capacity(utts.len());
    let mut corruption = Vec::with_capacity(utts.len());
    for utt in &utts {
        posteriors.push_str(&PosteriorRecord::new(utt.id.clone(), &utt.post, &vocab).to_line());
        phones.push(PhoneLine {
            id: utt.id.clone(),
            phones: utt.phone_hyp.iter().map(|&p| lexicon.phone_name(p).to_owned()).collect(),
        });
        corruption.push(CorruptionLine {
            id: &utt.id,
            reference: word_strs(&vocab, &utt.reference)?,
            corrupted: word_strs(&vocab, &utt.corruption.corrupted)?,
            edits: &utt.corruption.edits,
        });
    }
    write_file(&args.out.join("posteriors.jsonl"), posteriors.as_bytes())?;
    write_jsonl(&args.out.join("phones.jsonl"), &phones)?;
    write_jsonl(&args.out.join("corruption.jsonl"), &corruption)?;

    Meta::new("simulate", &settings)
        .input("corpus", &args.corpus)
        .input("lexicon", &args.lexicon)
        .hash("vocab", vocab.hash())
        .hash("lexicon", lexicon.hash())
        .write(&args.out)
}

// ---------------------------------------------------------------------------
// train-lm

fn cmd_train_lm(args: TrainLmArgs, mut settings: Settings) -> Result<(), Failure> {
    for (flag, slot) in [
        (args.mask_rate, &mut settings.mask_rate),
        (args.insert_lambda, &mut settings.insert_lambda),
        (args.phone_mask_rate, &mut settings.phone_mask_rate),
        (args.delta, &mut settings.delta),
        (args.gamma, &mut settings.gamma),
    ] {
        if let Some(v) = flag {
            *slot = v;
        }
    }
    if let Some(v) = args.passes {
        settings.passes = v;
    }
    if let Some(v) = args.order {
        settings.order = v;
    }

    let corpus = Corpus::load(&args.corpus)?;
    let vocab = Vocab::load(&args.vocab)?;
    match args.kind {
        TrainKind::Ngram => {
            let config = NgramConfig { order: settings.order, delta: settings.delta };
            let model = train_ngram(&corpus, &vocab, config)?;
            model.save(&args.out)?;
        }
        TrainKind::Mlm | TrainKind::Pcmlm | TrainKind::DelPcmlm => {
            let kind = match args.kind {
                TrainKind::Mlm => ModelKind::Mlm,
                TrainKind::Pcmlm => ModelKind::Pcmlm,
                _ => ModelKind::DelPcmlm,
            };
            let lex_path = args
                .lexicon
                .as_ref()
                .ok_or_else(|| usage("--lexicon is required for masked model kinds"))?;
            let lexicon = Lexicon::load(lex_path)?;
            let model = train_pcmlm(&corpus, &vocab, &lexicon, settings.masked_config(kind))?;
            model.save(&args.out)?;
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// decode

fn cmd_decode(args: DecodeArgs, mut settings: Settings) -> Result<(), Failure> {
    if !args.greedy && !args.beam {
        return Err(usage("decode needs a mode: --greedy or --beam"));
    }
    if let Some(v) = args.beam_width {
        settings.beam_width = v;
    }
    if let Some(v) = args.lm_weight {
        settings.lm_weight = v;
    }

    let vocab = Vocab::load(&args.vocab)?;
    let posts = parse_posteriors(&fs::read_to_string(&args.posteriors)?, &vocab)?;
    let lm = match &args.lm {
        Some(path) => Some(NgramLm::load(path, &vocab)?),
        None => None,
    };

    let width = settings.beam_width;
    let weight = settings.lm_weight;
    let decoded: Vec<(Vec<TokenId>, f64, Duration)> =
        run_jobs(settings.jobs, &posts, |_, (_, post)| {
            if args.greedy {
                let (_, hyp) = greedy_decode(post);
                Ok((hyp.tokens, hyp.score, hyp.wall))
            } else {
                let fusion = lm.as_ref().map(|m| (m as &dyn FusionLm, weight));
                let hyps = prefix_beam_search(post, width, fusion, &vocab)?;
                let best = hyps.into_iter().next().expect("beam output is never empty");
                Ok((best.tokens, best.score, best.wall))
            }
        })?;

    make_out_dir(&args.out)?;
    let mut hyps = Vec::with_capacity(decoded.len());
    let mut timings = Vec::with_capacity(decoded.len());
    for ((id, _), (tokens, score, wall)) in posts.iter().zip(&decoded) {
        hyps.push(HypLine { id, words: word_strs(&vocab, tokens)?, score: *score });
        timings.push(WallLine { id, wall_sec: wall.as_secs_f64() });
    }
    write_jsonl(&args.out.join("hyps.jsonl"), &hyps)?;
    write_jsonl(&args.out.join("timings.jsonl"), &timings)?;

    Meta::new("decode", &settings)
        .input("posteriors", &args.posteriors)
        .input("vocab", &args.vocab)
        .input_opt("lm", &args.lm)
        .hash("vocab", vocab.hash())
        .write(&args.out)
}

// ---------------------------------------------------------------------------
// correct

/// Reads phones.jsonl into per-utterance phone id sequences.
fn load_phone_hyps(
    path: &Path,
    lexicon: &Lexicon,
) -> Result<BTreeMap<String, Vec<PhoneId>>, Failure> {
    let lines: Vec<PhoneLine> = read_jsonl(path)?;
    let mut out = BTreeMap::new();
    for line in lines {
        let ids = line
            .phones
            .iter()
            .map(|name| Ok(lexicon.phone_id(name)?))
            .collect::<Result<Vec<_>, Failure>>()?;
        out.insert(line.id, ids);
    }
    Ok(out)
}

fn cmd_correct(args: CorrectArgs, mut settings: Settings) -> Result<(), Failure> {
    if let Some(v) = args.beta {
        settings.beta = v;
    }
    if let Some(v) = args.alpha {
        settings.alpha = v;
    }

    let vocab = Vocab::load(&args.vocab)?;
    let lexicon = Lexicon::load(&args.lexicon)?;
    let model = PcMlmModel::load(&args.model, &vocab, &lexicon)?;
    let posts = parse_posteriors(&fs::read_to_string(&args.posteriors)?, &vocab)?;

    let kind = model.config.kind;
    let phone_hyps = match (&args.phones, kind) {
        (None, ModelKind::Mlm) => BTreeMap::new(),
        (None, _) => {
            return Err(usage("--phones is required for phone-conditioned models"));
        }
        (Some(path), _) => load_phone_hyps(path, &lexicon)?,
    };
    let empty: Vec<PhoneId> = Vec::new();
    let phones_for = |id: &str| -> Result<&Vec<PhoneId>, Failure> {
        if kind == ModelKind::Mlm && !phone_hyps.contains_key(id) {
            return Ok(&empty);
        }
        phone_hyps
            .get(id)
            .ok_or_else(|| Failure::Data(anyhow::anyhow!("no phone hypothesis for {id}")))
    };

    let config = CorrectionConfig {
        beta: settings.beta,
        alpha: settings.alpha,
        deletable: model.config.deletable(),
    };
    let mlm_scorer = MlmScorer { model: &model };
    let pc_scorer = PcMlmScorer { model: &model };

    let results = run_jobs(settings.jobs, &posts, |_, (id, post)| {
        let result = match kind {
            ModelKind::Mlm => correct_pipeline(post, phones_for(id)?, &mlm_scorer, &config, &vocab),
            ModelKind::Pcmlm | ModelKind::DelPcmlm => {
                correct_pipeline(post, phones_for(id)?, &pc_scorer, &config, &vocab)
            }
        };
        Ok(result?)
    })?;

    make_out_dir(&args.out)?;
    let mut corrected = Vec::with_capacity(results.len());
    let mut timings = Vec::with_capacity(results.len());
    for ((id, _), result) in posts.iter().zip(&results) {
        corrected.push(CorrectedLine {
            id,
            words: word_strs(&vocab, &result.tokens)?,
            masked: &result.masked,
            provenance: &result.provenance,
        });
        timings.push(StageLine {
            id,
            decode_sec: result.timings.decode.as_secs_f64(),
            align_sec: result.timings.align.as_secs_f64(),
            score_sec: result.timings.score.as_secs_f64(),
            total_sec: result.timings.total.as_secs_f64(),
        });
    }
    write_jsonl(&args.out.join("corrected.jsonl"), &corrected)?;
    write_jsonl(&args.out.join("timings.jsonl"), &timings)?;

    Meta::new("correct", &settings)
        .input("posteriors", &args.posteriors)
        .input("vocab", &args.vocab)
        .input("lexicon", &args.lexicon)
        .input("model", &args.model)
        .input_opt("phones", &args.phones)
        .hash("vocab", vocab.hash())
        .hash("lexicon", lexicon.hash())
        .write(&args.out)
}

// ---------------------------------------------------------------------------
// rescore

fn cmd_rescore(args: RescoreArgs, mut settings: Settings) -> Result<(), Failure> {
    if let Some(v) = args.lm_weight {
        settings.lm_weight = v;
    }
    if let Some(v) = args.beam_width {
        settings.beam_width = v;
    }
    if let Some(v) = args.nbest {
        settings.nbest = v;
    }

    let vocab = Vocab::load(&args.vocab)?;
    let posts = parse_posteriors(&fs::read_to_string(&args.posteriors)?, &vocab)?;

    enum Loaded {
        Ar(NgramLm),
        Masked(PcMlmModel),
    }
    let loaded = if let Some(path) = &args.lm {
        Loaded::Ar(NgramLm::load(path, &vocab)?)
    } else {
        let path = args.masked_lm.as_ref().expect("clap guarantees one rescorer");
        let lex_path = args
            .lexicon
            .as_ref()
            .ok_or_else(|| usage("--lexicon is required with --masked-lm"))?;
        let lexicon = Lexicon::load(lex_path)?;
        Loaded::Masked(PcMlmModel::load(path, &vocab, &lexicon)?)
    };

    let width = settings.beam_width;
    let nbest = settings.nbest;
    let weight = settings.lm_weight;
    let outcomes = run_jobs(settings.jobs, &posts, |_, (_, post)| {
        let search_start = std::time::Instant::now();
        let hyps = prefix_beam_search(post, width, None, &vocab)?;
        let search = search_start.elapsed();
        let top = &hyps[..nbest.min(hyps.len())];
        let rescore_start = std::time::Instant::now();
        let out = match &loaded {
            Loaded::Ar(m) => rescore_nbest(top, &RescoreLm::Ar(m), weight)?,
            Loaded::Masked(m) => {
                let scorer = MlmScorer { model: m };
                let lm = RescoreLm::Pll { scorer: &scorer, mask_id: vocab.mask_id() };
                rescore_nbest(top, &lm, weight)?
            }
        };
        Ok((out, search, rescore_start.elapsed()))
    })?;

    make_out_dir(&args.out)?;
    let mut rescored = Vec::with_capacity(outcomes.len());
    let mut timings = Vec::with_capacity(outcomes.len());
    for ((id, _), (out, search, rescore)) in posts.iter().zip(&outcomes) {
        rescored.push(RescoredLine {
            id,
            words: word_strs(&vocab, &out.best.tokens)?,
            chosen: out.chosen,
            scores: &out.scores,
        });
        timings.push(SearchTimingLine {
            id,
            search_sec: search.as_secs_f64(),
            rescore_sec: rescore.as_secs_f64(),
        });
    }
    write_jsonl(&args.out.join("rescored.jsonl"), &rescored)?;
    write_jsonl(&args.out.join("timings.jsonl"), &timings)?;

    Meta::new("rescore", &settings)
        .input("posteriors", &args.posteriors)
        .input("vocab", &args.vocab)
        .input_opt("lm", &args.lm)
        .input_opt("masked-lm", &args.masked_lm)
        .hash("vocab", vocab.hash())
        .write(&args.out)
}

// ---------------------------------------------------------------------------
// eval

fn load_references(path: &Path, vocab: &Vocab) -> Result<Vec<Vec<TokenId>>, Failure> {
    let corpus = Corpus::load(path)?;
    corpus.utterances().iter().map(|words| Ok(vocab.encode(words)?)).collect()
}

fn cmd_eval(args: EvalArgs, settings: Settings) -> Result<(), Failure> {
    let vocab = Vocab::load(&args.vocab)?;
    let refs = load_references(&args.refs, &vocab)?;
    let hyps: Vec<EvalLine> = read_jsonl(&args.hyps)?;
    if hyps.len() != refs.len() {
        return Err(Failure::Data(anyhow::anyhow!(
            "{} hypotheses vs {} references",
            hyps.len(),
            refs.len()
        )));
    }

    let mut pool = CorpusWer::default();
    for (reference, hyp) in refs.iter().zip(&hyps) {
        let tokens = vocab
            .encode(&hyp.words)
            .map_err(|e| Failure::Data(anyhow::anyhow!("{}: {e}", hyp.id)))?;
        pool.add(&wer(reference, &tokens));
    }

    let report = serde_json::json!({
        "wer": pool.wer(),
        "substitutions": pool.substitutions,
        "deletions": pool.deletions,
        "insertions": pool.insertions,
        "n_ref": pool.n_ref,
        "n_utterances": hyps.len(),
        "config": &settings,
    });
    println!("{:<12} {:>10} {:>6} {:>6} {:>6} {:>8}", "wer", "n_ref", "sub", "del", "ins", "utts");
    println!(
        "{:<12.6} {:>10} {:>6} {:>6} {:>6} {:>8}",
        pool.wer(),
        pool.n_ref,
        pool.substitutions,
        pool.deletions,
        pool.insertions,
        hyps.len()
    );
    if let Some(path) = &args.out {
        let mut text = serde_json::to_string_pretty(&report).expect("report serializes");
        text.push('\n');
        write_file(path, text.as_bytes())?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// bench

fn cmd_bench(args: BenchArgs, mut settings: Settings) -> Result<(), Failure> {
    if let Some(v) = args.beta {
        settings.beta = v;
    }
    if let Some(v) = args.alpha {
        settings.alpha = v;
    }
    if let Some(v) = args.runs {
        settings.runs = v;
    }
    if args.systems.is_empty() {
        return Err(usage("--systems needs at least one system"));
    }
    let systems = args
        .systems
        .iter()
        .map(|name| name.parse::<System>().map_err(|e| usage(e.to_string())))
        .collect::<Result<Vec<_>, _>>()?;

    let vocab = Vocab::load(&args.vocab)?;
    let lexicon = Lexicon::load(&args.lexicon)?;
    let prons = lexicon.pron_table(&vocab)?;
    let posts = parse_posteriors(&fs::read_to_string(&args.posteriors)?, &vocab)?;
    let refs = load_references(&args.refs, &vocab)?;
    if posts.len() != refs.len() {
        return Err(Failure::Data(anyhow::anyhow!(
            "{} posterior records vs {} references",
            posts.len(),
            refs.len()
        )));
    }
    let phone_hyps = load_phone_hyps(&args.phones, &lexicon)?;

    // Benchmarked systems decode from the posteriors alone; references and
    // phones ride along for WER and the phone-conditioned scorers.
    let utts: Vec<SimUtterance> = posts
        .into_iter()
        .zip(refs)
        .map(|((id, post), reference)| {
            let phone_hyp = phone_hyps
                .get(&id)
                .cloned()
                .ok_or_else(|| Failure::Data(anyhow::anyhow!("no phone hypothesis for {id}")))?;
            let ref_phones =
                reference.iter().flat_map(|&w| prons.pron(w).iter().copied()).collect();
            let edits = (0..reference.len()).map(|i| Edit::Keep { reference: i }).collect();
            Ok(SimUtterance {
                id,
                corruption: CorruptionRecord { edits, corrupted: reference.clone() },
                reference,
                ref_phones,
                post,
                phone_hyp,
            })
        })
        .collect::<Result<_, Failure>>()?;

    let ngram = args.ngram.as_ref().map(|p| NgramLm::load(p, &vocab)).transpose()?;
    let load_masked = |path: &Option<PathBuf>| -> Result<Option<PcMlmModel>, Failure> {
        Ok(path.as_ref().map(|p| PcMlmModel::load(p, &vocab, &lexicon)).transpose()?)
    };
    let mlm = load_masked(&args.mlm)?;
    let pcmlm = load_masked(&args.pcmlm)?;
    let del_pcmlm = load_masked(&args.del_pcmlm)?;

    let mut pipelines = Pipelines::new(&vocab);
    pipelines.ngram = ngram.as_ref();
    pipelines.mlm = mlm.as_ref();
    pipelines.pcmlm = pcmlm.as_ref();
    pipelines.del_pcmlm = del_pcmlm.as_ref();
    pipelines.beta = settings.beta;
    pipelines.alpha = settings.alpha;

    // Timing protocol: batch size 1, strictly sequential; --jobs is ignored.
    let mut reports = Vec::with_capacity(systems.len());
    println!("{:<16} {:>10} {:>12}", "system", "wer", "rtf");
    for system in &systems {
        let report = bench_rtf(&utts, system, &pipelines, settings.runs)?;
        println!("{:<16} {:>10.6} {:>12.6}", report.system, report.wer, report.rtf);
        reports.push(report);
    }

    if let Some(path) = &args.out {
        let doc = serde_json::json!({ "config": &settings, "systems": &reports });
        let mut text = serde_json::to_string_pretty(&doc).expect("report serializes");
        text.push('\n');
        write_file(path, text.as_bytes())?;
    }

    if args.assert_order {
        for pair in reports.windows(2) {
            if pair[0].rtf >= pair[1].rtf {
                return Err(Failure::Data(anyhow::anyhow!(
                    "RTF order violated: {} ({:.6}) is not faster than {} ({:.6})",
                    pair[0].system,
                    pair[0].rtf,
                    pair[1].system,
                    pair[1].rtf
                )));
            }
        }
    }
    Ok(())
}
