//! Synthetic posterior simulator: corrupts reference sentences with
//! substitution/deletion/insertion noise, renders the corrupted sequence as
//! a frame posterior grid, and produces a noisy phone hypothesis for the
//! same audio. Everything is driven by per-utterance RNG streams, so a
//! corpus simulates identically for a given seed regardless of chunking.
//!
//! Grid construction keeps a hard invariant: greedy decoding of a
//! synthesized grid recovers exactly the corrupted token sequence. Each
//! emitted token becomes a run of 1-3 identical frames with `c_hi` (clean)
//! or `c_lo` (erroneous) on the token, half the remainder on the blank, and
//! half spread over the token's confusables; identical adjacent tokens are
//! always separated by a blank frame. The invariant holds because the
//! validated configs keep every peak above the blank share.

mod bench;
mod wer;

pub use bench::{bench_rtf, run_system, EvalReport, Pipelines, System};
pub use wer::{wer, CorpusWer, WerOp, WerReport};

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::ctc::{CtcError, FramePosteriors};
use crate::correct::CorrectError;
use crate::fusion::FusionError;
use crate::lexicon::{Corpus, LexiconError, PronTable, Vocab};
use crate::lm::LmError;
use crate::rng::stream_rng;
use crate::{PhoneId, TokenId};

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("bad simulator config: {0}")]
    BadConfig(String),
    #[error("seed corpus is empty")]
    EmptySeedCorpus,
    #[error("simulation needs at least two vocabulary words, got {0}")]
    VocabTooSmall(usize),
    #[error("no utterances to evaluate")]
    NoUtterances,
    #[error("unknown system {0:?}")]
    UnknownSystem(String),
    #[error("system {system} needs a {model} model")]
    MissingModel { system: String, model: &'static str },
    #[error(transparent)]
    Lexicon(#[from] LexiconError),
    #[error(transparent)]
    Ctc(#[from] CtcError),
    #[error(transparent)]
    Lm(#[from] LmError),
    #[error(transparent)]
    Correct(#[from] CorrectError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub sub_rate: f64,
    pub del_rate: f64,
    pub ins_rate: f64,
    /// Peak confidence of correctly kept tokens.
    pub c_hi: f64,
    /// Peak confidence of substituted and inserted tokens.
    pub c_lo: f64,
    /// Chance of an extra blank separator frame after each token group.
    pub blank_rate: f64,
    /// Error rate of the phone channel (thirds: sub, delete, insert).
    pub phone_error_rate: f64,
    pub frame_sec: f64,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            sub_rate: 0.15,
            del_rate: 0.0,
            ins_rate: 0.0,
            c_hi: 0.95,
            c_lo: 0.4,
            blank_rate: 0.3,
            phone_error_rate: 0.091,
            frame_sec: 0.01,
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        for (name, rate) in [
            ("sub_rate", self.sub_rate),
            ("del_rate", self.del_rate),
            ("ins_rate", self.ins_rate),
            ("blank_rate", self.blank_rate),
            ("phone_error_rate", self.phone_error_rate),
        ] {
            if !(0.0..=1.0).contains(&rate) {
                return Err(SimError::BadConfig(format!("{name} {rate} outside [0, 1]")));
            }
        }
        if self.sub_rate + self.del_rate > 1.0 {
            return Err(SimError::BadConfig(format!(
                "sub_rate + del_rate = {} exceeds 1",
                self.sub_rate + self.del_rate
            )));
        }
        // Peaks must clear the blank share (1 - c) / 2 or greedy decoding
        // would not recover the emitted tokens.
        if self.c_lo.is_nan() || self.c_lo <= 1.0 / 3.0 {
            return Err(SimError::BadConfig(format!(
                "c_lo {} must exceed 1/3 so peaks beat the blank share",
                self.c_lo
            )));
        }
        if !(self.c_hi >= self.c_lo && self.c_hi <= 1.0) {
            return Err(SimError::BadConfig(format!(
                "c_hi {} outside [c_lo, 1]",
                self.c_hi
            )));
        }
        if !(self.frame_sec > 0.0 && self.frame_sec.is_finite()) {
            return Err(SimError::BadConfig(format!("frame_sec {}", self.frame_sec)));
        }
        Ok(())
    }
}

/// One corruption decision against the reference sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "kebab-case")]
pub enum Edit {
    Keep { reference: usize },
    Sub { reference: usize, to: TokenId },
    Del { reference: usize },
    Ins { to: TokenId },
}

/// Full account of how an utterance was corrupted: replaying `edits`
/// against the reference yields `corrupted`, which is also what greedy
/// decoding of the synthesized grid returns.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorruptionRecord {
    pub edits: Vec<Edit>,
    pub corrupted: Vec<TokenId>,
}

impl CorruptionRecord {
    /// Positions in the corrupted sequence that were inserted.
    pub fn inserted_positions(&self) -> std::collections::BTreeSet<usize> {
        let mut out = std::collections::BTreeSet::new();
        let mut h = 0;
        for edit in &self.edits {
            match edit {
                Edit::Ins { .. } => {
                    out.insert(h);
                    h += 1;
                }
                Edit::Keep { .. } | Edit::Sub { .. } => h += 1,
                Edit::Del { .. } => {}
            }
        }
        out
    }

    /// Whether any error operation is present.
    pub fn is_clean(&self) -> bool {
        self.edits.iter().all(|e| matches!(e, Edit::Keep { .. }))
    }
}

/// For each word, the other words whose pronunciation is within one phone
/// edit (homophones included). Substitutions draw from these sets, and
/// grids leak confusable mass, so phone evidence stays informative.
pub fn confusable_sets(prons: &PronTable) -> Vec<Vec<TokenId>> {
    let n = prons.n_words();
    let mut sets = vec![Vec::new(); n];
    for a in 0..n {
        for b in a + 1..n {
            let d = crate::lm::phone_edit_distance(
                prons.pron(a as TokenId),
                prons.pron(b as TokenId),
                None,
            );
            if d <= 1 {
                sets[a].push(b as TokenId);
                sets[b].push(a as TokenId);
            }
        }
    }
    sets
}

/// Draws the corruption of one reference sequence.
///
/// Draw order: for each gap g in 0..=len, one insertion Bernoulli (plus a
/// uniform word choice when it fires); after each gap except the last, one
/// edit draw for the following token (`u < sub` substitutes, `u < sub+del`
/// deletes), plus a substitute choice when needed. Substitutes come from
/// the token's confusable set, or uniformly from the other words when it
/// has none.
pub fn corrupt(
    reference: &[TokenId],
    confusables: &[Vec<TokenId>],
    n_words: usize,
    config: &SimConfig,
    rng: &mut ChaCha12Rng,
) -> CorruptionRecord {
    let mut edits = Vec::new();
    let mut corrupted = Vec::new();
    let insert = |edits: &mut Vec<Edit>, corrupted: &mut Vec<TokenId>, rng: &mut ChaCha12Rng| {
        if rng.random::<f64>() < config.ins_rate {
            let to = rng.random_range(0..n_words as TokenId);
            edits.push(Edit::Ins { to });
            corrupted.push(to);
        }
    };
    for (i, &tok) in reference.iter().enumerate() {
        insert(&mut edits, &mut corrupted, rng);
        let u = rng.random::<f64>();
        if u < config.sub_rate {
            let options = &confusables[tok as usize];
            let to = if options.is_empty() {
                // Uniform over the other words.
                let mut v = rng.random_range(0..n_words as TokenId - 1);
                if v >= tok {
                    v += 1;
                }
                v
            } else {
                options[rng.random_range(0..options.len())]
            };
            edits.push(Edit::Sub { reference: i, to });
            corrupted.push(to);
        } else if u < config.sub_rate + config.del_rate {
            edits.push(Edit::Del { reference: i });
        } else {
            edits.push(Edit::Keep { reference: i });
            corrupted.push(tok);
        }
    }
    insert(&mut edits, &mut corrupted, rng);
    CorruptionRecord { edits, corrupted }
}

/// Renders a corruption record as a frame posterior grid.
///
/// Draw order: per emitted group, a frame count in 1..=3, then one
/// separator Bernoulli. The forced separator between identical adjacent
/// tokens consumes no draw. A fully deleted utterance renders as a single
/// blank frame.
pub fn synth_posteriors(
    record: &CorruptionRecord,
    confusables: &[Vec<TokenId>],
    vocab: &Vocab,
    config: &SimConfig,
    rng: &mut ChaCha12Rng,
) -> Result<FramePosteriors, SimError> {
    let axis = vocab.axis_len();
    let blank = vocab.blank_id() as usize;
    let n_words = vocab.n_words();

    let blank_row = |rows: &mut Vec<Vec<f64>>| {
        let mut row = vec![0.0; axis];
        row[blank] = config.c_hi;
        let rest = (1.0 - config.c_hi) / n_words as f64;
        for cell in row.iter_mut().take(n_words) {
            *cell += rest;
        }
        rows.push(row);
    };

    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut clean_iter = record.edits.iter().filter(|e| !matches!(e, Edit::Del { .. }));
    for (j, &tok) in record.corrupted.iter().enumerate() {
        let clean = matches!(clean_iter.next(), Some(Edit::Keep { .. }));
        if j > 0 && record.corrupted[j - 1] == tok {
            blank_row(&mut rows);
        }
        let peak = if clean { config.c_hi } else { config.c_lo };
        let mut row = vec![0.0; axis];
        row[tok as usize] = peak;
        let half = (1.0 - peak) / 2.0;
        let options = &confusables[tok as usize];
        if options.is_empty() {
            // No confusables: spread over the other words instead, or give
            // everything to the blank if there are none.
            if n_words > 1 {
                let share = half / (n_words - 1) as f64;
                for (v, slot) in row[..n_words].iter_mut().enumerate() {
                    if v != tok as usize {
                        *slot += share;
                    }
                }
            } else {
                row[blank] += half;
            }
        } else {
            let share = half / options.len() as f64;
            for &v in options {
                row[v as usize] += share;
            }
        }
        row[blank] += half;
        let frames = rng.random_range(1..=3usize);
        for _ in 0..frames {
            rows.push(row.clone());
        }
        if rng.random::<f64>() < config.blank_rate {
            blank_row(&mut rows);
        }
    }
    if rows.is_empty() {
        blank_row(&mut rows);
    }
    Ok(FramePosteriors::new(rows, config.frame_sec)?)
}

/// Noisy phone hypothesis for the reference pronunciation: per phone, the
/// error rate splits evenly into substitution, deletion, and insertion
/// after the phone. Substituted and inserted phones are uniform draws
/// (substitutions never reproduce the original).
pub fn synth_phone_hyp(
    ref_phones: &[PhoneId],
    n_phones: usize,
    per: f64,
    rng: &mut ChaCha12Rng,
) -> Vec<PhoneId> {
    let third = per / 3.0;
    let mut out = Vec::with_capacity(ref_phones.len());
    for &p in ref_phones {
        let u = rng.random::<f64>();
        if u < third {
            if n_phones > 1 {
                let mut q = rng.random_range(0..n_phones as PhoneId - 1);
                if q >= p {
                    q += 1;
                }
                out.push(q);
            } else {
                // Nothing to substitute with.
                out.push(p);
            }
        } else if u < 2.0 * third {
            // Deleted.
        } else if u < per {
            out.push(p);
            out.push(rng.random_range(0..n_phones as PhoneId));
        } else {
            out.push(p);
        }
    }
    out
}

/// Samples sentences from an order-2 chain estimated on the seed corpus.
/// Transitions are closed over what was observed (no smoothing), so every
/// sampled bigram occurred in the seed text; sentences are hard-capped at
/// `max_len` words.
pub fn gen_corpus(
    seed_corpus: &Corpus,
    n_sentences: usize,
    max_len: usize,
    master_seed: u64,
) -> Result<Corpus, SimError> {
    use std::collections::BTreeMap;

    type State = (Option<String>, Option<String>);
    // None is the start padding; the EOS successor is encoded as None.
    let mut table: BTreeMap<State, BTreeMap<Option<String>, u64>> = BTreeMap::new();
    for utt in seed_corpus.utterances() {
        let mut l2: Option<String> = None;
        let mut l1: Option<String> = None;
        for word in utt.iter().map(Some).chain(std::iter::once(None)) {
            *table
                .entry((l2.clone(), l1.clone()))
                .or_default()
                .entry(word.cloned())
                .or_insert(0) += 1;
            l2 = l1;
            l1 = word.cloned();
        }
    }
    if table.is_empty() {
        return Err(SimError::EmptySeedCorpus);
    }
    if max_len == 0 {
        return Err(SimError::BadConfig("max_len must be at least 1".into()));
    }

    let mut sentences = Vec::with_capacity(n_sentences);
    for s in 0..n_sentences {
        let mut rng = stream_rng(master_seed, s as u64);
        let mut words: Vec<String> = Vec::new();
        let mut state: State = (None, None);
        loop {
            let row = table.get(&state).expect("chain states are closed");
            let total: u64 = row.values().sum();
            let mut pick = rng.random_range(0..total);
            let mut next: &Option<String> = &None;
            for (cand, &count) in row {
                if pick < count {
                    next = cand;
                    break;
                }
                pick -= count;
            }
            match next {
                Some(word) => {
                    words.push(word.clone());
                    if words.len() >= max_len {
                        break;
                    }
                    state = (state.1, Some(word.clone()));
                }
                None => break,
            }
        }
        if words.is_empty() {
            // Unreachable for non-degenerate seeds (sentences start with a
            // word), but keep the corpus contract anyway.
            continue;
        }
        sentences.push(words);
    }
    Ok(Corpus::new(sentences)?)
}

/// Everything the evaluation needs to know about one simulated utterance.
#[derive(Debug, Clone)]
pub struct SimUtterance {
    pub id: String,
    pub reference: Vec<TokenId>,
    pub ref_phones: Vec<PhoneId>,
    pub post: FramePosteriors,
    pub phone_hyp: Vec<PhoneId>,
    pub corruption: CorruptionRecord,
}

/// Simulates one utterance. `u` is the corpus-wide index: it names the
/// utterance ("utt-00042") and selects RNG stream `u` of the config seed,
/// so callers may process utterances in any order (or in parallel) and
/// still get byte-identical output. Draw order within the stream:
/// corruption, grid, phone hypothesis.
pub fn simulate_utterance(
    u: usize,
    words: &[String],
    vocab: &Vocab,
    prons: &PronTable,
    confusables: &[Vec<TokenId>],
    config: &SimConfig,
) -> Result<SimUtterance, SimError> {
    let reference = vocab.encode(words)?;
    let ref_phones: Vec<PhoneId> = reference
        .iter()
        .flat_map(|&w| prons.pron(w).iter().copied())
        .collect();
    let mut rng = stream_rng(config.seed, u as u64);
    let corruption = corrupt(&reference, confusables, vocab.n_words(), config, &mut rng);
    let post = synth_posteriors(&corruption, confusables, vocab, config, &mut rng)?;
    let phone_hyp =
        synth_phone_hyp(&ref_phones, prons.n_phones(), config.phone_error_rate, &mut rng);
    Ok(SimUtterance {
        id: format!("utt-{u:05}"),
        reference,
        ref_phones,
        post,
        phone_hyp,
        corruption,
    })
}

/// Simulates a whole corpus sequentially.
pub fn simulate(
    corpus: &Corpus,
    vocab: &Vocab,
    prons: &PronTable,
    config: &SimConfig,
) -> Result<Vec<SimUtterance>, SimError> {
    config.validate()?;
    if vocab.n_words() < 2 {
        return Err(SimError::VocabTooSmall(vocab.n_words()));
    }
    let confusables = confusable_sets(prons);
    let mut out = Vec::with_capacity(corpus.len());
    for (u, utt) in corpus.utterances().iter().enumerate() {
        out.push(simulate_utterance(u, utt, vocab, prons, &confusables, config)?);
    }
    Ok(out)
}
