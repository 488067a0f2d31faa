//! Count-based masked LM over (left, right) word contexts, optionally
//! multiplied by a phone-evidence term.
//!
//! The context model keeps three additively-smoothed count tables — joint
//! `(left, right) -> target`, `left -> target`, and `right -> target` — and
//! scores a target as the equal-weight mixture of the three estimates.
//! Contexts are the nearest unmasked tokens on each side (sentence boundary
//! symbols at the edges), so runs of adjacent masks still see real words.
//! During training the context positions are teacher-forced: a masked
//! position's neighbors read the original tokens (generator-inserted
//! positions have none and are skipped).
//!
//! The phone term scores a masked position's aligned gap phones against the
//! candidate word's pronunciation: `exp(-gamma * editdist(gap, pron(v)))`,
//! and against the empty pronunciation for the no-token candidate.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::generate::{gen_deletable_example, gen_mlm_example, gen_phone_input, MaskTarget, TrainingExample};
use super::{CorrectionScorer, LmError, MaskedSequence, PllScorer, ScorerDistribution};
use crate::lexicon::{Lexicon, PronTable, Vocab};
use crate::rng::stream_rng;
use crate::{PhoneId, TokenId};

/// Which generator trained the model and how it should be scored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    /// Context only; no phone input, no deletions.
    Mlm,
    /// Phone-conditioned.
    Pcmlm,
    /// Phone-conditioned with insertion training (can output NULL).
    DelPcmlm,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PcMlmConfig {
    pub kind: ModelKind,
    /// Additive smoothing of the count tables.
    pub delta: f64,
    /// Phone-likelihood temperature.
    pub gamma: f64,
    pub mask_rate: f64,
    pub insert_lambda: f64,
    pub phone_mask_rate: f64,
    pub passes: u32,
    pub seed: u64,
}

impl Default for PcMlmConfig {
    fn default() -> Self {
        PcMlmConfig {
            kind: ModelKind::Pcmlm,
            delta: 0.1,
            gamma: 2.0,
            mask_rate: 0.15,
            insert_lambda: 0.2,
            phone_mask_rate: 0.2,
            passes: 1,
            seed: 0,
        }
    }
}

impl PcMlmConfig {
    pub fn deletable(&self) -> bool {
        self.kind == ModelKind::DelPcmlm
    }

    fn validate(&self) -> Result<(), LmError> {
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return Err(LmError::BadConfig(format!("delta {} must be positive", self.delta)));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(LmError::BadConfig(format!("gamma {}", self.gamma)));
        }
        for (name, rate) in [("mask_rate", self.mask_rate), ("phone_mask_rate", self.phone_mask_rate)] {
            if !(0.0..=1.0).contains(&rate) {
                return Err(LmError::BadConfig(format!("{name} {rate}")));
            }
        }
        if self.insert_lambda < 0.0 || !self.insert_lambda.is_finite() {
            return Err(LmError::BadConfig(format!("insert_lambda {}", self.insert_lambda)));
        }
        if self.passes == 0 {
            return Err(LmError::BadConfig("passes must be at least 1".into()));
        }
        Ok(())
    }
}

/// Context symbol: a word, or a sentence boundary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Ctx {
    Bos,
    Word(TokenId),
    Eos,
}

impl Ctx {
    fn encode(self) -> String {
        match self {
            Ctx::Bos => "B".into(),
            Ctx::Eos => "E".into(),
            Ctx::Word(w) => w.to_string(),
        }
    }

    fn decode(s: &str) -> Result<Self, LmError> {
        match s {
            "B" => Ok(Ctx::Bos),
            "E" => Ok(Ctx::Eos),
            _ => s
                .parse()
                .map(Ctx::Word)
                .map_err(|_| LmError::BadModelFile(format!("bad context symbol {s:?}"))),
        }
    }
}

/// Prediction target: a word, or "no token here".
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Tgt {
    Word(TokenId),
    Null,
}

impl Tgt {
    fn encode(self) -> String {
        match self {
            Tgt::Word(w) => w.to_string(),
            Tgt::Null => "N".into(),
        }
    }

    fn decode(s: &str) -> Result<Self, LmError> {
        match s {
            "N" => Ok(Tgt::Null),
            _ => s
                .parse()
                .map(Tgt::Word)
                .map_err(|_| LmError::BadModelFile(format!("bad target symbol {s:?}"))),
        }
    }
}

type TgtCounts = BTreeMap<Tgt, u64>;

#[derive(Debug, Clone, Default, PartialEq)]
struct Counts {
    joint: BTreeMap<(Ctx, Ctx), TgtCounts>,
    left: BTreeMap<Ctx, TgtCounts>,
    right: BTreeMap<Ctx, TgtCounts>,
}

#[derive(Debug, Clone)]
pub struct PcMlmModel {
    pub config: PcMlmConfig,
    vocab_hash: String,
    n_words: usize,
    counts: Counts,
    prons: PronTable,
}

/// Trains the count tables with freshly generated masked examples
/// (`passes` generator passes over the corpus, one RNG stream per
/// utterance per pass).
pub fn train_pcmlm(
    corpus: &crate::lexicon::Corpus,
    vocab: &Vocab,
    lex: &Lexicon,
    config: PcMlmConfig,
) -> Result<PcMlmModel, LmError> {
    config.validate()?;
    let prons = lex.pron_table(vocab)?;
    let mut counts = Counts::default();
    for pass in 0..config.passes {
        for (u, utt) in corpus.utterances().iter().enumerate() {
            let ids = vocab.encode(utt)?;
            let stream = u64::from(pass) * corpus.len() as u64 + u as u64;
            let mut rng = stream_rng(config.seed, stream);
            let mut ex = match config.kind {
                ModelKind::DelPcmlm => gen_deletable_example(
                    &ids,
                    config.mask_rate,
                    config.insert_lambda,
                    vocab.mask_id(),
                    &mut rng,
                )?,
                _ => gen_mlm_example(&ids, config.mask_rate, vocab.mask_id(), &mut rng)?,
            };
            if config.kind != ModelKind::Mlm {
                ex.phones = gen_phone_input(&ids, &prons, config.phone_mask_rate, &mut rng)?;
            }
            accumulate(&mut counts, &ex);
        }
    }
    Ok(PcMlmModel {
        config,
        vocab_hash: vocab.hash(),
        n_words: vocab.n_words(),
        counts,
        prons,
    })
}

fn accumulate(counts: &mut Counts, ex: &TrainingExample) {
    // Original token per position; inserted positions have none and are
    // skipped when looking for neighbors.
    let underlying: Vec<Option<TokenId>> = ex
        .input
        .tokens()
        .iter()
        .enumerate()
        .map(|(i, &tok)| match ex.input.masked_rank(i) {
            Some(k) => match ex.targets[k] {
                MaskTarget::Word(w) => Some(w),
                MaskTarget::Null => None,
            },
            None => Some(tok),
        })
        .collect();

    for (k, &pos) in ex.input.masked().iter().enumerate() {
        let tgt = match ex.targets[k] {
            MaskTarget::Word(w) => Tgt::Word(w),
            MaskTarget::Null => Tgt::Null,
        };
        let left = underlying[..pos]
            .iter()
            .rev()
            .find_map(|&u| u.map(Ctx::Word))
            .unwrap_or(Ctx::Bos);
        let right = underlying[pos + 1..]
            .iter()
            .find_map(|&u| u.map(Ctx::Word))
            .unwrap_or(Ctx::Eos);
        *counts.joint.entry((left, right)).or_default().entry(tgt).or_insert(0) += 1;
        *counts.left.entry(left).or_default().entry(tgt).or_insert(0) += 1;
        *counts.right.entry(right).or_default().entry(tgt).or_insert(0) += 1;
    }
}

impl PcMlmModel {
    pub fn vocab_hash(&self) -> &str {
        &self.vocab_hash
    }

    pub fn lexicon_hash(&self) -> &str {
        self.prons.lexicon_hash()
    }

    pub fn n_words(&self) -> usize {
        self.n_words
    }

    pub fn prons(&self) -> &PronTable {
        &self.prons
    }

    fn targets(&self) -> Vec<Tgt> {
        let mut t: Vec<Tgt> = (0..self.n_words as TokenId).map(Tgt::Word).collect();
        if self.config.deletable() {
            t.push(Tgt::Null);
        }
        t
    }

    /// One delta-smoothed estimate from a single count table row.
    fn smoothed(&self, row: Option<&TgtCounts>, targets: &[Tgt], out: &mut [f64]) {
        let total: u64 = row.map_or(0, |r| r.values().sum());
        let denom = total as f64 + self.config.delta * targets.len() as f64;
        for (slot, tgt) in out.iter_mut().zip(targets) {
            let c = row.and_then(|r| r.get(tgt)).copied().unwrap_or(0);
            *slot += (c as f64 + self.config.delta) / denom;
        }
    }

    /// Mixture context distribution over the target space for one
    /// (left, right) context pair. Returns (word probs, null prob).
    fn context_dist(&self, left: Ctx, right: Ctx) -> (Vec<f64>, f64) {
        let targets = self.targets();
        let mut mix = vec![0.0; targets.len()];
        self.smoothed(self.counts.joint.get(&(left, right)), &targets, &mut mix);
        self.smoothed(self.counts.left.get(&left), &targets, &mut mix);
        self.smoothed(self.counts.right.get(&right), &targets, &mut mix);
        for p in &mut mix {
            *p /= 3.0;
        }
        let null = if self.config.deletable() { mix.pop().unwrap() } else { 0.0 };
        (mix, null)
    }

    /// Nearest unmasked neighbors of a masked position, boundaries at the
    /// edges. Unmasked positions must hold word ids.
    fn infer_context(&self, masked: &MaskedSequence, position: usize) -> Result<(Ctx, Ctx), LmError> {
        let check = |i: usize, tok: TokenId| {
            if (tok as usize) < self.n_words {
                Ok(Ctx::Word(tok))
            } else {
                Err(LmError::ReservedToken { id: tok, position: i })
            }
        };
        let mut left = Ctx::Bos;
        for i in (0..position).rev() {
            if !masked.is_masked(i) {
                left = check(i, masked.tokens()[i])?;
                break;
            }
        }
        let mut right = Ctx::Eos;
        for (i, &tok) in masked.tokens().iter().enumerate().skip(position + 1) {
            if !masked.is_masked(i) {
                right = check(i, tok)?;
                break;
            }
        }
        Ok((left, right))
    }

    /// Scores one masked position given its aligned gap phones.
    ///
    /// Log-space softmax over `log ctx(v) - gamma * editdist(gap, pron(v))`,
    /// with the no-token candidate scored against an empty pronunciation.
    pub fn score_with_gap(
        &self,
        masked: &MaskedSequence,
        gap: &[PhoneId],
        position: usize,
    ) -> Result<ScorerDistribution, LmError> {
        if !masked.is_masked(position) {
            return Err(LmError::NotMasked(position));
        }
        let (left, right) = self.infer_context(masked, position)?;
        let (ctx_words, ctx_null) = self.context_dist(left, right);
        let pmask = self.prons.phone_mask_id();
        let mut logits: Vec<f64> = (0..self.n_words)
            .map(|v| {
                let d = phone_edit_distance(gap, self.prons.pron(v as TokenId), Some(pmask));
                ctx_words[v].ln() - self.config.gamma * d as f64
            })
            .collect();
        if self.config.deletable() {
            logits.push(ctx_null.ln() - self.config.gamma * gap.len() as f64);
        }
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut probs: Vec<f64> = logits.iter().map(|&s| (s - m).exp()).collect();
        let total: f64 = probs.iter().sum();
        for p in &mut probs {
            *p /= total;
        }
        let null = if self.config.deletable() { probs.pop().unwrap() } else { 0.0 };
        ScorerDistribution::new(probs, null)
    }

    pub fn to_json(&self) -> String {
        let encode_counts = |c: &TgtCounts| -> BTreeMap<String, u64> {
            c.iter().map(|(t, &n)| (t.encode(), n)).collect()
        };
        let file = ModelFile {
            version: 1,
            config: self.config,
            vocab_hash: self.vocab_hash.clone(),
            lexicon_hash: self.prons.lexicon_hash().to_owned(),
            n_words: self.n_words,
            joint: self
                .counts
                .joint
                .iter()
                .map(|(&(l, r), c)| (format!("{}|{}", l.encode(), r.encode()), encode_counts(c)))
                .collect(),
            left: self.counts.left.iter().map(|(&k, c)| (k.encode(), encode_counts(c))).collect(),
            right: self.counts.right.iter().map(|(&k, c)| (k.encode(), encode_counts(c))).collect(),
        };
        let mut s = serde_json::to_string_pretty(&file).expect("model serializes");
        s.push('\n');
        s
    }

    /// Parses a model file and verifies it against the current vocabulary
    /// and lexicon (hash mismatches are hard errors).
    pub fn from_json(text: &str, vocab: &Vocab, lex: &Lexicon) -> Result<Self, LmError> {
        let file: ModelFile =
            serde_json::from_str(text).map_err(|e| LmError::BadModelFile(e.to_string()))?;
        if file.version != 1 {
            return Err(LmError::BadModelFile(format!("unsupported version {}", file.version)));
        }
        if file.vocab_hash != vocab.hash() {
            return Err(LmError::HashMismatch {
                artifact: "vocabulary",
                expected: vocab.hash(),
                found: file.vocab_hash,
            });
        }
        if file.lexicon_hash != lex.hash() {
            return Err(LmError::HashMismatch {
                artifact: "lexicon",
                expected: lex.hash(),
                found: file.lexicon_hash,
            });
        }
        if file.n_words != vocab.n_words() {
            return Err(LmError::BadModelFile(format!(
                "model has {} words, vocabulary has {}",
                file.n_words,
                vocab.n_words()
            )));
        }
        let decode_counts = |c: &BTreeMap<String, u64>| -> Result<TgtCounts, LmError> {
            c.iter().map(|(t, &n)| Ok((Tgt::decode(t)?, n))).collect()
        };
        let mut counts = Counts::default();
        for (key, c) in &file.joint {
            let (l, r) = key
                .split_once('|')
                .ok_or_else(|| LmError::BadModelFile(format!("bad joint key {key:?}")))?;
            counts.joint.insert((Ctx::decode(l)?, Ctx::decode(r)?), decode_counts(c)?);
        }
        for (key, c) in &file.left {
            counts.left.insert(Ctx::decode(key)?, decode_counts(c)?);
        }
        for (key, c) in &file.right {
            counts.right.insert(Ctx::decode(key)?, decode_counts(c)?);
        }
        Ok(PcMlmModel {
            config: file.config,
            vocab_hash: file.vocab_hash,
            n_words: file.n_words,
            counts,
            prons: lex.pron_table(vocab)?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), LmError> {
        Ok(std::fs::write(path, self.to_json())?)
    }

    pub fn load(path: &Path, vocab: &Vocab, lex: &Lexicon) -> Result<Self, LmError> {
        PcMlmModel::from_json(&std::fs::read_to_string(path)?, vocab, lex)
    }
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    version: u32,
    config: PcMlmConfig,
    vocab_hash: String,
    lexicon_hash: String,
    n_words: usize,
    joint: BTreeMap<String, BTreeMap<String, u64>>,
    left: BTreeMap<String, BTreeMap<String, u64>>,
    right: BTreeMap<String, BTreeMap<String, u64>>,
}

/// Phone-informed score for one masked position: aligns the phone
/// hypothesis, then combines context and phone evidence.
pub fn score_masked(
    model: &PcMlmModel,
    phones: &[PhoneId],
    masked: &MaskedSequence,
    position: usize,
) -> Result<ScorerDistribution, LmError> {
    if !masked.is_masked(position) {
        return Err(LmError::NotMasked(position));
    }
    let gaps = align_phone_gaps(phones, masked, model.prons())?;
    let rank = masked.masked_rank(position).expect("checked masked");
    model.score_with_gap(masked, &gaps[rank], position)
}

/// Context-only score: the phone term is dropped and any no-token mass is
/// folded back into the words.
pub fn score_masked_mlm(
    model: &PcMlmModel,
    masked: &MaskedSequence,
    position: usize,
) -> Result<ScorerDistribution, LmError> {
    if !masked.is_masked(position) {
        return Err(LmError::NotMasked(position));
    }
    let (left, right) = model.infer_context(masked, position)?;
    let (mut words, _null) = model.context_dist(left, right);
    let total: f64 = words.iter().sum();
    for p in &mut words {
        *p /= total;
    }
    ScorerDistribution::new(words, 0.0)
}

/// Unit-cost Levenshtein distance over phone ids; `wildcard` (the dropout
/// symbol) matches anything for free.
pub fn phone_edit_distance(a: &[PhoneId], b: &[PhoneId], wildcard: Option<PhoneId>) -> usize {
    let is_match = |x: PhoneId, y: PhoneId| x == y || Some(x) == wildcard || Some(y) == wildcard;
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0usize; b.len() + 1];
    for (i, &pa) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, &pb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(!is_match(pa, pb));
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

const EDIT_COST: u64 = 4;
const GAP_DEV_COST: u64 = 1;

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
struct AlignVal {
    cost: u64,
    /// Total phones absorbed by gaps (ties prefer fewer).
    gap_len: u64,
    /// Sum of gap start offsets (ties prefer leftmost placement).
    gap_start: u64,
}

/// Splits a phone hypothesis into per-masked-position gaps.
///
/// The unmasked tokens' pronunciations form a template with one flexible
/// gap slot per masked position; the template is aligned against the
/// hypothesis by edit distance (unit costs, dropout phones match free).
/// A gap may take any number of phones; deviation from the lexicon-wide
/// mean pronunciation length costs a fraction of one edit per phone, so
/// real edits dominate and length preferences only shape the remainder.
/// Exact ties prefer shorter, then leftmost gaps.
pub fn align_phone_gaps(
    phones: &[PhoneId],
    masked: &MaskedSequence,
    prons: &PronTable,
) -> Result<Vec<Vec<PhoneId>>, LmError> {
    let pmask = prons.phone_mask_id();
    for &p in phones {
        if p > pmask {
            return Err(LmError::BadPhone(p));
        }
    }
    let n_slots = masked.masked().len();

    #[derive(Clone, Copy)]
    enum Unit {
        Phone(PhoneId),
        Gap(usize),
    }
    let mut units = Vec::new();
    let mut slot = 0;
    for (i, &tok) in masked.tokens().iter().enumerate() {
        if masked.is_masked(i) {
            units.push(Unit::Gap(slot));
            slot += 1;
        } else {
            if tok as usize >= prons.n_words() {
                return Err(LmError::ReservedToken { id: tok, position: i });
            }
            units.extend(prons.pron(tok).iter().map(|&p| Unit::Phone(p)));
        }
    }

    let expected = (prons.mean_pron_len().round() as u64).max(1);
    let n_u = units.len();
    let n_j = phones.len();
    let idx = |u: usize, j: usize| u * (n_j + 1) + j;
    let mut best: Vec<Option<(AlignVal, usize)>> = vec![None; (n_u + 1) * (n_j + 1)];
    best[0] = Some((AlignVal { cost: 0, gap_len: 0, gap_start: 0 }, usize::MAX));

    for u in 0..=n_u {
        for j in 0..=n_j {
            let Some((val, _)) = best[idx(u, j)] else { continue };
            let relax = |tu: usize, tj: usize, cand: AlignVal, src: &mut Vec<Option<(AlignVal, usize)>>| {
                let slot = &mut src[idx(tu, tj)];
                if slot.is_none_or(|(v, _)| cand < v) {
                    *slot = Some((cand, idx(u, j)));
                }
            };
            // Hypothesis phone not covered by the template.
            if j < n_j {
                let cand = AlignVal { cost: val.cost + EDIT_COST, ..val };
                relax(u, j + 1, cand, &mut best);
            }
            if u < n_u {
                match units[u] {
                    Unit::Phone(p) => {
                        // Template phone unmatched in the hypothesis.
                        let del = AlignVal { cost: val.cost + EDIT_COST, ..val };
                        relax(u + 1, j, del, &mut best);
                        if j < n_j {
                            let hit = p == phones[j] || phones[j] == pmask;
                            let diag = AlignVal {
                                cost: val.cost + if hit { 0 } else { EDIT_COST },
                                ..val
                            };
                            relax(u + 1, j + 1, diag, &mut best);
                        }
                    }
                    Unit::Gap(_) => {
                        for g in 0..=(n_j - j) as u64 {
                            let cand = AlignVal {
                                cost: val.cost + GAP_DEV_COST * expected.abs_diff(g),
                                gap_len: val.gap_len + g,
                                gap_start: val.gap_start + j as u64,
                            };
                            relax(u + 1, j + g as usize, cand, &mut best);
                        }
                    }
                }
            }
        }
    }

    // Walk back, collecting the hypothesis interval of each gap unit.
    let mut gaps = vec![Vec::new(); n_slots];
    let mut at = idx(n_u, n_j);
    while at != idx(0, 0) {
        let (_, parent) = best[at].expect("end state is reachable");
        let (u, j) = (at / (n_j + 1), at % (n_j + 1));
        let (pu, pj) = (parent / (n_j + 1), parent % (n_j + 1));
        if pu + 1 == u {
            if let Unit::Gap(s) = units[pu] {
                gaps[s] = phones[pj..j].to_vec();
            }
        }
        at = parent;
    }
    Ok(gaps)
}

/// Correction-pipeline adapter that uses the phone term.
pub struct PcMlmScorer<'a> {
    pub model: &'a PcMlmModel,
}

impl CorrectionScorer for PcMlmScorer<'_> {
    fn is_deletable(&self) -> bool {
        self.model.config.deletable()
    }

    fn vocab_hash(&self) -> Option<&str> {
        Some(self.model.vocab_hash())
    }

    fn align(
        &self,
        phones: &[PhoneId],
        masked: &MaskedSequence,
    ) -> Result<Vec<Vec<PhoneId>>, LmError> {
        align_phone_gaps(phones, masked, self.model.prons())
    }

    fn score(
        &self,
        masked: &MaskedSequence,
        gap: &[PhoneId],
        position: usize,
    ) -> Result<ScorerDistribution, LmError> {
        self.model.score_with_gap(masked, gap, position)
    }
}

/// Context-only adapter (ignores phones, never deletes). Also usable for
/// pseudo-log-likelihood rescoring.
pub struct MlmScorer<'a> {
    pub model: &'a PcMlmModel,
}

impl CorrectionScorer for MlmScorer<'_> {
    fn is_deletable(&self) -> bool {
        false
    }

    fn vocab_hash(&self) -> Option<&str> {
        Some(self.model.vocab_hash())
    }

    fn align(
        &self,
        _phones: &[PhoneId],
        masked: &MaskedSequence,
    ) -> Result<Vec<Vec<PhoneId>>, LmError> {
        Ok(vec![Vec::new(); masked.masked().len()])
    }

    fn score(
        &self,
        masked: &MaskedSequence,
        _gap: &[PhoneId],
        position: usize,
    ) -> Result<ScorerDistribution, LmError> {
        score_masked_mlm(self.model, masked, position)
    }
}

impl PllScorer for MlmScorer<'_> {
    fn score_masked(
        &self,
        masked: &MaskedSequence,
        position: usize,
    ) -> Result<ScorerDistribution, LmError> {
        score_masked_mlm(self.model, masked, position)
    }
}
