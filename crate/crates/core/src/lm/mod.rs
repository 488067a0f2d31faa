//! Masked-sequence scoring: training-data generators, a count-based masked
//! LM that can condition on a phone hypothesis, an additive-smoothed n-gram
//! model with backoff, a positional oracle for ceiling experiments, and
//! pseudo-log-likelihood scoring.

mod generate;
mod ngram;
mod oracle;
mod pcmlm;

pub use generate::{gen_deletable_example, gen_mlm_example, gen_phone_input, MaskTarget, TrainingExample};
pub use ngram::{train_ngram, NextSym, NgramConfig, NgramLm};
pub use oracle::OracleScorer;
pub use pcmlm::{
    align_phone_gaps, phone_edit_distance, score_masked, score_masked_mlm, train_pcmlm,
    MlmScorer, ModelKind, PcMlmConfig, PcMlmModel, PcMlmScorer,
};

use crate::{PhoneId, TokenId};

#[derive(Debug, thiserror::Error)]
pub enum LmError {
    #[error("token sequence is empty")]
    EmptyTokens,
    #[error("rate {0} is outside [0, 1]")]
    BadRate(f64),
    #[error("bad mask position {position} (length {len})")]
    BadMaskPosition { position: usize, len: usize },
    #[error("position {0} is not masked")]
    NotMasked(usize),
    #[error("token {id} at position {position} is reserved where a word is required")]
    ReservedToken { id: TokenId, position: usize },
    #[error("bad distribution: {0}")]
    BadDistribution(String),
    #[error("bad model config: {0}")]
    BadConfig(String),
    #[error("oracle misaligned: masked position {position} maps past the reference (length {len})")]
    OracleMisaligned { position: usize, len: usize },
    #[error("phone id {0} is out of range")]
    BadPhone(PhoneId),
    #[error("model file: {0}")]
    BadModelFile(String),
    #[error("{artifact} hash mismatch: model has {found}, current is {expected}")]
    HashMismatch { artifact: &'static str, expected: String, found: String },
    #[error(transparent)]
    Lexicon(#[from] crate::lexicon::LexiconError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A token sequence with some positions replaced by the mask symbol.
///
/// The masked index list is kept sorted and mirrors the token content
/// exactly: `tokens[i]` is the mask id iff `i` is in the list.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedSequence {
    tokens: Vec<TokenId>,
    masked: Vec<usize>,
    mask_id: TokenId,
}

impl MaskedSequence {
    /// Wraps a sequence that already contains mask symbols.
    pub fn from_tokens(tokens: Vec<TokenId>, mask_id: TokenId) -> Self {
        let masked = tokens
            .iter()
            .enumerate()
            .filter_map(|(i, &t)| (t == mask_id).then_some(i))
            .collect();
        MaskedSequence { tokens, masked, mask_id }
    }

    /// Masks `positions` of an unmasked sequence.
    pub fn mask_positions(
        original: &[TokenId],
        positions: &[usize],
        mask_id: TokenId,
    ) -> Result<Self, LmError> {
        let mut tokens = original.to_vec();
        if let Some(p) = tokens.iter().position(|&t| t == mask_id) {
            return Err(LmError::ReservedToken { id: mask_id, position: p });
        }
        let mut masked: Vec<usize> = positions.to_vec();
        masked.sort_unstable();
        masked.dedup();
        for &p in &masked {
            if p >= tokens.len() {
                return Err(LmError::BadMaskPosition { position: p, len: tokens.len() });
            }
            tokens[p] = mask_id;
        }
        Ok(MaskedSequence { tokens, masked, mask_id })
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }

    pub fn masked(&self) -> &[usize] {
        &self.masked
    }

    pub fn mask_id(&self) -> TokenId {
        self.mask_id
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn is_masked(&self, position: usize) -> bool {
        self.tokens.get(position) == Some(&self.mask_id)
    }

    /// Index of `position` within the masked list, when masked.
    pub fn masked_rank(&self, position: usize) -> Option<usize> {
        self.masked.binary_search(&position).ok()
    }
}

/// Categorical distribution over the word vocabulary plus an optional
/// "no token here" mass used by deletable scorers.
#[derive(Debug, Clone, PartialEq)]
pub struct ScorerDistribution {
    word_probs: Vec<f64>,
    null_prob: f64,
}

impl ScorerDistribution {
    pub fn new(word_probs: Vec<f64>, null_prob: f64) -> Result<Self, LmError> {
        let mut sum = null_prob;
        if !(0.0..=1.0 + 1e-9).contains(&null_prob) {
            return Err(LmError::BadDistribution(format!("null mass {null_prob}")));
        }
        for (v, &p) in word_probs.iter().enumerate() {
            if !p.is_finite() || p < 0.0 {
                return Err(LmError::BadDistribution(format!("word {v} mass {p}")));
            }
            sum += p;
        }
        if (sum - 1.0).abs() > 1e-6 {
            return Err(LmError::BadDistribution(format!("total mass {sum}")));
        }
        Ok(ScorerDistribution { word_probs, null_prob })
    }

    pub fn one_hot_word(n_words: usize, word: TokenId) -> Self {
        let mut probs = vec![0.0; n_words];
        probs[word as usize] = 1.0;
        ScorerDistribution { word_probs: probs, null_prob: 0.0 }
    }

    pub fn one_hot_null(n_words: usize) -> Self {
        ScorerDistribution { word_probs: vec![0.0; n_words], null_prob: 1.0 }
    }

    pub fn n_words(&self) -> usize {
        self.word_probs.len()
    }

    pub fn word_prob(&self, word: TokenId) -> f64 {
        self.word_probs[word as usize]
    }

    pub fn word_probs(&self) -> &[f64] {
        &self.word_probs
    }

    pub fn null_prob(&self) -> f64 {
        self.null_prob
    }
}

/// Scorer that can rate one masked position of a sequence, used for
/// pseudo-log-likelihood rescoring.
pub trait PllScorer {
    fn score_masked(
        &self,
        masked: &MaskedSequence,
        position: usize,
    ) -> Result<ScorerDistribution, LmError>;
}

/// Scorer driving the correction pipeline.
///
/// `align` distributes phone evidence over the masked positions once per
/// utterance (scorers that ignore phones return empty gaps); `score` is then
/// called once per masked position with that position's gap.
pub trait CorrectionScorer {
    fn is_deletable(&self) -> bool;

    /// Hash of the vocabulary the scorer was trained against, if any.
    fn vocab_hash(&self) -> Option<&str> {
        None
    }

    fn align(
        &self,
        phones: &[PhoneId],
        masked: &MaskedSequence,
    ) -> Result<Vec<Vec<PhoneId>>, LmError>;

    fn score(
        &self,
        masked: &MaskedSequence,
        gap: &[PhoneId],
        position: usize,
    ) -> Result<ScorerDistribution, LmError>;
}

/// Pseudo log likelihood: sum of `log P(token_i | rest)` with each position
/// masked in turn. Makes exactly `tokens.len()` scorer calls.
pub fn pll_score(
    scorer: &dyn PllScorer,
    tokens: &[TokenId],
    mask_id: TokenId,
) -> Result<f64, LmError> {
    if tokens.is_empty() {
        return Err(LmError::EmptyTokens);
    }
    let mut total = 0.0;
    for i in 0..tokens.len() {
        let masked = MaskedSequence::mask_positions(tokens, &[i], mask_id)?;
        let dist = scorer.score_masked(&masked, i)?;
        if tokens[i] as usize >= dist.n_words() {
            return Err(LmError::ReservedToken { id: tokens[i], position: i });
        }
        total += dist.word_prob(tokens[i]).ln();
    }
    Ok(total)
}
