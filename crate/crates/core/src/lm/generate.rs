//! Training-example generators for the masked LMs.
//!
//! All three generators draw from a caller-supplied stream RNG in a fixed
//! order (documented per function), so one utterance always produces the
//! same example under the same seed regardless of batch layout.

use rand::Rng;

use super::{LmError, MaskedSequence};
use crate::lexicon::PronTable;
use crate::rng::{poisson, ChaCha12Rng};
use crate::{PhoneId, TokenId};

/// What a masked position should resolve to during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskTarget {
    Word(TokenId),
    /// The position was inserted by the generator; the model should learn
    /// to predict "nothing belongs here".
    Null,
}

/// One generated training item: a masked word sequence, one target per
/// masked position (in position order), and an optional phone input.
#[derive(Debug, Clone)]
pub struct TrainingExample {
    pub phones: Vec<PhoneId>,
    pub input: MaskedSequence,
    pub targets: Vec<MaskTarget>,
}

impl TrainingExample {
    /// Recovers the original word sequence: drop inserted positions,
    /// restore masked words from their targets.
    pub fn original(&self) -> Vec<TokenId> {
        let mut out = Vec::new();
        let mut rank = 0;
        for (i, &tok) in self.input.tokens().iter().enumerate() {
            if self.input.is_masked(i) {
                if let MaskTarget::Word(w) = self.targets[rank] {
                    out.push(w);
                }
                rank += 1;
            } else {
                out.push(tok);
            }
        }
        out
    }
}

fn check_rate(rate: f64) -> Result<(), LmError> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(LmError::BadRate(rate));
    }
    Ok(())
}

/// Bernoulli masking at `mask_rate` per position; when no position gets
/// selected, one is force-masked uniformly so every example trains on
/// something.
///
/// RNG order: one uniform per position left to right, then the forced-mask
/// draw if needed.
pub fn gen_mlm_example(
    words: &[TokenId],
    mask_rate: f64,
    mask_id: TokenId,
    rng: &mut ChaCha12Rng,
) -> Result<TrainingExample, LmError> {
    if words.is_empty() {
        return Err(LmError::EmptyTokens);
    }
    check_rate(mask_rate)?;
    let mut positions: Vec<usize> = (0..words.len())
        .filter(|_| rng.random::<f64>() < mask_rate)
        .collect();
    if positions.is_empty() {
        positions.push(rng.random_range(0..words.len()));
    }
    let input = MaskedSequence::mask_positions(words, &positions, mask_id)?;
    let targets = positions.iter().map(|&p| MaskTarget::Word(words[p])).collect();
    Ok(TrainingExample { phones: Vec::new(), input, targets })
}

/// MLM masking plus Poisson(`insert_lambda`) extra mask tokens at each of
/// the `|words| + 1` gap positions (both boundaries included); inserted
/// positions target [`MaskTarget::Null`].
///
/// RNG order: the [`gen_mlm_example`] draws, then one Poisson draw per gap
/// left to right.
pub fn gen_deletable_example(
    words: &[TokenId],
    mask_rate: f64,
    insert_lambda: f64,
    mask_id: TokenId,
    rng: &mut ChaCha12Rng,
) -> Result<TrainingExample, LmError> {
    if insert_lambda < 0.0 || !insert_lambda.is_finite() {
        return Err(LmError::BadConfig(format!("insert_lambda {insert_lambda}")));
    }
    let base = gen_mlm_example(words, mask_rate, mask_id, rng)?;
    let inserts: Vec<u32> = (0..=words.len()).map(|_| poisson(insert_lambda, rng)).collect();

    let mut tokens = Vec::new();
    let mut targets = Vec::new();
    for (g, &k) in inserts.iter().enumerate() {
        for _ in 0..k {
            tokens.push(mask_id);
            targets.push(MaskTarget::Null);
        }
        if g < words.len() {
            tokens.push(base.input.tokens()[g]);
            if base.input.is_masked(g) {
                targets.push(MaskTarget::Word(words[g]));
            }
        }
    }
    let input = MaskedSequence::from_tokens(tokens, mask_id);
    debug_assert_eq!(input.masked().len(), targets.len());
    Ok(TrainingExample { phones: Vec::new(), input, targets })
}

/// Concatenated pronunciation of `words` with each phone independently
/// replaced by the dropout symbol at `phone_mask_rate`.
///
/// RNG order: one uniform per phone, left to right.
pub fn gen_phone_input(
    words: &[TokenId],
    prons: &PronTable,
    phone_mask_rate: f64,
    rng: &mut ChaCha12Rng,
) -> Result<Vec<PhoneId>, LmError> {
    check_rate(phone_mask_rate)?;
    let mask = prons.phone_mask_id();
    let mut out = Vec::new();
    for &w in words {
        if w as usize >= prons.n_words() {
            return Err(LmError::ReservedToken { id: w, position: out.len() });
        }
        for &p in prons.pron(w) {
            out.push(if rng.random::<f64>() < phone_mask_rate { mask } else { p });
        }
    }
    Ok(out)
}
