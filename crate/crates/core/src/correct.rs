//! Error correction of decoded sequences: mask low-confidence tokens, then
//! refill every masked position in one parallel pass.
//!
//! Each masked position gets a combined distribution
//! `(1 - alpha) * P_ctc + alpha * P_scorer`, where the decoder side is the
//! token's peak-frame posterior row (its blank mass standing in for "no
//! token here") and the scorer side comes from a [`CorrectionScorer`].
//! The filled value is the combined argmax over words, plus the no-token
//! outcome when deletions are enabled; resolved no-token positions are
//! removed from the output.

use std::time::{Duration, Instant};

use crate::ctc::{greedy_decode, CtcError, FramePosteriors, Hypothesis};
use crate::lexicon::Vocab;
use crate::lm::{CorrectionScorer, LmError, MaskedSequence, ScorerDistribution};
use crate::{PhoneId, TokenId};

#[derive(Debug, thiserror::Error)]
pub enum CorrectError {
    #[error("bad correction config: {0}")]
    BadConfig(String),
    #[error("{what}: expected {expected}, found {found}")]
    LengthMismatch { what: &'static str, expected: usize, found: usize },
    #[error("scorer was trained on vocabulary {model}, current is {current}")]
    VocabHashMismatch { model: String, current: String },
    #[error("scorer {scorer} deletions but the config {config} them")]
    DeletableMismatch { scorer: &'static str, config: &'static str },
    #[error(transparent)]
    Lm(#[from] LmError),
    #[error(transparent)]
    Ctc(#[from] CtcError),
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CorrectionConfig {
    /// Confidence threshold: tokens strictly below it are masked.
    pub beta: f64,
    /// Scorer weight in the combined fill distribution.
    pub alpha: f64,
    /// Allow masked positions to resolve to "no token" and be removed.
    pub deletable: bool,
}

impl Default for CorrectionConfig {
    fn default() -> Self {
        CorrectionConfig { beta: 0.8, alpha: 0.5, deletable: false }
    }
}

impl CorrectionConfig {
    pub fn validate(&self) -> Result<(), CorrectError> {
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(CorrectError::BadConfig(format!("beta {} outside [0, 1]", self.beta)));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(CorrectError::BadConfig(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        Ok(())
    }
}

/// What happened to each position of the decoded hypothesis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(tag = "op", rename_all = "kebab-case")]
pub enum Provenance {
    Kept,
    Corrected { from: TokenId, to: TokenId },
    Deleted { from: TokenId },
}

#[derive(Debug, Clone, Copy, Default)]
pub struct StageTimings {
    pub decode: Duration,
    pub align: Duration,
    pub score: Duration,
    pub total: Duration,
}

#[derive(Debug, Clone)]
pub struct CorrectionResult {
    /// Corrected sequence, after no-token removals.
    pub tokens: Vec<TokenId>,
    /// One entry per position of the *decoded* hypothesis.
    pub provenance: Vec<Provenance>,
    /// Decoded positions that were masked.
    pub masked: Vec<usize>,
    pub timings: StageTimings,
}

/// Masks every token whose confidence is strictly below `beta`.
pub fn mask_by_confidence(
    hyp: &Hypothesis,
    beta: f64,
    mask_id: TokenId,
) -> Result<MaskedSequence, LmError> {
    let positions: Vec<usize> = hyp
        .confidences
        .iter()
        .enumerate()
        .filter_map(|(i, &c)| (c < beta).then_some(i))
        .collect();
    MaskedSequence::mask_positions(&hyp.tokens, &positions, mask_id)
}

/// Resolves every masked position against its combined distribution.
///
/// `peak_rows[i]` is the full posterior row backing hypothesis position `i`
/// (blank mass in the last column); `dists` has one entry per masked
/// position, in order. Returns one entry per position: the surviving word,
/// or `None` for a resolved no-token.
///
/// Ties go to the lowest word id, and the no-token outcome only wins
/// strictly, so with `alpha = 0` a masked position resolves back to the
/// frame-argmax word that produced it.
pub fn fill_masks(
    masked: &MaskedSequence,
    peak_rows: &[Vec<f64>],
    dists: &[ScorerDistribution],
    alpha: f64,
    deletable: bool,
) -> Result<Vec<Option<TokenId>>, CorrectError> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(CorrectError::BadConfig(format!("alpha {alpha} outside [0, 1]")));
    }
    if peak_rows.len() != masked.len() {
        return Err(CorrectError::LengthMismatch {
            what: "peak rows",
            expected: masked.len(),
            found: peak_rows.len(),
        });
    }
    if dists.len() != masked.masked().len() {
        return Err(CorrectError::LengthMismatch {
            what: "scorer distributions",
            expected: masked.masked().len(),
            found: dists.len(),
        });
    }
    let mut out = Vec::with_capacity(masked.len());
    for (i, &tok) in masked.tokens().iter().enumerate() {
        let Some(rank) = masked.masked_rank(i) else {
            out.push(Some(tok));
            continue;
        };
        let dist = &dists[rank];
        let row = &peak_rows[i];
        // Reserved columns sit between the words and the blank.
        if row.len() < dist.n_words() + 1 {
            return Err(CorrectError::LengthMismatch {
                what: "posterior row",
                expected: dist.n_words() + 1,
                found: row.len(),
            });
        }
        let combine = |ctc: f64, scorer: f64| (1.0 - alpha) * ctc + alpha * scorer;
        let (mut best, mut best_val) = (0 as TokenId, f64::NEG_INFINITY);
        for (v, &ctc) in row[..dist.n_words()].iter().enumerate() {
            let val = combine(ctc, dist.word_prob(v as TokenId));
            if val > best_val {
                (best, best_val) = (v as TokenId, val);
            }
        }
        let blank_mass = row[row.len() - 1];
        if deletable && combine(blank_mass, dist.null_prob()) > best_val {
            out.push(None);
        } else {
            out.push(Some(best));
        }
    }
    Ok(out)
}

/// Full correction pass over one utterance: greedy decode, confidence
/// masking, phone-gap alignment, scoring, and the parallel fill.
pub fn correct_pipeline<S: CorrectionScorer + ?Sized>(
    post: &FramePosteriors,
    phone_hyp: &[PhoneId],
    scorer: &S,
    config: &CorrectionConfig,
    vocab: &Vocab,
) -> Result<CorrectionResult, CorrectError> {
    config.validate()?;
    if config.deletable != scorer.is_deletable() {
        let describe = |b| if b { "supports" } else { "forbids" };
        return Err(CorrectError::DeletableMismatch {
            scorer: describe(scorer.is_deletable()),
            config: describe(config.deletable),
        });
    }
    if let Some(hash) = scorer.vocab_hash() {
        if hash != vocab.hash() {
            return Err(CorrectError::VocabHashMismatch {
                model: hash.to_owned(),
                current: vocab.hash(),
            });
        }
    }
    post.validate_for(vocab)?;

    let start = Instant::now();
    let (_, hyp) = greedy_decode(post);
    let masked = mask_by_confidence(&hyp, config.beta, vocab.mask_id())?;

    let mut timings = StageTimings { decode: hyp.wall, ..StageTimings::default() };
    let filled = if masked.masked().is_empty() {
        masked.tokens().iter().map(|&t| Some(t)).collect()
    } else {
        let align_start = Instant::now();
        let gaps = scorer.align(phone_hyp, &masked)?;
        if gaps.len() != masked.masked().len() {
            return Err(CorrectError::LengthMismatch {
                what: "aligned gaps",
                expected: masked.masked().len(),
                found: gaps.len(),
            });
        }
        timings.align = align_start.elapsed();

        let score_start = Instant::now();
        let dists = masked
            .masked()
            .iter()
            .zip(&gaps)
            .map(|(&pos, gap)| scorer.score(&masked, gap, pos))
            .collect::<Result<Vec<_>, _>>()?;
        timings.score = score_start.elapsed();

        fill_masks(&masked, &hyp.rows, &dists, config.alpha, config.deletable)?
    };

    let mut tokens = Vec::with_capacity(filled.len());
    let provenance = filled
        .iter()
        .zip(&hyp.tokens)
        .map(|(&resolved, &orig)| match resolved {
            Some(tok) => {
                tokens.push(tok);
                if tok == orig {
                    Provenance::Kept
                } else {
                    Provenance::Corrected { from: orig, to: tok }
                }
            }
            None => Provenance::Deleted { from: orig },
        })
        .collect();
    timings.total = start.elapsed();

    Ok(CorrectionResult { tokens, provenance, masked: masked.masked().to_vec(), timings })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lexicon::Corpus;
    use crate::lm::OracleScorer;

    /// Vocabulary {a, b, c}; posterior axis is therefore 7 wide.
    fn vocab() -> Vocab {
        Vocab::from_corpus(&Corpus::parse("a b c\n").unwrap()).unwrap()
    }

    /// One frame per token, `peak` on the token, the rest on blank.
    fn post_for(tokens: &[TokenId], peak: f64, vocab: &Vocab) -> FramePosteriors {
        let axis = vocab.axis_len();
        let blank = vocab.blank_id() as usize;
        let mut rows = Vec::new();
        for (i, &tok) in tokens.iter().enumerate() {
            if i > 0 {
                // Blank separator so equal neighbors stay distinct tokens.
                let mut sep = vec![0.0; axis];
                sep[blank] = 1.0;
                rows.push(sep);
            }
            let mut row = vec![0.0; axis];
            row[tok as usize] = peak;
            row[blank] = 1.0 - peak;
            rows.push(row);
        }
        FramePosteriors::new(rows, 0.01).unwrap()
    }

    struct FixedScorer {
        dist: ScorerDistribution,
        deletable: bool,
    }

    impl CorrectionScorer for FixedScorer {
        fn is_deletable(&self) -> bool {
            self.deletable
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
            _masked: &MaskedSequence,
            _gap: &[PhoneId],
            _position: usize,
        ) -> Result<ScorerDistribution, LmError> {
            Ok(self.dist.clone())
        }
    }

    #[test]
    fn masking_threshold_is_strict() {
        let v = vocab();
        let post = post_for(&[0, 1], 0.8, &v);
        let (_, hyp) = greedy_decode(&post);
        // Confidences are exactly 0.8: beta = 0.8 masks nothing.
        let none = mask_by_confidence(&hyp, 0.8, v.mask_id()).unwrap();
        assert!(none.masked().is_empty());
        let all = mask_by_confidence(&hyp, 0.81, v.mask_id()).unwrap();
        assert_eq!(all.masked(), &[0, 1]);
    }

    #[test]
    fn alpha_zero_reproduces_the_decode() {
        let v = vocab();
        let post = post_for(&[0, 2, 1], 0.6, &v);
        // A scorer that always votes for `b`, ignored at alpha = 0.
        let scorer = FixedScorer {
            dist: ScorerDistribution::one_hot_word(v.n_words(), 1),
            deletable: false,
        };
        let config = CorrectionConfig { beta: 0.9, alpha: 0.0, deletable: false };
        let out = correct_pipeline(&post, &[], &scorer, &config, &v).unwrap();
        assert_eq!(out.tokens, vec![0, 2, 1]);
        assert_eq!(out.masked, vec![0, 1, 2], "everything was masked");
        assert!(out.provenance.iter().all(|p| *p == Provenance::Kept));
    }

    #[test]
    fn alpha_one_takes_the_scorer_argmax() {
        let v = vocab();
        let post = post_for(&[0, 2], 0.6, &v);
        let scorer = FixedScorer {
            dist: ScorerDistribution::one_hot_word(v.n_words(), 1),
            deletable: false,
        };
        let config = CorrectionConfig { beta: 0.9, alpha: 1.0, deletable: false };
        let out = correct_pipeline(&post, &[], &scorer, &config, &v).unwrap();
        assert_eq!(out.tokens, vec![1, 1]);
        assert_eq!(
            out.provenance,
            vec![
                Provenance::Corrected { from: 0, to: 1 },
                Provenance::Corrected { from: 2, to: 1 },
            ]
        );
    }

    #[test]
    fn confident_tokens_are_never_touched() {
        let v = vocab();
        let post = post_for(&[0, 1, 2], 0.95, &v);
        let scorer = FixedScorer {
            dist: ScorerDistribution::one_hot_word(v.n_words(), 0),
            deletable: false,
        };
        let config = CorrectionConfig { beta: 0.8, alpha: 1.0, deletable: false };
        let out = correct_pipeline(&post, &[], &scorer, &config, &v).unwrap();
        assert_eq!(out.tokens, vec![0, 1, 2]);
        assert!(out.masked.is_empty());
        assert_eq!(out.timings.align, Duration::ZERO, "no masks, no alignment");
    }

    #[test]
    fn null_resolutions_are_removed() {
        let v = vocab();
        let post = post_for(&[0, 1, 2], 0.6, &v);
        // Oracle knows position 1 is an insertion into reference [a, c].
        let oracle = OracleScorer::deletable(
            vec![0, 2],
            std::collections::BTreeSet::from([1]),
            v.n_words(),
        )
        .unwrap();
        let config = CorrectionConfig { beta: 0.9, alpha: 1.0, deletable: true };
        let out = correct_pipeline(&post, &[], &oracle, &config, &v).unwrap();
        assert_eq!(out.tokens, vec![0, 2]);
        assert_eq!(out.provenance[1], Provenance::Deleted { from: 1 });
    }

    #[test]
    fn non_deletable_fill_ignores_null_mass() {
        let v = vocab();
        let post = post_for(&[0], 0.6, &v);
        let (_, hyp) = greedy_decode(&post);
        let masked = mask_by_confidence(&hyp, 0.9, v.mask_id()).unwrap();
        // Scorer puts 90% on the no-token outcome, but deletions are off.
        let dist = ScorerDistribution::new(vec![0.1, 0.0, 0.0], 0.9).unwrap();
        let filled =
            fill_masks(&masked, &hyp.rows, std::slice::from_ref(&dist), 1.0, false).unwrap();
        assert_eq!(filled, vec![Some(0)]);
        let deleted = fill_masks(&masked, &hyp.rows, &[dist], 1.0, true).unwrap();
        assert_eq!(deleted, vec![None]);
    }

    #[test]
    fn word_ties_resolve_to_the_lowest_id() {
        let v = vocab();
        let post = post_for(&[2], 0.6, &v);
        let (_, hyp) = greedy_decode(&post);
        let masked = mask_by_confidence(&hyp, 0.9, v.mask_id()).unwrap();
        let dist =
            ScorerDistribution::new(vec![0.5, 0.5, 0.0], 0.0).unwrap();
        let filled = fill_masks(&masked, &hyp.rows, &[dist], 1.0, false).unwrap();
        assert_eq!(filled, vec![Some(0)]);
    }

    #[test]
    fn config_and_scorer_must_agree_on_deletions() {
        let v = vocab();
        let post = post_for(&[0], 0.6, &v);
        let scorer = FixedScorer {
            dist: ScorerDistribution::one_hot_word(v.n_words(), 0),
            deletable: false,
        };
        let config = CorrectionConfig { beta: 0.9, alpha: 1.0, deletable: true };
        assert!(matches!(
            correct_pipeline(&post, &[], &scorer, &config, &v),
            Err(CorrectError::DeletableMismatch { .. })
        ));
    }

    #[test]
    fn scorer_vocab_hash_is_checked() {
        let v = vocab();
        let post = post_for(&[0], 0.6, &v);
        struct WrongHash;
        impl CorrectionScorer for WrongHash {
            fn is_deletable(&self) -> bool {
                false
            }
            fn vocab_hash(&self) -> Option<&str> {
                Some("0000")
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
                _masked: &MaskedSequence,
                _gap: &[PhoneId],
                _position: usize,
            ) -> Result<ScorerDistribution, LmError> {
                unreachable!("hash check precedes scoring")
            }
        }
        assert!(matches!(
            correct_pipeline(&post, &[], &WrongHash, &CorrectionConfig::default(), &v),
            Err(CorrectError::VocabHashMismatch { .. })
        ));
    }

    #[test]
    fn distribution_count_mismatch_errors() {
        let v = vocab();
        let post = post_for(&[0, 1], 0.6, &v);
        let (_, hyp) = greedy_decode(&post);
        let masked = mask_by_confidence(&hyp, 0.9, v.mask_id()).unwrap();
        let one = vec![ScorerDistribution::one_hot_word(v.n_words(), 0)];
        assert!(matches!(
            fill_masks(&masked, &hyp.rows, &one, 0.5, false),
            Err(CorrectError::LengthMismatch { what: "scorer distributions", .. })
        ));
    }
}
