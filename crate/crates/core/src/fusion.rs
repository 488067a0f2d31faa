//! Ways to blend an external language model with decoder evidence after
//! (or during) the search: n-best rescoring and a frame-level distillation
//! loss. Shallow fusion itself lives in the beam search, which accepts any
//! [`crate::ctc::FusionLm`].

use crate::ctc::{Alignment, CtcError, FramePosteriors, Hypothesis};
use crate::lm::{pll_score, LmError, NgramLm, PllScorer};
use crate::TokenId;

#[derive(Debug, thiserror::Error)]
pub enum FusionError {
    #[error("cannot rescore an empty n-best list")]
    EmptyNBest,
    #[error("{what}: expected {expected}, found {found}")]
    LengthMismatch { what: &'static str, expected: usize, found: usize },
    #[error("weight {0} is not finite")]
    BadWeight(f64),
    #[error(transparent)]
    Lm(#[from] LmError),
    #[error(transparent)]
    Ctc(#[from] CtcError),
}

/// Language model used for rescoring: autoregressive, or a masked scorer
/// queried once per position (pseudo log likelihood).
pub enum RescoreLm<'a> {
    Ar(&'a NgramLm),
    Pll { scorer: &'a dyn PllScorer, mask_id: TokenId },
}

impl RescoreLm<'_> {
    fn sentence_logprob(&self, tokens: &[TokenId]) -> Result<f64, FusionError> {
        match self {
            RescoreLm::Ar(lm) => Ok(lm.ar_logprob(tokens)?),
            RescoreLm::Pll { scorer, mask_id } => {
                if tokens.is_empty() {
                    // No positions to mask; an empty sentence carries no
                    // pseudo-likelihood evidence either way.
                    return Ok(0.0);
                }
                Ok(pll_score(*scorer, tokens, *mask_id)?)
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct Rescored {
    pub best: Hypothesis,
    /// Index of the winner in the input list.
    pub chosen: usize,
    /// Combined score per input hypothesis, in input order.
    pub scores: Vec<f64>,
}

/// Picks the hypothesis maximizing `decoder score + weight * LM score`.
/// Ties keep the earliest (highest-ranked) entry.
pub fn rescore_nbest(
    hyps: &[Hypothesis],
    lm: &RescoreLm,
    weight: f64,
) -> Result<Rescored, FusionError> {
    if hyps.is_empty() {
        return Err(FusionError::EmptyNBest);
    }
    if !weight.is_finite() {
        return Err(FusionError::BadWeight(weight));
    }
    let mut scores = Vec::with_capacity(hyps.len());
    for hyp in hyps {
        scores.push(hyp.score + weight * lm.sentence_logprob(&hyp.tokens)?);
    }
    let mut chosen = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[chosen] {
            chosen = i;
        }
    }
    Ok(Rescored { best: hyps[chosen].clone(), chosen, scores })
}

/// Frame-level distillation loss of a decoder grid against per-token
/// teacher distributions, averaged over the aligned frames:
///
/// `-(1/F) * sum_i sum_{t in frames(i)} sum_v teacher[i][v] * ln post[t][v]`
///
/// where `F` is the total aligned frame count and `v` ranges over the
/// words (never the blank). A zero posterior under nonzero teacher mass
/// makes the loss infinite. An empty alignment scores 0.
pub fn kd_loss(
    teacher: &[Vec<f64>],
    post: &FramePosteriors,
    align: &Alignment,
) -> Result<f64, FusionError> {
    if teacher.len() != align.frames.len() {
        return Err(FusionError::LengthMismatch {
            what: "teacher distributions",
            expected: align.frames.len(),
            found: teacher.len(),
        });
    }
    let mut total_frames = 0usize;
    let mut sum = 0.0;
    for (dist, frames) in teacher.iter().zip(&align.frames) {
        if dist.len() >= post.axis_len() {
            return Err(FusionError::LengthMismatch {
                what: "teacher distribution width",
                expected: post.axis_len() - 1,
                found: dist.len(),
            });
        }
        total_frames += frames.len();
        for &t in frames {
            for (v, &mass) in dist.iter().enumerate() {
                if mass == 0.0 {
                    continue;
                }
                let p = post.prob(t, v as TokenId);
                if p == 0.0 {
                    return Ok(f64::INFINITY);
                }
                sum += mass * p.ln();
            }
        }
    }
    if total_frames == 0 {
        return Ok(0.0);
    }
    Ok(-sum / total_frames as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ctc::{forced_align, prefix_beam_search};
    use crate::lexicon::{Corpus, Vocab};
    use crate::lm::{train_ngram, NgramConfig, OracleScorer};

    fn vocab() -> Vocab {
        Vocab::from_corpus(&Corpus::parse("a b\n").unwrap()).unwrap()
    }

    /// Uniform 2-frame grid over {a, b, blank}: every beam entry keeps a
    /// meaningful score and the ranking is easy to follow.
    fn uniform_post(vocab: &Vocab) -> FramePosteriors {
        let mut row = vec![0.0; vocab.axis_len()];
        let third = 1.0 / 3.0;
        row[0] = third;
        row[1] = third;
        row[vocab.blank_id() as usize] = third;
        FramePosteriors::new(vec![row.clone(), row], 0.01).unwrap()
    }

    #[test]
    fn zero_weight_keeps_the_decoder_ranking() {
        let v = vocab();
        let post = uniform_post(&v);
        let hyps = prefix_beam_search(&post, 5, None, &v).unwrap();
        let corpus = Corpus::parse("b\nb\nb a\n").unwrap();
        let lm = train_ngram(&corpus, &v, NgramConfig { order: 2, delta: 0.1 }).unwrap();
        let out = rescore_nbest(&hyps, &RescoreLm::Ar(&lm), 0.0).unwrap();
        assert_eq!(out.chosen, 0);
        assert_eq!(out.best.tokens, hyps[0].tokens);
        for (s, h) in out.scores.iter().zip(&hyps) {
            assert_eq!(*s, h.score);
        }
    }

    #[test]
    fn strong_lm_overturns_the_ranking() {
        let v = vocab();
        let post = uniform_post(&v);
        let hyps = prefix_beam_search(&post, 5, None, &v).unwrap();
        // Decoder prefers [a]; a corpus of bare "b" pushes [b] up.
        assert_eq!(hyps[0].tokens, vec![0]);
        let corpus = Corpus::parse("b\nb\nb\n").unwrap();
        let lm = train_ngram(&corpus, &v, NgramConfig { order: 2, delta: 0.1 }).unwrap();
        let out = rescore_nbest(&hyps, &RescoreLm::Ar(&lm), 5.0).unwrap();
        assert_eq!(out.best.tokens, vec![1]);
        assert!(out.chosen > 0);
    }

    #[test]
    fn pseudo_likelihood_rescoring_picks_the_reference() {
        let v = vocab();
        let post = uniform_post(&v);
        let hyps = prefix_beam_search(&post, 5, None, &v).unwrap();
        // The oracle can only judge positions the reference covers, so
        // rescore the single-word candidates plus the empty one: the top
        // three entries here.
        assert!(hyps.iter().take(3).all(|h| h.tokens.len() <= 1));
        let oracle = OracleScorer::exact(vec![1], v.n_words()).unwrap();
        let lm = RescoreLm::Pll { scorer: &oracle, mask_id: v.mask_id() };
        let out = rescore_nbest(&hyps[..3], &lm, 100.0).unwrap();
        assert_eq!(out.best.tokens, vec![1]);
    }

    #[test]
    fn empty_nbest_is_an_error() {
        let v = vocab();
        let corpus = Corpus::parse("a\n").unwrap();
        let lm = train_ngram(&corpus, &v, NgramConfig::default()).unwrap();
        assert!(matches!(
            rescore_nbest(&[], &RescoreLm::Ar(&lm), 0.5),
            Err(FusionError::EmptyNBest)
        ));
    }

    #[test]
    fn one_hot_agreement_has_zero_loss() {
        let v = vocab();
        let axis = v.axis_len();
        let mut row = vec![0.0; axis];
        row[0] = 1.0;
        let post = FramePosteriors::new(vec![row], 0.01).unwrap();
        let align = forced_align(&post, &[0], &v).unwrap();
        let teacher = vec![vec![1.0, 0.0]];
        let loss = kd_loss(&teacher, &post, &align).unwrap();
        assert!(loss.abs() < 1e-12, "loss {loss}");
    }

    #[test]
    fn uniform_teacher_on_half_mass_costs_ln2_per_frame() {
        let v = vocab();
        let axis = v.axis_len();
        // Three frames: a, blank, b; words carry 0.5 each on emitting
        // frames, so every aligned frame contributes exactly ln 2.
        let mut fa = vec![0.0; axis];
        fa[0] = 0.5;
        fa[1] = 0.5;
        let mut blank = vec![0.0; axis];
        blank[v.blank_id() as usize] = 1.0;
        let post = FramePosteriors::new(vec![fa.clone(), blank, fa], 0.01).unwrap();
        let align = forced_align(&post, &[0, 1], &v).unwrap();
        assert_eq!(align.frames, vec![vec![0], vec![2]]);
        let teacher = vec![vec![0.5, 0.5], vec![0.5, 0.5]];
        let loss = kd_loss(&teacher, &post, &align).unwrap();
        assert!((loss - 2.0f64.ln()).abs() < 1e-12, "loss {loss}");
    }

    #[test]
    fn zero_posterior_under_teacher_mass_is_infinite() {
        let v = vocab();
        let axis = v.axis_len();
        let mut row = vec![0.0; axis];
        row[0] = 1.0;
        let post = FramePosteriors::new(vec![row], 0.01).unwrap();
        let align = forced_align(&post, &[0], &v).unwrap();
        let teacher = vec![vec![0.5, 0.5]];
        assert_eq!(kd_loss(&teacher, &post, &align).unwrap(), f64::INFINITY);
    }

    #[test]
    fn teacher_length_must_match_alignment() {
        let v = vocab();
        let axis = v.axis_len();
        let mut row = vec![0.0; axis];
        row[0] = 1.0;
        let post = FramePosteriors::new(vec![row], 0.01).unwrap();
        let align = forced_align(&post, &[0], &v).unwrap();
        assert!(matches!(
            kd_loss(&[], &post, &align),
            Err(FusionError::LengthMismatch { what: "teacher distributions", .. })
        ));
    }
}
