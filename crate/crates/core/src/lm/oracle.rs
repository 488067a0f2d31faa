//! Reference-backed scorer for controlled experiments.
//!
//! Where a trained model returns a distribution, the oracle returns a
//! one-hot on the reference word that belongs at the queried position (or
//! on the no-token outcome for positions it knows were inserted). Useful
//! as an upper bound and for exercising the correction pipeline without a
//! model in the loop.

use std::collections::BTreeSet;

use super::{CorrectionScorer, LmError, MaskedSequence, PllScorer, ScorerDistribution};
use crate::{PhoneId, TokenId};

#[derive(Debug, Clone)]
pub struct OracleScorer {
    reference: Vec<TokenId>,
    /// Hypothesis positions known to be insertions (own no reference word).
    inserted: BTreeSet<usize>,
    deletable: bool,
    n_words: usize,
}

impl OracleScorer {
    /// Oracle for a hypothesis aligned 1:1 with the reference
    /// (substitution-only corruption).
    pub fn exact(reference: Vec<TokenId>, n_words: usize) -> Result<Self, LmError> {
        OracleScorer::build(reference, BTreeSet::new(), false, n_words)
    }

    /// Oracle that additionally knows which hypothesis positions are
    /// insertions; those score as deletions.
    pub fn deletable(
        reference: Vec<TokenId>,
        inserted: BTreeSet<usize>,
        n_words: usize,
    ) -> Result<Self, LmError> {
        OracleScorer::build(reference, inserted, true, n_words)
    }

    fn build(
        reference: Vec<TokenId>,
        inserted: BTreeSet<usize>,
        deletable: bool,
        n_words: usize,
    ) -> Result<Self, LmError> {
        for (i, &w) in reference.iter().enumerate() {
            if w as usize >= n_words {
                return Err(LmError::ReservedToken { id: w, position: i });
            }
        }
        Ok(OracleScorer { reference, inserted, deletable, n_words })
    }

    /// Reference word for a hypothesis position: positions shift left by
    /// the number of insertions before them.
    fn reference_at(&self, position: usize) -> Result<TokenId, LmError> {
        let shift = self.inserted.range(..position).count();
        let rank = position - shift;
        self.reference.get(rank).copied().ok_or(LmError::OracleMisaligned {
            position,
            len: self.reference.len(),
        })
    }
}

impl CorrectionScorer for OracleScorer {
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
        masked: &MaskedSequence,
        _gap: &[PhoneId],
        position: usize,
    ) -> Result<ScorerDistribution, LmError> {
        if !masked.is_masked(position) {
            return Err(LmError::NotMasked(position));
        }
        if self.inserted.contains(&position) {
            return Ok(ScorerDistribution::one_hot_null(self.n_words));
        }
        let word = self.reference_at(position)?;
        Ok(ScorerDistribution::one_hot_word(self.n_words, word))
    }
}

impl PllScorer for OracleScorer {
    fn score_masked(
        &self,
        masked: &MaskedSequence,
        position: usize,
    ) -> Result<ScorerDistribution, LmError> {
        CorrectionScorer::score(self, masked, &[], position)
    }
}
