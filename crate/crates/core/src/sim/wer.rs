//! Word error rate with a full alignment backtrace.

use serde::Serialize;

use crate::TokenId;

/// One step of the minimal reference/hypothesis alignment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(tag = "op", rename_all = "kebab-case")]
pub enum WerOp {
    Match { reference: usize, hyp: usize },
    Sub { reference: usize, hyp: usize },
    Del { reference: usize },
    Ins { hyp: usize },
}

#[derive(Debug, Clone, Serialize)]
pub struct WerReport {
    pub wer: f64,
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub n_ref: usize,
    pub alignment: Vec<WerOp>,
}

/// Minimal-edit alignment of a hypothesis against its reference.
///
/// WER is `(S + D + I) / N`; an empty reference scores one full error per
/// inserted word. When several alignments tie, the backtrace prefers
/// match, then substitution, then deletion, then insertion.
pub fn wer(reference: &[TokenId], hyp: &[TokenId]) -> WerReport {
    let n = reference.len();
    let m = hyp.len();
    let mut dist = vec![vec![0usize; m + 1]; n + 1];
    for (i, row) in dist.iter_mut().enumerate() {
        row[0] = i;
    }
    for (j, cell) in dist[0].iter_mut().enumerate() {
        *cell = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = dist[i - 1][j - 1] + usize::from(reference[i - 1] != hyp[j - 1]);
            dist[i][j] = sub.min(dist[i - 1][j] + 1).min(dist[i][j - 1] + 1);
        }
    }

    let mut alignment = Vec::new();
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = dist[i][j];
        if i > 0 && j > 0 && reference[i - 1] == hyp[j - 1] && dist[i - 1][j - 1] == here {
            alignment.push(WerOp::Match { reference: i - 1, hyp: j - 1 });
            (i, j) = (i - 1, j - 1);
        } else if i > 0 && j > 0 && dist[i - 1][j - 1] + 1 == here {
            alignment.push(WerOp::Sub { reference: i - 1, hyp: j - 1 });
            (i, j) = (i - 1, j - 1);
        } else if i > 0 && dist[i - 1][j] + 1 == here {
            alignment.push(WerOp::Del { reference: i - 1 });
            i -= 1;
        } else {
            alignment.push(WerOp::Ins { hyp: j - 1 });
            j -= 1;
        }
    }
    alignment.reverse();

    let mut report = WerReport {
        wer: 0.0,
        substitutions: 0,
        deletions: 0,
        insertions: 0,
        n_ref: n,
        alignment,
    };
    for op in &report.alignment {
        match op {
            WerOp::Match { .. } => {}
            WerOp::Sub { .. } => report.substitutions += 1,
            WerOp::Del { .. } => report.deletions += 1,
            WerOp::Ins { .. } => report.insertions += 1,
        }
    }
    let errors = (report.substitutions + report.deletions + report.insertions) as f64;
    report.wer = if n == 0 { errors } else { errors / n as f64 };
    report
}

/// Corpus-level accumulator: error and reference totals pooled over
/// utterances, not an average of per-utterance rates.
#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct CorpusWer {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub n_ref: usize,
}

impl CorpusWer {
    pub fn add(&mut self, report: &WerReport) {
        self.substitutions += report.substitutions;
        self.deletions += report.deletions;
        self.insertions += report.insertions;
        self.n_ref += report.n_ref;
    }

    pub fn wer(&self) -> f64 {
        let errors = (self.substitutions + self.deletions + self.insertions) as f64;
        if self.n_ref == 0 {
            errors
        } else {
            errors / self.n_ref as f64
        }
    }
}
