//! Operations on frame-level posterior grids: collapse, greedy decoding,
//! exact sequence likelihood, forced alignment, per-token confidence, and
//! prefix beam search with optional shallow fusion.
//!
//! All likelihood math is carried in natural-log space; impossible events
//! are `f64::NEG_INFINITY`, which propagates correctly through `max` and
//! [`lse`]. Argmax ties always resolve to the lowest index.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::lexicon::Vocab;
use crate::TokenId;

#[derive(Debug, thiserror::Error)]
pub enum CtcError {
    #[error("bad posterior grid: {0}")]
    BadGrid(String),
    #[error("path length {path} != frame count {frames}")]
    PathLength { path: usize, frames: usize },
    #[error("token {id} at position {position} is not a vocabulary word")]
    InvalidToken { id: TokenId, position: usize },
    #[error("label sequence needs at least {needed} frames, grid has {frames}")]
    Infeasible { needed: usize, frames: usize },
    #[error("beam width must be at least 1")]
    ZeroBeam,
    #[error("posterior line {line}: {msg}")]
    BadRecord { line: usize, msg: String },
    #[error("vocab hash mismatch: file has {found}, vocabulary is {expected}")]
    VocabHashMismatch { expected: String, found: String },
}

/// log(exp(a) + exp(b)) without overflow; -inf is absorbing on both sides.
pub(crate) fn lse(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Index of the row maximum; ties go to the lowest index.
pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &p) in row.iter().enumerate().skip(1) {
        if p > row[best] {
            best = i;
        }
    }
    best
}

/// Per-frame categorical distributions over the vocabulary id space.
///
/// Row layout follows [`Vocab`] ids: words first, then the reserved symbols,
/// blank in the last column. Rows must each sum to 1 within 1e-6.
#[derive(Debug, Clone, PartialEq)]
pub struct FramePosteriors {
    rows: Vec<Vec<f64>>,
    frame_sec: f64,
}

impl FramePosteriors {
    pub fn new(rows: Vec<Vec<f64>>, frame_sec: f64) -> Result<Self, CtcError> {
        if !(frame_sec.is_finite() && frame_sec > 0.0) {
            return Err(CtcError::BadGrid(format!("frame_sec {frame_sec} must be positive")));
        }
        if let Some(first) = rows.first() {
            if first.len() < 2 {
                return Err(CtcError::BadGrid("rows need at least one symbol plus blank".into()));
            }
            for (t, row) in rows.iter().enumerate() {
                if row.len() != first.len() {
                    return Err(CtcError::BadGrid(format!(
                        "row {t} has {} columns, row 0 has {}",
                        row.len(),
                        first.len()
                    )));
                }
                let mut sum = 0.0;
                for (v, &p) in row.iter().enumerate() {
                    if !p.is_finite() || p < 0.0 {
                        return Err(CtcError::BadGrid(format!("row {t} column {v} is {p}")));
                    }
                    sum += p;
                }
                if (sum - 1.0).abs() > 1e-6 {
                    return Err(CtcError::BadGrid(format!("row {t} sums to {sum}")));
                }
            }
        }
        Ok(FramePosteriors { rows, frame_sec })
    }

    pub fn n_frames(&self) -> usize {
        self.rows.len()
    }

    pub fn axis_len(&self) -> usize {
        self.rows.first().map_or(0, Vec::len)
    }

    /// Blank column (always the last one).
    pub fn blank(&self) -> TokenId {
        (self.axis_len() - 1) as TokenId
    }

    pub fn frame_sec(&self) -> f64 {
        self.frame_sec
    }

    /// Audio duration represented by this grid, in seconds.
    pub fn audio_sec(&self) -> f64 {
        self.rows.len() as f64 * self.frame_sec
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.rows[t]
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn prob(&self, t: usize, v: TokenId) -> f64 {
        self.rows[t][v as usize]
    }

    /// Checks that the grid's axis matches a vocabulary's id space.
    pub fn validate_for(&self, vocab: &Vocab) -> Result<(), CtcError> {
        if self.n_frames() > 0 && self.axis_len() != vocab.axis_len() {
            return Err(CtcError::BadGrid(format!(
                "grid axis {} != vocabulary axis {}",
                self.axis_len(),
                vocab.axis_len()
            )));
        }
        Ok(())
    }
}

/// A frame-level symbol path (length always equals the frame count).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CtcPath(pub Vec<TokenId>);

/// Condense adjacent repeats, then delete blanks.
pub fn collapse(path: &[TokenId], blank: TokenId) -> Vec<TokenId> {
    let mut out = Vec::new();
    let mut prev = None;
    for &sym in path {
        if Some(sym) != prev && sym != blank {
            out.push(sym);
        }
        prev = Some(sym);
    }
    out
}

/// A decoded token sequence with per-token evidence.
///
/// `rows[i]` is the full posterior row at token `i`'s peak frame, so callers
/// downstream can re-weigh alternatives (including the blank mass) without
/// going back to the grid. `score` is the log path probability for greedy
/// output and the log prefix mass (plus any fusion term) for beam output.
#[derive(Debug, Clone)]
pub struct Hypothesis {
    pub tokens: Vec<TokenId>,
    pub confidences: Vec<f64>,
    pub rows: Vec<Vec<f64>>,
    pub score: f64,
    pub wall: Duration,
}

impl Hypothesis {
    fn empty(score: f64) -> Self {
        Hypothesis {
            tokens: Vec::new(),
            confidences: Vec::new(),
            rows: Vec::new(),
            score,
            wall: Duration::ZERO,
        }
    }
}

/// Best-path decode: per-frame argmax, then collapse.
pub fn greedy_decode(post: &FramePosteriors) -> (CtcPath, Hypothesis) {
    let start = Instant::now();
    let path: Vec<TokenId> =
        (0..post.n_frames()).map(|t| argmax(post.row(t)) as TokenId).collect();
    let path = CtcPath(path);
    // Length matches by construction, so this cannot fail.
    let mut hyp = token_confidence(post, &path).expect("argmax path has one symbol per frame");
    hyp.score = path
        .0
        .iter()
        .enumerate()
        .map(|(t, &sym)| post.prob(t, sym).ln())
        .sum();
    hyp.wall = start.elapsed();
    (path, hyp)
}

/// Aggregates a path into per-token confidences.
///
/// Each maximal run of a repeated non-blank symbol is one collapsed token;
/// the token's peak frame is the run frame with the highest posterior for
/// that symbol (earliest frame on ties), and its confidence is that value.
pub fn token_confidence(post: &FramePosteriors, path: &CtcPath) -> Result<Hypothesis, CtcError> {
    if path.0.len() != post.n_frames() {
        return Err(CtcError::PathLength { path: path.0.len(), frames: post.n_frames() });
    }
    let blank = post.blank();
    let mut hyp = Hypothesis::empty(0.0);
    let start = Instant::now();
    let mut t = 0;
    while t < path.0.len() {
        let sym = path.0[t];
        let mut end = t + 1;
        while end < path.0.len() && path.0[end] == sym {
            end += 1;
        }
        if sym != blank {
            let mut peak = t;
            for u in t + 1..end {
                if post.prob(u, sym) > post.prob(peak, sym) {
                    peak = u;
                }
            }
            hyp.tokens.push(sym);
            hyp.confidences.push(post.prob(peak, sym));
            hyp.rows.push(post.row(peak).to_vec());
        }
        t = end;
    }
    hyp.score = path.0.iter().enumerate().map(|(u, &s)| post.prob(u, s).ln()).sum();
    hyp.wall = start.elapsed();
    Ok(hyp)
}

/// Blank-interleaved label lattice shared by the forward and Viterbi passes.
/// State `2i+1` is label `y[i]`; even states are blanks.
fn lattice(y: &[TokenId], blank: TokenId) -> Vec<TokenId> {
    let mut z = Vec::with_capacity(2 * y.len() + 1);
    z.push(blank);
    for &tok in y {
        z.push(tok);
        z.push(blank);
    }
    z
}

fn check_labels(y: &[TokenId], vocab: &Vocab) -> Result<(), CtcError> {
    for (i, &tok) in y.iter().enumerate() {
        if !vocab.is_word_id(tok) {
            return Err(CtcError::InvalidToken { id: tok, position: i });
        }
    }
    Ok(())
}

fn min_frames(y: &[TokenId]) -> usize {
    y.len() + y.windows(2).filter(|w| w[0] == w[1]).count()
}

/// Exact log probability of a label sequence: the summed probability of
/// every frame path that collapses to `y`, by the forward recursion over the
/// blank-interleaved lattice. Infeasible sequences score `-inf`.
pub fn ctc_log_prob(
    post: &FramePosteriors,
    y: &[TokenId],
    vocab: &Vocab,
) -> Result<f64, CtcError> {
    check_labels(y, vocab)?;
    post.validate_for(vocab)?;
    Ok(forward_log_prob(post, y))
}

fn forward_log_prob(post: &FramePosteriors, y: &[TokenId]) -> f64 {
    let t_max = post.n_frames();
    if t_max == 0 {
        return if y.is_empty() { 0.0 } else { f64::NEG_INFINITY };
    }
    if min_frames(y) > t_max {
        return f64::NEG_INFINITY;
    }
    let z = lattice(y, post.blank());
    let s_max = z.len();
    let mut alpha = vec![f64::NEG_INFINITY; s_max];
    alpha[0] = post.prob(0, z[0]).ln();
    if s_max > 1 {
        alpha[1] = post.prob(0, z[1]).ln();
    }
    let mut next = vec![f64::NEG_INFINITY; s_max];
    for t in 1..t_max {
        for (s, slot) in next.iter_mut().enumerate() {
            let mut acc = alpha[s];
            if s >= 1 {
                acc = lse(acc, alpha[s - 1]);
            }
            if s >= 2 && z[s] != post.blank() && z[s] != z[s - 2] {
                acc = lse(acc, alpha[s - 2]);
            }
            *slot = acc + post.prob(t, z[s]).ln();
        }
        std::mem::swap(&mut alpha, &mut next);
    }
    let mut total = alpha[s_max - 1];
    if s_max > 1 {
        total = lse(total, alpha[s_max - 2]);
    }
    total
}

/// Viterbi alignment of a label sequence against a posterior grid.
#[derive(Debug, Clone)]
pub struct Alignment {
    /// Best frame path (collapses to the aligned labels).
    pub path: CtcPath,
    /// `frames[i]` lists the frames that emit label `i`: consecutive,
    /// non-empty, disjoint, and in order.
    pub frames: Vec<Vec<usize>>,
    /// Frame with the highest posterior for each label (earliest on ties).
    pub peak_frames: Vec<usize>,
    pub peak_probs: Vec<f64>,
    /// Log probability of the best path.
    pub score: f64,
}

/// Best single path that collapses to `y`, with per-label frame sets.
///
/// Structural infeasibility (too few frames for the labels and their
/// repeats) is an error, distinct from a feasible alignment whose best path
/// happens to have probability zero.
pub fn forced_align(
    post: &FramePosteriors,
    y: &[TokenId],
    vocab: &Vocab,
) -> Result<Alignment, CtcError> {
    check_labels(y, vocab)?;
    post.validate_for(vocab)?;
    viterbi(post, y)
}

fn viterbi(post: &FramePosteriors, y: &[TokenId]) -> Result<Alignment, CtcError> {
    let t_max = post.n_frames();
    let needed = min_frames(y);
    if needed > t_max {
        return Err(CtcError::Infeasible { needed, frames: t_max });
    }
    if t_max == 0 {
        return Ok(Alignment {
            path: CtcPath(Vec::new()),
            frames: Vec::new(),
            peak_frames: Vec::new(),
            peak_probs: Vec::new(),
            score: 0.0,
        });
    }

    let blank = post.blank();
    let z = lattice(y, blank);
    let s_max = z.len();
    // Reachability is tracked separately from scores: a feasible path whose
    // probability is zero still scores -inf, and the backtrace must follow
    // structurally valid transitions regardless.
    let mut score = vec![vec![f64::NEG_INFINITY; s_max]; t_max];
    let mut reach = vec![vec![false; s_max]; t_max];
    // Predecessor offset (0 = stay, 1, or 2); ties prefer staying put.
    let mut back = vec![vec![0u8; s_max]; t_max];
    score[0][0] = post.prob(0, z[0]).ln();
    reach[0][0] = true;
    if s_max > 1 {
        score[0][1] = post.prob(0, z[1]).ln();
        reach[0][1] = true;
    }
    for t in 1..t_max {
        for s in 0..s_max {
            let mut best = f64::NEG_INFINITY;
            let mut step = 0u8;
            let mut ok = false;
            let skip = s >= 2 && z[s] != blank && z[s] != z[s - 2];
            for off in 0..=2u8 {
                let offu = off as usize;
                if offu > s || (off == 2 && !skip) {
                    continue;
                }
                let prev = s - offu;
                if reach[t - 1][prev] && (!ok || score[t - 1][prev] > best) {
                    best = score[t - 1][prev];
                    step = off;
                    ok = true;
                }
            }
            if ok {
                score[t][s] = best + post.prob(t, z[s]).ln();
                reach[t][s] = true;
                back[t][s] = step;
            }
        }
    }

    let last = &reach[t_max - 1];
    let mut s = s_max - 1;
    if s_max > 1
        && last[s_max - 2]
        && (!last[s_max - 1] || score[t_max - 1][s_max - 2] > score[t_max - 1][s_max - 1])
    {
        s = s_max - 2;
    }
    debug_assert!(last[s], "feasibility check guarantees an end state");
    let total = score[t_max - 1][s];
    let mut states = vec![0usize; t_max];
    for t in (0..t_max).rev() {
        states[t] = s;
        if t > 0 {
            s -= back[t][s] as usize;
        }
    }

    let path = CtcPath(states.iter().map(|&st| z[st]).collect());
    let mut frames = vec![Vec::new(); y.len()];
    for (t, &st) in states.iter().enumerate() {
        if st % 2 == 1 {
            frames[(st - 1) / 2].push(t);
        }
    }
    let mut peak_frames = Vec::with_capacity(y.len());
    let mut peak_probs = Vec::with_capacity(y.len());
    for (i, set) in frames.iter().enumerate() {
        debug_assert!(!set.is_empty(), "every label state is visited");
        let mut peak = set[0];
        for &t in &set[1..] {
            if post.prob(t, y[i]) > post.prob(peak, y[i]) {
                peak = t;
            }
        }
        peak_frames.push(peak);
        peak_probs.push(post.prob(peak, y[i]));
    }
    Ok(Alignment { path, frames, peak_frames, peak_probs, score: total })
}

/// Language model hook for shallow fusion: log p(next | prefix).
pub trait FusionLm {
    fn token_logprob(&self, prefix: &[TokenId], next: TokenId) -> f64;
}

#[derive(Clone, Copy)]
struct BeamScore {
    /// Log mass of paths for this prefix that end in blank.
    pb: f64,
    /// Log mass of paths that end in the prefix's last symbol.
    pnb: f64,
}

impl BeamScore {
    const NONE: BeamScore = BeamScore { pb: f64::NEG_INFINITY, pnb: f64::NEG_INFINITY };

    fn total(self) -> f64 {
        lse(self.pb, self.pnb)
    }
}

/// Prefix beam search over a posterior grid.
///
/// Paths are merged per collapsed prefix with separate blank/non-blank
/// ending masses. When `fusion` is given, `weight * log p_lm(token |
/// prefix)` is added once per newly emitted token (never on blanks or
/// within-run repeats), so rank order reflects the fused score. Ranking
/// ties break toward shorter, then lexicographically smaller prefixes.
pub fn prefix_beam_search(
    post: &FramePosteriors,
    beam_width: usize,
    fusion: Option<(&dyn FusionLm, f64)>,
    vocab: &Vocab,
) -> Result<Vec<Hypothesis>, CtcError> {
    if beam_width == 0 {
        return Err(CtcError::ZeroBeam);
    }
    post.validate_for(vocab)?;
    let start = Instant::now();
    let blank = post.blank() as usize;

    let mut beam: BTreeMap<Vec<TokenId>, BeamScore> = BTreeMap::new();
    beam.insert(Vec::new(), BeamScore { pb: 0.0, pnb: f64::NEG_INFINITY });

    for t in 0..post.n_frames() {
        let row = post.row(t);
        let mut next: BTreeMap<Vec<TokenId>, BeamScore> = BTreeMap::new();
        for (prefix, &sc) in &beam {
            let total = sc.total();
            // Blank keeps the prefix as-is.
            if row[blank] > 0.0 {
                let e = next.entry(prefix.clone()).or_insert(BeamScore::NONE);
                e.pb = lse(e.pb, total + row[blank].ln());
            }
            for (v, &p) in row.iter().enumerate() {
                if v == blank || p <= 0.0 {
                    continue;
                }
                let tok = v as TokenId;
                let lp = p.ln();
                if prefix.last() == Some(&tok) {
                    // Same symbol continuing the run: no new token.
                    let e = next.entry(prefix.clone()).or_insert(BeamScore::NONE);
                    e.pnb = lse(e.pnb, sc.pnb + lp);
                    // Blank-separated repeat: extends the prefix.
                    if sc.pb > f64::NEG_INFINITY {
                        let lm = fusion.map_or(0.0, |(lm, w)| w * lm.token_logprob(prefix, tok));
                        let mut ext = prefix.clone();
                        ext.push(tok);
                        let e = next.entry(ext).or_insert(BeamScore::NONE);
                        e.pnb = lse(e.pnb, sc.pb + lp + lm);
                    }
                } else {
                    let lm = fusion.map_or(0.0, |(lm, w)| w * lm.token_logprob(prefix, tok));
                    let mut ext = prefix.clone();
                    ext.push(tok);
                    let e = next.entry(ext).or_insert(BeamScore::NONE);
                    e.pnb = lse(e.pnb, total + lp + lm);
                }
            }
        }
        let mut ranked: Vec<(Vec<TokenId>, BeamScore)> = next.into_iter().collect();
        rank(&mut ranked);
        ranked.truncate(beam_width);
        beam = ranked.into_iter().collect();
    }

    let mut ranked: Vec<(Vec<TokenId>, BeamScore)> = beam.into_iter().collect();
    rank(&mut ranked);
    ranked.truncate(beam_width);

    let mut out = Vec::with_capacity(ranked.len());
    for (tokens, sc) in ranked {
        let score = sc.total();
        let mut hyp = if tokens.is_empty() {
            Hypothesis::empty(score)
        } else {
            // Beam prefixes arise from live paths, so alignment is feasible;
            // confidences come from the aligned peak frames.
            let align = viterbi(post, &tokens)?;
            let rows = align.peak_frames.iter().map(|&t| post.row(t).to_vec()).collect();
            Hypothesis {
                tokens,
                confidences: align.peak_probs.clone(),
                rows,
                score,
                wall: Duration::ZERO,
            }
        };
        hyp.score = score;
        out.push(hyp);
    }
    let wall = start.elapsed();
    for hyp in &mut out {
        hyp.wall = wall;
    }
    Ok(out)
}

fn rank(entries: &mut [(Vec<TokenId>, BeamScore)]) {
    entries.sort_by(|(pa, sa), (pb, sb)| {
        sb.total()
            .total_cmp(&sa.total())
            .then_with(|| pa.len().cmp(&pb.len()))
            .then_with(|| pa.cmp(pb))
    });
}

/// One utterance of a posterior file (JSON Lines, one object per line).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PosteriorRecord {
    pub id: String,
    pub frame_sec: f64,
    pub vocab_hash: String,
    pub rows: Vec<Vec<f64>>,
}

impl PosteriorRecord {
    pub fn new(id: String, post: &FramePosteriors, vocab: &Vocab) -> Self {
        PosteriorRecord {
            id,
            frame_sec: post.frame_sec(),
            vocab_hash: vocab.hash(),
            rows: post.rows().to_vec(),
        }
    }

    pub fn to_line(&self) -> String {
        let mut s = serde_json::to_string(self).expect("posterior record serializes");
        s.push('\n');
        s
    }
}

/// Parses a posterior file and validates every grid against the vocabulary
/// (axis width, row sums, and the embedded vocab hash).
pub fn parse_posteriors(
    text: &str,
    vocab: &Vocab,
) -> Result<Vec<(String, FramePosteriors)>, CtcError> {
    let expected = vocab.hash();
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: PosteriorRecord = serde_json::from_str(line)
            .map_err(|e| CtcError::BadRecord { line: i + 1, msg: e.to_string() })?;
        if rec.vocab_hash != expected {
            return Err(CtcError::VocabHashMismatch { expected, found: rec.vocab_hash });
        }
        let post = FramePosteriors::new(rec.rows, rec.frame_sec)
            .map_err(|e| CtcError::BadRecord { line: i + 1, msg: e.to_string() })?;
        post.validate_for(vocab)
            .map_err(|e| CtcError::BadRecord { line: i + 1, msg: e.to_string() })?;
        out.push((rec.id, post));
    }
    Ok(out)
}
