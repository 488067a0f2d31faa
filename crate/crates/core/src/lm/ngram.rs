//! Additively-smoothed n-gram language model with count backoff.
//!
//! Counts are kept for every context length from 0 to `order - 1`.
//! Conditional probabilities use the longest context whose count total is
//! nonzero (shorter contexts otherwise), then smooth additively over the
//! word vocabulary plus the end-of-sentence symbol.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::LmError;
use crate::ctc::FusionLm;
use crate::lexicon::{Corpus, Vocab};
use crate::TokenId;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NgramConfig {
    pub order: usize,
    /// Additive smoothing mass per symbol.
    pub delta: f64,
}

impl Default for NgramConfig {
    fn default() -> Self {
        NgramConfig { order: 3, delta: 0.1 }
    }
}

impl NgramConfig {
    fn validate(&self) -> Result<(), LmError> {
        if self.order == 0 {
            return Err(LmError::BadConfig("n-gram order must be at least 1".into()));
        }
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return Err(LmError::BadConfig(format!("delta {} must be positive", self.delta)));
        }
        Ok(())
    }
}

/// History symbol: sentence start padding or a word.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Hist {
    Bos,
    Word(TokenId),
}

impl Hist {
    fn encode(self) -> String {
        match self {
            Hist::Bos => "B".into(),
            Hist::Word(w) => w.to_string(),
        }
    }

    fn decode(s: &str) -> Result<Self, LmError> {
        match s {
            "B" => Ok(Hist::Bos),
            _ => s
                .parse()
                .map(Hist::Word)
                .map_err(|_| LmError::BadModelFile(format!("bad history symbol {s:?}"))),
        }
    }
}

/// What the model predicts after a history: a word or end of sentence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum NextSym {
    Word(TokenId),
    Eos,
}

impl NextSym {
    fn encode(self) -> String {
        match self {
            NextSym::Word(w) => w.to_string(),
            NextSym::Eos => "E".into(),
        }
    }

    fn decode(s: &str) -> Result<Self, LmError> {
        match s {
            "E" => Ok(NextSym::Eos),
            _ => s
                .parse()
                .map(NextSym::Word)
                .map_err(|_| LmError::BadModelFile(format!("bad next symbol {s:?}"))),
        }
    }
}

type NextCounts = BTreeMap<NextSym, u64>;

#[derive(Debug, Clone)]
pub struct NgramLm {
    pub config: NgramConfig,
    vocab_hash: String,
    n_words: usize,
    /// `tables[k]` maps a length-`k` context to its successor counts.
    tables: Vec<BTreeMap<Vec<Hist>, NextCounts>>,
}

pub fn train_ngram(corpus: &Corpus, vocab: &Vocab, config: NgramConfig) -> Result<NgramLm, LmError> {
    config.validate()?;
    let mut tables: Vec<BTreeMap<Vec<Hist>, NextCounts>> =
        vec![BTreeMap::new(); config.order];
    for utt in corpus.utterances() {
        let ids = vocab.encode(utt)?;
        let hist: Vec<Hist> = std::iter::repeat_n(Hist::Bos, config.order - 1)
            .chain(ids.iter().map(|&w| Hist::Word(w)))
            .collect();
        for t in 0..=ids.len() {
            let next = if t < ids.len() { NextSym::Word(ids[t]) } else { NextSym::Eos };
            // `hist[..t + order - 1]` ends right before position t.
            let end = t + config.order - 1;
            for (k, table) in tables.iter_mut().enumerate() {
                let context = hist[end - k..end].to_vec();
                *table.entry(context).or_default().entry(next).or_insert(0) += 1;
            }
        }
    }
    Ok(NgramLm { config, vocab_hash: vocab.hash(), n_words: vocab.n_words(), tables })
}

impl NgramLm {
    pub fn vocab_hash(&self) -> &str {
        &self.vocab_hash
    }

    pub fn n_words(&self) -> usize {
        self.n_words
    }

    fn check_word(&self, id: TokenId, position: usize) -> Result<(), LmError> {
        if (id as usize) < self.n_words {
            Ok(())
        } else {
            Err(LmError::ReservedToken { id, position })
        }
    }

    /// Log probability of `next` after `prefix`, backing off to the
    /// longest context with observed continuations.
    pub fn cond_logprob(&self, prefix: &[TokenId], next: NextSym) -> Result<f64, LmError> {
        for (i, &w) in prefix.iter().enumerate() {
            self.check_word(w, i)?;
        }
        if let NextSym::Word(w) = next {
            self.check_word(w, prefix.len())?;
        }
        let hist: Vec<Hist> = std::iter::repeat_n(Hist::Bos, self.config.order - 1)
            .chain(prefix.iter().map(|&w| Hist::Word(w)))
            .collect();
        // Symbol space: every word plus end-of-sentence.
        let k_symbols = self.n_words as f64 + 1.0;
        for k in (0..self.config.order).rev() {
            let context = &hist[hist.len() - k..];
            let row = self.tables[k].get(context);
            let total: u64 = row.map_or(0, |r| r.values().sum());
            if total == 0 && k > 0 {
                continue;
            }
            let count = row.and_then(|r| r.get(&next)).copied().unwrap_or(0);
            let p = (count as f64 + self.config.delta)
                / (total as f64 + self.config.delta * k_symbols);
            return Ok(p.ln());
        }
        unreachable!("the empty context never backs off");
    }

    /// Log probability of the whole sentence, including its termination.
    pub fn ar_logprob(&self, ids: &[TokenId]) -> Result<f64, LmError> {
        let mut total = 0.0;
        for t in 0..ids.len() {
            total += self.cond_logprob(&ids[..t], NextSym::Word(ids[t]))?;
        }
        total += self.cond_logprob(ids, NextSym::Eos)?;
        Ok(total)
    }

    pub fn to_json(&self) -> String {
        let file = ModelFile {
            version: 1,
            config: self.config,
            vocab_hash: self.vocab_hash.clone(),
            n_words: self.n_words,
            tables: self
                .tables
                .iter()
                .map(|table| {
                    table
                        .iter()
                        .map(|(ctx, counts)| {
                            let key = ctx.iter().map(|h| h.encode()).collect::<Vec<_>>().join(" ");
                            let row =
                                counts.iter().map(|(n, &c)| (n.encode(), c)).collect();
                            (key, row)
                        })
                        .collect()
                })
                .collect(),
        };
        let mut s = serde_json::to_string_pretty(&file).expect("model serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str, vocab: &Vocab) -> Result<Self, LmError> {
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
        if file.n_words != vocab.n_words() {
            return Err(LmError::BadModelFile(format!(
                "model has {} words, vocabulary has {}",
                file.n_words,
                vocab.n_words()
            )));
        }
        file.config.validate()?;
        if file.tables.len() != file.config.order {
            return Err(LmError::BadModelFile(format!(
                "order {} model with {} tables",
                file.config.order,
                file.tables.len()
            )));
        }
        let mut tables = Vec::with_capacity(file.tables.len());
        for (k, table) in file.tables.iter().enumerate() {
            let mut decoded = BTreeMap::new();
            for (key, row) in table {
                let context: Vec<Hist> = if key.is_empty() {
                    Vec::new()
                } else {
                    key.split(' ').map(Hist::decode).collect::<Result<_, _>>()?
                };
                if context.len() != k {
                    return Err(LmError::BadModelFile(format!(
                        "context {key:?} in the length-{k} table"
                    )));
                }
                let counts: NextCounts = row
                    .iter()
                    .map(|(n, &c)| Ok::<_, LmError>((NextSym::decode(n)?, c)))
                    .collect::<Result<_, _>>()?;
                decoded.insert(context, counts);
            }
            tables.push(decoded);
        }
        Ok(NgramLm { config: file.config, vocab_hash: file.vocab_hash, n_words: file.n_words, tables })
    }

    pub fn save(&self, path: &Path) -> Result<(), LmError> {
        Ok(std::fs::write(path, self.to_json())?)
    }

    pub fn load(path: &Path, vocab: &Vocab) -> Result<Self, LmError> {
        NgramLm::from_json(&std::fs::read_to_string(path)?, vocab)
    }
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    version: u32,
    config: NgramConfig,
    vocab_hash: String,
    n_words: usize,
    tables: Vec<BTreeMap<String, BTreeMap<String, u64>>>,
}

impl FusionLm for NgramLm {
    fn token_logprob(&self, prefix: &[TokenId], next: TokenId) -> f64 {
        self.cond_logprob(prefix, NextSym::Word(next))
            .expect("fusion queries use in-vocabulary words")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab(text: &str) -> (Corpus, Vocab) {
        let corpus = Corpus::parse(text).unwrap();
        let vocab = Vocab::from_corpus(&corpus).unwrap();
        (corpus, vocab)
    }

    #[test]
    fn unigram_hand_values() {
        // Corpus "a": one word count and one termination count. With
        // delta=1 and symbols {a, EOS}: P(a) = (1+1)/(2+2) = 1/2, same
        // for EOS after any history, so P("a") = 1/4.
        let (corpus, v) = vocab("a\n");
        let lm = train_ngram(&corpus, &v, NgramConfig { order: 1, delta: 1.0 }).unwrap();
        let a = v.id_of("a").unwrap();
        let p_a = lm.cond_logprob(&[], NextSym::Word(a)).unwrap();
        assert!((p_a - 0.5f64.ln()).abs() < 1e-12);
        assert!((lm.ar_logprob(&[a]).unwrap() - 0.25f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn bigram_uses_context_and_backs_off() {
        let (corpus, v) = vocab("a b\na a\n");
        let a = v.id_of("a").unwrap();
        let b = v.id_of("b").unwrap();
        let lm = train_ngram(&corpus, &v, NgramConfig { order: 2, delta: 0.5 }).unwrap();
        // Context [a]: b once ("a b"), a once ("a a"), EOS once (after
        // the second a of "a a") -- total 3.
        let p = lm.cond_logprob(&[a], NextSym::Word(b)).unwrap();
        assert!((p - ((1.0f64 + 0.5) / (3.0 + 0.5 * 3.0)).ln()).abs() < 1e-12);
        // Context [b] was observed (followed by EOS), so there is no
        // backoff; P(b | b) is the smoothed zero over 3 symbols.
        let p = lm.cond_logprob(&[b], NextSym::Word(b)).unwrap();
        assert!((p - ((0.0f64 + 0.5) / (1.0 + 0.5 * 3.0)).ln()).abs() < 1e-12);
    }

    #[test]
    fn unseen_context_backs_off_to_shorter() {
        let (corpus, v) = vocab("a b\n");
        let a = v.id_of("a").unwrap();
        let b = v.id_of("b").unwrap();
        let lm = train_ngram(&corpus, &v, NgramConfig { order: 3, delta: 0.5 }).unwrap();
        // Trigram context (b, a) is unseen and backs off to (a,), which
        // was followed by b exactly once.
        let p = lm.cond_logprob(&[b, a], NextSym::Word(b)).unwrap();
        assert!((p - ((1.0f64 + 0.5) / (1.0 + 0.5 * 3.0)).ln()).abs() < 1e-12);
        // (b, b) is unseen but (b,) has {EOS: 1}, so backoff stops at the
        // bigram level with a smoothed-zero count.
        let p = lm.cond_logprob(&[b, b], NextSym::Word(a)).unwrap();
        assert!((p - ((0.0f64 + 0.5) / (1.0 + 0.5 * 3.0)).ln()).abs() < 1e-12);
    }

    #[test]
    fn probabilities_partition_unity() {
        // Over all sentences of length < D plus all unterminated prefixes
        // of length D, the model's probabilities must sum to 1.
        let (corpus, v) = vocab("a b a\nb a\na a b\n");
        let lm = train_ngram(&corpus, &v, NgramConfig { order: 2, delta: 0.3 }).unwrap();
        fn mass(lm: &NgramLm, prefix: &mut Vec<TokenId>, depth: usize, n_words: usize) -> f64 {
            if depth == 0 {
                return 1.0;
            }
            let mut total = lm.cond_logprob(prefix, NextSym::Eos).unwrap().exp();
            for w in 0..n_words as TokenId {
                let p = lm.cond_logprob(prefix, NextSym::Word(w)).unwrap().exp();
                prefix.push(w);
                total += p * mass(lm, prefix, depth - 1, n_words);
                prefix.pop();
            }
            total
        }
        let total = mass(&lm, &mut Vec::new(), 4, v.n_words());
        assert!((total - 1.0).abs() < 1e-9, "total prefix mass {total}");
    }

    #[test]
    fn rejects_reserved_ids() {
        let (corpus, v) = vocab("a b\n");
        let lm = train_ngram(&corpus, &v, NgramConfig::default()).unwrap();
        assert!(matches!(
            lm.cond_logprob(&[v.mask_id()], NextSym::Eos),
            Err(LmError::ReservedToken { position: 0, .. })
        ));
        assert!(matches!(
            lm.ar_logprob(&[0, v.blank_id()]),
            Err(LmError::ReservedToken { position: 1, .. })
        ));
    }

    #[test]
    fn empty_sentence_is_eos_only() {
        let (corpus, v) = vocab("a\n");
        let lm = train_ngram(&corpus, &v, NgramConfig { order: 2, delta: 1.0 }).unwrap();
        let expected = lm.cond_logprob(&[], NextSym::Eos).unwrap();
        assert_eq!(lm.ar_logprob(&[]).unwrap(), expected);
    }

    #[test]
    fn round_trips_and_checks_vocab_hash() {
        let (corpus, v) = vocab("a b a\nb b\n");
        let lm = train_ngram(&corpus, &v, NgramConfig { order: 3, delta: 0.1 }).unwrap();
        let json = lm.to_json();
        let reloaded = NgramLm::from_json(&json, &v).unwrap();
        assert_eq!(reloaded.to_json(), json);
        let a = v.id_of("a").unwrap();
        assert_eq!(
            lm.ar_logprob(&[a, a]).unwrap(),
            reloaded.ar_logprob(&[a, a]).unwrap()
        );

        let (_, other) = vocab("x y\n");
        assert!(matches!(
            NgramLm::from_json(&json, &other),
            Err(LmError::HashMismatch { artifact: "vocabulary", .. })
        ));
    }
}
