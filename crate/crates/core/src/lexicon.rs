//! Vocabularies, pronunciation lexica, and line-oriented text corpora.
//!
//! A [`Vocab`] assigns dense ids to the words of a corpus in first-appearance
//! order and appends four reserved symbols: `<mask>`, `<null>`, `<unk>`, and
//! `<blank>`. The blank always takes the final id, and posterior grids are
//! laid out over the full id space so "last column" and "blank id" mean the
//! same thing everywhere (the three non-blank reserved columns simply carry
//! zero probability in any generated posterior).
//!
//! Out-of-vocabulary words are a hard error at every boundary; nothing in
//! this crate silently maps unknown words to `<unk>`.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{PhoneId, TokenId};

pub const MASK_TOKEN: &str = "<mask>";
pub const NULL_TOKEN: &str = "<null>";
pub const UNK_TOKEN: &str = "<unk>";
pub const BLANK_TOKEN: &str = "<blank>";
/// Dropout symbol used in phone inputs during training-data generation.
pub const PHONE_MASK: &str = "<pmask>";

const RESERVED: [&str; 4] = [MASK_TOKEN, NULL_TOKEN, UNK_TOKEN, BLANK_TOKEN];

#[derive(Debug, thiserror::Error)]
pub enum LexiconError {
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("utterance {0} is empty")]
    EmptyUtterance(usize),
    #[error("reserved symbol {symbol:?} appears in corpus utterance {utterance}")]
    ReservedInCorpus { symbol: String, utterance: usize },
    #[error("lexicon line {line}: {msg}")]
    Malformed { line: usize, msg: String },
    #[error("lexicon line {line}: duplicate entry for {word:?}")]
    DuplicateWord { line: usize, word: String },
    #[error("word {word:?} at position {position} is not in the {table}")]
    OutOfVocab {
        word: String,
        position: usize,
        table: &'static str,
    },
    #[error("unknown phone {0:?}")]
    UnknownPhone(String),
    #[error("token id {0} is out of range")]
    BadTokenId(TokenId),
    #[error("vocab file: {0}")]
    BadVocabFile(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One utterance per line, tokens separated by single spaces.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    utterances: Vec<Vec<String>>,
}

impl Corpus {
    pub fn new(utterances: Vec<Vec<String>>) -> Result<Self, LexiconError> {
        if utterances.is_empty() {
            return Err(LexiconError::EmptyCorpus);
        }
        for (i, u) in utterances.iter().enumerate() {
            if u.is_empty() {
                return Err(LexiconError::EmptyUtterance(i));
            }
        }
        Ok(Corpus { utterances })
    }

    pub fn parse(text: &str) -> Result<Self, LexiconError> {
        let mut utterances = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let tokens: Vec<String> = line.split_whitespace().map(str::to_owned).collect();
            if tokens.is_empty() {
                return Err(LexiconError::EmptyUtterance(i));
            }
            utterances.push(tokens);
        }
        Corpus::new(utterances)
    }

    pub fn load(path: &Path) -> Result<Self, LexiconError> {
        Corpus::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for u in &self.utterances {
            let _ = writeln!(out, "{}", u.join(" "));
        }
        out
    }

    pub fn utterances(&self) -> &[Vec<String>] {
        &self.utterances
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }
}

/// Dense word ids plus the four reserved symbols, blank last.
#[derive(Debug, Clone)]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocab {
    /// Builds a vocabulary from corpus words in first-appearance order.
    pub fn from_corpus(corpus: &Corpus) -> Result<Self, LexiconError> {
        let mut words = Vec::new();
        let mut index = HashMap::new();
        for (i, utt) in corpus.utterances().iter().enumerate() {
            for tok in utt {
                if RESERVED.contains(&tok.as_str()) {
                    return Err(LexiconError::ReservedInCorpus {
                        symbol: tok.clone(),
                        utterance: i,
                    });
                }
                if !index.contains_key(tok) {
                    index.insert(tok.clone(), words.len() as TokenId);
                    words.push(tok.clone());
                }
            }
        }
        Ok(Vocab { words, index })
    }

    pub fn from_words(words: Vec<String>) -> Result<Self, LexiconError> {
        let utt = vec![words];
        Vocab::from_corpus(&Corpus::new(utt)?)
    }

    pub fn n_words(&self) -> usize {
        self.words.len()
    }

    /// Total id count: words plus `<mask>`, `<null>`, `<unk>`, `<blank>`.
    pub fn n_ids(&self) -> usize {
        self.words.len() + 4
    }

    /// Column count of a posterior grid over this vocabulary (same as
    /// [`Vocab::n_ids`]; the blank is the last column).
    pub fn axis_len(&self) -> usize {
        self.n_ids()
    }

    pub fn mask_id(&self) -> TokenId {
        self.words.len() as TokenId
    }

    pub fn null_id(&self) -> TokenId {
        self.words.len() as TokenId + 1
    }

    pub fn unk_id(&self) -> TokenId {
        self.words.len() as TokenId + 2
    }

    pub fn blank_id(&self) -> TokenId {
        self.words.len() as TokenId + 3
    }

    pub fn is_word_id(&self, id: TokenId) -> bool {
        (id as usize) < self.words.len()
    }

    pub fn id_of(&self, word: &str) -> Option<TokenId> {
        self.index.get(word).copied().or(match word {
            MASK_TOKEN => Some(self.mask_id()),
            NULL_TOKEN => Some(self.null_id()),
            UNK_TOKEN => Some(self.unk_id()),
            BLANK_TOKEN => Some(self.blank_id()),
            _ => None,
        })
    }

    pub fn token(&self, id: TokenId) -> Result<&str, LexiconError> {
        let i = id as usize;
        if i < self.words.len() {
            Ok(&self.words[i])
        } else {
            RESERVED
                .get(i - self.words.len())
                .copied()
                .ok_or(LexiconError::BadTokenId(id))
        }
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    /// Encodes an utterance; unknown words are a hard error.
    pub fn encode(&self, words: &[String]) -> Result<Vec<TokenId>, LexiconError> {
        words
            .iter()
            .enumerate()
            .map(|(i, w)| {
                self.index
                    .get(w)
                    .copied()
                    .ok_or_else(|| LexiconError::OutOfVocab {
                        word: w.clone(),
                        position: i,
                        table: "vocabulary",
                    })
            })
            .collect()
    }

    pub fn decode(&self, ids: &[TokenId]) -> Result<Vec<String>, LexiconError> {
        ids.iter().map(|&id| self.token(id).map(str::to_owned)).collect()
    }

    /// Content hash used to pair posterior files and models with the
    /// vocabulary they were built against.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(b"ctc-correct vocab v1\n");
        for w in &self.words {
            h.update(w.as_bytes());
            h.update(b"\n");
        }
        hex::encode(h.finalize())
    }

    pub fn to_json(&self) -> String {
        #[derive(Serialize)]
        struct File<'a> {
            version: u32,
            words: &'a [String],
        }
        let mut s = serde_json::to_string_pretty(&File { version: 1, words: &self.words })
            .expect("vocab serialization cannot fail");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, LexiconError> {
        #[derive(Deserialize)]
        struct File {
            version: u32,
            words: Vec<String>,
        }
        let file: File =
            serde_json::from_str(text).map_err(|e| LexiconError::BadVocabFile(e.to_string()))?;
        if file.version != 1 {
            return Err(LexiconError::BadVocabFile(format!(
                "unsupported version {}",
                file.version
            )));
        }
        let vocab = Vocab::from_words(file.words)
            .map_err(|e| LexiconError::BadVocabFile(e.to_string()))?;
        Ok(vocab)
    }

    pub fn save(&self, path: &Path) -> Result<(), LexiconError> {
        Ok(std::fs::write(path, self.to_json())?)
    }

    pub fn load(path: &Path) -> Result<Self, LexiconError> {
        Vocab::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Pronunciation lexicon: `word<TAB>phone phone ...` per line, `#` comments.
///
/// Phone ids are assigned in first appearance order; one extra id past the
/// inventory is reserved for the [`PHONE_MASK`] dropout symbol.
#[derive(Debug, Clone)]
pub struct Lexicon {
    entries: Vec<(String, Vec<PhoneId>)>,
    word_index: HashMap<String, usize>,
    phones: Vec<String>,
    phone_index: HashMap<String, PhoneId>,
}

impl Lexicon {
    pub fn parse(text: &str) -> Result<Self, LexiconError> {
        let mut lex = Lexicon {
            entries: Vec::new(),
            word_index: HashMap::new(),
            phones: Vec::new(),
            phone_index: HashMap::new(),
        };
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim_end();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (word, pron) = line.split_once('\t').ok_or_else(|| LexiconError::Malformed {
                line: i + 1,
                msg: "expected word<TAB>phones".into(),
            })?;
            if word.is_empty() || RESERVED.contains(&word) {
                return Err(LexiconError::Malformed {
                    line: i + 1,
                    msg: format!("bad headword {word:?}"),
                });
            }
            if lex.word_index.contains_key(word) {
                return Err(LexiconError::DuplicateWord { line: i + 1, word: word.into() });
            }
            let mut ids = Vec::new();
            for p in pron.split_whitespace() {
                if p == PHONE_MASK {
                    return Err(LexiconError::Malformed {
                        line: i + 1,
                        msg: format!("{PHONE_MASK} is reserved"),
                    });
                }
                let id = *lex.phone_index.entry(p.to_owned()).or_insert_with(|| {
                    lex.phones.push(p.to_owned());
                    (lex.phones.len() - 1) as PhoneId
                });
                ids.push(id);
            }
            if ids.is_empty() {
                return Err(LexiconError::Malformed {
                    line: i + 1,
                    msg: format!("empty pronunciation for {word:?}"),
                });
            }
            lex.word_index.insert(word.to_owned(), lex.entries.len());
            lex.entries.push((word.to_owned(), ids));
        }
        if lex.entries.is_empty() {
            return Err(LexiconError::Malformed { line: 0, msg: "no entries".into() });
        }
        Ok(lex)
    }

    pub fn load(path: &Path) -> Result<Self, LexiconError> {
        Lexicon::parse(&std::fs::read_to_string(path)?)
    }

    pub fn phones_of(&self, word: &str) -> Option<&[PhoneId]> {
        self.word_index.get(word).map(|&i| self.entries[i].1.as_slice())
    }

    /// Size of the phone inventory, excluding the dropout symbol.
    pub fn n_phones(&self) -> usize {
        self.phones.len()
    }

    /// Id used for dropped-out phones in generated training inputs.
    pub fn phone_mask_id(&self) -> PhoneId {
        self.phones.len() as PhoneId
    }

    pub fn phone_name(&self, id: PhoneId) -> &str {
        if id == self.phone_mask_id() {
            PHONE_MASK
        } else {
            &self.phones[id as usize]
        }
    }

    pub fn phone_id(&self, name: &str) -> Result<PhoneId, LexiconError> {
        if name == PHONE_MASK {
            return Ok(self.phone_mask_id());
        }
        self.phone_index
            .get(name)
            .copied()
            .ok_or_else(|| LexiconError::UnknownPhone(name.to_owned()))
    }

    /// Mean pronunciation length across all entries.
    pub fn mean_pron_len(&self) -> f64 {
        let total: usize = self.entries.iter().map(|(_, p)| p.len()).sum();
        total as f64 / self.entries.len() as f64
    }

    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(b"ctc-correct lexicon v1\n");
        for (word, pron) in &self.entries {
            h.update(word.as_bytes());
            h.update(b"\t");
            let names: Vec<&str> = pron.iter().map(|&p| self.phone_name(p)).collect();
            h.update(names.join(" ").as_bytes());
            h.update(b"\n");
        }
        hex::encode(h.finalize())
    }

    /// Pronunciations re-indexed by vocabulary id; errors if any vocabulary
    /// word is missing from the lexicon.
    pub fn pron_table(&self, vocab: &Vocab) -> Result<PronTable, LexiconError> {
        let prons = vocab
            .words()
            .iter()
            .enumerate()
            .map(|(i, w)| {
                self.phones_of(w).map(<[PhoneId]>::to_vec).ok_or_else(|| {
                    LexiconError::OutOfVocab { word: w.clone(), position: i, table: "lexicon" }
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(PronTable {
            prons,
            mean_len: self.mean_pron_len(),
            n_phones: self.n_phones(),
            phone_mask: self.phone_mask_id(),
            lexicon_hash: self.hash(),
        })
    }
}

/// Pronunciations of every vocabulary word, indexed by [`TokenId`].
#[derive(Debug, Clone)]
pub struct PronTable {
    prons: Vec<Vec<PhoneId>>,
    mean_len: f64,
    n_phones: usize,
    phone_mask: PhoneId,
    lexicon_hash: String,
}

impl PronTable {
    pub fn pron(&self, word: TokenId) -> &[PhoneId] {
        &self.prons[word as usize]
    }

    pub fn n_words(&self) -> usize {
        self.prons.len()
    }

    pub fn mean_pron_len(&self) -> f64 {
        self.mean_len
    }

    pub fn n_phones(&self) -> usize {
        self.n_phones
    }

    pub fn phone_mask_id(&self) -> PhoneId {
        self.phone_mask
    }

    pub fn lexicon_hash(&self) -> &str {
        &self.lexicon_hash
    }
}

/// Concatenated pronunciation of an utterance; unknown words are an error
/// naming the word and its position.
pub fn words_to_phones(words: &[String], lex: &Lexicon) -> Result<Vec<PhoneId>, LexiconError> {
    let mut out = Vec::new();
    for (i, w) in words.iter().enumerate() {
        let pron = lex.phones_of(w).ok_or_else(|| LexiconError::OutOfVocab {
            word: w.clone(),
            position: i,
            table: "lexicon",
        })?;
        out.extend_from_slice(pron);
    }
    Ok(out)
}
