use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
const SPECIALS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Lowercased alphanumeric word runs.
pub fn words(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Word-level vocabulary; ids are dense and the first four are reserved.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Vocabulary {
    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < SPECIALS.len() || tokens[..4] != SPECIALS {
            return Err(Error::Input("vocabulary must start with <pad> <bos> <eos> <unk>".into()));
        }
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if ids.insert(t.clone(), i).is_some() {
                return Err(Error::Input(format!("duplicate token {t:?}")));
            }
        }
        Ok(Vocabulary { tokens, ids })
    }

    /// Tokens ranked by frequency (descending, then lexicographic), capped so
    /// that the total size including specials is at most `cap`.
    pub fn build<S: AsRef<str>>(corpus: &[S], cap: Option<usize>) -> Result<Self> {
        let mut freq: BTreeMap<String, usize> = BTreeMap::new();
        for doc in corpus {
            for w in words(doc.as_ref()) {
                *freq.entry(w).or_default() += 1;
            }
        }
        if freq.is_empty() {
            return Err(Error::Input("cannot build a vocabulary from an empty corpus".into()));
        }
        let mut ranked: Vec<(String, usize)> = freq.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let room = cap.map_or(usize::MAX, |c| c.saturating_sub(SPECIALS.len()));
        let tokens = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(ranked.into_iter().take(room).map(|(w, _)| w))
            .collect();
        Vocabulary::from_tokens(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn id(&self, word: &str) -> usize {
        self.ids.get(word).copied().unwrap_or(UNK)
    }

    /// Word ids of `text`, unknown words mapped to UNK.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        words(text).iter().map(|w| self.id(w)).collect()
    }

    /// Joins non-special tokens, stopping at the first EOS.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .take_while(|&&i| i != EOS)
            .filter(|&&i| i >= SPECIALS.len())
            .filter_map(|&i| self.token(i))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// One token per line; line number is the id.
    pub fn to_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        Vocabulary::from_tokens(text.lines().map(str::to_string).collect())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Vocabulary::parse(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

/// Fixed-length id sequence; everything after `len` is PAD.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    pub len: usize,
}

impl TokenSequence {
    /// Pads or truncates `ids` to `max_len`.
    pub fn new(mut ids: Vec<usize>, max_len: usize) -> Self {
        ids.truncate(max_len);
        let len = ids.len();
        ids.resize(max_len, PAD);
        TokenSequence { ids, len }
    }

    /// Unpadded sequence.
    pub fn exact(ids: Vec<usize>) -> Self {
        let len = ids.len();
        TokenSequence { ids, len }
    }

    /// `[BOS] words [EOS]`, unpadded and capped at `max_len`.
    pub fn sentence(vocab: &Vocabulary, text: &str, max_len: usize) -> Result<Self> {
        let body = vocab.encode(text);
        if body.is_empty() {
            return Err(Error::Input(format!("text {text:?} has no words")));
        }
        let mut ids = Vec::with_capacity(body.len() + 2);
        ids.push(BOS);
        ids.extend(body);
        ids.push(EOS);
        ids.truncate(max_len);
        Ok(TokenSequence::exact(ids))
    }

    pub fn real(&self) -> &[usize] {
        &self.ids[..self.len]
    }
}
