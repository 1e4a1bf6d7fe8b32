//! Tokenization, vocabulary, and TF-IDF keyword extraction.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: &str = "[PAD]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const MASK: &str = "[MASK]";
pub const UNK: &str = "[UNK]";

const FIXED_SPECIALS: [&str; 5] = [PAD, CLS, SEP, MASK, UNK];

/// Lowercase, split on whitespace, and emit every punctuation character as
/// its own token.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    for word in text.split_whitespace() {
        let mut current = String::new();
        for ch in word.chars() {
            if ch.is_alphanumeric() {
                current.extend(ch.to_lowercase());
            } else {
                if !current.is_empty() {
                    tokens.push(std::mem::take(&mut current));
                }
                tokens.push(ch.to_lowercase().collect());
            }
        }
        if !current.is_empty() {
            tokens.push(current);
        }
    }
    tokens
}

/// Reserved tokens are bracketed and can never come out of [`tokenize`].
pub fn is_special(token: &str) -> bool {
    token.len() > 2 && token.starts_with('[') && token.ends_with(']')
}

pub fn state_token(i: usize) -> String {
    format!("[STATE_{i}]")
}

/// Dense token ids. The reserved prefix is `[PAD] [CLS] [SEP] [MASK] [UNK]`
/// followed by `[STATE_0] .. [STATE_{max_pairs-1}]`; corpus tokens follow in
/// sorted order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
    n_state_tokens: usize,
}

impl Vocabulary {
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, max_pairs: usize) -> Self {
        let words: BTreeSet<String> = texts.into_iter().flat_map(tokenize).collect();
        let mut tokens: Vec<String> = FIXED_SPECIALS.iter().map(|s| s.to_string()).collect();
        tokens.extend((0..max_pairs).map(state_token));
        tokens.extend(words);
        Self::from_tokens(tokens).expect("freshly built vocabulary is well formed")
    }

    /// Rebuild from an id-ordered token list, validating the reserved prefix.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        for (i, s) in FIXED_SPECIALS.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*s) {
                return Err(Error::Parse(format!(
                    "vocabulary line {} must be {s}",
                    i + 1
                )));
            }
        }
        let n_state_tokens = tokens[FIXED_SPECIALS.len()..]
            .iter()
            .enumerate()
            .take_while(|(i, t)| **t == state_token(*i))
            .count();
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if ids.insert(t.clone(), i).is_some() {
                return Err(Error::Parse(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Self {
            tokens,
            ids,
            n_state_tokens,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn n_state_tokens(&self) -> usize {
        self.n_state_tokens
    }

    /// Length of the reserved prefix.
    pub fn n_reserved(&self) -> usize {
        FIXED_SPECIALS.len() + self.n_state_tokens
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.ids.get(token).copied()
    }

    pub fn id_or_unk(&self, token: &str) -> usize {
        self.id(token).unwrap_or(self.unk())
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn pad(&self) -> usize {
        0
    }
    pub fn cls(&self) -> usize {
        1
    }
    pub fn sep(&self) -> usize {
        2
    }
    pub fn mask(&self) -> usize {
        3
    }
    pub fn unk(&self) -> usize {
        4
    }

    pub fn state(&self, i: usize) -> Option<usize> {
        (i < self.n_state_tokens).then_some(FIXED_SPECIALS.len() + i)
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        tokenize(text).iter().map(|t| self.id_or_unk(t)).collect()
    }

    /// One token per line; line number is the id.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for t in &self.tokens {
            out.push_str(t);
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Self::from_tokens(text.lines().map(str::to_string).collect())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path.as_ref(), self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref()).map_err(|e| Error::io(&path, e))?;
        Self::from_text(&text)
    }
}

/// Document frequencies over a corpus where every utterance is one document.
///
/// `idf(t) = ln((1 + N) / (1 + df(t))) + 1`
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TfIdfModel {
    doc_freq: BTreeMap<String, usize>,
    n_docs: usize,
}

impl TfIdfModel {
    pub fn fit<S: AsRef<str>>(corpus: &[S]) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::Input("cannot fit tf-idf on an empty corpus".into()));
        }
        let mut doc_freq = BTreeMap::new();
        for doc in corpus {
            let terms: BTreeSet<String> = tokenize(doc.as_ref()).into_iter().collect();
            for t in terms {
                *doc_freq.entry(t).or_insert(0) += 1;
            }
        }
        Ok(Self {
            doc_freq,
            n_docs: corpus.len(),
        })
    }

    pub fn n_docs(&self) -> usize {
        self.n_docs
    }

    pub fn doc_freq(&self, term: &str) -> usize {
        self.doc_freq.get(term).copied().unwrap_or(0)
    }

    /// Known terms in sorted order; this is the feature axis of [`Self::vector`].
    pub fn terms(&self) -> impl Iterator<Item = &str> {
        self.doc_freq.keys().map(String::as_str)
    }

    pub fn n_terms(&self) -> usize {
        self.doc_freq.len()
    }

    pub fn idf(&self, term: &str) -> f64 {
        ((1 + self.n_docs) as f64 / (1 + self.doc_freq(term)) as f64).ln() + 1.0
    }

    /// `(token, tf·idf)` for each distinct token, in first-occurrence order.
    /// `tf` is the raw count of the token in the text.
    pub fn scores(&self, text: &str) -> Vec<(String, f64)> {
        let tokens = tokenize(text);
        let mut order: Vec<String> = Vec::new();
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for t in &tokens {
            let c = counts.entry(t.as_str()).or_insert(0);
            if *c == 0 {
                order.push(t.clone());
            }
            *c += 1;
        }
        order
            .into_iter()
            .map(|t| {
                let s = counts[t.as_str()] as f64 * self.idf(&t);
                (t, s)
            })
            .collect()
    }

    /// Dense tf-idf vector over [`Self::terms`]; unknown tokens are dropped.
    pub fn vector(&self, text: &str) -> Vec<f64> {
        let scores: HashMap<String, f64> = self.scores(text).into_iter().collect();
        self.doc_freq
            .keys()
            .map(|t| scores.get(t).copied().unwrap_or(0.0))
            .collect()
    }

    /// The `k` highest-scoring tokens of `text`. Ties go to the earlier token.
    pub fn extract_keywords(&self, text: &str, k: usize) -> Result<Vec<String>> {
        if k == 0 {
            return Err(Error::Parameter("keyword count k must be at least 1".into()));
        }
        let mut scored: Vec<(usize, String, f64)> = self
            .scores(text)
            .into_iter()
            .filter(|(t, _)| !is_special(t))
            .enumerate()
            .map(|(i, (t, s))| (i, t, s))
            .collect();
        // Stable sort keeps first-occurrence order among equal scores.
        scored.sort_by(|a, b| b.2.total_cmp(&a.2));
        Ok(scored.into_iter().take(k).map(|(_, t, _)| t).collect())
    }
}

/// Keywords, then the original utterance, separated by single spaces.
pub fn augment_with_keywords(utterance: &str, keywords: &[String]) -> String {
    if keywords.is_empty() {
        return utterance.to_string();
    }
    let mut out = keywords.join(" ");
    if !utterance.is_empty() {
        out.push(' ');
        out.push_str(utterance);
    }
    out
}
