use std::collections::HashMap;

use crate::error::{Error, Result};

use super::{LabelSpace, LabeledText};

pub const PAD: usize = 0;
pub const OOV: usize = 1;
/// Upper clamp for the automatically chosen pad length.
pub const MAX_PAD_LEN: usize = 100;

const PAD_TOKEN: &str = "<pad>";
const OOV_TOKEN: &str = "<oov>";

/// Whitespace tokenization. `fold_case` lowercases each token; nothing else
/// (punctuation, spelling, stop words) is touched.
pub fn tokenize(text: &str, fold_case: bool) -> Vec<String> {
    text.split_whitespace()
        .map(|t| if fold_case { t.to_lowercase() } else { t.to_owned() })
        .collect()
}

/// Token ↔ id mapping. Ids 0 and 1 are reserved for padding and
/// out-of-vocabulary tokens; they never appear in the lookup index, so a
/// literal `"<pad>"` in the corpus is an ordinary token.
///
/// Equality compares the id → token mapping only.
#[derive(Clone, Debug)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    freq: Vec<u64>,
}

impl Vocabulary {
    /// Builds from tokenized training documents. Ids are assigned by
    /// descending frequency, ties broken lexicographically.
    pub fn build<I, D>(documents: I) -> Result<Self>
    where
        I: IntoIterator<Item = D>,
        D: AsRef<[String]>,
    {
        let mut counts: HashMap<String, u64> = HashMap::new();
        let mut docs = 0usize;
        for doc in documents {
            docs += 1;
            for tok in doc.as_ref() {
                *counts.entry(tok.clone()).or_insert(0) += 1;
            }
        }
        if docs == 0 {
            return Err(Error::Data("cannot build a vocabulary from an empty corpus".into()));
        }
        let mut ranked: Vec<(String, u64)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));

        let mut tokens = vec![PAD_TOKEN.to_owned(), OOV_TOKEN.to_owned()];
        let mut freq = vec![0, 0];
        let mut index = HashMap::with_capacity(ranked.len());
        for (tok, n) in ranked {
            index.insert(tok.clone(), tokens.len());
            tokens.push(tok);
            freq.push(n);
        }
        Ok(Vocabulary { tokens, index, freq })
    }

    /// Rebuilds from an ordered id → token list (as persisted). Frequencies
    /// are not persisted and come back as zero.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 2 {
            return Err(Error::Incompatible("vocabulary must contain the two reserved entries".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (id, tok) in tokens.iter().enumerate().skip(2) {
            if index.insert(tok.clone(), id).is_some() {
                return Err(Error::Incompatible(format!("duplicate vocabulary token {tok:?}")));
            }
        }
        let freq = vec![0; tokens.len()];
        Ok(Vocabulary { tokens, index, freq })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(OOV)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn frequency(&self, id: usize) -> u64 {
        self.freq.get(id).copied().unwrap_or(0)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

impl PartialEq for Vocabulary {
    fn eq(&self, other: &Self) -> bool {
        self.tokens == other.tokens
    }
}

impl Eq for Vocabulary {}

/// Fixed-length id sequence, right-padded with [`PAD`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedText {
    pub ids: Vec<usize>,
    pub true_length: usize,
    pub label: usize,
}

/// Maps tokens to ids, truncates to `max_len` and right-pads. An empty
/// token list becomes a single OOV token so `true_length ≥ 1`.
pub fn encode_pad(tokens: &[String], vocab: &Vocabulary, max_len: usize, kernel: usize, label: usize) -> Result<EncodedText> {
    if max_len < kernel {
        return Err(Error::config(format!(
            "pad length {max_len} is shorter than the convolution kernel {kernel}"
        )));
    }
    let mut ids: Vec<usize> = tokens.iter().take(max_len).map(|t| vocab.id(t)).collect();
    if ids.is_empty() {
        ids.push(OOV);
    }
    let true_length = ids.len();
    ids.resize(max_len, PAD);
    Ok(EncodedText { ids, true_length, label })
}

/// 95th percentile (nearest rank) of `lengths`, clamped to `[kernel, 100]`.
pub fn pad_length(lengths: &[usize], kernel: usize) -> usize {
    if lengths.is_empty() {
        return kernel;
    }
    let mut sorted = lengths.to_vec();
    sorted.sort_unstable();
    let rank = (0.95 * sorted.len() as f64).ceil() as usize;
    let p95 = sorted[rank.clamp(1, sorted.len()) - 1];
    p95.clamp(kernel, MAX_PAD_LEN.max(kernel))
}

/// Everything needed to turn raw text into model input.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Encoder {
    pub vocab: Vocabulary,
    pub max_len: usize,
    pub kernel: usize,
    pub fold_case: bool,
}

impl Encoder {
    /// Fits vocabulary and pad length on training data only.
    pub fn fit(train: &[LabeledText], kernel: usize, fold_case: bool, max_len: Option<usize>) -> Result<Self> {
        let docs: Vec<Vec<String>> = train.iter().map(|e| tokenize(&e.text, fold_case)).collect();
        let vocab = Vocabulary::build(&docs)?;
        let max_len = match max_len {
            Some(l) => l,
            None => {
                let lengths: Vec<usize> = docs.iter().map(|d| d.len().max(1)).collect();
                pad_length(&lengths, kernel)
            }
        };
        if max_len < kernel {
            return Err(Error::config(format!(
                "pad length {max_len} is shorter than the convolution kernel {kernel}"
            )));
        }
        Ok(Encoder {
            vocab,
            max_len,
            kernel,
            fold_case,
        })
    }

    pub fn encode_text(&self, text: &str, label: usize) -> Result<EncodedText> {
        encode_pad(&tokenize(text, self.fold_case), &self.vocab, self.max_len, self.kernel, label)
    }

    pub fn encode(&self, example: &LabeledText, space: &LabelSpace) -> Result<EncodedText> {
        let label = space.index_of(example.label).ok_or_else(|| {
            Error::Data(format!(
                "label {} is outside the {}-class label space",
                example.label,
                space.len()
            ))
        })?;
        self.encode_text(&example.text, label)
    }

    pub fn encode_all(&self, examples: &[LabeledText], space: &LabelSpace) -> Result<Vec<EncodedText>> {
        examples.iter().map(|e| self.encode(e, space)).collect()
    }
}
