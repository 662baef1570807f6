//! Language-agnostic text ingestion: labels, tokenization, vocabulary,
//! corpus loaders and stratified splitting.

mod corpus;
mod split;
mod vocab;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use corpus::{
    load_canonical, load_delimited, load_germeval, load_twitter, read_canonical_str, write_canonical,
    write_canonical_string, ColumnSpec, GermEvalFiles, GermEvalSplits, LoadOutcome, SkippedRow,
};
pub use split::{mix_datasets, stratified_quota, stratified_split};
pub use vocab::{encode_pad, pad_length, tokenize, Encoder, EncodedText, Vocabulary, MAX_PAD_LEN, OOV, PAD};

/// Document-level sentiment label. Declaration order is the class-index
/// order used throughout (positive, neutral, negative, irrelevant).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sentiment {
    Positive,
    Neutral,
    Negative,
    Irrelevant,
}

impl Sentiment {
    pub const ALL: [Sentiment; 4] = [
        Sentiment::Positive,
        Sentiment::Neutral,
        Sentiment::Negative,
        Sentiment::Irrelevant,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Sentiment::Positive => "positive",
            Sentiment::Neutral => "neutral",
            Sentiment::Negative => "negative",
            Sentiment::Irrelevant => "irrelevant",
        }
    }
}

impl fmt::Display for Sentiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Sentiment {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "positive" => Ok(Sentiment::Positive),
            "neutral" => Ok(Sentiment::Neutral),
            "negative" => Ok(Sentiment::Negative),
            "irrelevant" => Ok(Sentiment::Irrelevant),
            other => Err(Error::Data(format!("unknown sentiment label {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Twitter,
    Germeval,
}

impl Source {
    pub fn as_str(self) -> &'static str {
        match self {
            Source::Twitter => "twitter",
            Source::Germeval => "germeval",
        }
    }
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Source {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "twitter" => Ok(Source::Twitter),
            "germeval" => Ok(Source::Germeval),
            other => Err(Error::Data(format!("unknown dataset source {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabeledText {
    pub text: String,
    pub label: Sentiment,
    pub source: Source,
}

impl LabeledText {
    /// Rejects `irrelevant` outside the Twitter corpus.
    pub fn new(text: impl Into<String>, label: Sentiment, source: Source) -> Result<Self> {
        if label == Sentiment::Irrelevant && source != Source::Twitter {
            return Err(Error::Data(format!("label \"irrelevant\" is not valid for {source}")));
        }
        Ok(LabeledText {
            text: text.into(),
            label,
            source,
        })
    }
}

/// Ordered set of classes a model predicts.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSpace {
    classes: Vec<Sentiment>,
}

impl LabelSpace {
    pub fn three_class() -> Self {
        LabelSpace {
            classes: Sentiment::ALL[..3].to_vec(),
        }
    }

    pub fn four_class() -> Self {
        LabelSpace {
            classes: Sentiment::ALL.to_vec(),
        }
    }

    pub fn for_count(n: usize) -> Result<Self> {
        match n {
            3 => Ok(Self::three_class()),
            4 => Ok(Self::four_class()),
            other => Err(Error::config(format!("class count must be 3 or 4, got {other}"))),
        }
    }

    /// Accepts only the canonical orders produced by [`LabelSpace::three_class`]
    /// and [`LabelSpace::four_class`].
    pub fn from_classes(classes: Vec<Sentiment>) -> Result<Self> {
        let space = Self::for_count(classes.len())?;
        if space.classes != classes {
            return Err(Error::Incompatible(format!("unsupported class order {classes:?}")));
        }
        Ok(space)
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn classes(&self) -> &[Sentiment] {
        &self.classes
    }

    pub fn index_of(&self, label: Sentiment) -> Option<usize> {
        self.classes.iter().position(|&c| c == label)
    }

    pub fn label(&self, index: usize) -> Sentiment {
        self.classes[index]
    }
}

/// Per-label example counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub positive: usize,
    pub neutral: usize,
    pub negative: usize,
    pub irrelevant: usize,
}

impl ClassCounts {
    pub fn of<'a>(labels: impl IntoIterator<Item = &'a Sentiment>) -> Self {
        let mut c = ClassCounts::default();
        for &l in labels {
            *c.get_mut(l) += 1;
        }
        c
    }

    pub fn get(&self, label: Sentiment) -> usize {
        match label {
            Sentiment::Positive => self.positive,
            Sentiment::Neutral => self.neutral,
            Sentiment::Negative => self.negative,
            Sentiment::Irrelevant => self.irrelevant,
        }
    }

    fn get_mut(&mut self, label: Sentiment) -> &mut usize {
        match label {
            Sentiment::Positive => &mut self.positive,
            Sentiment::Neutral => &mut self.neutral,
            Sentiment::Negative => &mut self.negative,
            Sentiment::Irrelevant => &mut self.irrelevant,
        }
    }

    pub fn total(&self) -> usize {
        self.positive + self.neutral + self.negative + self.irrelevant
    }

    pub fn as_array(&self) -> [usize; 4] {
        Sentiment::ALL.map(|s| self.get(s))
    }
}

/// Named collection of labeled examples.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetSplit {
    pub name: String,
    pub examples: Vec<LabeledText>,
}

impl DatasetSplit {
    pub fn new(name: impl Into<String>, examples: Vec<LabeledText>) -> Self {
        DatasetSplit {
            name: name.into(),
            examples,
        }
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn counts(&self) -> ClassCounts {
        ClassCounts::of(self.examples.iter().map(|e| &e.label))
    }

    /// Copy without the examples labeled `irrelevant`.
    pub fn without_irrelevant(&self) -> DatasetSplit {
        DatasetSplit {
            name: self.name.clone(),
            examples: self
                .examples
                .iter()
                .filter(|e| e.label != Sentiment::Irrelevant)
                .cloned()
                .collect(),
        }
    }
}
