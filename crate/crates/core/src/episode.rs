//! Sentences, support sets and episodes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tags::{validate_bio, LabelSet, Tag};

/// A tokenized sentence with one tag per token.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawSequence")]
pub struct LabeledSequence {
    tokens: Vec<String>,
    tags: Vec<Tag>,
}

#[derive(Deserialize)]
struct RawSequence {
    tokens: Vec<String>,
    tags: Vec<Tag>,
}

impl TryFrom<RawSequence> for LabeledSequence {
    type Error = Error;

    fn try_from(raw: RawSequence) -> Result<Self> {
        LabeledSequence::new(raw.tokens, raw.tags)
    }
}

impl LabeledSequence {
    /// Builds a sequence; lengths must agree and be non-zero. BIO validity is
    /// not checked here since predictions may violate it.
    pub fn new(tokens: Vec<String>, tags: Vec<Tag>) -> Result<Self> {
        if tokens.len() != tags.len() {
            return Err(Error::LengthMismatch {
                tokens: tokens.len(),
                tags: tags.len(),
            });
        }
        if tokens.is_empty() {
            return Err(Error::EmptySequence);
        }
        Ok(LabeledSequence { tokens, tags })
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn tags(&self) -> &[Tag] {
        &self.tags
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn bio_violations(&self) -> Vec<usize> {
        validate_bio(&self.tags)
    }

    /// Whether any tag of this sentence carries `label` (B or I).
    pub fn includes(&self, label: &crate::tags::Label) -> bool {
        self.tags.iter().any(|t| t.label() == Some(label))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SupportSet {
    pub pairs: Vec<LabeledSequence>,
    pub shot: usize,
}

impl SupportSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Number of support sentences that include each label of `labels`.
    pub fn label_counts(&self, labels: &LabelSet) -> Vec<usize> {
        labels
            .labels()
            .iter()
            .map(|l| self.pairs.iter().filter(|p| p.includes(l)).count())
            .collect()
    }
}

/// One query sentence together with the support set it is labeled against.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub domain: String,
    pub query: LabeledSequence,
    pub support: SupportSet,
    /// Group key: episodes sharing a support set share this id.
    pub support_id: String,
    pub query_id: String,
}

impl Episode {
    /// Sorted labels of the support and query sentences.
    pub fn label_set(&self) -> LabelSet {
        LabelSet::from_tags(
            self.support
                .pairs
                .iter()
                .chain(std::iter::once(&self.query))
                .map(|s| s.tags()),
        )
    }

    /// Tag indices of every support sentence under `labels`.
    pub fn support_tag_indices(&self, labels: &LabelSet) -> Result<Vec<Vec<usize>>> {
        self.support.pairs.iter().map(|s| labels.indices_of(s.tags())).collect()
    }
}
