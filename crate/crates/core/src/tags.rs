//! BIO tags, domain labels, and the canonical tag order of a label set.
//!
//! Every domain exposes `2m + 1` concrete tags for `m` labels, laid out as
//! `[O, B-l1, I-l1, B-l2, I-l2, ...]`. Matrices produced anywhere in the
//! crate (emissions, transitions, marginals) are indexed in this order.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A domain-specific slot or entity label.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Label(String);

impl Label {
    pub fn new(name: impl Into<String>) -> Result<Self> {
        let name = name.into();
        if name.is_empty() || name.chars().any(char::is_whitespace) {
            return Err(Error::InvalidLabel(name));
        }
        Ok(Label(name))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for Label {
    type Error = Error;

    fn try_from(value: String) -> Result<Self> {
        Label::new(value)
    }
}

impl From<Label> for String {
    fn from(label: Label) -> String {
        label.0
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// The three abstract labels shared by every domain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TagKind {
    Outside,
    Begin,
    Inside,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Tag {
    Outside,
    Begin(Label),
    Inside(Label),
}

impl Tag {
    pub fn kind(&self) -> TagKind {
        match self {
            Tag::Outside => TagKind::Outside,
            Tag::Begin(_) => TagKind::Begin,
            Tag::Inside(_) => TagKind::Inside,
        }
    }

    pub fn label(&self) -> Option<&Label> {
        match self {
            Tag::Outside => None,
            Tag::Begin(l) | Tag::Inside(l) => Some(l),
        }
    }

    pub fn is_outside(&self) -> bool {
        matches!(self, Tag::Outside)
    }

    /// Whether `self` may directly follow `prev` in well-formed BIO.
    /// `prev = None` means sequence start.
    pub fn may_follow(&self, prev: Option<&Tag>) -> bool {
        match self {
            Tag::Inside(l) => matches!(prev, Some(Tag::Begin(p) | Tag::Inside(p)) if p == l),
            _ => true,
        }
    }
}

impl FromStr for Tag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "O" {
            return Ok(Tag::Outside);
        }
        let bad = || Error::InvalidTag(s.to_string());
        let (prefix, label) = s.split_once('-').ok_or_else(bad)?;
        let label = Label::new(label).map_err(|_| bad())?;
        match prefix {
            "B" => Ok(Tag::Begin(label)),
            "I" => Ok(Tag::Inside(label)),
            _ => Err(bad()),
        }
    }
}

impl TryFrom<String> for Tag {
    type Error = Error;

    fn try_from(value: String) -> Result<Self> {
        value.parse()
    }
}

impl From<Tag> for String {
    fn from(tag: Tag) -> String {
        tag.to_string()
    }
}

impl fmt::Display for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Tag::Outside => f.write_str("O"),
            Tag::Begin(l) => write!(f, "B-{l}"),
            Tag::Inside(l) => write!(f, "I-{l}"),
        }
    }
}

/// Positions `j` where `Inside(l)` is not preceded by `Begin(l)` or `Inside(l)`.
pub fn validate_bio(tags: &[Tag]) -> Vec<usize> {
    tags.iter()
        .enumerate()
        .filter(|(j, tag)| !tag.may_follow(j.checked_sub(1).map(|p| &tags[p])))
        .map(|(j, _)| j)
        .collect()
}

/// An ordered set of distinct labels and its canonical tag indexing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelSet {
    labels: Vec<Label>,
    positions: HashMap<Label, usize>,
}

impl LabelSet {
    pub fn new(labels: impl IntoIterator<Item = Label>) -> Result<Self> {
        let mut out = LabelSet {
            labels: Vec::new(),
            positions: HashMap::new(),
        };
        for label in labels {
            if out.positions.contains_key(&label) {
                return Err(Error::DuplicateLabel(label.to_string()));
            }
            out.positions.insert(label.clone(), out.labels.len());
            out.labels.push(label);
        }
        Ok(out)
    }

    /// Sorted union of every label appearing in the given tag sequences.
    pub fn from_tags<'a, I>(sequences: I) -> Self
    where
        I: IntoIterator<Item = &'a [Tag]>,
    {
        let mut labels: Vec<Label> = sequences
            .into_iter()
            .flat_map(|tags| tags.iter().filter_map(Tag::label).cloned())
            .collect();
        labels.sort();
        labels.dedup();
        LabelSet::new(labels).expect("deduplicated labels")
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    /// Number of labels `m`.
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Number of concrete tags, `2m + 1`.
    pub fn num_tags(&self) -> usize {
        2 * self.labels.len() + 1
    }

    pub fn contains(&self, label: &Label) -> bool {
        self.positions.contains_key(label)
    }

    pub fn label_position(&self, label: &Label) -> Result<usize> {
        self.positions
            .get(label)
            .copied()
            .ok_or_else(|| Error::UnknownLabel(label.to_string()))
    }

    pub fn tag_index(&self, tag: &Tag) -> Result<usize> {
        Ok(match tag {
            Tag::Outside => 0,
            Tag::Begin(l) => 1 + 2 * self.label_position(l)?,
            Tag::Inside(l) => 2 + 2 * self.label_position(l)?,
        })
    }

    pub fn tag_at(&self, index: usize) -> Result<Tag> {
        if index >= self.num_tags() {
            return Err(Error::TagIndexOutOfRange {
                index,
                num_tags: self.num_tags(),
            });
        }
        if index == 0 {
            return Ok(Tag::Outside);
        }
        let label = self.labels[(index - 1) / 2].clone();
        Ok(if index % 2 == 1 {
            Tag::Begin(label)
        } else {
            Tag::Inside(label)
        })
    }

    pub fn tags(&self) -> Vec<Tag> {
        (0..self.num_tags())
            .map(|i| self.tag_at(i).expect("in range"))
            .collect()
    }

    pub fn indices_of(&self, tags: &[Tag]) -> Result<Vec<usize>> {
        tags.iter().map(|t| self.tag_index(t)).collect()
    }

    pub fn tags_of(&self, indices: &[usize]) -> Result<Vec<Tag>> {
        indices.iter().map(|&i| self.tag_at(i)).collect()
    }
}

/// Abstract kind of a concrete tag index (index 0 is `O`, odd is `B`, even is `I`).
pub fn kind_of_index(index: usize) -> TagKind {
    if index == 0 {
        TagKind::Outside
    } else if index % 2 == 1 {
        TagKind::Begin
    } else {
        TagKind::Inside
    }
}

/// Label slot of a concrete tag index, `None` for `O`.
pub fn label_slot_of_index(index: usize) -> Option<usize> {
    (index > 0).then(|| (index - 1) / 2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tag(s: &str) -> Tag {
        s.parse().unwrap()
    }

    fn set(names: &[&str]) -> LabelSet {
        LabelSet::new(names.iter().map(|n| Label::new(*n).unwrap())).unwrap()
    }

    #[test]
    fn canonical_indices() {
        let ls = set(&["l1", "l2"]);
        assert_eq!(ls.tag_index(&Tag::Outside).unwrap(), 0);
        assert_eq!(ls.tag_index(&tag("B-l1")).unwrap(), 1);
        assert_eq!(ls.tag_index(&tag("I-l2")).unwrap(), 4);
        assert_eq!(ls.num_tags(), 5);
    }

    #[test]
    fn unknown_label_is_named() {
        let ls = set(&["l1"]);
        let err = ls.tag_index(&tag("B-zzz")).unwrap_err();
        assert!(err.to_string().contains("zzz"));
    }

    #[test]
    fn label_rules() {
        assert!(Label::new("").is_err());
        assert!(Label::new("a b").is_err());
        assert!(Label::new("org-x").is_ok());
        assert!(LabelSet::new(vec![Label::new("a").unwrap(), Label::new("a").unwrap()]).is_err());
    }

    #[test]
    fn tag_parsing() {
        assert_eq!(tag("O"), Tag::Outside);
        assert_eq!(tag("B-org-x").label().unwrap().as_str(), "org-x");
        assert!("X-foo".parse::<Tag>().is_err());
        assert!("B-".parse::<Tag>().is_err());
        assert!("Bfoo".parse::<Tag>().is_err());
        assert_eq!(tag("I-loc").to_string(), "I-loc");
    }

    #[test]
    fn bio_validation_examples() {
        let v = |s: &[&str]| validate_bio(&s.iter().map(|t| tag(t)).collect::<Vec<_>>());
        assert!(v(&["B-l1", "I-l1", "O"]).is_empty());
        assert_eq!(v(&["O", "I-l1"]), vec![1]);
        assert_eq!(v(&["B-l1", "I-l2"]), vec![1]);
        assert_eq!(v(&["I-l1"]), vec![0]);
        assert!(v(&["B-l1", "I-l1", "I-l1", "B-l2"]).is_empty());
    }

    proptest! {
        #[test]
        fn index_roundtrip(m in 1usize..12) {
            let names: Vec<String> = (0..m).map(|i| format!("lab{i}")).collect();
            let ls = LabelSet::new(names.iter().map(|n| Label::new(n.clone()).unwrap())).unwrap();
            prop_assert_eq!(ls.tags().len(), 2 * m + 1);
            for i in 0..ls.num_tags() {
                let t = ls.tag_at(i).unwrap();
                prop_assert_eq!(ls.tag_index(&t).unwrap(), i);
                prop_assert_eq!(kind_of_index(i), t.kind());
            }
        }
    }
}
