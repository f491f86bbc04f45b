use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const OUTSIDE: &str = "O";

/// BIO tag inventory derived from an ordered list of entity types.
///
/// Tag order is `O, B-t1, I-t1, B-t2, I-t2, ...`, so `O` always has index 0.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "SchemeRepr", into = "SchemeRepr")]
pub struct LabelScheme {
    entity_types: Vec<String>,
    tags: Vec<String>,
    tag_to_index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct SchemeRepr {
    entity_types: Vec<String>,
}

impl TryFrom<SchemeRepr> for LabelScheme {
    type Error = Error;

    fn try_from(repr: SchemeRepr) -> Result<Self> {
        LabelScheme::new(repr.entity_types)
    }
}

impl From<LabelScheme> for SchemeRepr {
    fn from(scheme: LabelScheme) -> Self {
        SchemeRepr {
            entity_types: scheme.entity_types,
        }
    }
}

impl LabelScheme {
    pub fn new<S: Into<String>>(entity_types: impl IntoIterator<Item = S>) -> Result<Self> {
        let entity_types: Vec<String> = entity_types.into_iter().map(Into::into).collect();
        let mut tags = vec![OUTSIDE.to_string()];
        for ty in &entity_types {
            if ty.is_empty() || ty.contains(char::is_whitespace) {
                return Err(Error::Config(format!("invalid entity type name `{ty}`")));
            }
            tags.push(format!("B-{ty}"));
            tags.push(format!("I-{ty}"));
        }
        let mut tag_to_index = HashMap::with_capacity(tags.len());
        for (i, tag) in tags.iter().enumerate() {
            if tag_to_index.insert(tag.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate tag `{tag}` in label scheme")));
            }
        }
        Ok(LabelScheme {
            entity_types,
            tags,
            tag_to_index,
        })
    }

    /// The LOC/ORG/PER scheme used by the synthetic benchmark.
    pub fn synthetic() -> Self {
        LabelScheme::new(["LOC", "ORG", "PER"]).expect("static scheme is valid")
    }

    /// CoNLL-2002/2003 four-type scheme.
    pub fn conll() -> Self {
        LabelScheme::new(["LOC", "MISC", "ORG", "PER"]).expect("static scheme is valid")
    }

    pub fn entity_types(&self) -> &[String] {
        &self.entity_types
    }

    pub fn tags(&self) -> &[String] {
        &self.tags
    }

    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    pub fn index(&self, tag: &str) -> Result<usize> {
        self.tag_to_index
            .get(tag)
            .copied()
            .ok_or_else(|| Error::UnknownTag(tag.to_string()))
    }

    pub fn contains(&self, tag: &str) -> bool {
        self.tag_to_index.contains_key(tag)
    }

    pub fn tag(&self, index: usize) -> &str {
        &self.tags[index]
    }
}

/// Splits a tag into its BIO prefix and entity type. `O` yields `None`.
pub fn split_tag(tag: &str) -> Option<(char, &str)> {
    let mut chars = tag.chars();
    let prefix = chars.next()?;
    if (prefix == 'B' || prefix == 'I') && tag[1..].starts_with('-') {
        Some((prefix, &tag[2..]))
    } else {
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bijection_with_outside_first() {
        let scheme = LabelScheme::conll();
        assert_eq!(scheme.len(), 9);
        assert_eq!(scheme.index("O").unwrap(), 0);
        for (i, tag) in scheme.tags().iter().enumerate() {
            assert_eq!(scheme.index(tag).unwrap(), i);
            assert_eq!(scheme.tag(i), tag);
        }
    }

    #[test]
    fn duplicate_types_rejected() {
        assert!(LabelScheme::new(["PER", "PER"]).is_err());
    }

    #[test]
    fn unknown_tag_is_label_error() {
        let err = LabelScheme::synthetic().index("B-XYZ").unwrap_err();
        assert!(matches!(err, Error::UnknownTag(t) if t == "B-XYZ"));
    }

    #[test]
    fn split() {
        assert_eq!(split_tag("B-PER"), Some(('B', "PER")));
        assert_eq!(split_tag("I-LOC"), Some(('I', "LOC")));
        assert_eq!(split_tag("O"), None);
    }
}
