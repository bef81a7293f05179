//! Registry of commonsense relation tags.

use std::collections::BTreeSet;

/// The nine ATOMIC-style social relations supported out of the box.
pub const DEFAULT_RELATIONS: [&str; 9] = [
    "xNeed", "xIntent", "xAttr", "xEffect", "xReact", "xWant", "oEffect", "oReact", "oWant",
];

/// Set of relation tags a store or parser will accept. User-extensible.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RelationRegistry {
    tags: BTreeSet<String>,
}

impl Default for RelationRegistry {
    fn default() -> Self {
        RelationRegistry {
            tags: DEFAULT_RELATIONS.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl RelationRegistry {
    pub fn empty() -> Self {
        RelationRegistry { tags: BTreeSet::new() }
    }

    pub fn register(&mut self, tag: impl Into<String>) {
        self.tags.insert(tag.into());
    }

    pub fn contains(&self, tag: &str) -> bool {
        self.tags.contains(tag)
    }

    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.tags.iter().map(|s| s.as_str())
    }
}
