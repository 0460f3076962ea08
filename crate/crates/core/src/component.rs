use std::fmt;

use serde::{Deserialize, Serialize};

/// One of the two label axes of an egocentric action.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Component {
    Verb,
    Noun,
}

impl Component {
    pub const ALL: [Component; 2] = [Component::Verb, Component::Noun];

    pub fn index(self) -> usize {
        match self {
            Component::Verb => 0,
            Component::Noun => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Component::Verb => "verb",
            Component::Noun => "noun",
        }
    }
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}
