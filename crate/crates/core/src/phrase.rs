//! Token sequences shared by every stage.

use std::fmt;

/// A tokenized sentence. Tokens are non-empty and contain no whitespace.
pub type Sentence = Vec<String>;

/// A phrase of one or more tokens, stored as its space-joined surface form.
///
/// Because tokens never contain whitespace, the joined form is lossless and
/// orders phrases lexicographically, which the inventory and candidate
/// rankings use to break ties.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Phrase(String);

impl Phrase {
    pub fn from_tokens<S: AsRef<str>>(tokens: &[S]) -> Self {
        let mut s = String::new();
        for (i, t) in tokens.iter().enumerate() {
            if i > 0 {
                s.push(' ');
            }
            s.push_str(t.as_ref());
        }
        Phrase(s)
    }

    /// Parses a space-separated surface form, collapsing repeated whitespace.
    pub fn parse(text: &str) -> Self {
        let tokens: Vec<&str> = text.split_whitespace().collect();
        Self::from_tokens(&tokens)
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn tokens(&self) -> impl Iterator<Item = &str> {
        self.0.split(' ').filter(|t| !t.is_empty())
    }

    /// Number of tokens.
    pub fn order(&self) -> usize {
        if self.0.is_empty() {
            0
        } else {
            self.0.bytes().filter(|&b| b == b' ').count() + 1
        }
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl fmt::Display for Phrase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl fmt::Debug for Phrase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Phrase({:?})", self.0)
    }
}

impl From<&str> for Phrase {
    fn from(s: &str) -> Self {
        Phrase::parse(s)
    }
}
