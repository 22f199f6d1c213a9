use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};

pub const CLS: usize = 0;
pub const SEP: usize = 1;
pub const HEAD: usize = 2;
pub const TAIL: usize = 3;
pub const BLANK: usize = 4;
pub const MASK: usize = 5;
pub const PAD: usize = 6;
pub const UNK: usize = 7;

/// Reserved tokens, in id order.
pub const RESERVED: [&str; 8] = ["[CLS]", "[SEP]", "[head]", "[tail]", "[BLANK]", "[MASK]", "[PAD]", "[UNK]"];
pub const NUM_RESERVED: usize = RESERVED.len();

/// Dense token ↔ id map whose first eight ids are the reserved tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocabulary {
    pub fn new() -> Self {
        let mut v = Self { tokens: Vec::new(), ids: HashMap::new() };
        for t in RESERVED {
            v.add(t);
        }
        v
    }

    /// Adds `token` if missing and returns its id.
    pub fn add(&mut self, token: &str) -> usize {
        if let Some(&id) = self.ids.get(token) {
            return id;
        }
        let id = self.tokens.len();
        self.tokens.push(token.to_string());
        self.ids.insert(token.to_string(), id);
        id
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Id of `token`, or `[UNK]`.
    pub fn id(&self, token: &str) -> usize {
        self.ids.get(token).copied().unwrap_or(UNK)
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn is_special(id: usize) -> bool {
        id < NUM_RESERVED
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// One token per line; the line number is the id.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.tokens.join("\n");
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Path { path: path.to_path_buf(), message: e.to_string() })?;
        Self::from_lines(text.lines())
    }

    pub fn from_lines<'a>(lines: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        let mut v = Self { tokens: Vec::new(), ids: HashMap::new() };
        for (i, line) in lines.into_iter().enumerate() {
            if i < NUM_RESERVED && line != RESERVED[i] {
                return Err(Error::Corpus(format!(
                    "vocabulary line {} must be `{}`, found `{line}`",
                    i + 1,
                    RESERVED[i]
                )));
            }
            if line.is_empty() || v.ids.contains_key(line) {
                return Err(Error::Corpus(format!("vocabulary line {} is empty or duplicated", i + 1)));
            }
            v.add(line);
        }
        if v.len() < NUM_RESERVED {
            return Err(Error::Corpus("vocabulary is missing reserved tokens".into()));
        }
        Ok(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reserved_ids_are_fixed() {
        let v = Vocabulary::new();
        assert_eq!(v.id("[CLS]"), CLS);
        assert_eq!(v.id("[SEP]"), SEP);
        assert_eq!(v.id("[head]"), HEAD);
        assert_eq!(v.id("[tail]"), TAIL);
        assert_eq!(v.id("[BLANK]"), BLANK);
        assert_eq!(v.id("[MASK]"), MASK);
        assert_eq!(v.id("[PAD]"), PAD);
        assert_eq!(v.id("[UNK]"), UNK);
        assert_eq!(v.id("nope"), UNK);
    }

    #[test]
    fn text_round_trip() {
        let mut v = Vocabulary::new();
        v.add("alpha");
        v.add("beta");
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vocab.txt");
        v.save(&p).unwrap();
        assert_eq!(Vocabulary::load(&p).unwrap(), v);
        assert_eq!(std::fs::read_to_string(&p).unwrap().lines().nth(8), Some("alpha"));
    }

    #[test]
    fn rejects_bad_reserved_order() {
        assert!(Vocabulary::from_lines(["[SEP]", "[CLS]"]).is_err());
        let mut lines = RESERVED.to_vec();
        lines.push("x");
        lines.push("x");
        assert!(Vocabulary::from_lines(lines).is_err());
    }
}
