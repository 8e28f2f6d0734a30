use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const RESERVED: [&str; 4] = ["PAD", "BOS", "EOS", "UNK"];

/// Token inventory with reserved ids 0..3 for PAD, BOS, EOS and UNK.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Vocabulary {
    /// Builds a vocabulary from non-reserved tokens in id order.
    pub fn from_tokens<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut v = Vocabulary {
            tokens: Vec::new(),
            ids: HashMap::new(),
        };
        for t in RESERVED.iter().map(|s| s.to_string()).chain(tokens.into_iter().map(Into::into)) {
            if v.ids.contains_key(&t) {
                return Err(Error::Contract(format!("duplicate vocabulary token {t:?}")));
            }
            v.ids.insert(t.clone(), v.tokens.len());
            v.tokens.push(t);
        }
        Ok(v)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() == RESERVED.len()
    }

    pub fn id(&self, token: &str) -> usize {
        self.ids.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.ids.contains_key(token)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    /// Joins ids back into text, dropping reserved ids.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&i| i >= RESERVED.len())
            .filter_map(|&i| self.token(i))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    /// Reads one token per line; the first four lines must be the reserved tokens.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let lines: Vec<&str> = text.lines().collect();
        for (i, r) in RESERVED.iter().enumerate() {
            if lines.get(i) != Some(r) {
                return Err(Error::FormatLine {
                    path: path.display().to_string(),
                    line: i + 1,
                    reason: format!("expected reserved token {r}"),
                });
            }
        }
        let mut seen = HashMap::new();
        for (i, t) in lines.iter().enumerate().skip(RESERVED.len()) {
            if t.is_empty() || seen.insert(*t, i).is_some() {
                return Err(Error::FormatLine {
                    path: path.display().to_string(),
                    line: i + 1,
                    reason: format!("empty or duplicate token {t:?}"),
                });
            }
        }
        Vocabulary::from_tokens(lines[RESERVED.len()..].iter().copied())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reserved_ids_and_unknowns() {
        let v = Vocabulary::from_tokens(["cat", "dog"]).unwrap();
        assert_eq!(v.id("PAD"), PAD);
        assert_eq!(v.id("cat"), 4);
        assert_eq!(v.id("zebra"), UNK);
        for id in 0..v.len() {
            assert_eq!(v.id(v.token(id).unwrap()), id);
        }
    }

    #[test]
    fn file_round_trip_and_bad_header() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vocab.txt");
        let v = Vocabulary::from_tokens(["a", "b", "c"]).unwrap();
        v.save(&p).unwrap();
        assert_eq!(Vocabulary::load(&p).unwrap(), v);
        std::fs::write(&p, "PAD\nBOS\nUNK\nEOS\na\n").unwrap();
        assert!(matches!(Vocabulary::load(&p), Err(Error::FormatLine { line: 3, .. })));
    }
}
