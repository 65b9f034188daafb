use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SOS: usize = 0;
pub const EOS: usize = 1;
pub const UNK: usize = 2;

/// Ordered character inventory. Ids 0..3 are `<sos>`, `<eos>`, `<unk>`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    symbols: Vec<String>,
}

impl Default for Vocabulary {
    /// `<sos> <eos> <unk>`, space, apostrophe, then `a`–`z`.
    fn default() -> Self {
        let mut symbols: Vec<String> = ["<sos>", "<eos>", "<unk>", " ", "'"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        symbols.extend(('a'..='z').map(|c| c.to_string()));
        Self { symbols }
    }
}

impl Vocabulary {
    pub fn from_symbols(symbols: Vec<String>) -> Result<Self> {
        if symbols.len() < 4
            || symbols[SOS] != "<sos>"
            || symbols[EOS] != "<eos>"
            || symbols[UNK] != "<unk>"
        {
            return Err(Error::Format(
                "vocabulary must start with <sos>, <eos>, <unk>".into(),
            ));
        }
        Ok(Self { symbols })
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    pub fn id_of(&self, c: char) -> Option<usize> {
        let mut buf = [0u8; 4];
        let s = c.encode_utf8(&mut buf);
        self.symbols.iter().skip(3).position(|x| x == s).map(|p| p + 3)
    }

    /// Ids of the ordinary (non-marker) characters, in vocabulary order.
    pub fn char_ids(&self) -> std::ops::Range<usize> {
        3..self.symbols.len()
    }

    /// Strict encoding: any character outside the vocabulary is an error.
    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.chars()
            .map(|c| {
                self.id_of(c)
                    .ok_or_else(|| Error::invalid(format!("character {c:?} is not in the vocabulary")))
            })
            .collect()
    }

    /// Encoding that maps unknown characters to `<unk>`.
    pub fn encode_lossy(&self, text: &str) -> Vec<usize> {
        text.chars().map(|c| self.id_of(c).unwrap_or(UNK)).collect()
    }

    /// Text of a token sequence with `<sos>`/`<eos>` markers dropped.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&i| i != SOS && i != EOS)
            .map(|&i| self.symbols.get(i).map(String::as_str).unwrap_or("<unk>"))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_and_round_trip() {
        let v = Vocabulary::default();
        assert_eq!(v.len(), 31);
        assert_eq!(v.id_of(' '), Some(3));
        assert_eq!(v.id_of('\''), Some(4));
        assert_eq!(v.id_of('a'), Some(5));
        let ids = v.encode("it's a test").unwrap();
        assert_eq!(v.decode(&ids), "it's a test");
        assert!(v.encode("Abc").is_err());
        assert_eq!(v.encode_lossy("x?"), vec![28, UNK]);
    }

    #[test]
    fn markers_are_not_characters() {
        let v = Vocabulary::default();
        assert_eq!(v.id_of('<'), None);
        assert_eq!(v.decode(&[SOS, 5, 6, EOS]), "ab");
    }
}
